//! Labeled embedding sets and the `EMB1` file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size       field
//! 0       4          magic "EMB1"
//! 4       4          u32 dim H
//! 8       4          u32 count N
//! 12      4          u32 class hint C (0 = unknown)
//! 16      N*(4+4H)   records: u32 label, then H x f32 values
//! ```
//!
//! Values are stored as 32-bit floats and widened to `f64` on load.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};

use crate::error::{Error, Result};

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 16;

/// `N` embeddings of width `H` with their integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    labels: Vec<usize>,
    class_hint: usize,
}

impl EmbeddingBatch {
    /// Builds a batch, checking shape, finiteness and (when `class_hint > 0`)
    /// the label range.
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>, class_hint: usize) -> Result<Self> {
        let batch = Self {
            vectors,
            labels,
            class_hint,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn empty(dim: usize, class_hint: usize) -> Self {
        Self {
            vectors: Array2::zeros((0, dim)),
            labels: Vec::new(),
            class_hint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.ncols() == 0 {
            return Err(Error::Invariant("embedding dim must be positive".into()));
        }
        if self.vectors.nrows() != self.labels.len() {
            return Err(Error::Invariant(format!(
                "{} vectors but {} labels",
                self.vectors.nrows(),
                self.labels.len()
            )));
        }
        if let Some((idx, _)) = self
            .vectors
            .indexed_iter()
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::Invariant(format!(
                "non-finite value at row {} column {}",
                idx.0, idx.1
            )));
        }
        if self.class_hint > 0 {
            self.check_labels(self.class_hint)?;
        }
        Ok(())
    }

    /// Fails if any label is `>= classes`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_hint(&self) -> usize {
        self.class_hint
    }

    pub fn with_class_hint(mut self, class_hint: usize) -> Result<Self> {
        self.class_hint = class_hint;
        self.validate()?;
        Ok(self)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            vectors: self.vectors.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_hint: self.class_hint,
        }
    }

    /// Keeps the samples whose label satisfies `keep`.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.labels[i])).collect();
        self.select(&idx)
    }

    /// Row-wise concatenation. All parts must share the same width.
    pub fn concat(parts: &[&EmbeddingBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero batches".into()))?;
        let dim = first.dim();
        if let Some(p) = parts.iter().find(|p| p.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: p.dim(),
            });
        }
        let views: Vec<_> = parts.iter().map(|p| p.vectors.view()).collect();
        let vectors = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Invariant(e.to_string()))?;
        let labels = parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let class_hint = parts.iter().map(|p| p.class_hint).max().unwrap_or(0);
        Ok(Self {
            vectors,
            labels,
            class_hint,
        })
    }

    /// Rounds every value to the nearest `f32`, i.e. what a write/read cycle
    /// would produce.
    pub fn quantize_f32(mut self) -> Self {
        self.vectors.mapv_inplace(|v| v as f32 as f64);
        self
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<usize>) {
        (self.vectors, self.labels)
    }
}

/// Train, validation and test batches of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: EmbeddingBatch,
    pub validation: EmbeddingBatch,
    pub test: EmbeddingBatch,
}

impl SplitSet {
    pub fn map(&self, f: impl Fn(&EmbeddingBatch) -> EmbeddingBatch) -> SplitSet {
        SplitSet {
            train: f(&self.train),
            validation: f(&self.validation),
            test: f(&self.test),
        }
    }
}

/// Writes `batch` in `EMB1` format. The batch is validated first, so an
/// invalid batch leaves no file behind.
pub fn write_batch(batch: &EmbeddingBatch, path: impl AsRef<Path>) -> Result<()> {
    batch.validate()?;
    let bytes = encode_batch(batch)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn encode_batch(batch: &EmbeddingBatch) -> Result<Vec<u8>> {
    let dim = u32_field(batch.dim(), "dim")?;
    let count = u32_field(batch.len(), "count")?;
    let hint = u32_field(batch.class_hint, "class hint")?;
    let mut buf = Vec::with_capacity(HEADER_LEN + batch.len() * (4 + 4 * batch.dim()));
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&hint.to_le_bytes());
    for (row, &label) in batch.vectors.rows().into_iter().zip(&batch.labels) {
        buf.extend_from_slice(&u32_field(label, "label")?.to_le_bytes());
        for &v in row {
            let narrowed = v as f32;
            if !narrowed.is_finite() {
                return Err(Error::Invariant(format!("value {v} overflows f32")));
            }
            buf.extend_from_slice(&narrowed.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn read_batch(path: impl AsRef<Path>) -> Result<EmbeddingBatch> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_batch(&bytes)
}

pub fn decode_batch(bytes: &[u8]) -> Result<EmbeddingBatch> {
    if bytes.len() < 4 || &bytes[..4] != EMB_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic {
            expected: "EMB1".into(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("header shorter than 16 bytes".into()));
    }
    let dim = read_u32(bytes, 4) as usize;
    let count = read_u32(bytes, 8) as usize;
    let hint = read_u32(bytes, 12) as usize;
    if dim == 0 {
        return Err(Error::Format("dim is zero".into()));
    }
    let record_len = 4 + 4 * dim;
    let expected = HEADER_LEN + count * record_len;
    if bytes.len() < expected {
        let record = (bytes.len() - HEADER_LEN) / record_len;
        return Err(Error::Truncated { record });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {} records",
            bytes.len() - expected,
            count
        )));
    }

    let mut vectors = Array2::zeros((count, dim));
    let mut labels = Vec::with_capacity(count);
    for (i, mut row) in vectors.rows_mut().into_iter().enumerate() {
        let base = HEADER_LEN + i * record_len;
        labels.push(read_u32(bytes, base) as usize);
        for (j, v) in row.iter_mut().enumerate() {
            let off = base + 4 + 4 * j;
            *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        }
    }
    EmbeddingBatch::new(vectors, labels, hint)
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invariant(format!("{what} {v} does not fit in u32")))
}
