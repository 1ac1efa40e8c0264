//! Streaming sufficient statistics for ridge regression on projected
//! features: the Gram matrix `G = sum v v^T` and the unnormalized prototype
//! matrix `K = sum v y^T`, plus per-class sample counters.
//!
//! `G` is kept exactly symmetric: each batch contribution `V^T V` is computed
//! once, its upper triangle mirrored onto the lower, and the result added.
//! The statistics are plain sums, so partial statistics over any partition
//! of the stream merge into the statistics of the whole stream.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STA_MAGIC: &[u8; 4] = b"STA1";
const STA_HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    gram: Array2<f64>,
    prototypes: Array2<f64>,
    counts: Vec<u64>,
}

impl SufficientStats {
    pub fn new(q_dim: usize, class_count: usize) -> Result<Self> {
        if q_dim == 0 || class_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "stats dims must be positive, got Q={q_dim} C={class_count}"
            )));
        }
        Ok(Self {
            gram: Array2::zeros((q_dim, q_dim)),
            prototypes: Array2::zeros((q_dim, class_count)),
            counts: vec![0; class_count],
        })
    }

    pub fn q_dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn gram(&self) -> &Array2<f64> {
        &self.gram
    }

    pub fn prototypes(&self) -> &Array2<f64> {
        &self.prototypes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn samples_seen(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds `N` feature rows with their labels.
    pub fn update(&mut self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        if features.ncols() != self.q_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.q_dim(),
                found: features.ncols(),
            });
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                found: labels.len(),
            });
        }
        let classes = self.class_count();
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if labels.is_empty() {
            return Ok(());
        }

        let mut contribution = Array2::zeros((self.q_dim(), self.q_dim()));
        ndarray::linalg::general_mat_mul(1.0, &features.t(), &features, 0.0, &mut contribution);
        mirror_upper(&mut contribution);
        self.gram += &contribution;

        // K += V^T Y with one-hot Y, accumulated class by class
        for (row, &label) in features.rows().into_iter().zip(labels) {
            self.prototypes.column_mut(label).scaled_add(1.0, &row);
            self.counts[label] += 1;
        }
        Ok(())
    }

    pub fn merge(&self, other: &SufficientStats) -> Result<SufficientStats> {
        let mut out = self.clone();
        out.merge_in(other)?;
        Ok(out)
    }

    pub fn merge_in(&mut self, other: &SufficientStats) -> Result<()> {
        if other.q_dim() != self.q_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.q_dim(),
                found: other.q_dim(),
            });
        }
        if other.class_count() != self.class_count() {
            return Err(Error::DimensionMismatch {
                expected: self.class_count(),
                found: other.class_count(),
            });
        }
        self.gram += &other.gram;
        self.prototypes += &other.prototypes;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `STA1` encoding, little-endian:
    /// magic, u32 Q, u32 C, u32 reserved (0), then `G` row-major as f64,
    /// `K` row-major as f64, and the C per-class counters as u64.
    /// Total size: `16 + 8 * (Q*Q + Q*C) + 8 * C` bytes.
    pub fn snapshot(&self) -> Vec<u8> {
        let (q, c) = (self.q_dim(), self.class_count());
        let mut buf = Vec::with_capacity(snapshot_len(q, c));
        buf.extend_from_slice(STA_MAGIC);
        buf.extend_from_slice(&(q as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        for v in self.gram.iter().chain(self.prototypes.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for n in &self.counts {
            buf.extend_from_slice(&n.to_le_bytes());
        }
        buf
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != STA_MAGIC {
            return Err(Error::BadMagic {
                expected: "STA1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        if bytes.len() < STA_HEADER {
            return Err(Error::Format("STA1 header truncated".into()));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (q, c) = (u32_at(4), u32_at(8));
        if q == 0 || c == 0 {
            return Err(Error::Format(format!("STA1 dims Q={q} C={c}")));
        }
        let expected = snapshot_len(q, c);
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "STA1 size mismatch: expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut words = bytes[STA_HEADER..]
            .chunks_exact(8)
            .map(|w| w.try_into().unwrap());
        let mut next_f64 = || f64::from_le_bytes(words.next().unwrap());
        let gram = Array2::from_shape_simple_fn((q, q), &mut next_f64);
        let prototypes = Array2::from_shape_simple_fn((q, c), &mut next_f64);
        let counts = bytes[expected - 8 * c..]
            .chunks_exact(8)
            .map(|w| u64::from_le_bytes(w.try_into().unwrap()))
            .collect();
        for i in 0..q {
            for j in 0..i {
                if gram[[i, j]].to_bits() != gram[[j, i]].to_bits() {
                    return Err(Error::Format(format!("STA1 gram not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self {
            gram,
            prototypes,
            counts,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.snapshot())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::restore(&fs::read(path)?)
    }

    /// SHA-256 of the snapshot encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        let (q, c) = (self.q_dim(), self.class_count());
        let mut h = Sha256::new();
        h.update(STA_MAGIC);
        h.update((q as u32).to_le_bytes());
        h.update((c as u32).to_le_bytes());
        h.update(0u32.to_le_bytes());
        for v in self.gram.iter().chain(self.prototypes.iter()) {
            h.update(v.to_le_bytes());
        }
        for n in &self.counts {
            h.update(n.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn snapshot_len(q: usize, c: usize) -> usize {
    STA_HEADER + 8 * (q * q + q * c) + 8 * c
}

fn mirror_upper(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            m[[i, j]] = m[[j, i]];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(n: usize, q: usize, c: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array2::from_shape_simple_fn((n, q), || rng.random_range(0.0..3.0));
        let y = (0..n).map(|_| rng.random_range(0..c)).collect();
        (v, y)
    }

    fn rel_frob(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let d = (a - b).iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / s.max(1.0)
    }

    #[test]
    fn new_is_zero() {
        let s = SufficientStats::new(4, 2).unwrap();
        assert_eq!(s.gram(), &Array2::<f64>::zeros((4, 4)));
        assert_eq!(s.prototypes(), &Array2::<f64>::zeros((4, 2)));
        assert_eq!(s.gram().diag().sum(), 0.0);
        assert_eq!(s.prototypes().sum(), 0.0);
        assert!(SufficientStats::new(0, 2).is_err());
        assert!(SufficientStats::new(2, 0).is_err());
    }

    #[test]
    fn single_outer_product() {
        let mut s = SufficientStats::new(2, 2).unwrap();
        s.update(array![[1.0, 2.0]].view(), &[0]).unwrap();
        assert_eq!(s.gram(), &array![[1.0, 2.0], [2.0, 4.0]]);
        assert_eq!(s.prototypes(), &array![[1.0, 0.0], [2.0, 0.0]]);
        assert_eq!(s.counts(), &[1, 0]);

        let mut twice = SufficientStats::new(2, 2).unwrap();
        twice
            .update(array![[1.0, 2.0], [1.0, 2.0]].view(), &[0, 0])
            .unwrap();
        assert_eq!(twice.gram(), &(s.gram() * 2.0));
        assert_eq!(twice.prototypes(), &(s.prototypes() * 2.0));
    }

    #[test]
    fn errors() {
        let mut s = SufficientStats::new(2, 2).unwrap();
        assert!(s.update(array![[1.0, 2.0, 3.0]].view(), &[0]).is_err());
        assert!(matches!(
            s.update(array![[1.0, 2.0]].view(), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(s.merge(&SufficientStats::new(3, 2).unwrap()).is_err());
        assert!(s.merge(&SufficientStats::new(2, 3).unwrap()).is_err());
    }

    #[test]
    fn batch_equals_single_sample_stream() {
        let (v, y) = random_stream(50, 6, 3, 1);
        let mut batch = SufficientStats::new(6, 3).unwrap();
        batch.update(v.view(), &y).unwrap();
        let mut stream = SufficientStats::new(6, 3).unwrap();
        for (i, row) in v.axis_iter(Axis(0)).enumerate() {
            stream
                .update(row.insert_axis(Axis(0)), &y[i..i + 1])
                .unwrap();
        }
        assert!(rel_frob(batch.gram(), stream.gram()) <= 1e-10);
        assert!(rel_frob(batch.prototypes(), stream.prototypes()) <= 1e-10);
        assert_eq!(batch.counts(), stream.counts());
    }

    #[test]
    fn matches_dense_oracle() {
        let (v, y) = random_stream(40, 5, 4, 2);
        let mut s = SufficientStats::new(5, 4).unwrap();
        s.update(v.view(), &y).unwrap();
        // naive triple loops
        let mut g = Array2::<f64>::zeros((5, 5));
        let mut k = Array2::<f64>::zeros((5, 4));
        for m in 0..40 {
            for i in 0..5 {
                for j in 0..5 {
                    g[[i, j]] += v[[m, i]] * v[[m, j]];
                }
                k[[i, y[m]]] += v[[m, i]];
            }
        }
        assert!(rel_frob(s.gram(), &g) <= 1e-12);
        assert!(rel_frob(s.prototypes(), &k) <= 1e-12);
    }

    #[test]
    fn merge_identity_commutativity_partition() {
        let (v, y) = random_stream(60, 4, 3, 3);
        let mut whole = SufficientStats::new(4, 3).unwrap();
        whole.update(v.view(), &y).unwrap();
        let zero = SufficientStats::new(4, 3).unwrap();
        assert_eq!(whole.merge(&zero).unwrap(), whole);

        let mut a = SufficientStats::new(4, 3).unwrap();
        a.update(v.slice(ndarray::s![..23, ..]), &y[..23]).unwrap();
        let mut b = SufficientStats::new(4, 3).unwrap();
        b.update(v.slice(ndarray::s![23.., ..]), &y[23..]).unwrap();
        let ab = a.merge(&b).unwrap();
        assert_eq!(ab, b.merge(&a).unwrap());
        assert!(rel_frob(ab.gram(), whole.gram()) <= 1e-10);
        assert!(rel_frob(ab.prototypes(), whole.prototypes()) <= 1e-10);
        assert_eq!(ab.counts(), whole.counts());
    }

    #[test]
    fn prototype_column_is_class_sum() {
        let (v, y) = random_stream(30, 3, 2, 4);
        let mut s = SufficientStats::new(3, 2).unwrap();
        s.update(v.view(), &y).unwrap();
        for c in 0..2 {
            let mut sum = ndarray::Array1::<f64>::zeros(3);
            for (row, &l) in v.rows().into_iter().zip(&y) {
                if l == c {
                    sum += &row;
                }
            }
            assert!((&sum - &s.prototypes().column(c)).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn snapshot_layout_and_roundtrip() {
        let (v, y) = random_stream(10, 4, 2, 5);
        let mut s = SufficientStats::new(4, 2).unwrap();
        s.update(v.view(), &y).unwrap();
        let bytes = s.snapshot();
        assert_eq!(bytes.len(), 16 + 8 * (16 + 8) + 8 * 2);
        let back = SufficientStats::restore(&bytes).unwrap();
        assert!(back
            .gram()
            .iter()
            .zip(s.gram())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, s);
        assert_eq!(
            s.fingerprint(),
            hex::encode(Sha256::digest(&bytes)),
            "streamed fingerprint must hash the snapshot bytes"
        );
        assert!(SufficientStats::restore(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            SufficientStats::restore(&bad),
            Err(Error::BadMagic { .. })
        ));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_symmetric(seed in any::<u64>()) {
            let (v, y) = random_stream(25, 5, 3, seed);
            let mut order: Vec<usize> = (0..25).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
            let mut a = SufficientStats::new(5, 3).unwrap();
            a.update(v.view(), &y).unwrap();
            let mut b = SufficientStats::new(5, 3).unwrap();
            for chunk in order.chunks(4) {
                let rows = v.select(Axis(0), chunk);
                let labels: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                b.update(rows.view(), &labels).unwrap();
            }
            prop_assert!(rel_frob(a.gram(), b.gram()) <= 1e-10);
            prop_assert!(rel_frob(a.prototypes(), b.prototypes()) <= 1e-10);
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(b.gram()[[i, j]].to_bits(), b.gram()[[j, i]].to_bits());
                    prop_assert!(b.gram()[[i, j]] >= 0.0);
                }
            }
            // PSD + lambda I factors
            prop_assert!(crate::linalg::Cholesky::factor_shifted(b.gram().view(), 1e-6).is_ok());
        }
    }
}
