//! Frozen random feature expansion: `v = psi(f^T W)`.
//!
//! `W` is `H x Q` with i.i.d. standard normal entries drawn, row-major, from
//! `ChaCha8Rng::seed_from_u64(seed)` through `rand_distr::StandardNormal`.
//! The same `(seed, H, Q)` always yields bit-identical weights.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ndarray::parallel::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

pub const PRJ_MAGIC: &[u8; 4] = b"PRJ1";
/// Distribution tag stored in `PRJ1` files: standard normal via ChaCha8.
pub const DIST_STD_NORMAL_CHACHA8: u32 = 0;

const PARALLEL_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Identity,
}

impl Nonlinearity {
    fn tag(self) -> u32 {
        match self {
            Nonlinearity::Relu => 0,
            Nonlinearity::Identity => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Nonlinearity::Relu),
            1 => Ok(Nonlinearity::Identity),
            t => Err(Error::Format(format!("unknown nonlinearity tag {t}"))),
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => x.max(0.0),
            Nonlinearity::Identity => x,
        }
    }
}

/// Where the weights came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Seeded(u64),
    /// Supplied explicitly (tests and the identity ablation hook).
    Explicit,
}

#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    weights: Array2<f64>,
    nonlinearity: Nonlinearity,
    source: WeightSource,
}

/// Projected features with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    /// Embeddings used directly as features.
    pub fn raw(batch: &EmbeddingBatch) -> Self {
        Self {
            features: batch.vectors().clone(),
            labels: batch.labels().to_vec(),
        }
    }
}

/// How embeddings become head features.
#[derive(Debug, Clone)]
pub enum FeatureMap {
    /// Embeddings are used as-is (the no-projection ablation).
    Raw { dim: usize },
    Projected(ProjectionMatrix),
}

impl FeatureMap {
    pub fn in_dim(&self) -> usize {
        match self {
            FeatureMap::Raw { dim } => *dim,
            FeatureMap::Projected(p) => p.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            FeatureMap::Raw { dim } => *dim,
            FeatureMap::Projected(p) => p.out_dim(),
        }
    }

    pub fn apply(&self, batch: &EmbeddingBatch) -> Result<FeatureBatch> {
        match self {
            FeatureMap::Raw { dim } => {
                if batch.dim() != *dim {
                    return Err(Error::DimensionMismatch {
                        expected: *dim,
                        found: batch.dim(),
                    });
                }
                Ok(FeatureBatch::raw(batch))
            }
            FeatureMap::Projected(p) => p.project(batch),
        }
    }
}

impl ProjectionMatrix {
    pub fn generate(
        in_dim: usize,
        out_dim: usize,
        seed: u64,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "projection dims must be positive, got {in_dim}x{out_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_simple_fn((in_dim, out_dim), || {
            StandardNormal.sample(&mut rng)
        });
        Ok(Self {
            weights,
            nonlinearity,
            source: WeightSource::Seeded(seed),
        })
    }

    pub fn from_weights(weights: Array2<f64>, nonlinearity: Nonlinearity) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("empty projection weights".into()));
        }
        Ok(Self {
            weights,
            nonlinearity,
            source: WeightSource::Explicit,
        })
    }

    /// `W = I_dim`, used to show that a square identity projection without a
    /// nonlinearity reproduces the raw embeddings.
    pub fn identity(dim: usize, nonlinearity: Nonlinearity) -> Result<Self> {
        Self::from_weights(Array2::eye(dim), nonlinearity)
    }

    pub fn in_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn source(&self) -> WeightSource {
        self.source
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn project(&self, batch: &EmbeddingBatch) -> Result<FeatureBatch> {
        Ok(FeatureBatch {
            features: self.project_matrix(batch.vectors().view())?,
            labels: batch.labels().to_vec(),
        })
    }

    /// `psi(F W)` for an `N x H` matrix `F`.
    pub fn project_matrix(&self, embeddings: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if embeddings.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                found: embeddings.ncols(),
            });
        }
        let n = embeddings.nrows();
        let mut out = Array2::zeros((n, self.out_dim()));
        if n <= PARALLEL_ROWS {
            ndarray::linalg::general_mat_mul(1.0, &embeddings, &self.weights, 0.0, &mut out);
        } else {
            // disjoint row blocks, no coordination needed
            out.axis_chunks_iter_mut(ndarray::Axis(0), PARALLEL_ROWS)
                .into_par_iter()
                .zip(
                    embeddings
                        .axis_chunks_iter(ndarray::Axis(0), PARALLEL_ROWS)
                        .into_par_iter(),
                )
                .for_each(|(mut o, e)| {
                    ndarray::linalg::general_mat_mul(1.0, &e, &self.weights, 0.0, &mut o);
                });
        }
        if self.nonlinearity == Nonlinearity::Relu {
            out.mapv_inplace(|x| x.max(0.0));
        }
        Ok(out)
    }

    /// `PRJ1` checkpoint: magic, u32 H, u32 Q, u64 seed, u32 nonlinearity
    /// tag, u32 distribution tag (28 bytes, little-endian). Only seeded
    /// projections can be checkpointed; the weights are regenerated on load.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let WeightSource::Seeded(seed) = self.source else {
            return Err(Error::InvalidArgument(
                "explicit projection weights cannot be checkpointed".into(),
            ));
        };
        let mut buf = Vec::with_capacity(28);
        buf.extend_from_slice(PRJ_MAGIC);
        buf.extend_from_slice(&(self.in_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.out_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&seed.to_le_bytes());
        buf.extend_from_slice(&self.nonlinearity.tag().to_le_bytes());
        buf.extend_from_slice(&DIST_STD_NORMAL_CHACHA8.to_le_bytes());
        Ok(buf)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != PRJ_MAGIC {
            return Err(Error::BadMagic {
                expected: "PRJ1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        if bytes.len() != 28 {
            return Err(Error::Format(format!(
                "PRJ1 checkpoint must be 28 bytes, got {}",
                bytes.len()
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let in_dim = u32_at(4) as usize;
        let out_dim = u32_at(8) as usize;
        let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let nonlinearity = Nonlinearity::from_tag(u32_at(20))?;
        let dist = u32_at(24);
        if dist != DIST_STD_NORMAL_CHACHA8 {
            return Err(Error::Format(format!("unknown distribution tag {dist}")));
        }
        Self::generate(in_dim, out_dim, seed, nonlinearity)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}
