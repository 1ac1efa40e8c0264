//! Decorrelated prototype head: `W_o = (G + lambda I)^{-1} K`.
//!
//! The regularizer is chosen per task from a log grid by fitting on a random
//! 80% of the task (on top of everything already accumulated) and scoring the
//! mean squared error against one-hot targets on the remaining 20%. The
//! candidate statistics do not depend on lambda, so they are accumulated once
//! and reused for every grid point.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::projection::{FeatureBatch, FeatureMap};
use crate::stats::SufficientStats;

/// `{1e-8, 1e-7, ..., 1e8}`.
pub const LAMBDA_GRID: [f64; 17] = [
    1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8,
];

pub const WOH_MAGIC: &[u8; 4] = b"WOH1";
const WOH_HEADER: usize = 4 + 4 + 4 + 8 + 32;

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeHead {
    weights: Array2<f64>,
    lambda: f64,
    fingerprint: String,
    residual: f64,
}

impl RidgeHead {
    /// A head with explicit weights, e.g. for checkpoint tooling and tests.
    pub fn from_weights(weights: Array2<f64>, lambda: f64) -> Self {
        Self {
            weights,
            lambda,
            fingerprint: String::new(),
            residual: f64::NAN,
        }
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Hex SHA-256 of the `STA1` snapshot this head was solved from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// `||(G + lambda I) W_o - K||_F / max(1, ||K||_F)` at solve time.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn q_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.weights.ncols()
    }

    /// Trainable parameters of the head (`Q x C`).
    pub fn parameter_count(&self) -> usize {
        self.weights.len()
    }

    /// `WOH1`: magic, u32 Q, u32 C, f64 lambda, 32-byte fingerprint (zeros if
    /// unknown), then `W_o` row-major as f64. Little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(WOH_HEADER + 8 * self.weights.len());
        buf.extend_from_slice(WOH_MAGIC);
        buf.extend_from_slice(&(self.q_dim() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.class_count() as u32).to_le_bytes());
        buf.extend_from_slice(&self.lambda.to_le_bytes());
        let mut fp = [0u8; 32];
        if let Ok(raw) = hex::decode(&self.fingerprint) {
            if raw.len() == 32 {
                fp.copy_from_slice(&raw);
            }
        }
        buf.extend_from_slice(&fp);
        for v in &self.weights {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != WOH_MAGIC {
            return Err(Error::BadMagic {
                expected: "WOH1".into(),
                found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
            });
        }
        if bytes.len() < WOH_HEADER {
            return Err(Error::Format("WOH1 header truncated".into()));
        }
        let q = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let lambda = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let fp = &bytes[20..52];
        if bytes.len() != WOH_HEADER + 8 * q * c {
            return Err(Error::Format(format!(
                "WOH1 size mismatch for {q}x{c} weights: {} bytes",
                bytes.len()
            )));
        }
        let values = bytes[WOH_HEADER..]
            .chunks_exact(8)
            .map(|w| f64::from_le_bytes(w.try_into().unwrap()))
            .collect();
        let weights = Array2::from_shape_vec((q, c), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            weights,
            lambda,
            fingerprint: if fp.iter().all(|&b| b == 0) {
                String::new()
            } else {
                hex::encode(fp)
            },
            residual: f64::NAN,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "lambda must be positive and finite, got {lambda}"
        )))
    }
}

fn solve_weights(stats: &SufficientStats, lambda: f64) -> Result<Array2<f64>> {
    check_lambda(lambda)?;
    let chol = Cholesky::factor_shifted(stats.gram().view(), lambda)?;
    chol.solve(stats.prototypes())
}

fn relative_residual(stats: &SufficientStats, lambda: f64, weights: &Array2<f64>) -> f64 {
    let mut r = stats.gram().dot(weights);
    r.scaled_add(lambda, weights);
    r -= stats.prototypes();
    let num = frobenius(&r);
    num / frobenius(stats.prototypes()).max(1.0)
}

pub(crate) fn frobenius(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Solves `(G + lambda I) W_o = K` by Cholesky factorization.
pub fn solve_head(stats: &SufficientStats, lambda: f64) -> Result<RidgeHead> {
    let weights = solve_weights(stats, lambda)?;
    let residual = relative_residual(stats, lambda, &weights);
    Ok(RidgeHead {
        weights,
        lambda,
        fingerprint: stats.fingerprint(),
        residual,
    })
}

/// `scores = V W_o` and the row-wise argmax (ties go to the smallest index).
pub fn predict(head: &RidgeHead, features: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Vec<usize>)> {
    if features.ncols() != head.q_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.q_dim(),
            found: features.ncols(),
        });
    }
    let scores = features.dot(&head.weights);
    let labels = argmax_rows(&scores);
    Ok((scores, labels))
}

pub(crate) fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Lambda search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearch {
    pub grid: Vec<f64>,
    /// Split each class 80/20 separately instead of the whole task.
    pub stratified: bool,
}

impl Default for LambdaSearch {
    fn default() -> Self {
        Self {
            grid: LAMBDA_GRID.to_vec(),
            stratified: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaCandidate {
    pub lambda: f64,
    /// Holdout MSE; `None` when the factorization failed.
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub candidates: Vec<LambdaCandidate>,
    pub fit_size: usize,
    pub holdout_size: usize,
}

/// Index partition into (fit, holdout) with `floor(0.8 N)` fit samples.
pub fn split_80_20(labels: &[usize], seed: u64, stratified: bool) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if !stratified {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(&mut rng);
        let n_fit = labels.len() * 4 / 5;
        let holdout = idx.split_off(n_fit);
        return (idx, holdout);
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut fit = Vec::new();
    let mut holdout = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let n_fit = idx.len() * 4 / 5;
        holdout.extend(idx.split_off(n_fit));
        fit.extend(idx);
    }
    (fit, holdout)
}

/// Picks lambda for the current task. Ties in holdout MSE go to the larger
/// lambda.
pub fn select_lambda(
    persistent: &SufficientStats,
    task: &FeatureBatch,
    split_seed: u64,
    search: &LambdaSearch,
) -> Result<LambdaSelection> {
    let n = task.len();
    if n < 5 {
        return Err(Error::InsufficientSamples { needed: 5, got: n });
    }
    if search.grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    for &l in &search.grid {
        check_lambda(l)?;
    }
    let (fit, holdout) = split_80_20(&task.labels, split_seed, search.stratified);
    if holdout.is_empty() {
        return Err(Error::InsufficientSamples { needed: 5, got: n });
    }

    let mut candidate = persistent.clone();
    let fit_rows = task.features.select(ndarray::Axis(0), &fit);
    let fit_labels: Vec<usize> = fit.iter().map(|&i| task.labels[i]).collect();
    candidate.update(fit_rows.view(), &fit_labels)?;

    let hold_rows = task.features.select(ndarray::Axis(0), &holdout);
    let classes = persistent.class_count();
    let mut targets = Array2::<f64>::zeros((holdout.len(), classes));
    for (r, &i) in holdout.iter().enumerate() {
        targets[[r, task.labels[i]]] = 1.0;
    }

    let mut candidates = Vec::with_capacity(search.grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &search.grid {
        let mse = match solve_weights(&candidate, lambda) {
            Ok(w) => {
                let diff = hold_rows.dot(&w) - &targets;
                Some(diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64)
            }
            Err(Error::NotPositiveDefinite { .. }) => None,
            Err(e) => return Err(e),
        };
        if let Some(m) = mse {
            let replace = match best {
                None => true,
                Some((_, best_mse)) => match m.partial_cmp(&best_mse) {
                    Some(std::cmp::Ordering::Less) => true,
                    Some(std::cmp::Ordering::Equal) => lambda > best.unwrap().0,
                    _ => false,
                },
            };
            if replace {
                best = Some((lambda, m));
            }
        }
        candidates.push(LambdaCandidate { lambda, mse });
    }
    let (lambda, _) = best.ok_or_else(|| {
        Error::Invariant("every lambda in the grid failed to factor".into())
    })?;
    Ok(LambdaSelection {
        lambda,
        candidates,
        fit_size: fit.len(),
        holdout_size: holdout.len(),
    })
}

/// How `learn_task` obtains lambda.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Search(LambdaSearch),
    Fixed(f64),
}

impl Default for LambdaMode {
    fn default() -> Self {
        LambdaMode::Search(LambdaSearch::default())
    }
}

#[derive(Debug, Clone)]
pub struct TaskFit {
    pub stats: SufficientStats,
    pub head: RidgeHead,
    pub selection: Option<LambdaSelection>,
}

/// One online step: map the task through `features` once, choose lambda on
/// the already-mapped features, fold the whole task into a copy of the
/// persistent statistics, and solve. `persistent` is left untouched.
pub fn learn_task(
    persistent: &SufficientStats,
    features: &FeatureMap,
    task: &EmbeddingBatch,
    split_seed: u64,
    mode: &LambdaMode,
) -> Result<TaskFit> {
    if task.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mapped = features.apply(task)?;
    learn_task_features(persistent, &mapped, split_seed, mode)
}

pub fn learn_task_features(
    persistent: &SufficientStats,
    mapped: &FeatureBatch,
    split_seed: u64,
    mode: &LambdaMode,
) -> Result<TaskFit> {
    if mapped.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let (lambda, selection) = match mode {
        LambdaMode::Fixed(l) => (*l, None),
        LambdaMode::Search(search) => {
            let sel = select_lambda(persistent, mapped, split_seed, search)?;
            (sel.lambda, Some(sel))
        }
    };
    let mut stats = persistent.clone();
    stats.update(mapped.features.view(), &mapped.labels)?;
    let head = solve_head(&stats, lambda)?;
    Ok(TaskFit {
        stats,
        head,
        selection,
    })
}
