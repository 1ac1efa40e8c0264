use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamConfig, AdamState, CosineAnnealing};
use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Exactly one epoch over the task.
    Online,
    /// Up to `max_epochs`, stopped when validation loss stalls for
    /// `patience` epochs; the best-validation weights are kept.
    Offline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs_run: usize,
    pub steps: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Softmax linear classifier `logits = x W + b` over all `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: Array2<f64>,
    bias: Array1<f64>,
    adam_w: AdamState,
    adam_b: AdamState,
}

impl LinearProbe {
    /// Weights and bias uniform in `+-1/sqrt(H)`.
    pub fn new(dim: usize, classes: usize, seed: u64) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_simple_fn((dim, classes), || dist.sample(&mut rng));
        let bias = Array1::from_shape_simple_fn(classes, || dist.sample(&mut rng));
        Self::from_parts(weights, bias)
    }

    pub fn from_parts(weights: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weights.ncols(), bias.len());
        Self {
            adam_w: AdamState::new(weights.len()),
            adam_b: AdamState::new(bias.len()),
            weights,
            bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.adam_w.step_count()
    }

    /// Trainable parameters counted as in the head comparison: `H x C`.
    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }

    pub fn logits(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        crate::ridge::argmax_rows(&self.logits(x))
    }

    pub fn accuracy(&self, batch: &EmbeddingBatch) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let pred = self.predict(batch.vectors().view());
        let hits = pred.iter().zip(batch.labels()).filter(|(a, b)| a == b).count();
        hits as f64 / batch.len() as f64
    }

    /// Mean cross-entropy over the rows of `x`.
    pub fn loss(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
        let logits = self.logits(x);
        let mut total = 0.0;
        for (row, &y) in logits.rows().into_iter().zip(labels) {
            total += log_sum_exp(row.iter().copied()) - row[y];
        }
        total / labels.len().max(1) as f64
    }

    /// Mean cross-entropy with its gradients `(dL/dW, dL/db)`.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<'_, f64>,
        labels: &[usize],
    ) -> (f64, Array2<f64>, Array1<f64>) {
        let n = labels.len().max(1) as f64;
        let mut probs = self.logits(x);
        let mut total = 0.0;
        for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
            let lse = log_sum_exp(row.iter().copied());
            total += lse - row[y];
            row.mapv_inplace(|z| (z - lse).exp());
            row[y] -= 1.0;
        }
        probs /= n;
        let grad_w = x.t().dot(&probs);
        let grad_b = probs.sum_axis(Axis(0));
        (total / n, grad_w, grad_b)
    }

    /// Plain full-batch gradient descent step; returns the pre-step loss.
    pub fn gd_step(&mut self, x: ArrayView2<'_, f64>, labels: &[usize], lr: f64) -> f64 {
        let (loss, gw, gb) = self.loss_and_grad(x, labels);
        self.weights.scaled_add(-lr, &gw);
        self.bias.scaled_add(-lr, &gb);
        loss
    }

    fn adam_step(&mut self, cfg: &AdamConfig, lr: f64, gw: &Array2<f64>, gb: &Array1<f64>) {
        let w = self.weights.as_slice_mut().expect("standard layout");
        self.adam_w
            .step(cfg, lr, w, gw.as_slice().expect("standard layout"));
        let b = self.bias.as_slice_mut().expect("standard layout");
        self.adam_b
            .step(cfg, lr, b, gb.as_slice().expect("standard layout"));
    }

    /// Trains on `data` with shuffled minibatches. Optimizer moments and the
    /// learning-rate schedule restart with every call; the weights carry
    /// over.
    pub fn train(
        &mut self,
        data: &EmbeddingBatch,
        val: Option<&EmbeddingBatch>,
        mode: ProbeMode,
        hyper: &ProbeHyper,
        shuffle_seed: u64,
    ) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        if data.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: data.dim(),
            });
        }
        data.check_labels(self.class_count())?;
        if hyper.batch_size == 0 || hyper.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        let val = match (mode, val) {
            (ProbeMode::Offline, None) => {
                return Err(Error::InvalidArgument(
                    "offline training needs a validation split".into(),
                ))
            }
            (ProbeMode::Offline, Some(v)) if v.is_empty() => {
                return Err(Error::InsufficientSamples { needed: 1, got: 0 })
            }
            (_, v) => v,
        };

        self.adam_w.reset();
        self.adam_b.reset();
        let steps_per_epoch = data.len().div_ceil(hyper.batch_size);
        let epochs = match mode {
            ProbeMode::Online => 1,
            ProbeMode::Offline => hyper.max_epochs,
        };
        let schedule = CosineAnnealing::new(hyper.lr, epochs * steps_per_epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut log = TrainLog::default();
        let mut best: Option<(f64, Array2<f64>, Array1<f64>)> = None;
        let mut stale = 0;

        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(hyper.batch_size) {
                let x = data.vectors().select(Axis(0), chunk);
                let y: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
                let (loss, gw, gb) = self.loss_and_grad(x.view(), &y);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step: log.steps });
                }
                epoch_loss += loss * chunk.len() as f64;
                let lr = schedule.lr(log.steps);
                self.adam_step(&hyper.adam, lr, &gw, &gb);
                log.steps += 1;
            }
            log.train_loss.push(epoch_loss / data.len() as f64);
            log.epochs_run = epoch + 1;

            if let Some(v) = val {
                let vl = self.loss(v.vectors().view(), v.labels());
                if !vl.is_finite() {
                    return Err(Error::NonFiniteLoss { step: log.steps });
                }
                log.val_loss.push(vl);
                if mode == ProbeMode::Offline {
                    if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                        best = Some((vl, self.weights.clone(), self.bias.clone()));
                        log.best_epoch = Some(epoch + 1);
                        stale = 0;
                    } else {
                        stale += 1;
                        if stale >= hyper.patience {
                            log.stopped_early = true;
                            break;
                        }
                    }
                }
            }
        }
        if let Some((_, w, b)) = best {
            self.weights = w;
            self.bias = b;
        }
        Ok(log)
    }
}

/// Trains a fresh probe on every batch in `history` pooled together.
pub fn probe_joint_train(
    history: &[&EmbeddingBatch],
    val: Option<&EmbeddingBatch>,
    classes: usize,
    mode: ProbeMode,
    hyper: &ProbeHyper,
    init_seed: u64,
    shuffle_seed: u64,
) -> Result<(LinearProbe, TrainLog)> {
    let pooled = EmbeddingBatch::concat(history)?;
    let mut probe = LinearProbe::new(pooled.dim(), classes, init_seed);
    let log = probe.train(&pooled, val, mode, hyper, shuffle_seed)?;
    Ok((probe, log))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn separable(n_per: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Array2::<f64>::zeros((2 * n_per, 4));
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let c = i % 2;
            y.push(c);
            for j in 0..4 {
                let e: f64 = StandardNormal.sample(&mut rng);
                let center = if c == 0 { 2.0 } else { -2.0 };
                v[[i, j]] = if j == 0 { center + 0.3 * e } else { e };
            }
        }
        EmbeddingBatch::new(v, y, 2).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let b = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let x = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-2.0..2.0));
        let y: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
        let probe = LinearProbe::from_parts(w.clone(), b.clone());
        let (_, gw, gb) = probe.loss_and_grad(x.view(), &y);
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let mut wp = w.clone();
                wp[[i, j]] += h;
                let mut wm = w.clone();
                wm[[i, j]] -= h;
                let fd = (LinearProbe::from_parts(wp, b.clone()).loss(x.view(), &y)
                    - LinearProbe::from_parts(wm, b.clone()).loss(x.view(), &y))
                    / (2.0 * h);
                assert!((fd - gw[[i, j]]).abs() <= 1e-6);
            }
        }
        for j in 0..3 {
            let mut bp = b.clone();
            bp[j] += h;
            let mut bm = b.clone();
            bm[j] -= h;
            let fd = (LinearProbe::from_parts(w.clone(), bp).loss(x.view(), &y)
                - LinearProbe::from_parts(w.clone(), bm).loss(x.view(), &y))
                / (2.0 * h);
            assert!((fd - gb[j]).abs() <= 1e-6);
        }
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let p = LinearProbe::new(16, 5, 3);
        assert!(p.weights().iter().all(|w| w.abs() <= 0.25));
        assert_eq!(p, LinearProbe::new(16, 5, 3));
        assert_ne!(p, LinearProbe::new(16, 5, 4));
    }

    #[test]
    fn offline_reaches_full_training_accuracy() {
        let data = separable(40, 2);
        let val = separable(10, 3);
        let mut p = LinearProbe::new(4, 2, 1);
        let hyper = ProbeHyper {
            lr: 1e-2,
            ..ProbeHyper::default()
        };
        let log = p
            .train(&data, Some(&val), ProbeMode::Offline, &hyper, 5)
            .unwrap();
        assert!(log.epochs_run <= 100);
        assert_eq!(p.accuracy(&data), 1.0, "{log:?}");
    }

    #[test]
    fn online_runs_exactly_one_epoch() {
        let data = separable(40, 2);
        let mut p = LinearProbe::new(4, 2, 1);
        let log = p
            .train(&data, None, ProbeMode::Online, &ProbeHyper::default(), 5)
            .unwrap();
        assert_eq!(log.epochs_run, 1);
        assert_eq!(log.steps, 3); // ceil(80 / 32)
        assert_eq!(p.optimizer_steps(), 3);
    }

    #[test]
    fn early_stopping_triggers() {
        // labels independent of inputs: validation loss stops improving
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng, n: usize| {
            let v = Array2::from_shape_simple_fn((n, 6), || rng.random_range(-1.0..1.0));
            let y = (0..n).map(|_| rng.random_range(0..3)).collect();
            EmbeddingBatch::new(v, y, 3).unwrap()
        };
        let data = mk(&mut rng, 40);
        let val = mk(&mut rng, 40);
        let mut p = LinearProbe::new(6, 3, 2);
        let hyper = ProbeHyper {
            lr: 0.05,
            patience: 3,
            ..ProbeHyper::default()
        };
        let log = p
            .train(&data, Some(&val), ProbeMode::Offline, &hyper, 1)
            .unwrap();
        assert!(log.stopped_early, "{log:?}");
        let best = log.best_epoch.unwrap();
        assert_eq!(log.epochs_run, best + 3);
        let vl = p.loss(val.vectors().view(), val.labels());
        assert!((vl - log.val_loss[best - 1]).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let data = separable(5, 1);
        let mut p = LinearProbe::new(4, 2, 1);
        let h = ProbeHyper::default();
        assert!(p
            .train(&EmbeddingBatch::empty(4, 2), None, ProbeMode::Online, &h, 0)
            .is_err());
        assert!(p.train(&data, None, ProbeMode::Offline, &h, 0).is_err());
        let mut huge = LinearProbe::from_parts(
            Array2::from_elem((4, 2), f64::MAX),
            Array1::zeros(2),
        );
        assert!(matches!(
            huge.train(&data, None, ProbeMode::Online, &h, 0),
            Err(Error::NonFiniteLoss { step: 0 })
        ));
    }

    #[test]
    fn full_batch_descent_is_monotone() {
        let data = separable(20, 7);
        let mut p = LinearProbe::new(4, 2, 9);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let loss = p.gd_step(data.vectors().view(), data.labels(), 1e-2);
            assert!(loss <= prev + 1e-15);
            prev = loss;
        }
    }

    #[test]
    fn joint_with_one_task_equals_plain_training() {
        let data = separable(20, 7);
        let h = ProbeHyper::default();
        let (joint, jlog) =
            probe_joint_train(&[&data], None, 2, ProbeMode::Online, &h, 11, 12).unwrap();
        let mut plain = LinearProbe::new(4, 2, 11);
        let plog = plain.train(&data, None, ProbeMode::Online, &h, 12).unwrap();
        assert_eq!(joint, plain);
        assert_eq!(jlog, plog);
    }
}
