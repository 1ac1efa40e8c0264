use ndarray::{Array1, Array2, ArrayView1};

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

/// Nearest class mean with cosine similarity. Prototypes are kept as
/// per-class sums and counts so the mean is exact regardless of how the
/// stream is batched.
#[derive(Debug, Clone, PartialEq)]
pub struct NcmModel {
    sums: Array2<f64>,
    counts: Vec<u64>,
}

impl NcmModel {
    pub fn new(dim: usize, classes: usize) -> Self {
        Self {
            sums: Array2::zeros((classes, dim)),
            counts: vec![0; classes],
        }
    }

    pub fn dim(&self) -> usize {
        self.sums.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.sums.nrows()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn update(&mut self, batch: &EmbeddingBatch) -> Result<()> {
        if batch.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: batch.dim(),
            });
        }
        batch.check_labels(self.class_count())?;
        for (row, &label) in batch.vectors().rows().into_iter().zip(batch.labels()) {
            self.sums.row_mut(label).scaled_add(1.0, &row);
            self.counts[label] += 1;
        }
        Ok(())
    }

    /// Mean embedding of class `c`, or `None` before any sample of it.
    pub fn prototype(&self, c: usize) -> Option<Array1<f64>> {
        let n = *self.counts.get(c)?;
        (n > 0).then(|| self.sums.row(c).mapv(|v| v / n as f64))
    }

    pub fn predict(&self, batch: &EmbeddingBatch) -> Result<Vec<usize>> {
        if batch.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: batch.dim(),
            });
        }
        let seen: Vec<(usize, Array1<f64>, f64)> = (0..self.class_count())
            .filter_map(|c| {
                self.prototype(c).map(|p| {
                    let norm = p.dot(&p).sqrt();
                    (c, p, norm)
                })
            })
            .collect();
        if seen.is_empty() {
            return Err(Error::NoSeenClasses);
        }
        Ok(batch
            .vectors()
            .rows()
            .into_iter()
            .map(|f| nearest(f, &seen))
            .collect())
    }
}

fn nearest(f: ArrayView1<'_, f64>, seen: &[(usize, Array1<f64>, f64)]) -> usize {
    let f_norm = f.dot(&f).sqrt();
    let mut best = (seen[0].0, f64::NEG_INFINITY);
    for (c, p, p_norm) in seen {
        let sim = if f_norm == 0.0 || *p_norm == 0.0 {
            f64::NEG_INFINITY
        } else {
            f.dot(p) / (f_norm * p_norm)
        };
        if sim > best.1 {
            best = (*c, sim);
        }
    }
    best.0
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn batch(v: Array2<f64>, y: Vec<usize>) -> EmbeddingBatch {
        EmbeddingBatch::new(v, y, 0).unwrap()
    }

    #[test]
    fn mean_of_two() {
        let mut m = NcmModel::new(2, 2);
        m.update(&batch(array![[1.0, 1.0], [3.0, 3.0]], vec![0, 0])).unwrap();
        assert_eq!(m.prototype(0).unwrap(), array![2.0, 2.0]);
        assert!(m.prototype(1).is_none());
        let before = m.clone();
        m.update(&EmbeddingBatch::empty(2, 0)).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn streaming_mean_equals_batch_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array2::from_shape_simple_fn((100, 5), || rng.random_range(-4.0..4.0));
        let y = vec![0; 100];
        let mut streamed = NcmModel::new(5, 1);
        for i in 0..100 {
            streamed
                .update(&batch(v.slice(ndarray::s![i..i + 1, ..]).to_owned(), vec![0]))
                .unwrap();
        }
        let mut whole = NcmModel::new(5, 1);
        whole.update(&batch(v.clone(), y)).unwrap();
        let oracle = v.mean_axis(ndarray::Axis(0)).unwrap();
        for p in [streamed.prototype(0).unwrap(), whole.prototype(0).unwrap()] {
            for (a, b) in p.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn cosine_is_scale_invariant_and_ties_go_low() {
        let mut m = NcmModel::new(3, 3);
        m.update(&batch(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![0, 1]))
            .unwrap();
        let preds = m
            .predict(&batch(
                array![[10.0, 0.0, 0.0], [0.1, 3.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 0.0]],
                vec![0; 4],
            ))
            .unwrap();
        assert_eq!(preds, vec![0, 1, 0, 0]);
    }

    #[test]
    fn unseen_classes_are_excluded() {
        let mut m = NcmModel::new(2, 3);
        assert!(matches!(
            m.predict(&batch(array![[1.0, 0.0]], vec![0])),
            Err(Error::NoSeenClasses)
        ));
        m.update(&batch(array![[0.0, 1.0]], vec![2])).unwrap();
        // class 0 has no prototype, so even an aligned sample goes to class 2
        assert_eq!(m.predict(&batch(array![[1.0, 0.0]], vec![0])).unwrap(), vec![2]);
    }

    #[test]
    fn matches_pairwise_similarity_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let centers = [[3.0, 0.0, 1.0, 0.0], [0.0, 3.0, 0.0, 1.0], [1.0, 1.0, 3.0, 0.0]];
        let mut gen = |n: usize| {
            let mut v = Array2::<f64>::zeros((n, 4));
            let mut y = Vec::new();
            for i in 0..n {
                let c = i % 3;
                y.push(c);
                for j in 0..4 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    v[[i, j]] = centers[c][j] + e;
                }
            }
            batch(v, y)
        };
        let train = gen(60);
        let test = gen(90);
        let mut m = NcmModel::new(4, 3);
        m.update(&train).unwrap();
        let preds = m.predict(&test).unwrap();

        // oracle: class means by direct loops, then pairwise cosines
        let mut means = [[0.0f64; 4]; 3];
        let mut counts = [0usize; 3];
        for (i, &c) in train.labels().iter().enumerate() {
            counts[c] += 1;
            for j in 0..4 {
                means[c][j] += train.vectors()[[i, j]];
            }
        }
        for c in 0..3 {
            for j in 0..4 {
                means[c][j] /= counts[c] as f64;
            }
        }
        for (i, &pred) in preds.iter().enumerate() {
            let f: Vec<f64> = test.row(i).to_vec();
            let cos = |c: usize| {
                let dot: f64 = (0..4).map(|j| f[j] * means[c][j]).sum();
                let nf: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
                let np: f64 = means[c].iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (nf * np)
            };
            let mut best = 0;
            for c in 1..3 {
                if cos(c) > cos(best) {
                    best = c;
                }
            }
            assert_eq!(pred, best);
        }
    }
}
