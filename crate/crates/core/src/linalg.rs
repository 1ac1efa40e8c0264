//! Dense Cholesky factorization and solves for symmetric positive definite
//! systems.
//!
//! The factorization is right-looking and blocked: each diagonal block is
//! factored in place, the panel below it is solved against the block's
//! transpose, and the trailing submatrix is updated with a matrix product.
//! No pivoting is performed.

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};

const BLOCK: usize = 64;

/// Lower-triangular factor `L` with `A = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Array2<f64>,
}

impl Cholesky {
    /// Factors the symmetric matrix `a`. Only the lower triangle is read.
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self> {
        Self::factor_shifted(a, 0.0)
    }

    /// Factors `a + shift * I` without materializing the shifted copy twice.
    pub fn factor_shifted(a: ArrayView2<'_, f64>, shift: f64) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: a.ncols(),
            });
        }
        let mut l = a.to_owned();
        if shift != 0.0 {
            l.diag_mut().mapv_inplace(|d| d + shift);
        }

        let mut k = 0;
        while k < n {
            let kb = BLOCK.min(n - k);
            let end = k + kb;
            factor_unblocked(&mut l, k, end)?;
            if end < n {
                // panel: A21 <- A21 * L11^{-T}
                let (l11, mut a21) = {
                    let (top, bottom) = l.view_mut().split_at(ndarray::Axis(0), end);
                    (
                        top.slice_move(s![k..end, k..end]).to_owned(),
                        bottom.slice_move(s![.., k..end]),
                    )
                };
                for mut row in a21.rows_mut() {
                    for j in 0..kb {
                        let mut v = row[j];
                        for p in 0..j {
                            v -= row[p] * l11[[j, p]];
                        }
                        row[j] = v / l11[[j, j]];
                    }
                }
                // trailing: A22 <- A22 - A21 A21^T (lower triangle is what matters)
                let panel = l.slice(s![end.., k..end]).to_owned();
                let mut trailing = l.slice_mut(s![end.., end..]);
                ndarray::linalg::general_mat_mul(-1.0, &panel, &panel.t(), 1.0, &mut trailing);
            }
            k = end;
        }
        for i in 0..n {
            for j in i + 1..n {
                l[[i, j]] = 0.0;
            }
        }
        Ok(Self { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    /// Solves `A X = B` for `X`, overwriting `b`.
    pub fn solve_in_place(&self, b: &mut Array2<f64>) -> Result<()> {
        let n = self.dim();
        if b.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: b.nrows(),
            });
        }
        let l = &self.lower;
        // forward: L Y = B
        for i in 0..n {
            let (done, mut rest) = b.view_mut().split_at(ndarray::Axis(0), i);
            let mut row = rest.row_mut(0);
            for (k, prev) in done.rows().into_iter().enumerate() {
                let lik = l[[i, k]];
                if lik != 0.0 {
                    row.scaled_add(-lik, &prev);
                }
            }
            row /= l[[i, i]];
        }
        // backward: L^T X = Y
        for i in (0..n).rev() {
            let lii = l[[i, i]];
            b.row_mut(i).mapv_inplace(|v| v / lii);
            let (mut before, after) = b.view_mut().split_at(ndarray::Axis(0), i);
            let xi = after.row(0);
            for (k, mut row) in before.rows_mut().into_iter().enumerate() {
                let lik = l[[i, k]];
                if lik != 0.0 {
                    row.scaled_add(-lik, &xi);
                }
            }
        }
        Ok(())
    }

    pub fn solve(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        let mut x = b.clone();
        self.solve_in_place(&mut x)?;
        Ok(x)
    }
}

fn factor_unblocked(l: &mut Array2<f64>, start: usize, end: usize) -> Result<()> {
    for j in start..end {
        let mut d = l[[j, j]];
        for p in start..j {
            d -= l[[j, p]] * l[[j, p]];
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in j + 1..end {
            let mut v = l[[i, j]];
            for p in start..j {
                v -= l[[i, p]] * l[[j, p]];
            }
            l[[i, j]] = v / d;
        }
    }
    Ok(())
}
