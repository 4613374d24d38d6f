//! Dense and banded factorizations plus the reverse-mode rules the objective needs.

use std::cell::Cell;

use nalgebra::{Cholesky, DMatrix};

use crate::{Error, Result};

pub(crate) const JITTER_FLOOR: f64 = 1e-8;
pub(crate) const JITTER_CAP: f64 = 1e-2;

thread_local! {
    static FACTORIZATIONS: Cell<usize> = const { Cell::new(0) };
}

/// Number of Gram factorizations performed on the current thread.
pub(crate) fn factorization_count() -> usize {
    FACTORIZATIONS.with(Cell::get)
}

/// Factors `a + (shift + jitter) I`. On failure the jitter is raised to the floor and then
/// multiplied by ten until the cap is exceeded. Returns the lower factor and the jitter used.
pub(crate) fn cholesky_with_jitter(
    a: &DMatrix<f64>,
    shift: f64,
    jitter: f64,
) -> Result<(DMatrix<f64>, f64)> {
    FACTORIZATIONS.with(|c| c.set(c.get() + 1));
    let n = a.nrows();
    let mut jitter = jitter;
    loop {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += shift + jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            let l = chol.unpack();
            if l.iter().all(|v| v.is_finite()) {
                return Ok((l, jitter));
            }
        }
        let next = if jitter < JITTER_FLOOR {
            JITTER_FLOOR
        } else {
            jitter * 10.0
        };
        if next > JITTER_CAP * (1.0 + 1e-9) {
            return Err(Error::Factorization { jitter });
        }
        jitter = next;
    }
}

/// Solves `L x = b` for lower-triangular `L`.
pub(crate) fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    let n = l.nrows();
    for c in 0..x.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub(crate) fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    let n = l.nrows();
    for c in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// `(L L^T)^{-1} b`.
pub(crate) fn cho_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Adjoint of `y = L^{-1} b` with respect to `L`, given `y` and `b_bar = L^{-T} y_bar`:
/// accumulates `-tril(b_bar y^T)` into `l_bar`.
pub(crate) fn accumulate_solve_lower_adjoint(
    l_bar: &mut DMatrix<f64>,
    b_bar: &DMatrix<f64>,
    y: &DMatrix<f64>,
) {
    let n = l_bar.nrows();
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for c in 0..y.ncols() {
                s += b_bar[(i, c)] * y[(j, c)];
            }
            l_bar[(i, j)] -= s;
        }
    }
}

/// Reverse-mode rule for `A = L L^T`. Given the adjoint of the lower factor returns the
/// symmetric adjoint of `A`: `sym(L^{-T} Phi(L^T L_bar) L^{-1})`, where `Phi` keeps the
/// lower triangle and halves the diagonal.
pub(crate) fn cholesky_adjoint(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut p = l.transpose() * l_bar;
    for i in 0..n {
        for j in i + 1..n {
            p[(i, j)] = 0.0;
        }
        p[(i, i)] *= 0.5;
    }
    // L^{-T} P L^{-1} = L^{-T} (L^{-T} P^T)^T
    let left = solve_lower_transpose(l, &p.transpose());
    let s = solve_lower_transpose(l, &left.transpose());
    (&s + s.transpose()) * 0.5
}

/// Symmetric positive definite matrix stored as its lower band.
pub(crate) struct BandedSpd {
    n: usize,
    bw: usize,
    // row p holds A[p][p - bw ..= p], left padded with zeros
    band: Vec<f64>,
}

impl BandedSpd {
    pub(crate) fn zeros(n: usize, bw: usize) -> Self {
        BandedSpd {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    fn slot(&self, row: usize, col: usize) -> usize {
        debug_assert!(col <= row && row - col <= self.bw);
        row * (self.bw + 1) + (self.bw - (row - col))
    }

    /// Adds `v` to `A[row][col]` for `col <= row`.
    pub(crate) fn add(&mut self, row: usize, col: usize, v: f64) {
        let s = self.slot(row, col);
        self.band[s] += v;
    }

    /// In-place banded Cholesky followed by forward/back substitution.
    pub(crate) fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let mut s = self.band[self.slot(i, j)];
                let klo = lo.max(j.saturating_sub(bw));
                for k in klo..j {
                    s -= self.band[self.slot(i, k)] * self.band[self.slot(j, k)];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Numerical(format!(
                            "banded system not positive definite at row {i}"
                        )));
                    }
                    let slot = self.slot(i, i);
                    self.band[slot] = s.sqrt();
                } else {
                    let slot = self.slot(i, j);
                    self.band[slot] = s / self.band[self.slot(j, j)];
                }
            }
        }
        let mut x = rhs.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for k in i.saturating_sub(bw)..i {
                s -= self.band[self.slot(i, k)] * x[k];
            }
            x[i] = s / self.band[self.slot(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n.min(i + bw + 1) {
                s -= self.band[self.slot(k, i)] * x[k];
            }
            x[i] = s / self.band[self.slot(i, i)];
        }
        Ok(x)
    }
}
