//! Exact Gaussian process regression on feature vectors.
//!
//! The prior mean is zero. All solves against `K + (sigma2 + jitter) I` go through the
//! stored lower Cholesky factor; no dense inverse is formed.

use nalgebra::DMatrix;

use crate::linalg::{self, cholesky_with_jitter};
use crate::{Error, Result};

/// A point in feature space. Entries are finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("feature vector has non-finite entries"));
        }
        Ok(FeatureVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Exponent form of the stationary kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KernelForm {
    /// `exp(-|a - b| / l)`, the unsquared norm.
    #[default]
    Exponential,
    /// `exp(-|a - b|^2 / l)`.
    Squared,
}

impl KernelForm {
    pub fn name(self) -> &'static str {
        match self {
            KernelForm::Exponential => "exponential",
            KernelForm::Squared => "squared",
        }
    }
}

impl std::str::FromStr for KernelForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" => Ok(KernelForm::Exponential),
            "squared" => Ok(KernelForm::Squared),
            other => Err(Error::input(format!("unknown kernel form {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Kernel {
    length_scale: f64,
    form: KernelForm,
}

impl Kernel {
    pub fn new(length_scale: f64, form: KernelForm) -> Result<Self> {
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::input(format!(
                "length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Kernel { length_scale, form })
    }

    pub fn exponential(length_scale: f64) -> Result<Self> {
        Kernel::new(length_scale, KernelForm::Exponential)
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn form(&self) -> KernelForm {
        self.form
    }

    /// Kernel value without dimension checks.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self.form {
            KernelForm::Exponential => (-sq.sqrt() / self.length_scale).exp(),
            KernelForm::Squared => (-sq / self.length_scale).exp(),
        }
    }

    /// Returns `(k, c)` with `dk/da = c (a - b)`. At `a == b` the exponential form is not
    /// differentiable and `c` is taken as zero.
    pub(crate) fn eval_with_grad(&self, a: &[f64], b: &[f64]) -> (f64, f64) {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self.form {
            KernelForm::Exponential => {
                let r = sq.sqrt();
                let k = (-r / self.length_scale).exp();
                if r == 0.0 {
                    (k, 0.0)
                } else {
                    (k, -k / (self.length_scale * r))
                }
            }
            KernelForm::Squared => {
                let k = (-sq / self.length_scale).exp();
                (k, -2.0 * k / self.length_scale)
            }
        }
    }

    fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() {
            return Err(Error::input(format!(
                "feature dimension mismatch: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        Ok(())
    }
}

/// `exp(-|a - b| / l)` with the unsquared Euclidean norm.
pub fn se_kernel(a: &FeatureVector, b: &FeatureVector, l: f64) -> Result<f64> {
    let kernel = Kernel::exponential(l)?;
    Kernel::check_pair(a.as_slice(), b.as_slice())?;
    Ok(kernel.eval(a.as_slice(), b.as_slice()))
}

fn check_points(points: &[FeatureVector]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::input("empty point set"))?;
    let dim = first.dim();
    if let Some(bad) = points.iter().find(|p| p.dim() != dim) {
        return Err(Error::input(format!(
            "feature dimension mismatch: {} vs {}",
            dim,
            bad.dim()
        )));
    }
    Ok(dim)
}

/// Kernel matrix between two point sets.
pub fn cross_kernel(kernel: &Kernel, rows: &[FeatureVector], cols: &[FeatureVector]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        kernel.eval(rows[i].as_slice(), cols[j].as_slice())
    })
}

/// Symmetric kernel matrix with an exactly unit diagonal built from the upper triangle.
pub(crate) fn symmetric_kernel<P: AsRef<[f64]>>(kernel: &Kernel, points: &[P]) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let v = kernel.eval(points[i].as_ref(), points[j].as_ref());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// A factored Gram matrix over a fixed training set.
#[derive(Clone, Debug)]
pub struct GramWorkspace {
    points: Vec<FeatureVector>,
    kernel: Kernel,
    k: DMatrix<f64>,
    sigma2: f64,
    jitter: f64,
    chol: DMatrix<f64>,
}

/// Builds `K` over `points` and factors `K + (sigma2 + jitter) I`, escalating the jitter
/// tenfold on failure (never below `1e-8` once escalation starts, capped at `1e-2`).
pub fn gram_matrix(
    points: &[FeatureVector],
    kernel: &Kernel,
    sigma2: f64,
    jitter: f64,
) -> Result<GramWorkspace> {
    check_points(points)?;
    if !(sigma2 >= 0.0 && jitter >= 0.0) {
        return Err(Error::input("sigma2 and jitter must be nonnegative"));
    }
    let k = symmetric_kernel(kernel, points);
    let (chol, jitter) = cholesky_with_jitter(&k, sigma2, jitter)?;
    Ok(GramWorkspace {
        points: points.to_vec(),
        kernel: *kernel,
        k,
        sigma2,
        jitter,
        chol,
    })
}

impl GramWorkspace {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[FeatureVector] {
        &self.points
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    /// The kernel matrix without noise or jitter.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Jitter actually used in the factorization.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower factor of `K + (sigma2 + jitter) I`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// `log det(K + (sigma2 + jitter) I)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// `(K + (sigma2 + jitter) I)^{-1} rhs`, one column per right-hand side.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.len() {
            return Err(Error::input(format!(
                "right-hand side has {} rows, expected {}",
                rhs.nrows(),
                self.len()
            )));
        }
        Ok(linalg::cho_solve(&self.chol, rhs))
    }

    fn check_query(&self, query: &[FeatureVector]) -> Result<()> {
        let dim = self.points[0].dim();
        if let Some(bad) = query.iter().find(|q| q.dim() != dim) {
            return Err(Error::input(format!(
                "query dimension {} does not match training dimension {dim}",
                bad.dim()
            )));
        }
        Ok(())
    }

    /// Posterior means for several outputs sharing this Gram matrix. `targets` has one row
    /// per training point and one column per output; the result has one row per query.
    ///
    /// Each query row is computed independently with a fixed summation order, so the result
    /// for a query does not depend on which other queries are in the same call.
    pub fn posterior_mean_multi(
        &self,
        query: &[FeatureVector],
        targets: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        let alpha = self.solve(targets)?;
        self.mean_from_weights(query, &alpha)
    }

    /// Posterior means given precomputed weights `alpha = (K + s I)^{-1} Y`.
    pub fn mean_from_weights(
        &self,
        query: &[FeatureVector],
        alpha: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>> {
        self.check_query(query)?;
        let n = self.len();
        let outputs = alpha.ncols();
        let mut mean = DMatrix::zeros(query.len(), outputs);
        let mut kq = vec![0.0; n];
        for (qi, q) in query.iter().enumerate() {
            for (t, p) in self.points.iter().enumerate() {
                kq[t] = self.kernel.eval(q.as_slice(), p.as_slice());
            }
            for c in 0..outputs {
                let col = alpha.column(c);
                let mut s = 0.0;
                for t in 0..n {
                    s += kq[t] * col[t];
                }
                mean[(qi, c)] = s;
            }
        }
        Ok(mean)
    }

    /// Diagonal of the posterior covariance, clipped at zero.
    pub fn posterior_variance(&self, query: &[FeatureVector]) -> Result<Vec<f64>> {
        self.check_query(query)?;
        let kxq = cross_kernel(&self.kernel, &self.points, query);
        let v = linalg::solve_lower(&self.chol, &kxq);
        Ok((0..query.len())
            .map(|q| (1.0 - v.column(q).norm_squared()).max(0.0))
            .collect())
    }
}

/// Posterior summary at query points.
#[derive(Clone, Debug)]
pub struct PosteriorResult {
    pub mean: Vec<f64>,
    pub cov: Option<DMatrix<f64>>,
}

/// `y^T (K + sigma2 I)^{-1} y + log det(K + sigma2 I)` (jitter included); smaller is better.
pub fn log_marginal_nll(ws: &GramWorkspace, y: &[f64]) -> Result<f64> {
    if y.len() != ws.len() {
        return Err(Error::input(format!(
            "target length {} does not match {} training points",
            y.len(),
            ws.len()
        )));
    }
    let v = linalg::solve_lower(&ws.chol, &DMatrix::from_column_slice(y.len(), 1, y));
    Ok(v.norm_squared() + ws.log_det())
}

/// Posterior mean `K(X*, X) (K + sigma2 I)^{-1} y` for a single output.
pub fn posterior_mean(ws: &GramWorkspace, query: &[FeatureVector], y: &[f64]) -> Result<PosteriorResult> {
    let targets = DMatrix::from_column_slice(y.len(), 1, y);
    let mean = ws.posterior_mean_multi(query, &targets)?;
    Ok(PosteriorResult {
        mean: mean.column(0).iter().copied().collect(),
        cov: None,
    })
}

/// Posterior covariance `K(X*, X*) - K(X*, X) (K + sigma2 I)^{-1} K(X, X*)`, symmetric with
/// the diagonal clipped at zero.
pub fn posterior_cov(ws: &GramWorkspace, query: &[FeatureVector]) -> Result<PosteriorResult> {
    ws.check_query(query)?;
    let kxq = cross_kernel(&ws.kernel, &ws.points, query);
    let v = linalg::solve_lower(&ws.chol, &kxq);
    let m = query.len();
    let mut cov = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let prior = if a == b {
                1.0
            } else {
                ws.kernel.eval(query[a].as_slice(), query[b].as_slice())
            };
            let mut c = prior - v.column(a).dot(&v.column(b));
            if a == b {
                c = c.max(0.0);
            }
            cov[(a, b)] = c;
            cov[(b, a)] = c;
        }
    }
    Ok(PosteriorResult {
        mean: Vec::new(),
        cov: Some(cov),
    })
}

/// Gram factorizations performed on the calling thread so far.
pub fn factorization_count() -> usize {
    linalg::factorization_count()
}
