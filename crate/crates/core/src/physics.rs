//! Fields on uniform 2-D grids, Sobel gradients, variational losses and the reference solver
//! for `div(D grad u) = 0` with `u = 1` at `x = 0`, `u = 0` at `x = x_max` and zero flux on
//! the top and bottom edges.
//!
//! Node `(i, j)` sits at `x = j h`, `y = i h`; values are stored row-major.

use crate::linalg::BandedSpd;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    nx: usize,
    ny: usize,
    h: f64,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(nx: usize, ny: usize, h: f64, values: Vec<f64>) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::input(format!("grid {nx}x{ny} smaller than 3x3")));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::input(format!("grid spacing must be positive, got {h}")));
        }
        if values.len() != nx * ny {
            return Err(Error::input(format!(
                "field has {} values, expected {}",
                values.len(),
                nx * ny
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("field has non-finite values"));
        }
        Ok(ScalarField { nx, ny, h, values })
    }

    /// Samples `f(x, y)` on an `nx` by `ny` grid with spacing `1 / (nx - 1)`.
    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let h = 1.0 / (nx.max(2) - 1) as f64;
        let mut values = Vec::with_capacity(nx * ny);
        for i in 0..ny {
            for j in 0..nx {
                values.push(f(j as f64 * h, i as f64 * h));
            }
        }
        ScalarField::new(nx, ny, h, values)
    }

    pub fn constant(nx: usize, ny: usize, c: f64) -> Result<Self> {
        ScalarField::from_fn(nx, ny, |_, _| c)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.nx + j]
    }

    /// Same grid, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ScalarField::new(self.nx, self.ny, self.h, values)
    }

    pub fn same_shape(&self, other: &ScalarField) -> bool {
        self.nx == other.nx && self.ny == other.ny
    }

    /// Mirror across the horizontal midline (`y -> y_max - y`).
    pub fn reflect_y(&self) -> ScalarField {
        let mut values = Vec::with_capacity(self.values.len());
        for i in (0..self.ny).rev() {
            values.extend_from_slice(&self.values[i * self.nx..(i + 1) * self.nx]);
        }
        ScalarField {
            values,
            ..self.clone()
        }
    }

    fn require_same_shape(&self, other: &ScalarField) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::input(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.nx, self.ny, other.nx, other.ny
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub gx: ScalarField,
    pub gy: ScalarField,
}

/// Visits the linear stencil of both derivative estimates at every node:
/// `visit(node, axis, neighbour, weight)` with `axis` 0 for `d/dx` and 1 for `d/dy`.
///
/// Interior nodes use the 3x3 Sobel stencils scaled by `1 / (8h)`. Where the Sobel stencil
/// leaves the grid the derivative along the leaving direction is a first-order one-sided
/// difference at the edge and a two-point central difference along the edge. Both are exact
/// for linear fields.
fn for_each_stencil(nx: usize, ny: usize, h: f64, mut visit: impl FnMut(usize, usize, usize, f64)) {
    let idx = |i: usize, j: usize| i * nx + j;
    let sobel = 1.0 / (8.0 * h);
    for i in 0..ny {
        for j in 0..nx {
            let p = idx(i, j);
            let interior = i > 0 && i + 1 < ny && j > 0 && j + 1 < nx;
            if interior {
                for (di, w) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                    let r = (i as isize + di) as usize;
                    visit(p, 0, idx(r, j + 1), w * sobel);
                    visit(p, 0, idx(r, j - 1), -w * sobel);
                }
                for (dj, w) in [(-1isize, 1.0), (0, 2.0), (1, 1.0)] {
                    let c = (j as isize + dj) as usize;
                    visit(p, 1, idx(i + 1, c), w * sobel);
                    visit(p, 1, idx(i - 1, c), -w * sobel);
                }
                continue;
            }
            // d/dx
            if j == 0 {
                visit(p, 0, idx(i, 1), 1.0 / h);
                visit(p, 0, idx(i, 0), -1.0 / h);
            } else if j + 1 == nx {
                visit(p, 0, idx(i, j), 1.0 / h);
                visit(p, 0, idx(i, j - 1), -1.0 / h);
            } else {
                visit(p, 0, idx(i, j + 1), 0.5 / h);
                visit(p, 0, idx(i, j - 1), -0.5 / h);
            }
            // d/dy
            if i == 0 {
                visit(p, 1, idx(1, j), 1.0 / h);
                visit(p, 1, idx(0, j), -1.0 / h);
            } else if i + 1 == ny {
                visit(p, 1, idx(i, j), 1.0 / h);
                visit(p, 1, idx(i - 1, j), -1.0 / h);
            } else {
                visit(p, 1, idx(i + 1, j), 0.5 / h);
                visit(p, 1, idx(i - 1, j), -0.5 / h);
            }
        }
    }
}

/// Sobel gradient with boundary corrections; see [`for_each_stencil`] for the stencils.
pub fn sobel_gradient(u: &ScalarField) -> Result<GradientField> {
    let (gx, gy) = sobel_raw(u.nx, u.ny, u.h, &u.values);
    Ok(GradientField {
        gx: u.with_values(gx)?,
        gy: u.with_values(gy)?,
    })
}

fn sobel_raw(nx: usize, ny: usize, h: f64, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = [vec![0.0; nx * ny], vec![0.0; nx * ny]];
    for_each_stencil(nx, ny, h, |p, axis, q, w| g[axis][p] += w * u[q]);
    let [gx, gy] = g;
    (gx, gy)
}

/// Transpose of the Sobel operator: maps adjoints of `(gx, gy)` back onto the field.
pub fn sobel_adjoint(nx: usize, ny: usize, h: f64, gx_bar: &[f64], gy_bar: &[f64]) -> Vec<f64> {
    let mut u_bar = vec![0.0; nx * ny];
    let g = [gx_bar, gy_bar];
    for_each_stencil(nx, ny, h, |p, axis, q, w| u_bar[q] += w * g[axis][p]);
    u_bar
}

fn require_positive(d: &ScalarField) -> Result<()> {
    if d.values.iter().all(|v| *v > 0.0) {
        Ok(())
    } else {
        Err(Error::input("diffusivity must be strictly positive"))
    }
}

/// Discretized energy functional of the diffusion problem:
///
/// `mean_{i,j} 1/2 D |grad u|^2 + mean_i (u(i,0) - 1)^2 + mean_i u(i,nx-1)^2`
///
/// The energy average runs over every node, boundary nodes included.
pub fn diffusion_vloss(d: &ScalarField, u: &ScalarField) -> Result<f64> {
    Ok(diffusion_vloss_with_grad(d, u, false)?.0)
}

/// [`diffusion_vloss`] and its gradient with respect to the values of `u`.
pub fn diffusion_vloss_grad(d: &ScalarField, u: &ScalarField) -> Result<(f64, Vec<f64>)> {
    let (loss, grad) = diffusion_vloss_with_grad(d, u, true)?;
    Ok((loss, grad.unwrap_or_default()))
}

fn diffusion_vloss_with_grad(
    d: &ScalarField,
    u: &ScalarField,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    d.require_same_shape(u)?;
    require_positive(d)?;
    let (nx, ny) = (u.nx, u.ny);
    let n = (nx * ny) as f64;
    let (gx, gy) = sobel_raw(nx, ny, u.h, &u.values);
    let mut energy = 0.0;
    for p in 0..nx * ny {
        energy += 0.5 * d.values[p] * (gx[p] * gx[p] + gy[p] * gy[p]);
    }
    let mut left = 0.0;
    let mut right = 0.0;
    for i in 0..ny {
        let a = u.at(i, 0) - 1.0;
        let b = u.at(i, nx - 1);
        left += a * a;
        right += b * b;
    }
    let loss = energy / n + (left + right) / ny as f64;
    if !want_grad {
        return Ok((loss, None));
    }
    let gx_bar: Vec<f64> = (0..nx * ny).map(|p| d.values[p] * gx[p] / n).collect();
    let gy_bar: Vec<f64> = (0..nx * ny).map(|p| d.values[p] * gy[p] / n).collect();
    let mut grad = sobel_adjoint(nx, ny, u.h, &gx_bar, &gy_bar);
    for i in 0..ny {
        grad[i * nx] += 2.0 * (u.at(i, 0) - 1.0) / ny as f64;
        grad[i * nx + nx - 1] += 2.0 * u.at(i, nx - 1) / ny as f64;
    }
    Ok((loss, Some(grad)))
}

/// Grid average of `1/2 |grad u|^2 - u g`. No boundary penalty is included.
pub fn poisson_vloss(u: &ScalarField, g: &ScalarField) -> Result<f64> {
    u.require_same_shape(g)?;
    let (gx, gy) = sobel_raw(u.nx, u.ny, u.h, &u.values);
    let total: f64 = (0..u.len())
        .map(|p| 0.5 * (gx[p] * gx[p] + gy[p] * gy[p]) - u.values[p] * g.values[p])
        .sum();
    Ok(total / u.len() as f64)
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Conservative five-point finite-volume operator on the nodes with unknown values (every
/// column except the two Dirichlet columns). Face conductances are harmonic means of the
/// neighbouring diffusivities. The zero-flux edges use ghost-node reflection; their equations
/// are halved so the system stays symmetric.
struct DiffusionOperator<'a> {
    d: &'a ScalarField,
}

impl DiffusionOperator<'_> {
    fn row_weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.d.ny {
            0.5
        } else {
            1.0
        }
    }

    /// Visits `(node, neighbour, conductance)` for every face of every unknown node.
    fn for_each_face(&self, mut visit: impl FnMut((usize, usize), (usize, usize), f64)) {
        let (nx, ny) = (self.d.nx, self.d.ny);
        for i in 0..ny {
            for j in 1..nx - 1 {
                let dp = self.d.at(i, j);
                let w = self.row_weight(i);
                visit((i, j), (i, j - 1), w * harmonic(dp, self.d.at(i, j - 1)));
                visit((i, j), (i, j + 1), w * harmonic(dp, self.d.at(i, j + 1)));
                if i > 0 {
                    visit((i, j), (i - 1, j), harmonic(dp, self.d.at(i - 1, j)));
                }
                if i + 1 < ny {
                    visit((i, j), (i + 1, j), harmonic(dp, self.d.at(i + 1, j)));
                }
            }
        }
    }

    fn solve(&self) -> Result<Vec<f64>> {
        let (nx, ny) = (self.d.nx, self.d.ny);
        let cols = nx - 2;
        let unknown = |i: usize, j: usize| i * cols + (j - 1);
        let mut a = BandedSpd::zeros(ny * cols, cols);
        let mut rhs = vec![0.0; ny * cols];
        self.for_each_face(|(i, j), (k, l), t| {
            let p = unknown(i, j);
            a.add(p, p, t);
            if l == 0 {
                rhs[p] += t;
            } else if l + 1 == nx {
                // u = 0 on the right edge
            } else {
                let q = unknown(k, l);
                if q < p {
                    a.add(p, q, -t);
                }
            }
        });
        let interior = a.solve(&rhs)?;
        let mut u = vec![0.0; nx * ny];
        for i in 0..ny {
            u[i * nx] = 1.0;
            for j in 1..nx - 1 {
                u[i * nx + j] = interior[unknown(i, j)];
            }
        }
        Ok(u)
    }

    /// Largest absolute flux imbalance over unknown nodes divided by the largest diagonal.
    fn residual(&self, u: &ScalarField) -> f64 {
        let nx = self.d.nx;
        let mut imbalance = vec![0.0; u.len()];
        let mut diag = vec![0.0; u.len()];
        self.for_each_face(|(i, j), (k, l), t| {
            let p = i * nx + j;
            imbalance[p] += t * (u.at(i, j) - u.at(k, l));
            diag[p] += t;
        });
        let scale = diag.iter().cloned().fold(0.0, f64::max);
        imbalance.iter().map(|r| r.abs()).fold(0.0, f64::max) / scale
    }
}

/// Steady-state solution of `div(D grad u) = 0` with `u(0, y) = 1`, `u(x_max, y) = 0` and
/// zero flux at `y = 0` and `y = y_max`.
pub fn solve_diffusion(d: &ScalarField) -> Result<ScalarField> {
    require_positive(d)?;
    let values = DiffusionOperator { d }.solve()?;
    d.with_values(values)
}

/// Relative discrete flux residual of `u` under the solver's operator.
pub fn flux_residual(d: &ScalarField, u: &ScalarField) -> Result<f64> {
    d.require_same_shape(u)?;
    require_positive(d)?;
    Ok(DiffusionOperator { d }.residual(u))
}
