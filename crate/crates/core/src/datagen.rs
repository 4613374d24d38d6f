//! Log-normal diffusivity fields from a truncated Karhunen-Loeve expansion, paired with
//! reference solutions, and the `PCGPDS1` dataset file format.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::binio::{self, Reader};
use crate::physics::{solve_diffusion, ScalarField};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"PCGPDS1\0";
/// Bytes before the first record.
pub const DATASET_HEADER_LEN: usize = 8 + 3 * 4 + 8 + 8 + 4 + 8;

/// Leading eigenpairs of the grid covariance `C[p][q] = exp(-|x_p - x_q| / l)`.
#[derive(Clone, Debug)]
pub struct KlBasis {
    nx: usize,
    ny: usize,
    h: f64,
    length_scale: f64,
    eigenvalues: Vec<f64>,
    // one orthonormal column per kept mode
    eigenvectors: DMatrix<f64>,
    trace: f64,
}

pub fn build_kl_basis(nx: usize, ny: usize, length_scale: f64, modes: usize) -> Result<KlBasis> {
    if nx < 3 || ny < 3 {
        return Err(Error::input(format!("grid {nx}x{ny} smaller than 3x3")));
    }
    if !(length_scale > 0.0) {
        return Err(Error::input("correlation length must be positive"));
    }
    let n = nx * ny;
    if modes == 0 || modes > n {
        return Err(Error::input(format!("truncation {modes} outside 1..={n}")));
    }
    let h = 1.0 / (nx - 1) as f64;
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|p| ((p % nx) as f64 * h, (p / nx) as f64 * h))
        .collect();
    let c = DMatrix::from_fn(n, n, |p, q| {
        let (dx, dy) = (coords[p].0 - coords[q].0, coords[p].1 - coords[q].1);
        (-(dx * dx + dy * dy).sqrt() / length_scale).exp()
    });
    let trace = c.trace();
    let eig = SymmetricEigen::try_new(c, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("covariance eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let kept = &order[..modes];
    let eigenvalues = kept.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let eigenvectors = DMatrix::from_fn(n, modes, |p, m| eig.eigenvectors[(p, kept[m])]);
    Ok(KlBasis {
        nx,
        ny,
        h,
        length_scale,
        eigenvalues,
        eigenvectors,
        trace,
    })
}

impl KlBasis {
    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Nonincreasing, clipped at zero.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Trace of the full covariance matrix.
    pub fn trace(&self) -> f64 {
        self.trace
    }

    /// Kept eigenvalue mass over the trace.
    pub fn retained_mass(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.trace
    }

    /// Pointwise variance of the truncated field, `sum_m lambda_m phi_m(p)^2`.
    pub fn pointwise_variance(&self, node: usize) -> f64 {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(m, l)| l * self.eigenvectors[(node, m)].powi(2))
            .sum()
    }

    /// `r = sum_m sqrt(lambda_m) xi_m phi_m`.
    pub fn expand(&self, xi: &[f64]) -> Result<ScalarField> {
        if xi.len() != self.modes() {
            return Err(Error::input(format!(
                "{} coefficients for {} modes",
                xi.len(),
                self.modes()
            )));
        }
        let scaled = DVector::from_iterator(
            xi.len(),
            xi.iter().zip(&self.eigenvalues).map(|(x, l)| x * l.sqrt()),
        );
        let r = &self.eigenvectors * scaled;
        ScalarField::new(self.nx, self.ny, self.h, r.iter().copied().collect())
    }
}

/// Draws one exponent field with i.i.d. standard normal coefficients from `rng`.
pub fn sample_grf(basis: &KlBasis, rng: &mut impl Rng) -> Result<ScalarField> {
    let xi: Vec<f64> = (0..basis.modes()).map(|_| rng.sample(StandardNormal)).collect();
    basis.expand(&xi)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub diffusivity: ScalarField,
    pub solution: ScalarField,
}

impl SampleRecord {
    pub fn new(diffusivity: ScalarField, solution: ScalarField) -> Result<Self> {
        if !diffusivity.same_shape(&solution) {
            return Err(Error::input("diffusivity and solution shapes differ"));
        }
        if diffusivity.values().iter().any(|v| *v <= 0.0) {
            return Err(Error::input("diffusivity must be strictly positive"));
        }
        Ok(SampleRecord {
            diffusivity,
            solution,
        })
    }

    /// `D = exp(r)` paired with its reference solution.
    pub fn from_exponent(exponent: &ScalarField) -> Result<Self> {
        let d = exponent.with_values(exponent.values().iter().map(|r| r.exp()).collect())?;
        let u = solve_diffusion(&d)?;
        SampleRecord::new(d, u)
    }
}

/// Parameters stored in the dataset header.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorParams {
    pub length_scale: f64,
    pub modes: u32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    nx: usize,
    ny: usize,
    spacing: f64,
    params: GeneratorParams,
    records: Vec<SampleRecord>,
}

impl Dataset {
    pub fn new(params: GeneratorParams, records: Vec<SampleRecord>) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::input("dataset needs at least one record"))?;
        let (nx, ny, spacing) = (
            first.diffusivity.nx(),
            first.diffusivity.ny(),
            first.diffusivity.spacing(),
        );
        if records
            .iter()
            .any(|r| r.diffusivity.nx() != nx || r.diffusivity.ny() != ny || r.diffusivity.spacing() != spacing)
        {
            return Err(Error::input("records have mixed grid shapes"));
        }
        Ok(Dataset {
            nx,
            ny,
            spacing,
            params,
            records,
        })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// A contiguous sub-range sharing this dataset's header.
    pub fn slice(&self, range: Range<usize>) -> Result<Dataset> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::input(format!(
                "range {range:?} invalid for {} records",
                self.len()
            )));
        }
        Dataset::new(self.params, self.records[range].to_vec())
    }
}

/// `count` records; record `k` draws its coefficients from child stream `k` of the seed, so
/// the result does not depend on generation order.
pub fn generate_dataset(
    nx: usize,
    ny: usize,
    length_scale: f64,
    modes: usize,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::input("count must be at least 1"));
    }
    let basis = build_kl_basis(nx, ny, length_scale, modes)?;
    generate_with_basis(&basis, count, seed)
}

pub fn generate_with_basis(basis: &KlBasis, count: usize, seed: u64) -> Result<Dataset> {
    let records = (0..count)
        .map(|k| {
            let mut rng = rng::stream(seed, Purpose::Record, k as u64);
            SampleRecord::from_exponent(&sample_grf(basis, &mut rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        GeneratorParams {
            length_scale: basis.length_scale,
            modes: basis.modes() as u32,
            seed,
        },
        records,
    )
}

/// `PCGPDS1` layout, little-endian: 8-byte magic `PCGPDS1\0`; `u32` nx, ny, count; `f64`
/// spacing; `f64` correlation length; `u32` KL modes; `u64` seed; then per record `nx * ny`
/// row-major `f64` diffusivities followed by `nx * ny` row-major `f64` solution values.
pub fn dataset_bytes(ds: &Dataset) -> Vec<u8> {
    let n = ds.nx * ds.ny;
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN + ds.len() * 2 * n * 8);
    out.extend_from_slice(DATASET_MAGIC);
    binio::put_u32(&mut out, ds.nx as u32);
    binio::put_u32(&mut out, ds.ny as u32);
    binio::put_u32(&mut out, ds.len() as u32);
    binio::put_f64s(&mut out, &[ds.spacing, ds.params.length_scale]);
    binio::put_u32(&mut out, ds.params.modes);
    binio::put_u64(&mut out, ds.params.seed);
    for r in &ds.records {
        binio::put_f64s(&mut out, r.diffusivity.values());
        binio::put_f64s(&mut out, r.solution.values());
    }
    out
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let nx = r.u32("nx")? as usize;
    let ny = r.u32("ny")? as usize;
    let count = r.u32("count")? as usize;
    let spacing = r.f64("spacing")?;
    let length_scale = r.f64("correlation length")?;
    let modes = r.u32("KL modes")?;
    let seed = r.u64("seed")?;
    if count == 0 {
        return Err(Error::format(16, "dataset has no records"));
    }
    let n = nx * ny;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let d = r.f64s(n, "diffusivity")?;
        let u = r.f64s(n, "solution")?;
        let bad = |e: Error| Error::format(at, e.to_string());
        let d = ScalarField::new(nx, ny, spacing, d).map_err(bad)?;
        let u = ScalarField::new(nx, ny, spacing, u).map_err(bad)?;
        records.push(SampleRecord::new(d, u).map_err(bad)?);
    }
    r.finish()?;
    Dataset::new(
        GeneratorParams {
            length_scale,
            modes,
            seed,
        },
        records,
    )
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_bytes(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&fs::read(path)?)
}
