//! The trained surrogate and test-set evaluation.

use nalgebra::DMatrix;
use rand::seq::index;

use super::TrainConfig;
use crate::datagen::Dataset;
use crate::deepnet::NetworkParams;
use crate::gp::{gram_matrix, FeatureVector, GramWorkspace};
use crate::physics::ScalarField;
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

/// GP posterior mean conditioned on a fixed subset of training records, in the feature
/// space of a trained encoder.
#[derive(Clone, Debug)]
pub struct Surrogate {
    params: NetworkParams,
    cfg: TrainConfig,
    ws: GramWorkspace,
    weights: DMatrix<f64>,
    subset: Vec<usize>,
    nx: usize,
    ny: usize,
}

impl Surrogate {
    /// Training positions the surrogate conditions on: all of them when there are at most
    /// `eval_subset`, otherwise a sorted seeded sample.
    pub fn subset_indices(len: usize, cfg: &TrainConfig) -> Vec<usize> {
        if len <= cfg.eval_subset {
            return (0..len).collect();
        }
        let mut idx = index::sample(&mut stream(cfg.seed, Purpose::Subset, 0), len, cfg.eval_subset)
            .into_vec();
        idx.sort_unstable();
        idx
    }

    pub fn new(params: &NetworkParams, train: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::input("training set is empty"));
        }
        if params.input_dim() != train.nx() * train.ny() {
            return Err(Error::input(format!(
                "network expects {} inputs, grid has {} nodes",
                params.input_dim(),
                train.nx() * train.ny()
            )));
        }
        let subset = Self::subset_indices(train.len(), cfg);
        let records: Vec<_> = subset.iter().map(|&i| &train.records()[i]).collect();
        let inputs = cfg.network_inputs(records.iter().map(|r| &r.diffusivity))?;
        let z = to_features(&params.encode_batch(&inputs)?)?;
        let ws = gram_matrix(&z, &cfg.kernel()?, cfg.sigma2, cfg.jitter)?;
        let n = train.nx() * train.ny();
        let y = DMatrix::from_fn(records.len(), n, |r, c| records[r].solution.values()[c]);
        let weights = ws.solve(&y)?;
        Ok(Surrogate {
            params: params.clone(),
            cfg: cfg.clone(),
            ws,
            weights,
            subset,
            nx: train.nx(),
            ny: train.ny(),
        })
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    /// Jitter used when factoring the conditioning Gram matrix.
    pub fn jitter(&self) -> f64 {
        self.ws.jitter()
    }

    fn encode<'a>(&self, fields: impl IntoIterator<Item = &'a ScalarField>) -> Result<(Vec<FeatureVector>, Vec<&'a ScalarField>)> {
        let fields: Vec<&ScalarField> = fields.into_iter().collect();
        if let Some(bad) = fields.iter().find(|f| f.nx() != self.nx || f.ny() != self.ny) {
            return Err(Error::input(format!(
                "field is {}x{}, surrogate expects {}x{}",
                bad.nx(),
                bad.ny(),
                self.nx,
                self.ny
            )));
        }
        if fields.is_empty() {
            return Ok((Vec::new(), fields));
        }
        let inputs = self.cfg.network_inputs(fields.iter().copied())?;
        Ok((to_features(&self.params.encode_batch(&inputs)?)?, fields))
    }

    /// Predicted solutions. Each prediction is independent of the others in the call.
    pub fn predict_all<'a>(&self, fields: impl IntoIterator<Item = &'a ScalarField>) -> Result<Vec<ScalarField>> {
        let (z, fields) = self.encode(fields)?;
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let mean = self.ws.mean_from_weights(&z, &self.weights)?;
        fields
            .iter()
            .enumerate()
            .map(|(r, d)| d.with_values(mean.row(r).iter().copied().collect()))
            .collect()
    }

    pub fn predict(&self, field: &ScalarField) -> Result<ScalarField> {
        Ok(self.predict_all([field])?.remove(0))
    }

    /// Posterior variance of each prediction; shared by every node of a field.
    pub fn variance<'a>(&self, fields: impl IntoIterator<Item = &'a ScalarField>) -> Result<Vec<f64>> {
        let (z, _) = self.encode(fields)?;
        if z.is_empty() {
            return Ok(Vec::new());
        }
        self.ws.posterior_variance(&z)
    }
}

fn to_features(z: &crate::deepnet::Batch) -> Result<Vec<FeatureVector>> {
    z.iter_rows().map(|r| FeatureVector::new(r.to_vec())).collect()
}

/// Mean squared error over every node of every field.
pub fn mse<'a>(pred: &[ScalarField], truth: impl IntoIterator<Item = &'a ScalarField>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.values().iter().zip(t.values()) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    sum / n as f64
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Statistics of predicted and reference solution values at one probe across the test set.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeStats {
    pub x: f64,
    pub y: f64,
    /// Grid node `(row, column)` nearest to the probe.
    pub node: (usize, usize),
    pub predicted: Vec<f64>,
    pub reference: Vec<f64>,
    pub pred_mean: f64,
    pub pred_std: f64,
    pub ref_mean: f64,
    pub ref_std: f64,
}

impl ProbeStats {
    /// `|pred_std - ref_std| / ref_std`.
    pub fn std_rel_error(&self) -> f64 {
        (self.pred_std - self.ref_std).abs() / self.ref_std
    }
}

/// Nearest node `(row, column)` to `(x, y)`.
pub fn probe_node(x: f64, y: f64, nx: usize, ny: usize, h: f64) -> (usize, usize) {
    let snap = |c: f64, n: usize| ((c / h).round().max(0.0) as usize).min(n - 1);
    (snap(y, ny), snap(x, nx))
}

/// Equal-width bins shared by predicted and reference samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub predicted: Vec<usize>,
    pub reference: Vec<usize>,
}

/// Bins both samples over their joint range.
pub fn histogram(predicted: &[f64], reference: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let all = predicted.iter().chain(reference);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0), lo.max(0.0) + 1.0) };
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let count = |v: &[f64]| {
        let mut c = vec![0usize; bins];
        for x in v {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            c[b] += 1;
        }
        c
    };
    Histogram {
        edges,
        predicted: count(predicted),
        reference: count(reference),
    }
}

/// Test-set metrics of a trained network.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub test_mse: f64,
    /// MSE of predicting the training-set mean solution for every test record.
    pub baseline_mse: f64,
    pub predictions: Vec<ScalarField>,
    pub probes: Vec<ProbeStats>,
    pub jitter: f64,
}

impl Evaluation {
    /// Metrics as `key=value` lines.
    pub fn report(&self) -> String {
        let mut out = format!(
            "test_mse={:.10e}\nbaseline_mse={:.10e}\ntest_count={}\njitter={:e}\n",
            self.test_mse,
            self.baseline_mse,
            self.predictions.len(),
            self.jitter
        );
        for (k, p) in self.probes.iter().enumerate() {
            out.push_str(&format!(
                "probe{k}_x={}\nprobe{k}_y={}\nprobe{k}_pred_mean={:.10e}\nprobe{k}_pred_std={:.10e}\nprobe{k}_ref_mean={:.10e}\nprobe{k}_ref_std={:.10e}\nprobe{k}_std_rel_error={:.6}\n",
                p.x,
                p.y,
                p.pred_mean,
                p.pred_std,
                p.ref_mean,
                p.ref_std,
                p.std_rel_error()
            ));
        }
        out
    }
}

/// Predicts every test record and summarizes the errors.
pub fn evaluate(params: &NetworkParams, train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::input("test set is empty"));
    }
    if train.nx() != test.nx() || train.ny() != test.ny() {
        return Err(Error::input("training and test grids differ"));
    }
    let surrogate = Surrogate::new(params, train, cfg)?;
    let predictions = surrogate.predict_all(test.records().iter().map(|r| &r.diffusivity))?;
    let truth: Vec<&ScalarField> = test.records().iter().map(|r| &r.solution).collect();
    let test_mse = mse(&predictions, truth.iter().copied());

    let n = train.nx() * train.ny();
    let mut mean = vec![0.0; n];
    for r in train.records() {
        for (m, v) in mean.iter_mut().zip(r.solution.values()) {
            *m += v / train.len() as f64;
        }
    }
    let baseline: Vec<ScalarField> = truth
        .iter()
        .map(|t| t.with_values(mean.clone()))
        .collect::<Result<_>>()?;
    let baseline_mse = mse(&baseline, truth.iter().copied());

    let probes = cfg
        .probes
        .iter()
        .map(|&(x, y)| {
            let node = probe_node(x, y, test.nx(), test.ny(), test.spacing());
            let predicted: Vec<f64> = predictions.iter().map(|p| p.at(node.0, node.1)).collect();
            let reference: Vec<f64> = truth.iter().map(|t| t.at(node.0, node.1)).collect();
            let (pred_mean, pred_std) = mean_std(&predicted);
            let (ref_mean, ref_std) = mean_std(&reference);
            ProbeStats {
                x,
                y,
                node,
                predicted,
                reference,
                pred_mean,
                pred_std,
                ref_mean,
                ref_std,
            }
        })
        .collect();
    Ok(Evaluation {
        test_mse,
        baseline_mse,
        predictions,
        probes,
        jitter: surrogate.jitter(),
    })
}
