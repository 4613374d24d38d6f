//! Composite objective, gradient-based training and surrogate evaluation.

mod eval;
mod objective;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::datagen::{Dataset, SampleRecord};
use crate::deepnet::{adam_step, init_network, AdamConfig, AdamState, Batch, NetworkParams};
use crate::gp::{Kernel, KernelForm};
use crate::physics::ScalarField;
use crate::rng::{stream, Purpose};
use crate::{Error, Result};

pub use eval::{evaluate, histogram, mse, probe_node, Evaluation, Histogram, ProbeStats, Surrogate};
pub use objective::{backprop, batch_loss, infer_unknown, LossTerms};

/// How a diffusivity field is turned into a network input vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InputTransform {
    /// `ln D` at each node.
    #[default]
    Log,
    /// `D` at each node.
    Raw,
}

impl InputTransform {
    pub fn name(self) -> &'static str {
        match self {
            InputTransform::Log => "log",
            InputTransform::Raw => "raw",
        }
    }
}

impl FromStr for InputTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(InputTransform::Log),
            "raw" => Ok(InputTransform::Raw),
            other => Err(Error::input(format!("unknown input transform {other:?}"))),
        }
    }
}

impl fmt::Display for InputTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything that controls training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the physics term.
    pub beta: f64,
    /// Weight of the reconstruction term.
    pub gamma: f64,
    pub sigma2: f64,
    pub jitter: f64,
    pub length_scale: f64,
    pub kernel_form: KernelForm,
    pub batch_size: usize,
    /// Records per batch whose solutions are revealed to the GP.
    pub known_count: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    /// Standard deviation of the input corruption for the reconstruction term.
    pub corruption_std: f64,
    /// Training records the surrogate conditions on at evaluation time.
    pub eval_subset: usize,
    pub input_transform: InputTransform,
    /// Multiplies the transformed input. Small values keep initial feature distances well
    /// below the kernel length scale.
    pub input_scale: f64,
    /// Probe locations `(x, y)` in the unit square.
    pub probes: Vec<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            gamma: 1.0,
            sigma2: 1e-4,
            jitter: 0.0,
            length_scale: 2.0,
            kernel_form: KernelForm::Exponential,
            batch_size: 96,
            known_count: 48,
            epochs: 150,
            adam: AdamConfig::default(),
            seed: 0,
            hidden_dims: vec![128],
            latent_dim: 32,
            corruption_std: 0.05,
            eval_subset: 256,
            input_transform: InputTransform::Log,
            input_scale: 1e-3,
            probes: vec![(0.25, 0.5), (0.5, 0.5), (0.75, 0.5), (0.5, 0.25)],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::input(format!("{name} must be finite and nonnegative, got {v}")))
            }
        };
        nonneg("beta", self.beta)?;
        nonneg("gamma", self.gamma)?;
        nonneg("sigma2", self.sigma2)?;
        nonneg("jitter", self.jitter)?;
        nonneg("corruption_std", self.corruption_std)?;
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::input("length_scale must be positive"));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::input("input_scale must be positive"));
        }
        if self.known_count == 0 || self.known_count >= self.batch_size {
            return Err(Error::input(format!(
                "known_count must be in 1..{} (batch_size), got {}",
                self.batch_size, self.known_count
            )));
        }
        if self.latent_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::input("layer widths must be positive"));
        }
        if self.eval_subset == 0 {
            return Err(Error::input("eval_subset must be positive"));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::input("invalid optimizer settings"));
        }
        for &(x, y) in &self.probes {
            if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                return Err(Error::input(format!("probe ({x}, {y}) is outside the unit square")));
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<Kernel> {
        Kernel::new(self.length_scale, self.kernel_form)
    }

    /// Layer widths from input to reconstruction for a field with `nodes` values.
    pub fn layer_dims(&self, nodes: usize) -> Vec<usize> {
        let mut dims = vec![nodes];
        dims.extend(&self.hidden_dims);
        dims.push(self.latent_dim);
        dims.extend(self.hidden_dims.iter().rev());
        dims.push(nodes);
        dims
    }

    /// Freshly initialized encoder/decoder for fields with `nodes` values.
    pub fn init_params(&self, nodes: usize) -> Result<NetworkParams> {
        init_network(&self.layer_dims(nodes), self.hidden_dims.len() + 1, self.seed)
    }

    /// Network input for one diffusivity field.
    pub fn network_input(&self, d: &ScalarField) -> Vec<f64> {
        let s = self.input_scale;
        match self.input_transform {
            InputTransform::Log => d.values().iter().map(|v| s * v.ln()).collect(),
            InputTransform::Raw => d.values().iter().map(|v| s * v).collect(),
        }
    }

    /// Network inputs for several fields, one row each.
    pub fn network_inputs<'a>(&self, fields: impl IntoIterator<Item = &'a ScalarField>) -> Result<Batch> {
        let rows: Vec<Vec<f64>> = fields.into_iter().map(|d| self.network_input(d)).collect();
        Batch::from_rows(&rows)
    }
}

/// Partition of batch positions into revealed and held-out records, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchSplit {
    pub known: Vec<usize>,
    pub unknown: Vec<usize>,
}

impl BatchSplit {
    pub fn new(known: Vec<usize>, unknown: Vec<usize>) -> Result<Self> {
        let n = known.len() + unknown.len();
        let mut seen = vec![false; n];
        for &i in known.iter().chain(&unknown) {
            if i >= n || seen[i] {
                return Err(Error::input("split must partition 0..batch size"));
            }
            seen[i] = true;
        }
        if known.is_empty() || unknown.is_empty() {
            return Err(Error::input("both halves of a split must be nonempty"));
        }
        Ok(BatchSplit { known, unknown })
    }

    pub fn batch_size(&self) -> usize {
        self.known.len() + self.unknown.len()
    }
}

/// Uniformly random split of `0..size` with `known` revealed positions.
pub fn split_batch(size: usize, known: usize, rng: &mut impl Rng) -> Result<BatchSplit> {
    if known == 0 || known >= size {
        return Err(Error::input(format!("cannot reveal {known} of {size} records")));
    }
    let mut idx: Vec<usize> = (0..size).collect();
    idx.shuffle(rng);
    let mut k = idx[..known].to_vec();
    let mut u = idx[known..].to_vec();
    k.sort_unstable();
    u.sort_unstable();
    Ok(BatchSplit { known: k, unknown: u })
}

/// The tensors one objective evaluation needs.
#[derive(Clone, Debug)]
pub struct BatchData {
    /// Clean network inputs, one row per record.
    pub inputs: Batch,
    /// Solution values, one row per record.
    pub targets: Batch,
    pub diffusivity: Vec<ScalarField>,
    /// Additive input corruption for the reconstruction term.
    pub corruption: Batch,
}

impl BatchData {
    /// Batch with zero corruption.
    pub fn new(records: &[&SampleRecord], cfg: &TrainConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let inputs = cfg.network_inputs(records.iter().map(|r| &r.diffusivity))?;
        let targets = Batch::from_rows(
            &records.iter().map(|r| r.solution.values()).collect::<Vec<_>>(),
        )?;
        let corruption = Batch::zeros(inputs.rows(), inputs.cols());
        Ok(BatchData {
            inputs,
            targets,
            diffusivity: records.iter().map(|r| r.diffusivity.clone()).collect(),
            corruption,
        })
    }

    /// Replaces the corruption with fresh Gaussian noise of standard deviation `std`.
    pub fn corrupt(&mut self, std: f64, rng: &mut impl Rng) -> Result<()> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::input(e.to_string()))?;
        for r in 0..self.corruption.rows() {
            for v in self.corruption.row_mut(r) {
                *v = normal.sample(rng);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-epoch training summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub train_loss: f64,
    pub val_mse: f64,
    /// Largest jitter any factorization needed during the epoch.
    pub max_jitter: f64,
}

/// Parameters selected by validation error.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: NetworkParams,
    /// Epoch the parameters come from; 0 is the initialization.
    pub epoch: usize,
    pub val_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// History as CSV with header `epoch,train_loss,val_mse`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_mse\n");
    for h in history {
        out.push_str(&format!("{},{:.16e},{:.16e}\n", h.epoch, h.train_loss, h.val_mse));
    }
    out
}

fn check_compatible(train: &Dataset, other: &Dataset, what: &str) -> Result<()> {
    if train.nx() != other.nx() || train.ny() != other.ny() {
        return Err(Error::input(format!(
            "{what} grid {}x{} does not match training grid {}x{}",
            other.nx(),
            other.ny(),
            train.nx(),
            train.ny()
        )));
    }
    Ok(())
}

/// Trains from a fresh initialization. See [`train_with`].
pub fn train(train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(train_set, val_set, cfg, |_| {})
}

/// Minimizes the composite objective with Adam over shuffled, complete batches, calling
/// `on_epoch` after each epoch. The returned checkpoint has the lowest validation MSE seen
/// (the initialization counts as epoch 0; ties keep the earliest).
pub fn train_with(
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(train_set, val_set, "validation")?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::input(format!(
            "training set has {} records, fewer than one batch of {}",
            train_set.len(),
            cfg.batch_size
        )));
    }
    if val_set.is_empty() {
        return Err(Error::input("validation set is empty"));
    }
    let mut params = cfg.init_params(train_set.nx() * train_set.ny())?;
    let val_mse = |p: &NetworkParams| -> Result<f64> {
        let s = Surrogate::new(p, train_set, cfg)?;
        let preds = s.predict_all(val_set.records().iter().map(|r| &r.diffusivity))?;
        Ok(mse(&preds, val_set.records().iter().map(|r| &r.solution)))
    };
    let mut best = Checkpoint {
        params: params.clone(),
        epoch: 0,
        val_mse: val_mse(&params)?,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut adam = AdamState::new(&params);
    let batches = train_set.len() / cfg.batch_size;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let mut total = 0.0;
        let mut max_jitter = 0.0f64;
        for b in 0..batches {
            let records: Vec<&SampleRecord> = order[b * cfg.batch_size..(b + 1) * cfg.batch_size]
                .iter()
                .map(|&i| &train_set.records()[i])
                .collect();
            let mut data = BatchData::new(&records, cfg)?;
            data.corrupt(cfg.corruption_std, &mut stream(cfg.seed, Purpose::Corruption, step))?;
            let split = split_batch(
                cfg.batch_size,
                cfg.known_count,
                &mut stream(cfg.seed, Purpose::Split, step),
            )?;
            let (terms, grads) = backprop(&params, &data, &split, cfg).map_err(|e| {
                Error::Numerical(format!("epoch {epoch}, batch {b}: {e}"))
            })?;
            if !terms.total.is_finite() {
                return Err(Error::Numerical(format!(
                    "epoch {epoch}, batch {b}: objective is {}",
                    terms.total
                )));
            }
            adam_step(&mut params, &grads, &mut adam, &cfg.adam)?;
            total += terms.total;
            max_jitter = max_jitter.max(terms.jitter);
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_mse: val_mse(&params)?,
            max_jitter,
        };
        if record.val_mse < best.val_mse {
            best = Checkpoint {
                params: params.clone(),
                epoch,
                val_mse: record.val_mse,
            };
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome { best, history })
}

#[cfg(test)]
mod tests;
