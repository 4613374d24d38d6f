//! Dense encoder/decoder network.
//!
//! Layers compute `act(W x + b)` with `W` stored row-major as `out x in`. The first
//! `encoder_end` layers form the encoder `f_E`, whose output is the feature vector fed to
//! the kernel; the remaining layers form the decoder `f_D` used by the reconstruction loss.
//!
//! Forward and backward passes work on row-major [`Batch`]es and use explicit loops with a
//! fixed summation order, so a row's result never depends on the other rows in the batch.

use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::Rng;

use crate::binio::{self, Reader};
use crate::error::ensure_finite;
use crate::gp::{FeatureVector, Kernel};
use crate::rng::{self, Purpose};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PCGPNET1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Row-major matrix with one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Batch {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::input("ragged batch rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Batch {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Rows picked by index, in the given order.
    pub fn select(&self, idx: &[usize]) -> Batch {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Batch {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        rows: usize,
        cols: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::input("layer dimensions must be positive"));
        }
        if weights.len() != rows * cols || bias.len() != rows {
            return Err(Error::input(format!(
                "layer {rows}x{cols} got {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        ensure_finite("layer parameters", weights.iter().chain(&bias))?;
        Ok(Layer {
            rows,
            cols,
            weights,
            bias,
            activation,
        })
    }

    /// Output dimension.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Input dimension.
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn forward(&self, input: &Batch) -> Batch {
        let mut out = Batch::zeros(input.rows, self.rows);
        for r in 0..input.rows {
            let x = input.row(r);
            let y = out.row_mut(r);
            for (o, yo) in y.iter_mut().enumerate() {
                let w = &self.weights[o * self.cols..(o + 1) * self.cols];
                let mut s = self.bias[o];
                for (wi, xi) in w.iter().zip(x) {
                    s += wi * xi;
                }
                *yo = self.activation.apply(s);
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the gradient with respect to the input.
    fn backward(&self, input: &Batch, output: &Batch, grad_out: &Batch, grads: &mut LayerGrad) -> Batch {
        let mut grad_in = Batch::zeros(input.rows, self.cols);
        for r in 0..input.rows {
            let x = input.row(r);
            let y = output.row(r);
            let gy = grad_out.row(r);
            for o in 0..self.rows {
                let delta = gy[o] * self.activation.derivative_from_output(y[o]);
                if delta == 0.0 {
                    continue;
                }
                grads.bias[o] += delta;
                let gw = &mut grads.weights[o * self.cols..(o + 1) * self.cols];
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += delta * xi;
                }
                let w = &self.weights[o * self.cols..(o + 1) * self.cols];
                for (gi, wi) in grad_in.row_mut(r).iter_mut().zip(w) {
                    *gi += delta * wi;
                }
            }
        }
        grad_in
    }
}

/// Network parameters `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    layers: Vec<Layer>,
    encoder_end: usize,
}

impl NetworkParams {
    pub fn new(layers: Vec<Layer>, encoder_end: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("network needs at least one layer"));
        }
        if encoder_end == 0 || encoder_end > layers.len() {
            return Err(Error::input(format!(
                "encoder_end {encoder_end} out of range for {} layers",
                layers.len()
            )));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(Error::input(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].rows,
                    k + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(NetworkParams { layers, encoder_end })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn encoder_end(&self) -> usize {
        self.encoder_end
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn latent_dim(&self) -> usize {
        self.layers[self.encoder_end - 1].rows
    }

    pub fn has_decoder(&self) -> bool {
        self.encoder_end < self.layers.len()
    }

    pub fn encoder_range(&self) -> Range<usize> {
        0..self.encoder_end
    }

    pub fn decoder_range(&self) -> Range<usize> {
        self.encoder_end..self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`NetworkParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::input("flat parameter length mismatch"));
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Runs layers `range` over `input`. The tape holds the input followed by each layer's
    /// output.
    pub fn forward(&self, range: Range<usize>, input: &Batch) -> Result<Tape> {
        let first = &self.layers[range.start];
        if input.cols != first.cols {
            return Err(Error::input(format!(
                "input has {} values, layer {} expects {}",
                input.cols, range.start, first.cols
            )));
        }
        let mut acts = Vec::with_capacity(range.len() + 1);
        acts.push(input.clone());
        for k in range.clone() {
            let next = self.layers[k].forward(acts.last().unwrap());
            acts.push(next);
        }
        Ok(Tape { range, acts })
    }

    /// Back-propagates `grad_out` through the layers recorded in `tape`, accumulating into
    /// `grads`, and returns the gradient with respect to the tape's input.
    pub fn backward(&self, tape: &Tape, grad_out: &Batch, grads: &mut GradientSet) -> Batch {
        let mut g = grad_out.clone();
        for (pos, k) in tape.range.clone().enumerate().rev() {
            g = self.layers[k].backward(&tape.acts[pos], &tape.acts[pos + 1], &g, &mut grads.layers[k]);
        }
        g
    }

    pub fn encode_batch(&self, inputs: &Batch) -> Result<Batch> {
        Ok(self.forward(self.encoder_range(), inputs)?.output().clone())
    }

    pub fn decode_batch(&self, latents: &Batch) -> Result<Batch> {
        if !self.has_decoder() {
            return Err(Error::input("network has no decoder layers"));
        }
        Ok(self.forward(self.decoder_range(), latents)?.output().clone())
    }
}

/// Layer activations recorded by a forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    range: Range<usize>,
    acts: Vec<Batch>,
}

impl Tape {
    pub fn output(&self) -> &Batch {
        self.acts.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `dL/dtheta`, shaped like [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        GradientSet {
            layers: params
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGrad] {
        &self.layers
    }

    /// Same ordering as [`NetworkParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    fn congruent(&self, params: &NetworkParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }
}

/// Glorot-uniform weights (`U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`) and zero biases.
/// Hidden layers use `tanh`; the encoder output and the final layer are linear.
pub fn init_network(layer_dims: &[usize], encoder_end: usize, seed: u64) -> Result<NetworkParams> {
    if layer_dims.len() < 3 {
        return Err(Error::input("need at least three layer dimensions"));
    }
    if layer_dims.contains(&0) {
        return Err(Error::input("layer dimensions must be positive"));
    }
    let n_layers = layer_dims.len() - 1;
    if encoder_end == 0 || encoder_end >= n_layers {
        return Err(Error::input(format!(
            "encoder_end must lie in 1..{n_layers}, got {encoder_end}"
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let (fan_in, fan_out) = (layer_dims[k], layer_dims[k + 1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = rng::stream(seed, Purpose::Init, k as u64);
        let weights = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        let activation = if k + 1 == encoder_end || k + 1 == n_layers {
            Activation::Linear
        } else {
            Activation::Tanh
        };
        layers.push(Layer::new(fan_out, fan_in, weights, vec![0.0; fan_out], activation)?);
    }
    NetworkParams::new(layers, encoder_end)
}

/// Encoder output `f_E(x)`.
pub fn encode(params: &NetworkParams, x: &[f64]) -> Result<FeatureVector> {
    let out = params.encode_batch(&Batch::from_rows(&[x])?)?;
    FeatureVector::new(out.row(0).to_vec())
}

/// Decoder output `f_D(z)`.
pub fn decode(params: &NetworkParams, z: &FeatureVector) -> Result<Vec<f64>> {
    let out = params.decode_batch(&Batch::from_rows(&[z.as_slice()])?)?;
    Ok(out.row(0).to_vec())
}

/// `k(f_E(x1), f_E(x2))`.
pub fn deep_kernel(params: &NetworkParams, x1: &[f64], x2: &[f64], kernel: &Kernel) -> Result<f64> {
    let a = encode(params, x1)?;
    let b = encode(params, x2)?;
    Ok(kernel.eval(a.as_slice(), b.as_slice()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        let n = params.param_count();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &GradientSet,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !grads.congruent(params) || state.m.len() != params.param_count() {
        return Err(Error::input("gradient or optimizer state shape mismatch"));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut at = 0;
    let mut update = |p: &mut [f64], g: &[f64]| {
        for (pi, gi) in p.iter_mut().zip(g) {
            let m = &mut state.m[at];
            let v = &mut state.v[at];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            at += 1;
        }
    };
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        update(&mut layer.weights, &g.weights);
        update(&mut layer.bias, &g.bias);
    }
    Ok(())
}

/// Serializes to `PCGPNET1`: magic, `u32` layer count, per layer `u32` rows, `u32` cols,
/// activation tag byte, row-major `f64` weights then biases, and finally `u32` encoder_end.
/// All integers and floats are little-endian.
pub fn checkpoint_bytes(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    binio::put_u32(&mut out, params.layers.len() as u32);
    for l in &params.layers {
        binio::put_u32(&mut out, l.rows as u32);
        binio::put_u32(&mut out, l.cols as u32);
        out.push(l.activation.tag());
        binio::put_f64s(&mut out, &l.weights);
        binio::put_f64s(&mut out, &l.bias);
    }
    binio::put_u32(&mut out, params.encoder_end as u32);
    out
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rows = r.u32("layer rows")? as usize;
        let cols = r.u32("layer cols")? as usize;
        let at = r.offset();
        let activation = Activation::from_tag(r.u8("activation tag")?)
            .ok_or_else(|| Error::format(at, "unknown activation tag"))?;
        let weights = r.f64s(rows * cols, "weights")?;
        let bias = r.f64s(rows, "biases")?;
        let at = r.offset();
        layers.push(
            Layer::new(rows, cols, weights, bias, activation)
                .map_err(|e| Error::format(at, e.to_string()))?,
        );
    }
    let at = r.offset();
    let encoder_end = r.u32("encoder_end")? as usize;
    r.finish()?;
    NetworkParams::new(layers, encoder_end).map_err(|e| Error::format(at, e.to_string()))
}

pub fn save_network(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(params))?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkParams> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_layer(n: usize) -> Layer {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        Layer::new(n, n, w, vec![0.0; n], Activation::Linear).unwrap()
    }

    /// Straight-line evaluation with no batching machinery.
    fn reference_eval(layers: &[Layer], x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        for l in layers {
            let mut next = Vec::with_capacity(l.rows());
            for o in 0..l.rows() {
                let mut s = l.bias()[o];
                for i in 0..l.cols() {
                    s += l.weights()[o * l.cols() + i] * cur[i];
                }
                next.push(match l.activation() {
                    Activation::Linear => s,
                    Activation::Tanh => s.tanh(),
                });
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_network(&[16, 8, 3, 8, 16], 2, 42).unwrap();
        let b = init_network(&[16, 8, 3, 8, 16], 2, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.layers().iter().all(|l| l.bias().iter().all(|b| *b == 0.0)));
        assert_ne!(a, init_network(&[16, 8, 3, 8, 16], 2, 43).unwrap());
        let acts: Vec<_> = a.layers().iter().map(|l| l.activation()).collect();
        assert_eq!(acts, [Activation::Tanh, Activation::Linear, Activation::Tanh, Activation::Linear]);
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_network(&[4, 2], 1, 0).is_err());
        assert!(init_network(&[4, 2, 4], 0, 0).is_err());
        assert!(init_network(&[4, 2, 4], 2, 0).is_err());
        assert!(init_network(&[4, 0, 4], 1, 0).is_err());
    }

    #[test]
    fn init_weight_mean_is_zero_within_three_standard_errors() {
        let p = init_network(&[400, 250, 10, 10], 1, 9).unwrap();
        let w = p.layers()[0].weights();
        assert!(w.len() >= 100_000);
        let a = (6.0f64 / 650.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= a));
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let se = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn zero_network_encodes_and_decodes_to_zero() {
        let zero = |r, c, act| Layer::new(r, c, vec![0.0; r * c], vec![0.0; r], act).unwrap();
        let p = NetworkParams::new(
            vec![zero(4, 6, Activation::Tanh), zero(2, 4, Activation::Linear), zero(6, 2, Activation::Linear)],
            2,
        )
        .unwrap();
        let z = encode(&p, &[1.0, -2.0, 3.0, 0.5, 0.1, 9.0]).unwrap();
        assert_eq!(z.as_slice(), &[0.0, 0.0]);
        assert_eq!(decode(&p, &z).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn identity_layers_pass_through() {
        let p = NetworkParams::new(vec![identity_layer(3), identity_layer(3)], 1).unwrap();
        let x = [0.25, -1.5, 4.0];
        assert_eq!(encode(&p, &x).unwrap().as_slice(), &x);
        let z = FeatureVector::new(x.to_vec()).unwrap();
        assert_eq!(decode(&p, &z).unwrap(), x.to_vec());
    }

    #[test]
    fn encode_decode_match_reference_evaluation() {
        let p = init_network(&[10, 7, 4, 7, 10], 2, 3).unwrap();
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let z = encode(&p, &x).unwrap();
        let z_ref = reference_eval(&p.layers()[..2], &x);
        for (a, b) in z.as_slice().iter().zip(&z_ref) {
            assert!((a - b).abs() < 1e-14);
        }
        let r = decode(&p, &z).unwrap();
        let r_ref = reference_eval(&p.layers()[2..], z.as_slice());
        for (a, b) in r.iter().zip(&r_ref) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(encode(&p, &x[..9]).is_err());
    }

    #[test]
    fn batch_rows_are_independent_bitwise() {
        let p = init_network(&[12, 9, 5, 9, 12], 2, 4).unwrap();
        let rows: Vec<Vec<f64>> = (0..7).map(|r| (0..12).map(|i| ((r * 12 + i) as f64).cos()).collect()).collect();
        let batch = p.encode_batch(&Batch::from_rows(&rows).unwrap()).unwrap();
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(encode(&p, row).unwrap().as_slice(), batch.row(r));
        }
    }

    #[test]
    fn deep_kernel_identity_symmetry_and_composition() {
        let p = init_network(&[8, 6, 3, 6, 8], 2, 5).unwrap();
        let k = Kernel::exponential(2.0).unwrap();
        for s in 0..50 {
            let a: Vec<f64> = (0..8).map(|i| ((s * 8 + i) as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..8).map(|i| ((s * 8 + i) as f64 * 0.91).cos()).collect();
            assert_eq!(deep_kernel(&p, &a, &a, &k).unwrap(), 1.0);
            assert_eq!(deep_kernel(&p, &a, &b, &k).unwrap(), deep_kernel(&p, &b, &a, &k).unwrap());
            let manual = crate::gp::se_kernel(&encode(&p, &a).unwrap(), &encode(&p, &b).unwrap(), 2.0).unwrap();
            assert_eq!(deep_kernel(&p, &a, &b, &k).unwrap(), manual);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = init_network(&[3, 2, 1, 3], 1, 1).unwrap();
        let before = p.to_flat();
        let mut grads = GradientSet::zeros_like(&p);
        for (k, l) in grads.layers.iter_mut().enumerate() {
            for (i, w) in l.weights.iter_mut().enumerate() {
                *w = if (i + k) % 2 == 0 { 0.3 } else { -2.0 };
            }
            for b in &mut l.bias {
                *b = 1e-3;
            }
        }
        let mut state = AdamState::new(&p);
        let cfg = AdamConfig { lr: 1e-3, ..AdamConfig::default() };
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        for ((a, b), g) in p.to_flat().iter().zip(&before).zip(grads.to_flat()) {
            assert!((a - b + cfg.lr * g.signum()).abs() < 1e-8);
        }
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr_leave_params() {
        let mut p = init_network(&[3, 2, 1, 3], 1, 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &GradientSet::zeros_like(&before), &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
        let mut grads = GradientSet::zeros_like(&p);
        grads.layers[0].weights[0] = 5.0;
        adam_step(&mut p, &grads, &mut state, &AdamConfig { lr: 0.0, ..AdamConfig::default() }).unwrap();
        assert_eq!(p, before);
        assert!(state.second_moments().iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = init_network(&[3, 2, 1, 3], 1, 1).unwrap();
        let other = init_network(&[4, 2, 1, 4], 1, 1).unwrap();
        let mut state = AdamState::new(&p);
        let r = adam_step(&mut p, &GradientSet::zeros_like(&other), &mut state, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn adam_matches_hand_unrolled_trace_on_quadratic() {
        // minimize 0.5 * (w - 3)^2 on a single-weight network
        let layer = Layer::new(1, 1, vec![0.5], vec![0.0], Activation::Linear).unwrap();
        let mut p = NetworkParams::new(vec![layer], 1).unwrap();
        let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut state = AdamState::new(&p);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            let mut grads = GradientSet::zeros_like(&p);
            grads.layers[0].weights[0] = p.layers()[0].weights()[0] - 3.0;
            adam_step(&mut p, &grads, &mut state, &cfg).unwrap();

            let g = w - 3.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p.layers()[0].weights()[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let p = init_network(&[6, 5, 2, 5, 6], 2, 8).unwrap();
        let bytes = checkpoint_bytes(&p);
        let q = parse_checkpoint(&bytes).unwrap();
        assert_eq!(checkpoint_bytes(&q), bytes);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Format { offset: 0, .. })));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(parse_checkpoint(truncated), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(seed in 0u64..500, hidden in 1usize..6, latent in 1usize..4) {
            let mut p = init_network(&[5, hidden, latent, hidden, 5], 2, seed).unwrap();
            // bit patterns that plain decimal printing would lose
            let mut flat = p.to_flat();
            flat[0] = f64::from_bits(0x3ff0_0000_0000_0001);
            flat[1] = -0.0;
            p.set_flat(&flat).unwrap();
            let q = parse_checkpoint(&checkpoint_bytes(&p)).unwrap();
            let same = p.to_flat().iter().zip(q.to_flat()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
            prop_assert_eq!(q.encoder_end(), 2);
        }
    }
}
