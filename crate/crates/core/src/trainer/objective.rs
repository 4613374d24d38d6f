//! The composite objective and its reverse-mode gradient.
//!
//! Data term: `tr(Y^T A^{-1} Y) + n_e log det A` over the whole batch, with
//! `A = K + (sigma2 + jitter) I` on encoded inputs and `n_e` outputs per record.
//! Physics term: the revealed records predict the held-out ones through the GP mean, and the
//! diffusion functional is averaged over the held-out records.
//! Reconstruction term: batch mean of `|x - dec(enc(x + noise))|^2`.

use nalgebra::DMatrix;

use super::{BatchData, BatchSplit, TrainConfig};
use crate::deepnet::{Batch, GradientSet, NetworkParams};
use crate::error::ensure_finite;
use crate::gp::{gram_matrix, FeatureVector, GramWorkspace, Kernel};
use crate::linalg;
use crate::physics::diffusion_vloss_grad;
use crate::{Error, Result};

/// Objective value split by term. `physics` and `reconstruction` are unweighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub data: f64,
    pub physics: f64,
    pub reconstruction: f64,
    pub total: f64,
    /// Largest jitter used by the two factorizations.
    pub jitter: f64,
}

fn features(z: &Batch) -> Result<Vec<FeatureVector>> {
    z.iter_rows().map(|r| FeatureVector::new(r.to_vec())).collect()
}

fn to_matrix(b: &Batch, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), b.cols(), |i, c| b.row(rows[i])[c])
}

struct Inference {
    ws: GramWorkspace,
    weights: DMatrix<f64>,
    mean: DMatrix<f64>,
}

fn infer(
    known: &[FeatureVector],
    targets: DMatrix<f64>,
    query: &[FeatureVector],
    kernel: &Kernel,
    cfg: &TrainConfig,
) -> Result<Inference> {
    let ws = gram_matrix(known, kernel, cfg.sigma2, cfg.jitter)?;
    let weights = ws.solve(&targets)?;
    let mean = ws.mean_from_weights(query, &weights)?;
    Ok(Inference { ws, weights, mean })
}

/// GP mean prediction of the held-out solutions from the revealed records, in deep-kernel
/// feature space. Factors the revealed block once.
pub fn infer_unknown(
    params: &NetworkParams,
    known_inputs: &Batch,
    known_targets: &Batch,
    unknown_inputs: &Batch,
    cfg: &TrainConfig,
) -> Result<Batch> {
    if known_inputs.rows() != known_targets.rows() {
        return Err(Error::input("known inputs and targets differ in length"));
    }
    let zk = features(&params.encode_batch(known_inputs)?)?;
    let zu = features(&params.encode_batch(unknown_inputs)?)?;
    let all: Vec<usize> = (0..known_targets.rows()).collect();
    let inf = infer(&zk, to_matrix(known_targets, &all), &zu, &cfg.kernel()?, cfg)?;
    let rows: Vec<Vec<f64>> = (0..inf.mean.nrows())
        .map(|r| inf.mean.row(r).iter().copied().collect())
        .collect();
    Batch::from_rows(&rows)
}

/// Objective value only.
pub fn batch_loss(params: &NetworkParams, data: &BatchData, split: &BatchSplit, cfg: &TrainConfig) -> Result<LossTerms> {
    Ok(evaluate(params, data, split, cfg, false)?.0)
}

/// Objective value and its gradient with respect to every network parameter.
pub fn backprop(
    params: &NetworkParams,
    data: &BatchData,
    split: &BatchSplit,
    cfg: &TrainConfig,
) -> Result<(LossTerms, GradientSet)> {
    let (terms, grads) = evaluate(params, data, split, cfg, true)?;
    Ok((terms, grads.expect("gradient requested")))
}

fn evaluate(
    params: &NetworkParams,
    data: &BatchData,
    split: &BatchSplit,
    cfg: &TrainConfig,
    want_grad: bool,
) -> Result<(LossTerms, Option<GradientSet>)> {
    let s = data.len();
    if split.batch_size() != s || data.targets.rows() != s || data.diffusivity.len() != s {
        return Err(Error::input("batch tensors and split disagree in size"));
    }
    let kernel = cfg.kernel()?;
    let n_e = data.targets.cols() as f64;

    let enc = params.forward(params.encoder_range(), &data.inputs)?;
    ensure_finite("encoded features", enc.output().as_slice())?;
    let z = features(enc.output())?;

    // data term
    let full = gram_matrix(&z, &kernel, cfg.sigma2, cfg.jitter)?;
    let l = full.cholesky();
    let all: Vec<usize> = (0..s).collect();
    let y = to_matrix(&data.targets, &all);
    let v = linalg::solve_lower(l, &y);
    let data_term = v.norm_squared() + n_e * full.log_det();

    // physics term
    let zk: Vec<FeatureVector> = split.known.iter().map(|&i| z[i].clone()).collect();
    let zu: Vec<FeatureVector> = split.unknown.iter().map(|&i| z[i].clone()).collect();
    let inf = infer(&zk, to_matrix(&data.targets, &split.known), &zu, &kernel, cfg)?;
    ensure_finite("predicted solutions", inf.mean.as_slice())?;
    let nu = split.unknown.len();
    let mut physics = 0.0;
    let mut pred_bar = DMatrix::zeros(nu, data.targets.cols());
    for (a, &j) in split.unknown.iter().enumerate() {
        let d = &data.diffusivity[j];
        let field = d.with_values(inf.mean.row(a).iter().copied().collect())?;
        let (loss, grad) = diffusion_vloss_grad(d, &field)?;
        physics += loss / nu as f64;
        for (c, g) in grad.into_iter().enumerate() {
            pred_bar[(a, c)] = cfg.beta * g / nu as f64;
        }
    }

    // reconstruction term
    let mut recon = 0.0;
    let mut noisy_tape = None;
    let mut recon_bar = Batch::zeros(0, 0);
    if params.has_decoder() {
        let mut noisy = data.inputs.clone();
        for r in 0..s {
            for (x, e) in noisy.row_mut(r).iter_mut().zip(data.corruption.row(r)) {
                *x += e;
            }
        }
        let enc_n = params.forward(params.encoder_range(), &noisy)?;
        let dec = params.forward(params.decoder_range(), enc_n.output())?;
        ensure_finite("reconstruction", dec.output().as_slice())?;
        recon_bar = Batch::zeros(s, data.inputs.cols());
        for r in 0..s {
            let (x, rec) = (data.inputs.row(r), dec.output().row(r));
            let out = recon_bar.row_mut(r);
            for c in 0..x.len() {
                let diff = rec[c] - x[c];
                recon += diff * diff / s as f64;
                out[c] = cfg.gamma * 2.0 * diff / s as f64;
            }
        }
        noisy_tape = Some((enc_n, dec));
    }

    let terms = LossTerms {
        data: data_term,
        physics,
        reconstruction: recon,
        total: data_term + cfg.beta * physics + cfg.gamma * recon,
        jitter: full.jitter().max(inf.ws.jitter()),
    };
    if !want_grad {
        return Ok((terms, None));
    }

    // adjoint of the full-batch kernel matrix
    let mut k_bar = {
        let mut l_bar = DMatrix::zeros(s, s);
        let b_bar = linalg::solve_lower_transpose(l, &(&v * 2.0));
        linalg::accumulate_solve_lower_adjoint(&mut l_bar, &b_bar, &v);
        for i in 0..s {
            l_bar[(i, i)] += 2.0 * n_e / l[(i, i)];
        }
        linalg::cholesky_adjoint(l, &l_bar)
    };

    // physics path: mean = K_uk W, W = A_k^{-1} Y_k
    if cfg.beta != 0.0 {
        let kuk_bar = &pred_bar * inf.weights.transpose();
        let kuk = crate::gp::cross_kernel(&kernel, &zu, &zk);
        let w_bar = kuk.transpose() * &pred_bar;
        let m = inf.ws.solve(&w_bar)?;
        let mwt = &m * inf.weights.transpose();
        for (a, &i) in split.known.iter().enumerate() {
            for (b, &j) in split.known.iter().enumerate() {
                k_bar[(i, j)] -= 0.5 * (mwt[(a, b)] + mwt[(b, a)]);
            }
        }
        for (a, &i) in split.unknown.iter().enumerate() {
            for (b, &j) in split.known.iter().enumerate() {
                k_bar[(i, j)] += kuk_bar[(a, b)];
            }
        }
    }

    // K_ij and K_ji are both k(z_i, z_j), so z_i collects both adjoints
    let dim = params.latent_dim();
    let mut z_bar = Batch::zeros(s, dim);
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            let w = k_bar[(i, j)] + k_bar[(j, i)];
            if w == 0.0 {
                continue;
            }
            let (zi, zj) = (z[i].as_slice(), z[j].as_slice());
            let (_, c) = kernel.eval_with_grad(zi, zj);
            let out = z_bar.row_mut(i);
            for d in 0..dim {
                out[d] += w * c * (zi[d] - zj[d]);
            }
        }
    }

    let mut grads = GradientSet::zeros_like(params);
    params.backward(&enc, &z_bar, &mut grads);
    if let Some((enc_n, dec)) = noisy_tape {
        if cfg.gamma != 0.0 {
            let zn_bar = params.backward(&dec, &recon_bar, &mut grads);
            params.backward(&enc_n, &zn_bar, &mut grads);
        }
    }
    ensure_finite("parameter gradient", &grads.to_flat())?;
    Ok((terms, Some(grads)))
}
