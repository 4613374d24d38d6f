use super::*;
use crate::datagen::generate_dataset;
use crate::gp::{factorization_count, gram_matrix, log_marginal_nll, FeatureVector};
use crate::rng::{stream, Purpose};
use nalgebra::DMatrix;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        sigma2: 1e-2,
        batch_size: 6,
        known_count: 3,
        hidden_dims: vec![8],
        latent_dim: 3,
        eval_subset: 8,
        seed: 11,
        // keep feature distances large next to the finite-difference step; the exponential
        // kernel's curvature grows like 1/r near coincident features
        input_scale: 1.0,
        ..TrainConfig::default()
    }
}

fn tiny_batch(cfg: &TrainConfig) -> (NetworkParams, BatchData, BatchSplit) {
    let ds = generate_dataset(4, 4, 0.2, 16, 6, 5).unwrap();
    let records: Vec<&SampleRecord> = ds.records().iter().collect();
    let mut data = BatchData::new(&records, cfg).unwrap();
    data.corrupt(cfg.corruption_std, &mut stream(1, Purpose::Corruption, 0)).unwrap();
    let split = split_batch(6, 3, &mut stream(1, Purpose::Split, 0)).unwrap();
    let mut params = cfg.init_params(16).unwrap();
    // spread the features out so kernel values are not all near one
    let flat: Vec<f64> = params.to_flat().iter().map(|w| 2.0 * w).collect();
    params.set_flat(&flat).unwrap();
    (params, data, split)
}

fn check_gradient(cfg: &TrainConfig) {
    let (params, data, split) = tiny_batch(cfg);
    assert!(params.param_count() <= 500);
    let (_, grads) = backprop(&params, &data, &split, cfg).unwrap();
    let analytic = grads.to_flat();
    let base = params.to_flat();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut p = params.clone();
        let mut x = base.clone();
        x[i] = base[i] + h;
        p.set_flat(&x).unwrap();
        let plus = batch_loss(&p, &data, &split, cfg).unwrap().total;
        x[i] = base[i] - h;
        p.set_flat(&x).unwrap();
        let minus = batch_loss(&p, &data, &split, cfg).unwrap().total;
        let fd = (plus - minus) / (2.0 * h);
        let g = analytic[i];
        if g.abs() < 1e-6 && fd.abs() < 1e-6 {
            assert!((g - fd).abs() < 1e-8, "param {i}: analytic {g} fd {fd}");
        } else {
            let rel = (g - fd).abs() / g.abs().max(fd.abs());
            worst = worst.max(rel);
            assert!(rel < 1e-4, "param {i}: analytic {g} fd {fd} rel {rel}");
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradient_matches_finite_differences() {
    check_gradient(&tiny_config());
}

#[test]
fn gradient_matches_finite_differences_squared_kernel() {
    let cfg = TrainConfig {
        kernel_form: crate::gp::KernelForm::Squared,
        ..tiny_config()
    };
    check_gradient(&cfg);
}

#[test]
fn gradient_matches_finite_differences_per_term() {
    for (beta, gamma) in [(0.0, 0.0), (3.0, 0.0), (0.0, 2.0)] {
        check_gradient(&TrainConfig {
            beta,
            gamma,
            ..tiny_config()
        });
    }
}

#[test]
fn data_term_is_sum_of_per_output_nll() {
    let cfg = TrainConfig {
        beta: 0.0,
        gamma: 0.0,
        ..tiny_config()
    };
    let (params, data, split) = tiny_batch(&cfg);
    let terms = batch_loss(&params, &data, &split, &cfg).unwrap();
    assert_eq!(terms.total, terms.data);
    let z: Vec<FeatureVector> = params
        .encode_batch(&data.inputs)
        .unwrap()
        .iter_rows()
        .map(|r| FeatureVector::new(r.to_vec()).unwrap())
        .collect();
    let ws = gram_matrix(&z, &cfg.kernel().unwrap(), cfg.sigma2, cfg.jitter).unwrap();
    let expected: f64 = (0..data.targets.cols())
        .map(|c| {
            let y: Vec<f64> = data.targets.iter_rows().map(|r| r[c]).collect();
            log_marginal_nll(&ws, &y).unwrap()
        })
        .sum();
    assert!((terms.total - expected).abs() <= 1e-10 * expected.abs().max(1.0));
}

#[test]
fn total_is_linear_in_beta() {
    let cfg = tiny_config();
    let (params, data, split) = tiny_batch(&cfg);
    let at = |beta: f64| {
        batch_loss(&params, &data, &split, &TrainConfig { beta, ..cfg.clone() }).unwrap()
    };
    let (a, b) = (at(0.0), at(2.0));
    assert!((b.total - a.total - 2.0 * a.physics).abs() < 1e-9 * b.total.abs().max(1.0));
    assert_eq!(a.physics, b.physics);
}

#[test]
fn huge_noise_makes_gradient_vanish() {
    let cfg = TrainConfig {
        beta: 0.0,
        gamma: 0.0,
        sigma2: 1e12,
        ..tiny_config()
    };
    let (params, mut data, split) = tiny_batch(&cfg);
    data.targets = Batch::zeros(data.targets.rows(), data.targets.cols());
    let (_, grads) = backprop(&params, &data, &split, &cfg).unwrap();
    assert!(grads.to_flat().iter().all(|g| g.abs() < 1e-10));
}

#[test]
fn objective_factors_full_batch_and_known_block_once_each() {
    let cfg = tiny_config();
    let (params, data, split) = tiny_batch(&cfg);
    let before = factorization_count();
    backprop(&params, &data, &split, &cfg).unwrap();
    assert_eq!(factorization_count() - before, 2);
}

#[test]
fn infer_unknown_matches_dense_inverse() {
    let cfg = tiny_config();
    let (params, data, split) = tiny_batch(&cfg);
    let xk = data.inputs.select(&split.known);
    let yk = data.targets.select(&split.known);
    let xu = data.inputs.select(&split.unknown);
    let before = factorization_count();
    let pred = infer_unknown(&params, &xk, &yk, &xu, &cfg).unwrap();
    assert_eq!(factorization_count() - before, 1);

    let kernel = cfg.kernel().unwrap();
    let zk = params.encode_batch(&xk).unwrap();
    let zu = params.encode_batch(&xu).unwrap();
    let nk = zk.rows();
    let a = DMatrix::from_fn(nk, nk, |i, j| {
        kernel.eval(zk.row(i), zk.row(j)) + if i == j { cfg.sigma2 } else { 0.0 }
    });
    let kuk = DMatrix::from_fn(zu.rows(), nk, |i, j| kernel.eval(zu.row(i), zk.row(j)));
    let y = DMatrix::from_fn(nk, yk.cols(), |i, c| yk.row(i)[c]);
    let oracle = kuk * a.try_inverse().unwrap() * y;
    for r in 0..pred.rows() {
        for c in 0..pred.cols() {
            assert!((pred.row(r)[c] - oracle[(r, c)]).abs() < 1e-9);
        }
    }
}

#[test]
fn nonfinite_input_is_named() {
    let cfg = tiny_config();
    let (params, mut data, split) = tiny_batch(&cfg);
    data.inputs.row_mut(2)[0] = f64::NAN;
    match batch_loss(&params, &data, &split, &cfg) {
        Err(Error::NonFinite { tensor }) => assert_eq!(tensor, "encoded features"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn split_partitions_and_is_reproducible() {
    let a = split_batch(96, 48, &mut stream(3, Purpose::Split, 7)).unwrap();
    let b = split_batch(96, 48, &mut stream(3, Purpose::Split, 7)).unwrap();
    let c = split_batch(96, 48, &mut stream(3, Purpose::Split, 8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.known.len(), 48);
    let mut all: Vec<usize> = a.known.iter().chain(&a.unknown).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..96).collect::<Vec<_>>());
    assert!(split_batch(4, 4, &mut stream(0, Purpose::Split, 0)).is_err());
    assert!(BatchSplit::new(vec![0, 1], vec![1, 2]).is_err());
}

#[test]
fn split_membership_is_roughly_uniform() {
    let mut hits = [0usize; 10];
    for t in 0..2000 {
        let s = split_batch(10, 5, &mut stream(0, Purpose::Split, t)).unwrap();
        for k in s.known {
            hits[k] += 1;
        }
    }
    // each position is revealed with probability 1/2; sd of the count is about 22
    assert!(hits.iter().all(|&h| (h as f64 - 1000.0).abs() < 110.0), "{hits:?}");
}

fn tiny_sets() -> (Dataset, Dataset) {
    let ds = generate_dataset(4, 4, 0.2, 16, 16, 9).unwrap();
    (ds.slice(0..12).unwrap(), ds.slice(12..16).unwrap())
}

#[test]
fn zero_epochs_returns_initialization() {
    let (tr, va) = tiny_sets();
    let cfg = TrainConfig { epochs: 0, ..tiny_config() };
    let out = train(&tr, &va, &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.best.epoch, 0);
    assert_eq!(out.best.params, cfg.init_params(16).unwrap());
}

#[test]
fn training_is_deterministic_and_keeps_best_checkpoint() {
    let (tr, va) = tiny_sets();
    let cfg = TrainConfig { epochs: 6, adam: crate::deepnet::AdamConfig { lr: 1e-2, ..Default::default() }, ..tiny_config() };
    let a = train(&tr, &va, &cfg).unwrap();
    let b = train(&tr, &va, &cfg).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(a.best.params, b.best.params);
    assert_eq!(a.history.len(), 6);
    let best = a.history.iter().map(|h| h.val_mse).fold(f64::INFINITY, f64::min);
    assert!(a.best.val_mse <= best);
    if a.best.epoch > 0 {
        let rec = a.history[a.best.epoch - 1];
        assert_eq!(rec.val_mse, a.best.val_mse);
        assert!(a.history[..a.best.epoch - 1].iter().all(|h| h.val_mse > rec.val_mse));
    }
    // the selected parameters reproduce the recorded validation error
    let s = Surrogate::new(&a.best.params, &tr, &cfg).unwrap();
    let preds = s.predict_all(va.records().iter().map(|r| &r.diffusivity)).unwrap();
    assert_eq!(mse(&preds, va.records().iter().map(|r| &r.solution)), a.best.val_mse);
}

#[test]
fn training_rejects_short_or_mismatched_sets() {
    let (tr, va) = tiny_sets();
    let cfg = TrainConfig { batch_size: 20, known_count: 10, ..tiny_config() };
    assert!(train(&tr, &va, &cfg).is_err());
    let other = generate_dataset(5, 5, 0.2, 8, 4, 1).unwrap();
    assert!(train(&tr, &other, &tiny_config()).is_err());
}

#[test]
fn history_csv_format() {
    let h = [EpochRecord { epoch: 1, train_loss: 2.5, val_mse: 0.125, max_jitter: 0.0 }];
    assert_eq!(
        history_csv(&h),
        "epoch,train_loss,val_mse\n1,2.5000000000000000e0,1.2500000000000000e-1\n"
    );
}

#[test]
fn surrogate_interpolates_training_records() {
    let (tr, _) = tiny_sets();
    let cfg = TrainConfig { sigma2: 1e-8, ..tiny_config() };
    let params = cfg.init_params(16).unwrap();
    let s = Surrogate::new(&params, &tr, &cfg).unwrap();
    assert_eq!(s.subset().len(), 8);
    assert!(s.subset().windows(2).all(|w| w[0] < w[1]));
    assert_eq!(s.subset(), Surrogate::subset_indices(12, &cfg).as_slice());
    for &i in s.subset() {
        let r = &tr.records()[i];
        let p = s.predict(&r.diffusivity).unwrap();
        let err = p.values().iter().zip(r.solution.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "record {i}: {err}");
        assert!(s.variance([&r.diffusivity]).unwrap()[0] < 1e-4);
    }
}

#[test]
fn surrogate_predictions_do_not_depend_on_batching() {
    let (tr, va) = tiny_sets();
    let cfg = tiny_config();
    let s = Surrogate::new(&cfg.init_params(16).unwrap(), &tr, &cfg).unwrap();
    let all = s.predict_all(va.records().iter().map(|r| &r.diffusivity)).unwrap();
    for (r, p) in va.records().iter().zip(&all) {
        assert_eq!(&s.predict(&r.diffusivity).unwrap(), p);
    }
}

#[test]
fn evaluation_reports_baseline_and_probes() {
    let (tr, va) = tiny_sets();
    let cfg = TrainConfig { probes: vec![(0.5, 0.5), (0.0, 1.0)], ..tiny_config() };
    let ev = evaluate(&cfg.init_params(16).unwrap(), &tr, &va, &cfg).unwrap();
    assert_eq!(ev.predictions.len(), 4);
    assert!(ev.baseline_mse > 0.0 && ev.test_mse > 0.0);
    assert_eq!(ev.probes[1].node, (3, 0));
    // left boundary is held at one
    assert!(ev.probes[1].reference.iter().all(|v| (v - 1.0).abs() < 1e-12));
    assert!(ev.report().contains("probe1_ref_mean="));
}

#[test]
fn probe_mapping_rounds_to_nearest_node() {
    let h = 1.0 / 15.0;
    assert_eq!(probe_node(0.5, 0.5, 16, 16, h), (8, 8));
    assert_eq!(probe_node(0.0, 0.0, 16, 16, h), (0, 0));
    assert_eq!(probe_node(1.0, 0.25, 16, 16, h), (4, 15));
}

#[test]
fn histogram_counts_every_sample() {
    let h = histogram(&[0.0, 0.5, 1.0], &[0.25, 0.25], 4);
    assert_eq!(h.edges.len(), 5);
    assert_eq!(h.predicted.iter().sum::<usize>(), 3);
    assert_eq!(h.reference, vec![0, 2, 0, 0]);
    assert_eq!(h.predicted, vec![1, 0, 1, 1]);
    let flat = histogram(&[2.0, 2.0], &[2.0], 3);
    assert_eq!(flat.predicted.iter().sum::<usize>(), 2);
}
