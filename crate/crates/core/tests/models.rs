use autograd::gradcheck::{max_relative_error, numeric_gradient};
use autograd::{Graph, Tensor};
use electrolyte::models::*;
use electrolyte::signal::{PatientMeta, N_LEADS};
use electrolyte::targets::{ordinal_decode, Discretizer, Electrolyte, TargetCodec, ZNormalizer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_inputs(n: usize, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * N_LEADS * len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tiny_dataset(n: usize, seed: u64, target: impl Fn(&[f64]) -> f64) -> Dataset {
    let len = BackboneConfig::tiny().input_len();
    let mut ds = Dataset::new(N_LEADS * len);
    let x = random_inputs(n, len, seed);
    for rec in x.chunks(N_LEADS * len) {
        ds.push(rec, target(rec), PatientMeta::default()).unwrap();
    }
    ds
}

#[test]
fn nll_at_the_truth() {
    let mut g = Graph::new();
    let mu = g.constant(Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5]).unwrap());
    let lv = g.constant(Tensor::zeros(&[3, 1]));
    let loss = gaussian_nll(&mut g, mu, lv, mu).unwrap();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((g.value(loss).item() - half_log_2pi).abs() < 1e-12);
    assert!((half_log_2pi - 0.9189).abs() < 1e-4);
    assert!((gaussian_nll_value(0.3, 0.0, 0.3) - half_log_2pi).abs() < 1e-12);
}

#[test]
fn nll_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 6;
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mu0 = Tensor::new(&[n, 1], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let lv0 = Tensor::new(&[n, 1], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let eval = |mu: &Tensor, lv: &Tensor| -> (f64, Vec<f64>, Vec<f64>) {
        let mut g = Graph::new();
        let m = g.variable(mu.clone());
        let l = g.variable(lv.clone());
        let yv = g.constant(Tensor::new(&[n, 1], y.clone()).unwrap());
        let loss = gaussian_nll(&mut g, m, l, yv).unwrap();
        let grads = g.backward(loss).unwrap();
        (g.value(loss).item(), grads.wrt(m).unwrap().to_vec(), grads.wrt(l).unwrap().to_vec())
    };
    let (_, gm, gl) = eval(&mu0, &lv0);
    let nm = numeric_gradient(|m| eval(m, &lv0).0, &mu0, 1e-5);
    let nl = numeric_gradient(|l| eval(&mu0, l).0, &lv0, 1e-5);
    assert!(max_relative_error(&gm, nm.data(), 1e-8) < 1e-4);
    assert!(max_relative_error(&gl, nl.data(), 1e-8) < 1e-4);
    // Closed form of the same loss.
    let direct: f64 = (0..n).map(|i| gaussian_nll_value(mu0.data()[i], lv0.data()[i], y[i])).sum::<f64>() / n as f64;
    assert!((eval(&mu0, &lv0).0 - direct).abs() < 1e-12);
}

#[test]
fn unit_variance_nll_is_minimised_at_the_mse_solution() {
    let y = [0.3, 1.7, -0.4, 2.2, 0.9];
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let nll = |m: f64| y.iter().map(|&v| gaussian_nll_value(m, 0.0, v)).sum::<f64>();
    let mse = |m: f64| y.iter().map(|&v| (v - m).powi(2)).sum::<f64>();
    for d in [1e-3, 1e-2, 0.1] {
        assert!(nll(mean) < nll(mean + d) && nll(mean) < nll(mean - d));
        assert!(mse(mean) < mse(mean + d) && mse(mean) < mse(mean - d));
        // Same shape: the NLL is half the squared error plus a constant.
        assert!(((nll(mean + d) - nll(mean)) - 0.5 * (mse(mean + d) - mse(mean))).abs() < 1e-12);
    }
}

fn network_loss(net: &Network, x: &[f64], n: usize, targets: &[f64]) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let input = g.constant(Tensor::new(&[n, N_LEADS, net.config().input_len()], x.to_vec()).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = net.forward(&mut g, input, Mode::Train, &mut rng).unwrap();
    let loss = net.loss(&mut g, &fwd, targets).unwrap();
    let grads = g.backward(loss).unwrap();
    let per_param = grads.params().into_iter().map(|(_, gr)| gr.to_vec()).collect();
    (g.value(loss).item(), per_param)
}

#[test]
fn tiny_network_gradients_match_finite_differences() {
    let cfg = BackboneConfig::tiny();
    let n = 4;
    let x = random_inputs(n, cfg.input_len(), 2);
    for (head, k, targets) in [
        (HeadKind::Direct, None, vec![0.5, -1.0, 0.2, 1.3]),
        (HeadKind::Gaussian, None, vec![0.5, -1.0, 0.2, 1.3]),
        (HeadKind::Classification, Some(3), vec![1.0, 3.0, 2.0, 3.0]),
        (HeadKind::Ordinal, Some(4), vec![1.0, 4.0, 2.0, 3.0]),
    ] {
        let mut net = Network::new(cfg.clone(), head, k, 3).unwrap();
        // Move the ordinal bias steps away from their symmetric start.
        if let Some(id) = net.params().find("head.bias_steps") {
            net.params_mut().get_mut(id).value = Tensor::from_vec(vec![-0.3, 0.4]);
        }
        let (_, analytic) = network_loss(&net, &x, n, &targets);
        let ids: Vec<_> = net.params().ids().collect();
        assert_eq!(analytic.len(), ids.len());
        for (id, grad) in ids.into_iter().zip(analytic) {
            let value = net.params().get(id).value.clone();
            let mut probe = net.clone();
            let numeric = numeric_gradient(
                |t| {
                    probe.params_mut().get_mut(id).value = t.clone();
                    network_loss(&probe, &x, n, &targets).0
                },
                &value,
                1e-5,
            );
            let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let err = max_relative_error(&grad, numeric.data(), 1e-6 * scale.max(1e-3));
            assert!(err < 1e-3, "{head:?} {}: {err}", net.params().get(id).name);
        }
    }
}

#[test]
fn ordinal_logits_are_ordered() {
    let cfg = BackboneConfig::tiny();
    let mut net = Network::new(cfg.clone(), HeadKind::Ordinal, Some(6), 4).unwrap();
    let id = net.params().find("head.bias_steps").unwrap();
    net.params_mut().get_mut(id).value = Tensor::from_vec(vec![-3.0, 2.0, 0.0, -1.0]);
    let ds = tiny_dataset(1000, 5, |_| 0.0);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &[3.0, 5.0])
        .unwrap()
        .with_discretizer(Discretizer::new(vec![1.0, 2.0, 3.0, 4.0, 5.0], 1.0).unwrap());
    let model = TrainedNetwork {
        network: net,
        codec,
        log: TrainLog::default(),
        seed: 0,
        laplace: None,
    };
    for p in model.predict(&ds).unwrap() {
        let Prediction::Ranks(r) = &p else { panic!("expected ranks") };
        assert_eq!(r.len(), 5);
        assert!(r.windows(2).all(|w| w[0] >= w[1]), "{r:?}");
        assert_eq!(p.class(), Some(ordinal_decode(r).unwrap()));
    }
}

#[test]
fn ordinal_biases_reproduce_the_prior() {
    let cfg = BackboneConfig::tiny();
    let mut net = Network::new(cfg, HeadKind::Ordinal, Some(5), 8).unwrap();
    let rates = [0.97, 0.6, 0.6, 0.02];
    net.init_ordinal_biases(&rates).unwrap();
    let w = net.params().find("head.weight").unwrap();
    let shape = net.params().get(w).value.shape().to_vec();
    net.params_mut().get_mut(w).value = Tensor::zeros(&shape);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &[3.0, 5.0])
        .unwrap()
        .with_discretizer(Discretizer::new(vec![3.0, 3.5, 4.0, 4.5], 0.5).unwrap());
    let model = TrainedNetwork {
        network: net.clone(),
        codec,
        log: TrainLog::default(),
        seed: 0,
        laplace: None,
    };
    for p in model.predict(&tiny_dataset(5, 9, |_| 0.0)).unwrap() {
        let Prediction::Ranks(r) = p else { panic!("expected ranks") };
        // Equal neighbours are spread by the minimum step.
        for (got, want) in r.iter().zip(rates) {
            assert!((got - want).abs() < 1e-3, "{r:?}");
        }
        assert!(r[1] > r[2]);
    }
    assert!(net.init_ordinal_biases(&[0.5, 0.4]).is_err());
    assert!(net.init_ordinal_biases(&[1.0, 0.5, 0.4, 0.1]).is_err());
    let mut direct = Network::new(BackboneConfig::tiny(), HeadKind::Direct, None, 0).unwrap();
    assert!(direct.init_ordinal_biases(&[0.5]).is_err());
}

#[test]
fn eval_outputs_are_deterministic_and_normalised() {
    let cfg = BackboneConfig::tiny();
    let net = Network::new(cfg, HeadKind::Classification, Some(4), 6).unwrap();
    let ds = tiny_dataset(50, 7, |_| 0.0);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &[3.0, 5.0])
        .unwrap()
        .with_discretizer(Discretizer::new(vec![3.0, 4.0, 5.0], 0.5).unwrap());
    let model = TrainedNetwork {
        network: net,
        codec,
        log: TrainLog::default(),
        seed: 0,
        laplace: None,
    };
    let a = model.predict(&ds).unwrap();
    let b = model.predict(&ds).unwrap();
    assert_eq!(a, b);
    for p in &a {
        let Prediction::Classes(c) = p else { panic!("expected classes") };
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_eq!(p.cumulative().unwrap().len(), 3);
    }
    let mut wrong = Dataset::new(7);
    wrong.push(&[0.0; 7], 0.0, PatientMeta::default()).unwrap();
    assert!(model.predict(&wrong).is_err());
}

fn quick(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_classes_are_learnt() {
    // Lead 0 carries a +-1 offset on top of unit noise: separable by its mean.
    let make = |seed| {
        let len = BackboneConfig::tiny().input_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::new(N_LEADS * len);
        for i in 0..256 {
            let class = (i % 2) as f64;
            let mut rec: Vec<f64> = (0..N_LEADS * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for v in &mut rec[..len] {
                *v += 2.0 * class - 1.0;
            }
            ds.push(&rec, class, PatientMeta::default()).unwrap();
        }
        ds
    };
    let (train_set, val_set) = (make(8), make(9));
    let d = Discretizer::new(vec![0.5], 0.5).unwrap();
    let codec = TargetCodec::regression(Electrolyte::Potassium, &train_set.targets).unwrap().with_discretizer(d);
    let model = train(&BackboneConfig::tiny(), HeadKind::Classification, codec, &train_set, &val_set, &quick(30, 1e-2, 1)).unwrap();
    let preds = model.predict(&train_set).unwrap();
    let correct = preds
        .iter()
        .zip(&train_set.targets)
        .filter(|(p, &y)| p.class().unwrap() == if y < 0.5 { 1 } else { 2 })
        .count();
    let acc = correct as f64 / train_set.len() as f64;
    assert!(acc >= 0.99, "{acc}");
}

#[test]
fn constant_target_is_reproduced() {
    let train_set = tiny_dataset(512, 10, |_| 4.2);
    let val_set = tiny_dataset(64, 11, |_| 4.2);
    // A constant has no spread; normalise with unit sd.
    let codec = TargetCodec {
        electrolyte: Electrolyte::Potassium,
        normalizer: ZNormalizer::new(4.2, 1.0).unwrap(),
        discretizer: None,
    };
    let model = train(&BackboneConfig::tiny(), HeadKind::Direct, codec, &train_set, &val_set, &quick(200, 1e-2, 2)).unwrap();
    for p in model.predict_points(&val_set).unwrap() {
        assert!((p - 4.2).abs() < 1e-2, "{p}");
    }
}

#[test]
fn plateau_schedule() {
    let mut s = PlateauScheduler::new(1e-3, 0.1, 7, 1e-7);
    assert!(!s.step(1.0));
    for epoch in 1..=8 {
        let changed = s.step(1.0);
        assert_eq!(changed, epoch == 8, "epoch {epoch}");
    }
    assert!((s.lr - 1e-4).abs() < 1e-18);
    // Improvements reset the count.
    let mut s = PlateauScheduler::new(1e-3, 0.1, 7, 1e-7);
    for i in 0..20 {
        assert!(!s.step(1.0 - 0.01 * i as f64));
    }
    // The floor holds.
    let mut s = PlateauScheduler::new(1e-6, 0.1, 0, 1e-7);
    s.step(1.0);
    s.step(1.0);
    s.step(1.0);
    assert!((s.lr - 1e-7).abs() < 1e-20);
    assert!(!s.step(1.0));
}

#[test]
fn training_is_deterministic() {
    let train_set = tiny_dataset(96, 12, |rec| rec[0] + rec[20]);
    let val_set = tiny_dataset(32, 13, |rec| rec[0] + rec[20]);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &train_set.targets).unwrap();
    let run = || {
        train(&BackboneConfig::tiny(), HeadKind::Gaussian, codec.clone(), &train_set, &val_set, &quick(4, 1e-3, 7)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.network.params().values(), b.network.params().values());
    assert_eq!(a.log.epochs.len(), 4);
    let best = a.log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best, a.log.best_val_loss);
}

#[test]
fn divergence_is_reported() {
    let train_set = tiny_dataset(32, 14, |_| 1.0);
    let val_set = tiny_dataset(8, 15, |_| 1.0);
    let codec = TargetCodec {
        electrolyte: Electrolyte::Potassium,
        normalizer: ZNormalizer::new(0.0, 1e-300).unwrap(),
        discretizer: None,
    };
    let err = train(&BackboneConfig::tiny(), HeadKind::Direct, codec, &train_set, &val_set, &quick(2, 1e-3, 0)).unwrap_err();
    assert!(matches!(err, electrolyte::Error::Diverged { epoch: 1, .. }), "{err}");
}

#[test]
fn head_and_codec_must_agree() {
    let train_set = tiny_dataset(16, 16, |_| 4.0);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &[3.0, 5.0]).unwrap();
    assert!(train(&BackboneConfig::tiny(), HeadKind::Ordinal, codec.clone(), &train_set, &train_set, &quick(1, 1e-3, 0)).is_err());
    let d = Discretizer::new(vec![4.0], 0.5).unwrap();
    let with_classes = codec.with_discretizer(d);
    assert!(train(&BackboneConfig::tiny(), HeadKind::Direct, with_classes, &train_set, &train_set, &quick(1, 1e-3, 0)).is_err());
    assert!(Network::new(BackboneConfig::tiny(), HeadKind::Classification, None, 0).is_err());
    assert!(Network::new(BackboneConfig::tiny(), HeadKind::Gaussian, Some(3), 0).is_err());
}

#[test]
fn backbone_configs() {
    for cfg in [BackboneConfig::default(), BackboneConfig::compact(), BackboneConfig::tiny()] {
        cfg.validate().unwrap();
        assert!(cfg.output_len() >= 1);
    }
    assert_eq!(BackboneConfig::default().output_len(), 16);
    assert_eq!(BackboneConfig::default().feature_dim(), 64);
    let bad = BackboneConfig {
        kernel: 4,
        ..BackboneConfig::compact()
    };
    assert!(bad.validate().is_err());
    let bad = BackboneConfig {
        input_pool: 3,
        ..BackboneConfig::compact()
    };
    assert!(bad.validate().is_err());
    assert_eq!(pool_input(&[1.0, 3.0, 5.0, 7.0], 2), vec![2.0, 6.0]);
}

#[test]
fn ridge_examples() {
    let r = ridge_fit(&[vec![1.0], vec![2.0]], &[2.0, 4.0], 0.0).unwrap();
    assert!((r.weights[0] - 2.0).abs() < 1e-12);
    assert!(r.intercept.abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = [0.5, -1.5, 2.0];
    let x: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = x.iter().map(|r| 0.7 + r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).collect();
    let fit = ridge_fit(&x, &y, 0.0).unwrap();
    for (a, b) in fit.weights.iter().zip(&w) {
        assert!((a - b).abs() < 1e-8);
    }
    assert!((fit.intercept - 0.7).abs() < 1e-8);
    assert!((ridge_predict(&fit, &x[3]).unwrap() - y[3]).abs() < 1e-8);

    let big = ridge_fit(&x, &y, 1e12).unwrap();
    assert!(big.weights.iter().all(|v| v.abs() < 1e-9));

    let dup: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0], r[0]]).collect();
    assert!(ridge_fit(&dup, &y, 0.0).is_err());
    assert!(ridge_fit(&dup, &y, 1.0).is_ok());
    assert!(ridge_predict(&fit, &[1.0]).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let train_set = tiny_dataset(64, 18, |rec| 4.0 + 0.3 * rec[3]);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &train_set.targets).unwrap();
    let mut model = train(&BackboneConfig::tiny(), HeadKind::Gaussian, codec, &train_set, &train_set, &quick(2, 1e-3, 3)).unwrap();
    model.laplace = Some(electrolyte::uncertainty::laplace_fit(&model, &train_set).unwrap());
    let path = dir.path().join("seed3.ckpt");
    Checkpoint::Network(Box::new(model.clone())).save(&path, "abc123").unwrap();
    let (back, stamp) = Checkpoint::load(&path).unwrap();
    assert_eq!(stamp.config_hash, "abc123");
    let Checkpoint::Network(back) = back else { panic!("expected a network") };
    assert_eq!(back.predict(&train_set).unwrap(), model.predict(&train_set).unwrap());
    assert_eq!(back.laplace, model.laplace);
    assert_eq!(back.log, model.log);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

#[test]
fn ridge_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let y: Vec<f64> = rows.iter().map(|r| 4.0 + 0.2 * r[0]).collect();
    let pca = electrolyte::features::PcaModel::fit(&rows, 4).unwrap();
    let z: Vec<Vec<f64>> = rows.iter().map(|r| pca.transform(r).unwrap()).collect();
    let codec = TargetCodec::regression(Electrolyte::Potassium, &y).unwrap();
    let yz: Vec<f64> = y.iter().map(|&v| codec.normalizer.apply(v)).collect();
    let model = RidgeModel {
        input_pool: 1,
        pca,
        ridge: ridge_fit(&z, &yz, 1.0).unwrap(),
        codec,
    };
    let path = dir.path().join("ridge.ckpt");
    Checkpoint::Ridge(Box::new(model.clone())).save(&path, "h").unwrap();
    let (back, _) = Checkpoint::load(&path).unwrap();
    let Checkpoint::Ridge(back) = back else { panic!("expected ridge") };
    assert_eq!(*back, model);
    assert!((back.predict(&rows[0]).unwrap() - model.predict(&rows[0]).unwrap()).abs() == 0.0);
}
