use electrolyte::models::{train, BackboneConfig, Dataset, HeadKind, TrainConfig, TrainedNetwork};
use electrolyte::signal::{PatientMeta, N_LEADS};
use electrolyte::targets::{Discretizer, Electrolyte, TargetCodec};
use electrolyte::uncertainty::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Mat = Vec<Vec<f64>>;

fn gauss_jordan_inverse(a: &Mat) -> (Mat, f64) {
    let n = a.len();
    let mut m: Mat = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    let mut log_det = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        let pivot = m[c][c];
        log_det += pivot.abs().ln();
        for v in &mut m[c] {
            *v /= pivot;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                for k in 0..2 * n {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (m.into_iter().map(|r| r[n..].to_vec()).collect(), log_det)
}

struct Toy {
    phi: Vec<Vec<f64>>,
    sigma2: Vec<f64>,
    y: Vec<f64>,
}

fn toy(n: usize, d: usize, seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut phi = Vec::new();
    let mut sigma2 = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let mut p: Vec<f64> = (0..d - 1).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.push(1.0);
        let s2 = rng.gen_range(0.05..0.5);
        let mu: f64 = p.iter().zip(&w).map(|(a, b)| a * b).sum();
        y.push(mu + Normal::new(0.0, f64::sqrt(s2)).unwrap().sample(&mut rng));
        phi.push(p);
        sigma2.push(s2);
    }
    Toy { phi, sigma2, y }
}

/// Conjugate posterior of Bayesian linear regression with prior N(0, I/tau).
fn conjugate(t: &Toy, tau: f64) -> (Vec<f64>, Mat) {
    let d = t.phi[0].len();
    let mut prec = vec![vec![0.0; d]; d];
    let mut rhs = vec![0.0; d];
    for ((p, s2), y) in t.phi.iter().zip(&t.sigma2).zip(&t.y) {
        for i in 0..d {
            rhs[i] += p[i] * y / s2;
            for j in 0..d {
                prec[i][j] += p[i] * p[j] / s2;
            }
        }
    }
    for (i, row) in prec.iter_mut().enumerate() {
        row[i] += tau;
    }
    let (cov, _) = gauss_jordan_inverse(&prec);
    let mean = (0..d).map(|i| (0..d).map(|j| cov[i][j] * rhs[j]).sum()).collect();
    (mean, cov)
}

fn nll(t: &Toy, theta: &[f64]) -> f64 {
    t.phi
        .iter()
        .zip(&t.sigma2)
        .zip(&t.y)
        .map(|((p, s2), y)| {
            let mu: f64 = p.iter().zip(theta).map(|(a, b)| a * b).sum();
            0.5 * (2.0 * std::f64::consts::PI * s2).ln() + (y - mu).powi(2) / (2.0 * s2)
        })
        .sum()
}

#[test]
fn ensemble_combination() {
    let (mean, alea, epi) = combine_members(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 1.0, 1.0, 1.0, 4.0]).unwrap();
    assert!((mean - 3.0).abs() < 1e-12);
    assert!((epi - 2.0).abs() < 1e-12);
    assert!((alea - 1.6).abs() < 1e-12);
    let (_, _, epi) = combine_members(&[0.7; 5], &[0.1; 5]).unwrap();
    assert_eq!(epi, 0.0);
    assert!(combine_members(&[], &[]).is_err());
    assert!(combine_members(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn covariance_matches_the_conjugate_posterior() {
    let t = toy(40, 5, 1);
    let (mean, cov) = conjugate(&t, 0.7);
    let post = laplace_posterior(&t.phi, &t.sigma2, &t.y, &mean, 0.7).unwrap();
    let d = mean.len();
    for i in 0..d {
        for j in 0..d {
            assert!((post.covariance[i * d + j] - cov[i][j]).abs() < 1e-8, "{i},{j}");
            assert!((post.covariance[i * d + j] - post.covariance[j * d + i]).abs() < 1e-12);
        }
    }
}

#[test]
fn hessian_matches_finite_differences() {
    let t = toy(10, 4, 2);
    let h = last_layer_hessian(&t.phi, &t.sigma2).unwrap();
    let theta = vec![0.3, -0.2, 0.5, 0.1];
    let eps = 1e-3;
    for i in 0..4 {
        for j in 0..4 {
            let f = |di: f64, dj: f64| {
                let mut th = theta.clone();
                th[i] += di;
                th[j] += dj;
                nll(&t, &th)
            };
            let fd = (f(eps, eps) - f(eps, -eps) - f(-eps, eps) + f(-eps, -eps)) / (4.0 * eps * eps);
            let rel = (h[(i, j)] - fd).abs() / h[(i, j)].abs().max(1e-6);
            assert!(rel < 1e-3, "{i},{j}: {} vs {fd}", h[(i, j)]);
        }
    }
}

#[test]
fn strong_prior_dominates() {
    let t = toy(20, 3, 3);
    let tau = 1e10;
    let post = laplace_posterior(&t.phi, &t.sigma2, &t.y, &[0.0; 3], tau).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expect = if i == j { 1.0 / tau } else { 0.0 };
            assert!((post.covariance[i * 3 + j] - expect).abs() < 1e-15);
        }
    }
    assert!(laplace_variance(&post, &t.phi[0]).unwrap() < 1e-9);
}

#[test]
fn variance_is_a_quadratic_form() {
    let t = toy(30, 4, 4);
    let (mean, _) = conjugate(&t, 1.0);
    let post = laplace_posterior(&t.phi, &t.sigma2, &t.y, &mean, 1.0).unwrap();
    assert_eq!(laplace_variance(&post, &[0.0; 4]).unwrap(), 0.0);
    let v = laplace_variance(&post, &t.phi[3]).unwrap();
    assert!(v > 0.0);
    for a in [-2.0, 0.5, 3.0] {
        let scaled: Vec<f64> = t.phi[3].iter().map(|x| a * x).collect();
        assert!((laplace_variance(&post, &scaled).unwrap() - a * a * v).abs() < 1e-12 * a * a * v.max(1.0));
    }
    for p in &t.phi {
        let far: Vec<f64> = p.iter().map(|x| 10.0 * x).collect();
        assert!(laplace_variance(&post, &far).unwrap() > laplace_variance(&post, p).unwrap());
    }
    assert!(laplace_variance(&post, &[1.0]).is_err());
}

#[test]
fn marginal_likelihood_is_the_exact_evidence() {
    // For a linear-Gaussian model the Laplace evidence is exact:
    // y ~ N(0, Phi Phi' / tau + diag(sigma2)).
    let t = toy(15, 3, 5);
    for tau in [0.1, 1.0, 30.0] {
        let (mean, _) = conjugate(&t, tau);
        let post = laplace_posterior(&t.phi, &t.sigma2, &t.y, &mean, tau).unwrap();
        let n = t.y.len();
        let cov: Mat = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let k: f64 = t.phi[i].iter().zip(&t.phi[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
                        k + if i == j { t.sigma2[i] } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        let (inv, log_det) = gauss_jordan_inverse(&cov);
        let quad: f64 = (0..n).map(|i| t.y[i] * (0..n).map(|j| inv[i][j] * t.y[j]).sum::<f64>()).sum();
        let exact = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
        assert!((post.log_marginal - exact).abs() < 1e-8, "{tau}: {} vs {exact}", post.log_marginal);
    }
}

#[test]
fn grid_search_picks_the_best_precision() {
    let grid = prior_precision_grid();
    assert!((grid[0] - 1e-2).abs() < 1e-15 && (grid[9] - 1e3).abs() < 1e-9);
    for w in grid.windows(2) {
        assert!((w[1] / w[0] - 10f64.powf(5.0 / 9.0)).abs() < 1e-9);
    }
    let t = toy(25, 4, 6);
    let (mean, _) = conjugate(&t, 1.0);
    let best = laplace_fit_features(&t.phi, &t.sigma2, &t.y, &mean).unwrap();
    for tau in grid {
        let p = laplace_posterior(&t.phi, &t.sigma2, &t.y, &mean, tau).unwrap();
        assert!(p.log_marginal <= best.log_marginal);
    }
    assert!(grid.contains(&best.prior_precision));
}

#[test]
fn invalid_posterior_inputs() {
    let t = toy(5, 3, 7);
    assert!(laplace_posterior(&t.phi, &t.sigma2, &t.y, &[0.0; 3], 0.0).is_err());
    assert!(laplace_posterior(&t.phi, &t.sigma2, &t.y, &[0.0; 2], 1.0).is_err());
    assert!(last_layer_hessian(&t.phi, &[1.0, 1.0, 1.0, 1.0, -1.0]).is_err());
    assert!(last_layer_hessian::<Vec<f64>>(&[], &[]).is_err());
}

fn dataset(n: usize, seed: u64) -> Dataset {
    let len = BackboneConfig::tiny().input_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(N_LEADS * len);
    for _ in 0..n {
        let rec: Vec<f64> = (0..N_LEADS * len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = 4.0 + 0.4 * rec[0] + 0.1 * rng.gen_range(-1.0..1.0);
        ds.push(&rec, y, PatientMeta::default()).unwrap();
    }
    ds
}

fn member(train_set: &Dataset, head: HeadKind, codec: TargetCodec, seed: u64) -> TrainedNetwork {
    let cfg = TrainConfig {
        epochs: 3,
        seed,
        ..TrainConfig::default()
    };
    train(&BackboneConfig::tiny(), head, codec, train_set, train_set, &cfg).unwrap()
}

#[test]
fn ensemble_predictions() {
    let train_set = dataset(96, 8);
    let test_set = dataset(20, 9);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &train_set.targets).unwrap();
    let a = member(&train_set, HeadKind::Gaussian, codec.clone(), 1);
    let b = member(&train_set, HeadKind::Gaussian, codec.clone(), 2);

    let same = Ensemble::new(vec![a.clone(), a.clone(), a.clone()]).unwrap();
    for p in same.predict(&test_set).unwrap() {
        assert!(p.epistemic_ensemble.abs() < 1e-20);
        assert!(p.aleatoric > 0.0);
        assert_eq!(p.epistemic_laplace, None);
    }

    let mut ens = Ensemble::new(vec![a.clone(), b.clone()]).unwrap();
    ens.fit_laplace(&train_set).unwrap();
    let preds = ens.predict(&test_set).unwrap();
    let pa = a.predict(&test_set).unwrap();
    for (p, single) in preds.iter().zip(&pa) {
        assert!(p.epistemic_ensemble > 0.0);
        assert!(p.epistemic_laplace.unwrap() >= 0.0);
        let electrolyte::models::Prediction::Gaussian { mean, .. } = single else { panic!() };
        assert!(p.mean.is_finite() && mean.is_finite());
    }

    assert!(Ensemble::new(vec![]).is_err());
    let direct = member(&train_set, HeadKind::Direct, codec.clone(), 3);
    assert!(Ensemble::new(vec![a.clone(), direct.clone()]).is_err());
    assert!(laplace_fit(&direct, &train_set).is_err());
    let other_codec = TargetCodec::regression(Electrolyte::Potassium, &[1.0, 2.0]).unwrap();
    let c = member(&train_set, HeadKind::Gaussian, other_codec, 4);
    assert!(Ensemble::new(vec![a, c]).is_err());
    let d = Discretizer::new(vec![4.0], 0.5).unwrap();
    let cls = member(&train_set, HeadKind::Classification, codec.with_discretizer(d), 5);
    assert!(Ensemble::new(vec![cls]).is_err());
}

#[test]
fn fitted_posterior_is_positive_definite() {
    let train_set = dataset(64, 10);
    let codec = TargetCodec::regression(Electrolyte::Potassium, &train_set.targets).unwrap();
    let model = member(&train_set, HeadKind::Gaussian, codec, 6);
    let post = laplace_fit(&model, &train_set).unwrap();
    let d = post.dim();
    assert_eq!(d, BackboneConfig::tiny().feature_dim() + 1);
    // Cholesky by hand.
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            assert!((post.covariance[i * d + j] - post.covariance[j * d + i]).abs() < 1e-10);
        }
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = post.covariance[i * d + i] - s;
                assert!(v > 0.0);
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (post.covariance[i * d + j] - s) / l[j][j];
            }
        }
    }
    assert!(prior_precision_grid().contains(&post.prior_precision));
}
