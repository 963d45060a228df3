use std::collections::HashSet;

use electrolyte::eval::{pearson, stratified_mae};
use electrolyte::signal::{preprocess, PatientMeta, RawEcg, Sex};
use electrolyte::synthdata::*;
use electrolyte::targets::Electrolyte;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(n: usize) -> GeneratorConfig {
    GeneratorConfig {
        n_patients: n,
        ..GeneratorConfig::potassium()
    }
}

#[test]
fn potassium_sample_mean() {
    let cfg = GeneratorConfig::potassium();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = (0..10_000).map(|_| sample_concentration(&cfg, &mut rng)).sum::<f64>() / 10_000.0;
    assert!((m - 3.99).abs() <= 0.02, "{m}");
}

#[test]
fn vanishing_sd_returns_mean() {
    let cfg = GeneratorConfig {
        sd: 1e-300,
        ..GeneratorConfig::potassium()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!((0..100).all(|_| sample_concentration(&cfg, &mut rng) == 3.99));
}

#[test]
fn calcium_two_sd_mass() {
    let cfg = GeneratorConfig::new(Electrolyte::Calcium);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inside = (0..10_000)
        .filter(|_| (sample_concentration(&cfg, &mut rng) - 2.29).abs() <= 0.26)
        .count() as f64
        / 10_000.0;
    assert!((inside - 0.954).abs() <= 0.01, "{inside}");
}

#[test]
fn creatinine_is_skewed_with_table_moments() {
    let cfg = GeneratorConfig::new(Electrolyte::Creatinine);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v: Vec<f64> = (0..200_000).map(|_| sample_concentration(&cfg, &mut rng)).collect();
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let mut sorted = v.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[v.len() / 2];
    assert!((m / 90.55 - 1.0).abs() < 0.02, "{m}");
    assert!(median < m, "right skew expected");
    assert!(v.iter().all(|&c| c > 0.0));
}

fn quiet(cfg: GeneratorConfig) -> GeneratorConfig {
    GeneratorConfig {
        wander_amplitude: 0.0,
        powerline_amplitude: 0.0,
        ecg_noise_sd: 0.0,
        fs: 2000.0,
        ..cfg
    }
}

#[test]
fn t_wave_peak_inverts_to_concentration() {
    let cfg = quiet(GeneratorConfig::potassium());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &y in &[3.4, 3.99, 4.6, 5.2] {
        let morph = Morphology::sample(&mut rng);
        let ecg = synthesize_ecg(y, PatientMeta::default(), &morph, &cfg, &mut rng).unwrap();
        let lead2 = &ecg.leads()[1];
        let fs = cfg.fs;
        let top = lead2.iter().cloned().fold(f64::MIN, f64::max);
        let peaks: Vec<usize> = (1..lead2.len() - 1)
            .filter(|&i| lead2[i] > 0.8 * top && lead2[i] >= lead2[i - 1] && lead2[i] > lead2[i + 1])
            .collect();
        let rr = (peaks[1] - peaks[0]) as f64 / fs;
        let r = peaks[1];
        let lo = r + (0.1 * fs) as usize;
        let hi = r + (0.6 * rr * fs) as usize;
        let t_peak = lead2[lo..hi].iter().cloned().fold(f64::MIN, f64::max);
        let recovered = cfg.mean + (t_peak - T_BASE_MV) / cfg.t_gain;
        assert!((recovered - y).abs() < 5e-3, "y {y} recovered {recovered}");
    }
}

#[test]
fn synthesis_is_deterministic() {
    let cfg = GeneratorConfig::potassium();
    let morph = Morphology::sample(&mut ChaCha8Rng::seed_from_u64(6));
    let a = synthesize_ecg(4.2, PatientMeta::default(), &morph, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let b = synthesize_ecg(4.2, PatientMeta::default(), &morph, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 5000);
    assert_eq!(a.fs(), 500.0);
}

#[test]
fn uncoupled_ecg_does_not_depend_on_concentration() {
    let cfg = GeneratorConfig::potassium().without_coupling();
    let morph = Morphology::sample(&mut ChaCha8Rng::seed_from_u64(8));
    let a = synthesize_ecg(3.0, PatientMeta::default(), &morph, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = synthesize_ecg(5.5, PatientMeta::default(), &morph, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);

    let mut ys = Vec::new();
    let mut samples = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..1000 {
        let y = sample_concentration(&cfg, &mut rng);
        let morph = Morphology::sample(&mut rng);
        let ecg = synthesize_ecg(y, PatientMeta::default(), &morph, &cfg, &mut rng).unwrap();
        ys.push(y);
        samples.push(ecg.leads()[1][2500]);
    }
    let r = pearson(&ys, &samples).unwrap();
    assert!(r.abs() < 0.05, "{r}");
}

#[test]
fn implausible_parameters_are_rejected() {
    let morph = Morphology::sample(&mut ChaCha8Rng::seed_from_u64(11));
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut bad = morph.clone();
    bad.waves[2].width = -0.01;
    assert!(synthesize_ecg(4.0, PatientMeta::default(), &bad, &GeneratorConfig::potassium(), &mut rng).is_err());
    bad = morph.clone();
    bad.t_width = 0.0;
    assert!(synthesize_ecg(4.0, PatientMeta::default(), &bad, &GeneratorConfig::potassium(), &mut rng).is_err());
    assert!(synthesize_ecg(-1.0, PatientMeta::default(), &morph, &GeneratorConfig::potassium(), &mut rng).is_err());
}

#[test]
fn strong_qt_shortening_saturates_after_the_qrs() {
    let cfg = GeneratorConfig {
        qt_gain: -1.0,
        ..GeneratorConfig::potassium()
    };
    let morph = Morphology::sample(&mut ChaCha8Rng::seed_from_u64(11));
    let t = morph.t_wave(5.0, &cfg);
    assert!((t.offset - (morph.waves[3].offset + 3.0 * morph.t_width)).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    assert!(synthesize_ecg(5.0, PatientMeta::default(), &morph, &cfg, &mut rng).is_ok());
    // Within the normal range the coupling is untouched.
    let normal = morph.t_wave(3.99, &GeneratorConfig::potassium());
    assert!((normal.offset - (0.4 * morph.rr().sqrt() - 0.1)).abs() < 1e-15);
}

#[test]
fn median_labeling() {
    let morph = Morphology::sample(&mut ChaCha8Rng::seed_from_u64(13));
    let draw = |observed: f64| Draw {
        lab_timestamp: 0,
        ecg_timestamp: 0,
        concentration: observed,
        observed,
    };
    let p = Patient {
        id: 0,
        age: 50.0,
        sex: Sex::Female,
        morphology: morph,
        draws: vec![draw(5.0), draw(3.5), draw(4.1)],
    };
    assert_eq!(p.median_label(), 4.1);
}

#[test]
fn splits_are_disjoint_and_sized() {
    let corpus = generate_dataset(&small(1000)).unwrap();
    let s = &corpus.splits;
    let ids = |v: &[ExampleRef]| v.iter().map(|e| e.patient_id).collect::<HashSet<_>>();
    let sets = [ids(&s.train), ids(&s.validation), ids(&s.random_test), ids(&s.temporal_test)];
    for i in 0..4 {
        for j in i + 1..4 {
            assert_eq!(sets[i].intersection(&sets[j]).count(), 0);
        }
    }
    let dev = sets[0].len() + sets[1].len();
    assert!((dev as i64 - 700).abs() <= 1);
    assert!((sets[2].len() as i64 - 200).abs() <= 1);
    assert!((sets[3].len() as i64 - 100).abs() <= 1);
    assert!((sets[1].len() as f64 - 0.15 * dev as f64).abs() <= 1.0);

    let dev_max = s.train.iter().chain(&s.validation).map(|e| e.timestamp).max().unwrap();
    let temporal_min = s.temporal_test.iter().map(|e| e.timestamp).min().unwrap();
    assert!(dev_max < temporal_min);
    let test_max = s.random_test.iter().map(|e| e.timestamp).max().unwrap();
    assert!(test_max < temporal_min);
}

#[test]
fn labelling_rules() {
    let corpus = generate_dataset(&small(600)).unwrap();
    let s = &corpus.splits;
    for split in [Split::Validation, Split::RandomTest, Split::TemporalTest] {
        let v = corpus.split(split);
        let ids: HashSet<_> = v.iter().map(|e| e.patient_id).collect();
        assert_eq!(ids.len(), v.len(), "one ECG per patient in {split:?}");
        for e in v {
            let p = corpus.patient(e.patient_id).unwrap();
            assert_eq!(e.draw, 0);
            assert_eq!(e.label, p.draws[0].observed);
            assert!(p.draws.iter().all(|d| d.ecg_timestamp >= e.timestamp));
        }
    }
    let mut multi = 0;
    for e in &s.train {
        let p = corpus.patient(e.patient_id).unwrap();
        assert_eq!(e.label, p.median_label());
        if p.draws.len() > 1 {
            multi += 1;
        }
    }
    assert!(multi > 0, "some training patients should have several draws");
    for split in Split::ALL {
        for e in corpus.split(split) {
            assert!((e.timestamp - e.lab_timestamp).abs() <= WINDOW_MINUTES);
            assert!(e.label.is_finite());
        }
    }
}

#[test]
fn corpus_is_reproducible() {
    let a = serde_json::to_vec(&generate_dataset(&small(300)).unwrap()).unwrap();
    let b = serde_json::to_vec(&generate_dataset(&small(300)).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = serde_json::to_vec(&generate_dataset(&GeneratorConfig { seed: 1, ..small(300) }).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn too_few_patients() {
    assert!(generate_dataset(&small(3)).is_err());
    assert!(generate_dataset(&small(0)).is_err());
}

#[test]
fn emitted_bayes_mae_matches_label_noise() {
    let corpus = generate_dataset(&small(4000)).unwrap();
    let test: Vec<&ExampleRef> = corpus.split(Split::RandomTest).iter().chain(corpus.split(Split::TemporalTest)).collect();
    let mae = test.iter().map(|e| (e.label - e.concentration).abs()).sum::<f64>() / test.len() as f64;
    assert!((corpus.bayes_mae - 0.3 * 0.5 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-12);
    assert!((mae / corpus.bayes_mae - 1.0).abs() < 0.1, "{mae} vs {}", corpus.bayes_mae);
}

#[test]
fn target_sd_grows_across_age_deciles() {
    let corpus = generate_dataset(&small(100_000)).unwrap();
    let y: Vec<f64> = corpus.patients.iter().map(|p| p.draws[0].observed).collect();
    let meta: Vec<PatientMeta> = corpus.patients.iter().map(|p| p.meta(0)).collect();
    let strat = stratified_mae(&vec![0.0; y.len()], &y, &meta).unwrap();
    let sds: Vec<f64> = strat.by_age.iter().map(|s| s.target_sd.unwrap()).collect();
    assert!(sds.windows(2).all(|w| w[0] < w[1]), "{sds:?}");
}

#[test]
fn no_sex_effect() {
    let corpus = generate_dataset(&small(2000)).unwrap();
    let ps = &corpus.patients;
    let mean = ps.iter().map(|p| p.draws[0].observed).sum::<f64>() / ps.len() as f64;
    let err = |s: Sex| -> Vec<f64> { ps.iter().filter(|p| p.sex == s).map(|p| (p.draws[0].observed - mean).abs()).collect() };
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64 / v.len() as f64)
    };
    let (m1, se1) = stats(&err(Sex::Male));
    let (m2, se2) = stats(&err(Sex::Female));
    assert!((m1 - m2).abs() < 3.0 * (se1 + se2).sqrt());
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    pearson(a, b).unwrap()
}

#[test]
fn preprocessing_removes_wander_and_hum() {
    let corpus = generate_dataset(&small(50)).unwrap();
    for ex in corpus.split(Split::RandomTest).iter().take(3) {
        let comps = corpus.components(ex).unwrap();
        let meta = corpus.meta(ex).unwrap();
        let noisy = RawEcg::new(comps.total(), 500.0, meta.clone()).unwrap();
        let clean = RawEcg::new(comps.clean.clone(), 500.0, meta).unwrap();
        let a = preprocess(&noisy).unwrap();
        let b = preprocess(&clean).unwrap();
        for lead in 0..8 {
            let r = correlation(&a.lead(lead)[..4000], &b.lead(lead)[..4000]);
            assert!(r >= 0.99, "lead {lead}: {r}");
        }
    }
}

#[test]
fn corpus_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_dataset(&small(20)).unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let back = read_manifest(dir.path()).unwrap();
    assert_eq!(back, corpus);
    let ex = &corpus.split(Split::Validation)[0];
    let loaded = electrolyte::signal::format::load(&dir.path().join(record_path(ex.record_id))).unwrap();
    assert_eq!(loaded, corpus.synthesize(ex).unwrap());
}

#[test]
fn config_validation() {
    let mut cfg = GeneratorConfig::potassium();
    cfg.duration_s = 11.0;
    assert!(cfg.validate().is_err());
    let cfg = GeneratorConfig {
        sd: 0.0,
        ..GeneratorConfig::potassium()
    };
    assert!(cfg.validate().is_err());
    assert!(GeneratorConfig::potassium().validate().is_ok());
}
