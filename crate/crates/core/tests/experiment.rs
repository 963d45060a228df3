use std::path::Path;

use electrolyte::experiment::*;
use electrolyte::models::HeadKind;
use electrolyte::synthdata::{generate_dataset, Split};
use electrolyte::targets::{BinaryTask, Electrolyte};
use electrolyte::Error;

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let default = ExperimentConfig::new(Electrolyte::Potassium);
    assert_eq!(shipped("potassium.toml"), default);
    let uncoupled = shipped("potassium-uncoupled.toml");
    assert_eq!(uncoupled.data, default.data.clone().without_coupling());
    shipped("smoke.toml");
}

#[test]
fn toml_round_trip_and_hash() {
    let cfg = ExperimentConfig::new(Electrolyte::Calcium);
    let text = cfg.to_toml().unwrap();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 64);
    // Comments and spacing do not change the hash; values do.
    let noisy = format!("# note\n\n{}", text.replace(" = ", "   =   "));
    assert_eq!(ExperimentConfig::from_toml(&noisy).unwrap().hash(), cfg.hash());
    let mut other = cfg.clone();
    other.data.seed = 1;
    assert_ne!(other.hash(), cfg.hash());
}

#[test]
fn config_errors() {
    let text = ExperimentConfig::new(Electrolyte::Potassium).to_toml().unwrap();
    let without = |key: &str| -> String { text.lines().filter(|l| !l.starts_with(key)).map(|l| format!("{l}\n")).collect() };
    match ExperimentConfig::from_toml(&without("qt_gain")) {
        Err(Error::MissingKey(k)) => assert_eq!(k, "qt_gain"),
        other => panic!("{other:?}"),
    }
    match ExperimentConfig::from_toml(&without("perturbation_seed")) {
        Err(e) => assert!(e.to_string().contains("perturbation_seed"), "{e}"),
        Ok(_) => panic!("accepted"),
    }
    assert!(matches!(ExperimentConfig::from_toml(&text.replace("version = 1", "version = 2")), Err(Error::InvalidConfig(_))));
    assert!(ExperimentConfig::from_toml(&format!("{text}\n[extra]\nx = 1\n")).is_err());
    assert!(ExperimentConfig::from_toml(&text.replace("n_patients = 2000", "n_patients = -3")).is_err());
    assert!(ExperimentConfig::from_toml(&text.replace("kernel = 9", "kernel = 4")).is_err());
}

#[test]
fn codecs_per_family() {
    let y: Vec<f64> = (0..200).map(|i| 3.0 + 2.5 * i as f64 / 199.0).collect();
    let k = Electrolyte::Potassium;
    let net = |h| ModelKind::Network(h);
    assert!(make_codec(ModelKind::Ridge, None, None, k, &y).unwrap().discretizer.is_none());
    assert!(make_codec(ModelKind::Ridge, Some(3), None, k, &y).is_err());
    assert!(make_codec(net(HeadKind::Gaussian), Some(3), None, k, &y).is_err());
    assert!(make_codec(net(HeadKind::Direct), None, Some(BinaryTask::Hypo), k, &y).is_err());
    assert!(make_codec(net(HeadKind::Ordinal), None, None, k, &y).is_err());
    assert!(make_codec(net(HeadKind::Ordinal), Some(2), None, k, &y).is_err());
    assert!(make_codec(net(HeadKind::Ordinal), Some(5), Some(BinaryTask::Hyper), k, &y).is_err());
    let c = make_codec(net(HeadKind::Ordinal), Some(5), None, k, &y).unwrap();
    assert_eq!(c.k(), Some(5));
    assert_eq!(task_name(&c, HeadKind::Ordinal), "ordinal");
    let hypo = make_codec(net(HeadKind::Classification), Some(2), Some(BinaryTask::Hypo), k, &y).unwrap();
    let hyper = make_codec(net(HeadKind::Classification), Some(2), Some(BinaryTask::Hyper), k, &y).unwrap();
    assert_eq!(hypo.discretizer.as_ref().unwrap().bounds(), &[3.5]);
    assert_eq!(hyper.discretizer.as_ref().unwrap().bounds(), &[5.5]);
    assert_eq!(task_name(&hypo, HeadKind::Classification), "hypo");
    assert_eq!(task_name(&hyper, HeadKind::Classification), "hyper");
    assert_eq!("ridge".parse::<ModelKind>().unwrap(), ModelKind::Ridge);
    assert_eq!("ordinal".parse::<ModelKind>().unwrap(), net(HeadKind::Ordinal));
    assert!("lasso".parse::<ModelKind>().is_err());
}

#[test]
fn perturbation_labels() {
    assert_eq!(Perturbation::Clean.label(), "clean");
    assert_eq!(Perturbation::Snr(10.0).label(), "SNR 10");
    assert_eq!(Perturbation::Mask(0.25).label(), "Mask 25");
}

#[test]
fn ridge_on_a_small_corpus() {
    let mut cfg = ExperimentConfig::new(Electrolyte::Potassium);
    cfg.data.n_patients = 120;
    cfg.ridge.components = 32;
    cfg.ridge.input_pool = 32;
    let corpus = generate_dataset(&cfg.data).unwrap();
    let src = RecordSource::synthetic(&corpus);
    let train = src.split(Split::Train).unwrap();
    let val = src.split(Split::Validation).unwrap();
    let codec = make_codec(ModelKind::Ridge, None, None, Electrolyte::Potassium, &train.targets).unwrap();
    let model = fit_ridge_model(&cfg.ridge, codec, &train, &val).unwrap();
    assert_eq!(model.pca.n_components(), 32);
    assert!(cfg.ridge.lambdas.contains(&model.ridge.lambda));
    let test = src.split(Split::RandomTest).unwrap();
    let (set, _) = ModelSet::from_checkpoints(vec![(
        electrolyte::models::Checkpoint::Ridge(Box::new(model)),
        electrolyte::models::Stamp {
            config_hash: cfg.hash(),
            version: "v".into(),
        },
    )])
    .unwrap();
    let report = evaluate(&set, &test, &cfg.eval).unwrap();
    assert_eq!(report.regression.len(), 1);
    assert!(report.regression[0].mae.mean.is_finite());
    assert!(report.auroc.is_empty() && report.uncertainty.is_empty());
}
