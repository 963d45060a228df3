//! Trains one Gaussian-head network on the default synthetic potassium
//! corpus and prints test metrics.
//!
//! cargo run --release -p electrolyte --example train_potassium [seed]

use std::time::Instant;

use electrolyte::eval::regression_metrics;
use electrolyte::experiment::pooled_dataset;
use electrolyte::models::{train, BackboneConfig, HeadKind, TrainConfig};
use electrolyte::signal::Preprocessor;
use electrolyte::synthdata::{generate_dataset, GeneratorConfig, Split};
use electrolyte::targets::TargetCodec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let t0 = Instant::now();
    let corpus = generate_dataset(&GeneratorConfig::potassium())?;
    let backbone = BackboneConfig::compact();
    let pre = Preprocessor::default();
    let train_set = pooled_dataset(&corpus, Split::Train, &pre, backbone.input_pool)?;
    let val_set = pooled_dataset(&corpus, Split::Validation, &pre, backbone.input_pool)?;
    let test_set = pooled_dataset(&corpus, Split::RandomTest, &pre, backbone.input_pool)?;
    println!(
        "data: {} train / {} val / {} test in {:.1?}",
        train_set.len(),
        val_set.len(),
        test_set.len(),
        t0.elapsed()
    );

    let codec = TargetCodec::regression(corpus.config.electrolyte, &train_set.targets)?;
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let t1 = Instant::now();
    let model = train(&backbone, HeadKind::Gaussian, codec, &train_set, &val_set, &cfg)?;
    println!("trained in {:.1?}", t1.elapsed());
    for e in &model.log.epochs {
        println!("epoch {:2} train {:.4} val {:.4} lr {:.0e}", e.epoch, e.train_loss, e.val_loss, e.lr);
    }
    let preds = model.predict_points(&test_set)?;
    let m = regression_metrics(&preds, &test_set.targets, model.codec.normalizer.sd)?;
    println!("test MSE {:.4} MAE {:.4} nMSE {:.4} (Bayes MAE {:.4})", m.mse, m.mae, m.nmse, corpus.bayes_mae);
    Ok(())
}
