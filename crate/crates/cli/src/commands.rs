use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::time::Instant;

use electrolyte::eval::report::EvalReport;
use electrolyte::experiment::{
    evaluate, fit_ridge_model, make_codec, ood_rows, ExperimentConfig, ModelKind, ModelSet, Perturbation, RecordSource,
};
use electrolyte::io::atomic_write;
use electrolyte::models::{train as train_network, Checkpoint, HeadKind, TrainLog};
use electrolyte::synthdata::{generate_dataset, read_manifest, write_corpus, Corpus, Split, MANIFEST_FILE};
use electrolyte::uncertainty::{laplace_fit, Ensemble};
use serde::Serialize;

use crate::{DataArgs, EvalArgs, OodArgs, TrainArgs, WORKERS_ENV};

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] electrolyte::Error),
    #[error("{0}")]
    Usage(String),
    #[error("worker for seed {seed} failed ({status})")]
    Worker { seed: u64, status: String, user: bool },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use electrolyte::Error as E;
        match self {
            Self::Usage(_) | Self::Worker { user: true, .. } => 1,
            Self::Worker { .. } => 2,
            Self::Core(e) => match e {
                E::Singular(_) | E::Diverged { .. } | E::Graph(_) | E::UnstableFilter { .. } | E::InvalidFilter { .. } => 2,
                _ => 1,
            },
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn version() -> String {
    format!("electrolyte {}", env!("CARGO_PKG_VERSION"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| electrolyte::Error::io(dir, e).into())
}

pub fn gen_data(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    if out.join(MANIFEST_FILE).exists() {
        let existing = read_manifest(out)?;
        if existing.config != cfg.data {
            return Err(CliError::Usage(format!(
                "{} already holds a corpus generated with a different configuration",
                out.display()
            )));
        }
    }
    create_dir(out)?;
    let start = Instant::now();
    let corpus = generate_dataset(&cfg.data)?;
    write_corpus(&corpus, out)?;
    let text = format!("# hash {}\n{}", cfg.hash(), cfg.to_toml()?);
    atomic_write(&out.join(CONFIG_FILE), text.as_bytes())?;
    println!("corpus {} ({})", out.display(), cfg.data.electrolyte.name());
    println!("patients {}", corpus.patients.len());
    for split in Split::ALL {
        println!("{} {}", split.name(), corpus.split(split).len());
    }
    println!("bayes_mae {:.4}", corpus.bayes_mae);
    println!("config_hash {}", cfg.hash());
    eprintln!("generated in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}

/// Config and corpus of a data directory; the config must describe the
/// corpus it is used with.
fn open_data(args: &DataArgs) -> Result<(ExperimentConfig, Corpus)> {
    let path = args.config.clone().unwrap_or_else(|| args.data.join(CONFIG_FILE));
    let cfg = ExperimentConfig::load(&path)?;
    let corpus = read_manifest(&args.data)?;
    if corpus.config != cfg.data {
        return Err(CliError::Usage(format!(
            "the corpus in {} was generated with a different data configuration than {}",
            args.data.display(),
            path.display()
        )));
    }
    Ok((cfg, corpus))
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Usage(format!("invalid seed list `{s}` (use e.g. 0-4 or 0,2,5)"));
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| bad())?);
        }
    }
    seeds.sort_unstable();
    seeds.dedup();
    Ok(seeds)
}

fn checkpoint_path(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed{seed}.ckpt"))
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    config_hash: &'a str,
    version: String,
    model: &'a str,
    classes: Option<usize>,
    seed: u64,
    seconds: f64,
    log: Option<&'a TrainLog>,
}

fn write_record(out: &Path, record: &TrainRecord) -> Result<()> {
    let json = serde_json::to_vec_pretty(record).map_err(|e| electrolyte::Error::format("training log", e.to_string()))?;
    atomic_write(&out.join(format!("seed{}.json", record.seed)), &json)?;
    Ok(())
}

fn workers() -> usize {
    std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse().ok()).unwrap_or(1).max(1)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (cfg, corpus) = open_data(&args.data)?;
    let kind: ModelKind = args.head.parse()?;
    let seeds = parse_seeds(&args.seeds)?;
    let electrolyte = cfg.data.electrolyte;
    let train_y: Vec<f64> = corpus.split(Split::Train).iter().map(|e| e.label).collect();
    let codec = make_codec(kind, args.classes, args.task, electrolyte, &train_y)?;
    create_dir(&args.out)?;
    let hash = cfg.hash();

    let mut pending = Vec::new();
    for &seed in &seeds {
        let path = checkpoint_path(&args.out, seed);
        if path.exists() {
            let (_, stamp) = Checkpoint::load(&path)?;
            if stamp.config_hash != hash {
                return Err(CliError::Usage(format!(
                    "{} was trained with config {}, not {hash}",
                    path.display(),
                    stamp.config_hash
                )));
            }
            eprintln!("seed {seed}: checkpoint exists, skipping");
        } else {
            pending.push(seed);
        }
    }
    if pending.is_empty() {
        return Ok(());
    }
    let n_workers = workers();
    if n_workers > 1 && pending.len() > 1 {
        return fan_out(args, &pending, n_workers);
    }

    let source = RecordSource::on_disk(&corpus, &args.data.data);
    match kind {
        ModelKind::Ridge => {
            let start = Instant::now();
            let train_data = source.split(Split::Train)?;
            let val_data = source.split(Split::Validation)?;
            let model = fit_ridge_model(&cfg.ridge, codec, &train_data, &val_data)?;
            let seconds = start.elapsed().as_secs_f64();
            // The fit has no randomness; every seed gets the same model.
            for seed in pending {
                Checkpoint::Ridge(Box::new(model.clone())).save(&checkpoint_path(&args.out, seed), &hash)?;
                write_record(
                    &args.out,
                    &TrainRecord {
                        config_hash: &hash,
                        version: version(),
                        model: "ridge",
                        classes: None,
                        seed,
                        seconds,
                        log: None,
                    },
                )?;
                eprintln!("seed {seed}: ridge with lambda {} in {seconds:.1}s", model.ridge.lambda);
            }
        }
        ModelKind::Network(head) => {
            let pool = cfg.backbone.input_pool;
            let train_set = source.pooled(Split::Train, pool)?;
            let val_set = source.pooled(Split::Validation, pool)?;
            for seed in pending {
                let start = Instant::now();
                let mut model = train_network(&cfg.backbone, head, codec.clone(), &train_set, &val_set, &cfg.training.for_seed(seed))?;
                if head == HeadKind::Gaussian {
                    model.laplace = Some(laplace_fit(&model, &train_set)?);
                }
                let seconds = start.elapsed().as_secs_f64();
                Checkpoint::Network(Box::new(model.clone())).save(&checkpoint_path(&args.out, seed), &hash)?;
                write_record(
                    &args.out,
                    &TrainRecord {
                        config_hash: &hash,
                        version: version(),
                        model: head.name(),
                        classes: args.classes,
                        seed,
                        seconds,
                        log: Some(&model.log),
                    },
                )?;
                eprintln!(
                    "seed {seed}: best validation loss {:.4} at epoch {} in {seconds:.1}s",
                    model.log.best_val_loss, model.log.best_epoch
                );
            }
        }
    }
    Ok(())
}

/// Runs one child process per seed, at most `n` at a time.
fn fan_out(args: &TrainArgs, seeds: &[u64], n: usize) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| CliError::Usage(format!("cannot locate the executable: {e}")))?;
    let spawn = |seed: u64| -> Result<Child> {
        let mut cmd = Command::new(&exe);
        cmd.arg("train")
            .arg("--data")
            .arg(&args.data.data)
            .arg("--head")
            .arg(&args.head)
            .arg("--seeds")
            .arg(seed.to_string())
            .arg("--out")
            .arg(&args.out)
            .env(WORKERS_ENV, "1");
        if let Some(c) = &args.data.config {
            cmd.arg("--config").arg(c);
        }
        if let Some(k) = args.classes {
            cmd.arg("--classes").arg(k.to_string());
        }
        if let Some(t) = args.task {
            cmd.arg("--task").arg(match t {
                electrolyte::targets::BinaryTask::Hypo => "hypo",
                electrolyte::targets::BinaryTask::Hyper => "hyper",
            });
        }
        cmd.spawn().map_err(|e| CliError::Usage(format!("cannot start a worker: {e}")))
    };
    let wait = |(seed, mut child): (u64, Child)| -> Result<()> {
        let status = child.wait().map_err(|e| CliError::Usage(format!("lost a worker: {e}")))?;
        if status.success() {
            Ok(())
        } else {
            Err(CliError::Worker {
                seed,
                status: status.to_string(),
                user: status.code() == Some(1),
            })
        }
    };
    let mut running: Vec<(u64, Child)> = Vec::new();
    let mut first_error = None;
    for &seed in seeds {
        if running.len() == n {
            if let Err(e) = wait(running.remove(0)) {
                first_error.get_or_insert(e);
            }
        }
        if first_error.is_none() {
            running.push((seed, spawn(seed)?));
        }
    }
    for r in running {
        if let Err(e) = wait(r) {
            first_error.get_or_insert(e);
        }
    }
    first_error.map_or(Ok(()), Err)
}

/// Checkpoint files named directly or found (sorted) inside directories.
fn collect_checkpoints(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| electrolyte::Error::io(p, e))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "ckpt"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no checkpoints found".into()));
    }
    Ok(out)
}

fn load_models(paths: &[PathBuf], cfg: &ExperimentConfig) -> Result<(ModelSet, String)> {
    let loaded = collect_checkpoints(paths)?
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<electrolyte::Result<Vec<_>>>()?;
    let (models, stamp) = ModelSet::from_checkpoints(loaded)?;
    if models.codec().electrolyte != cfg.data.electrolyte {
        return Err(CliError::Usage(format!(
            "checkpoints predict {}, the corpus holds {}",
            models.codec().electrolyte.name(),
            cfg.data.electrolyte.name()
        )));
    }
    if stamp.config_hash != cfg.hash() {
        eprintln!("warning: checkpoints were trained with config {}, evaluating with {}", stamp.config_hash, cfg.hash());
    }
    Ok((models, stamp.config_hash))
}

fn require_split(corpus: &Corpus, split: Split) -> Result<()> {
    if corpus.split(split).is_empty() {
        return Err(CliError::Usage(format!("split {} is absent from the manifest", split.name())));
    }
    Ok(())
}

fn write_report(mut report: EvalReport, hash: String, dir: &Path) -> Result<()> {
    report.config_hash = hash;
    report.version = version();
    create_dir(dir)?;
    report.write_dir(dir)?;
    print!("{}", report.summary());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (cfg, corpus) = open_data(&args.data)?;
    for &s in &args.split {
        require_split(&corpus, s)?;
    }
    let (models, hash) = load_models(&args.checkpoints, &cfg)?;
    let source = RecordSource::on_disk(&corpus, &args.data.data);
    for &split in &args.split {
        let data = source.split(split)?;
        let report = evaluate(&models, &data, &cfg.eval)?;
        write_report(report, hash.clone(), &args.out.join(split.name()))?;
    }
    Ok(())
}

pub fn ood(args: &OodArgs) -> Result<()> {
    let (cfg, corpus) = open_data(&args.data)?;
    require_split(&corpus, args.split)?;
    if let Some(s) = args.snr.iter().find(|s| !(**s > 0.0)) {
        return Err(CliError::Usage(format!("SNR must be positive, got {s}")));
    }
    if let Some(p) = args.mask.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(CliError::Usage(format!("mask proportion must lie in [0, 1], got {p}")));
    }
    let (models, hash) = load_models(&args.checkpoints, &cfg)?;
    let ModelSet::Networks(nets) = models else {
        return Err(CliError::Usage("perturbation runs need Gaussian-head checkpoints".into()));
    };
    let ensemble = Ensemble::new(nets)?;
    let mut conditions = vec![Perturbation::Clean];
    conditions.extend(args.snr.iter().map(|&s| Perturbation::Snr(s)));
    conditions.extend(args.mask.iter().map(|&p| Perturbation::Mask(p)));
    let data = RecordSource::on_disk(&corpus, &args.data.data).split(args.split)?;
    let report = EvalReport {
        n_seeds: ensemble.members.len(),
        ood: ood_rows(&ensemble, &data, &conditions, cfg.eval.perturbation_seed)?,
        ..EvalReport::default()
    };
    write_report(report, hash, &args.out)
}
