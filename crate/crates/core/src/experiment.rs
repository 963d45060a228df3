//! Experiment plumbing shared by the command line and the end-to-end tests:
//! the versioned configuration file, record loading, target codecs for each
//! model family, ridge fitting, evaluation reports and perturbation runs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::report::{AurocRow, EvalReport, OodRow, RegressionRow, UncertaintyRow};
use crate::eval::{
    calibration_bins, cumulative_macro_auroc, error_variance_correlation, regression_metrics, sparsification, spearman,
    stratified_mae, MeanSd, SPARSIFICATION_FRACTIONS,
};
use crate::features::PcaModel;
use crate::models::{
    pool_input, ridge_fit, ridge_predict, BackboneConfig, Checkpoint, Dataset, HeadKind, RidgeModel, Stamp, TrainConfig,
    TrainedNetwork,
};
use crate::perturb::{add_noise_snr, mask};
use crate::signal::{format, Preprocessor, ProcessedEcg};
use crate::synthdata::{record_path, Corpus, ExampleRef, GeneratorConfig, Split};
use crate::targets::{BinaryTask, Discretizer, Electrolyte, TargetCodec};
use crate::uncertainty::{combine_predictions, Ensemble};

pub const CONFIG_VERSION: u32 = 1;

/// Everything that determines an experiment. Stored as TOML; every key is
/// required.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: GeneratorConfig,
    pub backbone: BackboneConfig,
    pub training: TrainingSection,
    pub ridge: RidgeSection,
    pub eval: EvalSection,
}

/// [`TrainConfig`] without the seed, which comes from the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub select_best: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            plateau_factor: t.plateau_factor,
            plateau_patience: t.plateau_patience,
            min_lr: t.min_lr,
            select_best: t.select_best,
        }
    }
}

impl TrainingSection {
    pub fn for_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            plateau_factor: self.plateau_factor,
            plateau_patience: self.plateau_patience,
            min_lr: self.min_lr,
            seed,
            select_best: self.select_best,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeSection {
    /// Averaging factor applied to each record before PCA.
    pub input_pool: usize,
    pub components: usize,
    /// Candidate penalties; the one with the lowest validation error wins.
    pub lambdas: Vec<f64>,
}

impl Default for RidgeSection {
    fn default() -> Self {
        Self {
            input_pool: 8,
            components: crate::features::DEFAULT_COMPONENTS,
            lambdas: vec![1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub calibration_bins: usize,
    /// Seed of the per-record noise and masking streams.
    pub perturbation_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            calibration_bins: 10,
            perturbation_seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Defaults for one electrolyte with the compact backbone.
    pub fn new(electrolyte: Electrolyte) -> Self {
        Self {
            version: CONFIG_VERSION,
            data: GeneratorConfig::new(electrolyte),
            backbone: BackboneConfig::compact(),
            training: TrainingSection::default(),
            ridge: RidgeSection::default(),
            eval: EvalSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
                Some(key) => Error::MissingKey(key.to_string()),
                None => Error::InvalidConfig(msg.trim().to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidConfig(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.data.validate()?;
        self.backbone.validate()?;
        self.training.for_seed(0).validate()?;
        let r = &self.ridge;
        if r.input_pool == 0 || r.components == 0 || r.lambdas.is_empty() || r.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidConfig("ridge needs a pool factor, components and non-negative penalties".into()));
        }
        if self.eval.calibration_bins == 0 {
            return Err(Error::InvalidConfig("calibration needs at least one bin".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialisation; formatting and key order
    /// in the file do not matter.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Where recordings come from: the files of a corpus directory, or
/// synthesis on demand.
#[derive(Clone, Debug)]
pub struct RecordSource<'a> {
    pub corpus: &'a Corpus,
    pub dir: Option<&'a Path>,
    pub pre: Preprocessor,
}

impl<'a> RecordSource<'a> {
    pub fn synthetic(corpus: &'a Corpus) -> Self {
        Self {
            corpus,
            dir: None,
            pre: Preprocessor::default(),
        }
    }

    pub fn on_disk(corpus: &'a Corpus, dir: &'a Path) -> Self {
        Self {
            corpus,
            dir: Some(dir),
            pre: Preprocessor::default(),
        }
    }

    pub fn processed(&self, ex: &ExampleRef) -> Result<ProcessedEcg> {
        let raw = match self.dir {
            Some(d) => format::load(&d.join(record_path(ex.record_id)))?,
            None => self.corpus.synthesize(ex)?,
        };
        self.pre.run(&raw)
    }

    /// Full-resolution records, labels and record ids of a split.
    pub fn split(&self, split: Split) -> Result<SplitData> {
        let refs = self.corpus.split(split);
        if refs.is_empty() {
            return Err(Error::InsufficientData(format!("split {} is empty", split.name())));
        }
        Ok(SplitData {
            name: split.name().to_string(),
            records: refs.iter().map(|ex| self.processed(ex)).collect::<Result<_>>()?,
            targets: refs.iter().map(|e| e.label).collect(),
            ids: refs.iter().map(|e| e.record_id).collect(),
        })
    }

    /// Network-ready dataset of a split. Full-resolution records are not kept.
    pub fn pooled(&self, split: Split, pool: usize) -> Result<Dataset> {
        let mut ds = Dataset::new(ProcessedEcg::LEN / pool.max(1));
        for ex in self.corpus.split(split) {
            let ecg = self.processed(ex)?;
            ds.push(&pool_input(ecg.as_flat(), pool), ex.label, ecg.meta)?;
        }
        Ok(ds)
    }
}

/// Synthesizes and preprocesses every record of a split.
pub fn processed_split(corpus: &Corpus, split: Split, pre: &Preprocessor) -> Result<Vec<ProcessedEcg>> {
    corpus.split(split).iter().map(|ex| pre.run(&corpus.synthesize(ex)?)).collect()
}

/// Labels of a split, in record order.
pub fn split_labels(corpus: &Corpus, split: Split) -> Vec<f64> {
    corpus.split(split).iter().map(|e| e.label).collect()
}

/// Network-ready dataset of a synthesized split, pooled by `pool`.
pub fn pooled_dataset(corpus: &Corpus, split: Split, pre: &Preprocessor, pool: usize) -> Result<Dataset> {
    RecordSource {
        corpus,
        dir: None,
        pre: pre.clone(),
    }
    .pooled(split, pool)
}

/// Processed records of one split with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub name: String,
    pub records: Vec<ProcessedEcg>,
    pub targets: Vec<f64>,
    /// Record ids, used to key per-record random streams.
    pub ids: Vec<u64>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dataset(&self, pool: usize) -> Result<Dataset> {
        Dataset::from_ecgs(&self.records, &self.targets, pool)
    }
}

/// A network head or the ridge baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Network(HeadKind),
    Ridge,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Network(h) => h.name(),
            Self::Ridge => "ridge",
        }
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Self::Network(h) if h.is_discrete())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ridge" {
            Ok(Self::Ridge)
        } else {
            s.parse().map(Self::Network)
        }
    }
}

/// Codec for a model family. Discrete heads need `classes`; two classes
/// also need the binary `task`. Regression families reject both.
pub fn make_codec(kind: ModelKind, classes: Option<usize>, task: Option<BinaryTask>, electrolyte: Electrolyte, train: &[f64]) -> Result<TargetCodec> {
    let base = TargetCodec::regression(electrolyte, train)?;
    if !kind.is_discrete() {
        if classes.is_some() || task.is_some() {
            return Err(Error::InvalidArgument(format!("the {} model takes no class count", kind.name())));
        }
        return Ok(base);
    }
    let d = match (classes, task) {
        (None, _) => return Err(Error::InvalidArgument(format!("the {} head needs a class count", kind.name()))),
        (Some(2), Some(t)) => Discretizer::fit_binary(t, train, electrolyte)?,
        (Some(2), None) => return Err(Error::InvalidArgument("two classes need a task: hypo or hyper".into())),
        (Some(k), None) => Discretizer::fit(k, train, electrolyte)?,
        (Some(k), Some(_)) => return Err(Error::InvalidArgument(format!("a binary task is meaningless with {k} classes"))),
    };
    Ok(base.with_discretizer(d))
}

/// Name of the discrete task a codec encodes: `hypo` or `hyper` for two
/// classes, otherwise the head name.
pub fn task_name(codec: &TargetCodec, head: HeadKind) -> String {
    match &codec.discretizer {
        Some(d) if d.k() == 2 => {
            if d.bounds()[0] < codec.normalizer.mean {
                "hypo".into()
            } else {
                "hyper".into()
            }
        }
        _ => head.name().into(),
    }
}

/// PCA then ridge on z-scored targets, with the penalty picked on the
/// validation split.
pub fn fit_ridge_model(section: &RidgeSection, codec: TargetCodec, train: &SplitData, val: &SplitData) -> Result<RidgeModel> {
    let pool = section.input_pool;
    let rows: Vec<Vec<f64>> = train.records.iter().map(|r| pool_input(r.as_flat(), pool)).collect();
    let dim = rows.first().map_or(0, Vec::len);
    let pca = PcaModel::fit(&rows, section.components.min(dim).min(rows.len()))?;
    let scores: Vec<Vec<f64>> = rows.iter().map(|r| pca.transform(r)).collect::<Result<_>>()?;
    drop(rows);
    let val_scores: Vec<Vec<f64>> = val
        .records
        .iter()
        .map(|r| pca.transform(&pool_input(r.as_flat(), pool)))
        .collect::<Result<_>>()?;
    let z: Vec<f64> = train.targets.iter().map(|&y| codec.normalizer.apply(y)).collect();
    let val_z: Vec<f64> = val.targets.iter().map(|&y| codec.normalizer.apply(y)).collect();
    let mut best: Option<(f64, crate::models::Ridge)> = None;
    for &lambda in &section.lambdas {
        let fit = match ridge_fit(&scores, &z, lambda) {
            Ok(f) => f,
            Err(Error::Singular(_)) => continue,
            Err(e) => return Err(e),
        };
        let mut sse = 0.0;
        for (s, t) in val_scores.iter().zip(&val_z) {
            sse += (ridge_predict(&fit, s)? - t).powi(2);
        }
        if best.as_ref().map_or(true, |(b, _)| sse < *b) {
            best = Some((sse, fit));
        }
    }
    let (_, ridge) = best.ok_or_else(|| Error::Singular("every ridge penalty gave a singular system".into()))?;
    Ok(RidgeModel {
        input_pool: pool,
        pca,
        ridge,
        codec,
    })
}

/// Trained models of one family, one per seed.
#[derive(Clone, Debug)]
pub enum ModelSet {
    Networks(Vec<TrainedNetwork>),
    Ridge(Vec<RidgeModel>),
}

impl ModelSet {
    /// Groups loaded checkpoints, which must share family, architecture,
    /// codec and configuration hash.
    pub fn from_checkpoints(loaded: Vec<(Checkpoint, Stamp)>) -> Result<(Self, Stamp)> {
        let Some(stamp) = loaded.first().map(|(_, s)| s.clone()) else {
            return Err(Error::InvalidArgument("no checkpoints given".into()));
        };
        if let Some((_, s)) = loaded.iter().find(|(_, s)| s.config_hash != stamp.config_hash) {
            return Err(Error::InvalidArgument(format!(
                "checkpoints come from different configurations ({} and {})",
                stamp.config_hash, s.config_hash
            )));
        }
        let mut nets = Vec::new();
        let mut ridges = Vec::new();
        for (c, _) in loaded {
            match c {
                Checkpoint::Network(n) => nets.push(*n),
                Checkpoint::Ridge(r) => ridges.push(*r),
            }
        }
        let set = match (nets.is_empty(), ridges.is_empty()) {
            (false, true) => {
                let f = &nets[0];
                if nets.iter().any(|n| n.head() != f.head() || n.network.config() != f.network.config() || n.codec != f.codec) {
                    return Err(Error::InvalidArgument("checkpoints differ in head, architecture or targets".into()));
                }
                Self::Networks(nets)
            }
            (true, false) => {
                if ridges.iter().any(|r| r.codec != ridges[0].codec) {
                    return Err(Error::InvalidArgument("ridge checkpoints differ in targets".into()));
                }
                Self::Ridge(ridges)
            }
            _ => return Err(Error::InvalidArgument("cannot mix network and ridge checkpoints".into())),
        };
        Ok((set, stamp))
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Networks(n) => n.len(),
            Self::Ridge(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Networks(n) => ModelKind::Network(n[0].head()),
            Self::Ridge(_) => ModelKind::Ridge,
        }
    }

    pub fn codec(&self) -> &TargetCodec {
        match self {
            Self::Networks(n) => &n[0].codec,
            Self::Ridge(r) => &r[0].codec,
        }
    }

    /// Point predictions of every member, in concentration units.
    pub fn points(&self, data: &SplitData) -> Result<Vec<Vec<f64>>> {
        match self {
            Self::Networks(nets) => {
                let ds = data.dataset(nets[0].network.config().input_pool)?;
                nets.iter().map(|n| n.predict_points(&ds)).collect()
            }
            Self::Ridge(models) => models
                .iter()
                .map(|m| data.records.iter().map(|r| m.predict(r.as_flat())).collect())
                .collect(),
        }
    }
}

fn population_variance(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn regression_row(electrolyte: Electrolyte, split: String, per_seed: &[Vec<f64>], targets: &[f64]) -> Result<RegressionRow> {
    let var = population_variance(targets);
    let metrics = per_seed
        .iter()
        .map(|p| regression_metrics(p, targets, var.sqrt()))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegressionRow {
        electrolyte: electrolyte.name().to_string(),
        split,
        mse: MeanSd::of(&metrics.iter().map(|m| m.mse).collect::<Vec<_>>()),
        mae: MeanSd::of(&metrics.iter().map(|m| m.mae).collect::<Vec<_>>()),
        target_variance: var,
        nmse: MeanSd::of(&metrics.iter().map(|m| m.nmse).collect::<Vec<_>>()),
    })
}

/// Per-threshold and macro AUROC rows of discrete networks, over seeds.
fn auroc_rows(nets: &[TrainedNetwork], ds: &Dataset, targets: &[f64]) -> Result<Vec<AurocRow>> {
    let codec = &nets[0].codec;
    let d = codec
        .discretizer
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("discrete head without a discretizer".into()))?;
    let k = d.k();
    let classes = targets.iter().map(|&y| d.discretize(y)).collect::<Result<Vec<_>>>()?;
    let mut per_threshold = vec![Vec::new(); k - 1];
    let mut macros = Vec::new();
    for n in nets {
        let cum: Vec<Vec<f64>> = n
            .predict(ds)?
            .iter()
            .map(|p| p.cumulative().ok_or_else(|| Error::InvalidArgument("expected a discrete prediction".into())))
            .collect::<Result<_>>()?;
        let m = cumulative_macro_auroc(&cum, &classes, k)?;
        for (acc, a) in per_threshold.iter_mut().zip(&m.per_threshold) {
            acc.extend(a);
        }
        macros.push(m.aumroc);
    }
    let task = task_name(codec, nets[0].head());
    let mut rows: Vec<AurocRow> = per_threshold
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, v)| AurocRow {
            task: task.clone(),
            k,
            threshold: Some(i + 1),
            auroc: MeanSd::of(v),
        })
        .collect();
    rows.push(AurocRow {
        task,
        k,
        threshold: None,
        auroc: MeanSd::of(&macros),
    });
    Ok(rows)
}

/// Report for one split: regression errors over seeds, AUROCs for discrete
/// heads, and for Gaussian ensembles the uncertainty, calibration and
/// stratified tables. Provenance fields are left for the caller.
pub fn evaluate(models: &ModelSet, data: &SplitData, eval: &EvalSection) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::InvalidArgument("no models to evaluate".into()));
    }
    if data.is_empty() {
        return Err(Error::InsufficientData(format!("split {} is empty", data.name)));
    }
    let codec = models.codec();
    let points = models.points(data)?;
    let mut report = EvalReport {
        n_seeds: models.len(),
        ..EvalReport::default()
    };
    report.regression.push(regression_row(codec.electrolyte, data.name.clone(), &points, &data.targets)?);
    let n = data.len();
    let mut consensus: Vec<f64> = (0..n).map(|i| mean(&points.iter().map(|p| p[i]).collect::<Vec<_>>())).collect();

    if let ModelSet::Networks(nets) = models {
        let ds = data.dataset(nets[0].network.config().input_pool)?;
        match nets[0].head() {
            h if h.is_discrete() => report.auroc = auroc_rows(nets, &ds, &data.targets)?,
            HeadKind::Gaussian => {
                let ens = Ensemble::new(nets.clone())?;
                let dist = combine_predictions(&ens.member_predictions(&ds)?)?;
                let mu: Vec<f64> = dist.iter().map(|d| d.mean).collect();
                consensus.clone_from(&mu);
                report.regression.push(regression_row(
                    codec.electrolyte,
                    format!("{} ensemble", data.name),
                    std::slice::from_ref(&mu),
                    &data.targets,
                )?);
                let abs_err: Vec<f64> = mu.iter().zip(&data.targets).map(|(m, y)| (m - y).abs()).collect();
                let sq_err: Vec<f64> = abs_err.iter().map(|e| e * e).collect();
                let mut kinds: Vec<(&str, Vec<f64>)> = vec![
                    ("aleatoric", dist.iter().map(|d| d.aleatoric).collect()),
                    ("epistemic ensemble", dist.iter().map(|d| d.epistemic_ensemble).collect()),
                ];
                if dist.iter().all(|d| d.epistemic_laplace.is_some()) {
                    kinds.push(("epistemic Laplace", dist.iter().filter_map(|d| d.epistemic_laplace).collect()));
                }
                for (name, var) in &kinds {
                    let sp = sparsification(&abs_err, var, &SPARSIFICATION_FRACTIONS)?;
                    report.uncertainty.push(UncertaintyRow {
                        uncertainty: name.to_string(),
                        sparsification: sp.iter().map(|&v| MeanSd::of(&[v])).collect(),
                        pearson: MeanSd::of(&error_variance_correlation(&sq_err, var).ok().into_iter().collect::<Vec<_>>()),
                        spearman: MeanSd::of(&spearman(&sq_err, var).ok().into_iter().collect::<Vec<_>>()),
                    });
                }
                let bins = eval.calibration_bins.min(n);
                let alea_sd: Vec<f64> = dist.iter().map(|d| d.aleatoric.sqrt()).collect();
                let total_sd: Vec<f64> = dist.iter().map(|d| (d.aleatoric + d.epistemic_ensemble).sqrt()).collect();
                report
                    .calibration
                    .push(("aleatoric".into(), calibration_bins(&mu, &alea_sd, &data.targets, bins)?));
                report
                    .calibration
                    .push(("total".into(), calibration_bins(&mu, &total_sd, &data.targets, bins)?));
            }
            _ => {}
        }
    }
    let meta: Vec<_> = data.records.iter().map(|r| r.meta.clone()).collect();
    report.stratified = Some(stratified_mae(&consensus, &data.targets, &meta)?);
    Ok(report)
}

/// Input condition of an out-of-distribution run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Perturbation {
    Clean,
    Snr(f64),
    /// Masked proportion in `[0, 1]`.
    Mask(f64),
}

impl Perturbation {
    pub fn label(&self) -> String {
        match self {
            Self::Clean => "clean".into(),
            Self::Snr(s) => format!("SNR {s}"),
            Self::Mask(p) => format!("Mask {}", (p * 100.0).round()),
        }
    }

    pub fn apply(&self, ecg: &ProcessedEcg, rng: &mut ChaCha8Rng) -> Result<ProcessedEcg> {
        match *self {
            Self::Clean => Ok(ecg.clone()),
            Self::Snr(s) => Ok(add_noise_snr(ecg, s, rng)?.ecg),
            Self::Mask(p) => mask(ecg, p, rng),
        }
    }
}

fn record_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// One row per condition: member MAE, mean aleatoric and mean Laplace
/// variance as mean (sd) over members, and the mean ensemble variance.
pub fn ood_rows(ensemble: &Ensemble, data: &SplitData, conditions: &[Perturbation], seed: u64) -> Result<Vec<OodRow>> {
    let pool = ensemble.members[0].network.config().input_pool;
    let mut rows = Vec::with_capacity(conditions.len());
    for cond in conditions {
        let mut ds = Dataset::new(ProcessedEcg::LEN / pool.max(1));
        for ((ecg, &y), &id) in data.records.iter().zip(&data.targets).zip(&data.ids) {
            let p = cond.apply(ecg, &mut record_rng(seed, id))?;
            ds.push(&pool_input(p.as_flat(), pool), y, p.meta)?;
        }
        let members = ensemble.member_predictions(&ds)?;
        let maes: Vec<f64> = members
            .iter()
            .map(|m| mean(&m.mean.iter().zip(&data.targets).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()))
            .collect();
        let alea: Vec<f64> = members.iter().map(|m| mean(&m.variance)).collect();
        let laplace: Vec<f64> = members.iter().filter_map(|m| m.laplace.as_deref().map(mean)).collect();
        let dist = combine_predictions(&members)?;
        let epi = mean(&dist.iter().map(|d| d.epistemic_ensemble).collect::<Vec<_>>());
        rows.push(OodRow {
            condition: cond.label(),
            mae: MeanSd::of(&maes),
            aleatoric: MeanSd::of(&alea),
            epistemic_ensemble: MeanSd::of(&[epi]),
            epistemic_laplace: MeanSd::of(&laplace),
        });
    }
    Ok(rows)
}
