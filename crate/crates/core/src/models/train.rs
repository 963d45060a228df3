use autograd::{Adam, Graph, GraphError, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{BackboneConfig, Mode, Network};
use super::{Dataset, HeadKind, HeadVars};
use crate::error::{Error, Result};
use crate::signal::N_LEADS;
use crate::targets::{ordinal_decode, TargetCodec};
use crate::uncertainty::LaplacePosterior;

const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub seed: u64,
    /// Keep the parameters of the epoch with the lowest validation loss
    /// rather than those of the last epoch.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            plateau_factor: 0.1,
            plateau_patience: 7,
            min_lr: 1e-7,
            seed: 0,
            select_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidConfig("need at least one epoch and batches of two or more".into()));
        }
        if !(self.lr > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) || self.min_lr < 0.0 {
            return Err(Error::InvalidConfig("learning rate settings out of range".into()));
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning rate schedule in "min" mode with a relative
/// improvement threshold of 1e-4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    const THRESHOLD: f64 = 1e-4;

    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's metric; returns true when the rate was lowered.
    pub fn step(&mut self, metric: f64) -> bool {
        if metric < self.best * (1.0 - Self::THRESHOLD) || self.best == f64::INFINITY {
            self.best = metric;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            let next = (self.lr * self.factor).max(self.min_lr);
            if next < self.lr {
                self.lr = next;
                return true;
            }
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// `(epoch, new rate)` for every scheduler reduction.
    pub lr_changes: Vec<(usize, f64)>,
}

/// Network outputs before decoding: head values on the z-scale (or logits)
/// and the pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct RawOutput {
    pub head: Vec<f64>,
    pub features: Vec<f64>,
}

/// A prediction in the units of the concentration.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Value(f64),
    Gaussian { mean: f64, variance: f64 },
    /// Class probabilities, summing to one.
    Classes(Vec<f64>),
    /// `P(class > j)` for `j = 1..k-1`.
    Ranks(Vec<f64>),
}

impl Prediction {
    /// Predicted class for the discrete heads: arg max of the class
    /// probabilities, or the thresholded rank sum.
    pub fn class(&self) -> Option<usize> {
        match self {
            Self::Classes(p) => p
                .iter()
                .enumerate()
                .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                    Some((_, b)) if b >= v => best,
                    _ => Some((i, v)),
                })
                .map(|(i, _)| i + 1),
            Self::Ranks(p) => ordinal_decode(p).ok(),
            _ => None,
        }
    }

    /// Concentration estimate; discrete predictions go through the class
    /// representative values of the codec.
    pub fn point(&self, codec: &TargetCodec) -> Result<f64> {
        match self {
            Self::Value(v) => Ok(*v),
            Self::Gaussian { mean, .. } => Ok(*mean),
            _ => {
                let d = codec
                    .discretizer
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("discrete prediction without a discretizer".into()))?;
                d.class_to_concentration(self.class().unwrap_or(1))
            }
        }
    }

    /// Cumulative scores `p(class <= i)` for `i = 1..k-1`.
    pub fn cumulative(&self) -> Option<Vec<f64>> {
        match self {
            Self::Classes(p) => Some(crate::eval::cumulative_from_class_probs(p)),
            Self::Ranks(p) => Some(crate::eval::cumulative_from_rank_probs(p)),
            _ => None,
        }
    }
}

/// A network together with the target codec it was trained against.
#[derive(Clone, Debug)]
pub struct TrainedNetwork {
    pub network: Network,
    pub codec: TargetCodec,
    pub log: TrainLog,
    pub seed: u64,
    pub laplace: Option<LaplacePosterior>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn input_tensor(net: &Network, inputs: &[f64], n: usize) -> Result<Tensor> {
    Ok(Tensor::new(&[n, N_LEADS, net.config().input_len()], inputs.to_vec())?)
}

fn check_inputs(net: &Network, data: &Dataset) -> Result<()> {
    if data.record_len != net.input_size() {
        return Err(Error::Shape {
            expected: format!("{} values per record", net.input_size()),
            got: data.record_len.to_string(),
        });
    }
    Ok(())
}

/// Eval-mode forward over a whole dataset in fixed batches.
pub(crate) fn forward_eval(net: &Network, data: &Dataset) -> Result<Vec<RawOutput>> {
    check_inputs(net, data)?;
    let mut out = Vec::with_capacity(data.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let f = net.config().feature_dim();
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let n = EVAL_BATCH.min(data.len() - start);
        let mut g = Graph::new();
        let x = g.constant(input_tensor(net, &data.inputs[start * data.record_len..(start + n) * data.record_len], n)?);
        let fwd = net.forward(&mut g, x, Mode::Eval, &mut rng)?;
        let feats = g.value(fwd.features).data().to_vec();
        let heads: Vec<Vec<f64>> = match fwd.head {
            HeadVars::Value(v) | HeadVars::Logits(v) => {
                let w = g.shape(v)[1];
                g.value(v).data().chunks(w).map(<[f64]>::to_vec).collect()
            }
            HeadVars::Gaussian { mean, logvar } => g
                .value(mean)
                .data()
                .iter()
                .zip(g.value(logvar).data())
                .map(|(&m, &l)| vec![m, l])
                .collect(),
        };
        for (i, head) in heads.into_iter().enumerate() {
            out.push(RawOutput {
                head,
                features: feats[i * f..(i + 1) * f].to_vec(),
            });
        }
    }
    Ok(out)
}

impl TrainedNetwork {
    pub fn head(&self) -> HeadKind {
        self.network.head()
    }

    pub fn raw_outputs(&self, data: &Dataset) -> Result<Vec<RawOutput>> {
        forward_eval(&self.network, data)
    }

    /// Decodes raw outputs into concentration units.
    pub fn decode(&self, raw: &RawOutput) -> Prediction {
        let norm = &self.codec.normalizer;
        match self.head() {
            HeadKind::Direct => Prediction::Value(norm.invert(raw.head[0])),
            HeadKind::Gaussian => Prediction::Gaussian {
                mean: norm.invert(raw.head[0]),
                variance: norm.invert_variance(raw.head[1].exp()),
            },
            HeadKind::Classification => Prediction::Classes(softmax(&raw.head)),
            HeadKind::Ordinal => Prediction::Ranks(raw.head.iter().map(|&z| sigmoid(z)).collect()),
        }
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<Prediction>> {
        Ok(self.raw_outputs(data)?.iter().map(|r| self.decode(r)).collect())
    }

    /// Point estimates in concentration units.
    pub fn predict_points(&self, data: &Dataset) -> Result<Vec<f64>> {
        self.predict(data)?.iter().map(|p| p.point(&self.codec)).collect()
    }
}

fn encode_targets(head: HeadKind, codec: &TargetCodec, y: &[f64]) -> Result<Vec<f64>> {
    match (head, &codec.discretizer) {
        (HeadKind::Direct | HeadKind::Gaussian, None) => Ok(y.iter().map(|&v| codec.normalizer.apply(v)).collect()),
        (HeadKind::Classification | HeadKind::Ordinal, Some(d)) => y.iter().map(|&v| d.discretize(v).map(|c| c as f64)).collect(),
        _ => Err(Error::InvalidConfig(format!(
            "{} head does not match a codec with {} classes",
            head.name(),
            codec.k().map_or_else(|| "no".to_string(), |k| k.to_string())
        ))),
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Graph(GraphError::NonFinite { .. }) => Error::Diverged { epoch, loss: f64::NAN },
        e => e,
    }
}

/// Mean loss over `data` in eval mode.
fn dataset_loss(net: &Network, data: &Dataset, targets: &[f64]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for start in (0..data.len()).step_by(EVAL_BATCH) {
        let n = EVAL_BATCH.min(data.len() - start);
        let mut g = Graph::new();
        let x = g.constant(input_tensor(net, &data.inputs[start * data.record_len..(start + n) * data.record_len], n)?);
        let fwd = net.forward(&mut g, x, Mode::Eval, &mut rng)?;
        let loss = net.loss(&mut g, &fwd, &targets[start..start + n])?;
        total += g.value(loss).item() * n as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains a fresh network with Adam and a plateau schedule, keeping the
/// parameters of the best validation epoch when `cfg.select_best` is set.
pub fn train(
    backbone: &BackboneConfig,
    head: HeadKind,
    codec: TargetCodec,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::InsufficientData(format!(
            "{} training and {} validation records",
            train_set.len(),
            val_set.len()
        )));
    }
    let y_train = encode_targets(head, &codec, &train_set.targets)?;
    let y_val = encode_targets(head, &codec, &val_set.targets)?;
    let n_classes = if head.is_discrete() { codec.k() } else { None };
    let mut net = Network::new(backbone.clone(), head, n_classes, cfg.seed)?;
    if let (HeadKind::Ordinal, Some(k)) = (head, n_classes) {
        // Start from the training rank frequencies; thresholds in the tails
        // are otherwise far from their zero init and learn slowly.
        let n = y_train.len() as f64;
        let rates: Vec<f64> = (1..k).map(|j| (y_train.iter().filter(|&&c| c > j as f64).count() as f64 + 1.0) / (n + 2.0)).collect();
        net.init_ordinal_biases(&rates)?;
    }
    check_inputs(&net, train_set)?;
    check_inputs(&net, val_set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr);
    let mut log = TrainLog {
        best_val_loss: f64::INFINITY,
        ..TrainLog::default()
    };
    let mut best = (net.params().values(), net.running_stats());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let len = train_set.record_len;
    let mut batch_inputs = Vec::with_capacity(cfg.batch_size * len);
    let mut batch_targets = Vec::with_capacity(cfg.batch_size);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let adam = Adam::with_lr(sched.lr);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            // A single-record batch has no batch-norm statistics to speak of.
            if chunk.len() < 2 {
                continue;
            }
            batch_inputs.clear();
            batch_targets.clear();
            for &i in chunk {
                batch_inputs.extend_from_slice(train_set.input(i));
                batch_targets.push(y_train[i]);
            }
            let step = |net: &mut Network, rng: &mut ChaCha8Rng| -> Result<f64> {
                let mut g = Graph::new();
                let x = g.constant(input_tensor(net, &batch_inputs, chunk.len())?);
                let fwd = net.forward(&mut g, x, Mode::Train, rng)?;
                let loss = net.loss(&mut g, &fwd, &batch_targets)?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, loss: value });
                }
                let grads = g.backward(loss)?;
                adam.step(net.params_mut(), &grads.params())?;
                net.update_running_stats(&fwd);
                Ok(value)
            };
            let value = step(&mut net, &mut rng).map_err(|e| diverged(epoch, e))?;
            sum += value * chunk.len() as f64;
            count += chunk.len();
        }
        let train_loss = sum / count.max(1) as f64;
        let val_loss = dataset_loss(&net, val_set, &y_val).map_err(|e| diverged(epoch, e))?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: sched.lr,
        });
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            if cfg.select_best {
                best = (net.params().values(), net.running_stats());
            }
        }
        if sched.step(val_loss) {
            log.lr_changes.push((epoch, sched.lr));
        }
    }
    if cfg.select_best {
        net.params_mut().load_values(best.0)?;
        net.set_running_stats(best.1)?;
    }
    Ok(TrainedNetwork {
        network: net,
        codec,
        log,
        seed: cfg.seed,
        laplace: None,
    })
}
