use autograd::{BatchStats, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::HeadKind;
use crate::error::{Error, Result};
use crate::signal::{N_LEADS, PADDED_LEN};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Residual 1-D convolutional feature extractor.
///
/// A stem convolution is followed by one residual block per entry of
/// `channels`; each block holds two `kernel`-wide convolutions with batch
/// norm, the first one strided, and a strided 1x1 projection on the skip path
/// when the shape changes. Global average pooling gives the features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Non-overlapping average pooling applied to every lead before the
    /// network sees it.
    pub input_pool: usize,
    pub stem_channels: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    /// Four blocks of 16, 32, 32, 64 channels, kernel 17, downsampling by 4
    /// per block, on the full 400 Hz input.
    fn default() -> Self {
        Self {
            input_pool: 1,
            stem_channels: 16,
            channels: vec![16, 32, 32, 64],
            kernel: 17,
            strides: vec![4, 4, 4, 4],
            dropout: 0.2,
        }
    }
}

impl BackboneConfig {
    /// Small network on a 25 Hz input, cheap enough to train many seeds on a
    /// single core. Its receptive field spans several heartbeats.
    pub fn compact() -> Self {
        Self {
            input_pool: 16,
            stem_channels: 8,
            channels: vec![16, 16, 32],
            kernel: 9,
            strides: vec![2, 2, 2],
            dropout: 0.2,
        }
    }

    /// Two blocks of four channels on a 16-sample input, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_pool: 256,
            stem_channels: 4,
            channels: vec![4, 4],
            kernel: 3,
            strides: vec![2, 2],
            dropout: 0.0,
        }
    }

    pub fn input_len(&self) -> usize {
        PADDED_LEN / self.input_pool.max(1)
    }

    /// Temporal length after all downsampling.
    pub fn output_len(&self) -> usize {
        self.strides.iter().fold(self.input_len(), |l, &s| if s == 0 { 0 } else { (l + s - 1) / s })
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_pool == 0 || PADDED_LEN % self.input_pool != 0 {
            return bad(format!("input_pool {} must divide {PADDED_LEN}", self.input_pool));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad("channels and strides need one entry per block".into());
        }
        if self.stem_channels == 0 || self.channels.contains(&0) || self.strides.contains(&0) {
            return bad("channel counts and strides must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.kernel / 2 >= self.input_len() {
            return bad("kernel wider than the pooled input".into());
        }
        Ok(())
    }
}

/// Averages non-overlapping windows of `factor` samples within each lead of
/// a lead-major record.
pub fn pool_input(flat: &[f64], factor: usize) -> Vec<f64> {
    if factor <= 1 {
        return flat.to_vec();
    }
    flat.chunks(factor).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stride: usize,
    padding: usize,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    skip: Option<ConvBn>,
}

#[derive(Clone, Debug)]
enum HeadParams {
    Direct { w: ParamId, b: ParamId },
    Gaussian { w_mu: ParamId, b_mu: ParamId, w_lv: ParamId, b_lv: ParamId },
    Classification { w: ParamId, b: ParamId },
    /// One shared weight vector; rank biases `b1 - cumsum(softplus(deltas))`.
    Ordinal { w: ParamId, b1: ParamId, deltas: Option<ParamId> },
}

/// Head outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum HeadVars {
    Value(Var),
    Gaussian { mean: Var, logvar: Var },
    Logits(Var),
}

pub struct Forward {
    pub head: HeadVars,
    /// Pooled features `[N, F]` feeding the head.
    pub features: Var,
    stats: Vec<BatchStats>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: BackboneConfig,
    head: HeadKind,
    n_classes: Option<usize>,
    params: ParamStore,
    stem: ConvBn,
    blocks: Vec<Block>,
    head_params: HeadParams,
}

/// Batch-norm running statistics of every layer, in forward order.
pub type RunningStats = Vec<(Vec<f64>, Vec<f64>)>;

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive sd");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| normal.sample(&mut self.rng)).collect()).expect("shape matches")
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()).expect("shape matches")
    }
}

fn conv_bn(params: &mut ParamStore, init: &mut Init, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> ConvBn {
    ConvBn {
        weight: params.add(format!("{name}.weight"), init.he(&[c_out, c_in, k], c_in * k)),
        gamma: params.add(format!("{name}.gamma"), Tensor::full(&[c_out], 1.0)),
        beta: params.add(format!("{name}.beta"), Tensor::zeros(&[c_out])),
        stride,
        padding: k / 2,
        running_mean: vec![0.0; c_out],
        running_var: vec![1.0; c_out],
    }
}

impl Network {
    /// Randomly initialised network. `n_classes` is required for the
    /// classification and ordinal heads and must be absent otherwise.
    pub fn new(config: BackboneConfig, head: HeadKind, n_classes: Option<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        match (head, n_classes) {
            (HeadKind::Direct | HeadKind::Gaussian, None) => {}
            (HeadKind::Classification | HeadKind::Ordinal, Some(k)) if k >= 2 => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "{} head with class count {n_classes:?}",
                    head.name()
                )))
            }
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut params = ParamStore::new();
        let k = config.kernel;
        let stem = conv_bn(&mut params, &mut init, "stem", N_LEADS, config.stem_channels, k, 1);
        let mut blocks = Vec::new();
        let mut c_in = config.stem_channels;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            let conv1 = conv_bn(&mut params, &mut init, &format!("block{i}.conv1"), c_in, c, k, s);
            let conv2 = conv_bn(&mut params, &mut init, &format!("block{i}.conv2"), c, c, k, 1);
            let skip = (c != c_in || s != 1).then(|| conv_bn(&mut params, &mut init, &format!("block{i}.skip"), c_in, c, 1, s));
            blocks.push(Block { conv1, conv2, skip });
            c_in = c;
        }
        let f = config.feature_dim();
        let bound = 1.0 / (f as f64).sqrt();
        let head_params = match head {
            HeadKind::Direct => HeadParams::Direct {
                w: params.add("head.weight", init.uniform(&[f, 1], bound)),
                b: params.add("head.bias", Tensor::zeros(&[1])),
            },
            HeadKind::Gaussian => HeadParams::Gaussian {
                w_mu: params.add("head.mean.weight", init.uniform(&[f, 1], bound)),
                b_mu: params.add("head.mean.bias", Tensor::zeros(&[1])),
                w_lv: params.add("head.logvar.weight", init.uniform(&[f, 1], bound)),
                b_lv: params.add("head.logvar.bias", Tensor::zeros(&[1])),
            },
            HeadKind::Classification => {
                let k = n_classes.unwrap_or(2);
                HeadParams::Classification {
                    w: params.add("head.weight", init.uniform(&[f, k], bound)),
                    b: params.add("head.bias", Tensor::zeros(&[k])),
                }
            }
            HeadKind::Ordinal => {
                let k = n_classes.unwrap_or(2);
                HeadParams::Ordinal {
                    w: params.add("head.weight", init.uniform(&[f, 1], bound)),
                    b1: params.add("head.bias", Tensor::zeros(&[1])),
                    deltas: (k > 2).then(|| params.add("head.bias_steps", Tensor::zeros(&[k - 2]))),
                }
            }
        };
        Ok(Self {
            config,
            head,
            n_classes,
            params,
            stem,
            blocks,
            head_params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.n_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Values per input record: `8 x input_len`.
    pub fn input_size(&self) -> usize {
        N_LEADS * self.config.input_len()
    }

    /// Width of the head output: 1, 2 (mean and log variance), `k` or `k - 1`.
    pub fn output_width(&self) -> usize {
        match self.head {
            HeadKind::Direct => 1,
            HeadKind::Gaussian => 2,
            HeadKind::Classification => self.n_classes.unwrap_or(2),
            HeadKind::Ordinal => self.n_classes.unwrap_or(2) - 1,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &ConvBn> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| [Some(&b.conv1), Some(&b.conv2), b.skip.as_ref()].into_iter().flatten()))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn> {
        std::iter::once(&mut self.stem).chain(
            self.blocks
                .iter_mut()
                .flat_map(|b| [Some(&mut b.conv1), Some(&mut b.conv2), b.skip.as_mut()].into_iter().flatten()),
        )
    }

    pub fn running_stats(&self) -> RunningStats {
        self.layers().map(|l| (l.running_mean.clone(), l.running_var.clone())).collect()
    }

    pub fn set_running_stats(&mut self, stats: RunningStats) -> Result<()> {
        let n = self.layers().count();
        if stats.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} batch-norm layers"),
                got: stats.len().to_string(),
            });
        }
        for (layer, (m, v)) in self.layers_mut().zip(stats) {
            if m.len() != layer.running_mean.len() || v.len() != layer.running_var.len() {
                return Err(Error::Shape {
                    expected: layer.running_mean.len().to_string(),
                    got: m.len().to_string(),
                });
            }
            layer.running_mean = m;
            layer.running_var = v;
        }
        Ok(())
    }

    /// Folds the batch statistics of a training step into the running averages.
    pub fn update_running_stats(&mut self, fwd: &Forward) {
        for (layer, s) in self.layers_mut().zip(&fwd.stats) {
            let unbias = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for c in 0..layer.running_mean.len() {
                layer.running_mean[c] = (1.0 - BN_MOMENTUM) * layer.running_mean[c] + BN_MOMENTUM * s.mean[c];
                layer.running_var[c] = (1.0 - BN_MOMENTUM) * layer.running_var[c] + BN_MOMENTUM * s.var[c] * unbias;
            }
        }
    }

    fn conv_bn(&self, g: &mut Graph, x: Var, layer: &ConvBn, mode: Mode, stats: &mut Vec<BatchStats>) -> Result<Var> {
        let w = g.param(&self.params, layer.weight);
        let y = g.conv1d(x, w, None, layer.stride, layer.padding)?;
        let gamma = g.param(&self.params, layer.gamma);
        let beta = g.param(&self.params, layer.beta);
        Ok(match mode {
            Mode::Train => {
                let (v, s) = g.batch_norm_train(y, gamma, beta, BN_EPS)?;
                stats.push(s);
                v
            }
            Mode::Eval => g.batch_norm_eval(y, gamma, beta, &layer.running_mean, &layer.running_var, BN_EPS)?,
        })
    }

    fn linear(&self, g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let bv = g.param(&self.params, b);
        let y = g.matmul(x, wv)?;
        Ok(g.add_bias(y, bv)?)
    }

    /// Records a forward pass on `g`. `input` has shape `[N, 8, input_len]`.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, input: Var, mode: Mode, rng: &mut R) -> Result<Forward> {
        let expect = [N_LEADS, self.config.input_len()];
        let shape = g.shape(input);
        if shape.len() != 3 || shape[1..] != expect {
            return Err(Error::Shape {
                expected: format!("[N, {}, {}]", expect[0], expect[1]),
                got: format!("{shape:?}"),
            });
        }
        let train = mode == Mode::Train;
        let mut stats = Vec::new();
        let h = self.conv_bn(g, input, &self.stem, mode, &mut stats)?;
        let mut h = g.relu(h)?;
        for block in &self.blocks {
            let a = self.conv_bn(g, h, &block.conv1, mode, &mut stats)?;
            let a = g.relu(a)?;
            let a = g.dropout(a, self.config.dropout, train, rng)?;
            let a = self.conv_bn(g, a, &block.conv2, mode, &mut stats)?;
            let s = match &block.skip {
                Some(l) => self.conv_bn(g, h, l, mode, &mut stats)?,
                None => h,
            };
            let sum = g.add(a, s)?;
            h = g.relu(sum)?;
        }
        let features = g.global_avg_pool(h)?;
        let head = match &self.head_params {
            HeadParams::Direct { w, b } => HeadVars::Value(self.linear(g, features, *w, *b)?),
            HeadParams::Gaussian { w_mu, b_mu, w_lv, b_lv } => HeadVars::Gaussian {
                mean: self.linear(g, features, *w_mu, *b_mu)?,
                logvar: self.linear(g, features, *w_lv, *b_lv)?,
            },
            HeadParams::Classification { w, b } => HeadVars::Logits(self.linear(g, features, *w, *b)?),
            HeadParams::Ordinal { w, b1, deltas } => HeadVars::Logits(self.ordinal_logits(g, features, *w, *b1, *deltas)?),
        };
        Ok(Forward { head, features, stats })
    }

    /// Sets the ordinal rank biases so that, before any weight is learnt,
    /// `P(class > j)` equals `rates[j]`. Rates must be non-increasing and
    /// inside (0, 1); neighbouring rates closer than 1e-3 in logit are
    /// spread to keep the steps finite.
    pub fn init_ordinal_biases(&mut self, rates: &[f64]) -> Result<()> {
        let HeadParams::Ordinal { b1, deltas, .. } = self.head_params else {
            return Err(Error::InvalidArgument("rank biases exist only on the ordinal head".into()));
        };
        let ranks = self.n_classes.unwrap_or(2) - 1;
        if rates.len() != ranks {
            return Err(Error::Shape {
                expected: format!("{ranks} rank rates"),
                got: rates.len().to_string(),
            });
        }
        if let Some(p) = rates.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(Error::InvalidArgument(format!("rank rate {p} outside (0, 1)")));
        }
        let logit = |p: f64| (p / (1.0 - p)).ln();
        self.params.get_mut(b1).value = Tensor::from_vec(vec![logit(rates[0])]);
        if let Some(d) = deltas {
            let steps = rates
                .windows(2)
                .map(|w| {
                    let gap = (logit(w[0]) - logit(w[1])).max(1e-3);
                    // Inverse softplus.
                    gap + (-(-gap).exp_m1()).ln()
                })
                .collect();
            self.params.get_mut(d).value = Tensor::from_vec(steps);
        }
        Ok(())
    }

    fn ordinal_logits(&self, g: &mut Graph, features: Var, w: ParamId, b1: ParamId, deltas: Option<ParamId>) -> Result<Var> {
        let wv = g.param(&self.params, w);
        let score = g.matmul(features, wv)?;
        let b1v = g.param(&self.params, b1);
        let Some(deltas) = deltas else {
            return Ok(g.add_bias(score, b1v)?);
        };
        let ranks = self.n_classes.unwrap_or(2) - 1;
        let ones = g.constant(Tensor::full(&[1, ranks], 1.0));
        let spread = g.matmul(score, ones)?;
        let b1_row = g.reshape(b1v, &[1, 1])?;
        let base = g.matmul(b1_row, ones)?;
        let d = g.param(&self.params, deltas);
        let steps = g.softplus(d)?;
        let steps = g.reshape(steps, &[1, ranks - 1])?;
        // upper[i][j] = 1 for i < j, so bias j subtracts the first j steps.
        let mut upper = vec![0.0; (ranks - 1) * ranks];
        for i in 0..ranks - 1 {
            for j in i + 1..ranks {
                upper[i * ranks + j] = 1.0;
            }
        }
        let upper = g.constant(Tensor::new(&[ranks - 1, ranks], upper)?);
        let cum = g.matmul(steps, upper)?;
        let biases = g.sub(base, cum)?;
        let biases = g.reshape(biases, &[ranks])?;
        Ok(g.add_bias(spread, biases)?)
    }

    /// Loss of the head on encoded targets: z-scores for the regression heads,
    /// class numbers `1..=k` (as floats) for the others.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, targets: &[f64]) -> Result<Var> {
        let n = targets.len();
        match fwd.head {
            HeadVars::Value(pred) => mse_loss(g, pred, targets),
            HeadVars::Gaussian { mean, logvar } => {
                let y = g.constant(Tensor::new(&[n, 1], targets.to_vec())?);
                gaussian_nll(g, mean, logvar, y)
            }
            HeadVars::Logits(logits) => {
                let classes = targets.iter().map(|&c| c as usize).collect::<Vec<_>>();
                match self.head {
                    HeadKind::Ordinal => ordinal_bce(g, logits, &classes),
                    _ => cross_entropy(g, logits, &classes),
                }
            }
        }
    }
}

/// Mean squared error against `[N]` targets.
pub fn mse_loss(g: &mut Graph, pred: Var, targets: &[f64]) -> Result<Var> {
    let y = g.constant(Tensor::new(&[targets.len(), 1], targets.to_vec())?);
    let d = g.sub(pred, y)?;
    let sq = g.square(d)?;
    Ok(g.mean(sq)?)
}

/// Mean of `0.5 logvar + (y - mean)^2 / (2 exp(logvar)) + 0.5 ln(2 pi)`.
pub fn gaussian_nll(g: &mut Graph, mean: Var, logvar: Var, y: Var) -> Result<Var> {
    let d = g.sub(y, mean)?;
    let sq = g.square(d)?;
    let neg = g.scale(logvar, -1.0)?;
    let precision = g.exp(neg)?;
    let fit = g.mul(sq, precision)?;
    let total = g.add(logvar, fit)?;
    let half = g.scale(total, 0.5)?;
    let m = g.mean(half)?;
    Ok(g.add_scalar(m, 0.5 * (2.0 * std::f64::consts::PI).ln())?)
}

/// Gaussian negative log-likelihood of one point.
pub fn gaussian_nll_value(mean: f64, logvar: f64, y: f64) -> f64 {
    0.5 * logvar + (y - mean).powi(2) / (2.0 * logvar.exp()) + 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn check_classes(classes: &[usize], k: usize) -> Result<()> {
    match classes.iter().find(|&&c| c == 0 || c > k) {
        Some(c) => Err(Error::InvalidArgument(format!("class {c} outside 1..={k}"))),
        None => Ok(()),
    }
}

/// Softmax cross entropy with classes numbered from 1.
pub fn cross_entropy(g: &mut Graph, logits: Var, classes: &[usize]) -> Result<Var> {
    let (n, k) = (g.shape(logits)[0], g.shape(logits)[1]);
    check_classes(classes, k)?;
    let mut onehot = vec![0.0; n * k];
    for (i, &c) in classes.iter().enumerate() {
        onehot[i * k + c - 1] = 1.0;
    }
    let t = g.constant(Tensor::new(&[n, k], onehot)?);
    let ls = g.log_softmax(logits)?;
    let picked = g.mul(ls, t)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

/// Binary cross entropy summed over the `k - 1` rank outputs, averaged over
/// the batch. Rank `j` is positive when `class > j`.
pub fn ordinal_bce(g: &mut Graph, logits: Var, classes: &[usize]) -> Result<Var> {
    let (n, r) = (g.shape(logits)[0], g.shape(logits)[1]);
    check_classes(classes, r + 1)?;
    let mut t = vec![0.0; n * r];
    for (i, &c) in classes.iter().enumerate() {
        for j in 0..r {
            t[i * r + j] = if c > j + 1 { 1.0 } else { 0.0 };
        }
    }
    let t = g.constant(Tensor::new(&[n, r], t)?);
    let sp = g.softplus(logits)?;
    let tz = g.mul(t, logits)?;
    let per = g.sub(sp, tz)?;
    let s = g.sum(per)?;
    Ok(g.scale(s, 1.0 / n as f64)?)
}
