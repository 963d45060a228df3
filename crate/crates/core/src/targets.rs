//! Target codecs: z-normalisation, interval discretisation, ordinal
//! encoding and the class to concentration mapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Electrolyte {
    Potassium,
    Calcium,
    Sodium,
    Creatinine,
}

impl Electrolyte {
    pub const ALL: [Electrolyte; 4] = [Self::Potassium, Self::Calcium, Self::Sodium, Self::Creatinine];

    /// Population mean and sd of the concentration.
    pub fn moments(self) -> (f64, f64) {
        match self {
            Self::Potassium => (3.99, 0.50),
            Self::Calcium => (2.29, 0.13),
            Self::Sodium => (138.93, 3.82),
            Self::Creatinine => (90.55, 71.00),
        }
    }

    /// Clinical hypo/hyper thresholds. Creatinine has none.
    pub fn clinical_thresholds(self) -> Option<(f64, f64)> {
        match self {
            Self::Potassium => Some((3.5, 5.5)),
            Self::Calcium => Some((2.0, 2.75)),
            Self::Sodium => Some((130.0, 150.0)),
            Self::Creatinine => None,
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Self::Creatinine => "umol/l",
            _ => "mmol/l",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Potassium => "potassium",
            Self::Calcium => "calcium",
            Self::Sodium => "sodium",
            Self::Creatinine => "creatinine",
        }
    }
}

impl std::str::FromStr for Electrolyte {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown electrolyte `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZNormalizer {
    pub mean: f64,
    pub sd: f64,
}

impl ZNormalizer {
    pub fn new(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(Error::InvalidArgument(format!("normalizer needs finite mean and sd > 0, got {mean}, {sd}")));
        }
        Ok(Self { mean, sd })
    }

    /// Mean and population sd of the training targets.
    pub fn fit(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::InsufficientData("no targets to fit a normalizer".into()));
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self::new(mean, var.sqrt())
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.sd + self.mean
    }

    /// Maps a variance on the z-scale back to raw units.
    pub fn invert_variance(&self, v: f64) -> f64 {
        v * self.sd * self.sd
    }
}

/// Which side of the clinical range a binary task separates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinaryTask {
    Hypo,
    Hyper,
}

/// Class bounds. `k = 2` yields the hypo and hyper thresholds, each of
/// which defines its own two-class task; `k >= 3` yields `k - 1` bounds
/// evenly spaced from `mu - 2 sigma` to `mu + 2 sigma` inclusive.
pub fn make_bounds(k: usize, mu: f64, sigma: f64, electrolyte: Electrolyte) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {k}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let (lo, hi) = (mu - 2.0 * sigma, mu + 2.0 * sigma);
    if k == 2 {
        let (a, b) = electrolyte.clinical_thresholds().unwrap_or((lo, hi));
        return Ok(vec![a, b]);
    }
    let step = (hi - lo) / (k - 2) as f64;
    Ok((0..k - 1).map(|i| if i == k - 2 { hi } else { lo + step * i as f64 }).collect())
}

/// Left-closed intervals with open extremes; classes are numbered `1..=k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discretizer {
    bounds: Vec<f64>,
    /// Training sd of the concentration, used for the empty-class fallback.
    sigma: f64,
    /// Empirical training means of the two open-ended classes.
    lower_mean: Option<f64>,
    upper_mean: Option<f64>,
}

impl Discretizer {
    pub fn new(bounds: Vec<f64>, sigma: f64) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::InvalidArgument("discretizer needs at least one bound".into()));
        }
        if bounds.iter().any(|b| !b.is_finite()) || bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!("bounds must be finite and strictly ascending: {bounds:?}")));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self {
            bounds,
            sigma,
            lower_mean: None,
            upper_mean: None,
        })
    }

    /// Discretizer for `k >= 3` classes fitted on training targets.
    pub fn fit(k: usize, train: &[f64], electrolyte: Electrolyte) -> Result<Self> {
        if k < 3 {
            return Err(Error::InvalidArgument("two-class problems use Discretizer::fit_binary".into()));
        }
        let norm = ZNormalizer::fit(train)?;
        let mut d = Self::new(make_bounds(k, norm.mean, norm.sd, electrolyte)?, norm.sd)?;
        d.record_means(train)?;
        Ok(d)
    }

    /// Two-class discretizer for one side of the clinical range.
    pub fn fit_binary(task: BinaryTask, train: &[f64], electrolyte: Electrolyte) -> Result<Self> {
        let norm = ZNormalizer::fit(train)?;
        let pair = make_bounds(2, norm.mean, norm.sd, electrolyte)?;
        let bound = match task {
            BinaryTask::Hypo => pair[0],
            BinaryTask::Hyper => pair[1],
        };
        let mut d = Self::new(vec![bound], norm.sd)?;
        d.record_means(train)?;
        Ok(d)
    }

    /// Stores the empirical means of the open-ended classes.
    pub fn record_means(&mut self, train: &[f64]) -> Result<()> {
        let k = self.k();
        let mut sums = [(0.0, 0usize); 2];
        for &y in train {
            match self.discretize(y)? {
                1 => {
                    sums[0].0 += y;
                    sums[0].1 += 1;
                }
                c if c == k => {
                    sums[1].0 += y;
                    sums[1].1 += 1;
                }
                _ => {}
            }
        }
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        self.lower_mean = mean(sums[0]);
        self.upper_mean = mean(sums[1]);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.bounds.len() + 1
    }

    pub fn bounds(&self) -> &[f64] {
        &self.bounds
    }

    /// Class `c` with `bounds[c-2] <= y < bounds[c-1]`.
    pub fn discretize(&self, y: f64) -> Result<usize> {
        if !y.is_finite() {
            return Err(Error::InvalidArgument(format!("cannot discretize {y}")));
        }
        Ok(1 + self.bounds.partition_point(|&b| b <= y))
    }

    /// Representative concentration of a class: the midpoint for interior
    /// classes, the training mean for the open-ended ones, or the nearest
    /// bound moved outward by `sigma / 2` when no training target fell there.
    pub fn class_to_concentration(&self, class: usize) -> Result<f64> {
        let k = self.k();
        if class == 0 || class > k {
            return Err(Error::InvalidArgument(format!("class {class} outside 1..={k}")));
        }
        Ok(if class == 1 {
            self.lower_mean.unwrap_or(self.bounds[0] - self.sigma / 2.0)
        } else if class == k {
            self.upper_mean.unwrap_or(self.bounds[k - 2] + self.sigma / 2.0)
        } else {
            0.5 * (self.bounds[class - 2] + self.bounds[class - 1])
        })
    }
}

/// Ordinal targets `t_j = 1[class > j]` for `j = 1..k-1`.
pub fn ordinal_encode(class: usize, k: usize) -> Result<Vec<f64>> {
    if class == 0 || class > k {
        return Err(Error::InvalidArgument(format!("class {class} outside 1..={k}")));
    }
    Ok((1..k).map(|j| if class > j { 1.0 } else { 0.0 }).collect())
}

/// `1 + sum_j 1[p_j > 0.5]`.
pub fn ordinal_decode(probs: &[f64]) -> Result<usize> {
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("rank probability {p} outside [0, 1]")));
    }
    Ok(1 + probs.iter().filter(|&&p| p > 0.5).count())
}

/// The full target transformation attached to a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetCodec {
    pub electrolyte: Electrolyte,
    pub normalizer: ZNormalizer,
    pub discretizer: Option<Discretizer>,
}

impl TargetCodec {
    pub fn regression(electrolyte: Electrolyte, train: &[f64]) -> Result<Self> {
        Ok(Self {
            electrolyte,
            normalizer: ZNormalizer::fit(train)?,
            discretizer: None,
        })
    }

    pub fn with_discretizer(mut self, d: Discretizer) -> Self {
        self.discretizer = Some(d);
        self
    }

    pub fn k(&self) -> Option<usize> {
        self.discretizer.as_ref().map(Discretizer::k)
    }
}
