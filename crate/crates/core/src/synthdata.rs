//! Synthetic labelled corpus: sum-of-Gaussians beat trains whose T-wave
//! amplitude and QT interval depend on the electrolyte concentration, patient
//! timelines with repeated lab draws, and patient-level splits.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{PatientMeta, RawEcg, Sex, N_LEADS, PADDED_LEN, TARGET_FS};
use crate::targets::Electrolyte;

/// Concentrations are clipped below at this fraction of the mean.
pub const FLOOR_FRACTION: f64 = 0.1;
/// Maximum distance between a lab draw and its ECG, minutes.
pub const WINDOW_MINUTES: i64 = 60;
/// Length of the simulated study period, minutes (eight years).
pub const STUDY_MINUTES: i64 = 8 * 365 * 24 * 60;

/// T-wave amplitude in lead II at the population mean concentration, mV.
pub const T_BASE_MV: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub electrolyte: Electrolyte,
    /// Population mean and sd of the true concentration.
    pub mean: f64,
    pub sd: f64,
    /// Lead II T-wave amplitude change per unit concentration, mV.
    pub t_gain: f64,
    /// QT change per unit concentration, seconds.
    pub qt_gain: f64,
    /// Sd of the lab measurement around the true concentration.
    pub label_noise_sd: f64,
    /// Sd of a patient's true concentration between draws.
    pub within_patient_sd: f64,
    /// White noise added to every sample, mV.
    pub ecg_noise_sd: f64,
    pub wander_amplitude: f64,
    pub wander_hz: f64,
    pub powerline_amplitude: f64,
    pub powerline_hz: f64,
    pub n_patients: usize,
    /// Lab draws per patient are uniform on `1..=max_draws`.
    pub max_draws: usize,
    /// Relative sd increase at age 100, ramping linearly from age 18.
    pub age_sd_inflation: f64,
    pub fs: f64,
    pub duration_s: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Defaults for one electrolyte: population moments, a T-wave change of
    /// 0.125 mV and a QT change of -20 ms per population sd, label noise of
    /// 0.3 sd and no ECG noise.
    pub fn new(electrolyte: Electrolyte) -> Self {
        let (mean, sd) = electrolyte.moments();
        Self {
            electrolyte,
            mean,
            sd,
            t_gain: 0.125 / sd,
            qt_gain: -0.02 / sd,
            label_noise_sd: 0.3 * sd,
            within_patient_sd: 0.2 * sd,
            ecg_noise_sd: 0.0,
            wander_amplitude: 0.1,
            wander_hz: 0.3,
            powerline_amplitude: 0.05,
            powerline_hz: 50.0,
            n_patients: 2000,
            max_draws: 3,
            age_sd_inflation: 0.5,
            fs: 500.0,
            duration_s: 10.0,
            seed: 0,
        }
    }

    pub fn potassium() -> Self {
        Self::new(Electrolyte::Potassium)
    }

    /// Removes every ECG dependence on the concentration.
    pub fn without_coupling(mut self) -> Self {
        self.t_gain = 0.0;
        self.qt_gain = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let finite = [
            self.mean,
            self.sd,
            self.t_gain,
            self.qt_gain,
            self.label_noise_sd,
            self.within_patient_sd,
            self.ecg_noise_sd,
            self.wander_amplitude,
            self.wander_hz,
            self.powerline_amplitude,
            self.powerline_hz,
            self.age_sd_inflation,
            self.fs,
            self.duration_s,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("all generator parameters must be finite".into());
        }
        if !(self.mean > 0.0 && self.sd > 0.0) {
            return bad(format!("need mean > 0 and sd > 0, got {} and {}", self.mean, self.sd));
        }
        if self.label_noise_sd < 0.0 || self.within_patient_sd < 0.0 || self.ecg_noise_sd < 0.0 {
            return bad("noise sds must be non-negative".into());
        }
        if self.age_sd_inflation < 0.0 {
            return bad("age_sd_inflation must be non-negative".into());
        }
        if self.n_patients == 0 {
            return bad("n_patients must be at least 1".into());
        }
        if self.max_draws == 0 {
            return bad("max_draws must be at least 1".into());
        }
        if !(self.fs > 0.0 && self.duration_s > 0.0) {
            return bad("fs and duration_s must be positive".into());
        }
        if (self.duration_s * TARGET_FS).round() as usize > PADDED_LEN {
            return bad(format!(
                "{} s at {TARGET_FS} Hz exceeds the padded length of {PADDED_LEN} samples",
                self.duration_s
            ));
        }
        Ok(())
    }

    /// Sd multiplier for a patient of the given age.
    pub fn age_factor(&self, age: f64) -> f64 {
        1.0 + self.age_sd_inflation * ((age - 18.0) / 82.0).clamp(0.0, 1.0)
    }

    /// Expected absolute error of the true concentration as a predictor of
    /// the lab value, the lowest MAE any model can reach on test labels when
    /// the ECG is noise free.
    pub fn bayes_mae(&self) -> f64 {
        (2.0 / PI).sqrt() * self.label_noise_sd
    }
}

fn floor(cfg: &GeneratorConfig) -> f64 {
    FLOOR_FRACTION * cfg.mean
}

fn draw_scaled(cfg: &GeneratorConfig, sd_scale: f64, rng: &mut impl Rng) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    let c = if cfg.electrolyte == Electrolyte::Creatinine {
        let s2 = (1.0 + (cfg.sd / cfg.mean).powi(2)).ln();
        let m = cfg.mean.ln() - s2 / 2.0;
        (m + sd_scale * s2.sqrt() * z).exp()
    } else {
        cfg.mean + sd_scale * cfg.sd * z
    };
    c.max(floor(cfg))
}

/// Population draw: normal with the configured moments (log-normal for
/// creatinine), clipped below at the physiologic floor.
pub fn sample_concentration(cfg: &GeneratorConfig, rng: &mut impl Rng) -> f64 {
    draw_scaled(cfg, 1.0, rng)
}

/// As [`sample_concentration`] with the sd inflated for age.
pub fn sample_concentration_at_age(cfg: &GeneratorConfig, age: f64, rng: &mut impl Rng) -> f64 {
    draw_scaled(cfg, cfg.age_factor(age), rng)
}

/// One Gaussian bump of the beat template.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Lead II amplitude, mV.
    pub amplitude: f64,
    /// Standard deviation, seconds.
    pub width: f64,
    /// Centre relative to the R peak, seconds.
    pub offset: f64,
}

/// Per-lead scale of the P, Q, R, S and T waves (I, II, V1..V6).
const LEAD_FACTORS: [[f64; 5]; N_LEADS] = [
    [0.8, 0.5, 0.7, 0.4, 0.7],
    [1.0, 1.0, 1.0, 1.0, 1.0],
    [0.5, 0.2, 0.3, 3.0, 0.5],
    [0.6, 0.3, 0.6, 2.5, 1.2],
    [0.7, 0.6, 1.0, 1.5, 1.3],
    [0.8, 0.8, 1.4, 1.0, 1.2],
    [0.8, 1.0, 1.3, 0.6, 1.0],
    [0.8, 1.0, 1.1, 0.4, 0.8],
];

/// Patient-specific beat shape, independent of the concentration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Morphology {
    pub heart_rate_bpm: f64,
    /// P, Q, R, S; the T wave is derived from the concentration.
    pub waves: [Wave; 4],
    pub t_width: f64,
    /// Per-lead multipliers of the P, Q, R, S amplitudes.
    pub lead_jitter: [[f64; 4]; N_LEADS],
}

impl Morphology {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut j = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let base = [(0.15, 0.025, -0.16), (-0.1, 0.01, -0.025), (1.0, 0.012, 0.0), (-0.2, 0.012, 0.03)];
        let mut waves = [Wave {
            amplitude: 0.0,
            width: 0.0,
            offset: 0.0,
        }; 4];
        for (w, &(a, s, o)) in waves.iter_mut().zip(&base) {
            *w = Wave {
                amplitude: a * j(0.8, 1.2),
                width: s * j(0.85, 1.15),
                offset: o,
            };
        }
        let heart_rate_bpm = j(50.0, 100.0);
        let t_width = 0.045 * j(0.9, 1.1);
        let mut lead_jitter = [[1.0; 4]; N_LEADS];
        for lead in lead_jitter.iter_mut() {
            for v in lead.iter_mut() {
                *v = j(0.9, 1.1);
            }
        }
        Self {
            heart_rate_bpm,
            waves,
            t_width,
            lead_jitter,
        }
    }

    pub fn rr(&self) -> f64 {
        60.0 / self.heart_rate_bpm
    }

    /// The T wave for concentration `y`: lead II amplitude
    /// `T_BASE_MV + t_gain (y - mean)`, centred at `QT - 0.1 s` after the R
    /// peak with `QT = 0.4 sqrt(RR) + qt_gain (y - mean)`. The centre never
    /// moves closer than three T widths to the S wave, so strong QT
    /// shortening saturates.
    pub fn t_wave(&self, y: f64, cfg: &GeneratorConfig) -> Wave {
        let qt = 0.4 * self.rr().sqrt() + cfg.qt_gain * (y - cfg.mean);
        let earliest = self.waves[3].offset + 3.0 * self.t_width;
        Wave {
            amplitude: T_BASE_MV + cfg.t_gain * (y - cfg.mean),
            width: self.t_width,
            offset: (qt - 0.1).max(earliest),
        }
    }
}

/// The additive parts of a synthetic recording, each `leads x samples`.
#[derive(Clone, Debug)]
pub struct EcgComponents {
    pub clean: Vec<Vec<f64>>,
    pub wander: Vec<Vec<f64>>,
    pub powerline: Vec<Vec<f64>>,
    pub noise: Vec<Vec<f64>>,
}

impl EcgComponents {
    pub fn total(&self) -> Vec<Vec<f64>> {
        (0..self.clean.len())
            .map(|l| {
                (0..self.clean[l].len())
                    .map(|i| self.clean[l][i] + self.wander[l][i] + self.powerline[l][i] + self.noise[l][i])
                    .collect()
            })
            .collect()
    }
}

fn add_gaussian(out: &mut [f64], fs: f64, centre: f64, amplitude: f64, width: f64) {
    let n = out.len() as i64;
    let lo = (((centre - 6.0 * width) * fs).floor() as i64).max(0);
    let hi = (((centre + 6.0 * width) * fs).ceil() as i64).min(n - 1);
    for i in lo..=hi {
        let d = (i as f64 / fs - centre) / width;
        out[i as usize] += amplitude * (-0.5 * d * d).exp();
    }
}

/// Builds the components of one recording at concentration `y`.
pub fn synthesize_components(
    y: f64,
    morph: &Morphology,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<EcgComponents> {
    if !(y > 0.0 && y.is_finite()) {
        return Err(Error::InvalidArgument(format!("concentration must be positive, got {y}")));
    }
    let t = morph.t_wave(y, cfg);
    if morph.waves.iter().any(|w| !(w.width > 0.0)) || !(t.width > 0.0) {
        return Err(Error::InvalidArgument("wave widths must be positive".into()));
    }
    let n = (cfg.duration_s * cfg.fs).round() as usize;
    let rr = morph.rr();
    let mut clean = vec![vec![0.0; n]; N_LEADS];
    let mut r_time = -rng.gen_range(0.0..rr) - rr;
    while r_time < cfg.duration_s + rr {
        for (lead, out) in clean.iter_mut().enumerate() {
            let f = LEAD_FACTORS[lead];
            for (k, w) in morph.waves.iter().enumerate() {
                let a = w.amplitude * f[k] * morph.lead_jitter[lead][k];
                add_gaussian(out, cfg.fs, r_time + w.offset, a, w.width);
            }
            add_gaussian(out, cfg.fs, r_time + t.offset, t.amplitude * f[4], t.width);
        }
        r_time += rr * (1.0 + 0.02 * rng.gen_range(-1.0..1.0));
    }
    let mut sinusoids = |amp: f64, hz: f64| -> Vec<Vec<f64>> {
        (0..N_LEADS)
            .map(|_| {
                let a = amp * rng.gen_range(0.5..1.5);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (0..n).map(|i| a * (2.0 * PI * hz * i as f64 / cfg.fs + phase).sin()).collect()
            })
            .collect()
    };
    let wander = sinusoids(cfg.wander_amplitude, cfg.wander_hz);
    let powerline = sinusoids(cfg.powerline_amplitude, cfg.powerline_hz);
    let noise = (0..N_LEADS)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if cfg.ecg_noise_sd > 0.0 {
                        cfg.ecg_noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut *rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(EcgComponents {
        clean,
        wander,
        powerline,
        noise,
    })
}

/// One 8-lead recording at concentration `y`.
pub fn synthesize_ecg(
    y: f64,
    meta: PatientMeta,
    morph: &Morphology,
    cfg: &GeneratorConfig,
    rng: &mut impl Rng,
) -> Result<RawEcg> {
    let c = synthesize_components(y, morph, cfg, rng)?;
    RawEcg::new(c.total(), cfg.fs, meta)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub lab_timestamp: i64,
    pub ecg_timestamp: i64,
    /// True concentration at the time of the draw.
    pub concentration: f64,
    /// Lab measurement.
    pub observed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: u64,
    pub age: f64,
    pub sex: Sex,
    pub morphology: Morphology,
    /// Chronological; the first draw's ECG is the patient's first ECG.
    pub draws: Vec<Draw>,
}

impl Patient {
    pub fn meta(&self, draw: usize) -> PatientMeta {
        PatientMeta {
            patient_id: self.id,
            age: self.age,
            sex: self.sex,
            timestamp: self.draws[draw].ecg_timestamp,
        }
    }

    /// Median of the patient's lab values.
    pub fn median_label(&self) -> f64 {
        let mut v: Vec<f64> = self.draws.iter().map(|d| d.observed).collect();
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    RandomTest,
    TemporalTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Self::Train, Self::Validation, Self::RandomTest, Self::TemporalTest];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Validation => "validation",
            Self::RandomTest => "random-test",
            Self::TemporalTest => "temporal-test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

/// A labelled recording, identified by patient and draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRef {
    pub record_id: u64,
    pub patient_id: u64,
    pub draw: usize,
    pub timestamp: i64,
    pub lab_timestamp: i64,
    /// Label used for this split.
    pub label: f64,
    /// True concentration behind the recording.
    pub concentration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub ecg: RawEcg,
    pub y: f64,
    pub electrolyte: Electrolyte,
    pub patient_id: u64,
    pub timestamp: i64,
    pub lab_timestamp: i64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplits {
    pub train: Vec<ExampleRef>,
    pub validation: Vec<ExampleRef>,
    pub random_test: Vec<ExampleRef>,
    pub temporal_test: Vec<ExampleRef>,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &[ExampleRef] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::RandomTest => &self.random_test,
            Split::TemporalTest => &self.temporal_test,
        }
    }
}

/// A generated corpus. Recordings are synthesised on demand from
/// per-record random streams, so the corpus itself stays small.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: GeneratorConfig,
    pub patients: Vec<Patient>,
    pub splits: DatasetSplits,
    /// See [`GeneratorConfig::bayes_mae`].
    pub bayes_mae: f64,
}

const RECORD_STREAM_KEY: u64 = 0x5851_f42d_4c95_7f2d;

fn patient_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

fn record_rng(seed: u64, record_id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ RECORD_STREAM_KEY);
    r.set_stream(record_id);
    r
}

fn sample_patient(cfg: &GeneratorConfig, id: u64) -> Patient {
    let mut rng = patient_rng(cfg.seed, id);
    let z: f64 = StandardNormal.sample(&mut rng);
    let age = (61.0 + 20.0 * z).clamp(18.0, 100.0);
    let sex = if rng.gen_bool(0.494) { Sex::Male } else { Sex::Female };
    let morphology = Morphology::sample(&mut rng);
    let baseline = sample_concentration_at_age(cfg, age, &mut rng);
    let n_draws = rng.gen_range(1..=cfg.max_draws);
    let mut lab = rng.gen_range(0..STUDY_MINUTES);
    let mut draws = Vec::with_capacity(n_draws);
    for k in 0..n_draws {
        if k > 0 {
            // Far enough apart that ECG order follows draw order.
            lab += rng.gen_range(2 * WINDOW_MINUTES + 1..=30 * 24 * 60);
        }
        let dz: f64 = StandardNormal.sample(&mut rng);
        let concentration = (baseline + cfg.within_patient_sd * dz).max(floor(cfg));
        let ez: f64 = StandardNormal.sample(&mut rng);
        draws.push(Draw {
            lab_timestamp: lab,
            ecg_timestamp: lab + rng.gen_range(-WINDOW_MINUTES..=WINDOW_MINUTES),
            concentration,
            observed: concentration + cfg.label_noise_sd * ez,
        });
    }
    Patient {
        id,
        age,
        sex,
        morphology,
        draws,
    }
}

fn shift(p: &mut Patient, minutes: i64) {
    for d in &mut p.draws {
        d.lab_timestamp += minutes;
        d.ecg_timestamp += minutes;
    }
}

/// Draws a full corpus: patients, timelines and the four splits.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Corpus> {
    cfg.validate()?;
    let n = cfg.n_patients;
    let n_temporal = (0.1 * n as f64).round() as usize;
    let n_test = (0.2 * n as f64).round() as usize;
    let n_dev = n - n_temporal - n_test;
    let n_val = (0.15 * n_dev as f64).round() as usize;
    if n_temporal == 0 || n_test == 0 || n_val == 0 || n_dev == n_val {
        return Err(Error::InsufficientData(format!("{n} patients cannot fill all four splits")));
    }

    let mut patients: Vec<Patient> = (0..n as u64).map(|id| sample_patient(cfg, id)).collect();

    // Order by first ECG and make first-ECG times distinct.
    patients.sort_by_key(|p| (p.draws[0].ecg_timestamp, p.id));
    for i in 1..n {
        let prev = patients[i - 1].draws[0].ecg_timestamp;
        let cur = patients[i].draws[0].ecg_timestamp;
        if cur <= prev {
            shift(&mut patients[i], prev + 1 - cur);
        }
    }

    // The last tenth by first ECG is the temporal test set; everyone else
    // loses the draws whose ECG falls at or after its start.
    let cutoff = patients[n - n_temporal].draws[0].ecg_timestamp;
    for p in &mut patients[..n - n_temporal] {
        p.draws.retain(|d| d.ecg_timestamp < cutoff);
    }

    let mut split_rng = patient_rng(cfg.seed, u64::MAX);
    let mut early: Vec<usize> = (0..n - n_temporal).collect();
    for i in (1..early.len()).rev() {
        early.swap(i, split_rng.gen_range(0..=i));
    }
    let (test_idx, dev_idx) = early.split_at(n_test);
    let (val_idx, train_idx) = dev_idx.split_at(n_val);

    let first = |p: &Patient| {
        let d = &p.draws[0];
        ExampleRef {
            record_id: record_id(p.id, 0),
            patient_id: p.id,
            draw: 0,
            timestamp: d.ecg_timestamp,
            lab_timestamp: d.lab_timestamp,
            label: d.observed,
            concentration: d.concentration,
        }
    };
    let by_id = |idx: &[usize]| {
        let mut v: Vec<usize> = idx.to_vec();
        v.sort_by_key(|&i| patients[i].id);
        v
    };
    let train_idx = by_id(train_idx);
    let val_idx = by_id(val_idx);
    let test_idx = by_id(test_idx);
    let temporal_idx = by_id(&(n - n_temporal..n).collect::<Vec<_>>());

    let mut train = Vec::new();
    for &i in &train_idx {
        let p = &patients[i];
        let label = p.median_label();
        for (k, d) in p.draws.iter().enumerate() {
            train.push(ExampleRef {
                record_id: record_id(p.id, k),
                patient_id: p.id,
                draw: k,
                timestamp: d.ecg_timestamp,
                lab_timestamp: d.lab_timestamp,
                label,
                concentration: d.concentration,
            });
        }
    }
    let splits = DatasetSplits {
        train,
        validation: val_idx.iter().map(|&i| first(&patients[i])).collect(),
        random_test: test_idx.iter().map(|&i| first(&patients[i])).collect(),
        temporal_test: temporal_idx.iter().map(|&i| first(&patients[i])).collect(),
    };
    patients.sort_by_key(|p| p.id);
    Ok(Corpus {
        config: cfg.clone(),
        patients,
        splits,
        bayes_mae: cfg.bayes_mae(),
    })
}

pub fn record_id(patient_id: u64, draw: usize) -> u64 {
    patient_id * 4 + draw as u64
}

impl Corpus {
    pub fn patient(&self, id: u64) -> Result<&Patient> {
        self.patients
            .get(id as usize)
            .filter(|p| p.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown patient {id}")))
    }

    pub fn split(&self, split: Split) -> &[ExampleRef] {
        self.splits.get(split)
    }

    /// Synthesises the recording behind an example; deterministic per record.
    pub fn synthesize(&self, ex: &ExampleRef) -> Result<RawEcg> {
        let p = self.patient(ex.patient_id)?;
        let mut rng = record_rng(self.config.seed, ex.record_id);
        synthesize_ecg(ex.concentration, p.meta(ex.draw), &p.morphology, &self.config, &mut rng)
    }

    /// As [`Corpus::synthesize`], split into components.
    pub fn components(&self, ex: &ExampleRef) -> Result<EcgComponents> {
        let p = self.patient(ex.patient_id)?;
        let mut rng = record_rng(self.config.seed, ex.record_id);
        synthesize_components(ex.concentration, &p.morphology, &self.config, &mut rng)
    }

    pub fn example(&self, ex: &ExampleRef) -> Result<LabeledExample> {
        Ok(LabeledExample {
            ecg: self.synthesize(ex)?,
            y: ex.label,
            electrolyte: self.config.electrolyte,
            patient_id: ex.patient_id,
            timestamp: ex.timestamp,
            lab_timestamp: ex.lab_timestamp,
        })
    }

    pub fn meta(&self, ex: &ExampleRef) -> Result<PatientMeta> {
        Ok(self.patient(ex.patient_id)?.meta(ex.draw))
    }

    pub fn labels(&self, split: Split) -> Vec<f64> {
        self.split(split).iter().map(|e| e.label).collect()
    }
}

/// Relative path of a record file inside a corpus directory.
pub fn record_path(record_id: u64) -> String {
    format!("records/{record_id:07}.ecg.bin")
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` (configuration, patients, split membership,
/// labels) and one binary signal file per referenced record.
pub fn write_corpus(corpus: &Corpus, dir: &std::path::Path) -> Result<()> {
    for split in Split::ALL {
        for ex in corpus.split(split) {
            let path = dir.join(record_path(ex.record_id));
            if !path.exists() {
                crate::signal::format::save(&corpus.synthesize(ex)?, &path)?;
            }
        }
    }
    let json = serde_json::to_vec_pretty(corpus).map_err(|e| Error::format("manifest", e.to_string()))?;
    crate::io::atomic_write(&dir.join(MANIFEST_FILE), &json)
}

pub fn read_manifest(dir: &std::path::Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format("manifest", e.to_string()))
}
