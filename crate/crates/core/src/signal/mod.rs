//! ECG records and the preprocessing chain: resample to 400 Hz, zero-pad
//! to 4096 samples, zero-phase elliptic high-pass, zero-phase 50 Hz notch.

mod elliptic;
mod filter;
pub mod format;
mod resample;

use serde::{Deserialize, Serialize};

pub use elliptic::{ellipj, ellipk};
pub use filter::{Biquad, IirFilterSpec, SosFilter};
pub use resample::{Resampler, KAISER_BETA, TAPS_PER_PHASE};

use crate::error::{Error, Result};

pub const N_LEADS: usize = 8;
pub const TARGET_FS: f64 = 400.0;
pub const PADDED_LEN: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
}

/// Patient metadata carried alongside each record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    pub patient_id: u64,
    pub age: f64,
    pub sex: Sex,
    /// Acquisition time in minutes since the corpus epoch.
    pub timestamp: i64,
}

impl Default for PatientMeta {
    fn default() -> Self {
        Self {
            patient_id: 0,
            age: 60.0,
            sex: Sex::Female,
            timestamp: 0,
        }
    }
}

/// An 8-lead recording at an arbitrary sampling rate, in mV.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEcg {
    leads: Vec<Vec<f64>>,
    fs: f64,
    pub meta: PatientMeta,
}

impl RawEcg {
    pub fn new(leads: Vec<Vec<f64>>, fs: f64, meta: PatientMeta) -> Result<Self> {
        if leads.len() != N_LEADS {
            return Err(Error::InvalidSignal(format!("expected {N_LEADS} leads, got {}", leads.len())));
        }
        let n = leads[0].len();
        if n == 0 {
            return Err(Error::InvalidSignal("empty signal".into()));
        }
        if leads.iter().any(|l| l.len() != n) {
            return Err(Error::InvalidSignal("leads differ in length".into()));
        }
        if leads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal("non-finite sample".into()));
        }
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::InvalidSignal(format!("sampling rate must be positive, got {fs}")));
        }
        Ok(Self { leads, fs, meta })
    }

    pub fn leads(&self) -> &[Vec<f64>] {
        &self.leads
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    /// Samples per lead.
    pub fn len(&self) -> usize {
        self.leads[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn map_leads(&self, fs: f64, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let leads = self.leads.iter().map(|l| f(l)).collect::<Result<Vec<_>>>()?;
        Self::new(leads, fs, self.meta.clone())
    }
}

/// Preprocessed model input: 8 leads x 4096 samples at 400 Hz, lead-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedEcg {
    data: Vec<f64>,
    pub meta: PatientMeta,
}

impl ProcessedEcg {
    pub const LEN: usize = N_LEADS * PADDED_LEN;

    pub fn from_flat(data: Vec<f64>, meta: PatientMeta) -> Result<Self> {
        if data.len() != Self::LEN {
            return Err(Error::Shape {
                expected: format!("{N_LEADS} x {PADDED_LEN}"),
                got: format!("{} values", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSignal("non-finite sample".into()));
        }
        Ok(Self { data, meta })
    }

    pub fn zeros(meta: PatientMeta) -> Self {
        Self {
            data: vec![0.0; Self::LEN],
            meta,
        }
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.data[i * PADDED_LEN..(i + 1) * PADDED_LEN]
    }

    /// All leads concatenated, the flattening used for PCA.
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    /// Mean squared sample over all leads.
    pub fn mean_power(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.data.len() as f64
    }
}

pub fn resample(raw: &RawEcg, target_fs: f64) -> Result<RawEcg> {
    if !(target_fs > 0.0) {
        return Err(Error::InvalidArgument(format!("target rate must be positive, got {target_fs}")));
    }
    if raw.fs() == target_fs {
        return Ok(raw.clone());
    }
    let r = Resampler::new(raw.fs(), target_fs)?;
    if r.output_len(raw.len()) == 0 {
        return Err(Error::InvalidSignal("resampled signal would be empty".into()));
    }
    raw.map_leads(target_fs, |l| Ok(r.apply(l)))
}

/// Appends zeros to every lead up to `n` samples; longer inputs are rejected.
pub fn pad_to_length(sig: &RawEcg, n: usize) -> Result<RawEcg> {
    if sig.len() > n {
        return Err(Error::TooLong { len: sig.len(), max: n });
    }
    sig.map_leads(sig.fs(), |l| {
        let mut v = l.to_vec();
        v.resize(n, 0.0);
        Ok(v)
    })
}

/// Zero-phase application of a designed filter to every lead.
pub fn apply_zero_phase(sig: &RawEcg, spec: &IirFilterSpec) -> Result<RawEcg> {
    let filter = spec.design(sig.fs())?;
    sig.map_leads(sig.fs(), |l| filter.filtfilt(l))
}

pub fn highpass_elliptic(sig: &RawEcg, spec: &IirFilterSpec) -> Result<RawEcg> {
    if !matches!(spec, IirFilterSpec::EllipticHighpass { .. }) {
        return Err(Error::InvalidFilter("expected an elliptic high-pass spec".into()));
    }
    apply_zero_phase(sig, spec)
}

pub fn notch(sig: &RawEcg, spec: &IirFilterSpec) -> Result<RawEcg> {
    if !matches!(spec, IirFilterSpec::Notch { .. }) {
        return Err(Error::InvalidFilter("expected a notch spec".into()));
    }
    apply_zero_phase(sig, spec)
}

/// Preprocessing settings; the defaults reproduce the standard chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub target_fs: f64,
    pub length: usize,
    pub highpass: IirFilterSpec,
    pub notch: IirFilterSpec,
    highpass_sos: SosFilter,
    notch_sos: SosFilter,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self::new(IirFilterSpec::highpass(), IirFilterSpec::notch()).expect("default filters are valid")
    }
}

impl Preprocessor {
    pub fn new(highpass: IirFilterSpec, notch: IirFilterSpec) -> Result<Self> {
        Ok(Self {
            target_fs: TARGET_FS,
            length: PADDED_LEN,
            highpass_sos: highpass.design(TARGET_FS)?,
            notch_sos: notch.design(TARGET_FS)?,
            highpass,
            notch,
        })
    }

    /// resample -> pad -> high-pass -> notch, per lead.
    pub fn run(&self, raw: &RawEcg) -> Result<ProcessedEcg> {
        let resampled = resample(raw, self.target_fs)?;
        let padded = pad_to_length(&resampled, self.length)?;
        let mut data = Vec::with_capacity(ProcessedEcg::LEN);
        for lead in padded.leads() {
            let hp = self.highpass_sos.filtfilt(lead)?;
            data.extend(self.notch_sos.filtfilt(&hp)?);
        }
        ProcessedEcg::from_flat(data, raw.meta.clone())
    }
}

/// Runs the default preprocessing chain.
pub fn preprocess(raw: &RawEcg) -> Result<ProcessedEcg> {
    Preprocessor::default().run(raw)
}
