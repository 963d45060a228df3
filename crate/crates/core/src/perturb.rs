//! Out-of-distribution input perturbations: additive noise at a fixed SNR
//! and contiguous masking.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::signal::{ProcessedEcg, PADDED_LEN};

/// SNR values at or above this are treated as noiseless.
pub const SNR_INFINITE: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct Noisy {
    pub ecg: ProcessedEcg,
    /// Set when the input had zero power, so no noise level is defined and the
    /// input was returned unchanged.
    pub zero_power: bool,
}

/// Adds white Gaussian noise with power `mean_power(ecg) / snr`.
pub fn add_noise_snr<R: Rng + ?Sized>(ecg: &ProcessedEcg, snr: f64, rng: &mut R) -> Result<Noisy> {
    if !(snr > 0.0) {
        return Err(Error::InvalidArgument(format!("snr must be positive, got {snr}")));
    }
    let power = ecg.mean_power();
    if power == 0.0 {
        return Ok(Noisy {
            ecg: ecg.clone(),
            zero_power: true,
        });
    }
    let mut out = ecg.clone();
    if snr >= SNR_INFINITE {
        return Ok(Noisy { ecg: out, zero_power: false });
    }
    let normal = Normal::new(0.0, (power / snr).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for x in out.as_flat_mut() {
        *x += normal.sample(rng);
    }
    Ok(Noisy { ecg: out, zero_power: false })
}

/// Number of samples zeroed by [`mask`] for proportion `p`.
pub fn mask_len(p: f64) -> usize {
    (p * PADDED_LEN as f64).round() as usize
}

/// Zeroes one contiguous segment of `round(p * 4096)` samples, at the same
/// position in every lead.
pub fn mask<R: Rng + ?Sized>(ecg: &ProcessedEcg, p: f64, rng: &mut R) -> Result<ProcessedEcg> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("mask proportion must lie in [0, 1], got {p}")));
    }
    let len = mask_len(p);
    let mut out = ecg.clone();
    if len == 0 {
        return Ok(out);
    }
    let start = rng.gen_range(0..=PADDED_LEN - len);
    for lead in out.as_flat_mut().chunks_mut(PADDED_LEN) {
        lead[start..start + len].fill(0.0);
    }
    Ok(out)
}
