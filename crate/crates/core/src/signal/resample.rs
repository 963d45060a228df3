//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 8.6;
/// Kernel taps per polyphase branch.
pub const TAPS_PER_PHASE: usize = 64;

const MAX_DENOMINATOR: u64 = 4096;

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= (half / k as f64).powi(2);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Best rational approximation `up / down` of `ratio` by continued fractions.
fn rational(ratio: f64) -> Option<(u64, u64)> {
    let (mut h0, mut h1) = (0u64, 1u64);
    let (mut k0, mut k1) = (1u64, 0u64);
    let mut x = ratio;
    for _ in 0..64 {
        let a = x.floor();
        if a > u32::MAX as f64 {
            return None;
        }
        let a = a as u64;
        let h2 = a.checked_mul(h1)?.checked_add(h0)?;
        let k2 = a.checked_mul(k1)?.checked_add(k0)?;
        if k2 > MAX_DENOMINATOR {
            return None;
        }
        (h0, h1, k0, k1) = (h1, h2, k1, k2);
        if ((h1 as f64 / k1 as f64) - ratio).abs() <= 1e-12 * ratio {
            return Some((h1, k1));
        }
        let frac = x - a as f64;
        if frac < 1e-15 {
            break;
        }
        x = 1.0 / frac;
    }
    ((h1 as f64 / k1 as f64 - ratio).abs() <= 1e-12 * ratio).then_some((h1, k1))
}

/// Polyphase resampler for one fixed rate pair.
pub struct Resampler {
    up: u64,
    down: u64,
    /// `phases[p][j]` weights input `floor(t) + j - (TAPS_PER_PHASE/2 - 1)`
    /// for an output whose input-time fraction is `p / up`.
    phases: Vec<Vec<f64>>,
}

impl Resampler {
    pub fn new(fs_in: f64, fs_out: f64) -> Result<Self> {
        if !(fs_in > 0.0 && fs_out > 0.0 && fs_in.is_finite() && fs_out.is_finite()) {
            return Err(Error::RateRatio { from: fs_in, to: fs_out });
        }
        let (up, down) = rational(fs_out / fs_in).ok_or(Error::RateRatio { from: fs_in, to: fs_out })?;
        // Cutoff at the lower of the two Nyquist frequencies, in input-sample units.
        let rho = (up as f64 / down as f64).min(1.0);
        let half = (TAPS_PER_PHASE / 2) as f64;
        let norm = bessel_i0(KAISER_BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                (0..TAPS_PER_PHASE)
                    .map(|j| {
                        let offset = j as f64 - (half - 1.0);
                        let delta = frac - offset;
                        let r = delta / half;
                        if r.abs() >= 1.0 {
                            0.0
                        } else {
                            rho * sinc(rho * delta) * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / norm
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { up, down, phases })
    }

    pub fn ratio(&self) -> (u64, u64) {
        (self.up, self.down)
    }

    pub fn output_len(&self, n_in: usize) -> usize {
        ((n_in as f64) * self.up as f64 / self.down as f64).round() as usize
    }

    /// Resamples one channel. Samples beyond the ends are taken from an odd
    /// (point-symmetric) extension about the end samples.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len() as i64;
        if self.up == self.down {
            return x.to_vec();
        }
        let at = |i: i64| -> f64 {
            if i < 0 {
                2.0 * x[0] - x[(-i).min(n - 1) as usize]
            } else if i >= n {
                2.0 * x[(n - 1) as usize] - x[(2 * (n - 1) - i).max(0) as usize]
            } else {
                x[i as usize]
            }
        };
        let first_offset = TAPS_PER_PHASE as i64 / 2 - 1;
        (0..self.output_len(x.len()) as u64)
            .map(|m| {
                let num = m * self.down;
                let base = (num / self.up) as i64;
                let phase = &self.phases[(num % self.up) as usize];
                phase
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * at(base + j as i64 - first_offset))
                    .sum()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_reduction() {
        assert_eq!(rational(400.0 / 500.0), Some((4, 5)));
        assert_eq!(rational(400.0 / 1000.0), Some((2, 5)));
        assert_eq!(rational(400.0 / 257.0), Some((400, 257)));
        assert_eq!(rational(1.0), Some((1, 1)));
    }

    #[test]
    fn i0_reference() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        // Reference values from scipy.special.i0.
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(8.6) - 750.461_159_563_165_9).abs() < 1e-9);
    }

    #[test]
    fn phase_kernels_have_unit_dc_gain() {
        let r = Resampler::new(500.0, 400.0).unwrap();
        for p in &r.phases {
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() < 1e-3, "{s}");
        }
    }
}
