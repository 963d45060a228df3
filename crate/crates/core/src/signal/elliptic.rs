//! Elliptic (Cauer) analog low-pass prototype and the special functions it
//! needs: complete elliptic integrals, Jacobi elliptic functions and the
//! degree equation.

use std::f64::consts::PI;

use nalgebra::Complex;

/// Zeros, poles and gain of a continuous-time transfer function.
#[derive(Clone, Debug)]
pub struct Zpk {
    pub zeros: Vec<Complex<f64>>,
    pub poles: Vec<Complex<f64>>,
    pub gain: f64,
}

fn agm(mut a: f64, mut b: f64) -> f64 {
    for _ in 0..64 {
        if (a - b).abs() <= f64::EPSILON * a {
            break;
        }
        let next = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = next;
    }
    a
}

/// Complete elliptic integral of the first kind `K(m)`, parameter `m = k²`.
pub fn ellipk(m: f64) -> f64 {
    ellipk_complement(1.0 - m)
}

/// `K(1 - mc)`, accurate when `mc` is tiny.
pub fn ellipk_complement(mc: f64) -> f64 {
    PI / (2.0 * agm(1.0, mc.sqrt()))
}

/// Jacobi elliptic functions `(sn, cn, dn)` of `u` with parameter `m`, by
/// the descending arithmetic-geometric mean.
pub fn ellipj(u: f64, m: f64) -> (f64, f64, f64) {
    if m < 1e-12 {
        return (u.sin(), u.cos(), 1.0);
    }
    if m > 1.0 - 1e-12 {
        let sech = 1.0 / u.cosh();
        return (u.tanh(), sech, sech);
    }
    let mut a = vec![1.0];
    let mut c = vec![m.sqrt()];
    let mut b = (1.0 - m).sqrt();
    while c.last().unwrap().abs() > f64::EPSILON && a.len() < 16 {
        let (ai, bi) = (*a.last().unwrap(), b);
        a.push(0.5 * (ai + bi));
        c.push(0.5 * (ai - bi));
        b = (ai * bi).sqrt();
    }
    let n = a.len() - 1;
    let mut phi = (1u64 << n) as f64 * a[n] * u;
    let mut prev = phi;
    for i in (1..=n).rev() {
        prev = phi;
        phi = 0.5 * (phi + (c[i] / a[i] * phi.sin()).asin());
    }
    let sn = phi.sin();
    let cn = phi.cos();
    let dn = cn / (prev - phi).cos();
    (sn, cn, dn)
}

/// Solves the degree equation `K'(m)/K(m) = n K'(m1)/K(m1)` for `m` via
/// the nome series.
fn ellipdeg(n: usize, m1: f64) -> f64 {
    const TERMS: i32 = 7;
    let q1 = (-PI * ellipk(1.0 - m1) / ellipk(m1)).exp();
    let q = q1.powf(1.0 / n as f64);
    let num: f64 = (0..=TERMS).map(|i| q.powi(i * (i + 1))).sum();
    let den: f64 = 1.0 + 2.0 * (1..=TERMS + 1).map(|i| q.powi(i * i)).sum::<f64>();
    16.0 * q * (num / den).powi(4)
}

/// Imaginary part of the inverse of `sn` at the purely imaginary argument
/// `i·w`, i.e. the real solution `v` of `sc(v, 1 - m) = w`, using Landen
/// transformations.
fn arc_jac_sc1(w: f64, m: f64) -> f64 {
    let complement = |kx: f64| ((1.0 - kx) * (1.0 + kx)).sqrt();
    let mut ks = vec![m.sqrt()];
    while *ks.last().unwrap() != 0.0 && ks.len() < 32 {
        let k = *ks.last().unwrap();
        let kp = complement(k);
        ks.push((1.0 - kp) / (1.0 + kp));
    }
    let big_k: f64 = ks[1..].iter().map(|k| 1.0 + k).product::<f64>() * PI / 2.0;
    // w stays purely imaginary through the recursion; track its magnitude.
    let mut t = w;
    for pair in ks.windows(2) {
        let (kn, knext) = (pair[0], pair[1]);
        t = 2.0 * t / ((1.0 + knext) * (1.0 + (1.0 + (kn * t).powi(2)).sqrt()));
    }
    big_k * 2.0 / PI * t.asinh()
}

/// Analog elliptic low-pass prototype with unit passband edge, `rp` dB
/// passband ripple and `rs` dB stopband attenuation.
pub fn ellipap(order: usize, rp: f64, rs: f64) -> Zpk {
    let eps_sq = 10f64.powf(0.1 * rp) - 1.0;
    if order == 1 {
        let p = -(1.0 / eps_sq).sqrt();
        return Zpk {
            zeros: vec![],
            poles: vec![Complex::new(p, 0.0)],
            gain: -p,
        };
    }
    let eps = eps_sq.sqrt();
    let ck1_sq = eps_sq / (10f64.powf(0.1 * rs) - 1.0);
    let k1 = ellipk(ck1_sq);
    let m = ellipdeg(order, ck1_sq);
    let capk = ellipk(m);

    let js: Vec<usize> = ((1 - order % 2)..order).step_by(2).collect();
    let sncndn: Vec<(f64, f64, f64)> = js
        .iter()
        .map(|&j| ellipj(j as f64 * capk / order as f64, m))
        .collect();

    let mut zeros = Vec::new();
    for &(s, _, _) in &sncndn {
        if s.abs() > f64::EPSILON {
            zeros.push(Complex::new(0.0, 1.0 / (m.sqrt() * s)));
        }
    }
    let conj: Vec<_> = zeros.iter().map(|z| z.conj()).collect();
    zeros.extend(conj);

    let r = arc_jac_sc1(1.0 / eps, ck1_sq);
    let v0 = capk * r / (order as f64 * k1);
    let (sv, cv, dv) = ellipj(v0, 1.0 - m);
    let mut poles: Vec<Complex<f64>> = sncndn
        .iter()
        .map(|&(s, c, d)| {
            let den = 1.0 - (d * sv).powi(2);
            -Complex::new(c * d * sv * cv, s * dv) / den
        })
        .collect();
    if order % 2 == 1 {
        let norm = poles.iter().map(|p| p.norm_sqr()).sum::<f64>().sqrt();
        let extra: Vec<_> = poles
            .iter()
            .filter(|p| p.im.abs() > f64::EPSILON * norm)
            .map(|p| p.conj())
            .collect();
        poles.extend(extra);
    } else {
        let extra: Vec<_> = poles.iter().map(|p| p.conj()).collect();
        poles.extend(extra);
    }
    let num: Complex<f64> = poles.iter().map(|p| -p).product();
    let den: Complex<f64> = zeros.iter().map(|z| -z).product();
    let mut gain = (num / den).re;
    if order % 2 == 0 {
        gain /= (1.0 + eps_sq).sqrt();
    }
    Zpk { zeros, poles, gain }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_integral_reference_values() {
        // K(0) = pi/2; K(0.3) and K(1 - 1e-5) from standard tables.
        assert!((ellipk(0.0) - PI / 2.0).abs() < 1e-15);
        assert!((ellipk(0.3) - 1.713_889_448_178_791).abs() < 1e-13);
        assert!((ellipk_complement(1e-5) - 7.142_772_450_581_779).abs() < 1e-12);
    }

    #[test]
    fn jacobi_functions_satisfy_identities() {
        let (sn, cn, dn) = ellipj(0.7, 0.3);
        assert!((sn - 0.632_304_776_310_864_6).abs() < 1e-13);
        assert!((cn - 0.774_719_736_326_929_8).abs() < 1e-13);
        assert!((dn - 0.938_113_639_681_430_4).abs() < 1e-13);
        for &(u, m) in &[(0.1, 0.9), (1.3, 0.5), (2.0, 0.01)] {
            let (s, c, d) = ellipj(u, m);
            assert!((s * s + c * c - 1.0).abs() < 1e-13);
            assert!((d * d + m * s * s - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn third_order_prototype() {
        let zpk = ellipap(3, 0.5, 40.0);
        assert_eq!(zpk.zeros.len(), 2);
        assert_eq!(zpk.poles.len(), 3);
        assert!((zpk.zeros[0].im.abs() - 3.103_097_653_306_366).abs() < 1e-10);
        let real = zpk.poles.iter().find(|p| p.im == 0.0).unwrap();
        assert!((real.re + 0.659_093_088_079_848_8).abs() < 1e-10);
        let cplx = zpk.poles.iter().find(|p| p.im > 0.0).unwrap();
        assert!((cplx.re + 0.290_319_112_981_199_56).abs() < 1e-10);
        assert!((cplx.im - 1.030_497_104_300_540_6).abs() < 1e-10);
        assert!((zpk.gain - 0.078_454_862_117_449_18).abs() < 1e-10);
    }

    #[test]
    fn fourth_order_prototype_gain() {
        let zpk = ellipap(4, 0.5, 40.0);
        assert_eq!(zpk.poles.len(), 4);
        assert!((zpk.gain - 0.01).abs() < 1e-10);
    }
}
