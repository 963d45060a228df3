use electrolyte::perturb::{add_noise_snr, mask, mask_len};
use electrolyte::signal::{PatientMeta, ProcessedEcg, PADDED_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_ecg(seed: u64, amplitude: f64) -> ProcessedEcg {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..ProcessedEcg::LEN).map(|_| amplitude * rng.gen_range(-1.0..1.0)).collect();
    ProcessedEcg::from_flat(data, PatientMeta::default()).unwrap()
}

fn unit_power(seed: u64) -> ProcessedEcg {
    let mut e = random_ecg(seed, 1.0);
    let p = e.mean_power();
    e.as_flat_mut().iter_mut().for_each(|x| *x /= p.sqrt());
    e
}

#[test]
fn infinite_snr_is_identity() {
    let e = random_ecg(1, 0.5);
    let out = add_noise_snr(&e, 1e12, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert!(!out.zero_power);
    let diff = out.ecg.as_flat().iter().zip(e.as_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-6);
}

#[test]
fn unit_snr_noise_power() {
    let e = unit_power(3);
    assert!((e.mean_power() - 1.0).abs() < 1e-12);
    for (snr, expect) in [(1.0, 1.0), (10.0, 0.1)] {
        let out = add_noise_snr(&e, snr, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let n = ProcessedEcg::LEN as f64;
        let p = out.ecg.as_flat().iter().zip(e.as_flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
        assert!((p / expect - 1.0).abs() < 0.05, "snr {snr}: {p}");
    }
}

#[test]
fn noise_is_deterministic_given_rng() {
    let e = random_ecg(5, 1.0);
    let a = add_noise_snr(&e, 3.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let b = add_noise_snr(&e, 3.0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_power_is_flagged() {
    let e = ProcessedEcg::zeros(PatientMeta::default());
    let out = add_noise_snr(&e, 10.0, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    assert!(out.zero_power);
    assert_eq!(out.ecg, e);
    assert!(add_noise_snr(&e, 0.0, &mut ChaCha8Rng::seed_from_u64(7)).is_err());
    assert!(add_noise_snr(&e, f64::NAN, &mut ChaCha8Rng::seed_from_u64(7)).is_err());
}

fn zeroed_runs(e: &ProcessedEcg, lead: usize) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &x) in e.lead(lead).iter().chain(std::iter::once(&1.0)).enumerate() {
        match (x == 0.0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - s));
                start = None;
            }
            _ => {}
        }
    }
    runs
}

#[test]
fn masking_extremes() {
    let e = random_ecg(8, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(mask(&e, 0.0, &mut rng).unwrap(), e);
    assert!(mask(&e, 1.0, &mut rng).unwrap().as_flat().iter().all(|&x| x == 0.0));
    assert!(mask(&e, 1.5, &mut rng).is_err());
    assert!(mask(&e, -0.1, &mut rng).is_err());
}

#[test]
fn half_mask_is_one_shared_segment() {
    let e = random_ecg(10, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let m = mask(&e, 0.5, &mut rng).unwrap();
        let first = zeroed_runs(&m, 0);
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].1, 2048);
        for lead in 1..8 {
            assert_eq!(zeroed_runs(&m, lead), first);
        }
    }
    assert_eq!(mask_len(0.25), 1024);
    assert_eq!(mask_len(1.0), PADDED_LEN);
}

#[test]
fn masked_energy_does_not_grow() {
    let e = random_ecg(12, 1.0);
    let mut last = f64::INFINITY;
    for p in [0.0, 0.1, 0.3, 0.5, 0.8, 1.0] {
        let energy: f64 = (0..50)
            .map(|s| mask(&e, p, &mut ChaCha8Rng::seed_from_u64(s)).unwrap().mean_power())
            .sum();
        assert!(energy <= last);
        last = energy;
    }
}
