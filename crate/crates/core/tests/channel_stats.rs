use jeit::channel::{awgn, channel_roundtrip, power_normalize, Snr, SymbolVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit_symbols(n: usize) -> SymbolVector {
    // Alternating unit-power QPSK points.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    SymbolVector::from_interleaved(
        (0..2 * n)
            .map(|i| if i % 3 == 0 { -s } else { s })
            .collect(),
    )
    .unwrap()
}

fn noise(snr: Snr, n: usize, seed: u64) -> Vec<f64> {
    let zero = SymbolVector::from_interleaved(vec![0.0; 2 * n]).unwrap();
    awgn(&zero, snr, &mut ChaCha8Rng::seed_from_u64(seed))
        .interleaved()
        .to_vec()
}

#[test]
fn noise_is_zero_mean_per_component() {
    let n = 1_000_000;
    let v = noise(Snr::Db(0.0), n, 1);
    let sigma = (0.5f64).sqrt();
    for comp in 0..2 {
        let mean: f64 = v.iter().skip(comp).step_by(2).sum::<f64>() / n as f64;
        assert!(
            mean.abs() <= 3.0 * sigma / (n as f64).sqrt(),
            "component {comp} mean {mean}"
        );
    }
}

#[test]
fn noise_is_memoryless() {
    let n = 1_000_000;
    let v = noise(Snr::Db(10.0), n, 2);
    let re: Vec<f64> = v.iter().step_by(2).copied().collect();
    let mean = re.iter().sum::<f64>() / n as f64;
    let var: f64 = re.iter().map(|x| (x - mean).powi(2)).sum();
    let lag: f64 = re.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
    let r = lag / var;
    assert!(r.abs() < 0.01, "lag-1 autocorrelation {r}");
}

#[test]
fn measured_snr_matches_setting() {
    let n = 1_000_000;
    let s = unit_symbols(n);
    for (db, seed) in [(0.0, 3), (10.0, 4), (18.0, 5)] {
        let out = channel_roundtrip(&s, Snr::Db(db), &mut ChaCha8Rng::seed_from_u64(seed));
        let noise_power: f64 = out
            .interleaved()
            .iter()
            .zip(s.interleaved())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n as f64;
        let measured = 10.0 * (s.average_power() / noise_power).log10();
        assert!(
            (measured - db).abs() <= 0.1,
            "{db} dB measured as {measured}"
        );
    }
}

proptest! {
    #[test]
    fn normalization_gives_unit_power_and_inverts(v in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let mut v = v;
        if v.len() % 2 == 1 {
            v.push(1.0);
        }
        let s = SymbolVector::from_interleaved(v).unwrap();
        prop_assume!(s.average_power() > 1e-12);
        let (n, scale) = power_normalize(&s);
        prop_assert!((n.average_power() - 1.0).abs() < 1e-9);
        for (a, b) in n.scaled(scale).interleaved().iter().zip(s.interleaved()) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn noiseless_channel_is_identity(v in prop::collection::vec(-5.0f64..5.0, 0..32), seed in any::<u64>()) {
        let mut v = v;
        if v.len() % 2 == 1 {
            v.pop();
        }
        let s = SymbolVector::from_interleaved(v).unwrap();
        prop_assert_eq!(channel_roundtrip(&s, Snr::Noiseless, &mut ChaCha8Rng::seed_from_u64(seed)), s);
    }

    #[test]
    fn same_seed_same_noise(seed in any::<u64>()) {
        let s = unit_symbols(16);
        let a = channel_roundtrip(&s, Snr::Db(5.0), &mut ChaCha8Rng::seed_from_u64(seed));
        let b = channel_roundtrip(&s, Snr::Db(5.0), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(a, b);
    }
}
