use pairforge::counting::*;
use pairforge::device::PULSED_EXPERIMENT_JSON;
use proptest::prelude::*;

fn fixture() -> ExperimentConfig {
    serde_json::from_str(PULSED_EXPERIMENT_JSON).unwrap()
}

fn base(gates: f64) -> ExperimentConfig {
    ExperimentConfig {
        pulse_duration_s: 60e-9,
        repetition_rate_hz: 1e4,
        acquisition_time_s: gates / 1e4,
        pairs_per_pulse: 0.0,
        noise_photons_per_pulse: [0.0, 0.0],
        transmission: [1.0, 1.0],
        detector_efficiency: 1.0,
        gate_duration_s: 50e-9,
        gate_delay_s: 5e-9,
        dark_count_probability: 0.0,
        bin_width_s: 162e-12,
        jitter_s: 0.0,
        seed: None,
        chunk_gates: DEFAULT_CHUNK_GATES,
    }
}

fn constructed(counts: Vec<u64>) -> CoincidenceHistogram {
    let n = counts.len();
    CoincidenceHistogram {
        bin_width_s: 1e-10,
        first_bin_start_s: -(n as f64 / 2.0) * 1e-10,
        coincidence_gates: counts.iter().sum(),
        counts,
        total_gates: 0,
        singles: [0, 0],
        config: None,
    }
}

#[test]
fn werner_examples() {
    let w = werner_fidelity(13.5).unwrap();
    assert!((w.p - 0.87097).abs() < 5e-6 && (w.fidelity - 0.90323).abs() < 5e-6);
    let w = werner_fidelity(0.0).unwrap();
    assert_eq!((w.p, w.fidelity), (0.0, 0.25));
    assert!(werner_fidelity(1e6).unwrap().fidelity > 0.99999);
    assert!(matches!(werner_fidelity(-0.1), Err(CountingError::NegativeSnr(_))));
}

proptest! {
    #[test]
    fn werner_is_monotone_and_bounded(a in 0.0f64..1e4, b in 0.0f64..1e4) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (fl, fh) = (werner_fidelity(lo).unwrap().fidelity, werner_fidelity(hi).unwrap().fidelity);
        prop_assert!(fl >= 0.25 && fh < 1.0);
        if hi > lo {
            prop_assert!(fh > fl);
        }
    }
}

#[test]
fn constructed_peak_gives_defined_snr() {
    let mut counts = vec![10; 200];
    counts[100] = 145;
    counts[101] = 145;
    let a = analyze_histogram(&constructed(counts)).unwrap();
    assert!((a.snr - 13.5).abs() < 1e-9, "{a:?}");
    assert_eq!(a.window_counts, 290);
    assert!((a.background_counts - 20.0).abs() < 1e-9);
    assert!((a.fwhm_s - 2e-10).abs() < 1e-20);
    assert!(!a.saturated && a.snr_error > 0.0);
}

#[test]
fn flat_histogram_has_no_signal() {
    let a = analyze_histogram(&constructed(vec![100; 300])).unwrap();
    assert!(a.snr.abs() <= a.snr_error, "{a:?}");
}

#[test]
fn background_free_peak_is_flagged_saturated() {
    let mut counts = vec![0; 100];
    counts[50] = 40;
    let a = analyze_histogram(&constructed(counts)).unwrap();
    assert!(a.saturated);
    assert_eq!(a.snr, 40.0);
    assert!(analyze_histogram(&constructed(vec![0; 50])).is_err());
}

#[test]
fn lossless_pairs_land_in_zero_delay_bin() {
    let mut cfg = base(2e5);
    cfg.pairs_per_pulse = 1.0;
    let h = simulate_coincidences(&cfg, 1).unwrap();
    let zero = h.counts.len() / 2;
    assert!((h.bin_center_s(zero)).abs() < 1e-15);
    assert!(h.counts[zero] > 100_000);
    assert_eq!(h.total_counts(), h.counts[zero]);
    assert_eq!(h.total_counts(), h.coincidence_gates);
}

#[test]
fn histogram_spans_the_gate() {
    let h = simulate_coincidences(&base(10.0), 0).unwrap();
    let span = h.counts.len() as f64 * h.bin_width_s;
    assert!(span >= 2.0 * 50e-9);
    assert_eq!(h.total_counts(), 0);
}

/// Expected accidentals in bin `k` for independent clicks uniform in the
/// gate: `N·p₁·p₂·∫_bin (τ − |Δ|)/τ² dΔ`.
fn accidentals_in_bin(cfg: &ExperimentConfig, center: f64) -> f64 {
    let p = cfg.click_probability();
    let tau = cfg.gate_duration_s;
    cfg.total_gates() as f64 * p[0] * p[1] * cfg.bin_width_s / tau * (1.0 - center.abs() / tau)
}

#[test]
fn noise_only_background_matches_accidental_formula() {
    let mut cfg = base(1e7);
    cfg.noise_photons_per_pulse = [0.1, 0.08];
    cfg.detector_efficiency = 0.9;
    cfg.dark_count_probability = 1e-3;
    let (mut seen, mut expected) = (0.0, 0.0);
    for seed in 0..10 {
        let h = simulate_coincidences(&cfg, seed).unwrap();
        assert_eq!(h.total_counts(), h.coincidence_gates);
        let mid = h.counts.len() / 2;
        for i in mid - 20..=mid + 20 {
            seen += h.counts[i] as f64;
            expected += accidentals_in_bin(&cfg, h.bin_center_s(i));
        }
        let wide: f64 = (0..h.counts.len()).map(|i| accidentals_in_bin(&cfg, h.bin_center_s(i))).sum();
        assert!((h.total_counts() as f64 - wide).abs() < 4.0 * wide.sqrt());
    }
    assert!((seen - expected).abs() < 3.0 * expected.sqrt(), "{seen} vs {expected}");
}

#[test]
fn background_scales_with_singles_of_one_arm() {
    let mut cfg = base(4e6);
    cfg.pairs_per_pulse = 0.05;
    cfg.transmission = [0.2, 0.2];
    cfg.detector_efficiency = 0.5;
    cfg.noise_photons_per_pulse = [0.02, 0.02];
    let mut doubled = cfg.clone();
    doubled.noise_photons_per_pulse[0] = 0.04;
    let stats = |c: &ExperimentConfig| {
        let (mut b, mut t) = (0.0, 0.0);
        for seed in 0..4 {
            let a = analyze_histogram(&simulate_coincidences(c, seed).unwrap()).unwrap();
            b += a.background_counts;
            t += a.true_coincidences;
        }
        (b, t)
    };
    let (b1, t1) = stats(&cfg);
    let (b2, t2) = stats(&doubled);
    let p = |c: &ExperimentConfig| c.click_probability()[0];
    let ratio = p(&doubled) / p(&cfg);
    assert!(ratio > 1.5);
    assert!((b2 / b1 - ratio).abs() < 3.0 * ratio * (1.0 / b1 + 1.0 / b2).sqrt(), "{b1} {b2} {ratio}");
    assert!((t2 - t1).abs() < 3.0 * (t1 + t2 + b1 + b2).sqrt(), "{t1} {t2}");
}

#[test]
fn injected_ratio_is_recovered() {
    // Pairs detected on both arms against noise-dominated singles, set up
    // for a coincidence-to-accidental ratio of 5 in a single bin.
    let mut cfg = base(1e7);
    let eta = 0.02;
    cfg.transmission = [0.1, 0.1];
    cfg.detector_efficiency = 0.2;
    let g = cfg.gate_fraction();
    let bin = cfg.bin_width_s / cfg.gate_duration_s;
    let target = 5.0;
    let p = 0.03;
    cfg.pairs_per_pulse = target * p * p * bin / (eta * eta * g);
    let pair_singles = cfg.pairs_per_pulse * eta * g;
    let lambda = -(1.0 - p).ln() - pair_singles;
    cfg.noise_photons_per_pulse = [lambda / (g * cfg.detector_efficiency); 2];
    let expected = cfg.pairs_per_pulse * eta * eta * g / (cfg.click_probability()[0] * cfg.click_probability()[1] * bin);
    assert!((expected - target).abs() < 0.05);
    let snrs: Vec<f64> = (0..20).map(|s| analyze_histogram(&simulate_coincidences(&cfg, s).unwrap()).unwrap().snr).collect();
    let mean = snrs.iter().sum::<f64>() / snrs.len() as f64;
    assert!((mean - target).abs() < 0.5, "{snrs:?}");
}

#[test]
fn jitter_broadens_the_peak() {
    let mut cfg = base(2e6);
    cfg.pairs_per_pulse = 0.2;
    cfg.transmission = [0.3, 0.3];
    cfg.noise_photons_per_pulse = [0.05, 0.05];
    cfg.jitter_s = 300e-12;
    let a = analyze_histogram(&simulate_coincidences(&cfg, 2).unwrap()).unwrap();
    // Δt has σ = √2·300 ps, FWHM ≈ 1.0 ns.
    assert!(a.fwhm_s > 0.6e-9 && a.fwhm_s < 1.4e-9, "{}", a.fwhm_s);
    assert!(a.peak_delay_s.abs() < 0.3e-9);
}

#[test]
fn result_is_independent_of_worker_count() {
    let mut cfg = fixture();
    cfg.acquisition_time_s = 100.0;
    cfg.chunk_gates = 100_000;
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_coincidences(&cfg, 99).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one.to_csv(), run(3).to_csv());
    assert_ne!(one.counts, simulate_coincidences(&cfg, 100).unwrap().counts);
}

#[test]
fn fixture_snr_is_thirteen_and_a_half() {
    let cfg = fixture();
    cfg.validate().unwrap();
    assert_eq!(cfg.total_gates(), 12_000_000);
    let mut snrs = Vec::new();
    for seed in 0..3 {
        let a = analyze_histogram(&simulate_coincidences(&cfg, seed).unwrap()).unwrap();
        snrs.push(a.snr);
    }
    assert!(snrs.iter().all(|s| (s - 13.5).abs() <= 2.0), "{snrs:?}");
}

#[test]
fn csv_and_sidecar_round_trip() {
    let mut cfg = fixture();
    cfg.acquisition_time_s = 10.0;
    let h = simulate_coincidences(&cfg, 5).unwrap();
    let csv = h.to_csv();
    assert!(csv.starts_with("bin_start_s,count\n"));
    let back = CoincidenceHistogram::from_csv(&csv, Some(&h.metadata_json())).unwrap();
    assert_eq!(back.counts, h.counts);
    assert_eq!((back.total_gates, back.singles, back.coincidence_gates), (h.total_gates, h.singles, h.coincidence_gates));
    assert!((back.bin_width_s - h.bin_width_s).abs() < 1e-6 * h.bin_width_s);
    assert_eq!(back.config, h.config);
    let bare = CoincidenceHistogram::from_csv(&csv, None).unwrap();
    assert_eq!(bare.counts, h.counts);
    assert!(CoincidenceHistogram::from_csv("bin_start_s,count\n0,1\n1e-10,2\n3e-10,1\n", None).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let good = base(10.0);
    let cases: [fn(&mut ExperimentConfig); 6] = [
        |c| c.bin_width_s = 0.0,
        |c| c.transmission[1] = 1.5,
        |c| c.detector_efficiency = -0.1,
        |c| c.dark_count_probability = 1.0,
        |c| c.gate_delay_s = 70e-9,
        |c| c.pairs_per_pulse = f64::NAN,
    ];
    for mutate in cases {
        let mut c = good.clone();
        mutate(&mut c);
        assert!(matches!(simulate_coincidences(&c, 0), Err(CountingError::Invalid(_))));
    }
}
