use std::sync::OnceLock;

use pairforge::device::Device;
use pairforge::materials::DispersionTable;
use pairforge::modesolver::{wavelength_grid, DispersionCurve, SolverOptions};
use pairforge::nonlinear::*;
use pairforge::units::{bandwidth_nm_to_hz, NM_PER_CM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const T: f64 = 293.15;

fn device() -> &'static (Device, DispersionTable) {
    static D: OnceLock<(Device, DispersionTable)> = OnceLock::new();
    D.get_or_init(|| {
        let t = DispersionTable::bundled();
        (Device::bundled(&t).unwrap(), t)
    })
}

fn curves() -> &'static PhaseMatchCurves {
    static C: OnceLock<PhaseMatchCurves> = OnceLock::new();
    C.get_or_init(|| {
        let (d, t) = device();
        PhaseMatchCurves::compute(&d.stack, T, t, &SolverOptions::default(), &CurveSettings::default()).unwrap()
    })
}

fn device_template() -> ShgModel {
    let mode = |r, a, ng| CavityMode {
        reflectivity: r,
        alpha_cm1: a,
        group_index: ng,
        phase_rad: 0.0,
    };
    ShgModel {
        eta_pct_per_w_cm2: 35.0,
        length_cm: 0.2,
        fundamental_power_w: 0.05,
        te: mode(0.27, 2.0, 3.28),
        tm: mode(0.25, 2.2, 3.27),
        teb: mode(0.79, 0.8, 3.9),
        phase_reference_nm: 1570.0,
    }
}

#[test]
fn tuning_curve_points_conserve_energy_and_momentum() {
    let c = curves();
    let deg = degeneracy(c).unwrap();
    let grid = wavelength_grid(deg - 1.5, deg + 0.5, 0.1);
    let tc = tuning_curve(c, &grid).unwrap();
    assert!(!tc.points.is_empty());
    for p in &tc.points {
        let rel = (1.0 / p.lambda_p_nm - 1.0 / p.lambda_s_nm - 1.0 / p.lambda_i_nm).abs() * p.lambda_p_nm;
        assert!(rel < 1e-9, "{p:?}");
        assert!(phase_mismatch(c, p.lambda_p_nm, p.lambda_s_nm).unwrap().abs() < 1e-4, "{p:?}");
    }
    let d = tc.degenerate_point();
    assert_eq!(d.lambda_s_nm, d.lambda_i_nm);
    assert_eq!(d.lambda_s_nm, 2.0 * d.lambda_p_nm);
    assert_eq!(tc.points.iter().filter(|p| p.lambda_s_nm == p.lambda_i_nm).count(), 1);
    assert!((2.0 * deg - 1570.0).abs() <= 15.0, "degenerate pair at {} nm", 2.0 * deg);
}

#[test]
fn mismatch_changes_sign_across_solutions() {
    let c = curves();
    let deg = degeneracy(c).unwrap();
    let tc = tuning_curve(c, &[deg - 1.0]).unwrap();
    let p = tc.points.iter().find(|p| p.lambda_p_nm == deg - 1.0).unwrap();
    let lo = phase_mismatch(c, p.lambda_p_nm, p.lambda_s_nm - 0.5).unwrap();
    let hi = phase_mismatch(c, p.lambda_p_nm, p.lambda_s_nm + 0.5).unwrap();
    assert!(lo * hi < 0.0, "{lo} {hi}");
}

#[test]
fn branches_separate_quickly_near_degeneracy() {
    let c = curves();
    let deg = degeneracy(c).unwrap();
    let (a, b) = (deg - 0.3, deg - 0.2);
    let tc = tuning_curve(c, &[a, b]).unwrap();
    let long = |lp: f64| {
        tc.points
            .iter()
            .filter(|p| p.lambda_p_nm == lp)
            .map(|p| p.lambda_s_nm.max(p.lambda_i_nm))
            .fold(f64::MIN, f64::max)
    };
    let slope = (long(a) - long(b)).abs() / (a - b).abs();
    assert!(slope > 10.0, "|dλs/dλp| = {slope}");
}

#[test]
fn identical_flat_curves_phase_match_at_degeneracy() {
    let flat = |sel| DispersionCurve::constant(sel, T, (700.0, 1800.0), 3.3);
    let c = PhaseMatchCurves {
        pump: flat(PUMP_MODE),
        signal: flat(SIGNAL_MODE),
        idler: flat(IDLER_MODE),
    };
    for lp in [760.0, 785.0, 800.0] {
        assert!(phase_mismatch(&c, lp, 2.0 * lp).unwrap().abs() < 1e-9);
    }
    assert!(phase_mismatch(&c, 785.0, 2000.0).is_err());
}

#[test]
fn bragg_mode_is_strongly_dispersive() {
    let c = curves();
    let teb = ((c.pump.n_at(786.0).unwrap() - c.pump.n_at(784.0).unwrap()) / 2.0).abs();
    let te = ((c.signal.n_at(1575.0).unwrap() - c.signal.n_at(1565.0).unwrap()) / 10.0).abs();
    assert!(teb >= 5.0 * te, "TEB {teb:e}/nm vs TE00 {te:e}/nm");
}

#[test]
fn shg_bandwidth_of_two_millimetre_guide() {
    let (_, fwhm) = shg_bandwidth(curves(), 0.2).unwrap();
    assert!((0.3..=0.9).contains(&fwhm), "{fwhm}");
    let (_, longer) = shg_bandwidth(curves(), 0.4).unwrap();
    assert!((longer / fwhm - 0.5).abs() < 0.02);
}

#[test]
fn sh_power_is_quadratic_in_fundamental_power() {
    let m = device_template();
    let grid = wavelength_grid(1569.0, 1571.0, 0.01);
    let env = Envelope::Parametric { center_nm: 1570.0, fwhm_nm: 0.6 };
    let a = shg_spectrum(&m, env, &grid).unwrap();
    let b = shg_spectrum(&ShgModel { fundamental_power_w: 0.1, ..m }, env, &grid).unwrap();
    for (x, y) in a.power.iter().zip(&b.power) {
        assert!((y - 4.0 * x).abs() <= 1e-12 * y.abs().max(1e-30));
    }
}

#[test]
fn open_cavity_gives_bare_envelope() {
    let mut m = device_template();
    for c in [&mut m.te, &mut m.tm, &mut m.teb] {
        *c = CavityMode::lossless_open(c.group_index);
    }
    let grid = wavelength_grid(1569.0, 1571.0, 0.01);
    let s = shg_spectrum(&m, Envelope::Parametric { center_nm: 1570.0, fwhm_nm: 0.6 }, &grid).unwrap();
    let peak = 0.35 * 0.04 * 0.05f64.powi(2);
    for (l, p) in s.wavelength_nm.iter().zip(&s.power) {
        let x = 2.0 * SINC2_HALF_MAX * (l - 1570.0) / 0.6;
        let env = if x.abs() < 1e-12 { 1.0 } else { (x.sin() / x).powi(2) };
        assert!((p - peak * env).abs() < 1e-15);
        assert_eq!(m.cavity_factor(*l), 1.0);
    }
    let half = shg_spectrum(&m, Envelope::Parametric { center_nm: 1570.0, fwhm_nm: 0.6 }, &[1570.3]).unwrap();
    assert!((half.power[0] / peak - 0.5).abs() < 1e-9);
    let mut bad = device_template();
    bad.teb.reflectivity = 1.0;
    assert!(shg_spectrum(&bad, Envelope::Parametric { center_nm: 1570.0, fwhm_nm: 0.6 }, &grid).is_err());
}

#[test]
fn fringe_period_matches_free_spectral_range() {
    let mut m = device_template();
    m.tm = CavityMode::lossless_open(m.tm.group_index);
    m.teb = CavityMode::lossless_open(m.teb.group_index);
    let grid = wavelength_grid(1565.0, 1575.0, 0.001);
    let s = shg_spectrum(&m, Envelope::Parametric { center_nm: 1570.0, fwhm_nm: 50.0 }, &grid).unwrap();
    let peaks: Vec<f64> = (1..grid.len() - 1)
        .filter(|&i| s.power[i] > s.power[i - 1] && s.power[i] >= s.power[i + 1])
        .map(|i| grid[i])
        .collect();
    let period = (peaks[peaks.len() - 1] - peaks[0]) / (peaks.len() - 1) as f64;
    let fsr = 1570.0f64.powi(2) / (2.0 * m.te.group_index * m.length_cm * NM_PER_CM);
    assert!(((period - fsr) / fsr).abs() < 0.05, "{period} vs {fsr}");
}

fn synthetic(rng: &mut ChaCha8Rng, template: &ShgModel) -> (ShgModel, f64, f64, Spectrum) {
    let mut m = *template;
    m.eta_pct_per_w_cm2 = rng.random_range(20.0..50.0);
    m.te.phase_rad = rng.random_range(0.0..std::f64::consts::TAU);
    m.tm.phase_rad = rng.random_range(0.0..std::f64::consts::TAU);
    m.teb.phase_rad = rng.random_range(0.0..std::f64::consts::TAU);
    let center = rng.random_range(1565.0..1575.0);
    let fwhm = rng.random_range(0.45..0.8);
    let grid = wavelength_grid(center - 2.0, center + 2.0, 0.002);
    let s = shg_spectrum(&m, Envelope::Parametric { center_nm: center, fwhm_nm: fwhm }, &grid).unwrap();
    (m, center, fwhm, s)
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn fit_recovers_noiseless_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let template = device_template();
    for _ in 0..5 {
        let (m, center, fwhm, s) = synthetic(&mut rng, &template);
        let fit = fit_shg(&s, &template).unwrap();
        assert!(rel(fit.eta_pct_per_w_cm2, m.eta_pct_per_w_cm2) < 0.02, "{fit:?} {m:?}");
        assert!(rel(fit.center_nm, center) < 0.02 && (fit.center_nm - center).abs() < 0.05);
        assert!(rel(fit.fwhm_nm, fwhm) < 0.02, "{} vs {fwhm}", fit.fwhm_nm);
        assert!(!fit.degenerate);
    }
}

#[test]
fn fit_tolerates_one_percent_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let template = device_template();
    let noise = Normal::new(0.0, 0.01).unwrap();
    for _ in 0..3 {
        let (m, _, _, mut s) = synthetic(&mut rng, &template);
        let max = s.power.iter().cloned().fold(0.0, f64::max);
        for p in &mut s.power {
            *p += max * noise.sample(&mut rng);
        }
        let fit = fit_shg(&s, &template).unwrap();
        assert!(rel(fit.eta_pct_per_w_cm2, m.eta_pct_per_w_cm2) < 0.05, "{} vs {}", fit.eta_pct_per_w_cm2, m.eta_pct_per_w_cm2);
    }
}

#[test]
fn zero_spectrum_fit_is_degenerate() {
    let grid = wavelength_grid(1568.0, 1572.0, 0.01);
    let s = Spectrum {
        power: vec![0.0; grid.len()],
        wavelength_nm: grid,
    };
    let fit = fit_shg(&s, &device_template()).unwrap();
    assert!(fit.degenerate);
    assert_eq!(fit.eta_pct_per_w_cm2, 0.0);
}

#[test]
fn sh_fit_centre_matches_degeneracy() {
    let (d, _) = device();
    let c = curves();
    let template = d.shg_model(c, 0.05).unwrap();
    let deg = degeneracy(c).unwrap();
    let grid = wavelength_grid(2.0 * deg - 2.0, 2.0 * deg + 2.0, 0.002);
    let s = shg_spectrum(&template, Envelope::Curves(c), &grid).unwrap();
    let fit = fit_shg(&s, &template).unwrap();
    assert!((fit.center_nm - 2.0 * deg).abs() < 0.1, "{} vs {}", fit.center_nm, 2.0 * deg);
    assert!(rel(fit.eta_pct_per_w_cm2, 35.0) < 0.05, "{}", fit.eta_pct_per_w_cm2);
}

#[test]
fn frozen_table_has_no_temperature_slope() {
    let (d, t) = device();
    let frozen = t.frozen_in_temperature();
    let s = pm_center_vs_temperature(&d.stack, &[288.15, 298.15, 308.15], &frozen, &SolverOptions::default(), &CurveSettings::default()).unwrap();
    assert!(s.slope_nm_per_k.abs() < 1e-9, "{}", s.slope_nm_per_k);
}

#[test]
fn temperature_slope_converges_and_needs_three_points() {
    let (d, t) = device();
    let opts = SolverOptions::default();
    let st = CurveSettings::default();
    let coarse = pm_center_vs_temperature(&d.stack, &[288.15, 298.15, 308.15], t, &opts, &st).unwrap();
    let fine = pm_center_vs_temperature(&d.stack, &[288.15, 293.15, 298.15, 303.15, 308.15], t, &opts, &st).unwrap();
    assert!(rel(fine.slope_nm_per_k, coarse.slope_nm_per_k) < 0.1);
    assert!((0.04..=0.12).contains(&fine.slope_nm_per_k));
    assert!(pm_center_vs_temperature(&d.stack, &[288.15, 298.15], t, &opts, &st).is_err());
}

fn fp_grid() -> Vec<f64> {
    wavelength_grid(1560.0, 1580.0, 0.002)
}

#[test]
fn lossless_fringes_give_zero_loss() {
    let s = synthesize_fp_transmission(0.27, 0.0, 0.2, 3.28, &fp_grid());
    let e = extract_loss_fp(&s, 0.27, 0.2).unwrap();
    assert!(e.alpha_cm1.abs() < 1e-3, "{}", e.alpha_cm1);
    let k = 2.0 * 0.27 / (1.0 + 0.27f64.powi(2));
    assert!(e.contrasts.iter().all(|c| (c - k).abs() < 1e-4), "{:?}", &e.contrasts[..3]);
}

#[test]
fn doped_guide_loss_round_trip() {
    let s = synthesize_fp_transmission(0.27, 2.0, 0.2, 3.28, &fp_grid());
    let e = extract_loss_fp(&s, 0.27, 0.2).unwrap();
    assert!((e.alpha_cm1 - 2.0).abs() < 0.02);
    let x = 0.27 * (-0.4f64).exp();
    let k = 2.0 * x / (1.0 + x * x);
    assert!((x - 0.18099).abs() < 1e-5 && (k - 0.35049).abs() < 1e-5);
    assert!(e.contrasts.iter().all(|c| (c - k).abs() < 1e-4));
    assert!(e.fringes > 10);
}

#[test]
fn loss_round_trip_over_range() {
    for r in [0.1, 0.27, 0.5, 0.9] {
        for alpha in [0.0, 0.1, 0.5, 1.0, 2.0, 3.5, 5.0] {
            let s = synthesize_fp_transmission(r, alpha, 0.2, 3.28, &fp_grid());
            let e = extract_loss_fp(&s, r, 0.2).unwrap();
            assert!((e.alpha_cm1 - alpha).abs() <= 0.01 * alpha + 1e-3, "R {r} α {alpha}: {}", e.alpha_cm1);
        }
    }
}

#[test]
fn loss_extraction_rejects_bad_input() {
    let s = synthesize_fp_transmission(0.27, 1.0, 0.2, 3.28, &fp_grid());
    assert!(matches!(extract_loss_fp(&s, 1.0, 0.2), Err(NonlinearError::Invalid(_))));
    // Assumed R below the true one implies negative loss.
    assert!(matches!(extract_loss_fp(&s, 0.1, 0.2), Err(NonlinearError::Extraction(_))));
    let flat = Spectrum {
        power: vec![1.0; 100],
        wavelength_nm: wavelength_grid(1560.0, 1560.99, 0.01),
    };
    assert!(matches!(extract_loss_fp(&flat, 0.27, 0.2), Err(NonlinearError::Extraction(_))));
}

#[test]
fn spdc_probability_is_linear_in_bandwidth_and_brackets_expectation() {
    assert_eq!(spdc_pair_probability(35.0, 0.2, 785.0, 0.0).unwrap(), 0.0);
    let a = spdc_pair_probability(35.0, 0.2, 785.0, 1e11).unwrap();
    let b = spdc_pair_probability(35.0, 0.2, 785.0, 2e11).unwrap();
    assert!((b - 2.0 * a).abs() < 1e-24);
    for nm in [5.0, 10.0, 20.0] {
        let p = spdc_pair_probability(35.0, 0.2, 785.0, bandwidth_nm_to_hz(nm, 1570.0)).unwrap();
        assert!((1e-9..=1e-8).contains(&p), "{nm} nm: {p:e}");
    }
    assert!(spdc_pair_probability(-1.0, 0.2, 785.0, 1e11).is_err());
}

#[test]
fn spectrum_csv_round_trip() {
    let s = Spectrum {
        wavelength_nm: vec![1569.0, 1570.0, 1571.0],
        power: vec![1.0, 4.0, 2.0],
    };
    let csv = s.to_csv();
    assert!(csv.starts_with("lambda_nm,P_sh_norm\n"));
    let back = Spectrum::from_csv(&csv).unwrap();
    assert_eq!(back.wavelength_nm, s.wavelength_nm);
    assert_eq!(back.power, vec![0.25, 1.0, 0.5]);
    assert!(Spectrum::from_csv("lambda_nm,P\n1569.0,abc\n").is_err());
}
