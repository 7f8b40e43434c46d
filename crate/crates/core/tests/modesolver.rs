use std::f64::consts::PI;

use num_complex::Complex64 as C;
use pairforge::layerstack::{build_bragg, parse_stack, resolve, ResolvedStack};
use pairforge::materials::{DispersionTable, Validity};
use pairforge::modesolver::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fundamental-mode equation of the three-layer slab,
/// `κd − atan(ρ_s γ_s/κ) − atan(ρ_c γ_c/κ) = 0`.
fn slab_equation(ns: f64, nf: f64, nc: f64, d: f64, lambda: f64, tm: bool, n: f64) -> f64 {
    let k0 = 2.0 * PI / lambda;
    let kappa = k0 * (nf * nf - n * n).sqrt();
    let gs = k0 * (n * n - ns * ns).sqrt();
    let gc = k0 * (n * n - nc * nc).sqrt();
    let (rs, rc) = if tm { ((nf / ns).powi(2), (nf / nc).powi(2)) } else { (1.0, 1.0) };
    kappa * d - (rs * gs / kappa).atan() - (rc * gc / kappa).atan()
}

/// Plain bisection on the slab equation; `None` below cutoff.
fn slab_oracle(ns: f64, nf: f64, nc: f64, d: f64, lambda: f64, tm: bool) -> Option<f64> {
    let f = |n| slab_equation(ns, nf, nc, d, lambda, tm, n);
    let (mut lo, mut hi) = (ns.max(nc) + 1e-13, nf - 1e-13);
    if f(lo) <= 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn facets() -> serde_json::Value {
    serde_json::json!({ "R_teb": 0.3, "R_te00": 0.3, "R_tm00": 0.3 })
}

fn fundamental(modes: &[GuidedMode]) -> Option<&GuidedMode> {
    modes.iter().find(|m| m.family == ModeFamily::Tir && m.order == 0)
}

#[test]
fn symmetric_slab_matches_oracle() {
    let rs = ResolvedStack::from_indices(1570.0, 3.2, 3.2, &[(3.5, 300.0)], None);
    let te = find_modes_resolved(&rs, Polarization::TE, &SolverOptions::default());
    let want = slab_oracle(3.2, 3.5, 3.2, 300.0, 1570.0, false).unwrap();
    let got = fundamental(&te).unwrap().n_eff;
    assert!((got.re - want).abs() < 1e-6, "{} vs {want}", got.re);
}

#[test]
fn random_slabs_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    while checked < 10 {
        let nf = rng.random_range(3.2..3.6);
        let ns = nf - rng.random_range(0.05..0.4);
        let nc = if rng.random_bool(0.3) { 1.0 } else { nf - rng.random_range(0.05..0.4) };
        let d = rng.random_range(200.0..1000.0);
        let lambda = rng.random_range(800.0..1600.0);
        let tm = rng.random_bool(0.5);
        let Some(want) = slab_oracle(ns, nf, nc, d, lambda, tm) else { continue };
        let rs = ResolvedStack::from_indices(lambda, ns, nc, &[(nf, d)], None);
        let pol = if tm { Polarization::TM } else { Polarization::TE };
        let modes = find_modes_resolved(&rs, pol, &SolverOptions::default());
        let got = fundamental(&modes).unwrap_or_else(|| panic!("no fundamental mode for {ns} {nf} {nc} {d} {lambda}"));
        assert!((got.n_eff.re - want).abs() < 1e-6, "{pol:?} {ns} {nf} {nc} {d} {lambda}: {} vs {want}", got.n_eff.re);
        assert!(got.residual < 1e-10);
        checked += 1;
    }
}

#[test]
fn below_cutoff_has_no_fundamental() {
    let (ns, nf, nc, lambda): (f64, f64, f64, f64) = (3.4, 3.5, 1.0, 1570.0);
    let k0 = 2.0 * PI / lambda;
    let cutoff = ((ns * ns - nc * nc) / (nf * nf - ns * ns)).sqrt().atan() / (k0 * (nf * nf - ns * ns).sqrt());
    let rs = ResolvedStack::from_indices(lambda, ns, nc, &[(nf, 0.5 * cutoff)], None);
    let te = find_modes_resolved(&rs, Polarization::TE, &SolverOptions::default());
    assert!(fundamental(&te).is_none(), "{te:?}");
    let rs = ResolvedStack::from_indices(lambda, ns, nc, &[(nf, 1.5 * cutoff)], None);
    let te = find_modes_resolved(&rs, Polarization::TE, &SolverOptions::default());
    assert!(fundamental(&te).is_some());
}

#[test]
fn lossless_roots_are_real_and_loss_makes_them_decay() {
    let rs = ResolvedStack::from_indices(1300.0, 3.2, 3.25, &[(3.3, 250.0), (3.5, 600.0), (3.3, 250.0)], Some(1..2));
    for pol in [Polarization::TE, Polarization::TM] {
        let modes = find_modes_resolved(&rs, pol, &SolverOptions::default());
        assert!(!modes.is_empty());
        for m in &modes {
            assert!(m.n_eff.im.abs() < 1e-12, "{pol:?} {}", m.n_eff);
        }
        let mut lossy = rs.clone();
        lossy.indices[1] = C::new(3.5, 1e-5);
        let lm = find_modes_resolved(&lossy, pol, &SolverOptions::default());
        let m = fundamental(&lm).unwrap();
        assert!(m.n_eff.im > 0.0 && m.alpha_cm1 > 0.0);
        let expected = 4.0 * PI * m.n_eff.im / (1300.0 * 1e-7);
        assert!((m.alpha_cm1 - expected).abs() < 1e-9 * expected);
    }
}

#[test]
fn distinct_modes_are_orthogonal() {
    let rs = ResolvedStack::from_indices(1000.0, 3.2, 3.15, &[(3.5, 1500.0)], None);
    for pol in [Polarization::TE, Polarization::TM] {
        let modes = find_modes_resolved(&rs, pol, &SolverOptions::default());
        assert!(modes.len() >= 3, "{}", modes.len());
        for (i, a) in modes.iter().enumerate() {
            assert!((mode_overlap(&rs, pol, a.n_eff, a.n_eff, 1000.0) - 1.0).abs() < 1e-9);
            for b in &modes[i + 1..] {
                let o = mode_overlap(&rs, pol, a.n_eff, b.n_eff, 20000.0);
                assert!(o < 1e-6, "{pol:?} {} {}: {o}", a.n_eff, b.n_eff);
            }
        }
    }
}

#[test]
fn profiles_are_normalized_and_confinement_grid_independent() {
    let rs = ResolvedStack::from_indices(1570.0, 3.2, 3.2, &[(3.3, 200.0), (3.5, 300.0), (3.3, 200.0)], Some(1..2));
    let coarse = SolverOptions::default();
    let fine = SolverOptions {
        profile_step_nm: coarse.profile_step_nm / 2.0,
        ..coarse.clone()
    };
    let a = find_modes_resolved(&rs, Polarization::TE, &coarse);
    let b = find_modes_resolved(&rs, Polarization::TE, &fine);
    assert_eq!(a.len(), b.len());
    for (ma, mb) in a.iter().zip(&b) {
        assert!((ma.profile.norm() - 1.0).abs() < 1e-12);
        assert!((mb.profile.norm() - 1.0).abs() < 1e-12);
        assert!((ma.confinement - mb.confinement).abs() < 1e-4);
        assert!(ma.confinement > 0.0 && ma.confinement < 1.0);
    }
}

#[test]
fn modes_are_sorted_and_tir_indices_bounded() {
    let rs = ResolvedStack::from_indices(980.0, 3.1, 1.0, &[(3.3, 400.0), (3.55, 900.0), (3.3, 400.0)], Some(1..2));
    let modes = find_modes_resolved(&rs, Polarization::TE, &SolverOptions::default());
    assert!(modes.windows(2).all(|w| w[0].n_eff.re >= w[1].n_eff.re));
    for m in modes.iter().filter(|m| m.family == ModeFamily::Tir) {
        assert!(m.n_eff.re > 3.1 && m.n_eff.re < 3.55);
    }
}

#[test]
fn bundled_stack_has_bragg_mode_peaked_in_core() {
    let table = DispersionTable::bundled();
    let stack = parse_stack(include_str!("../data/paper_device.json"), &table).unwrap();
    let modes = find_modes(&stack, 785.0, Polarization::TE, &table, &SolverOptions::default()).unwrap();
    let teb = modes.iter().find(|m| m.family == ModeFamily::Bragg).expect("Bragg mode");
    let (z0, z1) = teb.core_span_nm;
    let peak = teb.profile.peak_z_nm();
    assert!(peak >= z0 && peak <= z1, "peak {peak} outside core [{z0}, {z1}]");
    assert!((z1 - z0 - 298.0).abs() < 1e-9);
    assert!(teb.confinement > 0.15);
    assert!(teb.n_eff.re < resolve(&stack, 785.0, stack.temperature_k, &table, false).unwrap().cladding_equivalent_index());
}

#[test]
fn bragg_reflectance_grows_with_periods() {
    let table = DispersionTable::bundled();
    let mut last = 0.0;
    for periods in 1..=8 {
        let layers = build_bragg(785.0, periods, 0.25, 0.80, 293.15, &table).unwrap();
        let doc = serde_json::json!({ "substrate": { "x": 0.8 }, "superstrate": { "x": 0.8 }, "layers": layers, "facets": facets(), "temperature_K": 293.15 });
        let stack = parse_stack(&doc.to_string(), &table).unwrap();
        let rs = resolve(&stack, 785.0, 293.15, &table, false).unwrap();
        let r = normal_incidence_reflectance(&rs);
        assert!(r > last, "{periods} periods: {r} ≤ {last}");
        assert!(r < 1.0);
        last = r;
    }
}

#[test]
fn group_index_of_cauchy_samples() {
    let (a, b) = (3.2, 2.0e5);
    let grid = wavelength_grid(1500.0, 1640.0, 0.1);
    let n: Vec<f64> = grid.iter().map(|l| a + b / (l * l)).collect();
    let ng = group_index_from_samples(&grid, &n).unwrap();
    for (l, g) in grid.iter().zip(ng) {
        assert!((g - (a + 3.0 * b / (l * l))).abs() < 1e-6, "{l}: {g}");
    }
    let flat = vec![3.3; grid.len()];
    assert!(group_index_from_samples(&grid, &flat).unwrap().iter().all(|g| (g - 3.3).abs() < 1e-9));
    assert!(group_index_from_samples(&[1.0, 1.0, 2.0], &[1.0, 1.0, 1.0]).is_err());
}

fn cauchy_table() -> DispersionTable {
    DispersionTable::cauchy(
        vec![3.55, -0.45],
        vec![0.0],
        Validity {
            wavelength_nm: [500.0, 2500.0],
            temperature_k: [200.0, 400.0],
            composition_x: [0.0, 1.0],
        },
    )
}

#[test]
fn dispersionless_materials() {
    // Constant layer indices: the curve follows the slab oracle and only
    // geometric dispersion remains.
    let table = cauchy_table();
    let doc = serde_json::json!({
        "substrate": { "x": 0.5 },
        "superstrate": { "x": 0.5 },
        "layers": [{ "x": 0.0, "thickness_nm": 500.0, "label": "core", "core": true }],
        "facets": facets(), "temperature_K": 293.15
    });
    let stack = parse_stack(&doc.to_string(), &table).unwrap();
    let grid = wavelength_grid(1500.0, 1600.0, 10.0);
    let sel = ModeSelector::new(Polarization::TE, ModeFamily::Tir, 0);
    let curve = dispersion_curve(&stack, sel, &grid, 293.15, &table, &SolverOptions::default()).unwrap();
    for (i, l) in curve.wavelength_nm.iter().enumerate() {
        let slab = slab_oracle(3.325, 3.55, 3.325, 500.0, *l, false).unwrap();
        assert!((curve.n_eff[i].re - slab).abs() < 1e-6);
    }
    let constant = DispersionCurve::constant(sel, 293.15, (1500.0, 1600.0), 3.4);
    for l in [1500.0, 1550.0, 1600.0] {
        assert!((constant.group_index_at(l).unwrap() - 3.4).abs() < 1e-12);
    }
}

#[test]
fn lost_mode_reports_tracking_error() {
    let table = cauchy_table();
    // Thin guide: the fundamental exists only at short wavelengths.
    let doc = serde_json::json!({
        "substrate": { "x": 0.3 },
        "superstrate": "air",
        "layers": [{ "x": 0.0, "thickness_nm": 300.0, "label": "core", "core": true }],
        "facets": facets(), "temperature_K": 293.15
    });
    let stack = parse_stack(&doc.to_string(), &table).unwrap();
    let grid = wavelength_grid(600.0, 2400.0, 100.0);
    let sel = ModeSelector::new(Polarization::TE, ModeFamily::Tir, 0);
    match dispersion_curve(&stack, sel, &grid, 293.15, &table, &SolverOptions::default()) {
        Err(ModeError::Tracking { last_good_nm, lost, .. }) => {
            assert!(lost > 0 && last_good_nm < 2400.0);
        }
        other => panic!("expected tracking error, got {other:?}"),
    }
}

#[test]
fn curve_csv_header() {
    let sel = ModeSelector::new(Polarization::TM, ModeFamily::Tir, 0);
    let c = DispersionCurve::constant(sel, 293.15, (1500.0, 1600.0), 3.1);
    assert!(c.to_csv().starts_with("wavelength_nm,n_eff_re,n_eff_im,n_g,alpha_cm1\n"));
}

fn gaussian(center: f64, width: f64, amp: f64) -> FieldProfile {
    let step = 2.0;
    let values = (0..1001)
        .map(|i| {
            let z = -1000.0 + i as f64 * step;
            C::new(amp * (-((z - center) / width).powi(2)).exp(), 0.0)
        })
        .collect();
    FieldProfile {
        z_start_nm: -1000.0,
        step_nm: step,
        values,
    }
}

#[test]
fn overlap_of_gaussians_matches_closed_form() {
    let (p, s, i) = (gaussian(0.0, 150.0, 1.0), gaussian(20.0, 200.0, 1.0), gaussian(-30.0, 250.0, 1.0));
    let got = profile_overlap(&p, &s, &i, &NonlinearProfile::uniform(1.0)).unwrap();
    // ∫exp(−Σ(z−c_k)²/w_k²) = sqrt(π/A)·exp(B²/4A − C).
    let (c, w) = ([0.0, 20.0, -30.0], [150.0, 200.0, 250.0]);
    let a: f64 = w.iter().map(|w| 1.0 / (w * w)).sum();
    let b: f64 = c.iter().zip(&w).map(|(c, w)| 2.0 * c / (w * w)).sum();
    let cc: f64 = c.iter().zip(&w).map(|(c, w)| c * c / (w * w)).sum();
    let num = (PI / a).sqrt() * (b * b / (4.0 * a) - cc).exp();
    let norm = |w: f64| (PI / 2.0).sqrt() * w;
    let want = num / (norm(150.0) * norm(200.0) * norm(250.0)).sqrt() * 1e3f64.sqrt();
    assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn overlap_is_scale_invariant_and_vanishes_without_nonlinearity() {
    let (p, s, i) = (gaussian(0.0, 150.0, 1.0), gaussian(20.0, 200.0, 1.0), gaussian(-30.0, 250.0, 1.0));
    let d = NonlinearProfile {
        segments: vec![(-200.0, 100.0, 110.0), (100.0, 400.0, 60.0)],
    };
    let base = profile_overlap(&p, &s, &i, &d).unwrap();
    let scaled = profile_overlap(&p, &s.scaled(7.0), &i, &d).unwrap();
    assert!((base - scaled).abs() < 1e-12 * base);
    assert_eq!(profile_overlap(&p, &s, &i, &NonlinearProfile::uniform(0.0)).unwrap(), 0.0);
    let far = FieldProfile {
        z_start_nm: 5000.0,
        ..gaussian(0.0, 100.0, 1.0)
    };
    assert!(matches!(profile_overlap(&p, &s, &far, &d), Err(ModeError::Overlap(_))));
}

#[test]
fn overlap_resamples_mismatched_grids() {
    let p = gaussian(0.0, 150.0, 1.0);
    let coarse = FieldProfile {
        z_start_nm: -1000.0,
        step_nm: 4.0,
        values: (0..501).map(|k| C::new((-((-1000.0 + 4.0 * k as f64) / 150.0f64).powi(2)).exp(), 0.0)).collect(),
    };
    let same = profile_overlap(&p, &p, &p, &NonlinearProfile::uniform(1.0)).unwrap();
    let mixed = profile_overlap(&p, &coarse, &p, &NonlinearProfile::uniform(1.0)).unwrap();
    assert!(((same - mixed) / same).abs() < 1e-4);
}
