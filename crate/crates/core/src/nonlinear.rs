//! Type-II modal phase matching, second-harmonic spectra with Fabry–Perot
//! modulation, Fabry–Perot loss extraction and SPDC efficiency conversions.
//!
//! The pump travels in the Bragg mode (TEB), the signal in TE00 and the idler
//! in TM00. A phase-matched triple satisfies energy conservation
//! `1/λp = 1/λs + 1/λi` and `n_p/λp = n_s/λs + n_i/λi`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layerstack::LayerStack;
use crate::materials::DispersionTable;
use crate::modesolver::{
    dispersion_curve, wavelength_grid, DispersionCurve, ModeError, ModeFamily, ModeSelector, Polarization, SolverOptions,
};
use crate::units::{photon_energy_j, NM_PER_CM};

/// Half-maximum argument of sinc²: sin²(x)/x² = 1/2 at x = ±1.3915573.
pub const SINC2_HALF_MAX: f64 = 1.391_557_377_276_27;

pub const PUMP_MODE: ModeSelector = ModeSelector::new(Polarization::TE, ModeFamily::Bragg, 0);
pub const SIGNAL_MODE: ModeSelector = ModeSelector::new(Polarization::TE, ModeFamily::Tir, 0);
pub const IDLER_MODE: ModeSelector = ModeSelector::new(Polarization::TM, ModeFamily::Tir, 0);

#[derive(Debug, Error)]
pub enum NonlinearError {
    #[error(transparent)]
    Mode(#[from] ModeError),
    #[error("no phase-matching solution: {0}")]
    NoSolution(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("fit did not converge after {iterations} iterations (residual norm {residual:.4e})")]
    FitFailed { iterations: usize, residual: f64 },
    #[error("loss extraction: {0}")]
    Extraction(String),
}

pub type Result<T> = std::result::Result<T, NonlinearError>;

/// Idler wavelength from energy conservation.
pub fn idler_wavelength(lambda_p_nm: f64, lambda_s_nm: f64) -> f64 {
    1.0 / (1.0 / lambda_p_nm - 1.0 / lambda_s_nm)
}

/// Dispersion of the three interacting modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMatchCurves {
    pub pump: DispersionCurve,
    pub signal: DispersionCurve,
    pub idler: DispersionCurve,
}

/// Wavelength windows over which the three curves are computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSettings {
    pub pump_range_nm: (f64, f64),
    pub pump_step_nm: f64,
    pub fundamental_range_nm: (f64, f64),
    pub fundamental_step_nm: f64,
}

impl Default for CurveSettings {
    fn default() -> Self {
        Self {
            pump_range_nm: (765.0, 805.0),
            pump_step_nm: 1.0,
            fundamental_range_nm: (1360.0, 1790.0),
            fundamental_step_nm: 5.0,
        }
    }
}

impl PhaseMatchCurves {
    pub fn compute(
        stack: &LayerStack,
        temperature_k: f64,
        table: &DispersionTable,
        opts: &SolverOptions,
        settings: &CurveSettings,
    ) -> Result<Self> {
        let (p0, p1) = settings.pump_range_nm;
        let (f0, f1) = settings.fundamental_range_nm;
        let pump_grid = wavelength_grid(p0, p1, settings.pump_step_nm);
        let fund_grid = wavelength_grid(f0, f1, settings.fundamental_step_nm);
        let jobs = [(PUMP_MODE, &pump_grid), (SIGNAL_MODE, &fund_grid), (IDLER_MODE, &fund_grid)];
        let mut curves = jobs
            .par_iter()
            .map(|(sel, grid)| dispersion_curve(stack, *sel, grid, temperature_k, table, opts))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let idler = curves.pop().unwrap();
        let signal = curves.pop().unwrap();
        let pump = curves.pop().unwrap();
        Ok(Self { pump, signal, idler })
    }

    pub fn temperature_k(&self) -> f64 {
        self.pump.temperature_k
    }
}

/// `Δk = 2π·[n_p/λp − n_s/λs − n_i/λi]` in rad/cm, with λi from energy
/// conservation.
pub fn phase_mismatch(curves: &PhaseMatchCurves, lambda_p_nm: f64, lambda_s_nm: f64) -> Result<f64> {
    let lambda_i = idler_wavelength(lambda_p_nm, lambda_s_nm);
    if !(lambda_i > 0.0) {
        return Err(NonlinearError::Invalid(format!(
            "signal {lambda_s_nm} nm is not longer than pump {lambda_p_nm} nm"
        )));
    }
    let np = curves.pump.n_at(lambda_p_nm)?;
    let ns = curves.signal.n_at(lambda_s_nm)?;
    let ni = curves.idler.n_at(lambda_i)?;
    Ok(2.0 * PI * NM_PER_CM * (np / lambda_p_nm - ns / lambda_s_nm - ni / lambda_i))
}

/// SHG mismatch at fundamental wavelength λ (pump λ/2, signal = idler = λ).
pub fn shg_mismatch(curves: &PhaseMatchCurves, fundamental_nm: f64) -> Result<f64> {
    let np = curves.pump.n_at(fundamental_nm / 2.0)?;
    let ns = curves.signal.n_at(fundamental_nm)?;
    let ni = curves.idler.n_at(fundamental_nm)?;
    Ok(2.0 * PI * NM_PER_CM * (2.0 * np - ns - ni) / fundamental_nm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMatchPoint {
    pub lambda_p_nm: f64,
    pub lambda_s_nm: f64,
    pub lambda_i_nm: f64,
    pub temperature_k: f64,
    pub delta_k_rad_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningCurve {
    pub temperature_k: f64,
    /// Sorted by pump then signal wavelength.
    pub points: Vec<PhaseMatchPoint>,
    pub degeneracy_pump_nm: f64,
    /// Pump wavelengths without a solution, with the reason.
    pub skipped: Vec<(f64, String)>,
}

impl TuningCurve {
    pub fn degenerate_point(&self) -> &PhaseMatchPoint {
        self.points
            .iter()
            .find(|p| p.lambda_p_nm == self.degeneracy_pump_nm && p.lambda_s_nm == p.lambda_i_nm)
            .expect("degenerate point is always present")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("T_K,lambda_p_nm,lambda_s_nm,lambda_i_nm\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{},{}", p.temperature_k, p.lambda_p_nm, p.lambda_s_nm, p.lambda_i_nm);
        }
        s
    }
}

/// Bisection on a bracketed sign change followed by secant polishing.
fn refine_root(f: impl Fn(f64) -> Result<f64>, mut a: f64, mut b: f64, tolerance: f64) -> Result<f64> {
    let mut fa = f(a)?;
    let fb = f(b)?;
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    for _ in 0..80 {
        let m = 0.5 * (a + b);
        let fm = f(m)?;
        if fm == 0.0 || (b - a).abs() < 1e-12 * m.abs() {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    let (mut x0, mut x1) = (a, b);
    let (mut f0, mut f1) = (f(a)?, f(b)?);
    for _ in 0..10 {
        if f1.abs() < tolerance || f1 == f0 {
            break;
        }
        let x2 = x1 - f1 * (x1 - x0) / (f1 - f0);
        x0 = x1;
        f0 = f1;
        x1 = x2;
        f1 = f(x1)?;
    }
    Ok(if f1.abs() <= f0.abs() { x1 } else { x0 })
}

/// Sign changes of `f` on a grid (NaN samples break brackets).
fn brackets(grid: &[f64], f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
    let values: Vec<f64> = grid.iter().map(|&x| f(x)).collect();
    grid.windows(2)
        .zip(values.windows(2))
        .filter(|(_, v)| v[0].is_finite() && v[1].is_finite() && v[0].signum() != v[1].signum())
        .map(|(x, _)| (x[0], x[1]))
        .collect()
}

/// Pump wavelength at which signal and idler are degenerate.
pub fn degeneracy(curves: &PhaseMatchCurves) -> Result<f64> {
    let (p0, p1) = curves.pump.range_nm();
    let (s0, s1) = curves.signal.range_nm();
    let (i0, i1) = curves.idler.range_nm();
    let lo = p0.max(s0 / 2.0).max(i0 / 2.0);
    let hi = p1.min(s1 / 2.0).min(i1 / 2.0);
    if !(hi > lo) {
        return Err(NonlinearError::NoSolution("pump and fundamental curves do not overlap at degeneracy".into()));
    }
    let g = |l: f64| shg_mismatch(curves, 2.0 * l);
    let grid = wavelength_grid(lo, hi, 0.05);
    let found = brackets(&grid, |l| g(l).unwrap_or(f64::NAN));
    let mid = 0.5 * (lo + hi);
    let (a, b) = found
        .into_iter()
        .min_by(|x, y| (x.0 - mid).abs().total_cmp(&(y.0 - mid).abs()))
        .ok_or_else(|| NonlinearError::NoSolution(format!("Δk(λp, 2λp) keeps its sign over [{lo:.2}, {hi:.2}] nm")))?;
    refine_root(g, a, b, 1e-6)
}

/// Tuning curve at the curves' temperature over a pump grid: every signal
/// root in `[2λp − 200, 2λp + 200]` nm plus the degenerate point, once.
pub fn tuning_curve(curves: &PhaseMatchCurves, pump_grid_nm: &[f64]) -> Result<TuningCurve> {
    let temperature_k = curves.temperature_k();
    let deg = degeneracy(curves)?;
    let (s0, s1) = curves.signal.range_nm();
    let (i0, i1) = curves.idler.range_nm();
    let per_pump: Vec<std::result::Result<Vec<PhaseMatchPoint>, (f64, String)>> = pump_grid_nm
        .par_iter()
        .map(|&lp| {
            let lo = (2.0 * lp - 200.0).max(s0);
            let hi = (2.0 * lp + 200.0).min(s1);
            if !(hi > lo) {
                return Err((lp, "signal window outside the TE00 curve".to_string()));
            }
            let dk = |ls: f64| {
                let li = idler_wavelength(lp, ls);
                if li < i0 || li > i1 {
                    return f64::NAN;
                }
                phase_mismatch(curves, lp, ls).unwrap_or(f64::NAN)
            };
            let grid = wavelength_grid(lo, hi, 0.5);
            let mut pts = Vec::new();
            for (a, b) in brackets(&grid, dk) {
                let ls = refine_root(|x| phase_mismatch(curves, lp, x), a, b, 1e-6).map_err(|e| (lp, e.to_string()))?;
                let delta_k = phase_mismatch(curves, lp, ls).map_err(|e| (lp, e.to_string()))?;
                if delta_k.abs() < 1e-4 {
                    pts.push(PhaseMatchPoint {
                        lambda_p_nm: lp,
                        lambda_s_nm: ls,
                        lambda_i_nm: idler_wavelength(lp, ls),
                        temperature_k,
                        delta_k_rad_cm: delta_k,
                    });
                }
            }
            if pts.is_empty() {
                Err((lp, "no sign change of Δk in the signal window".to_string()))
            } else {
                Ok(pts)
            }
        })
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for r in per_pump {
        match r {
            Ok(p) => points.extend(p),
            Err(s) => skipped.push(s),
        }
    }
    points.retain(|p| !(p.lambda_p_nm == deg));
    points.push(PhaseMatchPoint {
        lambda_p_nm: deg,
        lambda_s_nm: 2.0 * deg,
        lambda_i_nm: 2.0 * deg,
        temperature_k,
        delta_k_rad_cm: shg_mismatch(curves, 2.0 * deg)?,
    });
    points.sort_by(|a, b| a.lambda_p_nm.total_cmp(&b.lambda_p_nm).then(a.lambda_s_nm.total_cmp(&b.lambda_s_nm)));
    Ok(TuningCurve {
        temperature_k,
        points,
        degeneracy_pump_nm: deg,
        skipped,
    })
}

/// Compute the curves of `stack` at `temperature_k` and the tuning curve over
/// `pump_range_nm` (sampled at `pump_step_nm`).
pub fn tuning_curves(
    stack: &LayerStack,
    temperature_k: f64,
    pump_range_nm: (f64, f64),
    pump_step_nm: f64,
    table: &DispersionTable,
    opts: &SolverOptions,
    settings: &CurveSettings,
) -> Result<(PhaseMatchCurves, TuningCurve)> {
    let curves = PhaseMatchCurves::compute(stack, temperature_k, table, opts, settings)?;
    let grid = wavelength_grid(pump_range_nm.0, pump_range_nm.1, pump_step_nm);
    let tc = tuning_curve(&curves, &grid)?;
    Ok((curves, tc))
}

/// Centre and FWHM (fundamental wavelength, nm) of the SHG envelope
/// `sinc²(Δk·L/2)` for a guide of length `length_cm`.
pub fn shg_bandwidth(curves: &PhaseMatchCurves, length_cm: f64) -> Result<(f64, f64)> {
    let center = 2.0 * degeneracy(curves)?;
    let arg = |l: f64| shg_mismatch(curves, l).map(|dk| dk * length_cm / 2.0);
    let edge = |dir: f64| -> Result<f64> {
        let mut step = 0.05;
        let mut far = center + dir * step;
        while arg(far)?.abs() < SINC2_HALF_MAX {
            step *= 1.5;
            far = center + dir * step;
            if step > 100.0 {
                return Err(NonlinearError::NoSolution("phase-matching envelope has no half-maximum".into()));
            }
        }
        let f = |l: f64| arg(l).map(|a| a.abs() - SINC2_HALF_MAX);
        refine_root(f, center, far, 1e-12)
    };
    let (lo, hi) = (edge(-1.0)?, edge(1.0)?);
    Ok((center, hi - lo))
}

/// Facet and propagation data of one mode in the SHG cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityMode {
    pub reflectivity: f64,
    pub alpha_cm1: f64,
    pub group_index: f64,
    /// Round-trip phase at the reference wavelength.
    pub phase_rad: f64,
}

impl CavityMode {
    pub fn lossless_open(group_index: f64) -> Self {
        Self {
            reflectivity: 0.0,
            alpha_cm1: 0.0,
            group_index,
            phase_rad: 0.0,
        }
    }

    /// Standing-wave Airy enhancement `(1−R)/((1−R')² + 4R'·sin²(φ/2))`
    /// with `R' = R·e^{−αL}`; equals 1 for R = 0.
    pub fn airy(&self, phase: f64, length_cm: f64) -> f64 {
        let rp = self.reflectivity * (-self.alpha_cm1 * length_cm).exp();
        let s = (phase / 2.0).sin();
        (1.0 - self.reflectivity) / ((1.0 - rp).powi(2) + 4.0 * rp * s * s)
    }

    /// Phase average of [`CavityMode::airy`].
    pub fn mean_airy(&self, length_cm: f64) -> f64 {
        let rp = self.reflectivity * (-self.alpha_cm1 * length_cm).exp();
        (1.0 - self.reflectivity) / (1.0 - rp * rp)
    }
}

/// Phase-matching envelope of the SHG spectrum.
#[derive(Debug, Clone, Copy)]
pub enum Envelope<'a> {
    /// `sinc²` with the given centre and FWHM (fundamental wavelength).
    Parametric { center_nm: f64, fwhm_nm: f64 },
    /// `sinc²(Δk·L/2)` from the modal dispersion.
    Curves(&'a PhaseMatchCurves),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShgModel {
    /// Normalized conversion efficiency, %·W⁻¹·cm⁻².
    pub eta_pct_per_w_cm2: f64,
    pub length_cm: f64,
    pub fundamental_power_w: f64,
    pub te: CavityMode,
    pub tm: CavityMode,
    pub teb: CavityMode,
    /// Wavelength at which the cavity phases are quoted.
    pub phase_reference_nm: f64,
}

impl ShgModel {
    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("TE00", self.te), ("TM00", self.tm), ("TEB", self.teb)] {
            if !(0.0..1.0).contains(&m.reflectivity) {
                return Err(NonlinearError::Invalid(format!("{name} reflectivity {} outside [0, 1)", m.reflectivity)));
            }
            if m.alpha_cm1 < 0.0 {
                return Err(NonlinearError::Invalid(format!("{name} loss {} cm⁻¹ is negative", m.alpha_cm1)));
            }
        }
        if !(self.length_cm > 0.0) || self.eta_pct_per_w_cm2 < 0.0 || self.fundamental_power_w < 0.0 {
            return Err(NonlinearError::Invalid("length must be positive, η and power non-negative".into()));
        }
        Ok(())
    }

    /// Product of the three Airy factors at fundamental wavelength λ.
    pub fn cavity_factor(&self, lambda_nm: f64) -> f64 {
        let l = self.length_cm * NM_PER_CM;
        let dnu = 1.0 / lambda_nm - 1.0 / self.phase_reference_nm;
        let phi = |m: &CavityMode, harmonic: f64| m.phase_rad + 4.0 * PI * harmonic * m.group_index * l * dnu;
        self.te.airy(phi(&self.te, 1.0), self.length_cm)
            * self.tm.airy(phi(&self.tm, 1.0), self.length_cm)
            * self.teb.airy(phi(&self.teb, 2.0), self.length_cm)
    }

    fn peak_power(&self) -> f64 {
        self.eta_pct_per_w_cm2 / 100.0 * self.length_cm.powi(2) * self.fundamental_power_w.powi(2)
    }
}

fn sinc2(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0
    } else {
        (x.sin() / x).powi(2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub wavelength_nm: Vec<f64>,
    pub power: Vec<f64>,
}

impl Spectrum {
    /// `lambda_nm,P_sh_norm` with power normalized to its maximum.
    pub fn to_csv(&self) -> String {
        let max = self.power.iter().cloned().fold(0.0, f64::max);
        let mut s = String::from("lambda_nm,P_sh_norm\n");
        for (l, p) in self.wavelength_nm.iter().zip(&self.power) {
            let v = if max > 0.0 { p / max } else { 0.0 };
            let _ = writeln!(s, "{l},{v}");
        }
        s
    }

    /// Read a two-column `lambda_nm,intensity` CSV.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut out = Spectrum {
            wavelength_nm: vec![],
            power: vec![],
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| NonlinearError::Invalid(format!("spectrum row {}: {e}", i + 1)))?;
            let parse = |k: usize| -> Result<f64> {
                rec.get(k)
                    .ok_or_else(|| NonlinearError::Invalid(format!("spectrum row {} has fewer than two columns", i + 1)))?
                    .parse::<f64>()
                    .map_err(|e| NonlinearError::Invalid(format!("spectrum row {}: {e}", i + 1)))
            };
            out.wavelength_nm.push(parse(0)?);
            out.power.push(parse(1)?);
        }
        Ok(out)
    }
}

/// SH power (W) versus fundamental wavelength:
/// `η·L²·P²·envelope(λ)·A_TE·A_TM·A_TEB`.
pub fn shg_spectrum(model: &ShgModel, envelope: Envelope, grid_nm: &[f64]) -> Result<Spectrum> {
    model.validate()?;
    let peak = model.peak_power();
    let power = grid_nm
        .iter()
        .map(|&l| {
            let env = match envelope {
                Envelope::Parametric { center_nm, fwhm_nm } => sinc2(2.0 * SINC2_HALF_MAX * (l - center_nm) / fwhm_nm),
                Envelope::Curves(c) => sinc2(shg_mismatch(c, l)? * model.length_cm / 2.0),
            };
            Ok(peak * env * model.cavity_factor(l))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(Spectrum {
        wavelength_nm: grid_nm.to_vec(),
        power,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShgFit {
    pub eta_pct_per_w_cm2: f64,
    pub center_nm: f64,
    pub fwhm_nm: f64,
    /// Cavity phases (TE00, TM00, TEB) at the reference wavelength.
    pub phases_rad: [f64; 3],
    pub reflectivities: [f64; 3],
    pub alphas_cm1: [f64; 3],
    pub residual_norm: f64,
    pub iterations: usize,
    /// Set when the spectrum carries no signal to fit.
    pub degenerate: bool,
}

impl ShgFit {
    pub fn model(&self, template: &ShgModel) -> ShgModel {
        let mut m = *template;
        m.eta_pct_per_w_cm2 = self.eta_pct_per_w_cm2;
        m.te.phase_rad = self.phases_rad[0];
        m.tm.phase_rad = self.phases_rad[1];
        m.teb.phase_rad = self.phases_rad[2];
        m
    }
}

fn parametric_values(template: &ShgModel, p: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut m = *template;
    m.eta_pct_per_w_cm2 = p[0];
    m.te.phase_rad = p[3];
    m.tm.phase_rad = p[4];
    m.teb.phase_rad = p[5];
    let peak = m.peak_power();
    grid.iter()
        .map(|&l| peak * sinc2(2.0 * SINC2_HALF_MAX * (l - p[1]) / p[2].abs()) * m.cavity_factor(l))
        .collect()
}

fn smooth(values: &[f64], half_width: usize) -> Vec<f64> {
    let box_pass = |v: &[f64]| -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                let a = i.saturating_sub(half_width);
                let b = (i + half_width + 1).min(v.len());
                v[a..b].iter().sum::<f64>() / (b - a) as f64
            })
            .collect()
    };
    box_pass(&box_pass(values))
}

fn sse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Hand-rolled Levenberg–Marquardt with a forward-difference Jacobian.
fn levenberg_marquardt(
    f: impl Fn(&[f64]) -> Vec<f64>,
    data: &[f64],
    start: Vec<f64>,
    steps: &[f64],
    max_iterations: usize,
) -> (Vec<f64>, f64, usize, bool) {
    let n = start.len();
    let mut p = start;
    let mut model = f(&p);
    let mut cost = sse(&model, data);
    let mut mu = 1e-3;
    let mut converged = false;
    let mut it = 0;
    while it < max_iterations {
        it += 1;
        let r = DVector::from_iterator(data.len(), data.iter().zip(&model).map(|(y, m)| y - m));
        let mut jac = DMatrix::zeros(data.len(), n);
        for k in 0..n {
            let mut q = p.clone();
            let h = steps[k] * p[k].abs().max(1.0);
            q[k] += h;
            let mq = f(&q);
            for (i, v) in mq.iter().enumerate() {
                jac[(i, k)] = (v - model[i]) / h;
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..n {
                a[(k, k)] += mu * jtj[(k, k)].max(1e-30);
            }
            let Some(delta) = a.lu().solve(&jtr) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            let tm = f(&trial);
            let tc = sse(&tm, data);
            if tc.is_finite() && tc < cost {
                let rel = (cost - tc) / cost.max(1e-300);
                let small_step = delta.iter().zip(&p).all(|(d, x)| d.abs() <= 1e-12 * x.abs().max(1.0));
                p = trial;
                model = tm;
                cost = tc;
                mu = (mu / 3.0).max(1e-12);
                improved = true;
                if rel < 1e-14 || small_step {
                    converged = true;
                }
                break;
            }
            mu *= 4.0;
        }
        if !improved {
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }
    (p, cost, it, converged)
}

/// Least-squares fit of (η, centre, FWHM, cavity phases) with reflectivities,
/// losses and group indices fixed by `template`.
pub fn fit_shg(spectrum: &Spectrum, template: &ShgModel) -> Result<ShgFit> {
    template.validate()?;
    let grid = &spectrum.wavelength_nm;
    let data = &spectrum.power;
    if grid.len() < 10 || grid.len() != data.len() {
        return Err(NonlinearError::Invalid("spectrum needs at least 10 samples of matching length".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(NonlinearError::Invalid("spectrum wavelengths must be strictly increasing".into()));
    }
    let base = ShgFit {
        eta_pct_per_w_cm2: 0.0,
        center_nm: 0.5 * (grid[0] + grid[grid.len() - 1]),
        fwhm_nm: 0.0,
        phases_rad: [0.0; 3],
        reflectivities: [template.te.reflectivity, template.tm.reflectivity, template.teb.reflectivity],
        alphas_cm1: [template.te.alpha_cm1, template.tm.alpha_cm1, template.teb.alpha_cm1],
        residual_norm: 0.0,
        iterations: 0,
        degenerate: true,
    };
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Ok(base);
    }
    let step = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    let l = template.length_cm * NM_PER_CM;
    let ng = template.te.group_index.max(template.tm.group_index);
    let fringe = grid[grid.len() / 2].powi(2) / (2.0 * ng * l);
    let smoothed = smooth(data, ((fringe / step / 2.0).round() as usize).max(1));
    let (imax, smax) = smoothed
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    let left = (0..imax).rev().find(|&i| smoothed[i] < smax / 2.0).unwrap_or(0);
    let right = (imax..grid.len()).find(|&i| smoothed[i] < smax / 2.0).unwrap_or(grid.len() - 1);
    let w0 = (grid[right] - grid[left]).max(2.0 * step);
    let c0 = grid[imax];
    let mean_cavity = template.te.mean_airy(template.length_cm) * template.tm.mean_airy(template.length_cm) * template.teb.mean_airy(template.length_cm);
    let unit = template.length_cm.powi(2) * template.fundamental_power_w.powi(2) / 100.0;
    let eta0 = smax / (unit * mean_cavity);

    // Phase grid with η solved linearly at each node.
    const NODES: usize = 12;
    let phases: Vec<f64> = (0..NODES).map(|k| 2.0 * PI * k as f64 / NODES as f64).collect();
    let mut candidates: Vec<(f64, [f64; 6])> = (0..NODES * NODES * NODES)
        .into_par_iter()
        .map(|idx| {
            let (a, b, c) = (idx / (NODES * NODES), (idx / NODES) % NODES, idx % NODES);
            let p = [1.0, c0, w0, phases[a], phases[b], phases[c]];
            let m = parametric_values(template, &p, grid);
            let mm: f64 = m.iter().map(|v| v * v).sum();
            let eta = if mm > 0.0 { m.iter().zip(data).map(|(a, b)| a * b).sum::<f64>() / mm } else { eta0 };
            let cost: f64 = m.iter().zip(data).map(|(a, b)| (eta * a - b).powi(2)).sum();
            (cost, [eta, c0, w0, p[3], p[4], p[5]])
        })
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
    let model = |p: &[f64]| parametric_values(template, p, grid);
    let steps = [1e-7, 1e-9, 1e-8, 1e-7, 1e-7, 1e-7];
    let best = candidates
        .iter()
        .take(4)
        .map(|(_, p)| levenberg_marquardt(model, data, p.to_vec(), &steps, 300))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let (p, cost, iterations, converged) = best;
    let residual = cost.sqrt();
    if !converged {
        return Err(NonlinearError::FitFailed { iterations, residual });
    }
    let wrap = |x: f64| x.rem_euclid(2.0 * PI);
    Ok(ShgFit {
        eta_pct_per_w_cm2: p[0].max(0.0),
        center_nm: p[1],
        fwhm_nm: p[2].abs(),
        phases_rad: [wrap(p[3]), wrap(p[4]), wrap(p[5])],
        residual_norm: residual,
        iterations,
        degenerate: false,
        ..base
    })
}

/// Linear fit of the degenerate SH (pump-domain) wavelength versus
/// temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSlope {
    pub temperatures_k: Vec<f64>,
    pub centers_nm: Vec<f64>,
    pub slope_nm_per_k: f64,
    pub intercept_nm: f64,
    /// Temperatures at which no degeneracy was found.
    pub failed_k: Vec<f64>,
}

impl TemperatureSlope {
    pub fn center_at(&self, temperature_k: f64) -> f64 {
        self.intercept_nm + self.slope_nm_per_k * temperature_k
    }
}

pub fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (slope, my - slope * mx)
}

pub fn pm_center_vs_temperature(
    stack: &LayerStack,
    temperatures_k: &[f64],
    table: &DispersionTable,
    opts: &SolverOptions,
    settings: &CurveSettings,
) -> Result<TemperatureSlope> {
    let results: Vec<Option<f64>> = temperatures_k
        .par_iter()
        .map(|&t| {
            PhaseMatchCurves::compute(stack, t, table, opts, settings)
                .and_then(|c| degeneracy(&c))
                .ok()
        })
        .collect();
    let mut ts = Vec::new();
    let mut cs = Vec::new();
    let mut failed = Vec::new();
    for (t, r) in temperatures_k.iter().zip(results) {
        match r {
            Some(c) => {
                ts.push(*t);
                cs.push(c);
            }
            None => failed.push(*t),
        }
    }
    if ts.len() < 3 {
        return Err(NonlinearError::Invalid(format!(
            "only {} temperatures gave a phase-matching centre; at least 3 are needed",
            ts.len()
        )));
    }
    let (slope, intercept) = linear_regression(&ts, &cs);
    Ok(TemperatureSlope {
        temperatures_k: ts,
        centers_nm: cs,
        slope_nm_per_k: slope,
        intercept_nm: intercept,
        failed_k: failed,
    })
}

/// Transmission of a symmetric Fabry–Perot guide of length `length_cm`.
pub fn synthesize_fp_transmission(reflectivity: f64, alpha_cm1: f64, length_cm: f64, group_index: f64, grid_nm: &[f64]) -> Spectrum {
    let a = (-alpha_cm1 * length_cm).exp();
    let x = reflectivity * a;
    let l = length_cm * NM_PER_CM;
    let power = grid_nm
        .iter()
        .map(|&lam| {
            let s = (2.0 * PI * group_index * l / lam).sin();
            (1.0 - reflectivity).powi(2) * a / ((1.0 - x).powi(2) + 4.0 * x * s * s)
        })
        .collect();
    Spectrum {
        wavelength_nm: grid_nm.to_vec(),
        power,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossExtraction {
    pub alpha_cm1: f64,
    pub alpha_std_cm1: f64,
    pub contrasts: Vec<f64>,
    pub fringes: usize,
}

/// Vertex abscissa (in samples, relative to the middle one) of the parabola
/// through three equally spaced samples.
fn vertex_offset(y: [f64; 3]) -> f64 {
    let curvature = y[0] - 2.0 * y[1] + y[2];
    if curvature == 0.0 {
        0.0
    } else {
        (0.5 * (y[0] - y[2]) / curvature).clamp(-1.0, 1.0)
    }
}

/// Mean and amplitude of `A − B·cos(φ)` through three samples spaced by
/// `delta` in phase.
fn local_sinusoid(y: [f64; 3], delta: f64) -> (f64, f64) {
    let c = delta.cos();
    let a = (y[0] + y[2] - 2.0 * c * y[1]) / (2.0 * (1.0 - c));
    let bc = a - y[1];
    let bs = (y[2] - y[0]) / (2.0 * delta.sin());
    (a, bc.hypot(bs))
}

/// Propagation loss from fringe contrast: per fringe
/// `K = (Imax − Imin)/(Imax + Imin)`, `x = (1 − √(1 − K²))/K = R·e^{−αL}`,
/// `α = −ln(x/R)/L`. `1/I` is sinusoidal in the round-trip phase, so each
/// extremum is reconstructed exactly from its three nearest samples.
pub fn extract_loss_fp(spectrum: &Spectrum, reflectivity: f64, length_cm: f64) -> Result<LossExtraction> {
    if !(reflectivity > 0.0 && reflectivity < 1.0) {
        return Err(NonlinearError::Invalid(format!("reflectivity {reflectivity} outside (0, 1)")));
    }
    if !(length_cm > 0.0) {
        return Err(NonlinearError::Invalid("length must be positive".into()));
    }
    let y = &spectrum.power;
    if spectrum.wavelength_nm.len() != y.len() || y.iter().any(|v| !(*v > 0.0)) {
        return Err(NonlinearError::Invalid("transmission must be positive and match the wavelength grid".into()));
    }
    let inv: Vec<f64> = y.iter().map(|v| 1.0 / v).collect();
    // (is transmission maximum, sample index, fractional position)
    let mut extrema: Vec<(bool, usize, f64)> = Vec::new();
    for i in 1..inv.len().saturating_sub(1) {
        let (a, b, c) = (inv[i - 1], inv[i], inv[i + 1]);
        let is_max_t = b < a && b <= c;
        let is_min_t = b > a && b >= c;
        if is_max_t || is_min_t {
            extrema.push((is_max_t, i, i as f64 + vertex_offset([a, b, c])));
        }
    }
    if extrema.len() < 2 {
        return Err(NonlinearError::Extraction("no complete fringe found".into()));
    }
    // Adjacent extrema are π apart in round-trip phase.
    let span = extrema[extrema.len() - 1].2 - extrema[0].2;
    let delta = PI * (extrema.len() - 1) as f64 / span;
    if !(delta > 0.0 && delta < PI / 2.0) {
        return Err(NonlinearError::Extraction("fringes are under-sampled".into()));
    }
    let extremum = |i: usize| -> f64 {
        let (a, b) = local_sinusoid([inv[i - 1], inv[i], inv[i + 1]], delta);
        if inv[i] < a {
            1.0 / (a - b)
        } else {
            1.0 / (a + b)
        }
    };
    let mut contrasts = Vec::new();
    for w in extrema.windows(2) {
        let (imax, imin) = match (w[0], w[1]) {
            ((true, a, _), (false, b, _)) => (extremum(a), extremum(b)),
            _ => continue,
        };
        contrasts.push((imax - imin) / (imax + imin));
    }
    if contrasts.is_empty() {
        return Err(NonlinearError::Extraction("no complete fringe found".into()));
    }
    let mut alphas = Vec::with_capacity(contrasts.len());
    for &k in &contrasts {
        if !(k < 1.0) || k <= 0.0 {
            return Err(NonlinearError::Extraction(format!("fringe contrast K = {k} outside (0, 1)")));
        }
        let xr = (1.0 - (1.0 - k * k).sqrt()) / k;
        if xr > reflectivity * (1.0 + 1e-6) {
            return Err(NonlinearError::Extraction(format!(
                "R·exp(−αL) = {xr:.5} exceeds R = {reflectivity}, implying negative loss"
            )));
        }
        alphas.push((-(xr / reflectivity).ln() / length_cm).max(0.0));
    }
    let n = alphas.len() as f64;
    let mean = alphas.iter().sum::<f64>() / n;
    let var = alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    Ok(LossExtraction {
        alpha_cm1: mean,
        alpha_std_cm1: var.sqrt(),
        fringes: contrasts.len(),
        contrasts,
    })
}

/// Pairs per pump photon `(η/100)·L²·(hc/λp)·Δν`, with η in %·W⁻¹·cm⁻²,
/// L in cm and Δν the effective signal bandwidth in Hz.
pub fn spdc_pair_probability(eta_pct_per_w_cm2: f64, length_cm: f64, lambda_p_nm: f64, bandwidth_hz: f64) -> Result<f64> {
    if eta_pct_per_w_cm2 < 0.0 || length_cm < 0.0 || !(lambda_p_nm > 0.0) || bandwidth_hz < 0.0 {
        return Err(NonlinearError::Invalid("η, L and Δν must be non-negative and λp positive".into()));
    }
    Ok(eta_pct_per_w_cm2 / 100.0 * length_cm.powi(2) * photon_energy_j(lambda_p_nm) * bandwidth_hz)
}
