//! One-dimensional transfer-matrix mode solver for planar multilayers.
//!
//! The transverse field `ψ(z)` (E_y for TE, H_y for TM) is carried through
//! each homogeneous layer together with `φ = p·ψ'`, where `p = 1` for TE and
//! `p = 1/n²` for TM. A mode is a value of the effective index `N` for which
//! the solution decaying (or radiating outward) from the substrate matches
//! the one decaying from the superstrate. The dispersion function is the
//! Wronskian of the two solutions at a plane inside the core, normalized by
//! their magnitudes so that its roots are well scaled for any stack.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layerstack::{resolve, LayerStack, ResolvedStack, StackError};
use crate::materials::DispersionTable;
use crate::units::{alpha_from_kappa, NM_PER_UM};

type C = Complex64;

#[derive(Debug, Error)]
pub enum ModeError {
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error("lost the {selector} mode on {lost} of {total} grid points; last good wavelength {last_good_nm:.3} nm")]
    Tracking {
        selector: ModeSelector,
        lost: usize,
        total: usize,
        last_good_nm: f64,
    },
    #[error("no {0} mode found anywhere on the wavelength grid")]
    NotFound(ModeSelector),
    #[error("invalid wavelength grid: {0}")]
    Grid(String),
    #[error("overlap: {0}")]
    Overlap(String),
    #[error("{0} is outside the dispersion curve range [{1:.3}, {2:.3}] nm")]
    OutOfCurve(f64, f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarization {
    TE,
    TM,
}

/// Guiding mechanism of a mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeFamily {
    /// Total internal reflection against the averaged cladding.
    Tir,
    /// Confined by the photonic band gap of the mirrors.
    Bragg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeSelector {
    pub polarization: Polarization,
    pub family: ModeFamily,
    pub order: usize,
}

impl ModeSelector {
    pub const fn new(polarization: Polarization, family: ModeFamily, order: usize) -> Self {
        Self {
            polarization,
            family,
            order,
        }
    }
}

impl std::fmt::Display for ModeSelector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let pol = match self.polarization {
            Polarization::TE => "TE",
            Polarization::TM => "TM",
        };
        match self.family {
            ModeFamily::Tir => write!(f, "{pol}{:02}", self.order * 10),
            ModeFamily::Bragg => write!(f, "{pol}B{}", self.order),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Step of the real-axis scan used to bracket roots.
    pub scan_step: f64,
    /// Explicit scan interval for Re N; derived from the stack when absent.
    pub scan_range: Option<(f64, f64)>,
    /// Roots with a larger imaginary part are discarded as leaky.
    pub imag_ceiling: f64,
    /// Largest accepted |dispersion function| at a polished root.
    pub residual_tolerance: f64,
    pub profile_step_nm: f64,
    pub profile_extension_nm: f64,
    /// Minimum core confinement of a Bragg-guided root.
    pub bragg_min_confinement: f64,
    /// Include free-carrier absorption as an imaginary layer index.
    pub with_loss: bool,
    /// Wavelength offset of the central difference behind the group index.
    pub group_index_step_nm: f64,
    /// Ridge width for the lateral effective-index correction, if wanted.
    pub lateral_width_um: Option<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            scan_step: 2e-4,
            scan_range: None,
            imag_ceiling: 1e-4,
            residual_tolerance: 1e-10,
            profile_step_nm: 5.0,
            profile_extension_nm: 1000.0,
            bragg_min_confinement: 0.15,
            with_loss: true,
            group_index_step_nm: 0.1,
            lateral_width_um: None,
        }
    }
}

/// Transverse field sampled on a uniform depth grid; `z = 0` is the
/// substrate interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldProfile {
    pub z_start_nm: f64,
    pub step_nm: f64,
    pub values: Vec<C>,
}

impl FieldProfile {
    pub fn z_nm(&self, i: usize) -> f64 {
        self.z_start_nm + i as f64 * self.step_nm
    }

    pub fn z_end_nm(&self) -> f64 {
        self.z_nm(self.values.len().saturating_sub(1))
    }

    /// `Σ|E|²·h`, which is 1 for profiles produced by the solver.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.step_nm
    }

    /// Depth of the intensity maximum.
    pub fn peak_z_nm(&self) -> f64 {
        let i = self
            .values
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm_sqr().total_cmp(&b.1.norm_sqr()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.z_nm(i)
    }

    /// Linear interpolation; zero outside the sampled span.
    pub fn value_at(&self, z_nm: f64) -> C {
        let u = (z_nm - self.z_start_nm) / self.step_nm;
        if u < 0.0 || u > (self.values.len() - 1) as f64 {
            return C::new(0.0, 0.0);
        }
        let i = (u.floor() as usize).min(self.values.len() - 2);
        let f = u - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedMode {
    pub polarization: Polarization,
    pub family: ModeFamily,
    pub order: usize,
    pub n_eff: C,
    pub wavelength_nm: f64,
    pub profile: FieldProfile,
    /// Fraction of `∫|ψ|²` inside the core layers.
    pub confinement: f64,
    pub group_index: Option<f64>,
    pub alpha_cm1: f64,
    /// |dispersion function| at the returned root.
    pub residual: f64,
    pub core_span_nm: (f64, f64),
}

impl GuidedMode {
    pub fn selector(&self) -> ModeSelector {
        ModeSelector::new(self.polarization, self.family, self.order)
    }
}

fn csqrt_outgoing(z: C) -> C {
    let q = z.sqrt();
    if q.re + q.im < 0.0 {
        -q
    } else {
        q
    }
}

fn weight(n: C, pol: Polarization) -> C {
    match pol {
        Polarization::TE => C::new(1.0, 0.0),
        Polarization::TM => (n * n).inv(),
    }
}

/// Decay constant of a half-space field `e^{γ·depth}`.
fn half_space_gamma(n: C, neff: C, k0: f64, seed: bool) -> C {
    if seed && neff.re <= n.re {
        return C::new(0.0, 0.0);
    }
    -C::i() * k0 * csqrt_outgoing(n * n - neff * neff)
}

#[derive(Debug, Clone, Copy)]
struct LayerOptics {
    kappa: C,
    p: C,
}

impl LayerOptics {
    fn new(n: C, neff: C, k0: f64, pol: Polarization) -> Self {
        Self {
            kappa: k0 * (n * n - neff * neff).sqrt(),
            p: weight(n, pol),
        }
    }

    /// Carry `(ψ, φ)` a distance `t` through the layer.
    fn advance(&self, (psi, phi): (C, C), t: f64) -> (C, C) {
        let kt = self.kappa * t;
        let (c, s_over_k, k_s) = if kt.norm() < 1e-9 {
            (C::new(1.0, 0.0), C::new(t, 0.0), self.kappa * self.kappa * t)
        } else {
            let s = kt.sin();
            (kt.cos(), s / self.kappa, self.kappa * s)
        };
        (c * psi + s_over_k * phi / self.p, -self.p * k_s * psi + c * phi)
    }
}

fn rescale((psi, phi): (C, C), k0: f64, p: C) -> (C, C) {
    let m = psi.norm() + phi.norm() / (k0 * p.norm());
    if m > 0.0 && m.is_finite() {
        (psi / m, phi / m)
    } else {
        (psi, phi)
    }
}

/// Evaluation context for one stack, wavelength and polarization.
struct Guide<'a> {
    rs: &'a ResolvedStack,
    pol: Polarization,
    k0: f64,
    matching_layer: usize,
}

impl<'a> Guide<'a> {
    fn new(rs: &'a ResolvedStack, pol: Polarization) -> Self {
        let core = if rs.core.is_empty() { 0..1 } else { rs.core.clone() };
        Self {
            rs,
            pol,
            k0: 2.0 * PI / rs.wavelength_nm,
            matching_layer: core.start + (core.end - core.start) / 2,
        }
    }

    fn optics(&self, neff: C, j: usize) -> LayerOptics {
        LayerOptics::new(self.rs.indices[j], neff, self.k0, self.pol)
    }

    /// Left and (flipped) right states at the matching plane.
    fn matched_states(&self, neff: C, seed: bool) -> ((C, C), (C, C), C) {
        let rs = self.rs;
        let m = self.matching_layer;
        let gs = half_space_gamma(rs.substrate, neff, self.k0, seed);
        let gc = half_space_gamma(rs.superstrate, neff, self.k0, seed);
        let mut left = (C::new(1.0, 0.0), weight(rs.substrate, self.pol) * gs);
        for j in 0..m {
            let o = self.optics(neff, j);
            left = rescale(o.advance(left, rs.thicknesses_nm[j]), self.k0, o.p);
        }
        let om = self.optics(neff, m);
        left = om.advance(left, rs.thicknesses_nm[m] / 2.0);
        let mut right = (C::new(1.0, 0.0), weight(rs.superstrate, self.pol) * gc);
        for j in (m + 1..rs.indices.len()).rev() {
            let o = self.optics(neff, j);
            right = rescale(o.advance(right, rs.thicknesses_nm[j]), self.k0, o.p);
        }
        right = om.advance(right, rs.thicknesses_nm[m] / 2.0);
        (left, right, om.p)
    }

    /// Normalized Wronskian of the two half-space solutions.
    fn dispersion(&self, neff: C, seed: bool) -> C {
        let ((pl, fl), (pr, fr), p) = self.matched_states(neff, seed);
        let s = self.k0 * p.norm();
        let w = -(pl * fr + fl * pr);
        w / (s * (pl.norm() + fl.norm() / s) * (pr.norm() + fr.norm() / s))
    }

    fn field(&self, neff: C) -> ModeField {
        let rs = self.rs;
        let m = self.matching_layer;
        let nl = rs.indices.len();
        let gs = half_space_gamma(rs.substrate, neff, self.k0, false);
        let gc = half_space_gamma(rs.superstrate, neff, self.k0, false);
        let mut anchors = Vec::with_capacity(nl);
        let mut z = 0.0;
        let mut left = (C::new(1.0, 0.0), weight(rs.substrate, self.pol) * gs);
        for j in 0..=m {
            let o = self.optics(neff, j);
            anchors.push(Anchor {
                z,
                dir: 1.0,
                state: left,
                optics: o,
            });
            if j < m {
                left = o.advance(left, rs.thicknesses_nm[j]);
            }
            z += rs.thicknesses_nm[j];
        }
        let total = rs.total_thickness_nm();
        let mut upper = Vec::new();
        let mut right = (C::new(1.0, 0.0), weight(rs.superstrate, self.pol) * gc);
        let mut top = total;
        for j in (m + 1..nl).rev() {
            let o = self.optics(neff, j);
            upper.push(Anchor {
                z: top,
                dir: -1.0,
                state: right,
                optics: o,
            });
            right = o.advance(right, rs.thicknesses_nm[j]);
            top -= rs.thicknesses_nm[j];
        }
        let om = self.optics(neff, m);
        let half = rs.thicknesses_nm[m] / 2.0;
        let (pl, fl) = om.advance(anchors[m].state, half);
        let (pr, fr) = om.advance(right, half);
        let scale = if pr.norm() * self.k0 * om.p.norm() >= fr.norm() {
            pl / pr
        } else {
            -fl / fr
        };
        for a in &mut upper {
            a.state = (a.state.0 * scale, a.state.1 * scale);
        }
        upper.reverse();
        anchors.extend(upper);
        let boundaries = rs.thicknesses_nm.iter().scan(0.0, |acc, t| {
            let z0 = *acc;
            *acc += t;
            Some((z0, *acc))
        });
        ModeField {
            anchors,
            layers: boundaries.collect(),
            substrate: (C::new(1.0, 0.0), gs),
            superstrate: (scale, gc),
            total,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Anchor {
    z: f64,
    dir: f64,
    state: (C, C),
    optics: LayerOptics,
}

/// Piecewise-analytic field of a mode.
struct ModeField {
    anchors: Vec<Anchor>,
    layers: Vec<(f64, f64)>,
    substrate: (C, C),
    superstrate: (C, C),
    total: f64,
}

const GAUSS_NODES: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.362_683_783_362_762,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

/// Composite 8-point Gauss–Legendre quadrature on segments of at most 20 nm.
fn integrate(a: f64, b: f64, f: impl Fn(f64) -> C) -> C {
    let segments = ((b - a) / 20.0).ceil().max(1.0) as usize;
    let h = (b - a) / segments as f64;
    let mut sum = C::new(0.0, 0.0);
    for s in 0..segments {
        let mid = a + (s as f64 + 0.5) * h;
        for (x, w) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
            sum += w * (f(mid - 0.5 * h * x) + f(mid + 0.5 * h * x));
        }
    }
    sum * 0.5 * h
}

impl ModeField {
    fn in_layer(&self, j: usize, z: f64) -> C {
        let a = &self.anchors[j];
        a.optics.advance(a.state, a.dir * (z - a.z)).0
    }

    fn at(&self, z: f64) -> C {
        if z < 0.0 {
            return self.substrate.0 * (self.substrate.1 * z).exp();
        }
        if z > self.total {
            return self.superstrate.0 * (-self.superstrate.1 * (z - self.total)).exp();
        }
        let j = self
            .layers
            .partition_point(|&(_, z1)| z1 < z)
            .min(self.layers.len() - 1);
        self.in_layer(j, z)
    }

    /// `∫ f(ψ, p)` over the stack and `extension` into each half-space.
    fn integral(&self, rs: &ResolvedStack, pol: Polarization, extension: f64, range: Option<Range<usize>>, f: impl Fn(C, C) -> C) -> C {
        let mut sum = C::new(0.0, 0.0);
        let layers = range.clone().unwrap_or(0..self.layers.len());
        for j in layers {
            let (z0, z1) = self.layers[j];
            let p = weight(rs.indices[j], pol);
            sum += integrate(z0, z1, |z| f(self.in_layer(j, z), p));
        }
        if range.is_none() {
            let ps = weight(rs.substrate, pol);
            let pc = weight(rs.superstrate, pol);
            sum += integrate(-extension, 0.0, |z| f(self.at(z), ps));
            sum += integrate(self.total, self.total + extension, |z| f(self.at(z), pc));
        }
        sum
    }
}

/// A root of the dispersion function with its classification.
#[derive(Debug, Clone, Copy)]
struct Root {
    neff: C,
    residual: f64,
    family: ModeFamily,
    confinement: f64,
}

fn lossless(rs: &ResolvedStack) -> ResolvedStack {
    let mut r = rs.clone();
    for n in &mut r.indices {
        n.im = 0.0;
    }
    r.substrate.im = 0.0;
    r.superstrate.im = 0.0;
    r
}

fn scan_interval(rs: &ResolvedStack) -> (f64, f64) {
    let halves = [rs.substrate.re, rs.superstrate.re];
    let min_half = halves[0].min(halves[1]);
    let max_half = halves[0].max(halves[1]);
    let min_layer = rs.indices.iter().map(|n| n.re).fold(f64::INFINITY, f64::min);
    let max_layer = rs.indices.iter().map(|n| n.re).fold(f64::NEG_INFINITY, f64::max);
    let lo = min_half.max(min_layer.min(max_half) - 0.3);
    (lo, max_layer.max(max_half))
}

/// Complex secant iteration on the dispersion function.
fn polish(guide: &Guide, start: C, tolerance: f64) -> Option<(C, f64)> {
    let mut x0 = start;
    let mut x1 = start + C::new(0.0, 1e-9);
    let mut f0 = guide.dispersion(x0, false);
    let mut f1 = guide.dispersion(x1, false);
    for _ in 0..100 {
        if f1.norm() < 1e-14 {
            break;
        }
        let df = f1 - f0;
        if df.norm() == 0.0 {
            break;
        }
        let x2 = x1 - f1 * (x1 - x0) / df;
        if !(x2.re.is_finite() && x2.im.is_finite()) {
            return None;
        }
        x0 = x1;
        f0 = f1;
        x1 = x2;
        f1 = guide.dispersion(x1, false);
        if (x1 - x0).norm() < 1e-15 {
            break;
        }
    }
    (f1.norm() < tolerance).then_some((x1, f1.norm()))
}

/// Real-arithmetic version of the seed dispersion function for a lossless
/// stack: half-spaces below their light line use a zero-slope boundary, so
/// leaky Bragg modes show up as sign changes on the real axis.
struct SeedFunction {
    k0: f64,
    pol_te: bool,
    sub: f64,
    sup: f64,
    below: Vec<(f64, f64)>,
    above: Vec<(f64, f64)>,
    matching: (f64, f64),
}

impl SeedFunction {
    fn new(rs: &ResolvedStack, pol: Polarization) -> Self {
        let m = Guide::new(rs, pol).matching_layer;
        let layers: Vec<(f64, f64)> = rs.indices.iter().map(|n| n.re).zip(rs.thicknesses_nm.iter().copied()).collect();
        Self {
            k0: 2.0 * PI / rs.wavelength_nm,
            pol_te: pol == Polarization::TE,
            sub: rs.substrate.re,
            sup: rs.superstrate.re,
            below: layers[..m].to_vec(),
            above: layers[m + 1..].iter().rev().copied().collect(),
            matching: layers[m],
        }
    }

    fn p(&self, n: f64) -> f64 {
        if self.pol_te {
            1.0
        } else {
            1.0 / (n * n)
        }
    }

    fn advance(&self, (psi, phi): (f64, f64), n: f64, t: f64, neff: f64) -> (f64, f64) {
        let p = self.p(n);
        let k2 = self.k0 * self.k0 * (n * n - neff * neff);
        let (c, s_over_k, k_s) = if k2.abs() * t * t < 1e-18 {
            (1.0, t, k2 * t)
        } else if k2 > 0.0 {
            let k = k2.sqrt();
            let (s, c) = (k * t).sin_cos();
            (c, s / k, k * s)
        } else {
            let q = (-k2).sqrt();
            let (s, c) = ((q * t).sinh(), (q * t).cosh());
            (c, s / q, -q * s)
        };
        (c * psi + s_over_k * phi / p, -p * k_s * psi + c * phi)
    }

    fn boundary(&self, n: f64, neff: f64) -> (f64, f64) {
        let g = if neff <= n { 0.0 } else { self.k0 * (neff * neff - n * n).sqrt() };
        (1.0, self.p(n) * g)
    }

    fn eval(&self, neff: f64) -> f64 {
        let norm = |(a, b): (f64, f64), p: f64| {
            let m = a.abs() + b.abs() / (self.k0 * p);
            if m > 0.0 && m.is_finite() {
                (a / m, b / m)
            } else {
                (a, b)
            }
        };
        let (nm, tm) = self.matching;
        let mut left = self.boundary(self.sub, neff);
        for &(n, t) in &self.below {
            left = norm(self.advance(left, n, t, neff), self.p(n));
        }
        left = self.advance(left, nm, tm / 2.0, neff);
        let mut right = self.boundary(self.sup, neff);
        for &(n, t) in &self.above {
            right = norm(self.advance(right, n, t, neff), self.p(n));
        }
        right = self.advance(right, nm, tm / 2.0, neff);
        let s = self.k0 * self.p(nm);
        -(left.0 * right.1 + left.1 * right.0) / (s * (left.0.abs() + left.1.abs() / s) * (right.0.abs() + right.1.abs() / s))
    }
}

fn find_roots(rs: &ResolvedStack, pol: Polarization, opts: &SolverOptions) -> Vec<Root> {
    let real = lossless(rs);
    let guide = Guide::new(rs, pol);
    let (lo, hi) = opts.scan_range.unwrap_or_else(|| scan_interval(rs));
    let steps = ((hi - lo) / opts.scan_step).ceil() as usize;
    let grid: Vec<f64> = (0..=steps).map(|i| lo + i as f64 * opts.scan_step).collect();
    let seed_fn = SeedFunction::new(&real, pol);
    let values: Vec<f64> = grid.iter().map(|&n| seed_fn.eval(n)).collect();
    let halves = [real.substrate.re, real.superstrate.re];
    let mut found: Vec<(C, f64)> = Vec::new();
    for i in 0..grid.len() - 1 {
        let (a, b) = (grid[i], grid[i + 1]);
        if values[i].signum() == values[i + 1].signum() || halves.iter().any(|h| (a - h) * (b - h) <= 0.0) {
            continue;
        }
        let (mut a, mut b, mut fa) = (a, b, values[i]);
        while b - a > 1e-10 {
            let m = 0.5 * (a + b);
            let fm = seed_fn.eval(m);
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        let seed = C::new(0.5 * (a + b), 0.0);
        let Some((root, residual)) = polish(&guide, seed, opts.residual_tolerance) else {
            continue;
        };
        if root.im > opts.imag_ceiling || root.im < -1e-12 {
            continue;
        }
        if found.iter().all(|(r, _)| (r - root).norm() > 1e-7) {
            found.push((C::new(root.re, root.im.max(0.0)), residual));
        }
    }
    let clad = rs.cladding_equivalent_index();
    let mut roots: Vec<Root> = found
        .into_iter()
        .filter_map(|(neff, residual)| {
            let (family, confinement) = if neff.re >= clad {
                (ModeFamily::Tir, f64::NAN)
            } else {
                let c = core_confinement(&guide, neff, opts.profile_extension_nm);
                if c > opts.bragg_min_confinement {
                    (ModeFamily::Bragg, c)
                } else {
                    return None;
                }
            };
            Some(Root {
                neff,
                residual,
                family,
                confinement,
            })
        })
        .collect();
    roots.sort_by(|a, b| b.neff.re.total_cmp(&a.neff.re));
    roots
}

fn core_confinement(guide: &Guide, neff: C, extension_nm: f64) -> f64 {
    let field = guide.field(neff);
    let e2 = |psi: C, _| C::new(psi.norm_sqr(), 0.0);
    let total = field.integral(guide.rs, guide.pol, extension_nm, None, e2).re;
    let inner = field.integral(guide.rs, guide.pol, extension_nm, Some(guide.rs.core.clone()), e2).re;
    inner / total
}

fn orders(roots: &[Root]) -> Vec<usize> {
    let mut tir = 0;
    let mut bragg = 0;
    roots
        .iter()
        .map(|r| {
            let c = match r.family {
                ModeFamily::Tir => &mut tir,
                ModeFamily::Bragg => &mut bragg,
            };
            *c += 1;
            *c - 1
        })
        .collect()
}

fn sampled_profile(field: &ModeField, step: f64, extension: f64) -> FieldProfile {
    let count = ((field.total + 2.0 * extension) / step).ceil() as usize + 1;
    let mut values: Vec<C> = (0..count).map(|i| field.at(-extension + i as f64 * step)).collect();
    let peak = values
        .iter()
        .copied()
        .max_by(|a, b| a.norm_sqr().total_cmp(&b.norm_sqr()))
        .unwrap_or(C::new(1.0, 0.0));
    let norm = (values.iter().map(|v| v.norm_sqr()).sum::<f64>() * step).sqrt();
    let phase = if peak.norm() > 0.0 { peak.conj() / peak.norm() } else { C::new(1.0, 0.0) };
    for v in &mut values {
        *v = *v * phase / norm;
    }
    FieldProfile {
        z_start_nm: -extension,
        step_nm: step,
        values,
    }
}

/// Ridge correction for the fundamental lateral mode of a guide of width `w`.
pub fn lateral_correction(neff: C, wavelength_nm: f64, width_um: f64) -> C {
    let t = wavelength_nm / (2.0 * width_um * NM_PER_UM);
    (neff * neff - t * t).sqrt()
}

/// Modes of a stack whose optical constants are produced by `resolver` at
/// any requested wavelength (needed for the group index).
pub fn find_modes_with<F>(resolver: F, wavelength_nm: f64, pol: Polarization, opts: &SolverOptions) -> Result<Vec<GuidedMode>, ModeError>
where
    F: Fn(f64) -> Result<ResolvedStack, StackError>,
{
    let rs = resolver(wavelength_nm)?;
    let roots = find_roots(&rs, pol, opts);
    let guide = Guide::new(&rs, pol);
    let d = opts.group_index_step_nm;
    let neighbours = [resolver(wavelength_nm - d), resolver(wavelength_nm + d)];
    let core_span = {
        let z = rs.thicknesses_nm.iter().scan(0.0, |acc, t| {
            *acc += t;
            Some(*acc)
        });
        let z: Vec<f64> = std::iter::once(0.0).chain(z).collect();
        (z[rs.core.start], z[rs.core.end])
    };
    let ords = orders(&roots);
    let modes = roots
        .iter()
        .zip(ords)
        .map(|(r, order)| {
            let field = guide.field(r.neff);
            let profile = sampled_profile(&field, opts.profile_step_nm, opts.profile_extension_nm);
            let group_index = match &neighbours {
                [Ok(lo), Ok(hi)] => {
                    let a = polish(&Guide::new(lo, pol), r.neff, opts.residual_tolerance);
                    let b = polish(&Guide::new(hi, pol), r.neff, opts.residual_tolerance);
                    match (a, b) {
                        (Some((a, _)), Some((b, _))) => Some(r.neff.re - wavelength_nm * (b.re - a.re) / (2.0 * d)),
                        _ => None,
                    }
                }
                _ => None,
            };
            let neff = match opts.lateral_width_um {
                Some(w) => lateral_correction(r.neff, wavelength_nm, w),
                None => r.neff,
            };
            GuidedMode {
                polarization: pol,
                family: r.family,
                order,
                n_eff: neff,
                wavelength_nm,
                profile,
                confinement: if r.confinement.is_nan() {
                    core_confinement(&guide, r.neff, opts.profile_extension_nm)
                } else {
                    r.confinement
                },
                group_index,
                alpha_cm1: alpha_from_kappa(neff.im, wavelength_nm),
                residual: r.residual,
                core_span_nm: core_span,
            }
        })
        .collect();
    Ok(modes)
}

/// Modes of `stack` at one wavelength, sorted by descending Re N.
pub fn find_modes(
    stack: &LayerStack,
    wavelength_nm: f64,
    pol: Polarization,
    table: &DispersionTable,
    opts: &SolverOptions,
) -> Result<Vec<GuidedMode>, ModeError> {
    find_modes_with(
        |l| resolve(stack, l, stack.temperature_k, table, opts.with_loss),
        wavelength_nm,
        pol,
        opts,
    )
}

/// Modes of a stack with fixed layer indices (no material dispersion).
pub fn find_modes_resolved(rs: &ResolvedStack, pol: Polarization, opts: &SolverOptions) -> Vec<GuidedMode> {
    find_modes_with(
        |l| {
            let mut r = rs.clone();
            r.wavelength_nm = l;
            Ok(r)
        },
        rs.wavelength_nm,
        pol,
        opts,
    )
    .expect("fixed-index resolver cannot fail")
}

/// Value of the dispersion function; zero at a mode.
pub fn dispersion_residual(rs: &ResolvedStack, pol: Polarization, neff: C) -> f64 {
    Guide::new(rs, pol).dispersion(neff, false).norm()
}

/// Normalized overlap `∫ψ_a ψ_b p dz / sqrt(∫ψ_a² p ∫ψ_b² p)` of two modes of
/// the same stack, evaluated by quadrature on the analytic fields.
pub fn mode_overlap(rs: &ResolvedStack, pol: Polarization, a: C, b: C, extension_nm: f64) -> f64 {
    let g = Guide::new(rs, pol);
    let (fa, fb) = (g.field(a), g.field(b));
    let total = rs.total_thickness_nm();
    let cross = |z: f64, p: C| fa.at(z) * fb.at(z) * p;
    let mut ab = C::new(0.0, 0.0);
    let mut aa = C::new(0.0, 0.0);
    let mut bb = C::new(0.0, 0.0);
    let spans = std::iter::once((-extension_nm, 0.0, rs.substrate))
        .chain(rs.thicknesses_nm.iter().zip(&rs.indices).scan(0.0, |acc, (t, n)| {
            let z0 = *acc;
            *acc += t;
            Some((z0, *acc, *n))
        }))
        .chain(std::iter::once((total, total + extension_nm, rs.superstrate)));
    for (z0, z1, n) in spans {
        let p = weight(n, pol);
        ab += integrate(z0, z1, |z| cross(z, p));
        aa += integrate(z0, z1, |z| fa.at(z) * fa.at(z) * p);
        bb += integrate(z0, z1, |z| fb.at(z) * fb.at(z) * p);
    }
    ab.norm() / (aa.norm() * bb.norm()).sqrt()
}

/// Power reflectance at normal incidence from the superstrate side.
pub fn normal_incidence_reflectance(rs: &ResolvedStack) -> f64 {
    let k0 = 2.0 * PI / rs.wavelength_nm;
    let (mut b, mut c) = (C::new(1.0, 0.0), rs.substrate);
    for (n, t) in rs.indices.iter().zip(&rs.thicknesses_nm) {
        let d = k0 * n * t;
        let (cs, sn) = (d.cos(), d.sin());
        let nb = cs * b + C::i() * sn / n * c;
        let nc = C::i() * n * sn * b + cs * c;
        b = nb;
        c = nc;
    }
    let y = c / b;
    let n0 = rs.superstrate;
    ((n0 - y) / (n0 + y)).norm_sqr()
}

/// Effective index versus wavelength for one tracked mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionCurve {
    pub selector: ModeSelector,
    pub temperature_k: f64,
    pub wavelength_nm: Vec<f64>,
    pub n_eff: Vec<C>,
    pub group_index: Vec<f64>,
}

impl DispersionCurve {
    pub fn from_samples(selector: ModeSelector, temperature_k: f64, wavelength_nm: Vec<f64>, n_eff: Vec<C>) -> Result<Self, ModeError> {
        if wavelength_nm.len() != n_eff.len() || wavelength_nm.len() < 2 {
            return Err(ModeError::Grid("need at least two samples of matching length".into()));
        }
        let re: Vec<f64> = n_eff.iter().map(|n| n.re).collect();
        let group_index = group_index_from_samples(&wavelength_nm, &re)?;
        Ok(Self {
            selector,
            temperature_k,
            wavelength_nm,
            n_eff,
            group_index,
        })
    }

    /// Curve with a wavelength-independent index (n_g = n).
    pub fn constant(selector: ModeSelector, temperature_k: f64, range_nm: (f64, f64), n: f64) -> Self {
        Self {
            selector,
            temperature_k,
            wavelength_nm: vec![range_nm.0, range_nm.1],
            n_eff: vec![C::new(n, 0.0); 2],
            group_index: vec![n; 2],
        }
    }

    pub fn range_nm(&self) -> (f64, f64) {
        (self.wavelength_nm[0], *self.wavelength_nm.last().unwrap())
    }

    fn locate(&self, wavelength_nm: f64) -> Result<usize, ModeError> {
        let (lo, hi) = self.range_nm();
        if !(wavelength_nm >= lo - 1e-9 && wavelength_nm <= hi + 1e-9) {
            return Err(ModeError::OutOfCurve(wavelength_nm, lo, hi));
        }
        Ok(self
            .wavelength_nm
            .partition_point(|&l| l <= wavelength_nm)
            .clamp(1, self.wavelength_nm.len() - 1)
            - 1)
    }

    /// Re N by cubic Hermite interpolation, using dn/dλ = (n − n_g)/λ at the
    /// samples.
    pub fn n_at(&self, wavelength_nm: f64) -> Result<f64, ModeError> {
        let i = self.locate(wavelength_nm)?;
        let (l0, l1) = (self.wavelength_nm[i], self.wavelength_nm[i + 1]);
        let (n0, n1) = (self.n_eff[i].re, self.n_eff[i + 1].re);
        let d0 = (n0 - self.group_index[i]) / l0;
        let d1 = (n1 - self.group_index[i + 1]) / l1;
        let h = l1 - l0;
        let t = (wavelength_nm - l0) / h;
        let (t2, t3) = (t * t, t * t * t);
        Ok((2.0 * t3 - 3.0 * t2 + 1.0) * n0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * n1
            + (t3 - t2) * h * d1)
    }

    /// Group index by linear interpolation.
    pub fn group_index_at(&self, wavelength_nm: f64) -> Result<f64, ModeError> {
        let i = self.locate(wavelength_nm)?;
        let t = (wavelength_nm - self.wavelength_nm[i]) / (self.wavelength_nm[i + 1] - self.wavelength_nm[i]);
        Ok(self.group_index[i] * (1.0 - t) + self.group_index[i + 1] * t)
    }

    /// Modal loss in cm⁻¹ by linear interpolation of Im N.
    pub fn alpha_at(&self, wavelength_nm: f64) -> Result<f64, ModeError> {
        let i = self.locate(wavelength_nm)?;
        let t = (wavelength_nm - self.wavelength_nm[i]) / (self.wavelength_nm[i + 1] - self.wavelength_nm[i]);
        let k = self.n_eff[i].im * (1.0 - t) + self.n_eff[i + 1].im * t;
        Ok(alpha_from_kappa(k, wavelength_nm))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("wavelength_nm,n_eff_re,n_eff_im,n_g,alpha_cm1\n");
        for ((l, n), g) in self.wavelength_nm.iter().zip(&self.n_eff).zip(&self.group_index) {
            let _ = writeln!(s, "{l},{},{},{g},{}", n.re, n.im, alpha_from_kappa(n.im, *l));
        }
        s
    }
}

/// Group index `n − λ·dn/dλ` from samples on a strictly increasing grid:
/// three-point differences (second order, non-uniform) inside, one-sided
/// three-point formulas at the ends.
pub fn group_index_from_samples(wavelength_nm: &[f64], n: &[f64]) -> Result<Vec<f64>, ModeError> {
    let len = wavelength_nm.len();
    if len != n.len() || len < 2 {
        return Err(ModeError::Grid("need at least two samples of matching length".into()));
    }
    if wavelength_nm.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModeError::Grid("wavelengths must be strictly increasing".into()));
    }
    if n.iter().any(|v| !v.is_finite()) {
        return Err(ModeError::Grid("non-finite index sample".into()));
    }
    let x = wavelength_nm;
    let derivative = |i: usize| -> f64 {
        if len == 2 {
            return (n[1] - n[0]) / (x[1] - x[0]);
        }
        let (a, b, c, at) = if i == 0 {
            (0, 1, 2, x[0])
        } else if i == len - 1 {
            (len - 3, len - 2, len - 1, x[len - 1])
        } else {
            (i - 1, i, i + 1, x[i])
        };
        // Derivative of the quadratic through the three points.
        let (xa, xb, xc) = (x[a], x[b], x[c]);
        n[a] * (2.0 * at - xb - xc) / ((xa - xb) * (xa - xc))
            + n[b] * (2.0 * at - xa - xc) / ((xb - xa) * (xb - xc))
            + n[c] * (2.0 * at - xa - xb) / ((xc - xa) * (xc - xb))
    };
    Ok((0..len).map(|i| n[i] - x[i] * derivative(i)).collect())
}

fn track(
    lists: &[Vec<Root>],
    grid: &[f64],
    selector: ModeSelector,
) -> Result<Vec<Option<C>>, ModeError> {
    let pick = |roots: &[Root]| {
        let mut k = 0;
        for r in roots {
            if r.family == selector.family {
                if k == selector.order {
                    return Some(r.neff);
                }
                k += 1;
            }
        }
        None
    };
    let start = lists.iter().position(|l| pick(l).is_some()).ok_or(ModeError::NotFound(selector))?;
    let mut out = vec![None; grid.len()];
    out[start] = pick(&lists[start]);
    let mut walk = |order: Box<dyn Iterator<Item = usize>>| {
        let mut history: Vec<(f64, C)> = vec![(grid[start], out[start].unwrap())];
        for i in order {
            let (l1, n1) = *history.last().unwrap();
            let predicted = if history.len() >= 2 {
                let (l0, n0) = history[history.len() - 2];
                n1 + (n1 - n0) * ((grid[i] - l1) / (l1 - l0))
            } else {
                n1
            };
            let slope = if history.len() >= 2 {
                let (l0, n0) = history[history.len() - 2];
                ((n1 - n0) / (l1 - l0)).re.abs()
            } else {
                2e-3
            };
            let tol = 2e-3_f64.max(2.0 * slope * (grid[i] - l1).abs());
            let best = lists[i]
                .iter()
                .filter(|r| r.family == selector.family)
                .min_by(|a, b| (a.neff.re - predicted.re).abs().total_cmp(&(b.neff.re - predicted.re).abs()));
            if let Some(r) = best {
                if (r.neff.re - predicted.re).abs() <= tol {
                    out[i] = Some(r.neff);
                    history.push((grid[i], r.neff));
                }
            }
        }
    };
    walk(Box::new(start + 1..grid.len()));
    walk(Box::new((0..start).rev()));
    Ok(out)
}

/// Dispersion curve of one mode, tracked by continuity of Re N across the
/// grid. Grid points are solved in parallel.
pub fn dispersion_curve(
    stack: &LayerStack,
    selector: ModeSelector,
    wavelength_grid_nm: &[f64],
    temperature_k: f64,
    table: &DispersionTable,
    opts: &SolverOptions,
) -> Result<DispersionCurve, ModeError> {
    dispersion_curve_with(
        |l| resolve(stack, l, temperature_k, table, opts.with_loss),
        selector,
        wavelength_grid_nm,
        temperature_k,
        opts,
    )
}

pub fn dispersion_curve_with<F>(
    resolver: F,
    selector: ModeSelector,
    wavelength_grid_nm: &[f64],
    temperature_k: f64,
    opts: &SolverOptions,
) -> Result<DispersionCurve, ModeError>
where
    F: Fn(f64) -> Result<ResolvedStack, StackError> + Sync,
{
    let grid = wavelength_grid_nm;
    if grid.len() < 3 || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ModeError::Grid("need at least three strictly increasing wavelengths".into()));
    }
    let lists: Vec<Vec<Root>> = grid
        .par_iter()
        .map(|&l| resolver(l).map(|rs| find_roots(&rs, selector.polarization, opts)))
        .collect::<Result<_, _>>()?;
    let tracked = track(&lists, grid, selector)?;
    let lost = tracked.iter().filter(|t| t.is_none()).count();
    if lost * 10 > grid.len() {
        let last_good_nm = tracked
            .iter()
            .zip(grid)
            .take_while(|(t, _)| t.is_some())
            .last()
            .map(|(_, l)| *l)
            .unwrap_or(f64::NAN);
        return Err(ModeError::Tracking {
            selector,
            lost,
            total: grid.len(),
            last_good_nm,
        });
    }
    let (l, n): (Vec<f64>, Vec<C>) = tracked
        .iter()
        .zip(grid)
        .filter_map(|(t, l)| t.map(|n| (*l, n)))
        .map(|(l, n)| match opts.lateral_width_um {
            Some(w) => (l, lateral_correction(n, l, w)),
            None => (l, n),
        })
        .unzip();
    DispersionCurve::from_samples(selector, temperature_k, l, n)
}

/// Uniform grid `[start, stop]` with the given step (inclusive of `stop`
/// within rounding).
pub fn wavelength_grid(start: f64, stop: f64, step: f64) -> Vec<f64> {
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

/// Second-order susceptibility `d(z)` as piecewise-constant segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearProfile {
    /// `(z_start_nm, z_end_nm, d_pm_per_v)`; zero outside every segment.
    pub segments: Vec<(f64, f64, f64)>,
}

impl NonlinearProfile {
    pub fn uniform(d_pm_per_v: f64) -> Self {
        Self {
            segments: vec![(f64::NEG_INFINITY, f64::INFINITY, d_pm_per_v)],
        }
    }

    /// One segment per layer of `stack`; half-spaces are linear media.
    pub fn from_stack(stack: &LayerStack, d_of_layer: impl Fn(&crate::layerstack::Layer) -> f64) -> Self {
        let z = stack.interfaces_nm();
        Self {
            segments: stack
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| (z[i], z[i + 1], d_of_layer(l)))
                .collect(),
        }
    }

    pub fn value_at(&self, z_nm: f64) -> f64 {
        self.segments
            .iter()
            .find(|(a, b, _)| z_nm >= *a && z_nm < *b)
            .map(|s| s.2)
            .unwrap_or(0.0)
    }
}

/// Effective nonlinear overlap
/// `|∫ d(z) E_p E_s* E_i* dz| / sqrt(∫|E_p|² ∫|E_s|² ∫|E_i|²)` in
/// pm·V⁻¹·µm⁻¹ᐟ². Profiles on differing grids are resampled onto the finest
/// step over their common span.
pub fn overlap_integral(
    pump: &GuidedMode,
    signal: &GuidedMode,
    idler: &GuidedMode,
    d: &NonlinearProfile,
) -> Result<f64, ModeError> {
    profile_overlap(&pump.profile, &signal.profile, &idler.profile, d)
}

pub fn profile_overlap(p: &FieldProfile, s: &FieldProfile, i: &FieldProfile, d: &NonlinearProfile) -> Result<f64, ModeError> {
    let profiles = [p, s, i];
    if profiles.iter().any(|f| f.values.len() < 2) {
        return Err(ModeError::Overlap("profiles need at least two samples".into()));
    }
    let same = profiles
        .iter()
        .all(|f| f.values.len() == p.values.len() && f.step_nm == p.step_nm && f.z_start_nm == p.z_start_nm);
    let (z0, step, count) = if same {
        (p.z_start_nm, p.step_nm, p.values.len())
    } else {
        let z0 = profiles.iter().map(|f| f.z_start_nm).fold(f64::NEG_INFINITY, f64::max);
        let z1 = profiles.iter().map(|f| f.z_end_nm()).fold(f64::INFINITY, f64::min);
        let step = profiles.iter().map(|f| f.step_nm).fold(f64::INFINITY, f64::min);
        if !(z1 > z0) {
            return Err(ModeError::Overlap(format!("profiles share no depth range ({z0} nm ≥ {z1} nm)")));
        }
        (z0, step, ((z1 - z0) / step).floor() as usize + 1)
    };
    let sample = |f: &FieldProfile, k: usize| if same { f.values[k] } else { f.value_at(z0 + k as f64 * step) };
    let h = step / NM_PER_UM;
    let mut num = C::new(0.0, 0.0);
    let mut norms = [0.0; 3];
    for k in 0..count {
        let w = if k == 0 || k == count - 1 { 0.5 * h } else { h };
        let (ep, es, ei) = (sample(p, k), sample(s, k), sample(i, k));
        num += w * d.value_at(z0 + k as f64 * step) * ep * es.conj() * ei.conj();
        norms[0] += w * ep.norm_sqr();
        norms[1] += w * es.norm_sqr();
        norms[2] += w * ei.norm_sqr();
    }
    let denom = (norms[0] * norms[1] * norms[2]).sqrt();
    if denom == 0.0 {
        return Err(ModeError::Overlap("a profile is identically zero".into()));
    }
    Ok(num.norm() / denom)
}

/// Confinement-weighted modal loss `Σ Γ_j α_j` (cm⁻¹) from per-layer losses.
pub fn modal_loss_from_layers(rs: &ResolvedStack, pol: Polarization, neff: C, layer_alpha_cm1: &[f64], extension_nm: f64) -> f64 {
    let g = Guide::new(rs, pol);
    let field = g.field(neff);
    let e2 = |psi: C, _| C::new(psi.norm_sqr(), 0.0);
    let total = field.integral(rs, pol, extension_nm, None, e2).re;
    layer_alpha_cm1
        .iter()
        .enumerate()
        .map(|(j, a)| a * field.integral(rs, pol, extension_nm, Some(j..j + 1), e2).re / total)
        .sum()
}
