//! Refractive index and loss models for AlxGa1−xAs.
//!
//! Dispersion is driven by a coefficient table loaded from JSON. The bundled
//! table evaluates the Afromowitz modified single-oscillator model with
//! Varshni-shifted band-edge energies, so temperature enters through the
//! oscillator energies rather than a uniform dn/dT. Tables whose model has no
//! thermal terms (the Cauchy form used by tests and alternative fits) fall
//! back to the uniform `dn/dT` stored in their header.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{photon_energy_ev, NM_PER_UM};

/// Environment variable pointing at a coefficient table (file or directory).
pub const DATA_ENV: &str = "PAIRFORGE_DATA";
/// File name looked up when [`DATA_ENV`] names a directory.
pub const DEFAULT_TABLE_FILE: &str = "algaas_afromowitz.json";

const BUNDLED_TABLE: &str = include_str!("../data/algaas_afromowitz.json");
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MaterialError {
    #[error("{quantity} = {value} is outside the table range [{min}, {max}]")]
    OutOfRange {
        quantity: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid material point: {0}")]
    InvalidPoint(String),
    #[error("invalid dispersion table: {0}")]
    InvalidTable(String),
    #[error("model returned an unphysical index {n} at x={x}, λ={wavelength_nm} nm, T={temperature_k} K")]
    Unphysical {
        n: f64,
        x: f64,
        wavelength_nm: f64,
        temperature_k: f64,
    },
    #[error("negative doping {0} cm⁻³")]
    NegativeDoping(f64),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parsing dispersion table: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Arguments of a single index evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialPoint {
    pub composition_x: f64,
    pub wavelength_nm: f64,
    pub temperature_k: f64,
}

impl MaterialPoint {
    pub fn new(composition_x: f64, wavelength_nm: f64, temperature_k: f64) -> Result<Self, MaterialError> {
        if !(0.0..=1.0).contains(&composition_x) {
            return Err(MaterialError::InvalidPoint(format!(
                "composition x = {composition_x} not in [0, 1]"
            )));
        }
        if !(wavelength_nm > 0.0 && wavelength_nm.is_finite()) {
            return Err(MaterialError::InvalidPoint(format!(
                "wavelength {wavelength_nm} nm must be positive"
            )));
        }
        if !(temperature_k > 0.0 && temperature_k.is_finite()) {
            return Err(MaterialError::InvalidPoint(format!(
                "temperature {temperature_k} K must be positive"
            )));
        }
        Ok(Self {
            composition_x,
            wavelength_nm,
            temperature_k,
        })
    }
}

/// Units declared in a table header. Only the canonical set is accepted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableUnits {
    pub wavelength: String,
    pub temperature: String,
    pub loss: String,
}

impl Default for TableUnits {
    fn default() -> Self {
        Self {
            wavelength: "nm".into(),
            temperature: "K".into(),
            loss: "cm^-1".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validity {
    pub wavelength_nm: [f64; 2],
    pub temperature_k: [f64; 2],
    #[serde(default = "full_composition_range")]
    pub composition_x: [f64; 2],
}

fn full_composition_range() -> [f64; 2] {
    [0.0, 1.0]
}

/// Afromowitz oscillator parameters. Polynomials are in ascending powers of x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AfromowitzCoefficients {
    pub e0_ev: Vec<f64>,
    pub ed_ev: Vec<f64>,
    pub eg_ev: Vec<f64>,
    /// Temperature at which the polynomials hold.
    pub reference_temperature_k: f64,
    pub varshni_alpha_ev_per_k: f64,
    pub varshni_beta_k: f64,
    /// Linear drift of the single-oscillator energy.
    pub e0_temperature_coefficient_ev_per_k: f64,
    /// Width that regularises the logarithmic band-edge term near E = Eg.
    pub edge_broadening_ev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DispersionModel {
    Afromowitz(AfromowitzCoefficients),
    /// n = A(x) + B(x)/λ², λ in µm.
    Cauchy { a: Vec<f64>, b_um2: Vec<f64> },
}

impl DispersionModel {
    fn has_thermal_terms(&self) -> bool {
        matches!(self, DispersionModel::Afromowitz(_))
    }
}

/// Uniform thermo-optic fallback for models without temperature terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermoOptic {
    pub reference_temperature_k: f64,
    pub uniform_dn_dt_per_k: f64,
}

/// Free-carrier absorption coefficients shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeCarrierLoss {
    /// Background loss of undoped material.
    pub undoped_alpha_cm1: f64,
    /// Absorption per carrier at the reference wavelength.
    pub cross_section_cm2: f64,
    pub reference_wavelength_nm: f64,
    /// Exponent of the (λ/λ_ref) scaling; 2 for Drude-like carriers.
    pub wavelength_exponent: f64,
}

impl Default for FreeCarrierLoss {
    fn default() -> Self {
        Self {
            undoped_alpha_cm1: 0.0,
            cross_section_cm2: 0.0,
            reference_wavelength_nm: 1570.0,
            wavelength_exponent: 2.0,
        }
    }
}

/// Index value frozen into the table by the generator script.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub x: f64,
    pub wavelength_nm: f64,
    pub temperature_k: f64,
    pub n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispersionTable {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub units: TableUnits,
    pub model: DispersionModel,
    pub validity: Validity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermo_optic: Option<ThermoOptic>,
    #[serde(default)]
    pub free_carrier_loss: FreeCarrierLoss,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reference_points: Vec<ReferencePoint>,
}

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

impl DispersionTable {
    pub fn from_json_str(s: &str) -> Result<Self, MaterialError> {
        let table: Self = serde_json::from_str(s)?;
        table.validate()?;
        Ok(table)
    }

    pub fn from_path(path: &Path) -> Result<Self, MaterialError> {
        let text = std::fs::read_to_string(path).map_err(|source| MaterialError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&text)
    }

    /// The table shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json_str(BUNDLED_TABLE).expect("bundled dispersion table is valid")
    }

    /// Resolve a table: explicit path, then `PAIRFORGE_DATA`, then the bundled copy.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, MaterialError> {
        if let Some(p) = explicit {
            return Self::from_path(p);
        }
        match std::env::var_os(DATA_ENV) {
            Some(v) if !v.is_empty() => {
                let p = PathBuf::from(v);
                if p.is_dir() {
                    Self::from_path(&p.join(DEFAULT_TABLE_FILE))
                } else {
                    Self::from_path(&p)
                }
            }
            _ => Ok(Self::bundled()),
        }
    }

    /// Cauchy table with composition polynomials, mostly for synthetic tests.
    pub fn cauchy(a: Vec<f64>, b_um2: Vec<f64>, validity: Validity) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            name: "cauchy".into(),
            units: TableUnits::default(),
            model: DispersionModel::Cauchy { a, b_um2 },
            validity,
            thermo_optic: Some(ThermoOptic {
                reference_temperature_k: 293.15,
                uniform_dn_dt_per_k: 0.0,
            }),
            free_carrier_loss: FreeCarrierLoss::default(),
            reference_points: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), MaterialError> {
        let bad = |m: String| Err(MaterialError::InvalidTable(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.units != TableUnits::default() {
            return bad(format!("units must be nm, K, cm^-1; got {:?}", self.units));
        }
        let v = &self.validity;
        for (name, r) in [
            ("wavelength_nm", v.wavelength_nm),
            ("temperature_k", v.temperature_k),
            ("composition_x", v.composition_x),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] < r[1]) {
                return bad(format!("validity.{name} must be an increasing finite interval"));
            }
        }
        if v.wavelength_nm[0] <= 0.0 || v.temperature_k[0] <= 0.0 {
            return bad("validity bounds must be positive".into());
        }
        let finite = |c: &[f64]| c.iter().all(|x| x.is_finite());
        match &self.model {
            DispersionModel::Afromowitz(c) => {
                if c.e0_ev.is_empty() || c.ed_ev.is_empty() || c.eg_ev.is_empty() {
                    return bad("afromowitz polynomials must be non-empty".into());
                }
                let scalars = [
                    c.reference_temperature_k,
                    c.varshni_alpha_ev_per_k,
                    c.varshni_beta_k,
                    c.e0_temperature_coefficient_ev_per_k,
                    c.edge_broadening_ev,
                ];
                if !(finite(&c.e0_ev) && finite(&c.ed_ev) && finite(&c.eg_ev) && finite(&scalars)) {
                    return bad("non-finite afromowitz coefficient".into());
                }
                if c.edge_broadening_ev < 0.0 {
                    return bad("edge_broadening_ev must be non-negative".into());
                }
            }
            DispersionModel::Cauchy { a, b_um2 } => {
                if a.is_empty() || !finite(a) || !finite(b_um2) {
                    return bad("cauchy coefficients must be finite and A non-empty".into());
                }
            }
        }
        if let Some(t) = &self.thermo_optic {
            if !(t.reference_temperature_k.is_finite() && t.uniform_dn_dt_per_k.is_finite()) {
                return bad("non-finite thermo_optic header".into());
            }
        }
        let l = &self.free_carrier_loss;
        if !(l.undoped_alpha_cm1 >= 0.0 && l.cross_section_cm2 >= 0.0 && l.reference_wavelength_nm > 0.0)
            || !l.wavelength_exponent.is_finite()
        {
            return bad("free_carrier_loss coefficients must be non-negative and finite".into());
        }
        Ok(())
    }

    fn check_range(&self, p: &MaterialPoint) -> Result<(), MaterialError> {
        let v = &self.validity;
        for (quantity, value, [min, max]) in [
            ("composition_x", p.composition_x, v.composition_x),
            ("wavelength_nm", p.wavelength_nm, v.wavelength_nm),
            ("temperature_k", p.temperature_k, v.temperature_k),
        ] {
            if value < min || value > max {
                return Err(MaterialError::OutOfRange {
                    quantity,
                    value,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    /// Γ-point band gap (eV) of the Afromowitz table at (x, T); `None` for other models.
    pub fn band_gap_ev(&self, x: f64, temperature_k: f64) -> Option<f64> {
        match &self.model {
            DispersionModel::Afromowitz(c) => Some(afromowitz_gap(c, x, temperature_k)),
            _ => None,
        }
    }

    /// Same table with every temperature dependence removed.
    pub fn frozen_in_temperature(&self) -> Self {
        let mut t = self.clone();
        match &mut t.model {
            DispersionModel::Afromowitz(c) => {
                c.varshni_alpha_ev_per_k = 0.0;
                c.e0_temperature_coefficient_ev_per_k = 0.0;
            }
            DispersionModel::Cauchy { .. } => {}
        }
        if let Some(th) = &mut t.thermo_optic {
            th.uniform_dn_dt_per_k = 0.0;
        }
        t.name = format!("{} (temperature independent)", self.name);
        t
    }
}

fn afromowitz_gap(c: &AfromowitzCoefficients, x: f64, t: f64) -> f64 {
    let varshni = |t: f64| c.varshni_alpha_ev_per_k * t * t / (t + c.varshni_beta_k);
    poly(&c.eg_ev, x) - (varshni(t) - varshni(c.reference_temperature_k))
}

fn afromowitz_eps(c: &AfromowitzCoefficients, p: &MaterialPoint) -> f64 {
    let x = p.composition_x;
    let t = p.temperature_k;
    let e = photon_energy_ev(p.wavelength_nm);
    let e0 = poly(&c.e0_ev, x) + c.e0_temperature_coefficient_ev_per_k * (t - c.reference_temperature_k);
    let ed = poly(&c.ed_ev, x);
    let eg = afromowitz_gap(c, x, t);
    let ef2 = 2.0 * e0 * e0 - eg * eg;
    let eta = std::f64::consts::PI * ed / (2.0 * e0.powi(3) * (e0 * e0 - eg * eg));
    let e2 = e * e;
    let width = 2.0 * eg * c.edge_broadening_ev;
    let log_term = (ef2 - e2).abs().ln() - 0.5 * ((eg * eg - e2).powi(2) + width * width).ln();
    1.0 + ed / e0 + ed * e2 / e0.powi(3) + eta * e2 * e2 / std::f64::consts::PI * log_term
}

/// Real refractive index at a material point.
pub fn refractive_index(p: &MaterialPoint, table: &DispersionTable) -> Result<f64, MaterialError> {
    table.check_range(p)?;
    let mut n = match &table.model {
        DispersionModel::Afromowitz(c) => afromowitz_eps(c, p).sqrt(),
        DispersionModel::Cauchy { a, b_um2 } => {
            let l_um = p.wavelength_nm / NM_PER_UM;
            poly(a, p.composition_x) + poly(b_um2, p.composition_x) / (l_um * l_um)
        }
    };
    if !table.model.has_thermal_terms() {
        if let Some(th) = &table.thermo_optic {
            n += th.uniform_dn_dt_per_k * (p.temperature_k - th.reference_temperature_k);
        }
    }
    if !(n.is_finite() && n > 1.0) {
        return Err(MaterialError::Unphysical {
            n,
            x: p.composition_x,
            wavelength_nm: p.wavelength_nm,
            temperature_k: p.temperature_k,
        });
    }
    Ok(n)
}

/// Doping level of one layer paired with the table's carrier-absorption coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossModel {
    pub doping_cm3: f64,
    pub coefficients: FreeCarrierLoss,
}

impl LossModel {
    pub fn new(doping_cm3: f64, coefficients: FreeCarrierLoss) -> Result<Self, MaterialError> {
        if doping_cm3 < 0.0 || !doping_cm3.is_finite() {
            return Err(MaterialError::NegativeDoping(doping_cm3));
        }
        Ok(Self {
            doping_cm3,
            coefficients,
        })
    }
}

/// Power absorption coefficient (cm⁻¹) of a layer: background plus free carriers.
pub fn layer_loss(model: &LossModel, wavelength_nm: f64) -> Result<f64, MaterialError> {
    if !(wavelength_nm > 0.0) {
        return Err(MaterialError::InvalidPoint(format!(
            "wavelength {wavelength_nm} nm must be positive"
        )));
    }
    let c = &model.coefficients;
    let scale = (wavelength_nm / c.reference_wavelength_nm).powf(c.wavelength_exponent);
    Ok(c.undoped_alpha_cm1 + c.cross_section_cm2 * model.doping_cm3 * scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(x: f64, l: f64, t: f64) -> f64 {
        refractive_index(&MaterialPoint::new(x, l, t).unwrap(), &DispersionTable::bundled()).unwrap()
    }

    #[test]
    fn index_falls_with_aluminium() {
        assert!(n(0.80, 785.0, 293.0) < n(0.25, 785.0, 293.0));
    }

    #[test]
    fn normal_dispersion_between_bands() {
        assert!(n(0.45, 785.0, 292.0) > n(0.45, 1570.0, 292.0));
    }

    #[test]
    fn matches_frozen_reference_rows() {
        let table = DispersionTable::bundled();
        assert!(table.reference_points.len() >= 10);
        for r in &table.reference_points {
            let got = n(r.x, r.wavelength_nm, r.temperature_k);
            assert!((got - r.n).abs() < 1e-3, "{r:?} vs {got}");
        }
        let row = table
            .reference_points
            .iter()
            .find(|r| r.x == 0.45 && r.wavelength_nm == 1570.0 && r.temperature_k == 292.0)
            .expect("x=0.45, 1570 nm, 292 K row");
        assert!((n(0.45, 1570.0, 292.0) - row.n).abs() < 1e-3);
    }

    #[test]
    fn decreasing_in_composition() {
        for &l in &[785.0, 1200.0, 1570.0] {
            let mut prev = f64::INFINITY;
            for i in 0..=20 {
                let v = n(i as f64 / 20.0, l, 293.0);
                assert!(v < prev, "λ={l} x={}", i as f64 / 20.0);
                prev = v;
            }
        }
    }

    #[test]
    fn normal_dispersion_at_design_wavelengths() {
        // The cap (x=0) and the QW (x=0.11) sit above their band edge at 785 nm,
        // so only the mirror and core alloys are expected to be normal there.
        for &x in &[0.25, 0.45, 0.80] {
            for &l in &[785.0, 1570.0] {
                let d = (n(x, l + 0.5, 293.0) - n(x, l - 0.5, 293.0)) / 1.0;
                assert!(d < 0.0, "x={x} λ={l} dn/dλ={d}");
            }
        }
    }

    #[test]
    fn pure_function() {
        let a = n(0.37, 1234.5, 301.2);
        let b = n(0.37, 1234.5, 301.2);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn out_of_range_names_the_bound() {
        let t = DispersionTable::bundled();
        let err = refractive_index(&MaterialPoint::new(0.3, 5000.0, 293.0).unwrap(), &t).unwrap_err();
        match err {
            MaterialError::OutOfRange { quantity, max, .. } => {
                assert_eq!(quantity, "wavelength_nm");
                assert_eq!(max, t.validity.wavelength_nm[1]);
            }
            e => panic!("unexpected {e}"),
        }
        let err = refractive_index(&MaterialPoint::new(0.3, 1500.0, 900.0).unwrap(), &t).unwrap_err();
        assert!(err.to_string().contains("temperature_k"));
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(MaterialPoint::new(1.2, 800.0, 300.0).is_err());
        assert!(MaterialPoint::new(0.2, -1.0, 300.0).is_err());
        assert!(MaterialPoint::new(0.2, 800.0, 0.0).is_err());
    }

    #[test]
    fn thermo_optic_is_positive_below_gap() {
        for &x in &[0.25, 0.45, 0.80] {
            let d = n(x, 1570.0, 303.0) - n(x, 1570.0, 283.0);
            assert!(d > 0.0 && d / 20.0 < 5e-4);
        }
    }

    #[test]
    fn uniform_dn_dt_applies_to_cauchy_tables() {
        let v = Validity {
            wavelength_nm: [500.0, 2500.0],
            temperature_k: [200.0, 400.0],
            composition_x: [0.0, 1.0],
        };
        let mut t = DispersionTable::cauchy(vec![3.3], vec![0.1], v);
        t.thermo_optic = Some(ThermoOptic {
            reference_temperature_k: 300.0,
            uniform_dn_dt_per_k: 2e-4,
        });
        let p = |temp| refractive_index(&MaterialPoint::new(0.0, 1000.0, temp).unwrap(), &t).unwrap();
        assert!((p(310.0) - p(300.0) - 2e-3).abs() < 1e-12);
        assert!((p(300.0) - 3.4).abs() < 1e-12);
    }

    #[test]
    fn frozen_table_has_no_temperature_dependence() {
        let t = DispersionTable::bundled().frozen_in_temperature();
        let p = |temp| refractive_index(&MaterialPoint::new(0.45, 1570.0, temp).unwrap(), &t).unwrap();
        assert_eq!(p(288.0), p(313.0));
    }

    #[test]
    fn table_validation_catches_bad_headers() {
        let mut t = DispersionTable::bundled();
        t.units.wavelength = "um".into();
        assert!(t.validate().is_err());
        let mut t = DispersionTable::bundled();
        t.schema_version = 7;
        assert!(t.validate().is_err());
        let mut t = DispersionTable::bundled();
        t.validity.wavelength_nm = [2000.0, 700.0];
        assert!(t.validate().is_err());
    }

    #[test]
    fn loss_baseline_and_monotonicity() {
        let c = DispersionTable::bundled().free_carrier_loss;
        let undoped = LossModel::new(0.0, c).unwrap();
        assert!((layer_loss(&undoped, 1570.0).unwrap() - 0.1).abs() < 1e-12);
        let mut prev = layer_loss(&undoped, 1570.0).unwrap();
        let mut doping = 1e16;
        while doping < 1e20 {
            let a = layer_loss(&LossModel::new(doping, c).unwrap(), 1570.0).unwrap();
            assert!(a >= prev);
            prev = a;
            doping *= 2.0;
        }
        assert!(matches!(LossModel::new(-1.0, c), Err(MaterialError::NegativeDoping(_))));
        assert!(layer_loss(&undoped, 0.0).is_err());
    }
}
