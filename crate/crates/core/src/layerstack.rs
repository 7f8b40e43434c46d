//! Epitaxial layer stack, ridge geometry and facet data.
//!
//! Stacks are read from JSON documents. A document may list layers
//! explicitly or describe a Bragg mirror block whose layer thicknesses are
//! computed from the dispersion table. Parsed stacks always hold explicit
//! layers, and serialization writes them back out that way.

use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::materials::{
    layer_loss, refractive_index, DispersionTable, LossModel, MaterialError, MaterialPoint,
};
use crate::units::kappa_from_alpha;

#[derive(Debug, Error)]
pub enum StackError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("material error while building {context}: {source}")]
    Material {
        context: String,
        #[source]
        source: MaterialError,
    },
}

impl StackError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        StackError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub x: f64,
    pub thickness_nm: f64,
    #[serde(default)]
    pub doping_cm3: f64,
    pub label: String,
    /// Marks the guiding core; confinement factors are measured over these layers.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub core: bool,
}

/// Semi-infinite medium bounding the stack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HalfSpace {
    Alloy { x: f64 },
    Index { index: f64 },
    Named(NamedHalfSpace),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedHalfSpace {
    Air,
}

impl HalfSpace {
    pub const AIR: HalfSpace = HalfSpace::Named(NamedHalfSpace::Air);

    pub fn index(&self, wavelength_nm: f64, temperature_k: f64, table: &DispersionTable) -> Result<f64, MaterialError> {
        match *self {
            HalfSpace::Named(NamedHalfSpace::Air) => Ok(1.0),
            HalfSpace::Index { index } => Ok(index),
            HalfSpace::Alloy { x } => {
                refractive_index(&MaterialPoint::new(x, wavelength_nm, temperature_k)?, table)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    pub width_um: f64,
    pub etch_depth_um: f64,
    pub length_mm: f64,
}

impl Default for Ridge {
    fn default() -> Self {
        Self {
            width_um: 6.0,
            etch_depth_um: 2.0,
            length_mm: 2.0,
        }
    }
}

/// Facet power reflectivities of the three interacting mode classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Facets {
    #[serde(rename = "R_teb")]
    pub r_teb: f64,
    #[serde(rename = "R_te00")]
    pub r_te00: f64,
    #[serde(rename = "R_tm00")]
    pub r_tm00: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStack {
    pub substrate: HalfSpace,
    pub superstrate: HalfSpace,
    /// Bottom (substrate side) to top.
    pub layers: Vec<Layer>,
    pub ridge: Ridge,
    pub facets: Facets,
    #[serde(rename = "temperature_K")]
    pub temperature_k: f64,
}

/// How the doping figures of a mirror block are read.
///
/// The source quotes the mirror grading as "1 × 10⁻¹⁷ to 2 × 10⁻¹⁸ cm⁻³";
/// positive exponents are the physically sensible reading and the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DopingReading {
    #[default]
    PositiveExponent,
    AsPrinted,
}

/// Quarter-wave mirror description.
///
/// Layer thickness is `λ_d / (4·sqrt(n² − N_d²))`, the transverse quarter
/// wave for a mode of effective index `N_d`. With `design_index = 0` this is
/// the normal-incidence `λ_d/(4n)` stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BraggDesign {
    pub label: String,
    pub periods: usize,
    pub x_first: f64,
    pub x_second: f64,
    #[serde(default = "default_design_wavelength")]
    pub design_wavelength_nm: f64,
    #[serde(default)]
    pub design_index: f64,
    #[serde(rename = "design_temperature_K", default = "default_design_temperature")]
    pub design_temperature_k: f64,
    /// Doping of the first and last layer of the block, graded linearly in between.
    #[serde(default)]
    pub doping_cm3: [f64; 2],
    #[serde(default)]
    pub doping_reading: DopingReading,
    /// Explicit (first, second) thicknesses overriding the quarter-wave rule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thickness_nm: Option<[f64; 2]>,
}

fn default_design_wavelength() -> f64 {
    785.0
}

fn default_design_temperature() -> f64 {
    293.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum LayerEntry {
    Mirror { mirror: BraggDesign },
    Layer(Layer),
}

#[derive(Debug, Clone, Deserialize)]
struct StackDocument {
    substrate: HalfSpace,
    #[serde(default = "air")]
    superstrate: HalfSpace,
    layers: Vec<LayerEntry>,
    #[serde(default)]
    ridge: Ridge,
    facets: Facets,
    #[serde(rename = "temperature_K")]
    temperature_k: f64,
}

fn air() -> HalfSpace {
    HalfSpace::AIR
}

/// Quarter-wave thickness of one alloy for a transverse design index.
pub fn quarter_wave_thickness(
    x: f64,
    design_wavelength_nm: f64,
    design_index: f64,
    temperature_k: f64,
    table: &DispersionTable,
) -> Result<f64, MaterialError> {
    let n = refractive_index(&MaterialPoint::new(x, design_wavelength_nm, temperature_k)?, table)?;
    let transverse = n * n - design_index * design_index;
    if transverse <= 0.0 {
        return Err(MaterialError::InvalidPoint(format!(
            "design index {design_index} is not below n = {n:.5} of x = {x}"
        )));
    }
    Ok(design_wavelength_nm / (4.0 * transverse.sqrt()))
}

/// Expand a mirror description into `2·periods` alternating layers.
/// `m·10ⁿ` → `m·10⁻ⁿ`, so "2e18" printed with a negative exponent is 2e-18.
fn flip_exponent(v: f64) -> f64 {
    if v <= 0.0 {
        return v;
    }
    let n = v.log10().floor();
    v / 10f64.powf(2.0 * n)
}

pub fn build_bragg_design(design: &BraggDesign, table: &DispersionTable) -> Result<Vec<Layer>, StackError> {
    let ctx = |source| StackError::Material {
        context: format!("mirror '{}'", design.label),
        source,
    };
    if design.periods == 0 {
        return Err(StackError::schema(
            format!("mirror '{}'.periods", design.label),
            "at least one period is required",
        ));
    }
    let [t_first, t_second] = match design.thickness_nm {
        Some(t) => t,
        None => {
            let t = |x| {
                quarter_wave_thickness(
                    x,
                    design.design_wavelength_nm,
                    design.design_index,
                    design.design_temperature_k,
                    table,
                )
            };
            [t(design.x_first).map_err(ctx)?, t(design.x_second).map_err(ctx)?]
        }
    };
    let [d0, d1] = match design.doping_reading {
        DopingReading::PositiveExponent => design.doping_cm3,
        DopingReading::AsPrinted => design.doping_cm3.map(flip_exponent),
    };
    let count = 2 * design.periods;
    let layers = (0..count)
        .map(|i| {
            let frac = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
            let (x, t, tag) = if i % 2 == 0 {
                (design.x_first, t_first, 'a')
            } else {
                (design.x_second, t_second, 'b')
            };
            Layer {
                x,
                thickness_nm: t,
                doping_cm3: d0 + (d1 - d0) * frac,
                label: format!("{}[{}].{}", design.label, i / 2 + 1, tag),
                core: false,
            }
        })
        .collect();
    Ok(layers)
}

/// Normal-incidence quarter-wave mirror: thickness λ/(4n) for each alloy.
pub fn build_bragg(
    design_wavelength_nm: f64,
    periods: usize,
    x_high: f64,
    x_low: f64,
    temperature_k: f64,
    table: &DispersionTable,
) -> Result<Vec<Layer>, StackError> {
    build_bragg_design(
        &BraggDesign {
            label: "dbr".into(),
            periods,
            x_first: x_high,
            x_second: x_low,
            design_wavelength_nm,
            design_index: 0.0,
            design_temperature_k: temperature_k,
            doping_cm3: [0.0, 0.0],
            doping_reading: DopingReading::PositiveExponent,
            thickness_nm: None,
        },
        table,
    )
}

impl LayerStack {
    pub fn total_thickness_nm(&self) -> f64 {
        self.layers.iter().map(|l| l.thickness_nm).sum()
    }

    /// Layer interfaces, from the substrate (z = 0) to the top surface.
    pub fn interfaces_nm(&self) -> Vec<f64> {
        let mut z = vec![0.0];
        for l in &self.layers {
            z.push(z.last().unwrap() + l.thickness_nm);
        }
        z
    }

    /// Index range of the core layers. Without a flagged core this is the
    /// single highest-index layer at the given wavelength.
    pub fn core_range(&self, indices: &[f64]) -> Range<usize> {
        let flagged: Vec<usize> = (0..self.layers.len()).filter(|&i| self.layers[i].core).collect();
        if let (Some(&a), Some(&b)) = (flagged.first(), flagged.last()) {
            return a..b + 1;
        }
        let best = indices
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        best..best + 1
    }

    pub fn length_cm(&self) -> f64 {
        self.ridge.length_mm / 10.0
    }

    pub fn validate(&self) -> Result<(), StackError> {
        if self.layers.is_empty() {
            return Err(StackError::schema("layers", "at least one layer is required"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let path = |f: &str| format!("layers[{i}] ('{}').{f}", l.label);
            if !(l.thickness_nm > 0.0 && l.thickness_nm.is_finite()) {
                return Err(StackError::schema(path("thickness_nm"), format!("must be positive, got {}", l.thickness_nm)));
            }
            if !(0.0..=1.0).contains(&l.x) {
                return Err(StackError::schema(path("x"), format!("must lie in [0, 1], got {}", l.x)));
            }
            if !(l.doping_cm3 >= 0.0 && l.doping_cm3.is_finite()) {
                return Err(StackError::schema(path("doping_cm3"), format!("must be non-negative, got {}", l.doping_cm3)));
            }
        }
        for (name, h) in [("substrate", self.substrate), ("superstrate", self.superstrate)] {
            match h {
                HalfSpace::Alloy { x } if !(0.0..=1.0).contains(&x) => {
                    return Err(StackError::schema(format!("{name}.x"), format!("must lie in [0, 1], got {x}")));
                }
                HalfSpace::Index { index } if !(index >= 1.0 && index.is_finite()) => {
                    return Err(StackError::schema(format!("{name}.index"), format!("must be ≥ 1, got {index}")));
                }
                _ => {}
            }
        }
        let r = &self.ridge;
        if !(r.width_um > 0.0 && r.length_mm > 0.0 && r.etch_depth_um >= 0.0) {
            return Err(StackError::schema("ridge", "width and length must be positive, etch depth non-negative"));
        }
        for (name, v) in [("R_teb", self.facets.r_teb), ("R_te00", self.facets.r_te00), ("R_tm00", self.facets.r_tm00)] {
            if !(0.0..1.0).contains(&v) {
                return Err(StackError::schema(format!("facets.{name}"), format!("must satisfy 0 ≤ R < 1, got {v}")));
            }
        }
        if !(self.temperature_k > 0.0 && self.temperature_k.is_finite()) {
            return Err(StackError::schema("temperature_K", "must be positive"));
        }
        Ok(())
    }

    /// Deterministic JSON rendering with explicit layers.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stack serializes")
    }
}

/// Parse a stack from a JSON document (extra top-level keys are ignored).
pub fn parse_stack(document: &str, table: &DispersionTable) -> Result<LayerStack, StackError> {
    let de = &mut serde_json::Deserializer::from_str(document);
    let doc: StackDocument = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        StackError::schema(if path.is_empty() { "<root>".into() } else { path }, e.into_inner().to_string())
    })?;
    from_document(doc, table)
}

/// Parse a stack from an already-decoded JSON value.
pub fn parse_stack_value(value: &serde_json::Value, table: &DispersionTable) -> Result<LayerStack, StackError> {
    let doc: StackDocument = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        StackError::schema(if path.is_empty() { "<root>".into() } else { path }, e.into_inner().to_string())
    })?;
    from_document(doc, table)
}

fn from_document(doc: StackDocument, table: &DispersionTable) -> Result<LayerStack, StackError> {
    let mut layers = Vec::new();
    for (i, entry) in doc.layers.into_iter().enumerate() {
        match entry {
            LayerEntry::Layer(l) => layers.push(l),
            LayerEntry::Mirror { mirror } => {
                if let Some(t) = mirror.thickness_nm {
                    if t.iter().any(|v| !(*v > 0.0)) {
                        return Err(StackError::schema(
                            format!("layers[{i}].mirror ('{}').thickness_nm", mirror.label),
                            "explicit thicknesses must be positive",
                        ));
                    }
                }
                layers.extend(build_bragg_design(&mirror, table)?)
            }
        }
    }
    let stack = LayerStack {
        substrate: doc.substrate,
        superstrate: doc.superstrate,
        layers,
        ridge: doc.ridge,
        facets: doc.facets,
        temperature_k: doc.temperature_k,
    };
    stack.validate()?;
    Ok(stack)
}

/// Optical constants of a stack at one wavelength and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedStack {
    pub wavelength_nm: f64,
    pub substrate: Complex64,
    pub superstrate: Complex64,
    pub indices: Vec<Complex64>,
    pub thicknesses_nm: Vec<f64>,
    pub core: Range<usize>,
}

impl ResolvedStack {
    /// Stack from raw indices; `core` defaults to the highest-index layer.
    pub fn from_indices(
        wavelength_nm: f64,
        substrate: f64,
        superstrate: f64,
        layers: &[(f64, f64)],
        core: Option<Range<usize>>,
    ) -> Self {
        let indices: Vec<Complex64> = layers.iter().map(|&(n, _)| Complex64::new(n, 0.0)).collect();
        let core = core.unwrap_or_else(|| {
            let best = layers
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
                .map(|(i, _)| i)
                .unwrap_or(0);
            best..best + 1
        });
        Self {
            wavelength_nm,
            substrate: Complex64::new(substrate, 0.0),
            superstrate: Complex64::new(superstrate, 0.0),
            indices,
            thicknesses_nm: layers.iter().map(|&(_, t)| t).collect(),
            core,
        }
    }

    pub fn total_thickness_nm(&self) -> f64 {
        self.thicknesses_nm.iter().sum()
    }

    /// Index of the equivalent homogeneous cladding: the thickness-weighted
    /// mean permittivity of every non-core layer, or the larger half-space
    /// index when all layers belong to the core.
    pub fn cladding_equivalent_index(&self) -> f64 {
        let (mut w, mut eps) = (0.0, 0.0);
        for (i, (n, t)) in self.indices.iter().zip(&self.thicknesses_nm).enumerate() {
            if !self.core.contains(&i) {
                w += t;
                eps += t * (n.re * n.re - n.im * n.im);
            }
        }
        if w > 0.0 {
            (eps / w).sqrt()
        } else {
            self.substrate.re.max(self.superstrate.re)
        }
    }
}

/// Evaluate every layer index of `stack` at (λ, T). With `with_loss`, the
/// free-carrier absorption of each layer becomes an imaginary index part.
pub fn resolve(
    stack: &LayerStack,
    wavelength_nm: f64,
    temperature_k: f64,
    table: &DispersionTable,
    with_loss: bool,
) -> Result<ResolvedStack, StackError> {
    let mut indices = Vec::with_capacity(stack.layers.len());
    let mut real = Vec::with_capacity(stack.layers.len());
    for l in &stack.layers {
        let ctx = |source| StackError::Material {
            context: format!("layer '{}'", l.label),
            source,
        };
        let n = MaterialPoint::new(l.x, wavelength_nm, temperature_k)
            .and_then(|p| refractive_index(&p, table))
            .map_err(ctx)?;
        let k = if with_loss {
            let model = LossModel::new(l.doping_cm3, table.free_carrier_loss).map_err(ctx)?;
            kappa_from_alpha(layer_loss(&model, wavelength_nm).map_err(ctx)?, wavelength_nm)
        } else {
            0.0
        };
        real.push(n);
        indices.push(Complex64::new(n, k));
    }
    let half = |h: &HalfSpace, name: &str| {
        h.index(wavelength_nm, temperature_k, table).map_err(|source| StackError::Material {
            context: name.to_string(),
            source,
        })
    };
    Ok(ResolvedStack {
        wavelength_nm,
        substrate: Complex64::new(half(&stack.substrate, "substrate")?, 0.0),
        superstrate: Complex64::new(half(&stack.superstrate, "superstrate")?, 0.0),
        thicknesses_nm: stack.layers.iter().map(|l| l.thickness_nm).collect(),
        core: stack.core_range(&real),
        indices,
    })
}
