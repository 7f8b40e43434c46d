//! Device description: the layer stack plus the optional `diode` and
//! `nonlinear` sections of a device JSON file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::lasermodel::DiodeParams;
use crate::layerstack::{parse_stack_value, LayerStack, StackError};
use crate::materials::DispersionTable;
use crate::nonlinear::{degeneracy, CavityMode, NonlinearError, PhaseMatchCurves, ShgModel};

pub const BUNDLED_DEVICE_JSON: &str = include_str!("../data/paper_device.json");
pub const PULSED_EXPERIMENT_JSON: &str = include_str!("../data/pulsed_experiment.json");

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonlinearParams {
    /// Normalized SHG efficiency, %·W⁻¹·cm⁻².
    pub eta_pct_per_w_cm2: f64,
    /// Effective signal bandwidth at the degenerate wavelength.
    pub spdc_bandwidth_nm: f64,
    /// Measured pair probability per pump photon, used for the pair yield.
    pub measured_pair_probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Device {
    pub name: Option<String>,
    pub stack: LayerStack,
    pub diode: Option<DiodeParams>,
    pub nonlinear: Option<NonlinearParams>,
}

fn section<T: for<'de> Deserialize<'de>>(doc: &Value, key: &str) -> Result<Option<T>, StackError> {
    match doc.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_path_to_error::deserialize(v).map(Some).map_err(|e| {
            let path = e.path().to_string();
            let path = if path.is_empty() || path == "." { key.to_string() } else { format!("{key}.{path}") };
            StackError::Schema {
                path,
                message: e.into_inner().to_string(),
            }
        }),
    }
}

impl Device {
    pub fn parse(document: &str, table: &DispersionTable) -> Result<Self, StackError> {
        let doc: Value = serde_json::from_str(document).map_err(|e| StackError::Schema {
            path: "<root>".into(),
            message: e.to_string(),
        })?;
        let stack = parse_stack_value(&doc, table)?;
        let diode: Option<DiodeParams> = section(&doc, "diode")?;
        if let Some(d) = &diode {
            d.validate().map_err(|e| StackError::Schema {
                path: "diode".into(),
                message: e.to_string(),
            })?;
        }
        let nonlinear: Option<NonlinearParams> = section(&doc, "nonlinear")?;
        if let Some(n) = &nonlinear {
            if !(n.eta_pct_per_w_cm2 >= 0.0 && n.spdc_bandwidth_nm >= 0.0 && n.measured_pair_probability >= 0.0) {
                return Err(StackError::Schema {
                    path: "nonlinear".into(),
                    message: "values must be non-negative".into(),
                });
            }
        }
        Ok(Self {
            name: doc.get("name").and_then(Value::as_str).map(str::to_owned),
            stack,
            diode,
            nonlinear,
        })
    }

    pub fn from_path(path: &Path, table: &DispersionTable) -> Result<Self, StackError> {
        let text = std::fs::read_to_string(path).map_err(|e| StackError::Schema {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, table)
    }

    /// The bundled description of the electrically injected source.
    pub fn bundled(table: &DispersionTable) -> Result<Self, StackError> {
        Self::parse(BUNDLED_DEVICE_JSON, table)
    }

    pub fn diode(&self) -> Result<&DiodeParams, StackError> {
        self.diode.as_ref().ok_or_else(|| StackError::Schema {
            path: "diode".into(),
            message: "missing section".into(),
        })
    }

    pub fn nonlinear(&self) -> Result<&NonlinearParams, StackError> {
        self.nonlinear.as_ref().ok_or_else(|| StackError::Schema {
            path: "nonlinear".into(),
            message: "missing section".into(),
        })
    }

    /// SHG model of this device at the temperature of `curves`: facet
    /// reflectivities from the stack, modal loss and group index from the
    /// curves at degeneracy, zero cavity phases.
    pub fn shg_model(&self, curves: &PhaseMatchCurves, fundamental_power_w: f64) -> Result<ShgModel, NonlinearError> {
        let eta = self
            .nonlinear
            .map(|n| n.eta_pct_per_w_cm2)
            .ok_or_else(|| NonlinearError::Invalid("device has no nonlinear section".into()))?;
        let pump = degeneracy(curves)?;
        let fundamental = 2.0 * pump;
        let mode = |curve: &crate::modesolver::DispersionCurve, r: f64, l: f64| -> Result<CavityMode, NonlinearError> {
            Ok(CavityMode {
                reflectivity: r,
                alpha_cm1: curve.alpha_at(l)?,
                group_index: curve.group_index_at(l)?,
                phase_rad: 0.0,
            })
        };
        let f = &self.stack.facets;
        Ok(ShgModel {
            eta_pct_per_w_cm2: eta,
            length_cm: self.stack.length_cm(),
            fundamental_power_w,
            te: mode(&curves.signal, f.r_te00, fundamental)?,
            tm: mode(&curves.idler, f.r_tm00, fundamental)?,
            teb: mode(&curves.pump, f.r_teb, pump)?,
            phase_reference_nm: fundamental,
        })
    }
}
