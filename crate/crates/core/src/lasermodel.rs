//! Laser-diode model: L-I-V curve, threshold density, thermal tuning of the
//! emission line and the temperature window in which the line sits inside
//! the phase-matching bandwidth.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{photon_energy_j, ELEMENTARY_CHARGE};

#[derive(Debug, Error, PartialEq)]
pub enum LaserError {
    #[error("invalid diode parameter: {0}")]
    Invalid(String),
    #[error("current {current_a} A is not above threshold {threshold_a} A")]
    BelowThreshold { current_a: f64, threshold_a: f64 },
    #[error("laser and phase-matching lines are parallel and never cross")]
    NoCrossing,
}

/// Which optical power the photons-per-electron figure counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotonCountConvention {
    /// Power leaving the facet, `P_out`.
    #[default]
    FacetOutput,
    /// Intracavity power `P_int = P_out/(1 − R)`.
    Internal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiodeParams {
    pub series_resistance_ohm: f64,
    pub turn_on_voltage_v: f64,
    pub threshold_current_a: f64,
    pub slope_efficiency_mw_per_a: f64,
    /// Modal facet reflectivity of the lasing (TEB) mode.
    pub r_teb: f64,
    pub reference_wavelength_nm: f64,
    #[serde(rename = "reference_temperature_K")]
    pub reference_temperature_k: f64,
    pub wavelength_slope_nm_per_k: f64,
    pub pulse_duration_s: f64,
    pub repetition_rate_hz: f64,
    #[serde(default)]
    pub photon_count: PhotonCountConvention,
}

impl DiodeParams {
    pub fn validate(&self) -> Result<(), LaserError> {
        let positive = [
            ("series_resistance_ohm", self.series_resistance_ohm),
            ("turn_on_voltage_v", self.turn_on_voltage_v),
            ("threshold_current_a", self.threshold_current_a),
            ("slope_efficiency_mw_per_a", self.slope_efficiency_mw_per_a),
            ("reference_wavelength_nm", self.reference_wavelength_nm),
            ("reference_temperature_K", self.reference_temperature_k),
            ("pulse_duration_s", self.pulse_duration_s),
            ("repetition_rate_hz", self.repetition_rate_hz),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LaserError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.r_teb) {
            return Err(LaserError::Invalid(format!("r_teb must satisfy 0 ≤ R < 1, got {}", self.r_teb)));
        }
        if !(self.wavelength_slope_nm_per_k >= 0.0 && self.wavelength_slope_nm_per_k.is_finite()) {
            return Err(LaserError::Invalid("wavelength_slope_nm_per_k must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Liv {
    pub voltage_v: f64,
    pub p_out_mw: f64,
    pub p_int_mw: f64,
}

/// `V = V_on + R·I`, `P_out = max(0, slope·(I − I_th))`, `P_int = P_out/(1 − R_teb)`.
pub fn liv(p: &DiodeParams, current_a: f64) -> Result<Liv, LaserError> {
    if !(current_a >= 0.0) {
        return Err(LaserError::Invalid(format!("current must be non-negative, got {current_a}")));
    }
    let p_out_mw = (p.slope_efficiency_mw_per_a * (current_a - p.threshold_current_a)).max(0.0);
    Ok(Liv {
        voltage_v: p.turn_on_voltage_v + p.series_resistance_ohm * current_a,
        p_out_mw,
        p_int_mw: p_out_mw / (1.0 - p.r_teb),
    })
}

/// Threshold current density in kA/cm².
pub fn threshold_current_density(threshold_a: f64, width_um: f64, length_mm: f64) -> Result<f64, LaserError> {
    if !(width_um > 0.0 && length_mm > 0.0) {
        return Err(LaserError::Invalid("stripe width and length must be positive".into()));
    }
    let area_cm2 = (width_um * 1e-4) * (length_mm * 0.1);
    Ok(threshold_a / area_cm2 / 1e3)
}

/// Emission wavelength following the band-gap trend.
pub fn laser_wavelength(p: &DiodeParams, temperature_k: f64) -> f64 {
    p.reference_wavelength_nm + p.wavelength_slope_nm_per_k * (temperature_k - p.reference_temperature_k)
}

/// Wavelength that varies linearly with temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearTrend {
    #[serde(rename = "reference_temperature_K")]
    pub reference_temperature_k: f64,
    pub reference_nm: f64,
    pub slope_nm_per_k: f64,
}

impl LinearTrend {
    pub fn at(&self, temperature_k: f64) -> f64 {
        self.reference_nm + self.slope_nm_per_k * (temperature_k - self.reference_temperature_k)
    }

    pub fn of_laser(p: &DiodeParams) -> Self {
        Self {
            reference_temperature_k: p.reference_temperature_k,
            reference_nm: p.reference_wavelength_nm,
            slope_nm_per_k: p.wavelength_slope_nm_per_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingWindow {
    /// Crossing temperature; NaN when the lines coincide.
    pub crossing_k: f64,
    pub half_width_k: f64,
    pub interval_k: (f64, f64),
    /// The lines coincide, so every temperature is in the window.
    pub unbounded: bool,
}

/// Temperatures at which `|λ_laser − λ_pm| ≤ FWHM/2`.
pub fn operating_window(laser: &LinearTrend, pm: &LinearTrend, fwhm_nm: f64) -> Result<OperatingWindow, LaserError> {
    if !(fwhm_nm >= 0.0) {
        return Err(LaserError::Invalid(format!("FWHM must be non-negative, got {fwhm_nm}")));
    }
    let ds = laser.slope_nm_per_k - pm.slope_nm_per_k;
    // Offset of the laser above the pm line at T = 0.
    let offset = laser.at(0.0) - pm.at(0.0);
    if ds == 0.0 {
        if offset.abs() <= 1e-12 * laser.reference_nm.abs().max(1.0) {
            return Ok(OperatingWindow {
                crossing_k: f64::NAN,
                half_width_k: f64::INFINITY,
                interval_k: (f64::NEG_INFINITY, f64::INFINITY),
                unbounded: true,
            });
        }
        return Err(LaserError::NoCrossing);
    }
    let crossing_k = -offset / ds;
    let half_width_k = (fwhm_nm / 2.0) / ds.abs();
    Ok(OperatingWindow {
        crossing_k,
        half_width_k,
        interval_k: (crossing_k - half_width_k, crossing_k + half_width_k),
        unbounded: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    #[serde(rename = "T_K")]
    pub temperature_k: f64,
    pub current_a: f64,
    pub lambda_laser_nm: f64,
    pub lambda_pm_nm: f64,
    pub detuning_nm: f64,
    pub in_window: bool,
}

pub fn operating_sweep(p: &DiodeParams, pm: &LinearTrend, fwhm_nm: f64, current_a: f64, temperatures_k: &[f64]) -> Vec<OperatingPoint> {
    temperatures_k
        .iter()
        .map(|&t| {
            let lambda_laser_nm = laser_wavelength(p, t);
            let lambda_pm_nm = pm.at(t);
            let detuning_nm = lambda_laser_nm - lambda_pm_nm;
            OperatingPoint {
                temperature_k: t,
                current_a,
                lambda_laser_nm,
                lambda_pm_nm,
                detuning_nm,
                in_window: detuning_nm.abs() <= fwhm_nm / 2.0,
            }
        })
        .collect()
}

pub fn sweep_to_csv(points: &[OperatingPoint]) -> String {
    let mut s = String::from("T_K,lambda_laser_nm,lambda_pm_nm,detuning_nm,in_window\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.temperature_k, p.lambda_laser_nm, p.lambda_pm_nm, p.detuning_nm, p.in_window
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairYield {
    /// Photons generated per electron injected above threshold.
    pub photons_per_electron: f64,
    pub pairs_per_electron: f64,
    pub convention: PhotonCountConvention,
}

/// Pairs per electron injected above threshold: the differential
/// photon yield `P/(I − I_th)·e/E_photon` times the pair probability per
/// pump photon. `P` is the facet output or the internal power according to
/// `p.photon_count`.
pub fn pairs_per_electron(p: &DiodeParams, current_a: f64, pair_probability: f64, lambda_p_nm: f64) -> Result<PairYield, LaserError> {
    if current_a <= p.threshold_current_a {
        return Err(LaserError::BelowThreshold {
            current_a,
            threshold_a: p.threshold_current_a,
        });
    }
    if !(pair_probability >= 0.0) || !(lambda_p_nm > 0.0) {
        return Err(LaserError::Invalid("pair probability must be non-negative and λp positive".into()));
    }
    let l = liv(p, current_a)?;
    let power_mw = match p.photon_count {
        PhotonCountConvention::FacetOutput => l.p_out_mw,
        PhotonCountConvention::Internal => l.p_int_mw,
    };
    let photons_per_electron = power_mw * 1e-3 / (current_a - p.threshold_current_a) * ELEMENTARY_CHARGE / photon_energy_j(lambda_p_nm);
    Ok(PairYield {
        photons_per_electron,
        pairs_per_electron: photons_per_electron * pair_probability,
        convention: p.photon_count,
    })
}

/// Electrons injected above threshold during one pulse of `duration_s`.
pub fn electrons_above_threshold(p: &DiodeParams, current_a: f64, duration_s: f64) -> f64 {
    (current_a - p.threshold_current_a).max(0.0) * duration_s / ELEMENTARY_CHARGE
}

/// Expected pairs per pulse from a per-electron efficiency.
pub fn pairs_per_pulse(p: &DiodeParams, current_a: f64, duration_s: f64, pairs_per_electron: f64) -> f64 {
    electrons_above_threshold(p, current_a, duration_s) * pairs_per_electron
}
