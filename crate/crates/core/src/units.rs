//! Physical constants and the unit conversions shared by every module.
//!
//! Conventions: wavelengths in nm, lengths of devices in cm or mm as named,
//! propagation constants and mismatches in rad/cm, losses in cm⁻¹,
//! temperatures in kelvin.

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Planck constant (J·s).
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Elementary charge (C).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// hc expressed in eV·nm.
pub const HC_EV_NM: f64 = 1239.841984;

pub const NM_PER_CM: f64 = 1.0e7;
pub const NM_PER_UM: f64 = 1.0e3;
pub const KELVIN_OFFSET: f64 = 273.15;

pub fn celsius_to_kelvin(c: f64) -> f64 {
    c + KELVIN_OFFSET
}

pub fn kelvin_to_celsius(k: f64) -> f64 {
    k - KELVIN_OFFSET
}

/// Photon energy in eV at a vacuum wavelength in nm.
pub fn photon_energy_ev(wavelength_nm: f64) -> f64 {
    HC_EV_NM / wavelength_nm
}

/// Photon energy in joules at a vacuum wavelength in nm.
pub fn photon_energy_j(wavelength_nm: f64) -> f64 {
    PLANCK * SPEED_OF_LIGHT / (wavelength_nm * 1e-9)
}

/// Vacuum wavenumber 2π/λ in rad/nm.
pub fn wavenumber_per_nm(wavelength_nm: f64) -> f64 {
    2.0 * std::f64::consts::PI / wavelength_nm
}

/// Power attenuation coefficient (cm⁻¹) from the imaginary part of an index.
pub fn alpha_from_kappa(kappa: f64, wavelength_nm: f64) -> f64 {
    4.0 * std::f64::consts::PI * kappa / wavelength_nm * NM_PER_CM
}

/// Imaginary index part producing a power attenuation `alpha_cm1`.
pub fn kappa_from_alpha(alpha_cm1: f64, wavelength_nm: f64) -> f64 {
    alpha_cm1 * wavelength_nm / (NM_PER_CM * 4.0 * std::f64::consts::PI)
}

/// Optical frequency bandwidth (Hz) equivalent to `delta_nm` around `center_nm`.
pub fn bandwidth_nm_to_hz(delta_nm: f64, center_nm: f64) -> f64 {
    SPEED_OF_LIGHT * (delta_nm * 1e-9) / (center_nm * 1e-9).powi(2)
}

pub fn bandwidth_hz_to_nm(delta_hz: f64, center_nm: f64) -> f64 {
    delta_hz * (center_nm * 1e-9).powi(2) / SPEED_OF_LIGHT * 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_kappa_round_trip() {
        let k = kappa_from_alpha(2.0, 1570.0);
        assert!((alpha_from_kappa(k, 1570.0) - 2.0).abs() < 1e-12);
        // 2 cm⁻¹ at 1570 nm is a tiny imaginary index.
        assert!((k - 2.498_6e-5).abs() < 1e-8);
    }

    #[test]
    fn bandwidth_conversion_is_invertible() {
        let hz = bandwidth_nm_to_hz(5.0, 1570.0);
        assert!((hz - 6.0811e11).abs() / 6.0811e11 < 1e-3);
        assert!((bandwidth_hz_to_nm(hz, 1570.0) - 5.0).abs() < 1e-12);
    }
}
