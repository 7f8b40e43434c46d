//! Simulation and analysis toolkit for electrically injected AlGaAs
//! photon-pair sources: waveguide modes, modal phase matching, SHG and SPDC
//! efficiency, laser operating point and coincidence statistics.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counting;
pub mod device;
pub mod lasermodel;
pub mod layerstack;
pub mod materials;
pub mod modesolver;
pub mod nonlinear;
pub mod units;
