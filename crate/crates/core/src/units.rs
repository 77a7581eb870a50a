//! Physical constants and the unit conventions used across the crate.
//!
//! Geometry and positions are in micrometres. Potentials are volts, ion
//! energies are electronvolts, frequencies are reported in MHz (ordinary
//! frequency, not angular). Conversion to SI happens only where a formula
//! needs it.

use std::f64::consts::PI;

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Vacuum permittivity, F/m.
pub const EPSILON_0: f64 = 8.854_187_8128e-12;
/// Coulomb constant 1/(4 pi eps0), N m^2 / C^2.
pub const COULOMB_K: f64 = 1.0 / (4.0 * PI * EPSILON_0);
/// Atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Mass of 171Yb in atomic mass units.
pub const YB171_MASS_U: f64 = 170.936_323;

/// Metres per micrometre.
pub const UM: f64 = 1.0e-6;

/// Convert a curvature in eV/um^2 to a spring constant in J/m^2.
pub fn ev_per_um2_to_si(k: f64) -> f64 {
    k * ELEMENTARY_CHARGE / (UM * UM)
}

/// Secular frequency in MHz for a curvature (eV/um^2) and a mass (kg).
/// Negative curvature gives a negative "frequency" as an instability marker.
pub fn curvature_to_mhz(k_ev_um2: f64, mass: f64) -> f64 {
    let k = ev_per_um2_to_si(k_ev_um2);
    let w = (k.abs() / mass).sqrt() / (2.0 * PI) / 1.0e6;
    if k < 0.0 {
        -w
    } else {
        w
    }
}

/// Curvature in eV/um^2 that yields `f_mhz` for mass `mass` (kg).
pub fn mhz_to_curvature(f_mhz: f64, mass: f64) -> f64 {
    let w = 2.0 * PI * f_mhz * 1.0e6;
    mass * w * w * UM * UM / ELEMENTARY_CHARGE
}

/// Coulomb energy scale k q1 q2 / (1 um) expressed in eV, so that the pair
/// energy is `coulomb_ev_um(q1, q2) / r_um`.
pub fn coulomb_ev_um(q1: f64, q2: f64) -> f64 {
    COULOMB_K * q1 * q2 / (UM * ELEMENTARY_CHARGE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_curvature_round_trip() {
        let m = YB171_MASS_U * ATOMIC_MASS_UNIT;
        let k = mhz_to_curvature(1.0, m);
        assert!((curvature_to_mhz(k, m) - 1.0).abs() < 1e-12);
        assert!(curvature_to_mhz(-k, m) < 0.0);
    }

    #[test]
    fn coulomb_scale_for_unit_charges() {
        // e^2/(4 pi eps0 * 1 um) = 1.439964... meV
        let c = coulomb_ev_um(ELEMENTARY_CHARGE, ELEMENTARY_CHARGE);
        assert!((c - 1.439_964_5e-3).abs() < 1e-9);
    }
}
