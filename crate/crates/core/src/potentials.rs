//! Pseudopotential and total potential energy of a single ion.
//!
//! Energies are in eV, positions in um, so gradients are eV/um and
//! Hessians eV/um^2. The rf drive enters through the unit-sum rf basis `u`
//! (both rails at 1 V): `Phi_ps = q^2 V^2 |grad u|^2 / (4 m Omega^2)`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::electrostatics::grid::Grid;
use crate::source::{Derivs, FieldError, FieldSample, FieldSource, Superposition};
use crate::units::{ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE, UM, YB171_MASS_U};
use crate::{Matrix3, Point3, Vector3};

/// Finite-difference step (um) for pseudopotential Hessians.
pub const HESSIAN_STEP: f64 = 0.25;

/// Largest Mathieu q eigenvalue before the pseudopotential picture is
/// considered unreliable.
pub const MATHIEU_Q_WARN: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("invalid species: {0}")]
    Species(String),
    #[error("invalid drive `{field}`: {reason}")]
    Drive { field: &'static str, reason: String },
    #[error("unknown electrode `{0}`")]
    UnknownElectrode(String),
    #[error("electrode `{0}` cannot take a static voltage")]
    NotStatic(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IonSpecies {
    /// kg
    pub mass: f64,
    /// C
    pub charge: f64,
    pub label: String,
}

impl IonSpecies {
    pub fn yb171() -> Self {
        Self {
            mass: YB171_MASS_U * ATOMIC_MASS_UNIT,
            charge: ELEMENTARY_CHARGE,
            label: "171Yb+".into(),
        }
    }

    pub fn validate(&self) -> Result<(), PotentialError> {
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(PotentialError::Species(format!("mass must be positive, got {}", self.mass)));
        }
        if !self.charge.is_finite() || self.charge == 0.0 {
            return Err(PotentialError::Species("charge must be nonzero".into()));
        }
        Ok(())
    }

    /// Charge in units of the elementary charge.
    pub fn charge_e(&self) -> f64 {
        self.charge / ELEMENTARY_CHARGE
    }
}

impl Default for IonSpecies {
    fn default() -> Self {
        Self::yb171()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveConfig {
    /// Peak rf amplitude on both rails, V.
    pub rf_peak: f64,
    /// rad/s
    pub rf_omega: f64,
    /// Static offset on the rf rails, V.
    #[serde(default)]
    pub rf_dc_bias: f64,
    /// Static voltages by electrode name. Unlisted electrodes are at 0 V.
    #[serde(default)]
    pub dc_voltages: BTreeMap<String, f64>,
}

impl DriveConfig {
    pub fn new(rf_peak: f64, rf_freq_mhz: f64) -> Self {
        Self {
            rf_peak,
            rf_omega: 2.0 * std::f64::consts::PI * rf_freq_mhz * 1e6,
            rf_dc_bias: 0.0,
            dc_voltages: BTreeMap::new(),
        }
    }

    /// 180 V peak at 40 MHz, no static voltages.
    pub fn nominal() -> Self {
        Self::new(180.0, 40.0)
    }

    /// The nominal drive with the rf rails biased to -3 V.
    pub fn nominal_biased() -> Self {
        Self::nominal().with_bias(-3.0)
    }

    /// Same rf, no bias and no static voltages.
    pub fn rf_only(&self) -> Self {
        Self {
            rf_dc_bias: 0.0,
            dc_voltages: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.rf_dc_bias = bias;
        self
    }

    pub fn with_voltages(mut self, voltages: BTreeMap<String, f64>) -> Self {
        self.dc_voltages = voltages;
        self
    }

    pub fn rf_freq_mhz(&self) -> f64 {
        self.rf_omega / (2.0 * std::f64::consts::PI * 1e6)
    }

    pub fn validate(&self) -> Result<(), PotentialError> {
        let bad = |field, reason: &str| {
            Err(PotentialError::Drive {
                field,
                reason: reason.into(),
            })
        };
        if !(self.rf_omega.is_finite() && self.rf_omega > 0.0) {
            return bad("rf_omega", "must be positive");
        }
        if !self.rf_peak.is_finite() {
            return bad("rf_peak", "must be finite");
        }
        if !self.rf_dc_bias.is_finite() {
            return bad("rf_dc_bias", "must be finite");
        }
        if self.dc_voltages.values().any(|v| !v.is_finite()) {
            return bad("dc_voltages", "must be finite");
        }
        Ok(())
    }
}

/// Which energy a grid export writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PotentialKind {
    Pseudo,
    Total,
}

/// One ion species under one drive in the field of one electrode set.
#[derive(Clone)]
pub struct PotentialField {
    source: Arc<dyn FieldSource>,
    species: IonSpecies,
    drive: DriveConfig,
    static_voltages: Vec<f64>,
    sup: Arc<dyn Superposition>,
    ps: f64,
    q: f64,
}

impl std::fmt::Debug for PotentialField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PotentialField")
            .field("species", &self.species)
            .field("drive", &self.drive)
            .finish_non_exhaustive()
    }
}

/// Voltage vector applying `voltages` to the static (non-rf, non-ground)
/// electrodes by name.
pub fn static_vector(
    source: &dyn FieldSource,
    voltages: &BTreeMap<String, f64>,
) -> Result<Vec<f64>, PotentialError> {
    let mut v = vec![0.0; source.electrodes().len()];
    for (name, &value) in voltages {
        let i = source
            .electrode_index(name)
            .ok_or_else(|| PotentialError::UnknownElectrode(name.clone()))?;
        let role = source.electrodes()[i].role;
        if role.is_rf() || role.is_grounded() {
            return Err(PotentialError::NotStatic(name.clone()));
        }
        v[i] = value;
    }
    Ok(v)
}

impl PotentialField {
    pub fn new(
        source: Arc<dyn FieldSource>,
        species: IonSpecies,
        drive: DriveConfig,
    ) -> Result<Self, PotentialError> {
        species.validate()?;
        drive.validate()?;
        let rf_unit: Vec<f64> = source
            .electrodes()
            .iter()
            .map(|e| if e.role.is_rf() { 1.0 } else { 0.0 })
            .collect();
        let mut statics = static_vector(source.as_ref(), &drive.dc_voltages)?;
        for (s, r) in statics.iter_mut().zip(&rf_unit) {
            *s += r * drive.rf_dc_bias;
        }
        let sup = source.superpose(&[rf_unit, statics.clone()]);
        let q = species.charge_e();
        let ps = species.charge * species.charge * drive.rf_peak * drive.rf_peak
            / (4.0 * species.mass * drive.rf_omega * drive.rf_omega * UM * UM)
            / ELEMENTARY_CHARGE;
        Ok(Self {
            source,
            species,
            drive,
            static_voltages: statics,
            sup,
            ps,
            q,
        })
    }

    /// Same species and source under another drive.
    pub fn with_drive(&self, drive: DriveConfig) -> Result<Self, PotentialError> {
        Self::new(self.source.clone(), self.species.clone(), drive)
    }

    pub fn source(&self) -> &Arc<dyn FieldSource> {
        &self.source
    }

    pub fn species(&self) -> &IonSpecies {
        &self.species
    }

    pub fn drive(&self) -> &DriveConfig {
        &self.drive
    }

    /// Full static voltage vector, including the bias on the rf rails.
    pub fn static_voltages(&self) -> &[f64] {
        &self.static_voltages
    }

    /// Ion charge in units of e: multiplies volts to give eV.
    pub fn charge_e(&self) -> f64 {
        self.q
    }

    /// `Phi_ps = pseudo_coefficient * |grad u|^2` with `u` in V/V and the
    /// gradient in 1/um.
    pub fn pseudo_coefficient(&self) -> f64 {
        self.ps
    }

    /// Unit rf basis and static potential (V) at `p`.
    pub fn fields(&self, p: &Point3, derivs: Derivs) -> Result<(FieldSample, FieldSample), FieldError> {
        let s = self.sup.sample(p, derivs)?;
        Ok((s[0], s[1]))
    }

    pub fn pseudopotential(&self, p: &Point3) -> Result<f64, FieldError> {
        let (rf, _) = self.fields(p, Derivs::Gradient)?;
        Ok(self.ps * rf.grad.norm_squared())
    }

    pub fn total_potential(&self, p: &Point3) -> Result<f64, FieldError> {
        let (rf, dc) = self.fields(p, Derivs::Gradient)?;
        Ok(self.ps * rf.grad.norm_squared() + self.q * dc.phi)
    }

    /// Pseudopotential and its gradient.
    pub fn pseudo_gradient(&self, p: &Point3) -> Result<(f64, Vector3<f64>), FieldError> {
        let (rf, _) = self.fields(p, Derivs::Hessian)?;
        Ok(self.pseudo_from(&rf))
    }

    fn pseudo_from(&self, rf: &FieldSample) -> (f64, Vector3<f64>) {
        (self.ps * rf.grad.norm_squared(), 2.0 * self.ps * (rf.hess * rf.grad))
    }

    /// Total potential and its gradient.
    pub fn total_gradient(&self, p: &Point3) -> Result<(f64, Vector3<f64>), FieldError> {
        let (rf, dc) = self.fields(p, Derivs::Hessian)?;
        let (e, g) = self.pseudo_from(&rf);
        Ok((e + self.q * dc.phi, g + self.q * dc.grad))
    }

    /// Pseudopotential Hessian from central differences of its analytic
    /// gradient, Richardson-extrapolated once.
    pub fn pseudo_hessian(&self, p: &Point3) -> Result<Matrix3<f64>, FieldError> {
        let diff = |h: f64| -> Result<Matrix3<f64>, FieldError> {
            let mut m = Matrix3::zeros();
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let (_, a) = self.pseudo_gradient(&(p + d))?;
                let (_, b) = self.pseudo_gradient(&(p - d))?;
                m.set_column(k, &((a - b) / (2.0 * h)));
            }
            Ok(m)
        };
        let coarse = diff(HESSIAN_STEP)?;
        let fine = diff(0.5 * HESSIAN_STEP)?;
        let m = (4.0 * fine - coarse) / 3.0;
        Ok(0.5 * (m + m.transpose()))
    }

    pub fn total_hessian(&self, p: &Point3) -> Result<Matrix3<f64>, FieldError> {
        let (_, dc) = self.fields(p, Derivs::Hessian)?;
        Ok(self.pseudo_hessian(p)? + self.q * dc.hess)
    }

    /// Dimensionless `Q = 2 q V H_rf / (m Omega^2)`.
    pub fn mathieu_q(&self, p: &Point3) -> Result<Matrix3<f64>, FieldError> {
        let (rf, _) = self.fields(p, Derivs::Hessian)?;
        let s = 2.0 * self.species.charge * self.drive.rf_peak
            / (self.species.mass * self.drive.rf_omega * self.drive.rf_omega * UM * UM);
        let q = s * rf.hess;
        let largest = max_abs_eigenvalue(&q);
        if largest > MATHIEU_Q_WARN {
            log::warn!(
                "Mathieu q = {largest:.3} at ({:.2}, {:.2}, {:.2}) um exceeds {MATHIEU_Q_WARN}",
                p.x,
                p.y,
                p.z
            );
        }
        Ok(q)
    }

    /// CSV `x_um,y_um,z_um,<kind>_eV`; points at conductors are left empty.
    pub fn grid_csv(&self, grid: &Grid, kind: PotentialKind) -> String {
        let column = match kind {
            PotentialKind::Pseudo => "pseudo_eV",
            PotentialKind::Total => "total_eV",
        };
        let mut out = format!("x_um,y_um,z_um,{column}\n");
        for p in grid.points() {
            let v = match kind {
                PotentialKind::Pseudo => self.pseudopotential(&p),
                PotentialKind::Total => self.total_potential(&p),
            };
            let _ = match v {
                Ok(v) => writeln!(out, "{},{},{},{}", p.x, p.y, p.z, v),
                Err(_) => writeln!(out, "{},{},{},", p.x, p.y, p.z),
            };
        }
        out
    }
}

pub fn max_abs_eigenvalue(m: &Matrix3<f64>) -> f64 {
    m.symmetric_eigenvalues().iter().fold(0.0, |a: f64, v| a.max(v.abs()))
}
