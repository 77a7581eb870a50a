//! Linear maps from electrode voltages to potential.
//!
//! A [`FieldSource`] knows one unit-voltage basis potential per electrode.
//! Analyses never touch basis fields directly: they ask for a
//! [`Superposition`] with a fixed set of weight vectors and sample it, which
//! lets the BEM basis precombine its panel charges once.

use std::sync::Arc;

use thiserror::Error;

use crate::geometry::ElectrodeRole;
use crate::{Matrix3, Point3, Vector3};

#[derive(Clone, Debug, PartialEq)]
pub struct ElectrodeInfo {
    pub name: String,
    pub role: ElectrodeRole,
}

/// Potential (V) with gradient (V/um) and Hessian (V/um^2).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FieldSample {
    pub phi: f64,
    pub grad: Vector3<f64>,
    pub hess: Matrix3<f64>,
}

impl FieldSample {
    pub fn scale(&self, w: f64) -> FieldSample {
        FieldSample {
            phi: w * self.phi,
            grad: w * self.grad,
            hess: w * self.hess,
        }
    }

    pub fn add_scaled(&mut self, w: f64, o: &FieldSample) {
        self.phi += w * o.phi;
        self.grad += w * o.grad;
        self.hess += w * o.hess;
    }
}

/// How many derivatives a sample needs. Higher orders cost more.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Derivs {
    Value,
    Gradient,
    Hessian,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error("point ({:.3}, {:.3}, {:.3}) um is within {distance:.3} um of a conductor", point[0], point[1], point[2])]
    PointInsideConductor { point: [f64; 3], distance: f64 },
    #[error("unknown electrode `{0}`")]
    UnknownElectrode(String),
    #[error("expected {expected} voltages, got {got}")]
    VoltageCount { expected: usize, got: usize },
}

/// Fixed linear combinations of basis potentials.
pub trait Superposition: Send + Sync {
    fn outputs(&self) -> usize;
    /// One sample per weight vector. Orders not requested are left zero.
    fn sample(&self, p: &Point3, derivs: Derivs) -> Result<Vec<FieldSample>, FieldError>;
}

pub trait FieldSource: Send + Sync {
    fn electrodes(&self) -> &[ElectrodeInfo];

    /// `weights[k][e]` is the voltage on electrode `e` in output `k`.
    fn superpose(&self, weights: &[Vec<f64>]) -> Arc<dyn Superposition>;

    fn electrode_index(&self, name: &str) -> Option<usize> {
        self.electrodes().iter().position(|e| e.name == name)
    }
}

fn single(
    source: &dyn FieldSource,
    voltages: &[f64],
    p: &Point3,
    d: Derivs,
) -> Result<FieldSample, FieldError> {
    let n = source.electrodes().len();
    if voltages.len() != n {
        return Err(FieldError::VoltageCount {
            expected: n,
            got: voltages.len(),
        });
    }
    let s = source.superpose(&[voltages.to_vec()]);
    Ok(s.sample(p, d)?[0])
}

/// Potential (V) for the given electrode voltages.
pub fn potential_at(source: &dyn FieldSource, voltages: &[f64], p: &Point3) -> Result<f64, FieldError> {
    Ok(single(source, voltages, p, Derivs::Value)?.phi)
}

/// Electric field `-grad phi` in V/m.
pub fn field_at(
    source: &dyn FieldSource,
    voltages: &[f64],
    p: &Point3,
) -> Result<Vector3<f64>, FieldError> {
    Ok(-single(source, voltages, p, Derivs::Gradient)?.grad * 1e6)
}

/// Hessian of the potential in V/m^2.
pub fn hessian_at(
    source: &dyn FieldSource,
    voltages: &[f64],
    p: &Point3,
) -> Result<Matrix3<f64>, FieldError> {
    Ok(single(source, voltages, p, Derivs::Hessian)?.hess * 1e12)
}

pub type BasisFn = Arc<dyn Fn(&Point3) -> FieldSample + Send + Sync>;

/// Basis potentials given as closed-form functions. Used for idealized
/// traps and as an oracle independent of the BEM.
#[derive(Clone)]
pub struct AnalyticSource {
    electrodes: Vec<ElectrodeInfo>,
    fields: Vec<BasisFn>,
}

impl AnalyticSource {
    pub fn new() -> Self {
        Self {
            electrodes: Vec::new(),
            fields: Vec::new(),
        }
    }

    pub fn with(mut self, name: &str, role: ElectrodeRole, f: BasisFn) -> Self {
        self.electrodes.push(ElectrodeInfo {
            name: name.into(),
            role,
        });
        self.fields.push(f);
        self
    }

    /// `phi = c + g.p + p^T H p / 2` per unit volt (p in um).
    pub fn with_quadratic(
        self,
        name: &str,
        role: ElectrodeRole,
        c: f64,
        g: Vector3<f64>,
        h: Matrix3<f64>,
    ) -> Self {
        let h = 0.5 * (h + h.transpose());
        self.with(
            name,
            role,
            Arc::new(move |p: &Point3| FieldSample {
                phi: c + g.dot(p) + 0.5 * p.dot(&(h * p)),
                grad: g + h * p,
                hess: h,
            }),
        )
    }

    /// Ideal linear quadrupole with electrode distance `r0` (um): the unit
    /// potential is `(x^2 - y^2) / (2 r0^2)`.
    pub fn four_rod(r0: f64) -> Self {
        let k = 1.0 / (r0 * r0);
        Self::new().with_quadratic(
            "rf",
            ElectrodeRole::RfRail {
                side: crate::geometry::Side::Right,
            },
            0.0,
            Vector3::zeros(),
            Matrix3::from_diagonal(&Vector3::new(k, -k, 0.0)),
        )
    }
}

impl Default for AnalyticSource {
    fn default() -> Self {
        Self::new()
    }
}

struct AnalyticSuperposition {
    fields: Vec<BasisFn>,
    weights: Vec<Vec<f64>>,
}

impl Superposition for AnalyticSuperposition {
    fn outputs(&self) -> usize {
        self.weights.len()
    }

    fn sample(&self, p: &Point3, _: Derivs) -> Result<Vec<FieldSample>, FieldError> {
        let basis: Vec<FieldSample> = self.fields.iter().map(|f| f(p)).collect();
        Ok(self
            .weights
            .iter()
            .map(|w| {
                let mut s = FieldSample::default();
                for (b, &v) in basis.iter().zip(w) {
                    if v != 0.0 {
                        s.add_scaled(v, b);
                    }
                }
                s
            })
            .collect())
    }
}

impl FieldSource for AnalyticSource {
    fn electrodes(&self) -> &[ElectrodeInfo] {
        &self.electrodes
    }

    fn superpose(&self, weights: &[Vec<f64>]) -> Arc<dyn Superposition> {
        Arc::new(AnalyticSuperposition {
            fields: self.fields.clone(),
            weights: weights.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_source_is_exact() {
        let h = Matrix3::new(2.0, 0.5, 0.0, 0.5, -1.0, 0.1, 0.0, 0.1, -1.0);
        let s = AnalyticSource::new().with_quadratic(
            "e",
            ElectrodeRole::Other,
            1.0,
            Vector3::new(0.1, 0.0, 0.0),
            h,
        );
        let p = Point3::new(1.0, 2.0, 3.0);
        let phi = potential_at(&s, &[2.0], &p).unwrap();
        let expect = 2.0 * (1.0 + 0.1 + 0.5 * p.dot(&(h * p)));
        assert!((phi - expect).abs() < 1e-12);
        let hess = hessian_at(&s, &[1.0], &p).unwrap();
        assert!((hess - h * 1e12).norm() < 1e-3);
    }

    #[test]
    fn wrong_voltage_count_is_an_error() {
        let s = AnalyticSource::four_rod(100.0);
        assert!(matches!(
            potential_at(&s, &[1.0, 2.0], &Point3::zeros()),
            Err(FieldError::VoltageCount { .. })
        ));
    }
}
