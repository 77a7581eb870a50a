use std::sync::Arc;

use rayon::prelude::*;

use crate::geometry::PanelMesh;
use crate::source::{Derivs, ElectrodeInfo, FieldError, FieldSample, FieldSource, Superposition};
use crate::units::EPSILON_0;
use crate::{Matrix3, Point3, Vector3};

use super::bem::BemSystem;
use super::kernel::{blended, PanelFrame, NEAR};
use super::BemError;

/// Unit-voltage panel densities for every electrode of a mesh.
///
/// `charges[e][j]` is the density `s` (V/um) on panel `j` when electrode
/// `e` is at 1 V and all others are grounded; the surface charge density
/// is `4 pi eps0 s` in SI units.
#[derive(Clone)]
pub struct BasisSet {
    mesh: Arc<PanelMesh>,
    frames: Arc<Vec<PanelFrame>>,
    electrodes: Vec<ElectrodeInfo>,
    charges: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub condition_estimate: f64,
}

impl BasisSet {
    pub fn solve(mesh: Arc<PanelMesh>) -> Result<Self, BemError> {
        let system = BemSystem::assemble(&mesh)?;
        Self::from_system(mesh, &system)
    }

    pub fn from_system(mesh: Arc<PanelMesh>, system: &BemSystem) -> Result<Self, BemError> {
        let solved = (0..mesh.electrodes.len())
            .into_par_iter()
            .map(|e| system.solve_basis(e))
            .collect::<Result<Vec<_>, _>>()?;
        let (charges, residuals): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
        let mut set = Self::from_parts(mesh, charges)?;
        set.residuals = residuals;
        set.condition_estimate = system.condition_estimate();
        Ok(set)
    }

    /// Rebuild from stored densities (for example a cache file).
    pub fn from_parts(mesh: Arc<PanelMesh>, charges: Vec<Vec<f64>>) -> Result<Self, BemError> {
        if charges.len() != mesh.electrodes.len() || charges.iter().any(|c| c.len() != mesh.len()) {
            return Err(BemError::ShapeMismatch);
        }
        let frames = Arc::new(mesh.panels.iter().map(PanelFrame::new).collect());
        let electrodes = mesh
            .electrodes
            .iter()
            .map(|e| ElectrodeInfo {
                name: e.name.clone(),
                role: e.role,
            })
            .collect();
        Ok(Self {
            mesh,
            frames,
            electrodes,
            charges,
            residuals: Vec::new(),
            condition_estimate: f64::NAN,
        })
    }

    pub fn mesh(&self) -> &PanelMesh {
        &self.mesh
    }

    pub fn charges(&self, electrode: usize) -> &[f64] {
        &self.charges[electrode]
    }

    /// Charge (C) on the whole mesh when `electrode` is at 1 V.
    pub fn total_charge(&self, electrode: usize) -> f64 {
        let sum: f64 = self.charges[electrode]
            .iter()
            .zip(self.frames.iter())
            .map(|(s, f)| s * f.area)
            .sum();
        4.0 * std::f64::consts::PI * EPSILON_0 * 1e-6 * sum
    }

    /// Charge (C) on the panels of `on` when `driven` is at 1 V.
    pub fn induced_charge(&self, driven: usize, on: usize) -> f64 {
        let sum: f64 = self
            .mesh
            .panels
            .iter()
            .zip(&self.charges[driven])
            .filter(|(p, _)| p.owner == on)
            .map(|(p, s)| s * p.area)
            .sum();
        4.0 * std::f64::consts::PI * EPSILON_0 * 1e-6 * sum
    }
}

struct BemSuperposition {
    frames: Arc<Vec<PanelFrame>>,
    /// Panel-major: `weights[j * k + o]` is the density of panel `j` in output `o`.
    weights: Vec<f64>,
    outputs: usize,
}

impl Superposition for BemSuperposition {
    fn outputs(&self) -> usize {
        self.outputs
    }

    fn sample(&self, p: &Point3, derivs: Derivs) -> Result<Vec<FieldSample>, FieldError> {
        let k = self.outputs;
        let mut phi = vec![0.0; k];
        let mut grad = vec![Vector3::zeros(); k];
        let mut hess = vec![Matrix3::zeros(); k];
        for (j, f) in self.frames.iter().enumerate() {
            let w = &self.weights[j * k..(j + 1) * k];
            let r = (p - f.centre).norm();
            if r < NEAR * f.diameter {
                let d = f.distance(p);
                if d < f.max_edge() {
                    return Err(FieldError::PointInsideConductor {
                        point: [p.x, p.y, p.z],
                        distance: d,
                    });
                }
            }
            match derivs {
                Derivs::Value => {
                    let v = if r < super::kernel::FAR * f.diameter {
                        blended(f, p).phi
                    } else {
                        gauss_value(f, p)
                    };
                    for o in 0..k {
                        phi[o] += w[o] * v;
                    }
                }
                Derivs::Gradient | Derivs::Hessian => {
                    let s = if r < super::kernel::FAR * f.diameter {
                        blended(f, p)
                    } else if derivs == Derivs::Gradient {
                        gauss_gradient(f, p)
                    } else {
                        super::kernel::gauss(f, p)
                    };
                    for o in 0..k {
                        phi[o] += w[o] * s.phi;
                        grad[o] += w[o] * s.grad;
                        if derivs == Derivs::Hessian {
                            hess[o] += w[o] * s.hess;
                        }
                    }
                }
            }
        }
        Ok((0..k)
            .map(|o| FieldSample {
                phi: phi[o],
                grad: grad[o],
                hess: hess[o],
            })
            .collect())
    }
}

const GAUSS: f64 = 0.577_350_269_189_625_8;

fn gauss_value(f: &PanelFrame, p: &Point3) -> f64 {
    let q = 0.25 * f.area;
    let mut v = 0.0;
    for su in [-GAUSS, GAUSS] {
        for sv in [-GAUSS, GAUSS] {
            let src = f.centre + su * f.a * f.eu + sv * f.b * f.ev;
            v += q / (p - src).norm();
        }
    }
    v
}

fn gauss_gradient(f: &PanelFrame, p: &Point3) -> super::kernel::KernelSample {
    let q = 0.25 * f.area;
    let mut out = super::kernel::KernelSample::default();
    for su in [-GAUSS, GAUSS] {
        for sv in [-GAUSS, GAUSS] {
            let d = p - (f.centre + su * f.a * f.eu + sv * f.b * f.ev);
            let r2 = d.norm_squared();
            let inv = 1.0 / r2.sqrt();
            out.phi += q * inv;
            out.grad -= q * inv * inv * inv * d;
        }
    }
    out
}

impl FieldSource for BasisSet {
    fn electrodes(&self) -> &[ElectrodeInfo] {
        &self.electrodes
    }

    fn superpose(&self, weights: &[Vec<f64>]) -> Arc<dyn Superposition> {
        let k = weights.len();
        let n = self.frames.len();
        let mut w = vec![0.0; n * k];
        for (o, voltages) in weights.iter().enumerate() {
            for (e, &v) in voltages.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (j, s) in self.charges[e].iter().enumerate() {
                    w[j * k + o] += v * s;
                }
            }
        }
        Arc::new(BemSuperposition {
            frames: self.frames.clone(),
            weights: w,
            outputs: k,
        })
    }
}
