//! Equilibria and normal modes of linear ion chains.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minimize::{sorted_eigen, trust_region_newton, Objective, TrustRegionOptions};
use crate::potentials::{DriveConfig, IonSpecies, PotentialError, PotentialField};
use crate::single_ion::{find_rf_null, modes_from_hessian};
use crate::source::{Derivs, FieldError, FieldSource};
use crate::units::{coulomb_ev_um, curvature_to_mhz};
use crate::{Point3, Vector3};

/// Fraction of a mode's norm in axial components above which it is axial.
pub const AXIAL_BRANCH_FRACTION: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("chain needs at least one ion")]
    NoIons,
    #[error("target spacing must be positive")]
    BadSpacing,
    #[error("equilibrium not converged after {iterations} iterations (largest force {force:.3e} eV/um)")]
    NotConverged { iterations: usize, force: f64 },
    #[error("ion {ion} has negative radial curvature at equilibrium")]
    ChainUnstableRadially { ion: usize },
    #[error("ions {0} and {1} coincide")]
    Collision(usize, usize),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub n_ions: usize,
    #[serde(default)]
    pub species: IonSpecies,
    pub drive: DriveConfig,
    /// um
    pub target_spacing: f64,
    /// Axial centre of the chain, um.
    #[serde(default)]
    pub center: f64,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), ChainError> {
        if self.n_ions == 0 {
            return Err(ChainError::NoIons);
        }
        if !(self.target_spacing.is_finite() && self.target_spacing > 0.0) {
            return Err(ChainError::BadSpacing);
        }
        if !self.center.is_finite() {
            return Err(ChainError::BadSpacing);
        }
        Ok(())
    }

    /// Equally spaced axial target positions centred on `center`.
    pub fn target_positions(&self) -> Vec<f64> {
        equal_spacing(self.n_ions, self.target_spacing, self.center)
    }
}

pub fn equal_spacing(n: usize, spacing: f64, center: f64) -> Vec<f64> {
    (0..n)
        .map(|i| center + (i as f64 - 0.5 * (n as f64 - 1.0)) * spacing)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Axial,
    #[serde(rename = "TRANSVERSE_1")]
    Transverse1,
    #[serde(rename = "TRANSVERSE_2")]
    Transverse2,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainSolution {
    /// Sorted by axial coordinate, um.
    pub positions: Vec<[f64; 3]>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest force component on any ion, eV/um.
    pub max_force: f64,
    pub target_spacing: f64,
    /// Gap minus target spacing for the `N - 1` gaps, um.
    pub spacing_deviations: Vec<f64>,
    /// Rotation of each ion's near-vertical trap axis from +y, degrees.
    pub axis_angles_deg: Vec<f64>,
    /// Total energy after each accepted step, eV.
    pub energy_history: Vec<f64>,
}

impl ChainSolution {
    pub fn points(&self) -> Vec<Point3> {
        self.positions.iter().map(|p| Point3::from(*p)).collect()
    }

    pub fn max_spacing_error(&self) -> f64 {
        self.spacing_deviations.iter().fold(0.0, |a, d| a.max(d.abs()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainModes {
    /// Ascending; negative entries are unstable modes.
    pub frequencies_mhz: Vec<f64>,
    pub branches: Vec<Branch>,
    /// Column `k` is mode `k` in mass-weighted coordinates, components
    /// ordered `(x0, y0, z0, x1, ...)`.
    #[serde(skip)]
    pub vectors: DMatrix<f64>,
    pub stable: bool,
}

/// Knobs for [`solve_equilibrium`].
#[derive(Clone, Copy, Debug)]
pub struct EquilibriumOptions {
    pub max_iterations: usize,
    /// Force tolerance relative to `q * 1 V / 1 mm`.
    pub relative_force_tolerance: f64,
}

impl Default for EquilibriumOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            relative_force_tolerance: 1e-6,
        }
    }
}

/// `q * 1 V / 1 mm` in eV/um.
pub fn force_scale(pf: &PotentialField) -> f64 {
    pf.charge_e().abs() * 1e-3
}

/// Energy of an ion chain in a potential, with analytic Coulomb terms.
pub struct ChainEnergy<'a> {
    pub pf: &'a PotentialField,
    coulomb: f64,
}

fn ion(x: &DVector<f64>, i: usize) -> Point3 {
    Point3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])
}

impl<'a> ChainEnergy<'a> {
    pub fn new(pf: &'a PotentialField) -> Self {
        let q = pf.species().charge;
        Self {
            pf,
            coulomb: coulomb_ev_um(q, q),
        }
    }

    /// `k q^2` in eV um.
    pub fn coulomb_constant(&self) -> f64 {
        self.coulomb
    }

    pub fn coulomb_energy(&self, x: &DVector<f64>) -> f64 {
        let n = x.len() / 3;
        let mut e = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                e += self.coulomb / (ion(x, i) - ion(x, j)).norm();
            }
        }
        e
    }

    /// Coulomb force on every ion, eV/um.
    pub fn coulomb_forces(&self, x: &DVector<f64>) -> Vec<Vector3<f64>> {
        let n = x.len() / 3;
        let mut f = vec![Vector3::zeros(); n];
        for i in 0..n {
            for j in i + 1..n {
                let r = ion(x, i) - ion(x, j);
                let d = r.norm();
                let fij = self.coulomb * r / (d * d * d);
                f[i] += fij;
                f[j] -= fij;
            }
        }
        f
    }

    fn coulomb_hessian(&self, x: &DVector<f64>, h: &mut DMatrix<f64>) {
        let n = x.len() / 3;
        for i in 0..n {
            for j in i + 1..n {
                let r = ion(x, i) - ion(x, j);
                let d = r.norm();
                let block = self.coulomb * (3.0 * r * r.transpose() / d.powi(5) - Matrix3::identity() / d.powi(3));
                for a in 0..3 {
                    for b in 0..3 {
                        h[(3 * i + a, 3 * i + b)] += block[(a, b)];
                        h[(3 * j + a, 3 * j + b)] += block[(a, b)];
                        h[(3 * i + a, 3 * j + b)] -= block[(a, b)];
                        h[(3 * j + a, 3 * i + b)] -= block[(a, b)];
                    }
                }
            }
        }
    }

    /// Trap-only Hessian of ion `i`, eV/um^2.
    pub fn trap_hessian(&self, p: &Point3) -> Result<Matrix3<f64>, FieldError> {
        self.pf.total_hessian(p)
    }

    /// Full `3N x 3N` Hessian of the chain energy.
    pub fn hessian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, FieldError> {
        let n = x.len() / 3;
        let mut h = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            let t = self.trap_hessian(&ion(x, i))?;
            for a in 0..3 {
                for b in 0..3 {
                    h[(3 * i + a, 3 * i + b)] = t[(a, b)];
                }
            }
        }
        self.coulomb_hessian(x, &mut h);
        Ok(h)
    }
}

impl Objective for ChainEnergy<'_> {
    type Error = FieldError;

    fn value(&mut self, x: &DVector<f64>) -> Result<Option<f64>, FieldError> {
        let n = x.len() / 3;
        let mut e = self.coulomb_energy(x);
        for i in 0..n {
            match self.pf.total_potential(&ion(x, i)) {
                Ok(v) => e += v,
                Err(FieldError::PointInsideConductor { .. }) => return Ok(None),
                Err(err) => return Err(err),
            }
        }
        Ok(e.is_finite().then_some(e))
    }

    fn derivatives(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>), FieldError> {
        let n = x.len() / 3;
        let mut e = self.coulomb_energy(x);
        let mut g = DVector::zeros(3 * n);
        for (i, f) in self.coulomb_forces(x).iter().enumerate() {
            for a in 0..3 {
                g[3 * i + a] = -f[a];
            }
        }
        for i in 0..n {
            let (v, gi) = self.pf.total_gradient(&ion(x, i))?;
            e += v;
            for a in 0..3 {
                g[3 * i + a] += gi[a];
            }
        }
        Ok((e, g, self.hessian(x)?))
    }
}

/// Radial position of the rf null at `z`, or the axis when the source has
/// no rf field to define one.
fn null_line(pf: &PotentialField, z: f64) -> Point3 {
    find_rf_null(pf, z).unwrap_or_else(|_| Point3::new(0.0, 0.0, z))
}

/// Minimize the chain energy from equal spacing on the rf null line.
pub fn solve_equilibrium(
    pf: &PotentialField,
    n: usize,
    spacing: f64,
    center: f64,
    opts: &EquilibriumOptions,
) -> Result<ChainSolution, ChainError> {
    if n == 0 {
        return Err(ChainError::NoIons);
    }
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(ChainError::BadSpacing);
    }
    let zs = equal_spacing(n, spacing, center);
    let mut x0 = DVector::zeros(3 * n);
    for (i, &z) in zs.iter().enumerate() {
        let p = null_line(pf, z);
        x0[3 * i] = p.x;
        x0[3 * i + 1] = p.y;
        x0[3 * i + 2] = z;
    }
    solve_from(pf, x0, spacing, opts)
}

/// Minimize the chain energy from explicit starting positions.
pub fn solve_from(
    pf: &PotentialField,
    x0: DVector<f64>,
    spacing: f64,
    opts: &EquilibriumOptions,
) -> Result<ChainSolution, ChainError> {
    let n = x0.len() / 3;
    let mut energy = ChainEnergy::new(pf);
    let tr = TrustRegionOptions {
        max_iterations: opts.max_iterations,
        gradient_tolerance: opts.relative_force_tolerance * force_scale(pf),
        initial_radius: 0.25 * spacing,
        max_radius: 2.0 * spacing,
    };
    let m = trust_region_newton(&mut energy, x0, &tr)?;
    if !m.converged {
        return Err(ChainError::NotConverged {
            iterations: m.iterations,
            force: m.gradient.amax(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m.x[3 * a + 2].total_cmp(&m.x[3 * b + 2]));
    let positions: Vec<[f64; 3]> = order.iter().map(|&i| [m.x[3 * i], m.x[3 * i + 1], m.x[3 * i + 2]]).collect();
    for w in 0..n.saturating_sub(1) {
        if positions[w + 1][2] <= positions[w][2] {
            return Err(ChainError::Collision(order[w], order[w + 1]));
        }
    }
    let mut axis_angles_deg = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        // the ion's own block: trap curvature plus Coulomb self terms
        let block = m.hessian.fixed_view::<3, 3>(3 * i, 3 * i).into_owned();
        let radial = nalgebra::Matrix2::new(block[(0, 0)], block[(0, 1)], block[(1, 0)], block[(1, 1)]);
        if radial.symmetric_eigenvalues().min() <= 0.0 {
            return Err(ChainError::ChainUnstableRadially { ion: k });
        }
        let p = Point3::from(positions[k]);
        let trap = energy.trap_hessian(&p)?;
        axis_angles_deg.push(modes_from_hessian(&p, &trap, pf.species().mass).radial_axis_angle_deg);
    }
    let spacing_deviations = positions.windows(2).map(|w| w[1][2] - w[0][2] - spacing).collect();
    Ok(ChainSolution {
        positions,
        converged: true,
        iterations: m.iterations,
        max_force: m.gradient.amax(),
        target_spacing: spacing,
        spacing_deviations,
        axis_angles_deg,
        energy_history: m.history,
    })
}

/// Builds the potential from a config and a named voltage set, then solves.
pub fn solve_chain(
    source: Arc<dyn FieldSource>,
    cfg: &ChainConfig,
    voltages: &BTreeMap<String, f64>,
) -> Result<(PotentialField, ChainSolution), ChainError> {
    cfg.validate()?;
    let drive = cfg.drive.clone().with_voltages(voltages.clone());
    let pf = PotentialField::new(source, cfg.species.clone(), drive)?;
    let sol = solve_equilibrium(&pf, cfg.n_ions, cfg.target_spacing, cfg.center, &EquilibriumOptions::default())?;
    Ok((pf, sol))
}

fn flatten(points: &[Point3]) -> DVector<f64> {
    DVector::from_iterator(3 * points.len(), points.iter().flat_map(|p| [p.x, p.y, p.z]))
}

/// Normal modes about an equilibrium. With equal masses the mass-weighted
/// Hessian is `H / m`.
pub fn normal_modes(pf: &PotentialField, solution: &ChainSolution) -> Result<ChainModes, ChainError> {
    let points = solution.points();
    let x = flatten(&points);
    let energy = ChainEnergy::new(pf);
    let h = energy.hessian(&x)?;
    let mass = pf.species().mass;
    let (vals, vecs) = sorted_eigen(&h);
    let n = points.len();
    // transverse split along the trap's principal radial axes at the centre
    let centre = points[n / 2];
    let local = modes_from_hessian(&centre, &energy.trap_hessian(&centre)?, mass);
    let radial: Vec<usize> = (0..3).filter(|&i| i != local.axial_index).collect();
    let t1 = Vector3::from(local.axes[radial[0]]);
    let t2 = Vector3::from(local.axes[radial[1]]);
    let branches = (0..3 * n)
        .map(|k| {
            let v = vecs.column(k);
            let (mut ax, mut a1, mut a2) = (0.0, 0.0, 0.0);
            for i in 0..n {
                let u = Vector3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]);
                ax += u.z * u.z;
                a1 += u.dot(&t1).powi(2);
                a2 += u.dot(&t2).powi(2);
            }
            if ax >= AXIAL_BRANCH_FRACTION * v.norm_squared() {
                Branch::Axial
            } else if a1 >= a2 {
                Branch::Transverse1
            } else {
                Branch::Transverse2
            }
        })
        .collect();
    Ok(ChainModes {
        frequencies_mhz: vals.iter().map(|&l| curvature_to_mhz(l, mass)).collect(),
        branches,
        stable: vals.iter().all(|&l| l > 0.0),
        vectors: vecs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainMetrics {
    /// um
    pub max_spacing_error: Option<f64>,
    /// Index of the gap with the largest deviation.
    pub worst_gap: Option<usize>,
    pub worst_at_end: Option<bool>,
    pub axis_angles_deg: Vec<f64>,
    pub axis_angle_spread_deg: f64,
    /// Radial distance of each ion from the rf null at its axial position, um.
    pub null_offsets_um: Vec<f64>,
    /// `sqrt(((Hxx - Hyy) / 2)^2 + Hxy^2)` of the static radial Hessian, V/um^2.
    pub radial_quadrupole: Vec<f64>,
    /// `(max - min) / mean` of `radial_quadrupole`.
    pub radial_quadrupole_variation: f64,
}

pub fn chain_metrics(pf: &PotentialField, solution: &ChainSolution) -> Result<ChainMetrics, ChainError> {
    let n = solution.positions.len();
    let (max_spacing_error, worst_gap, worst_at_end) = if n < 2 {
        (None, None, None)
    } else {
        let worst = solution
            .spacing_deviations
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)
            .unwrap();
        (
            Some(solution.max_spacing_error()),
            Some(worst),
            Some(worst == 0 || worst == n - 2),
        )
    };
    let angles = &solution.axis_angles_deg;
    let spread = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut null_offsets_um = Vec::with_capacity(n);
    let mut radial_quadrupole = Vec::with_capacity(n);
    for p in solution.points() {
        null_offsets_um.push((p - null_line(pf, p.z)).xy().norm());
        let (_, dc) = pf.fields(&p, Derivs::Hessian)?;
        let h = dc.hess;
        radial_quadrupole.push((0.25 * (h[(0, 0)] - h[(1, 1)]).powi(2) + h[(0, 1)].powi(2)).sqrt());
    }
    let mean = radial_quadrupole.iter().sum::<f64>() / n as f64;
    let hi = radial_quadrupole.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = radial_quadrupole.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(ChainMetrics {
        max_spacing_error,
        worst_gap,
        worst_at_end,
        axis_angles_deg: angles.clone(),
        axis_angle_spread_deg: spread,
        null_offsets_um,
        radial_quadrupole,
        radial_quadrupole_variation: if mean > 0.0 { (hi - lo) / mean } else { 0.0 },
    })
}
