//! Single-ion analyses: rf null, secular modes and principal axes, trap
//! depth, and stray-field compensation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen, Vector2};
use serde::Serialize;
use thiserror::Error;

use crate::minimize::{sorted_eigen3, trust_region_newton, Objective, TrustRegionOptions};
use crate::potentials::{PotentialError, PotentialField};
use crate::source::{Derivs, FieldError};
use crate::units::curvature_to_mhz;
use crate::voltage_solver::bvls::{bvls, Bounds};
use crate::{Point3, Vector3};

/// Default bound on control voltages, V.
pub const VOLTAGE_BOUND: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SingleIonError {
    #[error("no pseudopotential minimum found: {0}")]
    NoMinimum(String),
    #[error("no bounded trapping minimum: {0}")]
    NoTrap(String),
    #[error("compensation infeasible within +-{bound} V: residual field {residual:.3e} V/m")]
    Infeasible { bound: f64, residual: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Energy {
    Pseudo,
    Total,
}

/// The potential restricted to a plane of fixed `z`, or free in 3D.
struct Restricted<'a> {
    pf: &'a PotentialField,
    energy: Energy,
    z: Option<f64>,
}

impl Restricted<'_> {
    fn point(&self, x: &DVector<f64>) -> Point3 {
        Point3::new(x[0], x[1], self.z.unwrap_or_else(|| x[2]))
    }

    fn dims(&self) -> usize {
        if self.z.is_some() {
            2
        } else {
            3
        }
    }
}

fn inside(e: &FieldError) -> bool {
    matches!(e, FieldError::PointInsideConductor { .. })
}

impl Objective for Restricted<'_> {
    type Error = FieldError;

    fn value(&mut self, x: &DVector<f64>) -> Result<Option<f64>, FieldError> {
        let p = self.point(x);
        let v = match self.energy {
            Energy::Pseudo => self.pf.pseudopotential(&p),
            Energy::Total => self.pf.total_potential(&p),
        };
        match v {
            Ok(v) => Ok(Some(v)),
            Err(e) if inside(&e) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn derivatives(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>), FieldError> {
        let p = self.point(x);
        let (e, g, h) = match self.energy {
            Energy::Pseudo => {
                let (e, g) = self.pf.pseudo_gradient(&p)?;
                (e, g, self.pf.pseudo_hessian(&p)?)
            }
            Energy::Total => {
                let (e, g) = self.pf.total_gradient(&p)?;
                (e, g, self.pf.total_hessian(&p)?)
            }
        };
        let n = self.dims();
        Ok((e, DVector::from_fn(n, |i, _| g[i]), DMatrix::from_fn(n, n, |i, j| h[(i, j)])))
    }
}

/// Starting-point scan for the rf null, in the radial plane.
#[derive(Clone, Copy, Debug)]
pub struct NullSearch {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub step: f64,
}

impl Default for NullSearch {
    fn default() -> Self {
        Self {
            x: (-20.0, 20.0),
            y: (-8.0, 30.0),
            step: 2.0,
        }
    }
}

const NULL_TOLERANCE: f64 = 1e-9;

/// Minimizer of the pseudopotential in the plane at axial position `z`.
pub fn find_rf_null(pf: &PotentialField, z: f64) -> Result<Point3, SingleIonError> {
    find_rf_null_with(pf, z, &NullSearch::default())
}

pub fn find_rf_null_with(pf: &PotentialField, z: f64, search: &NullSearch) -> Result<Point3, SingleIonError> {
    let mut best: Option<(f64, Point3)> = None;
    let nx = ((search.x.1 - search.x.0) / search.step).round() as usize;
    let ny = ((search.y.1 - search.y.0) / search.step).round() as usize;
    for i in 0..=nx {
        for j in 0..=ny {
            let p = Point3::new(
                search.x.0 + i as f64 * search.step,
                search.y.0 + j as f64 * search.step,
                z,
            );
            match pf.pseudopotential(&p) {
                Ok(v) if best.is_none_or(|(b, _)| v < b) => best = Some((v, p)),
                Ok(_) => {}
                Err(e) if inside(&e) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    let (_, start) = best.ok_or_else(|| SingleIonError::NoMinimum("every scan point is inside a conductor".into()))?;
    let mut obj = Restricted {
        pf,
        energy: Energy::Pseudo,
        z: Some(z),
    };
    let opts = TrustRegionOptions {
        gradient_tolerance: NULL_TOLERANCE,
        initial_radius: search.step,
        ..Default::default()
    };
    let m = trust_region_newton(&mut obj, DVector::from_vec(vec![start.x, start.y]), &opts)?;
    if m.gradient.amax() > 1e-6 {
        return Err(SingleIonError::NoMinimum(format!(
            "Newton stalled with gradient {:.3e} eV/um",
            m.gradient.amax()
        )));
    }
    Ok(Point3::new(m.x[0], m.x[1], z))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SecularModes {
    pub point: [f64; 3],
    /// Ascending; negative entries mark unstable directions.
    pub frequencies_mhz: [f64; 3],
    /// Unit eigenvectors matching `frequencies_mhz`.
    pub axes: [[f64; 3]; 3],
    /// Rotation of the near-vertical radial axis from +y toward +x, degrees.
    pub radial_axis_angle_deg: f64,
    pub axial_index: usize,
    pub vertical_index: usize,
    pub stable: bool,
}

impl SecularModes {
    pub fn axial_mhz(&self) -> f64 {
        self.frequencies_mhz[self.axial_index]
    }

    pub fn vertical_mhz(&self) -> f64 {
        self.frequencies_mhz[self.vertical_index]
    }

    pub fn lateral_mhz(&self) -> f64 {
        self.frequencies_mhz[3 - self.axial_index - self.vertical_index]
    }
}

/// Angle of a radial direction from +y toward +x, folded into [-90, 90].
fn axis_angle(v: &Vector3<f64>) -> f64 {
    let (x, y) = if v.y < 0.0 { (-v.x, -v.y) } else { (v.x, v.y) };
    let a = x.atan2(y).to_degrees();
    if a > 90.0 {
        a - 180.0
    } else {
        a
    }
}

/// Principal axes from a Hessian in eV/um^2 for an ion of mass `mass` (kg).
pub fn modes_from_hessian(point: &Point3, h: &crate::Matrix3<f64>, mass: f64) -> SecularModes {
    let (vals, vecs) = sorted_eigen3(h);
    let axes: Vec<Vector3<f64>> = (0..3).map(|i| vecs.column(i).into_owned()).collect();
    let axial_index = (0..3)
        .max_by(|&a, &b| axes[a].z.abs().total_cmp(&axes[b].z.abs()))
        .unwrap();
    let radial: Vec<usize> = (0..3).filter(|&i| i != axial_index).collect();
    let angles: Vec<f64> = radial.iter().map(|&i| axis_angle(&axes[i])).collect();
    let pick = if (angles[0].abs() - angles[1].abs()).abs() < 1e-6 {
        usize::from(angles[1] > angles[0])
    } else {
        usize::from(angles[1].abs() < angles[0].abs())
    };
    SecularModes {
        point: [point.x, point.y, point.z],
        frequencies_mhz: [0, 1, 2].map(|i| curvature_to_mhz(vals[i], mass)),
        axes: [0, 1, 2].map(|i| [axes[i].x, axes[i].y, axes[i].z]),
        radial_axis_angle_deg: angles[pick],
        axial_index,
        vertical_index: radial[pick],
        stable: vals.iter().all(|&v| v > 0.0),
    }
}

/// Mass-weighted normal modes of the total potential at `p`.
pub fn secular_modes(pf: &PotentialField, p: &Point3) -> Result<SecularModes, FieldError> {
    let h = pf.total_hessian(p)?;
    Ok(modes_from_hessian(p, &h, pf.species().mass))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EscapeClass {
    AboveChip,
    BelowChip,
    Axial,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMethod {
    EigenvectorFollowing,
    GridFlood,
    VerticalRay,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthResult {
    /// eV
    pub depth: f64,
    pub escape_point: [f64; 3],
    pub escape_class: EscapeClass,
    pub minimum: [f64; 3],
    /// eV
    pub minimum_energy: f64,
    pub method: DepthMethod,
    /// Lowest barrier found by each method that succeeded, eV.
    pub candidates: Vec<(DepthMethod, f64)>,
}

#[derive(Clone, Copy, Debug)]
pub struct DepthOptions {
    /// Axial position of the radial plane searched.
    pub z: f64,
    /// Half side of the square flood grid around the minimum, um.
    pub half_width: f64,
    pub grid_points: usize,
    /// Length of the vertical ray from the minimum, um.
    pub ray_length: f64,
    pub ray_step: f64,
    pub null: NullSearch,
}

impl Default for DepthOptions {
    fn default() -> Self {
        Self {
            z: 0.0,
            half_width: 150.0,
            grid_points: 201,
            ray_length: 400.0,
            ray_step: 0.5,
            null: NullSearch::default(),
        }
    }
}

/// Trap minimum of the total potential near the rf null at `z`: a radial
/// minimization, then a full 3D one when the axial curvature confines.
pub fn find_minimum(pf: &PotentialField, z: f64, search: &NullSearch) -> Result<Point3, SingleIonError> {
    let null = find_rf_null_with(pf, z, search)?;
    let mut radial = Restricted {
        pf,
        energy: Energy::Total,
        z: Some(z),
    };
    let opts = TrustRegionOptions {
        initial_radius: 1.0,
        ..Default::default()
    };
    let m = trust_region_newton(&mut radial, DVector::from_vec(vec![null.x, null.y]), &opts)?;
    let mut p = Point3::new(m.x[0], m.x[1], z);
    let h = pf.total_hessian(&p)?;
    let radial_h = Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]);
    if radial_h.symmetric_eigenvalues().min() <= 0.0 || m.gradient.amax() > 1e-6 {
        return Err(SingleIonError::NoTrap("radial potential has no minimum".into()));
    }
    // weaker axial curvature than ~1 kHz does not define an axial position
    if h[(2, 2)] > crate::units::mhz_to_curvature(1e-3, pf.species().mass) {
        let mut full = Restricted {
            pf,
            energy: Energy::Total,
            z: None,
        };
        let m = trust_region_newton(&mut full, DVector::from_vec(vec![p.x, p.y, p.z]), &opts)?;
        if m.converged {
            p = Point3::new(m.x[0], m.x[1], m.x[2]);
        }
    }
    Ok(p)
}

#[derive(Clone, Copy)]
struct Cell {
    level: f64,
    index: usize,
}

impl PartialEq for Cell {
    fn eq(&self, o: &Self) -> bool {
        self.cmp(o) == Ordering::Equal
    }
}
impl Eq for Cell {}
impl PartialOrd for Cell {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Cell {
    fn cmp(&self, o: &Self) -> Ordering {
        o.level.total_cmp(&self.level).then(o.index.cmp(&self.index))
    }
}

fn radial_derivatives(pf: &PotentialField, p: &Point3) -> Result<(f64, Vector2<f64>, Matrix2<f64>), FieldError> {
    let (e, g) = pf.total_gradient(p)?;
    let h = pf.total_hessian(p)?;
    Ok((e, Vector2::new(g.x, g.y), Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)])))
}

fn negative_count(h: &Matrix2<f64>) -> usize {
    let scale = h.norm().max(1e-300);
    h.symmetric_eigenvalues().iter().filter(|&&v| v < -1e-9 * scale).count()
}

/// Newton iteration on the gradient from `start` to a nearby index-1
/// stationary point of the radial potential.
fn polish_saddle(pf: &PotentialField, start: &Point3, reach: f64) -> Option<(Point3, f64)> {
    let mut p = *start;
    for _ in 0..40 {
        let (e, g, h) = radial_derivatives(pf, &p).ok()?;
        if g.norm() < 1e-8 {
            return ((p - start).norm() < reach && negative_count(&h) == 1).then_some((p, e));
        }
        let mut d = -h.try_inverse()? * g;
        if d.norm() > 1.0 {
            d *= 1.0 / d.norm();
        }
        p.x += d.x;
        p.y += d.y;
    }
    None
}

/// Partitioned rational-function ascent along one mode from the minimum.
fn follow_mode(pf: &PotentialField, min: &Point3, dir: Vector2<f64>) -> Option<(Point3, f64)> {
    const MAX_STEP: f64 = 3.0;
    let mut p = min + Vector3::new(0.5 * dir.x, 0.5 * dir.y, 0.0);
    let mut prev = dir;
    for _ in 0..150 {
        let (e, g, h) = radial_derivatives(pf, &p).ok()?;
        let eig = SymmetricEigen::new(h);
        let k = if eig.eigenvectors.column(0).dot(&prev).abs() >= eig.eigenvectors.column(1).dot(&prev).abs() {
            0
        } else {
            1
        };
        let (lk, lj) = (eig.eigenvalues[k], eig.eigenvalues[1 - k]);
        let mut vk: Vector2<f64> = eig.eigenvectors.column(k).into_owned();
        if vk.dot(&prev) < 0.0 {
            vk = -vk;
        }
        let vj: Vector2<f64> = eig.eigenvectors.column(1 - k).into_owned();
        if g.norm() < 1e-8 && lk < 0.0 {
            return Some((p, e));
        }
        if lk < 0.0 && g.norm() < 1e-4 {
            return polish_saddle(pf, &p, 5.0);
        }
        let (gk, gj) = (g.dot(&vk), g.dot(&vj));
        let up = 0.5 * lk + (0.25 * lk * lk + gk * gk).sqrt();
        let down = 0.5 * lj - (0.25 * lj * lj + gj * gj).sqrt();
        let hk = if up - lk > 0.0 { gk / (up - lk) } else { MAX_STEP };
        let hj = if lj - down > 0.0 { -gj / (lj - down) } else { 0.0 };
        let mut step = hk * vk + hj * vj;
        if step.norm() > MAX_STEP {
            step *= MAX_STEP / step.norm();
        }
        if step.norm() < 1e-12 {
            return None;
        }
        p.x += step.x;
        p.y += step.y;
        prev = vk;
    }
    None
}

/// Lowest minimax path from the minimum to the edge of a square grid in the
/// radial plane; cells at conductors are walls.
fn grid_flood(pf: &PotentialField, min: &Point3, opts: &DepthOptions) -> Result<Option<(Point3, f64)>, FieldError> {
    use rayon::prelude::*;
    let n = opts.grid_points.max(3);
    let h = 2.0 * opts.half_width / (n - 1) as f64;
    let at = |i: usize, j: usize| {
        Point3::new(
            min.x - opts.half_width + i as f64 * h,
            min.y - opts.half_width + j as f64 * h,
            min.z,
        )
    };
    let values = (0..n * n)
        .into_par_iter()
        .map(|k| match pf.total_potential(&at(k % n, k / n)) {
            Ok(v) => Ok(v),
            Err(e) if inside(&e) => Ok(f64::NAN),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<f64>, FieldError>>()?;
    let c = n / 2;
    let start = c * n + c;
    if values[start].is_nan() {
        return Ok(None);
    }
    let mut level = vec![f64::INFINITY; n * n];
    let mut parent = vec![usize::MAX; n * n];
    let mut heap = BinaryHeap::new();
    level[start] = values[start];
    heap.push(Cell {
        level: values[start],
        index: start,
    });
    while let Some(Cell { level: l, index }) = heap.pop() {
        if l > level[index] {
            continue;
        }
        let (i, j) = (index % n, index / n);
        if i == 0 || j == 0 || i == n - 1 || j == n - 1 {
            let mut best = index;
            let mut k = index;
            while k != usize::MAX {
                if values[k] > values[best] {
                    best = k;
                }
                k = parent[k];
            }
            let cell = at(best % n, best / n);
            return Ok(Some(polish_saddle(pf, &cell, 2.0 * h).unwrap_or((cell, values[best]))));
        }
        for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let nb = ((j as i64 + dj) as usize) * n + (i as i64 + di) as usize;
            if values[nb].is_nan() {
                continue;
            }
            let l2 = l.max(values[nb]);
            if l2 < level[nb] {
                level[nb] = l2;
                parent[nb] = index;
                heap.push(Cell { level: l2, index: nb });
            }
        }
    }
    Ok(None)
}

fn vertical_ray(pf: &PotentialField, min: &Point3, opts: &DepthOptions) -> Result<Option<(Point3, f64)>, FieldError> {
    let steps = (opts.ray_length / opts.ray_step).round() as usize;
    let mut best: Option<(Point3, f64)> = None;
    for s in 0..=steps {
        let p = min + Vector3::new(0.0, s as f64 * opts.ray_step, 0.0);
        match pf.total_potential(&p) {
            Ok(v) if best.is_none_or(|(_, b)| v > b) => best = Some((p, v)),
            Ok(_) => {}
            Err(e) if inside(&e) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    // a ray that only climbs never crosses a barrier
    Ok(best
        .filter(|(p, _)| (p.y - min.y) < opts.ray_length - opts.ray_step)
        .map(|(p, e)| polish_saddle(pf, &p, 2.0 * opts.ray_step).unwrap_or((p, e))))
}

fn classify(min: &Point3, escape: &Point3) -> EscapeClass {
    let d = escape - min;
    if d.z.abs() > d.x.abs().max(d.y.abs()) {
        EscapeClass::Axial
    } else if d.y.abs() >= d.x.abs() {
        if d.y > 0.0 {
            EscapeClass::AboveChip
        } else {
            EscapeClass::BelowChip
        }
    } else {
        EscapeClass::Other
    }
}

/// Radial trap depth: the lowest barrier between the trap minimum and the
/// edge of the search region.
pub fn trap_depth(pf: &PotentialField) -> Result<DepthResult, SingleIonError> {
    trap_depth_with(pf, &DepthOptions::default())
}

pub fn trap_depth_with(pf: &PotentialField, opts: &DepthOptions) -> Result<DepthResult, SingleIonError> {
    let min = find_minimum(pf, opts.z, &opts.null)?;
    let e0 = pf.total_potential(&min)?;
    let h = pf.total_hessian(&min)?;
    let eig = SymmetricEigen::new(Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)]));

    let mut found: Vec<(DepthMethod, Point3, f64)> = Vec::new();
    let mut saddles = Vec::new();
    for col in 0..2 {
        for sign in [1.0, -1.0] {
            let dir: Vector2<f64> = sign * eig.eigenvectors.column(col).into_owned();
            if let Some(s) = follow_mode(pf, &min, dir) {
                saddles.push(s);
            }
        }
    }
    if let Some(&(p, e)) = saddles.iter().filter(|(_, e)| *e > e0).min_by(|a, b| a.1.total_cmp(&b.1)) {
        found.push((DepthMethod::EigenvectorFollowing, p, e));
    }
    if let Some((p, e)) = grid_flood(pf, &min, opts)? {
        found.push((DepthMethod::GridFlood, p, e));
    }
    if let Some((p, e)) = vertical_ray(pf, &min, opts)? {
        found.push((DepthMethod::VerticalRay, p, e));
    }
    // ties within rounding go to the earlier, more exact method
    let lowest = found.iter().map(|f| f.2).fold(f64::INFINITY, f64::min);
    let &(method, point, energy) = found
        .iter()
        .find(|f| f.2 <= lowest + 1e-12 * (1.0 + lowest.abs()))
        .ok_or_else(|| SingleIonError::NoTrap("no escape barrier found".into()))?;
    Ok(DepthResult {
        depth: (energy - e0).max(0.0),
        escape_point: [point.x, point.y, point.z],
        escape_class: classify(&min, &point),
        minimum: [min.x, min.y, min.z],
        minimum_energy: e0,
        method,
        candidates: found.iter().map(|(m, _, e)| (*m, e - e0)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Compensation {
    pub point: [f64; 3],
    /// Adjustment by electrode name, V.
    pub voltages: BTreeMap<String, f64>,
    /// Stray plus adjustment field at `point`, V/m.
    pub residual_field: [f64; 3],
    pub max_abs_voltage: f64,
}

/// Minimum-norm dc adjustment on the control electrodes that cancels a
/// uniform `stray` field (V/m) at the rf null at `z`.
pub fn solve_compensation(
    pf: &PotentialField,
    z: f64,
    stray: &Vector3<f64>,
    bound: f64,
) -> Result<Compensation, SingleIonError> {
    let null = find_rf_null(pf, z)?;
    let source = pf.source();
    let controls: Vec<usize> = source
        .electrodes()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.role.is_dc_control())
        .map(|(i, _)| i)
        .collect();
    let n = source.electrodes().len();
    let weights: Vec<Vec<f64>> = controls
        .iter()
        .map(|&c| (0..n).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let samples = source.superpose(&weights).sample(&null, Derivs::Gradient)?;
    // field per volt, V/m
    let a = DMatrix::from_fn(3, controls.len(), |r, c| -samples[c].grad[r] * 1e6);
    let b = DVector::from_fn(3, |r, _| -stray[r]);
    let svd = a.clone().svd(true, true);
    let tol = 1e-12 * svd.singular_values.max();
    let mut v = svd.solve(&b, tol).map_err(|e| SingleIonError::NoTrap(e.to_string()))?;
    if v.amax() > bound {
        v = bvls(&a, &b, &Bounds::symmetric(controls.len(), bound), 1e-12).x;
    }
    let residual = &a * &v - &b;
    if residual.norm() > 1e-2 {
        return Err(SingleIonError::Infeasible {
            bound,
            residual: residual.norm(),
        });
    }
    Ok(Compensation {
        point: [null.x, null.y, null.z],
        voltages: controls
            .iter()
            .zip(v.iter())
            .map(|(&c, &x)| (source.electrodes()[c].name.clone(), x))
            .collect(),
        residual_field: [residual[0], residual[1], residual[2]],
        max_abs_voltage: v.amax(),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::geometry::{ElectrodeRole, Side};
    use crate::potentials::{DriveConfig, IonSpecies};
    use crate::source::{AnalyticSource, FieldSample, FieldSource};
    use crate::units::{ELEMENTARY_CHARGE, UM};
    use crate::Matrix3;

    fn dc_field(h: Matrix3<f64>) -> PotentialField {
        let src = AnalyticSource::new().with_quadratic(
            "dc_left_00",
            ElectrodeRole::DcSegment { side: Side::Left, index: 0 },
            0.0,
            Vector3::zeros(),
            h,
        );
        let drive = DriveConfig::nominal().with_voltages([("dc_left_00".to_string(), 1.0)].into());
        PotentialField::new(Arc::new(src), IonSpecies::yb171(), drive).unwrap()
    }

    fn rotation_z(deg: f64) -> Matrix3<f64> {
        let (s, c) = deg.to_radians().sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn quadratic_oracle_frequencies() {
        let h = Matrix3::from_diagonal(&Vector3::new(0.02, 0.03, 0.001));
        let r = rotation_z(17.0);
        let pf = dc_field(r * h * r.transpose());
        let m = secular_modes(&pf, &Point3::zeros()).unwrap();
        let mass = IonSpecies::yb171().mass;
        for (f, k) in m.frequencies_mhz.iter().zip([0.001, 0.02, 0.03]) {
            let expect = (k * ELEMENTARY_CHARGE / (UM * UM) / mass).sqrt() / (2.0 * std::f64::consts::PI) / 1e6;
            assert!((f - expect).abs() / expect < 1e-10, "{f} vs {expect}");
        }
        assert!(m.stable);
        assert_eq!(m.axial_index, 0);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| m.axes[i][k] * m.axes[j][k]).sum();
                assert!((d - f64::from(i == j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn angle_convention() {
        let h = Matrix3::from_diagonal(&Vector3::new(0.02, 0.03, 0.001));
        for deg in [45.0, 11.0, -30.0, 0.0] {
            let r = rotation_z(-deg);
            let m = secular_modes(&dc_field(r * h * r.transpose()), &Point3::zeros()).unwrap();
            assert!((m.radial_axis_angle_deg - deg).abs() < 0.1, "{deg}: {}", m.radial_axis_angle_deg);
        }
        // an axis rotated from +y toward +x has a positive x component
        let r = rotation_z(-11.0);
        let m = secular_modes(&dc_field(r * h * r.transpose()), &Point3::zeros()).unwrap();
        let v = m.axes[m.vertical_index];
        assert!(v[0] * v[1] > 0.0);
        assert!((m.vertical_mhz() - m.frequencies_mhz[2]).abs() < 1e-12);
    }

    #[test]
    fn unstable_is_flagged() {
        let m = secular_modes(&dc_field(Matrix3::from_diagonal(&Vector3::new(0.02, -0.03, 0.01))), &Point3::zeros())
            .unwrap();
        assert!(!m.stable);
        assert!(m.frequencies_mhz[0] < 0.0);
    }

    #[test]
    fn rod_null_and_secular_frequency() {
        let pf = PotentialField::new(
            Arc::new(AnalyticSource::four_rod(100.0)),
            IonSpecies::yb171(),
            DriveConfig::new(50.0, 40.0),
        )
        .unwrap();
        let null = find_rf_null(&pf, 3.0).unwrap();
        assert!(null.xy().norm() < 1e-9);
        let m = secular_modes(&pf, &null).unwrap();
        let q = 0.0893;
        let expect = q * 40.0 / (2.0 * 2f64.sqrt());
        assert!((m.lateral_mhz() - expect).abs() / expect < 1e-2);
        assert!((m.vertical_mhz() - m.lateral_mhz()).abs() < 1e-9);
        assert_eq!(m.axial_mhz(), 0.0);
    }

    /// Potential `a (x^2 + y^2) - b y^3 + c z^2` in eV with a saddle on +y.
    fn cubic_well(a: f64, b: f64) -> PotentialField {
        let f: crate::source::BasisFn = Arc::new(move |p: &Point3| FieldSample {
            phi: 1.2 * a * p.x * p.x + a * p.y * p.y - b * p.y.powi(3) + 0.001 * p.z * p.z,
            grad: Vector3::new(2.4 * a * p.x, 2.0 * a * p.y - 3.0 * b * p.y * p.y, 0.002 * p.z),
            hess: Matrix3::from_diagonal(&Vector3::new(2.4 * a, 2.0 * a - 6.0 * b * p.y, 0.002)),
        });
        let src = AnalyticSource::new().with("dc_left_00", ElectrodeRole::DcSegment { side: Side::Left, index: 0 }, f);
        let drive = DriveConfig::nominal().with_voltages([("dc_left_00".to_string(), 1.0)].into());
        PotentialField::new(Arc::new(src), IonSpecies::yb171(), drive).unwrap()
    }

    #[test]
    fn depth_of_cubic_well() {
        let (a, b) = (0.01, 0.01 * 2.0 / 150.0);
        let pf = cubic_well(a, b);
        let r = trap_depth(&pf).unwrap();
        let ys = 2.0 * a / (3.0 * b);
        let expect = a * ys * ys / 3.0;
        assert!((r.depth - expect).abs() < 1e-6, "{r:?}");
        assert_eq!(r.escape_class, EscapeClass::AboveChip);
        assert!((r.escape_point[1] - ys).abs() < 1e-3);
        let e = pf.total_potential(&Point3::from(r.escape_point)).unwrap();
        assert!((e - r.minimum_energy - r.depth).abs() < 1e-3);
        assert!(r.candidates.iter().any(|(m, _)| *m == DepthMethod::EigenvectorFollowing));
        let h = pf.total_hessian(&Point3::from(r.escape_point)).unwrap();
        assert_eq!(negative_count(&Matrix2::new(h[(0, 0)], h[(0, 1)], h[(1, 0)], h[(1, 1)])), 1);
    }

    fn plane_source() -> Arc<dyn FieldSource> {
        let mut src = AnalyticSource::four_rod(100.0);
        for (name, role, g) in [
            ("diag_left", ElectrodeRole::DcDiagonal { side: Side::Left }, Vector3::new(0.004, -0.002, 0.0)),
            ("diag_right", ElectrodeRole::DcDiagonal { side: Side::Right }, Vector3::new(-0.004, -0.002, 0.0)),
            ("dc_left_00", ElectrodeRole::DcSegment { side: Side::Left, index: 0 }, Vector3::new(0.003, 0.002, 0.001)),
            ("dc_right_00", ElectrodeRole::DcSegment { side: Side::Right, index: 0 }, Vector3::new(-0.003, 0.002, 0.001)),
            ("dc_left_01", ElectrodeRole::DcSegment { side: Side::Left, index: 1 }, Vector3::new(0.003, 0.002, -0.001)),
        ] {
            src = src.with_quadratic(name, role, 0.1, g, Matrix3::zeros());
        }
        Arc::new(src)
    }

    #[test]
    fn compensation_cases() {
        let pf = PotentialField::new(plane_source(), IonSpecies::yb171(), DriveConfig::new(50.0, 40.0)).unwrap();
        let zero = solve_compensation(&pf, 0.0, &Vector3::zeros(), VOLTAGE_BOUND).unwrap();
        assert!(zero.voltages.values().all(|v| v.abs() < 1e-12));

        // stray equal to minus the field of +1 V on one diagonal
        let stray = -Vector3::new(-0.004, 0.002, 0.0) * 1e6;
        let c = solve_compensation(&pf, 0.0, &stray, VOLTAGE_BOUND).unwrap();
        assert!(Vector3::from(c.residual_field).norm() < 1e-6);
        let mut v = vec![0.0; pf.source().electrodes().len()];
        v[pf.source().electrode_index("diag_left").unwrap()] = 1.0;
        let e = crate::source::field_at(pf.source().as_ref(), &v, &Point3::from(c.point)).unwrap();
        assert!((e + stray).norm() < 1e-9);

        let huge = Vector3::new(1e7, 0.0, 0.0);
        assert!(matches!(
            solve_compensation(&pf, 0.0, &huge, VOLTAGE_BOUND),
            Err(SingleIonError::Infeasible { .. })
        ));
    }

    #[test]
    fn random_stray_fields_are_nulled_independently() {
        use rand::{Rng, SeedableRng};
        let pf = PotentialField::new(plane_source(), IonSpecies::yb171(), DriveConfig::new(50.0, 40.0)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let stray = 10.0 * dir.normalize();
            let c = solve_compensation(&pf, 0.0, &stray, VOLTAGE_BOUND).unwrap();
            assert!(c.max_abs_voltage <= VOLTAGE_BOUND);
            // re-evaluate the field of the adjustment from the source itself
            let mut v = vec![0.0; pf.source().electrodes().len()];
            for (name, x) in &c.voltages {
                v[pf.source().electrode_index(name).unwrap()] = *x;
            }
            let e = crate::source::field_at(pf.source().as_ref(), &v, &Point3::from(c.point)).unwrap();
            assert!((e + stray).norm() < 1e-2);
        }
    }
}
