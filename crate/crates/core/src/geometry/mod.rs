//! Parametric trap solid model, its panel discretization and validation.
//!
//! Coordinates: `x` lateral across the slot, `y` vertical (up, away from the
//! substrate), `z` along the slot axis. The slot centre is the origin.
//! Electrodes are represented by their exposed surfaces only, as open shells
//! of planar rectangles.

mod build;
mod mesh;
mod params;
mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{Point3, Vector3};

pub use build::build_symmetric_trap;
pub use mesh::{mesh, MeshElectrode, MeshError, MeshOptions, Panel, PanelMesh, PanelSymmetry};
pub use params::TrapParams;
pub use validate::{validate, ValidationFailure, ValidationReport};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: &'static str, reason: String },
    #[error("parameter conflict: {0}")]
    ParamConflict(String),
    #[error("could not parse trap parameters: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn mirrored(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ElectrodeRole {
    RfRail { side: Side },
    DcSegment { side: Side, index: usize },
    DcDiagonal { side: Side },
    TopGround,
    BottomGround,
    Substrate,
    /// Conductors of test fixtures and other non-trap geometries.
    Other,
}

impl ElectrodeRole {
    pub fn is_rf(&self) -> bool {
        matches!(self, ElectrodeRole::RfRail { .. })
    }

    /// Electrodes that take a static control voltage.
    pub fn is_dc_control(&self) -> bool {
        matches!(
            self,
            ElectrodeRole::DcSegment { .. } | ElectrodeRole::DcDiagonal { .. }
        )
    }

    /// Grounds and the substrate: always held at 0 V.
    pub fn is_grounded(&self) -> bool {
        matches!(
            self,
            ElectrodeRole::TopGround | ElectrodeRole::BottomGround | ElectrodeRole::Substrate
        )
    }

    /// Canonical lead name for trap electrodes.
    pub fn canonical_name(&self) -> String {
        match self {
            ElectrodeRole::RfRail { side } => format!("rf_{}", side.name()),
            ElectrodeRole::DcSegment { side, index } => format!("dc_{}_{:02}", side.name(), index),
            ElectrodeRole::DcDiagonal { side } => format!("diag_{}", side.name()),
            ElectrodeRole::TopGround => "ground_top".into(),
            ElectrodeRole::BottomGround => "ground_bottom".into(),
            ElectrodeRole::Substrate => "substrate".into(),
            ElectrodeRole::Other => "other".into(),
        }
    }
}

/// Planar rectangle with corners `origin`, `origin + u`, `origin + u + v`,
/// `origin + v`. `u` and `v` are orthogonal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub origin: Point3,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Rect {
    pub fn new(origin: Point3, u: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self { origin, u, v }
    }

    pub fn corners(&self) -> [Point3; 4] {
        [
            self.origin,
            self.origin + self.u,
            self.origin + self.u + self.v,
            self.origin + self.v,
        ]
    }

    pub fn centroid(&self) -> Point3 {
        self.origin + 0.5 * (self.u + self.v)
    }

    pub fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }

    pub fn normal(&self) -> Vector3<f64> {
        self.u.cross(&self.v).normalize()
    }

    /// Mirror image under `x -> -x` (axis 0) or `z -> -z` (axis 2).
    pub fn mirrored(&self, axis: usize) -> Rect {
        let m = |mut p: Vector3<f64>| {
            p[axis] = -p[axis];
            p
        };
        Rect::new(m(self.origin), m(self.u), m(self.v))
    }

    /// Closest point of the rectangle to `p`.
    pub fn closest_point(&self, p: &Point3) -> Point3 {
        let d = p - self.origin;
        let su = (d.dot(&self.u) / self.u.norm_squared()).clamp(0.0, 1.0);
        let sv = (d.dot(&self.v) / self.v.norm_squared()).clamp(0.0, 1.0);
        self.origin + su * self.u + sv * self.v
    }

    pub fn distance_to_point(&self, p: &Point3) -> f64 {
        (p - self.closest_point(p)).norm()
    }

    /// Parameter `t` in (0, 1) where the segment `a -> b` crosses the
    /// rectangle interior, if it does.
    pub fn segment_intersection(&self, a: &Point3, b: &Point3) -> Option<f64> {
        let n = self.u.cross(&self.v);
        let dir = b - a;
        let denom = n.dot(&dir);
        if denom.abs() < 1e-300 {
            return None;
        }
        let t = n.dot(&(self.origin - a)) / denom;
        if !(t > 0.0 && t < 1.0) {
            return None;
        }
        let hit = a + t * dir - self.origin;
        let su = hit.dot(&self.u) / self.u.norm_squared();
        let sv = hit.dot(&self.v) / self.v.norm_squared();
        (0.0..=1.0).contains(&su).then_some(())?;
        (0.0..=1.0).contains(&sv).then_some(t)
    }

    /// Same corner set as `other` within `tol`, in any order.
    pub fn same_shape(&self, other: &Rect, tol: f64) -> bool {
        let a = self.corners();
        let b = other.corners();
        a.iter()
            .all(|p| b.iter().any(|q| (p - q).norm() <= tol))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Electrode {
    pub name: String,
    pub role: ElectrodeRole,
    pub surfaces: Vec<Rect>,
}

impl Electrode {
    pub fn area(&self) -> f64 {
        self.surfaces.iter().map(Rect::area).sum()
    }
}

/// A set of conducting electrodes plus exposed-dielectric placeholders used
/// only for the line-of-sight check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<TrapParams>,
    pub electrodes: Vec<Electrode>,
    #[serde(default)]
    pub dielectric: Vec<Rect>,
}

impl Geometry {
    /// Geometry made of arbitrary conductors (test fixtures, oracles).
    pub fn from_electrodes(electrodes: Vec<Electrode>) -> Self {
        Self {
            params: None,
            electrodes,
            dielectric: Vec::new(),
        }
    }

    pub fn electrode_index(&self, name: &str) -> Option<usize> {
        self.electrodes.iter().position(|e| e.name == name)
    }

    pub fn total_area(&self) -> f64 {
        self.electrodes.iter().map(Electrode::area).sum()
    }

    /// Number of independently driven leads (rf rails and dc control electrodes).
    pub fn lead_count(&self) -> usize {
        self.electrodes
            .iter()
            .filter(|e| e.role.is_rf() || e.role.is_dc_control())
            .count()
    }
}
