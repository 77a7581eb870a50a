use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::{Point3, Vector3};

use super::{ElectrodeRole, Geometry, Rect};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("resolution must be a positive length, got {0}")]
    BadResolution(f64),
    #[error("surface {surface} of electrode `{electrode}` has zero area")]
    Degenerate { electrode: String, surface: usize },
    #[error("mesh has {count} panels, more than the cap of {cap}")]
    MeshTooLarge { count: usize, cap: usize },
}

/// Controls the panel size field. Panels are at most `resolution` on a side
/// within `grading_radius` of the refinement core (the slot axis for
/// `|z| <= refine_half_length`), and grow linearly with distance beyond it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshOptions {
    pub resolution: f64,
    pub grading_radius: f64,
    pub refine_half_length: f64,
    pub max_panels: usize,
    pub max_aspect: f64,
    /// Mesh one quadrant and mirror it when the geometry is symmetric under
    /// `x -> -x` and `z -> -z`.
    pub use_symmetry: bool,
}

impl Default for MeshOptions {
    fn default() -> Self {
        Self {
            resolution: 10.0,
            grading_radius: 60.0,
            refine_half_length: 150.0,
            max_panels: 40_000,
            max_aspect: 8.0,
            use_symmetry: true,
        }
    }
}

impl MeshOptions {
    pub fn with_resolution(resolution: f64) -> Self {
        Self {
            resolution,
            ..Default::default()
        }
    }

    fn core_distance(&self, p: &Point3) -> f64 {
        let dz = (p.z.abs() - self.refine_half_length).max(0.0);
        (p.x * p.x + p.y * p.y + dz * dz).sqrt()
    }

    fn target_edge(&self, r: &Rect) -> f64 {
        let half_diag = 0.5 * (r.u + r.v).norm();
        let d = (self.core_distance(&r.centroid()) - half_diag).max(0.0);
        self.resolution * (d / self.grading_radius).max(1.0)
    }
}

/// Flat constant-charge panel. The kernel treats it as the rectangle
/// centred at `centroid` spanned by `half_u * axis_u` and `half_v * axis_v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub vertices: [Point3; 4],
    pub centroid: Point3,
    pub area: f64,
    pub normal: Vector3<f64>,
    pub owner: usize,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
}

impl Panel {
    pub fn from_rect(r: &Rect, owner: usize) -> Self {
        let lu = r.u.norm();
        let lv = r.v.norm();
        let axis_u = r.u / lu;
        let axis_v = r.v / lv;
        Self {
            vertices: r.corners(),
            centroid: r.centroid(),
            area: lu * lv,
            normal: axis_u.cross(&axis_v),
            owner,
            axis_u,
            axis_v,
            half_u: 0.5 * lu,
            half_v: 0.5 * lv,
        }
    }

    /// Equal-area rectangle standing in for a (possibly non-planar) quad.
    pub fn from_quad(q: [Point3; 4], owner: usize) -> Self {
        let centroid = (q[0] + q[1] + q[2] + q[3]) / 4.0;
        let cross = (q[2] - q[0]).cross(&(q[3] - q[1]));
        let area = 0.5 * cross.norm();
        let normal = cross.normalize();
        let eu = 0.5 * ((q[1] - q[0]) + (q[2] - q[3]));
        let ev = 0.5 * ((q[3] - q[0]) + (q[2] - q[1]));
        let axis_u = (eu - normal * normal.dot(&eu)).normalize();
        let axis_v = normal.cross(&axis_u);
        let (lu, lv) = (eu.norm(), ev.norm());
        let s = (area / (lu * lv)).sqrt();
        Self {
            vertices: q,
            centroid,
            area,
            normal,
            owner,
            axis_u,
            axis_v,
            half_u: 0.5 * lu * s,
            half_v: 0.5 * lv * s,
        }
    }

    /// Diagonal of the kernel rectangle.
    pub fn diameter(&self) -> f64 {
        2.0 * (self.half_u * self.half_u + self.half_v * self.half_v).sqrt()
    }

    pub fn max_edge(&self) -> f64 {
        2.0 * self.half_u.max(self.half_v)
    }

    pub fn aspect_ratio(&self) -> f64 {
        self.half_u.max(self.half_v) / self.half_u.min(self.half_v)
    }

    fn mirrored(&self, axis: usize, owner: usize) -> Panel {
        let m = |mut p: Vector3<f64>| {
            p[axis] = -p[axis];
            p
        };
        Panel {
            vertices: [
                m(self.vertices[0]),
                m(self.vertices[1]),
                m(self.vertices[2]),
                m(self.vertices[3]),
            ],
            centroid: m(self.centroid),
            area: self.area,
            normal: m(self.normal),
            owner,
            axis_u: m(self.axis_u),
            axis_v: m(self.axis_v),
            half_u: self.half_u,
            half_v: self.half_v,
        }
    }
}

/// Panel ordering for a mesh invariant under the mirror group
/// `{e, Mx, Mz, MxMz}`: panel `g * fundamental + f` is the image of
/// fundamental panel `f` under group element `g` (bit 0 = x mirror,
/// bit 1 = z mirror).
#[derive(Clone, Debug, PartialEq)]
pub struct PanelSymmetry {
    pub fundamental: usize,
}

impl PanelSymmetry {
    pub const ORDER: usize = 4;

    pub fn image(&self, f: usize, g: usize) -> usize {
        g * self.fundamental + f
    }

    /// Character of group element `g` in irreducible representation `c`.
    pub fn character(c: usize, g: usize) -> f64 {
        if (c & g).count_ones() % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshElectrode {
    pub name: String,
    pub role: ElectrodeRole,
}

#[derive(Clone, Debug)]
pub struct PanelMesh {
    pub panels: Vec<Panel>,
    pub electrodes: Vec<MeshElectrode>,
    pub resolution: f64,
    pub symmetry: Option<PanelSymmetry>,
}

impl PanelMesh {
    /// Mesh from prebuilt panels (no symmetry is assumed).
    pub fn from_panels(panels: Vec<Panel>, electrodes: Vec<MeshElectrode>, resolution: f64) -> Self {
        Self {
            panels,
            electrodes,
            resolution,
            symmetry: None,
        }
    }

    pub fn len(&self) -> usize {
        self.panels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.panels.is_empty()
    }

    pub fn electrode_index(&self, name: &str) -> Option<usize> {
        self.electrodes.iter().position(|e| e.name == name)
    }

    pub fn panel_count(&self, electrode: usize) -> usize {
        self.panels.iter().filter(|p| p.owner == electrode).count()
    }

    pub fn electrode_area(&self, electrode: usize) -> f64 {
        self.panels
            .iter()
            .filter(|p| p.owner == electrode)
            .map(|p| p.area)
            .sum()
    }

    pub fn total_area(&self) -> f64 {
        self.panels.iter().map(|p| p.area).sum()
    }

    /// SHA-256 over panel geometry and ownership.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.panels.len() as u64).to_le_bytes());
        for p in &self.panels {
            for v in &p.vertices {
                for c in v.iter() {
                    h.update(c.to_le_bytes());
                }
            }
            h.update((p.owner as u64).to_le_bytes());
        }
        h.finalize().into()
    }

    /// One panel per row: vertices, centroid, normal, area, electrode id.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "panel,v0x,v0y,v0z,v1x,v1y,v1z,v2x,v2y,v2z,v3x,v3y,v3z,cx,cy,cz,nx,ny,nz,area,electrode\n",
        );
        for (i, p) in self.panels.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in p.vertices.iter().chain([&p.centroid, &p.normal]) {
                let _ = write!(s, ",{},{},{}", v.x, v.y, v.z);
            }
            let _ = writeln!(s, ",{},{}", p.area, self.electrodes[p.owner].name);
        }
        s
    }
}

fn subdivide(rect: &Rect, opts: &MeshOptions, owner: usize, out: &mut Vec<Panel>) {
    let mut stack = vec![*rect];
    while let Some(r) = stack.pop() {
        let (lu, lv) = (r.u.norm(), r.v.norm());
        let longest = lu.max(lv);
        let too_big = longest > opts.target_edge(&r) * (1.0 + 1e-12);
        let too_thin = longest / lu.min(lv) > opts.max_aspect;
        if too_big || too_thin {
            let (a, b) = if lu >= lv {
                let half = 0.5 * r.u;
                (Rect::new(r.origin, half, r.v), Rect::new(r.origin + half, half, r.v))
            } else {
                let half = 0.5 * r.v;
                (Rect::new(r.origin, r.u, half), Rect::new(r.origin + half, r.u, half))
            };
            // pop order keeps the panel sequence in increasing parameter order
            stack.push(b);
            stack.push(a);
        } else {
            out.push(Panel::from_rect(&r, owner));
        }
    }
}

const MATCH_TOL: f64 = 1e-9;

/// For each surface (electrode, index) in the quadrant `x >= 0, z >= 0`,
/// the owners of its three mirror images. `None` if the geometry is not
/// mirror symmetric about both planes.
fn quadrant_images(geometry: &Geometry) -> Option<Vec<(usize, usize, [usize; 3])>> {
    let all: Vec<(usize, &Rect)> = geometry
        .electrodes
        .iter()
        .enumerate()
        .flat_map(|(e, el)| el.surfaces.iter().map(move |r| (e, r)))
        .collect();
    let find = |target: &Rect| {
        all.iter()
            .find(|(_, r)| r.same_shape(target, MATCH_TOL))
            .map(|(e, _)| *e)
    };
    let mut out = Vec::new();
    let mut quadrant_surfaces = 0;
    for (e, el) in geometry.electrodes.iter().enumerate() {
        for (s, r) in el.surfaces.iter().enumerate() {
            let c = r.corners();
            let in_pos_x = c.iter().all(|p| p.x >= -MATCH_TOL);
            let in_neg_x = c.iter().all(|p| p.x <= MATCH_TOL);
            let in_pos_z = c.iter().all(|p| p.z >= -MATCH_TOL);
            let in_neg_z = c.iter().all(|p| p.z <= MATCH_TOL);
            if !(in_pos_x || in_neg_x) || !(in_pos_z || in_neg_z) {
                return None;
            }
            let centroid = r.centroid();
            if centroid.x.abs() < MATCH_TOL || centroid.z.abs() < MATCH_TOL {
                return None;
            }
            if centroid.x > 0.0 && centroid.z > 0.0 {
                let mx = find(&r.mirrored(0))?;
                let mz = find(&r.mirrored(2))?;
                let mxz = find(&r.mirrored(0).mirrored(2))?;
                out.push((e, s, [mx, mz, mxz]));
                quadrant_surfaces += 1;
            }
        }
    }
    (4 * quadrant_surfaces == all.len()).then_some(out)
}

/// Discretize every conductor surface into flat panels.
pub fn mesh(geometry: &Geometry, opts: &MeshOptions) -> Result<PanelMesh, MeshError> {
    if !(opts.resolution.is_finite() && opts.resolution > 0.0) {
        return Err(MeshError::BadResolution(opts.resolution));
    }
    for el in &geometry.electrodes {
        for (s, r) in el.surfaces.iter().enumerate() {
            let lu = r.u.norm();
            let lv = r.v.norm();
            if !(lu > 0.0 && lv > 0.0 && r.area() > 1e-12 * lu * lv && lu.is_finite() && lv.is_finite())
            {
                return Err(MeshError::Degenerate {
                    electrode: el.name.clone(),
                    surface: s,
                });
            }
        }
    }
    let electrodes: Vec<MeshElectrode> = geometry
        .electrodes
        .iter()
        .map(|e| MeshElectrode {
            name: e.name.clone(),
            role: e.role,
        })
        .collect();

    let quadrant = if opts.use_symmetry {
        quadrant_images(geometry)
    } else {
        None
    };

    let (panels, symmetry) = match quadrant {
        Some(images) => {
            let mut fundamental = Vec::new();
            let mut owners = Vec::new();
            for (e, s, img) in &images {
                let start = fundamental.len();
                subdivide(&geometry.electrodes[*e].surfaces[*s], opts, *e, &mut fundamental);
                owners.extend(std::iter::repeat_n(*img, fundamental.len() - start));
            }
            let m = fundamental.len();
            check_cap(4 * m, opts)?;
            let mut panels = fundamental.clone();
            for g in 1..4 {
                for (p, img) in fundamental.iter().zip(&owners) {
                    let owner = img[g - 1];
                    let q = match g {
                        1 => p.mirrored(0, owner),
                        2 => p.mirrored(2, owner),
                        _ => p.mirrored(0, owner).mirrored(2, owner),
                    };
                    panels.push(q);
                }
            }
            (panels, Some(PanelSymmetry { fundamental: m }))
        }
        None => {
            let mut panels = Vec::new();
            for (e, el) in geometry.electrodes.iter().enumerate() {
                for r in &el.surfaces {
                    subdivide(r, opts, e, &mut panels);
                    check_cap(panels.len(), opts)?;
                }
            }
            (panels, None)
        }
    };
    check_cap(panels.len(), opts)?;
    Ok(PanelMesh {
        panels,
        electrodes,
        resolution: opts.resolution,
        symmetry,
    })
}

fn check_cap(count: usize, opts: &MeshOptions) -> Result<(), MeshError> {
    if count > opts.max_panels {
        Err(MeshError::MeshTooLarge {
            count,
            cap: opts.max_panels,
        })
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_symmetric_trap, Electrode, TrapParams};

    fn plate(origin: Point3, side: f64) -> Geometry {
        Geometry::from_electrodes(vec![Electrode {
            name: "plate".into(),
            role: ElectrodeRole::Other,
            surfaces: vec![Rect::new(
                origin,
                Vector3::new(side, 0.0, 0.0),
                Vector3::new(0.0, 0.0, side),
            )],
        }])
    }

    #[test]
    fn unit_square_at_half_resolution() {
        let g = plate(Point3::new(0.0, 0.0, 0.0), 1.0);
        let m = mesh(&g, &MeshOptions::with_resolution(0.5)).unwrap();
        assert_eq!(m.len(), 4);
        for p in &m.panels {
            assert!((p.area - 0.25).abs() < 1e-15);
            assert!((p.normal.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_polygon_is_rejected() {
        let g = Geometry::from_electrodes(vec![Electrode {
            name: "flat".into(),
            role: ElectrodeRole::Other,
            surfaces: vec![Rect::new(
                Point3::zeros(),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::zeros(),
            )],
        }]);
        assert!(matches!(
            mesh(&g, &MeshOptions::default()),
            Err(MeshError::Degenerate { .. })
        ));
    }

    #[test]
    fn bad_resolution() {
        let g = plate(Point3::zeros(), 1.0);
        assert!(mesh(&g, &MeshOptions::with_resolution(0.0)).is_err());
    }

    #[test]
    fn panel_cap_is_enforced() {
        let g = plate(Point3::zeros(), 10.0);
        let opts = MeshOptions {
            resolution: 0.1,
            max_panels: 100,
            ..Default::default()
        };
        assert!(matches!(mesh(&g, &opts), Err(MeshError::MeshTooLarge { .. })));
    }

    #[test]
    fn default_trap_mesh_invariants() {
        let g = build_symmetric_trap(&TrapParams::default()).unwrap();
        let m = mesh(&g, &MeshOptions::default()).unwrap();
        let count = m.len();
        assert!((5_000..=40_000).contains(&count), "panel count {count}");
        assert!(m.symmetry.is_some());
        for p in &m.panels {
            assert!(p.area > 0.0);
            assert!((p.normal.norm() - 1.0).abs() < 1e-12);
            assert!(p.aspect_ratio() <= 8.0 + 1e-9, "aspect {}", p.aspect_ratio());
        }
        for (e, el) in g.electrodes.iter().enumerate() {
            let rel = (m.electrode_area(e) - el.area()).abs() / el.area();
            assert!(rel < 1e-6, "{}: area mismatch {rel}", el.name);
        }
    }

    #[test]
    fn symmetric_images_are_exact_mirrors() {
        let g = build_symmetric_trap(&TrapParams::default()).unwrap();
        let m = mesh(&g, &MeshOptions::with_resolution(20.0)).unwrap();
        let sym = m.symmetry.as_ref().unwrap();
        for f in 0..sym.fundamental {
            let c = m.panels[f].centroid;
            let cx = m.panels[sym.image(f, 1)].centroid;
            let cz = m.panels[sym.image(f, 2)].centroid;
            assert_eq!(cx, Point3::new(-c.x, c.y, c.z));
            assert_eq!(cz, Point3::new(c.x, c.y, -c.z));
            let owner = &m.electrodes[m.panels[f].owner].role;
            let mirror_owner = &m.electrodes[m.panels[sym.image(f, 1)].owner].role;
            if let (
                ElectrodeRole::DcSegment { side: a, index: i },
                ElectrodeRole::DcSegment { side: b, index: j },
            ) = (owner, mirror_owner)
            {
                assert_eq!(a.mirrored(), *b);
                assert_eq!(i, j);
            }
        }
    }

    #[test]
    fn refinement_at_least_doubles_each_electrode() {
        let g = build_symmetric_trap(&TrapParams::default()).unwrap();
        let coarse = mesh(&g, &MeshOptions::with_resolution(20.0)).unwrap();
        let fine = mesh(&g, &MeshOptions::with_resolution(10.0)).unwrap();
        for e in 0..g.electrodes.len() {
            assert!(
                fine.panel_count(e) >= 2 * coarse.panel_count(e),
                "{}: {} -> {}",
                g.electrodes[e].name,
                coarse.panel_count(e),
                fine.panel_count(e)
            );
        }
        let rel = (fine.total_area() - coarse.total_area()).abs() / coarse.total_area();
        assert!(rel < 1e-6);
    }

    #[test]
    fn mesh_is_deterministic() {
        let g = build_symmetric_trap(&TrapParams::default()).unwrap();
        let a = mesh(&g, &MeshOptions::with_resolution(20.0)).unwrap();
        let b = mesh(&g, &MeshOptions::with_resolution(20.0)).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn asymmetric_geometry_falls_back_to_plain_mesh() {
        let g = plate(Point3::new(0.3, 0.0, 0.1), 1.0);
        let m = mesh(&g, &MeshOptions::with_resolution(0.5)).unwrap();
        assert!(m.symmetry.is_none());
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn csv_has_one_row_per_panel() {
        let g = plate(Point3::zeros(), 1.0);
        let m = mesh(&g, &MeshOptions::with_resolution(0.5)).unwrap();
        let csv = m.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().ends_with(",0.25,plate"));
    }
}
