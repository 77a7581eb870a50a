//! Reference conductors with known capacitances.

use crate::geometry::{Electrode, ElectrodeRole, Geometry, MeshElectrode, Panel, PanelMesh, Rect};
use crate::{Point3, Vector3};

/// Sphere of radius `r` from a cube with `n x n` equiangular quads per face.
pub fn sphere_mesh(r: f64, n: usize) -> PanelMesh {
    let map = |t: f64| (std::f64::consts::FRAC_PI_4 * t).tan();
    let mut panels = Vec::with_capacity(6 * n * n);
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let point = |i: usize, j: usize| {
                let s = map(-1.0 + 2.0 * i as f64 / n as f64);
                let t = map(-1.0 + 2.0 * j as f64 / n as f64);
                let mut v = Vector3::zeros();
                v[axis] = sign;
                v[(axis + 1) % 3] = s;
                v[(axis + 2) % 3] = t;
                r * v.normalize()
            };
            for i in 0..n {
                for j in 0..n {
                    let mut q = [point(i, j), point(i + 1, j), point(i + 1, j + 1), point(i, j + 1)];
                    let c = (q[0] + q[1] + q[2] + q[3]) / 4.0;
                    if (q[2] - q[0]).cross(&(q[3] - q[1])).dot(&c) < 0.0 {
                        q.swap(1, 3);
                    }
                    panels.push(Panel::from_quad(q, 0));
                }
            }
        }
    }
    PanelMesh::from_panels(
        panels,
        vec![MeshElectrode {
            name: "sphere".into(),
            role: ElectrodeRole::Other,
        }],
        r * std::f64::consts::FRAC_PI_2 / n as f64,
    )
}

/// Two square plates of side `side` in the planes `y = +-gap/2`, each split
/// into quadrants so the mesh can use the mirror symmetry.
pub fn parallel_plates(side: f64, gap: f64) -> Geometry {
    let plate = |name: &str, y: f64| Electrode {
        name: name.into(),
        role: ElectrodeRole::Other,
        surfaces: [(-1.0, -1.0), (-1.0, 0.0), (0.0, -1.0), (0.0, 0.0)]
            .iter()
            .map(|&(x0, z0)| {
                Rect::new(
                    Point3::new(0.5 * side * x0, y, 0.5 * side * z0),
                    Vector3::new(0.5 * side, 0.0, 0.0),
                    Vector3::new(0.0, 0.0, 0.5 * side),
                )
            })
            .collect(),
    };
    Geometry::from_electrodes(vec![plate("top", 0.5 * gap), plate("bottom", -0.5 * gap)])
}
