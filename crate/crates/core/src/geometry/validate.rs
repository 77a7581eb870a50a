use serde::Serialize;

use crate::Point3;

use super::{ElectrodeRole, Geometry, Rect};

const TOUCH_TOL: f64 = 1e-9;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ValidationFailure {
    Overlap { a: String, b: String },
    ClearanceBelowGap { a: String, b: String, clearance: f64, gap: f64 },
    Asymmetric { electrode: String, residual: f64 },
    DielectricVisible { placeholder: usize, point: [f64; 3] },
    RfRailCount { found: usize },
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    /// Smallest distance between surfaces of two different electrodes (um).
    pub min_clearance: f64,
    pub closest_pair: Option<(String, String)>,
    /// Largest corner mismatch under `x -> -x` with left/right exchanged (um).
    pub symmetry_residual: f64,
    pub line_of_sight_blocked: bool,
    pub failures: Vec<ValidationFailure>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn segment_segment(p1: &Point3, q1: &Point3, p2: &Point3, q2: &Point3) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let c = d1.dot(&r);
    let b = d1.dot(&d2);
    let denom = a * e - b * b;
    let mut s = if denom > 1e-14 * a * e {
        ((b * f - c * e) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mut t = (b * s + f) / e;
    if t < 0.0 {
        t = 0.0;
        s = (-c / a).clamp(0.0, 1.0);
    } else if t > 1.0 {
        t = 1.0;
        s = ((b - c) / a).clamp(0.0, 1.0);
    }
    ((p1 + d1 * s) - (p2 + d2 * t)).norm()
}

fn edges(r: &Rect) -> [(Point3, Point3); 4] {
    let c = r.corners();
    [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]
}

fn segment_rect(a: &Point3, b: &Point3, r: &Rect) -> f64 {
    if r.segment_intersection(a, b).is_some() {
        return 0.0;
    }
    let mut d = r.distance_to_point(a).min(r.distance_to_point(b));
    for (p, q) in edges(r) {
        d = d.min(segment_segment(a, b, &p, &q));
    }
    d
}

/// Distance between two planar rectangles.
pub(crate) fn rect_distance(a: &Rect, b: &Rect) -> f64 {
    let mut d = f64::INFINITY;
    for (p, q) in edges(a) {
        d = d.min(segment_rect(&p, &q, b));
    }
    for (p, q) in edges(b) {
        d = d.min(segment_rect(&p, &q, a));
    }
    d
}

fn mirror_role(role: &ElectrodeRole) -> ElectrodeRole {
    match *role {
        ElectrodeRole::RfRail { side } => ElectrodeRole::RfRail { side: side.mirrored() },
        ElectrodeRole::DcSegment { side, index } => ElectrodeRole::DcSegment {
            side: side.mirrored(),
            index,
        },
        ElectrodeRole::DcDiagonal { side } => ElectrodeRole::DcDiagonal { side: side.mirrored() },
        other => other,
    }
}

fn corner_mismatch(a: &Rect, b: &Rect) -> f64 {
    a.corners()
        .iter()
        .map(|p| {
            b.corners()
                .iter()
                .map(|q| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

fn symmetry_residual(g: &Geometry) -> Vec<(String, f64)> {
    g.electrodes
        .iter()
        .map(|e| {
            let target = mirror_role(&e.role);
            let partner = g
                .electrodes
                .iter()
                .find(|o| o.role == target && (target != ElectrodeRole::Other || o.name == e.name));
            let residual = match partner {
                None => f64::INFINITY,
                Some(p) => e
                    .surfaces
                    .iter()
                    .map(|r| {
                        let m = r.mirrored(0);
                        p.surfaces
                            .iter()
                            .map(|s| corner_mismatch(&m, s))
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(0.0, f64::max),
            };
            (e.name.clone(), residual)
        })
        .collect()
}

/// Sample points strictly inside a placeholder region.
fn interior_samples(r: &Rect) -> impl Iterator<Item = Point3> + '_ {
    const N: usize = 5;
    (0..N).flat_map(move |i| {
        (0..N).map(move |j| {
            let s = (i as f64 + 0.5) / N as f64;
            let t = (j as f64 + 0.5) / N as f64;
            r.origin + s * r.u + t * r.v
        })
    })
}

/// Check clearances, mirror symmetry and whether any exposed dielectric is
/// visible from the slot centre.
pub fn validate(g: &Geometry) -> ValidationReport {
    let mut failures = Vec::new();

    let rf = g.electrodes.iter().filter(|e| e.role.is_rf()).count();
    if g.params.is_some() && rf != 2 {
        failures.push(ValidationFailure::RfRailCount { found: rf });
    }

    let mut min_clearance = f64::INFINITY;
    let mut closest_pair = None;
    for (i, a) in g.electrodes.iter().enumerate() {
        for b in &g.electrodes[i + 1..] {
            let d = a
                .surfaces
                .iter()
                .flat_map(|ra| b.surfaces.iter().map(move |rb| rect_distance(ra, rb)))
                .fold(f64::INFINITY, f64::min);
            if d <= TOUCH_TOL {
                failures.push(ValidationFailure::Overlap {
                    a: a.name.clone(),
                    b: b.name.clone(),
                });
            } else if let Some(p) = &g.params {
                if d < p.electrode_gap - TOUCH_TOL {
                    failures.push(ValidationFailure::ClearanceBelowGap {
                        a: a.name.clone(),
                        b: b.name.clone(),
                        clearance: d,
                        gap: p.electrode_gap,
                    });
                }
            }
            if d < min_clearance {
                min_clearance = d;
                closest_pair = Some((a.name.clone(), b.name.clone()));
            }
        }
    }

    let mut worst_symmetry: f64 = 0.0;
    for (name, residual) in symmetry_residual(g) {
        worst_symmetry = worst_symmetry.max(residual);
        if g.params.is_some() && residual > SYMMETRY_TOL {
            failures.push(ValidationFailure::Asymmetric {
                electrode: name,
                residual,
            });
        }
    }

    let centre = Point3::zeros();
    let mut blocked = true;
    'placeholders: for (k, d) in g.dielectric.iter().enumerate() {
        for p in interior_samples(d) {
            let hidden = g
                .electrodes
                .iter()
                .flat_map(|e| e.surfaces.iter())
                .any(|s| s.segment_intersection(&centre, &p).is_some());
            if !hidden {
                blocked = false;
                failures.push(ValidationFailure::DielectricVisible {
                    placeholder: k,
                    point: [p.x, p.y, p.z],
                });
                continue 'placeholders;
            }
        }
    }

    ValidationReport {
        min_clearance,
        closest_pair,
        symmetry_residual: worst_symmetry,
        line_of_sight_blocked: blocked,
        failures,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_symmetric_trap, Electrode, TrapParams};
    use crate::Vector3;

    #[test]
    fn default_trap_passes_with_gap_clearance() {
        let g = build_symmetric_trap(&TrapParams::default()).unwrap();
        let r = validate(&g);
        assert!((r.min_clearance - 5.0).abs() < 1e-9, "{}", r.min_clearance);
        assert_eq!(r.symmetry_residual, 0.0);
        assert!(r.line_of_sight_blocked);
        assert!(r.passed(), "{:?}", r.failures);
    }

    #[test]
    fn wide_slot_and_thin_oxide_also_pass() {
        for p in [
            TrapParams {
                slot_width: 200.0,
                ..Default::default()
            },
            TrapParams {
                oxide_thickness: 10.0,
                ..Default::default()
            },
        ] {
            let r = validate(&build_symmetric_trap(&p).unwrap());
            assert!(r.passed(), "{:?}", r.failures);
        }
    }

    #[test]
    fn overlapping_segments_are_reported_as_a_pair() {
        let mut g = build_symmetric_trap(&TrapParams::default()).unwrap();
        let i = g.electrode_index("dc_right_03").unwrap();
        let j = g.electrode_index("dc_right_04").unwrap();
        // widen segment 3 across the gap into segment 4
        for s in &mut g.electrodes[i].surfaces {
            s.v += Vector3::new(0.0, 0.0, 10.0);
        }
        let r = validate(&g);
        let names = (g.electrodes[i].name.clone(), g.electrodes[j].name.clone());
        assert!(r.failures.contains(&ValidationFailure::Overlap {
            a: names.0,
            b: names.1
        }));
        assert_eq!(r.min_clearance, 0.0);
    }

    #[test]
    fn visible_dielectric_is_flagged() {
        let mut g = build_symmetric_trap(&TrapParams::default()).unwrap();
        g.dielectric.push(Rect::new(
            Point3::new(-10.0, 50.0, -10.0),
            Vector3::new(20.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 20.0),
        ));
        let r = validate(&g);
        assert!(!r.line_of_sight_blocked);
    }

    #[test]
    fn rect_distance_cases() {
        let sq = |x: f64, y: f64, z: f64| {
            Rect::new(
                Point3::new(x, y, z),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            )
        };
        assert!((rect_distance(&sq(0.0, 0.0, 0.0), &sq(3.0, 0.0, 0.0)) - 2.0).abs() < 1e-12);
        assert!((rect_distance(&sq(0.0, 0.0, 0.0), &sq(0.0, 2.0, 0.0)) - 2.0).abs() < 1e-12);
        assert_eq!(rect_distance(&sq(0.0, 0.0, 0.0), &sq(0.5, 0.0, 0.5)), 0.0);
        let vertical = Rect::new(
            Point3::new(0.5, -1.0, 0.2),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 0.5),
        );
        assert_eq!(rect_distance(&sq(0.0, 0.0, 0.0), &vertical), 0.0);
    }

    #[test]
    fn pair_of_plates_is_symmetric_under_mirror() {
        let plate = |x: f64| Electrode {
            name: format!("p{x}"),
            role: ElectrodeRole::Other,
            surfaces: vec![Rect::new(
                Point3::new(x, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, 1.0),
            )],
        };
        let g = Geometry::from_electrodes(vec![plate(-1.0), plate(1.0)]);
        let r = validate(&g);
        assert!((r.min_clearance - 2.0).abs() < 1e-12);
    }
}
