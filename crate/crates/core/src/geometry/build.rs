use crate::{Point3, Vector3};

use super::{Electrode, ElectrodeRole, Geometry, GeometryError, Rect, Side, TrapParams};

/// Extrusion along z of the cross-section segment `a -> b` (x, y in um),
/// split at z = 0 so that every surface lies on one side of the axial mirror plane.
fn extrude(a: (f64, f64), b: (f64, f64), z0: f64, z1: f64) -> Vec<Rect> {
    let piece = |za: f64, zb: f64| {
        Rect::new(
            Point3::new(a.0, a.1, za),
            Vector3::new(b.0 - a.0, b.1 - a.1, 0.0),
            Vector3::new(0.0, 0.0, zb - za),
        )
    };
    if z0 < 0.0 && z1 > 0.0 {
        vec![piece(z0, 0.0), piece(0.0, z1)]
    } else {
        vec![piece(z0, z1)]
    }
}

struct Layout {
    slot_half: f64,
    face_half: f64,
    rf_outer: f64,
    dc_inner: f64,
    dc_outer: f64,
    ground_inner: f64,
    ground_y: f64,
    slot_half_length: f64,
    segmented_half: f64,
}

impl Layout {
    fn new(p: &TrapParams) -> Self {
        let slot_half = 0.5 * p.slot_width;
        let dc_inner = slot_half + p.dc_setback;
        let dc_outer = dc_inner + p.dc_exposed_width;
        let face_half = 0.5 * p.oxide_thickness;
        Self {
            slot_half,
            face_half,
            rf_outer: slot_half + p.rf_rail_width,
            dc_inner,
            dc_outer,
            ground_inner: dc_outer + p.electrode_gap,
            ground_y: face_half + p.metal_thickness + p.ground_dielectric_thickness,
            slot_half_length: 0.5 * p.slot_length,
            segmented_half: p.segmented_half_length(),
        }
    }
}

/// Surfaces of the `x > 0` half, each tagged with its role.
fn right_half(p: &TrapParams, l: &Layout) -> (Vec<(ElectrodeRole, Vec<Rect>)>, Vec<Rect>) {
    let lz = l.slot_half_length;
    let side = Side::Right;
    let mut out = Vec::new();

    let mut rf = extrude((l.slot_half, -l.face_half), (l.slot_half, l.face_half), -lz, lz);
    rf.extend(extrude((l.slot_half, l.face_half), (l.rf_outer, l.face_half), -lz, lz));
    rf.extend(extrude((l.slot_half, -l.face_half), (l.rf_outer, -l.face_half), -lz, lz));
    out.push((ElectrodeRole::RfRail { side }, rf));

    for index in 0..p.n_segments_per_side {
        let (z0, z1) = p.segment_span(index);
        let s = extrude((l.dc_inner, l.face_half), (l.dc_outer, l.face_half), z0, z1);
        out.push((ElectrodeRole::DcSegment { side, index }, s));
    }

    let diag = extrude((l.dc_inner, -l.face_half), (l.dc_outer, -l.face_half), -lz, lz);
    out.push((ElectrodeRole::DcDiagonal { side }, diag));

    let mut top = extrude((l.ground_inner, l.ground_y), (p.chip_extent, l.ground_y), -lz, lz);
    let strip_start = l.segmented_half + 0.5 * p.electrode_gap;
    if strip_start < lz {
        for (z0, z1) in [(strip_start, lz), (-lz, -strip_start)] {
            top.extend(extrude((l.dc_inner, l.ground_y), (l.ground_inner, l.ground_y), z0, z1));
        }
    }
    out.push((ElectrodeRole::TopGround, top));

    let bottom = extrude((l.ground_inner, -l.ground_y), (p.chip_extent, -l.ground_y), -lz, lz);
    out.push((ElectrodeRole::BottomGround, bottom));

    if p.include_substrate {
        let angle = p.bevel_angle.to_radians();
        let top_y = -(l.ground_y + p.electrode_gap);
        let run = p.substrate_thickness / angle.tan();
        let wall = extrude(
            (l.ground_inner, top_y),
            (l.ground_inner + run, top_y - p.substrate_thickness),
            -lz,
            lz,
        );
        out.push((ElectrodeRole::Substrate, wall));
    }

    let mut dielectric = Vec::new();
    let m = p.metal_thickness;
    for y in [l.face_half, -l.face_half] {
        dielectric.extend(extrude((l.rf_outer, y), (l.dc_inner, y), -lz, lz));
    }
    for ym in [l.face_half + m, -l.face_half - m] {
        dielectric.extend(extrude((l.dc_outer, ym), (l.ground_inner, ym), -lz, lz));
    }
    for index in 0..=p.n_segments_per_side {
        let z0 = -l.segmented_half + index as f64 * p.segment_pitch() - 0.5 * p.electrode_gap;
        let z1 = z0 + p.electrode_gap;
        let (z0, z1) = (z0.max(-lz), z1.min(lz));
        if z1 > z0 {
            dielectric.extend(extrude((l.dc_inner, l.face_half), (l.dc_outer, l.face_half), z0, z1));
        }
    }
    (out, dielectric)
}

fn mirror_role(role: ElectrodeRole) -> ElectrodeRole {
    match role {
        ElectrodeRole::RfRail { side } => ElectrodeRole::RfRail { side: side.mirrored() },
        ElectrodeRole::DcSegment { side, index } => ElectrodeRole::DcSegment {
            side: side.mirrored(),
            index,
        },
        ElectrodeRole::DcDiagonal { side } => ElectrodeRole::DcDiagonal { side: side.mirrored() },
        other => other,
    }
}

/// Build the symmetric trap: two rf rails whose metallized vertical faces
/// bound the slot, a segmented dc layer level with the top of the rf faces,
/// one long unsegmented electrode per side level with the bottom of the rf
/// faces, ground overlays above and below, and an optional beveled grounded
/// substrate.
pub fn build_symmetric_trap(params: &TrapParams) -> Result<Geometry, GeometryError> {
    params.validate()?;
    let layout = Layout::new(params);
    let (right, right_dielectric) = right_half(params, &layout);

    let mut by_role: Vec<(ElectrodeRole, Vec<Rect>)> = Vec::new();
    for (role, surfaces) in &right {
        let mirrored_role = mirror_role(*role);
        let mirrored: Vec<Rect> = surfaces.iter().map(|r| r.mirrored(0)).collect();
        if mirrored_role == *role {
            let mut all = mirrored;
            all.extend(surfaces.iter().copied());
            by_role.push((*role, all));
        } else {
            by_role.push((mirrored_role, mirrored));
            by_role.push((*role, surfaces.clone()));
        }
    }

    let order = |r: &ElectrodeRole| -> (u8, u8, usize) {
        let side_key = |s: &Side| *s as u8;
        match r {
            ElectrodeRole::RfRail { side } => (0, side_key(side), 0),
            ElectrodeRole::DcSegment { side, index } => (1, side_key(side), *index),
            ElectrodeRole::DcDiagonal { side } => (2, side_key(side), 0),
            ElectrodeRole::TopGround => (3, 0, 0),
            ElectrodeRole::BottomGround => (4, 0, 0),
            ElectrodeRole::Substrate => (5, 0, 0),
            ElectrodeRole::Other => (6, 0, 0),
        }
    };
    by_role.sort_by_key(|(r, _)| order(r));

    let electrodes = by_role
        .into_iter()
        .map(|(role, surfaces)| Electrode {
            name: role.canonical_name(),
            role,
            surfaces,
        })
        .collect();

    let mut dielectric: Vec<Rect> = right_dielectric.iter().map(|r| r.mirrored(0)).collect();
    dielectric.extend(right_dielectric);

    Ok(Geometry {
        params: Some(params.clone()),
        electrodes,
        dielectric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(g: &Geometry, f: impl Fn(&ElectrodeRole) -> bool) -> usize {
        g.electrodes.iter().filter(|e| f(&e.role)).count()
    }

    #[test]
    fn default_topology() {
        let g = build_symmetric_trap(&TrapParams::default()).unwrap();
        assert_eq!(count(&g, ElectrodeRole::is_rf), 2);
        assert_eq!(count(&g, |r| matches!(r, ElectrodeRole::DcSegment { .. })), 20);
        assert_eq!(count(&g, |r| matches!(r, ElectrodeRole::DcDiagonal { .. })), 2);
        assert_eq!(count(&g, |r| *r == ElectrodeRole::Substrate), 1);
        assert!(g.lead_count() <= 50);
        assert_eq!(g.lead_count(), 24);
    }

    #[test]
    fn rf_faces_bound_the_slot() {
        for width in [125.0, 200.0] {
            let p = TrapParams {
                slot_width: width,
                ..Default::default()
            };
            let g = build_symmetric_trap(&p).unwrap();
            let face_x = |name: &str| {
                let e = &g.electrodes[g.electrode_index(name).unwrap()];
                // the vertical face is the surface whose u vector is along y
                let face = e.surfaces.iter().find(|r| r.u.x == 0.0 && r.u.z == 0.0).unwrap();
                assert!((face.u.norm() - p.oxide_thickness).abs() < 1e-12);
                face.origin.x
            };
            assert!((face_x("rf_right") - face_x("rf_left") - width).abs() < 1e-12);
        }
    }

    #[test]
    fn single_segment_per_side() {
        let p = TrapParams {
            n_segments_per_side: 1,
            ..Default::default()
        };
        let g = build_symmetric_trap(&p).unwrap();
        assert_eq!(count(&g, |r| matches!(r, ElectrodeRole::DcSegment { .. })), 2);
        // the single segment straddles z = 0 and is split there
        let seg = &g.electrodes[g.electrode_index("dc_left_00").unwrap()];
        assert_eq!(seg.surfaces.len(), 2);
    }

    #[test]
    fn no_substrate_when_disabled() {
        let p = TrapParams {
            include_substrate: false,
            ..Default::default()
        };
        let g = build_symmetric_trap(&p).unwrap();
        assert!(g.electrode_index("substrate").is_none());
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_symmetric_trap(&TrapParams::default()).unwrap();
        let b = build_symmetric_trap(&TrapParams::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
