use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trapforge::electrostatics::fixtures::{parallel_plates, sphere_mesh};
use trapforge::electrostatics::{load_or_solve, BasisSet};
use trapforge::geometry::{build_symmetric_trap, mesh, MeshOptions, TrapParams};
use trapforge::source::{field_at, hessian_at, potential_at, Derivs, FieldError, FieldSource};
use trapforge::units::EPSILON_0;
use trapforge::{Point3, Vector3};

fn trap_basis() -> &'static BasisSet {
    static B: OnceLock<BasisSet> = OnceLock::new();
    B.get_or_init(|| {
        let g = build_symmetric_trap(&TrapParams::default()).unwrap();
        let m = mesh(&g, &MeshOptions::default()).unwrap();
        BasisSet::solve(Arc::new(m)).unwrap()
    })
}

fn unit(source: &dyn FieldSource, name: &str) -> Vec<f64> {
    let i = source.electrode_index(name).unwrap();
    (0..source.electrodes().len()).map(|k| if k == i { 1.0 } else { 0.0 }).collect()
}

fn sphere() -> &'static BasisSet {
    static B: OnceLock<BasisSet> = OnceLock::new();
    B.get_or_init(|| BasisSet::solve(Arc::new(sphere_mesh(1.0, 14))).unwrap())
}

#[test]
fn sphere_capacitance_and_potential() {
    let m = sphere_mesh(1.0, 14);
    let area_error = (m.total_area() - 4.0 * PI).abs() / (4.0 * PI);
    assert!(area_error < 0.02, "area error {area_error}");
    let b = sphere();
    // R = 1 um
    let c = b.total_charge(0);
    let expect = 4.0 * PI * EPSILON_0 * 1e-6;
    assert!((c - expect).abs() / expect < 0.02, "C = {c:e}, expected {expect:e}");
    for p in [Point3::new(2.0, 0.0, 0.0), Point3::new(0.0, -1.2, 1.6), Point3::new(1.0, 1.0, 2f64.sqrt())] {
        let phi = potential_at(b, &[1.0], &p).unwrap();
        assert!((phi - 0.5).abs() < 0.01, "phi(2R) = {phi}");
    }
}

#[test]
fn surface_evaluation_is_refused() {
    let b = sphere();
    let p = b.mesh().panels[0].centroid;
    let sup = b.superpose(&[vec![1.0]]);
    assert!(matches!(
        sup.sample(&p, Derivs::Value),
        Err(FieldError::PointInsideConductor { .. })
    ));
}

#[test]
fn parallel_plate_capacitance_and_field() {
    let (side, gap) = (40.0, 1.0);
    let g = parallel_plates(side, gap);
    let m = mesh(&g, &MeshOptions::with_resolution(0.625)).unwrap();
    let b = BasisSet::solve(Arc::new(m)).unwrap();
    // mutual capacitance: charge drawn onto the grounded plate
    let q = -b.induced_charge(0, 1);
    let expect = EPSILON_0 * (side * side * 1e-12) / (gap * 1e-6);
    assert!((q - expect).abs() / expect < 0.1, "C = {q:e}, expected {expect:e}");

    // wider gap so the midpoint is clear of the refusal zone
    let g = parallel_plates(side, 4.0);
    let m = mesh(&g, &MeshOptions::with_resolution(1.0)).unwrap();
    let b = BasisSet::solve(Arc::new(m)).unwrap();
    let e = field_at(&b, &[1.0, 0.0], &Point3::zeros()).unwrap();
    let expect = 1.0 / 4e-6;
    assert!((e.norm() - expect).abs() / expect < 0.1, "|E| = {}", e.norm());
    assert!(e.y < 0.0);
}

#[test]
fn far_potential_decays() {
    let b = trap_basis();
    let p = TrapParams::default();
    let far = Point3::new(0.0, 10.0 * p.chip_extent, 0.0);
    // grounded electrodes have no basis of their own in any superposition
    for (i, _) in b.electrodes().iter().enumerate().filter(|(_, e)| !e.role.is_grounded()) {
        let mut v = vec![0.0; b.electrodes().len()];
        v[i] = 1.0;
        assert!(potential_at(b, &v, &far).unwrap().abs() < 1e-2);
    }
}

#[test]
fn laplace_trace_at_random_points() {
    let b = trap_basis();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rf = unit(b, "rf_left");
    let dc = unit(b, "dc_right_04");
    for _ in 0..100 {
        // at least 5 panel sizes (50 um) away from every conductor
        let p = Point3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-5.0..5.0), rng.gen_range(-100.0..100.0));
        for v in [&rf, &dc] {
            let h = hessian_at(b, v, &p).unwrap();
            assert!(h.trace().abs() < 1e-3 * h.norm(), "trace {} norm {}", h.trace(), h.norm());
        }
    }
}

#[test]
fn hessian_is_symmetric() {
    let b = trap_basis();
    let h = hessian_at(b, &unit(b, "dc_left_02"), &Point3::new(3.0, 7.0, -40.0)).unwrap();
    assert_eq!(h, h.transpose());
}

#[test]
fn gradient_matches_finite_differences_at_slot_centre() {
    let b = trap_basis();
    for name in ["rf_left", "dc_right_05", "diag_left"] {
        let v = unit(b, name);
        let p = Point3::new(0.5, 1.0, 2.0);
        let sup = b.superpose(&[v]);
        let g = sup.sample(&p, Derivs::Gradient).unwrap()[0].grad;
        let h = 1e-3;
        let fd: Vector3<f64> = Vector3::from_fn(|k, _| {
            let mut d = Vector3::zeros();
            d[k] = h;
            let a = sup.sample(&(p + d), Derivs::Value).unwrap()[0].phi;
            let c = sup.sample(&(p - d), Derivs::Value).unwrap()[0].phi;
            (a - c) / (2.0 * h)
        });
        assert!((fd - g).norm() < 1e-4 * g.norm(), "{name}: fd {fd:?} analytic {g:?}");
    }
}

#[test]
fn superposition_is_linear() {
    let b = trap_basis();
    let n = b.electrodes().len();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let uv: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
    let zero = vec![0.0; n];
    let p = Point3::new(4.0, -3.0, 25.0);
    let sup = b.superpose(&[u.clone(), v.clone(), uv, zero]);
    let s = sup.sample(&p, Derivs::Hessian).unwrap();
    let scale = s[0].phi.abs() + s[1].phi.abs();
    assert!((s[2].phi - s[0].phi - s[1].phi).abs() <= 1e-12 * scale);
    assert!((s[2].grad - s[0].grad - s[1].grad).norm() <= 1e-12 * (s[0].grad.norm() + s[1].grad.norm()));
    assert_eq!(s[3].phi, 0.0);
    let doubled: Vec<f64> = u.iter().map(|x| 2.0 * x).collect();
    let a = potential_at(b, &u, &p).unwrap();
    let d = potential_at(b, &doubled, &p).unwrap();
    assert!((d - 2.0 * a).abs() <= 1e-12 * a.abs());
}

#[test]
fn rf_rails_are_mirror_images() {
    let b = trap_basis();
    let l = unit(b, "rf_left");
    let r = unit(b, "rf_right");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = Point3::new(rng.gen_range(-40.0..40.0), rng.gen_range(-30.0..60.0), rng.gen_range(-300.0..300.0));
        let q = Point3::new(-p.x, p.y, p.z);
        let a = potential_at(b, &l, &p).unwrap();
        let c = potential_at(b, &r, &q).unwrap();
        assert!((a - c).abs() < 1e-10, "{a} vs {c}");
    }
}

#[test]
fn refused_near_conductor() {
    let b = trap_basis();
    let v = unit(b, "rf_left");
    // just inside the slot next to the left rf face at x = -62.5
    let p = Point3::new(-60.0, 0.0, 0.0);
    assert!(matches!(potential_at(b, &v, &p), Err(FieldError::PointInsideConductor { .. })));
}

#[test]
fn cache_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let g = parallel_plates(4.0, 1.0);
    let opts = MeshOptions::with_resolution(0.5);
    let first = load_or_solve(&g, &opts, Some(dir.path())).unwrap();
    assert!(!first.from_cache);
    let second = load_or_solve(&g, &opts, Some(dir.path())).unwrap();
    assert!(second.from_cache);
    for e in 0..2 {
        assert_eq!(first.basis.charges(e), second.basis.charges(e));
    }
    assert_eq!(first.content_hash, second.content_hash);
    let other = load_or_solve(&g, &MeshOptions::with_resolution(1.0), Some(dir.path())).unwrap();
    assert_ne!(other.content_hash, first.content_hash);
}

#[test]
fn rf_potential_converges_under_refinement() {
    let g = build_symmetric_trap(&TrapParams::default()).unwrap();
    let centre = Point3::zeros();
    let coarse = trap_basis();
    let fine = BasisSet::solve(Arc::new(mesh(&g, &MeshOptions::with_resolution(5.0)).unwrap())).unwrap();
    let a = potential_at(coarse, &unit(coarse, "rf_left"), &centre).unwrap();
    let b = potential_at(&fine, &unit(&fine, "rf_left"), &centre).unwrap();
    assert!((a - b).abs() / b.abs() < 0.02, "{a} vs {b}");
}
