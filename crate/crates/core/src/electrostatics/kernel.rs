//! Potential, gradient and Hessian of a uniformly charged flat rectangle.
//!
//! All quantities are for unit surface density with the `1/r` kernel in
//! micrometres: the potential of a panel with density `s` (V/um) is
//! `s * phi`.

use crate::geometry::Panel;
use crate::{Matrix3, Point3, Vector3};

/// Potential with first and second derivatives at one point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KernelSample {
    pub phi: f64,
    pub grad: Vector3<f64>,
    pub hess: Matrix3<f64>,
}

impl KernelSample {
    fn scaled_add(&mut self, w: f64, o: &KernelSample) {
        self.phi += w * o.phi;
        self.grad += w * o.grad;
        self.hess += w * o.hess;
    }
}

/// Rectangle geometry in the form the kernel uses.
#[derive(Clone, Copy, Debug)]
pub struct PanelFrame {
    pub centre: Point3,
    pub eu: Vector3<f64>,
    pub ev: Vector3<f64>,
    pub en: Vector3<f64>,
    pub a: f64,
    pub b: f64,
    pub area: f64,
    pub diameter: f64,
}

impl PanelFrame {
    pub fn new(p: &Panel) -> Self {
        Self {
            centre: p.centroid,
            eu: p.axis_u,
            ev: p.axis_v,
            en: p.axis_u.cross(&p.axis_v),
            a: p.half_u,
            b: p.half_v,
            area: 4.0 * p.half_u * p.half_v,
            diameter: p.diameter(),
        }
    }

    fn to_local(&self, p: &Point3) -> (f64, f64, f64) {
        let d = p - self.centre;
        (d.dot(&self.eu), d.dot(&self.ev), d.dot(&self.en))
    }

    fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_columns(&[self.eu, self.ev, self.en])
    }

    /// Distance from `p` to the rectangle.
    pub fn distance(&self, p: &Point3) -> f64 {
        let (x, y, z) = self.to_local(p);
        let dx = (x.abs() - self.a).max(0.0);
        let dy = (y.abs() - self.b).max(0.0);
        (dx * dx + dy * dy + z * z).sqrt()
    }

    pub fn max_edge(&self) -> f64 {
        2.0 * self.a.max(self.b)
    }
}

/// `ln(v2 + R2) - ln(v1 + R1)` with `R = sqrt(rho2 + v^2)`, accurate when
/// either `v` is large and negative.
fn log_diff(v1: f64, v2: f64, rho2: f64) -> f64 {
    let r1 = (rho2 + v1 * v1).sqrt();
    let r2 = (rho2 + v2 * v2).sqrt();
    if v1 >= 0.0 {
        ((v2 + r2) / (v1 + r1)).ln()
    } else if v2 <= 0.0 {
        ((r1 - v1) / (r2 - v2)).ln()
    } else {
        ((v2 + r2) * (r1 - v1) / rho2).ln()
    }
}

/// `1 / (v + R)` evaluated without cancellation for negative `v`.
fn inv_v_plus_r(v: f64, r: f64, rho2: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (v + r)
    } else {
        (r - v) / rho2
    }
}

/// Exact integral of `1/|p - q|` over the rectangle, in panel-local
/// coordinates. Returns (phi, grad, hess) in the local frame.
fn exact_local(a: f64, b: f64, x: f64, y: f64, z: f64) -> KernelSample {
    let us = [-a - x, a - x];
    let vs = [-b - y, b - y];
    let w = z;
    let w2 = w * w;
    let sign = [-1.0, 1.0];

    let mut phi = 0.0;
    let mut gx = 0.0;
    let mut gy = 0.0;
    let mut gz = 0.0;
    // log differences along v for each u edge and along u for each v edge
    for i in 0..2 {
        let u = us[i];
        let ld = log_diff(vs[0], vs[1], u * u + w2);
        if u != 0.0 {
            phi += sign[i] * u * ld;
        }
        gx -= sign[i] * ld;
    }
    for j in 0..2 {
        let v = vs[j];
        let ld = log_diff(us[0], us[1], v * v + w2);
        if v != 0.0 {
            phi += sign[j] * v * ld;
        }
        gy -= sign[j] * ld;
    }

    let (mut hxx, mut hyy, mut hxy, mut hxz, mut hyz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..2 {
        for j in 0..2 {
            let s = sign[i] * sign[j];
            let (u, v) = (us[i], vs[j]);
            let r = (u * u + v * v + w2).sqrt();
            if w != 0.0 {
                let t = (u * v / (w * r)).atan();
                phi -= s * w * t;
                gz -= s * t;
            }
            hxy += s / r;
            let rho_u = v * v + w2;
            let rho_v = u * u + w2;
            if u != 0.0 || w != 0.0 {
                let inv = inv_v_plus_r(v, r, rho_v);
                if u != 0.0 {
                    hxx += s * u / r * inv;
                }
                if w != 0.0 {
                    hxz -= s * w / r * inv;
                }
            }
            if v != 0.0 || w != 0.0 {
                let inv = inv_v_plus_r(u, r, rho_u);
                if v != 0.0 {
                    hyy += s * v / r * inv;
                }
                if w != 0.0 {
                    hyz -= s * w / r * inv;
                }
            }
        }
    }
    let hzz = -(hxx + hyy);
    KernelSample {
        phi,
        grad: Vector3::new(gx, gy, gz),
        hess: Matrix3::new(hxx, hxy, hxz, hxy, hyy, hyz, hxz, hyz, hzz),
    }
}

fn symmetrize(m: Matrix3<f64>) -> Matrix3<f64> {
    0.5 * (m + m.transpose())
}

/// Exact rectangle integral at `p`, in global coordinates.
pub fn exact(f: &PanelFrame, p: &Point3) -> KernelSample {
    let (x, y, z) = f.to_local(p);
    let l = exact_local(f.a, f.b, x, y, z);
    let r = f.rotation();
    KernelSample {
        phi: l.phi,
        grad: r * l.grad,
        hess: symmetrize(r * l.hess * r.transpose()),
    }
}

/// Exact potential only (cheaper, used for collocation).
pub fn exact_potential(f: &PanelFrame, p: &Point3) -> f64 {
    let (x, y, z) = f.to_local(p);
    let (a, b) = (f.a, f.b);
    let us = [-a - x, a - x];
    let vs = [-b - y, b - y];
    let w2 = z * z;
    let sign = [-1.0, 1.0];
    let mut phi = 0.0;
    for i in 0..2 {
        if us[i] != 0.0 {
            phi += sign[i] * us[i] * log_diff(vs[0], vs[1], us[i] * us[i] + w2);
        }
        if vs[i] != 0.0 {
            phi += sign[i] * vs[i] * log_diff(us[0], us[1], vs[i] * vs[i] + w2);
        }
    }
    if z != 0.0 {
        for i in 0..2 {
            for j in 0..2 {
                let (u, v) = (us[i], vs[j]);
                let r = (u * u + v * v + w2).sqrt();
                phi -= sign[i] * sign[j] * z * (u * v / (z * r)).atan();
            }
        }
    }
    phi
}

fn point_charge(q: f64, src: &Point3, p: &Point3) -> KernelSample {
    let d = p - src;
    let r2 = d.norm_squared();
    let r = r2.sqrt();
    let inv = 1.0 / r;
    let inv3 = inv / r2;
    let inv5 = inv3 / r2;
    KernelSample {
        phi: q * inv,
        grad: -q * inv3 * d,
        hess: symmetrize(q * (3.0 * inv5 * d * d.transpose() - inv3 * Matrix3::identity())),
    }
}

/// Whole panel charge at the centroid.
pub fn monopole_potential(f: &PanelFrame, p: &Point3) -> f64 {
    f.area / (p - f.centre).norm()
}

/// 2x2 Gauss-Legendre point charges.
pub fn gauss(f: &PanelFrame, p: &Point3) -> KernelSample {
    let g = 1.0 / 3f64.sqrt();
    let q = 0.25 * f.area;
    let mut out = KernelSample::default();
    for su in [-g, g] {
        for sv in [-g, g] {
            let src = f.centre + su * f.a * f.eu + sv * f.b * f.ev;
            out.scaled_add(1.0, &point_charge(q, &src, p));
        }
    }
    out
}

/// Distance, in panel diameters, below which the exact integral is used.
pub const NEAR: f64 = 3.0;
/// Distance beyond which the Gauss approximation is used alone.
pub const FAR: f64 = 4.0;

/// Exact near the panel, Gauss far away, blended by a C2 smoothstep in
/// between so that derivatives stay continuous.
pub fn blended(f: &PanelFrame, p: &Point3) -> KernelSample {
    let d = p - f.centre;
    let r = d.norm();
    let t = (r / f.diameter - NEAR) / (FAR - NEAR);
    if t <= 0.0 {
        return exact(f, p);
    }
    if t >= 1.0 {
        return gauss(f, p);
    }
    let e = exact(f, p);
    let g = gauss(f, p);
    let w = t * t * t * (10.0 + t * (-15.0 + 6.0 * t));
    let w1 = 30.0 * t * t * (1.0 - t) * (1.0 - t);
    let w2 = 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
    let scale = 1.0 / (f.diameter * (FAR - NEAR));
    let rhat = d / r;
    let grad_w = w1 * scale * rhat;
    let proj = Matrix3::identity() - rhat * rhat.transpose();
    let hess_w = w2 * scale * scale * rhat * rhat.transpose() + w1 * scale / r * proj;

    let dphi = g.phi - e.phi;
    let dgrad = g.grad - e.grad;
    let cross = grad_w * dgrad.transpose();
    KernelSample {
        phi: e.phi + w * dphi,
        grad: e.grad + w * dgrad + dphi * grad_w,
        hess: symmetrize(e.hess + w * (g.hess - e.hess) + cross + cross.transpose() + dphi * hess_w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Panel, Rect};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame(a: f64, b: f64) -> PanelFrame {
        let r = Rect::new(
            Point3::new(-a, -b, 0.0),
            Vector3::new(2.0 * a, 0.0, 0.0),
            Vector3::new(0.0, 2.0 * b, 0.0),
        );
        PanelFrame::new(&Panel::from_rect(&r, 0))
    }

    fn tilted() -> PanelFrame {
        let u = Vector3::new(1.0, 2.0, 0.5).normalize();
        let v = u.cross(&Vector3::new(0.0, 0.0, 1.0)).normalize();
        let r = Rect::new(Point3::new(0.3, -0.2, 1.1), 1.5 * u, 0.7 * v);
        PanelFrame::new(&Panel::from_rect(&r, 0))
    }

    /// Stratified Monte Carlo estimate of the integral of 1/r.
    fn monte_carlo(f: &PanelFrame, p: &Point3, n_side: usize, rng: &mut ChaCha8Rng) -> f64 {
        let mut sum = 0.0;
        for i in 0..n_side {
            for j in 0..n_side {
                let s = (i as f64 + rng.gen::<f64>()) / n_side as f64 * 2.0 - 1.0;
                let t = (j as f64 + rng.gen::<f64>()) / n_side as f64 * 2.0 - 1.0;
                let q = f.centre + s * f.a * f.eu + t * f.b * f.ev;
                sum += 1.0 / (p - q).norm();
            }
        }
        sum * f.area / (n_side * n_side) as f64
    }

    #[test]
    fn unit_square_self_term_matches_closed_form_and_monte_carlo() {
        let f = frame(0.5, 0.5);
        let value = exact_potential(&f, &Point3::zeros());
        // 4 ln(1 + sqrt 2) for the unit square at its centre
        let closed = 4.0 * (1.0 + 2f64.sqrt()).ln();
        assert!((value - closed).abs() < 1e-13, "{value} vs {closed}");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mc = monte_carlo(&f, &Point3::zeros(), 1000, &mut rng);
        assert!((mc - value).abs() / value < 2e-3, "mc {mc} vs {value}");
    }

    #[test]
    fn off_panel_points_match_monte_carlo() {
        let f = tilted();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.0, 1.0, -1.0),
            Point3::new(0.8, 0.6, 1.4),
        ] {
            let exact = exact(&f, &p).phi;
            let mc = monte_carlo(&f, &p, 400, &mut rng);
            assert!((mc - exact).abs() / exact < 1e-3, "{p:?}: {mc} vs {exact}");
        }
    }

    #[test]
    fn far_field_matches_point_charge() {
        let f = frame(0.5, 0.5);
        let p = Point3::new(0.0, 0.0, 100.0 * f.diameter);
        let exact = exact_potential(&f, &p);
        let point = monopole_potential(&f, &p);
        assert!((exact - point).abs() / point < 1e-4);
        let q = Point3::new(60.0, -70.0, 30.0);
        assert!((exact_potential(&f, &q) - monopole_potential(&f, &q)).abs() / monopole_potential(&f, &q) < 1e-4);
    }

    #[test]
    fn potential_only_path_agrees_with_full_kernel() {
        let f = tilted();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let p = Point3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let a = exact(&f, &p).phi;
            let b = exact_potential(&f, &p);
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    fn fd_check(f: &PanelFrame, p: &Point3, eval: fn(&PanelFrame, &Point3) -> KernelSample, tol: f64) {
        let h = 1e-4;
        let s = eval(f, p);
        for k in 0..3 {
            let mut dp = Vector3::zeros();
            dp[k] = h;
            let plus = eval(f, &(p + dp));
            let minus = eval(f, &(p - dp));
            let g = (plus.phi - minus.phi) / (2.0 * h);
            assert!(
                (g - s.grad[k]).abs() <= tol * s.grad.norm(),
                "grad {k} at {p:?}: fd {g} vs {}",
                s.grad[k]
            );
            let hcol = (plus.grad - minus.grad) / (2.0 * h);
            for l in 0..3 {
                assert!(
                    (hcol[l] - s.hess[(l, k)]).abs() <= tol * s.hess.norm(),
                    "hess ({l},{k}) at {p:?}: fd {} vs {}",
                    hcol[l],
                    s.hess[(l, k)]
                );
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let f = tilted();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut n = 0;
        while n < 100 {
            let p = Point3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            if f.distance(&p) < 0.2 {
                continue;
            }
            fd_check(&f, &p, exact, 1e-6);
            n += 1;
        }
    }

    #[test]
    fn derivatives_in_plane_and_on_edge_lines() {
        let f = frame(0.5, 0.25);
        for p in [
            Point3::new(1.5, 0.0, 0.0),
            Point3::new(0.5, 1.0, 0.0),
            Point3::new(0.5, -2.0, 0.0),
            Point3::new(-0.5, 0.25 + 3.0, 0.0),
            Point3::new(2.0, 2.0, 0.0),
            Point3::new(0.5, 0.25, 0.7),
        ] {
            let s = exact(&f, &p);
            assert!(s.phi.is_finite() && s.grad.iter().all(|v| v.is_finite()));
            assert!(s.hess.iter().all(|v| v.is_finite()), "{p:?}");
            fd_check(&f, &p, exact, 1e-5);
        }
    }

    #[test]
    fn blended_kernel_is_smooth_and_harmonic() {
        let f = frame(0.5, 0.5);
        let d = f.diameter;
        for r in [2.9 * d, 3.2 * d, 3.5 * d, 3.9 * d, 4.1 * d] {
            let p = Point3::new(0.3 * r, 0.4 * r, (1.0f64 - 0.25).sqrt() * r);
            fd_check(&f, &p, blended, 1e-5);
            let s = blended(&f, &p);
            assert!(s.hess.trace().abs() < 1e-3 * s.hess.norm());
            assert!((s.hess - s.hess.transpose()).norm() == 0.0);
        }
    }

    #[test]
    fn exact_hessian_is_traceless() {
        let f = tilted();
        let p = Point3::new(1.0, 2.0, 3.0);
        let s = exact(&f, &p);
        assert!(s.hess.trace().abs() < 1e-10 * s.hess.norm());
    }

    #[test]
    fn sheet_limit_of_normal_field() {
        let f = frame(50.0, 50.0);
        let s = exact(&f, &Point3::new(0.0, 0.0, 1e-6));
        assert!((s.grad.z + 2.0 * std::f64::consts::PI).abs() < 1e-6);
    }
}
