//! A closed-form stand-in for a segmented trap, for solver tests that should
//! not need a BEM solve. The fields are smooth but not harmonic.

use std::sync::Arc;

use crate::geometry::{ElectrodeRole, Side, TrapParams};
use crate::source::{AnalyticSource, FieldSample};
use crate::{Matrix3, Point3, Vector3};

/// Radial profile `c0 + a x + b y + c (x^2 - y^2) + d x y`.
#[derive(Clone, Copy)]
struct Radial {
    c0: f64,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

impl Radial {
    fn eval(&self, p: &Point3) -> (f64, f64, f64, f64, f64, f64) {
        let (x, y) = (p.x, p.y);
        (
            self.c0 + self.a * x + self.b * y + self.c * (x * x - y * y) + self.d * x * y,
            self.a + 2.0 * self.c * x + self.d * y,
            self.b - 2.0 * self.c * y + self.d * x,
            2.0 * self.c,
            -2.0 * self.c,
            self.d,
        )
    }
}

fn segment(r: Radial, center: f64, sigma: f64) -> impl Fn(&Point3) -> FieldSample {
    move |p| {
        let (f, fx, fy, fxx, fyy, fxy) = r.eval(p);
        let u = p.z - center;
        let g = (-0.5 * u * u / (sigma * sigma)).exp();
        let g1 = -g * u / (sigma * sigma);
        let g2 = g * (u * u / sigma.powi(4) - 1.0 / (sigma * sigma));
        FieldSample {
            phi: g * f,
            grad: Vector3::new(g * fx, g * fy, g1 * f),
            hess: Matrix3::new(
                g * fxx,
                g * fxy,
                g1 * fx,
                g * fxy,
                g * fyy,
                g1 * fy,
                g1 * fx,
                g1 * fy,
                g2 * f,
            ),
        }
    }
}

fn uniform(r: Radial) -> impl Fn(&Point3) -> FieldSample {
    move |p| {
        let (f, fx, fy, fxx, fyy, fxy) = r.eval(p);
        FieldSample {
            phi: f,
            grad: Vector3::new(fx, fy, 0.0),
            hess: Matrix3::new(fxx, fxy, 0.0, fxy, fyy, 0.0, 0.0, 0.0, 0.0),
        }
    }
}

/// Two rf rails forming a quadrupole with `r0 = 100 um` and a null on the
/// z axis, a Gaussian-profile segment for every segment of `params`, and
/// two diagonals. The electrode roles and names match a built trap.
pub fn segmented_toy(params: &TrapParams) -> AnalyticSource {
    let k = 0.5 / (100.0f64 * 100.0);
    let mut src = AnalyticSource::new();
    for side in [Side::Left, Side::Right] {
        src = src.with_quadratic(
            &ElectrodeRole::RfRail { side }.canonical_name(),
            ElectrodeRole::RfRail { side },
            0.5,
            Vector3::zeros(),
            Matrix3::from_diagonal(&Vector3::new(k, -k, 0.0)),
        );
    }
    let sigma = 0.6 * params.segment_pitch();
    for side in [Side::Left, Side::Right] {
        let s = if side == Side::Right { 1.0 } else { -1.0 };
        for index in 0..params.n_segments_per_side {
            let (a, b) = params.segment_span(index);
            let role = ElectrodeRole::DcSegment { side, index };
            let r = Radial {
                c0: 0.1,
                a: s * 1e-3,
                b: 2e-3,
                c: 2e-5,
                d: s * 1e-5,
            };
            src = src.with(&role.canonical_name(), role, Arc::new(segment(r, 0.5 * (a + b), sigma)));
        }
        let role = ElectrodeRole::DcDiagonal { side };
        let r = Radial {
            c0: 0.05,
            a: s * 2e-3,
            b: -1e-3,
            c: 1.5e-5,
            d: s * 2e-5,
        };
        src = src.with(&role.canonical_name(), role, Arc::new(uniform(r)));
    }
    src
}
