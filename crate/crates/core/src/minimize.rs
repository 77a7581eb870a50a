//! Small dense minimizers shared by the single-ion and chain analyses.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

/// Objective for [`trust_region_newton`]. `value` returns `None` when `x`
/// leaves the domain (for example an ion inside a conductor), which the
/// minimizer treats as a rejected step.
pub trait Objective {
    type Error;
    fn value(&mut self, x: &DVector<f64>) -> Result<Option<f64>, Self::Error>;
    fn derivatives(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>), Self::Error>;
}

#[derive(Clone, Copy, Debug)]
pub struct TrustRegionOptions {
    pub max_iterations: usize,
    /// Converged when every gradient component is below this.
    pub gradient_tolerance: f64,
    pub initial_radius: f64,
    pub max_radius: f64,
}

impl Default for TrustRegionOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-9,
            initial_radius: 1.0,
            max_radius: 20.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting with `x0`. Steps
    /// below the rounding floor of the objective may raise it by rounding.
    pub history: Vec<f64>,
}

/// Solve `(H + mu I) p = -g` with the smallest `mu >= 0` (on a doubling
/// ladder) that makes the shifted matrix positive definite and `|p| <= radius`.
fn shifted_step(h: &DMatrix<f64>, g: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = g.len();
    let scale = h.diagonal().iter().fold(0.0f64, |a, d| a.max(d.abs())).max(1e-300);
    let mut mu = 0.0;
    loop {
        let shifted = h + DMatrix::identity(n, n) * mu;
        if let Some(c) = shifted.cholesky() {
            let p = c.solve(&(-g));
            if p.norm() <= radius * (1.0 + 1e-12) {
                return p;
            }
        }
        mu = if mu == 0.0 { 1e-8 * scale } else { 2.0 * mu };
        if mu > 1e30 * scale {
            return -g * (radius / g.norm().max(1e-300));
        }
    }
}

/// Damped Newton with a trust region. Only steps that lower the objective
/// are accepted.
pub fn trust_region_newton<O: Objective>(
    obj: &mut O,
    x0: DVector<f64>,
    opts: &TrustRegionOptions,
) -> Result<Minimum, O::Error> {
    let mut x = x0;
    let (mut f, mut g, mut h) = obj.derivatives(&x)?;
    let mut radius = opts.initial_radius;
    let mut history = vec![f];
    let mut iterations = 0;
    let converged = |g: &DVector<f64>| g.amax() < opts.gradient_tolerance;
    while !converged(&g) && iterations < opts.max_iterations {
        iterations += 1;
        let p = shifted_step(&h, &g, radius);
        let predicted = -(g.dot(&p) + 0.5 * p.dot(&(&h * &p)));
        let trial = &x + &p;
        let actual = match obj.value(&trial)? {
            Some(ft) => f - ft,
            None => f64::NEG_INFINITY,
        };
        let rho = if predicted > 0.0 { actual / predicted } else { -1.0 };
        let noise = 1e-13 * f.abs();
        if predicted.abs() < noise && actual > -10.0 * noise {
            // below the rounding floor of the objective the gradient decides
            let (ft, gt, ht) = obj.derivatives(&trial)?;
            if gt.norm() < g.norm() {
                x = trial;
                (f, g, h) = (ft, gt, ht);
                history.push(f);
            } else {
                break;
            }
            continue;
        }
        if actual > 0.0 && rho > 1e-4 {
            x = trial;
            (f, g, h) = obj.derivatives(&x)?;
            history.push(f);
            if rho > 0.75 && p.norm() > 0.9 * radius {
                radius = (2.0 * radius).min(opts.max_radius);
            }
        } else {
            radius = 0.25 * p.norm();
            if radius < 1e-14 {
                break;
            }
        }
        if rho < 0.25 && actual > 0.0 {
            radius *= 0.5;
        }
    }
    Ok(Minimum {
        converged: converged(&g),
        x,
        value: f,
        gradient: g,
        hessian: h,
        iterations,
        history,
    })
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn sorted_eigen3(m: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let e = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let mut idx = [0, 1, 2];
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = Vector3::from_fn(|i, _| e.eigenvalues[idx[i]]);
    let vecs = Matrix3::from_fn(|r, c| e.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(0.5 * (m + m.transpose()));
    let n = m.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[a].total_cmp(&e.eigenvalues[b]));
    let vals = DVector::from_fn(n, |i, _| e.eigenvalues[idx[i]]);
    let vecs = DMatrix::from_fn(n, n, |r, c| e.eigenvectors[(r, idx[c])]);
    (vals, vecs)
}
