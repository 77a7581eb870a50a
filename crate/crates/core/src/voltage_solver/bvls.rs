//! Bounded-variable least squares, `min |A x - b|` with `l <= x <= u`, by
//! an active-set method in the style of Stark and Parker.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn symmetric(n: usize, bound: f64) -> Self {
        Self {
            lower: vec![-bound; n],
            upper: vec![bound; n],
        }
    }

    pub fn unbounded(n: usize) -> Self {
        Self::symmetric(n, f64::INFINITY)
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum State {
    Free,
    Lower,
    Upper,
}

#[derive(Clone, Debug)]
pub struct BvlsResult {
    pub x: DVector<f64>,
    pub iterations: usize,
    /// KKT conditions hold within tolerance.
    pub converged: bool,
}

fn solve_free(a: &DMatrix<f64>, rhs: &DVector<f64>, free: &[usize]) -> DVector<f64> {
    let sub = DMatrix::from_fn(a.nrows(), free.len(), |r, c| a[(r, free[c])]);
    let svd = sub.svd(true, true);
    let tol = 1e-13 * svd.singular_values.max() * (a.nrows().max(free.len()) as f64);
    svd.solve(rhs, tol).expect("SVD was computed with both factors")
}

/// `tol` is relative to the largest column norm times `|b|`.
pub fn bvls(a: &DMatrix<f64>, b: &DVector<f64>, bounds: &Bounds, tol: f64) -> BvlsResult {
    let n = a.ncols();
    assert_eq!(bounds.len(), n, "bounds do not match the matrix");
    let mut state = vec![State::Free; n];
    let mut x = DVector::from_fn(n, |i, _| 0f64.clamp(bounds.lower[i], bounds.upper[i]));
    for i in 0..n {
        if bounds.lower[i] >= bounds.upper[i] || bounds.lower[i] > 0.0 {
            state[i] = State::Lower;
        } else if bounds.upper[i] < 0.0 {
            state[i] = State::Upper;
        }
    }
    let col_scale = (0..n).map(|j| a.column(j).norm()).fold(0.0, f64::max);
    let kkt_tol = tol * col_scale * b.norm().max(1e-300);
    let max_iter = 10 * n + 100;
    let mut iterations = 0;
    let mut just_freed: Option<usize> = None;
    let mut skip: Option<usize> = None;

    loop {
        iterations += 1;
        if iterations > max_iter {
            return BvlsResult {
                x,
                iterations,
                converged: false,
            };
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == State::Free).collect();
        if !free.is_empty() {
            let mut rhs = b.clone();
            for i in (0..n).filter(|&i| state[i] != State::Free) {
                rhs.axpy(-x[i], &a.column(i).into_owned(), 1.0);
            }
            let z = solve_free(a, &rhs, &free);
            let feasible = free
                .iter()
                .zip(z.iter())
                .all(|(&i, &v)| v >= bounds.lower[i] && v <= bounds.upper[i]);
            if feasible {
                for (&i, &v) in free.iter().zip(z.iter()) {
                    x[i] = v;
                }
            } else {
                // step from x toward z until the first bound is reached
                let mut alpha = 1.0f64;
                for (&i, &v) in free.iter().zip(z.iter()) {
                    let d = v - x[i];
                    if v < bounds.lower[i] && d < 0.0 {
                        alpha = alpha.min((bounds.lower[i] - x[i]) / d);
                    } else if v > bounds.upper[i] && d > 0.0 {
                        alpha = alpha.min((bounds.upper[i] - x[i]) / d);
                    }
                }
                let alpha = alpha.max(0.0);
                for (&i, &v) in free.iter().zip(z.iter()) {
                    x[i] += alpha * (v - x[i]);
                    let span = 1e-12 * (1.0 + x[i].abs());
                    if x[i] <= bounds.lower[i] + span && v < x[i] + span {
                        x[i] = bounds.lower[i];
                        state[i] = State::Lower;
                    } else if x[i] >= bounds.upper[i] - span && v > x[i] - span {
                        x[i] = bounds.upper[i];
                        state[i] = State::Upper;
                    }
                }
                // a variable freed and immediately re-bound would cycle
                if let Some(j) = just_freed.take() {
                    if state[j] != State::Free {
                        skip = Some(j);
                    }
                }
                continue;
            }
        }
        // w = A^T (b - A x) is minus half the gradient
        let w = a.transpose() * (b - a * &x);
        let mut best: Option<(usize, f64)> = None;
        for i in 0..n {
            if skip == Some(i) {
                continue;
            }
            let violation = match state[i] {
                State::Lower if bounds.upper[i] > bounds.lower[i] => w[i],
                State::Upper if bounds.upper[i] > bounds.lower[i] => -w[i],
                _ => continue,
            };
            if violation > kkt_tol && best.is_none_or(|(_, v)| violation > v) {
                best = Some((i, violation));
            }
        }
        skip = None;
        match best {
            Some((i, _)) => {
                state[i] = State::Free;
                just_freed = Some(i);
            }
            None => {
                return BvlsResult {
                    x,
                    iterations,
                    converged: true,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn objective(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
        (a * x - b).norm_squared()
    }

    /// Every assignment of each variable to lower, upper or free; the best
    /// feasible candidate is the global minimum of the convex problem.
    fn brute_force(a: &DMatrix<f64>, b: &DVector<f64>, bounds: &Bounds) -> DVector<f64> {
        let n = a.ncols();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for code in 0..3usize.pow(n as u32) {
            let mut c = code;
            let mut x = DVector::zeros(n);
            let mut free = Vec::new();
            for i in 0..n {
                match c % 3 {
                    0 => x[i] = bounds.lower[i],
                    1 => x[i] = bounds.upper[i],
                    _ => free.push(i),
                }
                c /= 3;
            }
            if !free.is_empty() {
                let mut rhs = b.clone();
                for i in (0..n).filter(|i| !free.contains(i)) {
                    rhs -= a.column(i) * x[i];
                }
                let z = solve_free(a, &rhs, &free);
                for (&i, &v) in free.iter().zip(z.iter()) {
                    x[i] = v;
                }
            }
            let ok = (0..n).all(|i| x[i] >= bounds.lower[i] - 1e-12 && x[i] <= bounds.upper[i] + 1e-12);
            if ok {
                let f = objective(a, b, &x);
                if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                    best = Some((f, x));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn unbounded_is_least_squares() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 2.0, 4.0]);
        let r = bvls(&a, &b, &Bounds::unbounded(2), 1e-12);
        let ls = a.clone().svd(true, true).solve(&b, 1e-14).unwrap();
        assert!(r.converged);
        assert!((r.x - ls).norm() < 1e-12);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = DMatrix::from_fn(5, 3, |r, c| ((r * 3 + c) as f64).sin());
        let r = bvls(&a, &DVector::zeros(5), &Bounds::symmetric(3, 1.0), 1e-12);
        assert_eq!(r.x, DVector::zeros(3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn matches_brute_force(
            entries in proptest::collection::vec(-1.0..1.0f64, 24),
            rhs in proptest::collection::vec(-5.0..5.0f64, 6),
            bound in 0.1..3.0f64,
        ) {
            let a = DMatrix::from_row_slice(6, 4, &entries);
            let b = DVector::from_vec(rhs);
            let bounds = Bounds::symmetric(4, bound);
            let r = bvls(&a, &b, &bounds, 1e-12);
            let oracle = brute_force(&a, &b, &bounds);
            prop_assert!(r.x.iter().all(|v| v.abs() <= bound * (1.0 + 1e-12)));
            let (f, g) = (objective(&a, &b, &r.x), objective(&a, &b, &oracle));
            prop_assert!(f <= g + 1e-9 * (1.0 + g), "bvls {} brute {} x {:?} oracle {:?}", f, g, r.x, oracle);
        }
    }
}
