use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::source::{Derivs, FieldSource};
use crate::Point3;

/// Inclusive regular axis: `n` points from `min` to `max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn fixed(v: f64) -> Self {
        Self { min: v, max: v, n: 1 }
    }

    pub fn values(&self) -> Vec<f64> {
        match self.n {
            0 => Vec::new(),
            1 => vec![self.min],
            n => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x: Axis,
    pub y: Axis,
    pub z: Axis,
}

impl Grid {
    pub fn points(&self) -> Vec<Point3> {
        let (xs, ys, zs) = (self.x.values(), self.y.values(), self.z.values());
        let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
        for &z in &zs {
            for &y in &ys {
                for &x in &xs {
                    out.push(Point3::new(x, y, z));
                }
            }
        }
        out
    }
}

/// Per-electrode basis potential (V per V) and its gradient (V/um per V)
/// on a grid. Points too close to a conductor get empty cells.
pub fn basis_grid_csv(source: &dyn FieldSource, grid: &Grid) -> String {
    let electrodes = source.electrodes();
    let n = electrodes.len();
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|e| (0..n).map(|k| if k == e { 1.0 } else { 0.0 }).collect())
        .collect();
    let sup = source.superpose(&weights);
    let points = grid.points();
    let rows: Vec<String> = points
        .par_iter()
        .map(|p| {
            let mut row = format!("{},{},{}", p.x, p.y, p.z);
            match sup.sample(p, Derivs::Gradient) {
                Ok(samples) => {
                    for s in samples {
                        let _ = write!(row, ",{},{},{},{}", s.phi, s.grad.x, s.grad.y, s.grad.z);
                    }
                }
                Err(_) => row.push_str(&",,,,".repeat(n)),
            }
            row
        })
        .collect();
    let mut out = String::from("x_um,y_um,z_um");
    for e in electrodes {
        let _ = write!(
            out,
            ",{0}_phi,{0}_dphi_dx,{0}_dphi_dy,{0}_dphi_dz",
            e.name
        );
    }
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::source::AnalyticSource;

    #[test]
    fn axis_values() {
        assert_eq!(Axis { min: 0.0, max: 1.0, n: 3 }.values(), vec![0.0, 0.5, 1.0]);
        assert_eq!(Axis::fixed(2.0).values(), vec![2.0]);
    }

    #[test]
    fn csv_shape() {
        let s = AnalyticSource::four_rod(100.0);
        let g = Grid {
            x: Axis { min: -1.0, max: 1.0, n: 2 },
            y: Axis { min: -1.0, max: 1.0, n: 3 },
            z: Axis::fixed(0.0),
        };
        let csv = basis_grid_csv(&s, &g);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "x_um,y_um,z_um,rf_phi,rf_dphi_dx,rf_dphi_dy,rf_dphi_dz");
        assert_eq!(lines[1].split(',').count(), 7);
    }
}
