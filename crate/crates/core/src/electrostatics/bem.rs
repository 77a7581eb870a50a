use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::Mat;
use rayon::prelude::*;

use crate::geometry::{PanelMesh, PanelSymmetry};

use super::kernel::{exact_potential, monopole_potential, PanelFrame, NEAR};
use super::BemError;

/// Largest acceptable condition number estimate.
pub const MAX_CONDITION: f64 = 1e12;
/// Largest acceptable relative residual of a basis solve.
pub const MAX_RESIDUAL: f64 = 1e-10;

struct Block {
    matrix: Mat<f64>,
    lu: PartialPivLu<f64>,
}

/// Collocation system `K s = V` with `K_ij` the potential at centroid `i`
/// of unit density on panel `j`. For meshes with the four-fold mirror
/// symmetry the matrix is block diagonalized into one block per irreducible
/// representation of the mirror group and only those blocks are stored.
pub struct BemSystem {
    frames: Vec<PanelFrame>,
    symmetry: Option<PanelSymmetry>,
    blocks: Vec<Block>,
    condition: f64,
    owners: Vec<usize>,
    n_electrodes: usize,
}

/// Influence of panel `j` at the collocation point of panel `i`.
fn entry(frames: &[PanelFrame], i: usize, j: usize) -> f64 {
    let p = &frames[i].centre;
    let f = &frames[j];
    if (p - f.centre).norm() < NEAR * f.diameter {
        exact_potential(f, p)
    } else {
        monopole_potential(f, p)
    }
}

fn check_coincident(frames: &[PanelFrame]) -> Result<(), BemError> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let key = |i: usize| {
        let c = frames[i].centre;
        (c.x, c.y, c.z)
    };
    order.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).unwrap_or(std::cmp::Ordering::Equal));
    for w in order.windows(2) {
        let (a, b) = (w[0], w[1]);
        let scale = frames[a].diameter.min(frames[b].diameter);
        if (frames[a].centre - frames[b].centre).norm() <= 1e-9 * scale {
            return Err(BemError::SingularAssembly { a: a.min(b), b: a.max(b) });
        }
    }
    Ok(())
}

fn build_matrix(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Mat<f64> {
    let columns: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| (0..n).map(|i| f(i, j)).collect())
        .collect();
    Mat::from_fn(n, n, |i, j| columns[j][i])
}

fn one_norm(m: &Mat<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| (0..m.nrows()).map(|i| m[(i, j)].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager's estimate of `||A^-1||_1` from a few solves.
fn inverse_one_norm(lu: &PartialPivLu<f64>, n: usize) -> f64 {
    let mut x = Mat::<f64>::from_fn(n, 1, |_, _| 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let y = lu.solve(&x);
        estimate = (0..n).map(|i| y[(i, 0)].abs()).sum::<f64>();
        let xi = Mat::<f64>::from_fn(n, 1, |i, _| if y[(i, 0)] >= 0.0 { 1.0 } else { -1.0 });
        let z = lu.solve_transpose(&xi);
        let (jmax, zmax) = (0..n)
            .map(|i| (i, z[(i, 0)].abs()))
            .fold((0, 0.0), |acc, v| if v.1 > acc.1 { v } else { acc });
        let ztx: f64 = (0..n).map(|i| z[(i, 0)] * x[(i, 0)]).sum();
        if zmax <= ztx {
            break;
        }
        x = Mat::<f64>::from_fn(n, 1, |i, _| if i == jmax { 1.0 } else { 0.0 });
    }
    estimate
}

impl BemSystem {
    pub fn assemble(mesh: &PanelMesh) -> Result<Self, BemError> {
        let frames: Vec<PanelFrame> = mesh.panels.iter().map(PanelFrame::new).collect();
        check_coincident(&frames)?;
        let n = frames.len();
        let matrices = match &mesh.symmetry {
            None => vec![build_matrix(n, |i, j| entry(&frames, i, j))],
            Some(sym) => (0..PanelSymmetry::ORDER)
                .map(|c| {
                    build_matrix(sym.fundamental, |i, j| {
                        (0..PanelSymmetry::ORDER)
                            .map(|g| PanelSymmetry::character(c, g) * entry(&frames, i, sym.image(j, g)))
                            .sum()
                    })
                })
                .collect(),
        };
        let mut blocks = Vec::with_capacity(matrices.len());
        let mut condition: f64 = 0.0;
        for matrix in matrices {
            for i in 0..matrix.nrows() {
                if !(matrix[(i, i)] > 0.0) {
                    return Err(BemError::NonPositiveDiagonal { panel: i });
                }
            }
            let lu = PartialPivLu::new(matrix.as_ref());
            let cond = one_norm(&matrix) * inverse_one_norm(&lu, matrix.nrows());
            if !(cond.is_finite() && cond <= MAX_CONDITION) {
                return Err(BemError::IllConditioned { estimate: cond });
            }
            condition = condition.max(cond);
            blocks.push(Block { matrix, lu });
        }
        Ok(Self {
            frames,
            symmetry: mesh.symmetry.clone(),
            blocks,
            condition,
            owners: mesh.panels.iter().map(|p| p.owner).collect(),
            n_electrodes: mesh.electrodes.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[PanelFrame] {
        &self.frames
    }

    /// Largest 1-norm condition estimate over the stored blocks.
    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    /// Diagonal entry of the full (unreduced) matrix.
    pub fn self_term(&self, i: usize) -> f64 {
        entry(&self.frames, i, i)
    }

    /// Full-matrix entry, assembled on demand.
    pub fn influence(&self, i: usize, j: usize) -> f64 {
        entry(&self.frames, i, j)
    }

    fn solve_block(&self, block: &Block, rhs: &Mat<f64>) -> (Mat<f64>, f64, f64) {
        let mut x = block.lu.solve(rhs);
        let residual = |x: &Mat<f64>| &block.matrix * x - rhs;
        let mut r = residual(&x);
        // one step of iterative refinement
        let correction = block.lu.solve(&r);
        x -= &correction;
        r = residual(&x);
        (x, r.squared_norm_l2(), rhs.squared_norm_l2())
    }

    /// Density solving `K s = v` for panel potentials `v`, with the relative residual.
    pub fn solve(&self, v: &[f64]) -> (Vec<f64>, f64) {
        let n = self.len();
        assert_eq!(v.len(), n);
        match &self.symmetry {
            None => {
                let rhs = Mat::<f64>::from_fn(n, 1, |i, _| v[i]);
                let (x, r2, b2) = self.solve_block(&self.blocks[0], &rhs);
                let rel = if b2 > 0.0 { (r2 / b2).sqrt() } else { 0.0 };
                ((0..n).map(|i| x[(i, 0)]).collect(), rel)
            }
            Some(sym) => {
                let m = sym.fundamental;
                let mut s = vec![0.0; n];
                let (mut r2, mut b2) = (0.0, 0.0);
                for (c, block) in self.blocks.iter().enumerate() {
                    let rhs = Mat::<f64>::from_fn(m, 1, |f, _| {
                        0.25 * (0..PanelSymmetry::ORDER)
                            .map(|g| PanelSymmetry::character(c, g) * v[sym.image(f, g)])
                            .sum::<f64>()
                    });
                    if rhs.squared_norm_l2() == 0.0 {
                        continue;
                    }
                    let (x, rr, bb) = self.solve_block(block, &rhs);
                    r2 += rr;
                    b2 += bb;
                    for f in 0..m {
                        for g in 0..PanelSymmetry::ORDER {
                            s[sym.image(f, g)] += PanelSymmetry::character(c, g) * x[(f, 0)];
                        }
                    }
                }
                let rel = if b2 > 0.0 { (r2 / b2).sqrt() } else { 0.0 };
                (s, rel)
            }
        }
    }

    /// Unit-voltage density for one electrode: 1 V on its panels, 0 V elsewhere.
    pub fn solve_basis(&self, electrode: usize) -> Result<(Vec<f64>, f64), BemError> {
        if electrode >= self.n_electrodes {
            return Err(BemError::UnknownElectrode(electrode.to_string()));
        }
        let v: Vec<f64> = self
            .owners
            .iter()
            .map(|&o| if o == electrode { 1.0 } else { 0.0 })
            .collect();
        let (s, residual) = self.solve(&v);
        if !(residual < MAX_RESIDUAL) {
            return Err(BemError::ResidualTooLarge { electrode, residual });
        }
        Ok((s, residual))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mesh, ElectrodeRole, Geometry, MeshElectrode, MeshOptions, Panel, PanelMesh, Rect};
    use crate::{Point3, Vector3};

    fn plates(gap: f64, side: f64) -> Geometry {
        crate::electrostatics::fixtures::parallel_plates(side, gap)
    }

    #[test]
    fn coincident_centroids_are_singular() {
        let r = Rect::new(Point3::zeros(), Vector3::x(), Vector3::z());
        let m = PanelMesh::from_panels(
            vec![Panel::from_rect(&r, 0), Panel::from_rect(&r, 0)],
            vec![MeshElectrode {
                name: "a".into(),
                role: ElectrodeRole::Other,
            }],
            1.0,
        );
        assert!(matches!(
            BemSystem::assemble(&m),
            Err(BemError::SingularAssembly { a: 0, b: 1 })
        ));
    }

    #[test]
    fn boundary_conditions_hold_at_centroids() {
        let g = plates(1.0, 4.0);
        let m = mesh(&g, &MeshOptions::with_resolution(0.5)).unwrap();
        let sys = BemSystem::assemble(&m).unwrap();
        let (s, _) = sys.solve_basis(0).unwrap();
        for i in 0..sys.len() {
            let phi: f64 = (0..sys.len()).map(|j| sys.influence(i, j) * s[j]).sum();
            let target = if m.panels[i].owner == 0 { 1.0 } else { 0.0 };
            assert!((phi - target).abs() < 1e-10);
        }
        assert!(sys.self_term(0) > 0.0);
    }

    #[test]
    fn all_panels_at_one_volt() {
        let g = plates(1.0, 4.0);
        let m = mesh(&g, &MeshOptions::with_resolution(0.5)).unwrap();
        let sys = BemSystem::assemble(&m).unwrap();
        let (s, res) = sys.solve(&vec![1.0; sys.len()]);
        assert!(res < 1e-10);
        for i in 0..sys.len() {
            let phi: f64 = (0..sys.len()).map(|j| sys.influence(i, j) * s[j]).sum();
            assert!((phi - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn reduced_and_full_systems_agree() {
        // the plate pair centred on the origin is symmetric under both mirrors
        let g = plates(1.0, 4.0);
        let sym = mesh(&g, &MeshOptions::with_resolution(0.5)).unwrap();
        assert!(sym.symmetry.is_some());
        let plain = mesh(
            &g,
            &MeshOptions {
                resolution: 0.5,
                use_symmetry: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(plain.symmetry.is_none());
        let a = BemSystem::assemble(&sym).unwrap();
        let b = BemSystem::assemble(&plain).unwrap();
        let qa: f64 = a.solve_basis(0).unwrap().0.iter().zip(&sym.panels).map(|(s, p)| s * p.area).sum();
        let qb: f64 = b.solve_basis(0).unwrap().0.iter().zip(&plain.panels).map(|(s, p)| s * p.area).sum();
        assert!((qa - qb).abs() < 1e-10 * qa.abs(), "{qa} vs {qb}");
    }

    #[test]
    fn condition_estimate_is_reasonable() {
        let g = plates(1.0, 4.0);
        let m = mesh(&g, &MeshOptions::with_resolution(0.5)).unwrap();
        let sys = BemSystem::assemble(&m).unwrap();
        let c = sys.condition_estimate();
        assert!(c > 1.0 && c < 1e6, "{c}");
    }
}
