//! Static voltages that hold an ion chain at prescribed positions.
//!
//! Four conditions are imposed at every target ion position: axial force
//! balance against the Coulomb repulsion of the other ions, a fixed radial dc
//! quadrupole (strength and orientation), and a radial dc field null on the rf
//! null line. Every condition is linear in the electrode voltages, so they are
//! stacked into one weighted, bounded, regularized least-squares problem.

pub mod bvls;
pub mod toy;
pub mod width;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{equal_spacing, ChainEnergy};
use crate::geometry::{ElectrodeRole, TrapParams};
use crate::potentials::{PotentialError, PotentialField};
use crate::single_ion::{find_rf_null, SingleIonError};
use crate::source::{Derivs, FieldError, FieldSample};
use crate::units::mhz_to_curvature;
use crate::Point3;

use self::bvls::{bvls, Bounds};

/// Relative residual increase that marks an electrode as active.
pub const ACTIVE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("invalid targets: `{field}` {reason}")]
    Targets { field: &'static str, reason: String },
    #[error(
        "chain spans z = {:.1}..{:.1} um but the segmented region is {:.1}..{:.1} um",
        chain[0], chain[1], segmented[0], segmented[1]
    )]
    Coverage { chain: [f64; 2], segmented: [f64; 2] },
    #[error("mirror tying needs targets symmetric about z = 0 (center is {0} um)")]
    Asymmetric(f64),
    #[error("no control electrode lies near the chain")]
    NoElectrodes,
    #[error("{block:?} residual {residual:.3e} exceeds its cap {cap:.3e}")]
    Infeasible { block: Block, residual: f64, cap: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error(transparent)]
    SingleIon(#[from] SingleIonError),
}

/// Condition blocks. Quadrupole rows come in threes per ion:
/// `Hxx - Hyy`, `Hxy` and `Hxx + Hyy` of the radial dc Hessian.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Block {
    AxialForce,
    Quadrupole,
    NullAlignment,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::AxialForce, Block::Quadrupole, Block::NullAlignment];

    /// Natural row units in SI and the factor from the internal um units.
    pub fn unit(self) -> (&'static str, f64) {
        match self {
            Block::AxialForce | Block::NullAlignment => ("V/m", 1e6),
            Block::Quadrupole => ("V/m^2", 1e12),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockWeights {
    pub axial_force: f64,
    pub quadrupole: f64,
    pub null_alignment: f64,
}

impl Default for BlockWeights {
    fn default() -> Self {
        Self {
            axial_force: 1.0,
            quadrupole: 0.1,
            null_alignment: 1.0,
        }
    }
}

impl BlockWeights {
    pub fn get(&self, b: Block) -> f64 {
        match b {
            Block::AxialForce => self.axial_force,
            Block::Quadrupole => self.quadrupole,
            Block::NullAlignment => self.null_alignment,
        }
    }
}

/// Caps on the RMS block residuals in SI units (see [`Block::unit`]).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualCaps {
    pub axial_force: Option<f64>,
    pub quadrupole: Option<f64>,
    pub null_alignment: Option<f64>,
}

impl ResidualCaps {
    pub fn get(&self, b: Block) -> Option<f64> {
        match b {
            Block::AxialForce => self.axial_force,
            Block::Quadrupole => self.quadrupole,
            Block::NullAlignment => self.null_alignment,
        }
    }
}

/// Radial dc quadrupole required at every ion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadrupoleTarget {
    /// `f_stiff^2 - f_soft^2` produced by the dc quadrupole alone, MHz^2.
    pub splitting_mhz2: f64,
    /// Stiff radial axis, degrees from +y toward +x.
    pub angle_deg: f64,
}

impl Default for QuadrupoleTarget {
    fn default() -> Self {
        Self {
            splitting_mhz2: 10.0,
            angle_deg: 0.7,
        }
    }
}

fn default_bound() -> f64 {
    20.0
}

fn default_extra() -> usize {
    3
}

fn yes() -> bool {
    true
}

/// What the synthesized voltages must achieve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainTargets {
    pub n_ions: usize,
    /// um
    pub spacing: f64,
    /// um
    #[serde(default)]
    pub center: f64,
    #[serde(default)]
    pub quadrupole: QuadrupoleTarget,
    /// Axial frequency fixing the radial trace when it cannot be inferred
    /// from the Coulomb force profile (single ions), MHz.
    #[serde(default)]
    pub axial_mhz: Option<f64>,
    /// V
    #[serde(default = "default_bound")]
    pub voltage_bound: f64,
    /// Tie segment `i` to its axial mirror image.
    #[serde(default = "yes")]
    pub symmetric: bool,
    /// Segments beyond each chain end that join the fit.
    #[serde(default = "default_extra")]
    pub extra_segments: usize,
    #[serde(default)]
    pub weights: BlockWeights,
    /// `lambda / sigma_max^2` of the weighted matrix.
    #[serde(default)]
    pub regularization: Option<f64>,
    #[serde(default)]
    pub caps: ResidualCaps,
}

impl ChainTargets {
    pub fn new(n_ions: usize, spacing: f64) -> Self {
        Self {
            n_ions,
            spacing,
            center: 0.0,
            quadrupole: QuadrupoleTarget::default(),
            axial_mhz: None,
            voltage_bound: default_bound(),
            symmetric: true,
            extra_segments: default_extra(),
            weights: BlockWeights::default(),
            regularization: None,
            caps: ResidualCaps::default(),
        }
    }

    /// One ion at `z = 0` with the given axial frequency and radial quadrupole.
    pub fn single_ion(axial_mhz: f64, quadrupole: QuadrupoleTarget) -> Self {
        Self {
            axial_mhz: Some(axial_mhz),
            quadrupole,
            ..Self::new(1, 1.0)
        }
    }

    pub fn positions(&self) -> Vec<f64> {
        equal_spacing(self.n_ions, self.spacing, self.center)
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        let bad = |field, reason: String| Err(SynthesisError::Targets { field, reason });
        if self.n_ions == 0 {
            return bad("n_ions", "must be at least 1".into());
        }
        if !(self.spacing.is_finite() && self.spacing > 0.0) {
            return bad("spacing", format!("must be positive, got {}", self.spacing));
        }
        if !self.center.is_finite() {
            return bad("center", "must be finite".into());
        }
        if !(self.voltage_bound.is_finite() && self.voltage_bound > 0.0) {
            return bad("voltage_bound", format!("must be positive, got {}", self.voltage_bound));
        }
        if !self.quadrupole.splitting_mhz2.is_finite() || !self.quadrupole.angle_deg.is_finite() {
            return bad("quadrupole", "must be finite".into());
        }
        if let Some(f) = self.axial_mhz {
            if !(f.is_finite() && f > 0.0) {
                return bad("axial_mhz", format!("must be positive, got {f}"));
            }
        }
        if let Some(r) = self.regularization {
            if !(r.is_finite() && r >= 0.0) {
                return bad("regularization", format!("must be non-negative, got {r}"));
            }
        }
        for b in Block::ALL {
            if !(self.weights.get(b).is_finite() && self.weights.get(b) >= 0.0) {
                return bad("weights", format!("{b:?} weight must be non-negative"));
            }
        }
        if self.symmetric && self.center != 0.0 {
            return Err(SynthesisError::Asymmetric(self.center));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintRow {
    pub block: Block,
    pub ion: usize,
    pub label: &'static str,
}

/// Assembled problem: `A v = b` in um units, one column per free electrode.
#[derive(Clone, Debug)]
pub struct VoltageSynthesis {
    pub targets: ChainTargets,
    /// Free electrodes, in source order.
    pub electrodes: Vec<String>,
    /// Voltages of every other static electrode, held fixed.
    pub fixed: BTreeMap<String, f64>,
    pub rows: Vec<ConstraintRow>,
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub row_weights: DVector<f64>,
    /// rf null point at every target position.
    pub points: Vec<Point3>,
    /// Unknowns after tying, each a set of columns sharing one voltage.
    pub groups: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockResidual {
    pub block: Block,
    pub unit: &'static str,
    pub rms: f64,
    pub max: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VoltageSolution {
    /// Free electrodes and the fixed ones together.
    pub voltages: BTreeMap<String, f64>,
    #[serde(skip)]
    pub vector: DVector<f64>,
    pub lambda: f64,
    pub residuals: Vec<BlockResidual>,
    /// `|W (A v - b)|`
    pub weighted_residual: f64,
    pub norm: f64,
    pub max_abs_voltage: f64,
    pub converged: bool,
}

impl VoltageSolution {
    pub fn residual(&self, block: Block) -> Option<&BlockResidual> {
        self.residuals.iter().find(|r| r.block == block)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum VoltageSetError {
    #[error("voltage set is not valid JSON: {0}")]
    Json(String),
    #[error("voltage set must be an object of electrode names to volts, optionally under `voltages`")]
    Shape,
    #[error("voltage for `{0}` must be a finite number")]
    Value(String),
}

/// Electrode voltages by lead name. Files hold either the bare map or an
/// object with the map under `voltages` (other keys are ignored).
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VoltageSet {
    pub voltages: BTreeMap<String, f64>,
}

impl VoltageSet {
    pub fn from_json(text: &str) -> Result<Self, VoltageSetError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| VoltageSetError::Json(e.to_string()))?;
        let obj = value.as_object().ok_or(VoltageSetError::Shape)?;
        let map = match obj.get("voltages") {
            Some(inner) => inner.as_object().ok_or(VoltageSetError::Shape)?,
            None => obj,
        };
        let mut voltages = BTreeMap::new();
        for (name, v) in map {
            match v.as_f64() {
                Some(x) if x.is_finite() => {
                    voltages.insert(name.clone(), x);
                }
                _ => return Err(VoltageSetError::Value(name.clone())),
            }
        }
        Ok(Self { voltages })
    }
}

/// Segment index range taking part in the fit, plus the coverage check.
fn active_segments(params: &TrapParams, zs: &[f64], extra: usize) -> Result<(usize, usize), SynthesisError> {
    let n = params.n_segments_per_side;
    let (zmin, zmax) = (zs[0], zs[zs.len() - 1]);
    let (lo_edge, hi_edge) = (params.segment_span(0).0, params.segment_span(n - 1).1);
    if zmin < lo_edge || zmax > hi_edge {
        return Err(SynthesisError::Coverage {
            chain: [zmin, zmax],
            segmented: [lo_edge, hi_edge],
        });
    }
    let half = 0.5 * params.segment_pitch();
    let spanning: Vec<usize> = (0..n)
        .filter(|&i| {
            let (a, b) = params.segment_span(i);
            b >= zmin - half && a <= zmax + half
        })
        .collect();
    let (first, last) = (spanning[0], spanning[spanning.len() - 1]);
    Ok((first.saturating_sub(extra), (last + extra).min(n - 1)))
}

/// Per-ion radial trace target `-Hzz`, V/um^2, from the axial field the
/// chain needs. `None` where no estimate exists.
fn trace_targets(zs: &[f64], axial_field: &[f64], single: Option<f64>) -> Vec<Option<f64>> {
    let n = zs.len();
    if n == 1 {
        return vec![single.map(|k| -k)];
    }
    (0..n)
        .map(|i| {
            let d = if i == 0 {
                (axial_field[1] - axial_field[0]) / (zs[1] - zs[0])
            } else if i == n - 1 {
                (axial_field[n - 1] - axial_field[n - 2]) / (zs[n - 1] - zs[n - 2])
            } else {
                (axial_field[i + 1] - axial_field[i - 1]) / (zs[i + 1] - zs[i - 1])
            };
            Some(-d)
        })
        .collect()
}

impl VoltageSynthesis {
    /// Constraint rows at the target positions.
    pub fn build(pf: &PotentialField, params: &TrapParams, targets: &ChainTargets) -> Result<Self, SynthesisError> {
        targets.validate()?;
        Self::build_at(pf, params, targets, &targets.positions())
    }

    /// Constraint rows with the ions at `zs` (sorted), Coulomb forces included.
    pub fn build_at(
        pf: &PotentialField,
        params: &TrapParams,
        targets: &ChainTargets,
        zs: &[f64],
    ) -> Result<Self, SynthesisError> {
        let (lo, hi) = active_segments(params, zs, targets.extra_segments)?;
        let source = pf.source();
        let infos = source.electrodes();
        let n_seg = params.n_segments_per_side;
        let free: Vec<usize> = (0..infos.len())
            .filter(|&e| match infos[e].role {
                ElectrodeRole::DcSegment { index, .. } => (lo..=hi).contains(&index),
                ElectrodeRole::DcDiagonal { .. } => true,
                _ => false,
            })
            .collect();
        if free.is_empty() {
            return Err(SynthesisError::NoElectrodes);
        }
        let electrodes: Vec<String> = free.iter().map(|&e| infos[e].name.clone()).collect();
        let groups = tie_groups(infos, &free, n_seg, targets.symmetric);

        let mut fixed_vec = pf.static_voltages().to_vec();
        for &e in &free {
            fixed_vec[e] = 0.0;
        }
        let fixed = infos
            .iter()
            .zip(&fixed_vec)
            .filter(|(i, &v)| i.role.is_dc_control() && v != 0.0)
            .map(|(i, &v)| (i.name.clone(), v))
            .collect();
        let mut weights: Vec<Vec<f64>> = free
            .iter()
            .map(|&e| {
                let mut w = vec![0.0; infos.len()];
                w[e] = 1.0;
                w
            })
            .collect();
        weights.push(fixed_vec);
        let sup = source.superpose(&weights);

        let n = zs.len();
        let q = pf.charge_e();
        let points: Vec<Point3> = zs.iter().map(|&z| find_rf_null(pf, z)).collect::<Result<_, _>>()?;
        let flat = DVector::from_iterator(3 * n, points.iter().flat_map(|p| [p.x, p.y, p.z]));
        let coulomb = ChainEnergy::new(pf).coulomb_forces(&flat);

        let samples: Vec<Vec<FieldSample>> = points
            .iter()
            .map(|p| sup.sample(p, Derivs::Hessian))
            .collect::<Result<_, _>>()?;
        let mut axial_field = Vec::with_capacity(n);
        for (i, p) in points.iter().enumerate() {
            let (_, g) = pf.pseudo_gradient(p)?;
            axial_field.push((coulomb[i].z - g.z) / q);
        }
        let single = targets.axial_mhz.map(|f| mhz_to_curvature(f, pf.species().mass) / q);
        let traces = trace_targets(zs, &axial_field, single);

        let quad = mhz_to_curvature(1.0, pf.species().mass) * targets.quadrupole.splitting_mhz2 / q;
        let two_theta = 2.0 * targets.quadrupole.angle_deg.to_radians();
        let diff_target = -quad * two_theta.cos();
        let xy_target = 0.5 * quad * two_theta.sin();

        let k = free.len();
        let mut rows = Vec::with_capacity(6 * n);
        let mut a_rows: Vec<Vec<f64>> = Vec::with_capacity(6 * n);
        let mut b = Vec::with_capacity(6 * n);
        let mut usable = Vec::with_capacity(6 * n);
        for i in 0..n {
            let s = &samples[i];
            let f = &s[k];
            let mut push = |block, label, coeff: &dyn Fn(&FieldSample) -> f64, target: Option<f64>| {
                rows.push(ConstraintRow { block, ion: i, label });
                a_rows.push(s[..k].iter().map(coeff).collect());
                b.push(target.unwrap_or(0.0) - coeff(f));
                usable.push(target.is_some());
            };
            push(Block::AxialForce, "dphi/dz", &|x| x.grad.z, Some(axial_field[i]));
            push(Block::Quadrupole, "Hxx-Hyy", &|x| x.hess[(0, 0)] - x.hess[(1, 1)], Some(diff_target));
            push(Block::Quadrupole, "Hxy", &|x| x.hess[(0, 1)], Some(xy_target));
            push(Block::Quadrupole, "Hxx+Hyy", &|x| x.hess[(0, 0)] + x.hess[(1, 1)], traces[i]);
            push(Block::NullAlignment, "dphi/dx", &|x| x.grad.x, Some(0.0));
            push(Block::NullAlignment, "dphi/dy", &|x| x.grad.y, Some(0.0));
        }
        let m = rows.len();
        let matrix = DMatrix::from_fn(m, k, |r, c| a_rows[r][c]);
        let rhs = DVector::from_vec(b);

        let mut row_weights = DVector::zeros(m);
        for block in Block::ALL {
            let idx: Vec<usize> = (0..m).filter(|&r| rows[r].block == block && usable[r]).collect();
            if idx.is_empty() {
                continue;
            }
            let ms = idx.iter().map(|&r| matrix.row(r).norm_squared()).sum::<f64>() / idx.len() as f64;
            if ms > 0.0 {
                let w = targets.weights.get(block) / ms.sqrt();
                for r in idx {
                    row_weights[r] = w;
                }
            }
        }
        Ok(Self {
            targets: targets.clone(),
            electrodes,
            fixed,
            rows,
            matrix,
            rhs,
            row_weights,
            points,
            groups,
        })
    }

    /// `A v - b`, exactly affine in `v`.
    pub fn residual(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.matrix * v - &self.rhs
    }

    pub fn weighted_residual(&self, v: &DVector<f64>) -> f64 {
        self.residual(v).component_mul(&self.row_weights).norm()
    }

    /// Columns to unknowns: `v = P w`.
    pub fn tying(&self) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(self.electrodes.len(), self.groups.len());
        for (g, cols) in self.groups.iter().enumerate() {
            for &c in cols {
                p[(c, g)] = 1.0;
            }
        }
        p
    }

    pub fn block_residuals(&self, v: &DVector<f64>) -> Vec<BlockResidual> {
        let r = self.residual(v);
        Block::ALL
            .iter()
            .filter_map(|&block| {
                let (unit, scale) = block.unit();
                let vals: Vec<f64> = (0..r.len())
                    .filter(|&i| self.rows[i].block == block && self.row_weights[i] > 0.0)
                    .map(|i| r[i] * scale)
                    .collect();
                (!vals.is_empty()).then(|| BlockResidual {
                    block,
                    unit,
                    rms: (vals.iter().map(|x| x * x).sum::<f64>() / vals.len() as f64).sqrt(),
                    max: vals.iter().fold(0.0, |a, x| a.max(x.abs())),
                })
            })
            .collect()
    }

    /// Solve with the targets' regularization, bound and caps.
    pub fn solve(&self) -> Result<VoltageSolution, SynthesisError> {
        let sol = self.solve_with(self.targets.regularization, self.targets.voltage_bound, None)?;
        for r in &sol.residuals {
            if let Some(cap) = self.targets.caps.get(r.block) {
                if r.rms > cap {
                    return Err(SynthesisError::Infeasible {
                        block: r.block,
                        residual: r.rms,
                        cap,
                    });
                }
            }
        }
        Ok(sol)
    }

    /// Minimize `|W (A v - b)|^2 + lambda |v|^2` with `|v| <= bound`.
    /// `relative_lambda` is `lambda / sigma_max^2` (default `1e-6`).
    /// Columns listed in `dropped` are held at 0 V.
    pub fn solve_with(
        &self,
        relative_lambda: Option<f64>,
        bound: f64,
        dropped: Option<&[usize]>,
    ) -> Result<VoltageSolution, SynthesisError> {
        let mut p = self.tying();
        if let Some(d) = dropped {
            for &c in d {
                p.row_mut(c).fill(0.0);
            }
        }
        let full = DMatrix::from_fn(self.matrix.nrows(), self.matrix.ncols(), |r, c| {
            self.row_weights[r] * self.matrix[(r, c)]
        });
        // lambda from the untied matrix, so tying and dropping leave it unchanged
        let sigma = full.singular_values().max();
        let wa = full * &p;
        let wb = self.rhs.component_mul(&self.row_weights);
        let lambda = relative_lambda.unwrap_or(1e-6) * sigma * sigma;
        let (m, g) = wa.shape();
        // tied unknowns count once per electrode in |v|^2
        let sizes: Vec<f64> = (0..g).map(|j| p.column(j).sum()).collect();
        let mut aug = DMatrix::zeros(m + g, g);
        aug.rows_mut(0, m).copy_from(&wa);
        for j in 0..g {
            aug[(m + j, j)] = (lambda * sizes[j]).sqrt();
        }
        let mut rhs = DVector::zeros(m + g);
        rhs.rows_mut(0, m).copy_from(&wb);
        let r = bvls(&aug, &rhs, &Bounds::symmetric(g, bound), 1e-12);
        let v = &p * &r.x;
        let mut voltages = self.fixed.clone();
        for (name, &x) in self.electrodes.iter().zip(v.iter()) {
            voltages.insert(name.clone(), x);
        }
        Ok(VoltageSolution {
            voltages,
            lambda,
            residuals: self.block_residuals(&v),
            weighted_residual: self.weighted_residual(&v),
            norm: v.norm(),
            max_abs_voltage: v.amax(),
            converged: r.converged,
            vector: v,
        })
    }

    /// Free electrodes whose removal (held at 0 V, the rest re-solved)
    /// raises the weighted residual by more than [`ACTIVE_THRESHOLD`].
    /// Tied partners are removed and counted together.
    pub fn active_electrodes(&self, solution: &VoltageSolution) -> Result<Vec<String>, SynthesisError> {
        let base = solution.weighted_residual;
        let mut active = Vec::new();
        for cols in &self.groups {
            let trial = self.solve_with(self.targets.regularization, self.targets.voltage_bound, Some(cols))?;
            let floor = 1e-12 * self.rhs.component_mul(&self.row_weights).norm();
            if trial.weighted_residual > (1.0 + ACTIVE_THRESHOLD) * base.max(floor) {
                active.extend(cols.iter().map(|&c| self.electrodes[c].clone()));
            }
        }
        Ok(active)
    }
}

/// Unknown groups over the free columns. With `symmetric`, segment `i` and
/// segment `n - 1 - i` on the same side share one voltage.
fn tie_groups(
    infos: &[crate::source::ElectrodeInfo],
    free: &[usize],
    n_seg: usize,
    symmetric: bool,
) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut seen = vec![false; free.len()];
    for c in 0..free.len() {
        if seen[c] {
            continue;
        }
        seen[c] = true;
        let mut g = vec![c];
        if symmetric {
            if let ElectrodeRole::DcSegment { side, index } = infos[free[c]].role {
                let mirror = ElectrodeRole::DcSegment {
                    side,
                    index: n_seg - 1 - index,
                };
                if let Some(d) = (0..free.len()).find(|&d| !seen[d] && infos[free[d]].role == mirror) {
                    seen[d] = true;
                    g.push(d);
                }
            }
        }
        groups.push(g);
    }
    groups
}

/// Synthesize voltages for `targets` and return the potential they produce.
pub fn synthesize(
    pf: &PotentialField,
    params: &TrapParams,
    targets: &ChainTargets,
) -> Result<(VoltageSynthesis, VoltageSolution, PotentialField), SynthesisError> {
    let vs = VoltageSynthesis::build(pf, params, targets)?;
    let sol = vs.solve()?;
    let drive = pf.drive().clone().with_voltages(sol.voltages.clone());
    let solved = pf.with_drive(drive)?;
    Ok((vs, sol, solved))
}

/// Condition residuals re-measured with the ions at their actual axial
/// positions `zs` under `solved` (the potential with the synthesized voltages).
pub fn remeasure(
    solved: &PotentialField,
    params: &TrapParams,
    synthesis: &VoltageSynthesis,
    solution: &VoltageSolution,
    zs: &[f64],
) -> Result<Vec<BlockResidual>, SynthesisError> {
    let vs = VoltageSynthesis::build_at(&solved_without(solved, synthesis)?, params, &synthesis.targets, zs)?;
    let v = DVector::from_iterator(
        vs.electrodes.len(),
        vs.electrodes.iter().map(|e| solution.voltages.get(e).copied().unwrap_or(0.0)),
    );
    Ok(vs.block_residuals(&v))
}

/// `solved` with the free electrodes zeroed, so that rebuilt rows treat
/// them as unknowns again.
fn solved_without(solved: &PotentialField, synthesis: &VoltageSynthesis) -> Result<PotentialField, SynthesisError> {
    let mut voltages = solved.drive().dc_voltages.clone();
    for e in &synthesis.electrodes {
        voltages.remove(e);
    }
    let drive = solved.drive().clone().with_voltages(voltages);
    Ok(solved.with_drive(drive)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{DriveConfig, IonSpecies};
    use crate::units::coulomb_ev_um;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn toy_field(bias: f64) -> (PotentialField, TrapParams) {
        let params = TrapParams::default();
        let src = Arc::new(toy::segmented_toy(&params));
        let pf = PotentialField::new(src, IonSpecies::yb171(), DriveConfig::nominal().with_bias(bias)).unwrap();
        (pf, params)
    }

    #[test]
    fn row_and_column_counts() {
        let (pf, params) = toy_field(-3.0);
        let vs = VoltageSynthesis::build(&pf, &params, &ChainTargets::new(20, 10.0)).unwrap();
        assert_eq!(vs.rows.len(), 120);
        let count = |b| vs.rows.iter().filter(|r| r.block == b).count();
        assert_eq!(
            (count(Block::AxialForce), count(Block::Quadrupole), count(Block::NullAlignment)),
            (20, 60, 40)
        );
        assert!(vs.electrodes.len() <= 26);
        assert_eq!(vs.electrodes.len(), 22);
        // ten segment pairs per side plus two untied diagonals
        assert_eq!(vs.groups.len(), 12);
    }

    #[test]
    fn single_ion_axial_rhs_vanishes() {
        let (pf, params) = toy_field(0.0);
        let t = ChainTargets::single_ion(1.0, QuadrupoleTarget::default());
        let vs = VoltageSynthesis::build(&pf, &params, &t).unwrap();
        assert!(vs.rhs[0].abs() < 1e-15, "{}", vs.rhs[0]);
    }

    #[test]
    fn two_ion_coulomb_rhs() {
        let (pf, params) = toy_field(0.0);
        let d = 8.0;
        let vs = VoltageSynthesis::build(&pf, &params, &ChainTargets::new(2, d)).unwrap();
        let e = crate::units::ELEMENTARY_CHARGE;
        let f = coulomb_ev_um(e, e) / (d * d);
        // the left ion is pushed toward -z, so the dc field must push it back
        assert!((vs.rhs[0] + f).abs() < 1e-9 * f);
        assert!((vs.rhs[6] - f).abs() < 1e-9 * f);
    }

    #[test]
    fn chain_beyond_segments_is_a_coverage_error() {
        let (pf, params) = toy_field(0.0);
        let e = VoltageSynthesis::build(&pf, &params, &ChainTargets::new(80, 10.0)).unwrap_err();
        assert!(matches!(e, SynthesisError::Coverage { .. }), "{e}");
        let mut t = ChainTargets::new(3, 10.0);
        t.center = 5.0;
        assert!(matches!(VoltageSynthesis::build(&pf, &params, &t), Err(SynthesisError::Asymmetric(_))));
        t.symmetric = false;
        assert!(VoltageSynthesis::build(&pf, &params, &t).is_ok());
    }

    #[test]
    fn residual_is_affine() {
        let (pf, params) = toy_field(-3.0);
        let vs = VoltageSynthesis::build(&pf, &params, &ChainTargets::new(5, 10.0)).unwrap();
        let k = vs.electrodes.len();
        let u = DVector::from_fn(k, |i, _| (i as f64 * 0.7).sin() * 3.0);
        let v = DVector::from_fn(k, |i, _| (i as f64 * 1.3).cos() * 2.0);
        let lhs = vs.residual(&(&u + &v));
        let rhs = vs.residual(&u) + vs.residual(&v) - vs.residual(&DVector::zeros(k));
        assert!((&lhs - &rhs).amax() <= 1e-12 * lhs.amax());
    }

    #[test]
    fn tied_and_untied_agree_for_symmetric_targets() {
        let (pf, params) = toy_field(-3.0);
        let mut t = ChainTargets::new(6, 10.0);
        let tied = VoltageSynthesis::build(&pf, &params, &t).unwrap().solve().unwrap();
        t.symmetric = false;
        let free = VoltageSynthesis::build(&pf, &params, &t).unwrap().solve().unwrap();
        for (name, v) in &tied.voltages {
            assert!((v - free.voltages[name]).abs() < 1e-6, "{name}: {v} vs {}", free.voltages[name]);
        }
    }

    #[test]
    fn caps_raise_infeasible() {
        let (pf, params) = toy_field(-3.0);
        let mut t = ChainTargets::new(6, 10.0);
        t.voltage_bound = 1e-3;
        t.caps.axial_force = Some(1.0);
        let vs = VoltageSynthesis::build(&pf, &params, &t).unwrap();
        assert!(matches!(vs.solve(), Err(SynthesisError::Infeasible { block: Block::AxialForce, .. })));
    }

    fn random_problem(entries: &[f64], rhs: &[f64], m: usize, k: usize) -> VoltageSynthesis {
        let rows = (0..m)
            .map(|i| ConstraintRow {
                block: Block::ALL[i % 3],
                ion: i / 3,
                label: "r",
            })
            .collect();
        VoltageSynthesis {
            targets: ChainTargets::new(1, 1.0),
            electrodes: (0..k).map(|i| format!("e{i}")).collect(),
            fixed: BTreeMap::new(),
            rows,
            matrix: DMatrix::from_row_slice(m, k, entries),
            rhs: DVector::from_row_slice(rhs),
            row_weights: DVector::from_element(m, 1.0),
            points: Vec::new(),
            groups: (0..k).map(|i| vec![i]).collect(),
        }
    }

    #[test]
    fn unused_column_is_inactive() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut entries: Vec<f64> = (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for r in 0..12 {
            entries[r * 5 + 4] = 0.0;
        }
        let a = DMatrix::from_row_slice(12, 5, &entries);
        let x = DVector::from_vec(vec![1.0, -1.0, 0.5, 2.0, 0.0]);
        let noise = DVector::from_fn(12, |i, _| 0.01 * (i as f64 * 0.3).cos());
        let rhs = &a * x + noise;
        let vs = random_problem(&entries, rhs.as_slice(), 12, 5);
        let sol = vs.solve_with(None, 20.0, None).unwrap();
        assert_eq!(vs.active_electrodes(&sol).unwrap(), ["e0", "e1", "e2", "e3"]);
    }

    #[test]
    fn voltage_set_forms() {
        let bare = VoltageSet::from_json(r#"{"dc_left_00": 1.5, "diag_right": -2}"#).unwrap();
        let wrapped = VoltageSet::from_json(r#"{"meta": {"version": "x"}, "voltages": {"dc_left_00": 1.5, "diag_right": -2}}"#).unwrap();
        assert_eq!(bare, wrapped);
        assert_eq!(VoltageSet::from_json("[1]"), Err(VoltageSetError::Shape));
        assert_eq!(VoltageSet::from_json(r#"{"a": "x"}"#), Err(VoltageSetError::Value("a".into())));
    }

    #[test]
    fn zero_rhs_gives_zero_voltages() {
        let entries: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let vs = random_problem(&entries, &[0.0; 8], 8, 5);
        let s = vs.solve_with(Some(1e-6), 20.0, None).unwrap();
        assert_eq!(s.norm, 0.0);
    }

    #[test]
    fn square_system_interpolates() {
        let entries = [2.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 4.0];
        let vs = random_problem(&entries, &[1.0, -2.0, 0.5], 3, 3);
        let s = vs.solve_with(Some(0.0), f64::INFINITY, None).unwrap();
        assert!(s.weighted_residual < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn lambda_monotone(
            entries in proptest::collection::vec(-1.0..1.0f64, 60),
            rhs in proptest::collection::vec(-3.0..3.0f64, 12),
            bound in 0.2..5.0f64,
        ) {
            let vs = random_problem(&entries, &rhs, 12, 5);
            let mut last: Option<VoltageSolution> = None;
            for exp in [-8.0, -6.0, -4.0, -2.0, -1.0, 0.0, 1.0] {
                let s = vs.solve_with(Some(10f64.powf(exp)), bound, None).unwrap();
                prop_assert!(s.max_abs_voltage <= bound * (1.0 + 1e-12));
                if let Some(p) = &last {
                    prop_assert!(s.norm <= p.norm * (1.0 + 1e-9) + 1e-12, "norm {} after {}", s.norm, p.norm);
                    prop_assert!(s.weighted_residual >= p.weighted_residual * (1.0 - 1e-9) - 1e-12);
                }
                last = Some(s);
            }
        }
    }
}
