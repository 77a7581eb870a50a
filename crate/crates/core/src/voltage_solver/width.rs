//! Spacing error against segment width: the full pipeline (geometry, mesh,
//! basis, voltage synthesis, chain equilibrium) once per width.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{solve_equilibrium, EquilibriumOptions};
use crate::electrostatics::{hex, load_or_solve, BemError};
use crate::geometry::{build_symmetric_trap, GeometryError, MeshOptions, TrapParams};
use crate::potentials::{DriveConfig, IonSpecies, PotentialError, PotentialField};

use super::{synthesize, ChainTargets, VoltageSynthesis};

#[derive(Debug, Error)]
pub enum WidthStudyError {
    #[error("segment width {width} um: {source}")]
    Geometry { width: f64, source: GeometryError },
    #[error("segment width {width} um: {source}")]
    Basis { width: f64, source: BemError },
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthStudy {
    /// um
    pub widths: Vec<f64>,
    pub chains: Vec<usize>,
    /// um
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default)]
    pub base: TrapParams,
    #[serde(default)]
    pub mesh: MeshOptions,
    #[serde(default = "DriveConfig::nominal_biased")]
    pub drive: DriveConfig,
    #[serde(default)]
    pub species: IonSpecies,
    /// Everything but `n_ions` and `spacing` is taken from here.
    #[serde(default = "default_template")]
    pub template: ChainTargets,
}

fn default_spacing() -> f64 {
    10.0
}

fn default_template() -> ChainTargets {
    ChainTargets::new(1, default_spacing())
}

impl WidthStudy {
    pub fn new(widths: Vec<f64>, chains: Vec<usize>) -> Self {
        Self {
            widths,
            chains,
            spacing: default_spacing(),
            base: TrapParams::default(),
            mesh: MeshOptions::default(),
            drive: DriveConfig::nominal_biased(),
            species: IonSpecies::default(),
            template: default_template(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WidthRow {
    pub segment_width: f64,
    pub n_ions: usize,
    pub n_segments_per_side: usize,
    pub active_electrodes: Option<usize>,
    /// um; absent for single ions and failed rows.
    pub max_spacing_error: Option<f64>,
    pub worst_at_end: Option<bool>,
    pub max_abs_voltage: Option<f64>,
    pub content_hash: String,
    pub error: Option<String>,
}

impl WidthRow {
    pub const CSV_HEADER: &'static str =
        "segment_width_um,n_ions,n_segments_per_side,active_electrodes,max_spacing_error_um,max_abs_voltage_V,error";

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.segment_width,
            self.n_ions,
            self.n_segments_per_side,
            self.active_electrodes.map(|n| n.to_string()).unwrap_or_default(),
            opt(self.max_spacing_error),
            opt(self.max_abs_voltage),
            self.error.as_deref().unwrap_or("").replace(',', ";"),
        )
    }
}

/// Segments per side for a chain of length `chain_length`: those spanning
/// it plus `extra` beyond each end, as many as fit in the slot.
pub fn segments_for(base: &TrapParams, width: f64, chain_length: f64, extra: usize) -> usize {
    let pitch = width + base.electrode_gap;
    let need = (chain_length / pitch).ceil() as usize + 1 + 2 * extra;
    let fit = (base.slot_length / pitch).floor() as usize;
    need.min(fit).max(1)
}

/// Trap parameters and mesh options for one width.
pub fn width_geometry(study: &WidthStudy, width: f64) -> (TrapParams, MeshOptions) {
    let longest = study.chains.iter().copied().max().unwrap_or(1);
    let length = (longest.saturating_sub(1)) as f64 * study.spacing;
    let mut params = study.base.clone();
    params.segment_width = width;
    params.n_segments_per_side = segments_for(&study.base, width, length, study.template.extra_segments);
    let mut mesh = study.mesh.clone();
    mesh.refine_half_length = mesh.refine_half_length.max(0.5 * length + params.segment_pitch());
    (params, mesh)
}

pub fn width_study(study: &WidthStudy, cache: Option<&Path>) -> Result<Vec<WidthRow>, WidthStudyError> {
    let per_width: Vec<Result<Vec<WidthRow>, WidthStudyError>> =
        study.widths.par_iter().map(|&w| one_width(study, w, cache)).collect();
    let mut rows = Vec::new();
    for r in per_width {
        rows.extend(r?);
    }
    Ok(rows)
}

fn one_width(study: &WidthStudy, width: f64, cache: Option<&Path>) -> Result<Vec<WidthRow>, WidthStudyError> {
    let (params, mesh) = width_geometry(study, width);
    let geometry = build_symmetric_trap(&params).map_err(|source| WidthStudyError::Geometry { width, source })?;
    let solved = load_or_solve(&geometry, &mesh, cache).map_err(|source| WidthStudyError::Basis { width, source })?;
    let pf = PotentialField::new(solved.basis.clone(), study.species.clone(), study.drive.clone())?;
    let hash = hex(&solved.content_hash);
    Ok(study
        .chains
        .iter()
        .map(|&n| chain_row(study, &pf, &params, n, width, &hash))
        .collect())
}

fn chain_row(study: &WidthStudy, pf: &PotentialField, params: &TrapParams, n: usize, width: f64, hash: &str) -> WidthRow {
    let mut row = WidthRow {
        segment_width: width,
        n_ions: n,
        n_segments_per_side: params.n_segments_per_side,
        active_electrodes: None,
        max_spacing_error: None,
        worst_at_end: None,
        max_abs_voltage: None,
        content_hash: hash.to_string(),
        error: None,
    };
    let targets = ChainTargets {
        n_ions: n,
        spacing: study.spacing,
        ..study.template.clone()
    };
    let result = (|| -> Result<(), String> {
        let (vs, sol, solved): (VoltageSynthesis, _, PotentialField) =
            synthesize(pf, params, &targets).map_err(|e| e.to_string())?;
        row.max_abs_voltage = Some(sol.max_abs_voltage);
        row.active_electrodes = Some(vs.active_electrodes(&sol).map_err(|e| e.to_string())?.len());
        let chain = solve_equilibrium(&solved, n, study.spacing, targets.center, &EquilibriumOptions::default())
            .map_err(|e| e.to_string())?;
        if n >= 2 {
            let dev = &chain.spacing_deviations;
            let worst = (0..dev.len()).max_by(|&a, &b| dev[a].abs().total_cmp(&dev[b].abs())).unwrap();
            row.max_spacing_error = Some(chain.max_spacing_error());
            row.worst_at_end = Some(worst == 0 || worst == dev.len() - 1);
        }
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("width {width} um, {n} ions: {e}");
        row.error = Some(e);
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_counts() {
        let base = TrapParams::default();
        assert_eq!(segments_for(&base, 60.0, 190.0, 3), 10);
        assert_eq!(segments_for(&base, 60.0, 490.0, 3), 15);
        // only three 505 um pitches fit in a 2000 um slot
        assert_eq!(segments_for(&base, 500.0, 190.0, 3), 3);
        let study = WidthStudy::new(vec![30.0], vec![1, 20]);
        let (p, m) = width_geometry(&study, 30.0);
        assert!(p.validate().is_ok());
        assert_eq!(p.n_segments_per_side, 13);
        assert!(m.refine_half_length >= 150.0);
    }

    #[test]
    fn csv_row_shape() {
        let row = WidthRow {
            segment_width: 60.0,
            n_ions: 1,
            n_segments_per_side: 10,
            active_electrodes: Some(4),
            max_spacing_error: None,
            worst_at_end: None,
            max_abs_voltage: Some(3.0),
            content_hash: "ab".into(),
            error: None,
        };
        assert_eq!(row.csv().split(',').count(), WidthRow::CSV_HEADER.split(',').count());
        assert!(row.csv().contains(",,"));
    }
}
