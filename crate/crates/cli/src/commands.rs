use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use trapforge::chain::{chain_metrics, normal_modes, solve_equilibrium, solve_from, ChainSolution, EquilibriumOptions};
use trapforge::electrostatics::grid::basis_grid_csv;
use trapforge::electrostatics::{cache_dir, hex, load_or_solve, BasisSet};
use trapforge::geometry::{build_symmetric_trap, validate, ElectrodeRole, Geometry, MeshOptions, TrapParams};
use trapforge::potentials::{max_abs_eigenvalue, DriveConfig, PotentialField, PotentialKind};
use trapforge::single_ion::{
    find_minimum, find_rf_null, secular_modes, solve_compensation, trap_depth, Compensation, DepthResult,
    EscapeClass, NullSearch, SecularModes,
};
use trapforge::voltage_solver::width::{width_study, WidthRow, WidthStudy};
use trapforge::voltage_solver::{synthesize, BlockResidual, ChainTargets, VoltageSet};
use trapforge::Vector3;

use crate::config::{GridKind, Loaded, RunConfig, SweepParameter};
use crate::error::{io_error, CliError};
use crate::output::{Meta, OutDir};

/// Shared state of one invocation.
pub struct Ctx {
    pub loaded: Loaded,
    pub out: OutDir,
    pub cache: Option<PathBuf>,
    pub resolution: Option<f64>,
    pub seed: Option<u64>,
    pub command: String,
}

impl Ctx {
    fn config(&self) -> &RunConfig {
        &self.loaded.config
    }

    fn config_path(&self) -> PathBuf {
        self.loaded.path.clone().unwrap_or_default()
    }

    fn missing(&self, block: &str) -> CliError {
        CliError::Config {
            path: self.config_path(),
            field: Some(block.into()),
            message: format!("`{}` needs a `{block}` block in the config", self.command),
        }
    }

    pub fn meta(&self, basis_hash: Option<String>) -> Meta {
        Meta {
            tool: "trapforge",
            version: trapforge::VERSION,
            command: self.command.clone(),
            input_hash: self.loaded.input_hash.clone(),
            basis_hash,
            seed: self.seed,
        }
    }

    fn params(&self) -> Result<TrapParams, CliError> {
        let p = self.config().geometry.clone().unwrap_or_default();
        p.validate()?;
        Ok(p)
    }

    fn mesh(&self) -> MeshOptions {
        let mut m = self.config().mesh.clone();
        if let Some(r) = self.resolution.or(self.config().resolution) {
            m.resolution = r;
        }
        m
    }

    fn basis(&self, params: &TrapParams) -> Result<(Arc<BasisSet>, String), CliError> {
        let g = build_symmetric_trap(params)?;
        let solved = load_or_solve(&g, &self.mesh(), self.cache.as_deref())?;
        Ok((solved.basis, hex(&solved.content_hash)))
    }

    fn field(&self, basis: Arc<BasisSet>, drive: DriveConfig) -> Result<PotentialField, CliError> {
        Ok(PotentialField::new(basis, self.config().species.clone(), drive)?)
    }

    /// Voltages from `path` laid over the configured drive.
    fn drive_with(&mut self, path: Option<&Path>) -> Result<DriveConfig, CliError> {
        let mut drive = self.config().drive.clone();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(io_error(p))?;
            self.loaded.add_input(text.as_bytes());
            let set = VoltageSet::from_json(&text).map_err(|source| CliError::VoltageSet {
                path: p.to_path_buf(),
                source,
            })?;
            drive.dc_voltages.extend(set.voltages);
        }
        Ok(drive)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        RunConfig::resolve(self.loaded.path.as_deref(), p)
    }
}

/// Cache directory: explicit, else config, else the environment override.
pub fn cache_for(flag: Option<&Path>, config: &RunConfig) -> Option<PathBuf> {
    cache_dir(flag.or(config.cache.as_deref()))
}

#[derive(Serialize)]
struct ElectrodeSummary<'a> {
    name: &'a str,
    role: ElectrodeRole,
    surfaces: usize,
    /// um^2
    area: f64,
}

fn summarize(g: &Geometry) -> Vec<ElectrodeSummary<'_>> {
    g.electrodes
        .iter()
        .map(|e| ElectrodeSummary {
            name: &e.name,
            role: e.role,
            surfaces: e.surfaces.len(),
            area: e.area(),
        })
        .collect()
}

pub fn geometry_build(ctx: &mut Ctx) -> Result<(), CliError> {
    let params = ctx.params()?;
    let g = build_symmetric_trap(&params)?;
    #[derive(Serialize)]
    struct Body<'a> {
        params: &'a TrapParams,
        electrodes: Vec<ElectrodeSummary<'a>>,
        geometry: &'a Geometry,
    }
    let meta = ctx.meta(None);
    ctx.out.write_json(
        "geometry.json",
        &meta,
        &Body {
            params: &params,
            electrodes: summarize(&g),
            geometry: &g,
        },
    )?;
    Ok(())
}

pub fn geometry_validate(ctx: &mut Ctx) -> Result<(), CliError> {
    let params = ctx.params()?;
    let g = build_symmetric_trap(&params)?;
    let report = validate(&g);
    #[derive(Serialize)]
    struct Body<'a, R: Serialize> {
        ok: bool,
        report: &'a R,
    }
    let ok = report.failures.is_empty();
    let meta = ctx.meta(None);
    ctx.out.write_json("validation.json", &meta, &Body { ok, report: &report })?;
    if ok {
        Ok(())
    } else {
        let list: Vec<String> = report.failures.iter().map(|f| format!("{f:?}")).collect();
        Err(CliError::Validation(list.join("; ")))
    }
}

pub fn basis_solve(ctx: &mut Ctx) -> Result<(), CliError> {
    let params = ctx.params()?;
    let g = build_symmetric_trap(&params)?;
    let solved = load_or_solve(&g, &ctx.mesh(), ctx.cache.as_deref())?;
    #[derive(Serialize)]
    struct Lead<'a> {
        name: &'a str,
        role: ElectrodeRole,
        /// Charge on the electrode at 1 V with all others grounded, C.
        self_charge: f64,
    }
    #[derive(Serialize)]
    struct Body<'a> {
        n_panels: usize,
        from_cache: bool,
        mesh: MeshOptions,
        electrodes: Vec<Lead<'a>>,
    }
    let b = &solved.basis;
    let leads = b
        .mesh()
        .electrodes
        .iter()
        .enumerate()
        .map(|(i, e)| Lead {
            name: &e.name,
            role: e.role,
            self_charge: b.induced_charge(i, i),
        })
        .collect();
    let meta = ctx.meta(Some(hex(&solved.content_hash)));
    ctx.out.write_json(
        "basis.json",
        &meta,
        &Body {
            n_panels: b.mesh().len(),
            from_cache: solved.from_cache,
            mesh: ctx.mesh(),
            electrodes: leads,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SingleIonReport {
    null: [f64; 3],
    minimum: [f64; 3],
    #[serde(rename = "frequencies_MHz")]
    frequencies_mhz: [f64; 3],
    axes: [[f64; 3]; 3],
    angle_deg: f64,
    stable: bool,
    #[serde(rename = "depth_eV", skip_serializing_if = "Option::is_none")]
    depth_ev: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    escape_class: Option<EscapeClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    depth: Option<DepthResult>,
    mathieu_q_max: f64,
    modes: SecularModes,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthesis: Option<Vec<BlockResidual>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    compensation: Option<Compensation>,
    dc_voltages: BTreeMap<String, f64>,
}

pub fn single_ion(ctx: &mut Ctx) -> Result<(), CliError> {
    let params = ctx.params()?;
    let (basis, hash) = ctx.basis(&params)?;
    let block = ctx.config().single_ion.clone();
    let vfile = block.voltages_file.as_ref().map(|p| ctx.resolve(p));
    let drive = ctx.drive_with(vfile.as_deref())?;
    let mut pf = ctx.field(basis, drive)?;
    let mut synthesis = None;
    let meta = ctx.meta(Some(hash));
    if let Some(t) = &block.synthesize {
        let (_, sol, solved) = synthesize(&pf, &params, &t.targets())?;
        ctx.out.write_json("voltages.json", &meta, &VoltageSet { voltages: sol.voltages.clone() })?;
        synthesis = Some(sol.residuals);
        pf = solved;
    }
    let null = find_rf_null(&pf, 0.0)?;
    let minimum = find_minimum(&pf, 0.0, &NullSearch::default())?;
    let modes = secular_modes(&pf, &minimum)?;
    let q = max_abs_eigenvalue(&pf.mathieu_q(&null)?);
    let depth = if block.depth { Some(trap_depth(&pf)?) } else { None };
    let compensation = match block.stray_field {
        Some(s) => Some(solve_compensation(&pf, 0.0, &Vector3::from(s), 20.0)?),
        None => None,
    };
    let report = SingleIonReport {
        null: null.into(),
        minimum: minimum.into(),
        frequencies_mhz: modes.frequencies_mhz,
        axes: modes.axes,
        angle_deg: modes.radial_axis_angle_deg,
        stable: modes.stable,
        depth_ev: depth.as_ref().map(|d| d.depth),
        escape_class: depth.as_ref().map(|d| d.escape_class),
        depth,
        mathieu_q_max: q,
        modes,
        synthesis,
        compensation,
        dc_voltages: pf.drive().dc_voltages.clone(),
    };
    ctx.out.write_json("single_ion.json", &meta, &report)?;
    Ok(())
}

fn energy(sol: &ChainSolution) -> f64 {
    *sol.energy_history.last().expect("history starts with x0")
}

pub fn chain_solve(ctx: &mut Ctx, voltages: Option<PathBuf>) -> Result<(), CliError> {
    let block = ctx.config().chain.clone().ok_or_else(|| ctx.missing("chain"))?;
    let params = ctx.params()?;
    let (basis, hash) = ctx.basis(&params)?;
    let vfile = voltages.or_else(|| block.voltages_file.as_ref().map(|p| ctx.resolve(p)));
    let drive = ctx.drive_with(vfile.as_deref())?;
    let pf = ctx.field(basis, drive)?;
    let opts = EquilibriumOptions::default();
    let mut best = solve_equilibrium(&pf, block.n_ions, block.spacing, block.center, &opts)?;
    if block.starts > 1 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.seed.unwrap_or(0));
        for _ in 1..block.starts {
            let x0 = DVector::from_iterator(
                3 * block.n_ions,
                best.positions.iter().flat_map(|p| {
                    [
                        p[0] + rng.gen_range(-0.5..0.5),
                        p[1] + rng.gen_range(-0.5..0.5),
                        p[2] + rng.gen_range(-0.2..0.2) * block.spacing,
                    ]
                }),
            );
            if let Ok(s) = solve_from(&pf, x0, block.spacing, &opts) {
                if energy(&s) < energy(&best) {
                    best = s;
                }
            }
        }
    }
    let modes = normal_modes(&pf, &best)?;
    let metrics = chain_metrics(&pf, &best)?;
    #[derive(Serialize)]
    struct Body<'a, S: Serialize, M: Serialize> {
        solution: &'a S,
        metrics: &'a M,
        modes_stable: bool,
        #[serde(rename = "frequencies_MHz")]
        frequencies_mhz: &'a [f64],
    }
    let meta = ctx.meta(Some(hash));
    ctx.out.write_json(
        "positions.json",
        &meta,
        &Body {
            solution: &best,
            metrics: &metrics,
            modes_stable: modes.stable,
            frequencies_mhz: &modes.frequencies_mhz,
        },
    )?;
    let mut csv = String::from("index,frequency_MHz,branch\n");
    for (i, (f, b)) in modes.frequencies_mhz.iter().zip(&modes.branches).enumerate() {
        let label = serde_json::to_value(b).expect("branch serializes");
        csv.push_str(&format!("{i},{f:.9},{}\n", label.as_str().unwrap_or_default()));
    }
    ctx.out.write_text("modes.csv", &csv)?;
    Ok(())
}

pub fn voltages_solve(ctx: &mut Ctx) -> Result<(), CliError> {
    let targets: ChainTargets = ctx.config().voltages.clone().ok_or_else(|| ctx.missing("voltages"))?;
    let params = ctx.params()?;
    let (basis, hash) = ctx.basis(&params)?;
    let drive = ctx.drive_with(None)?;
    let pf = ctx.field(basis, drive)?;
    let (vs, sol, _) = synthesize(&pf, &params, &targets)?;
    let active = vs.active_electrodes(&sol)?;
    #[derive(Serialize)]
    struct Body<'a> {
        targets: &'a ChainTargets,
        free_electrodes: &'a [String],
        rows: usize,
        unknowns: usize,
        lambda: f64,
        residuals: &'a [BlockResidual],
        weighted_residual: f64,
        max_abs_voltage: f64,
        converged: bool,
        active_electrodes: &'a [String],
    }
    let meta = ctx.meta(Some(hash));
    ctx.out.write_json("voltages.json", &meta, &VoltageSet { voltages: sol.voltages.clone() })?;
    ctx.out.write_json(
        "voltages_report.json",
        &meta,
        &Body {
            targets: &targets,
            free_electrodes: &vs.electrodes,
            rows: vs.rows.len(),
            unknowns: vs.groups.len(),
            lambda: sol.lambda,
            residuals: &sol.residuals,
            weighted_residual: sol.weighted_residual,
            max_abs_voltage: sol.max_abs_voltage,
            converged: sol.converged,
            active_electrodes: &active,
        },
    )?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct DepthRow {
    pub value: f64,
    #[serde(rename = "depth_eV")]
    pub depth_ev: Option<f64>,
    #[serde(rename = "required_V_for_1eV")]
    pub required_v_for_1ev: Option<f64>,
    pub escape_class: Option<EscapeClass>,
    pub basis_hash: Option<String>,
    pub error: Option<String>,
}

impl DepthRow {
    fn csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let class = self
            .escape_class
            .map(|c| serde_json::to_value(c).expect("class serializes").as_str().unwrap_or_default().to_string())
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.value,
            f(self.depth_ev),
            f(self.required_v_for_1ev),
            class,
            self.basis_hash.as_deref().unwrap_or(""),
            self.error.as_deref().unwrap_or("").replace(',', ";"),
        )
    }
}

/// rf-only depth; depth scales with the square of the rf amplitude.
fn depth_row(ctx: &Ctx, params: &TrapParams, drive: &DriveConfig, value: f64) -> DepthRow {
    let mut row = DepthRow {
        value,
        depth_ev: None,
        required_v_for_1ev: None,
        escape_class: None,
        basis_hash: None,
        error: None,
    };
    let result = (|| -> Result<(), CliError> {
        params.validate()?;
        let (basis, hash) = ctx.basis(params)?;
        row.basis_hash = Some(hash);
        let pf = ctx.field(basis, drive.rf_only())?;
        let d = trap_depth(&pf)?;
        row.depth_ev = Some(d.depth);
        row.required_v_for_1ev = Some(drive.rf_peak / d.depth.sqrt());
        row.escape_class = Some(d.escape_class);
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("sweep value {value}: {e}");
        row.error = Some(e.to_string());
    }
    row
}

pub fn sweep(ctx: &mut Ctx, parameter: Option<String>, values: Option<Vec<f64>>) -> Result<(), CliError> {
    let block = ctx.config().sweep.clone();
    let parameter = match parameter {
        Some(name) => SweepParameter::parse(&name).ok_or_else(|| CliError::Config {
            path: ctx.config_path(),
            field: Some("sweep.parameter".into()),
            message: format!("unknown sweep parameter `{name}`; expected slot_width, oxide_thickness, segment_width or rf_peak"),
        })?,
        None => block.as_ref().map(|b| b.parameter).ok_or_else(|| ctx.missing("sweep"))?,
    };
    let values = values
        .or_else(|| block.as_ref().map(|b| b.values.clone()))
        .ok_or_else(|| ctx.missing("sweep"))?;
    let base = ctx.config().geometry.clone().unwrap_or_default();
    let drive = ctx.config().drive.clone();
    let meta = ctx.meta(None);
    let name = parameter.name();

    if parameter == SweepParameter::SegmentWidth {
        let (chains, spacing) = block.as_ref().map(|b| (b.chains.clone(), b.spacing)).unwrap_or((vec![20, 50], 10.0));
        let mut study = WidthStudy::new(values, chains);
        study.spacing = spacing;
        study.base = base;
        study.mesh = ctx.mesh();
        study.drive = drive;
        study.species = ctx.config().species.clone();
        if let Some(t) = ctx.config().voltages.clone() {
            study.template = t;
        }
        let rows: Vec<WidthRow> = if study.widths.is_empty() { Vec::new() } else { width_study(&study, ctx.cache.as_deref())? };
        let mut csv = format!("{}\n", WidthRow::CSV_HEADER);
        for r in &rows {
            csv.push_str(&r.csv());
            csv.push('\n');
        }
        ctx.out.write_text("sweep.csv", &csv)?;
        ctx.out.write_json("sweep.json", &meta, &serde_json::json!({ "parameter": name, "rows": rows }))?;
        return Ok(());
    }

    let rows: Vec<DepthRow> = values
        .iter()
        .map(|&v| {
            let mut p = base.clone();
            let mut d = drive.clone();
            match parameter {
                SweepParameter::SlotWidth => p.slot_width = v,
                SweepParameter::OxideThickness => p.oxide_thickness = v,
                SweepParameter::RfPeak => d.rf_peak = v,
                SweepParameter::SegmentWidth => unreachable!("handled above"),
            }
            depth_row(ctx, &p, &d, v)
        })
        .collect();
    let mut csv = format!("{name},depth_eV,required_V_for_1eV,escape_class,basis_hash,error\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    ctx.out.write_text("sweep.csv", &csv)?;
    ctx.out.write_json("sweep.json", &meta, &serde_json::json!({ "parameter": name, "rows": rows }))?;
    Ok(())
}

pub fn export_grid(ctx: &mut Ctx) -> Result<(), CliError> {
    let block = ctx.config().grid.clone().ok_or_else(|| ctx.missing("grid"))?;
    let params = ctx.params()?;
    let (basis, hash) = ctx.basis(&params)?;
    let grid = block.grid();
    let csv = match block.kind {
        GridKind::Basis => basis_grid_csv(basis.as_ref(), &grid),
        kind => {
            let drive = ctx.drive_with(None)?;
            let pf = ctx.field(basis, drive)?;
            let k = if kind == GridKind::Total { PotentialKind::Total } else { PotentialKind::Pseudo };
            pf.grid_csv(&grid, k)
        }
    };
    let meta = ctx.meta(Some(hash));
    ctx.out.write_text("grid.csv", &csv)?;
    ctx.out.write_json("grid.json", &meta, &serde_json::json!({ "grid": block }))?;
    Ok(())
}
