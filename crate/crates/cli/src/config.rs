//! Run configuration files.
//!
//! All lengths are um, frequencies MHz (except `drive.rf_omega`, rad/s),
//! voltages V and energies eV. Relative paths inside a config resolve
//! against the directory holding the config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use trapforge::electrostatics::grid::{Axis, Grid};
use trapforge::geometry::{MeshOptions, TrapParams};
use trapforge::potentials::{DriveConfig, IonSpecies};
use trapforge::voltage_solver::{ChainTargets, QuadrupoleTarget};

use crate::error::{io_error, CliError};

fn nominal_drive() -> DriveConfig {
    DriveConfig::nominal()
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Inline trap parameters.
    #[serde(default)]
    pub geometry: Option<TrapParams>,
    /// Trap parameters in a separate JSON file.
    #[serde(default)]
    pub geometry_file: Option<PathBuf>,
    #[serde(default)]
    pub mesh: MeshOptions,
    /// Panel size near the trap, overriding `mesh.resolution`.
    #[serde(default)]
    pub resolution: Option<f64>,
    #[serde(default)]
    pub species: IonSpecies,
    #[serde(default = "nominal_drive")]
    pub drive: DriveConfig,
    #[serde(default)]
    pub single_ion: SingleIonBlock,
    #[serde(default)]
    pub chain: Option<ChainBlock>,
    #[serde(default)]
    pub voltages: Option<ChainTargets>,
    #[serde(default)]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub grid: Option<GridBlock>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub cache: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SingleIonBlock {
    /// Static voltages applied on top of `drive.dc_voltages`.
    #[serde(default)]
    pub voltages_file: Option<PathBuf>,
    /// Synthesize the static voltages for these single-ion targets first.
    #[serde(default)]
    pub synthesize: Option<SingleIonTargets>,
    #[serde(default = "yes")]
    pub depth: bool,
    /// Stray field at the trap to compensate, V/m.
    #[serde(default)]
    pub stray_field: Option<[f64; 3]>,
}

impl Default for SingleIonBlock {
    fn default() -> Self {
        Self {
            voltages_file: None,
            synthesize: None,
            depth: true,
            stray_field: None,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SingleIonTargets {
    pub axial_mhz: f64,
    #[serde(default)]
    pub quadrupole: QuadrupoleTarget,
    #[serde(default = "default_bound")]
    pub voltage_bound: f64,
    #[serde(default = "yes")]
    pub symmetric: bool,
}

impl SingleIonTargets {
    pub fn targets(&self) -> ChainTargets {
        ChainTargets {
            voltage_bound: self.voltage_bound,
            symmetric: self.symmetric,
            ..ChainTargets::single_ion(self.axial_mhz, self.quadrupole)
        }
    }
}

fn yes() -> bool {
    true
}

fn default_bound() -> f64 {
    20.0
}

fn default_spacing() -> f64 {
    10.0
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ChainBlock {
    pub n_ions: usize,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    #[serde(default)]
    pub center: f64,
    #[serde(default)]
    pub voltages_file: Option<PathBuf>,
    /// Equilibrium searches; starts after the first are perturbed with `--seed`.
    #[serde(default = "one")]
    pub starts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    SlotWidth,
    OxideThickness,
    SegmentWidth,
    RfPeak,
}

impl SweepParameter {
    pub fn parse(name: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(name.replace('-', "_"))).ok()
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::SlotWidth => "slot_width",
            SweepParameter::OxideThickness => "oxide_thickness",
            SweepParameter::SegmentWidth => "segment_width",
            SweepParameter::RfPeak => "rf_peak",
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Chain lengths for segment-width sweeps.
    #[serde(default = "default_chains")]
    pub chains: Vec<usize>,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

fn default_chains() -> Vec<usize> {
    vec![20, 50]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Pseudo,
    Total,
    /// Every electrode's unit basis potential and gradient.
    Basis,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub x: Axis,
    pub y: Axis,
    #[serde(default = "zero_axis")]
    pub z: Axis,
    #[serde(default = "pseudo")]
    pub kind: GridKind,
}

fn zero_axis() -> Axis {
    Axis::fixed(0.0)
}

fn pseudo() -> GridKind {
    GridKind::Pseudo
}

impl GridBlock {
    pub fn grid(&self) -> Grid {
        Grid {
            x: self.x,
            y: self.y,
            z: self.z,
        }
    }
}

/// A parsed config with what is needed to reproduce it.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub config: RunConfig,
    pub path: Option<PathBuf>,
    /// SHA-256 of the config bytes and of every file it references.
    pub input_hash: String,
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, bytes: &[u8], prefix: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.path().to_string();
        let field = match (prefix.is_empty(), inner.as_str()) {
            (_, ".") => (!prefix.is_empty()).then(|| prefix.to_string()),
            (true, p) => Some(p.to_string()),
            (false, p) => Some(format!("{prefix}.{p}")),
        };
        CliError::Config {
            path: path.to_path_buf(),
            field,
            message: e.into_inner().to_string(),
        }
    })
}

/// Parse config text. A bare trap-parameter object (recognised by a
/// top-level `slot_width`) is accepted as `{"geometry": ...}`.
pub fn parse_config(path: &Path, bytes: &[u8]) -> Result<RunConfig, CliError> {
    let bare = serde_json::from_slice::<serde_json::Value>(bytes)
        .ok()
        .and_then(|v| v.as_object().map(|o| o.contains_key("slot_width")))
        .unwrap_or(false);
    if bare {
        let params: TrapParams = parse(path, bytes, "")?;
        Ok(RunConfig {
            geometry: Some(params),
            ..RunConfig::default()
        })
    } else {
        parse(path, bytes, "")
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: None,
            geometry_file: None,
            mesh: MeshOptions::default(),
            resolution: None,
            species: IonSpecies::default(),
            drive: nominal_drive(),
            single_ion: SingleIonBlock::default(),
            chain: None,
            voltages: None,
            sweep: None,
            grid: None,
            out: None,
            cache: None,
        }
    }
}

impl RunConfig {
    /// The config directory-relative path resolved.
    pub fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
        match base.and_then(Path::parent) {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(io_error(path))
}

/// Read `path` (or use defaults) and fold referenced files into the hash.
pub fn load(path: Option<&Path>) -> Result<Loaded, CliError> {
    let mut hasher = Sha256::new();
    let mut config = match path {
        Some(p) => {
            let bytes = read(p)?;
            hasher.update(&bytes);
            parse_config(p, &bytes)?
        }
        None => RunConfig::default(),
    };
    if let Some(file) = config.geometry_file.clone() {
        if config.geometry.is_some() {
            return Err(CliError::Config {
                path: path.map(Path::to_path_buf).unwrap_or_default(),
                field: Some("geometry_file".into()),
                message: "give either `geometry` or `geometry_file`, not both".into(),
            });
        }
        let full = RunConfig::resolve(path, &file);
        let bytes = read(&full)?;
        hasher.update(&bytes);
        config.geometry = Some(parse(&full, &bytes, "geometry")?);
    }
    for file in [
        config.single_ion.voltages_file.as_ref(),
        config.chain.as_ref().and_then(|c| c.voltages_file.as_ref()),
    ]
    .into_iter()
    .flatten()
    {
        let full = RunConfig::resolve(path, file);
        if !full.exists() {
            return Err(CliError::Config {
                path: path.map(Path::to_path_buf).unwrap_or_default(),
                field: Some("voltages_file".into()),
                message: format!("{} does not exist", full.display()),
            });
        }
        hasher.update(read(&full)?);
    }
    Ok(Loaded {
        config,
        path: path.map(Path::to_path_buf),
        input_hash: trapforge::electrostatics::hex(&hasher.finalize()),
    })
}

impl Loaded {
    /// Fold an input given on the command line into the hash.
    pub fn add_input(&mut self, bytes: &[u8]) {
        let mut h = Sha256::new();
        h.update(self.input_hash.as_bytes());
        h.update(bytes);
        self.input_hash = trapforge::electrostatics::hex(&h.finalize());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_paths_in_errors() {
        let p = Path::new("c.json");
        let e = parse_config(p, br#"{"geometry": {"slot_width": "wide"}}"#).unwrap_err();
        assert_eq!(e.field().as_deref(), Some("geometry.slot_width"));
        let e = parse_config(p, br#"{"drive": {"rf_peak": 1, "rf_omega": 2, "bogus": 1}}"#).unwrap_err();
        assert!(e.field().unwrap().starts_with("drive"), "{e}");
        let e = parse_config(p, br#"{"slot_width": true}"#).unwrap_err();
        assert_eq!(e.field().as_deref(), Some("slot_width"));
    }

    #[test]
    fn bare_params_are_geometry() {
        let c = parse_config(Path::new("g.json"), br#"{"slot_width": 200}"#).unwrap();
        assert_eq!(c.geometry.unwrap().slot_width, 200.0);
        assert_eq!(c.drive, DriveConfig::nominal());
    }

    #[test]
    fn sweep_parameter_names() {
        assert_eq!(SweepParameter::parse("slot-width"), Some(SweepParameter::SlotWidth));
        assert_eq!(SweepParameter::parse("rf_peak"), Some(SweepParameter::RfPeak));
        assert_eq!(SweepParameter::parse("depth"), None);
    }
}
