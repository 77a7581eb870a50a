//! Collocation boundary element solver for the exterior Laplace problem.
//!
//! Each panel carries a constant density `s` (V/um). The potential of the
//! whole mesh at `p` is `sum_j s_j * integral_j dA / |p - q|`, lengths in
//! micrometres. Solving `K s = V` with `V` one on an electrode's panels and
//! zero elsewhere gives that electrode's unit-voltage basis field.

pub mod basis;
pub mod bem;
pub mod cache;
pub mod fixtures;
pub mod grid;
pub mod kernel;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{mesh, Geometry, MeshError, MeshOptions};

pub use basis::BasisSet;
pub use bem::BemSystem;
pub use cache::CacheError;

/// Bumped whenever a change to the kernel or solver changes basis values.
pub const KERNEL_VERSION: u32 = 1;

/// Environment variable that overrides the basis cache directory.
pub const CACHE_ENV: &str = "TRAPFORGE_CACHE";

#[derive(Debug, Error)]
pub enum BemError {
    #[error("panels {a} and {b} have coincident centroids")]
    SingularAssembly { a: usize, b: usize },
    #[error("non-positive self term on panel {panel}")]
    NonPositiveDiagonal { panel: usize },
    #[error("influence matrix condition estimate {estimate:e} exceeds 1e12")]
    IllConditioned { estimate: f64 },
    #[error("electrode {electrode}: relative residual {residual:e} exceeds 1e-10")]
    ResidualTooLarge { electrode: usize, residual: f64 },
    #[error("unknown electrode `{0}`")]
    UnknownElectrode(String),
    #[error("density vectors do not match the mesh")]
    ShapeMismatch,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("basis cache: {0}")]
    Cache(#[from] CacheError),
    #[error("basis cache does not match the mesh it was loaded for")]
    StaleCache,
    #[error("basis cache i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Key of a basis solve: geometry, mesh options and kernel version.
pub fn content_hash(geometry: &Geometry, opts: &MeshOptions) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"trapforge-basis\0");
    h.update(KERNEL_VERSION.to_le_bytes());
    h.update(serde_json::to_vec(geometry).expect("geometry serializes"));
    h.update(serde_json::to_vec(opts).expect("mesh options serialize"));
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `explicit`, else the environment override, else `None`.
pub fn cache_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
}

/// Outcome of [`load_or_solve`].
pub struct Solved {
    pub basis: Arc<BasisSet>,
    pub content_hash: [u8; 32],
    pub from_cache: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BemError + '_ {
    move |source| BemError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Mesh the geometry and return its basis, reading and writing the cache
/// in `cache` when given.
pub fn load_or_solve(
    geometry: &Geometry,
    opts: &MeshOptions,
    cache: Option<&Path>,
) -> Result<Solved, BemError> {
    let panel_mesh = Arc::new(mesh(geometry, opts)?);
    let key = content_hash(geometry, opts);
    let file = cache.map(|d| d.join(format!("basis-{}.bin", hex(&key))));

    if let Some(path) = &file {
        if path.exists() {
            let bytes = std::fs::read(path).map_err(io_err(path))?;
            let contents = cache::decode(&bytes)?;
            let matches = contents.content_hash == key
                && contents.mesh_checksum == panel_mesh.checksum()
                && contents.n_panels == panel_mesh.len()
                && contents.electrodes.len() == panel_mesh.electrodes.len()
                && contents
                    .electrodes
                    .iter()
                    .zip(&panel_mesh.electrodes)
                    .all(|(c, m)| c.name == m.name && c.role == m.role);
            if !matches {
                return Err(BemError::StaleCache);
            }
            let charges = contents.electrodes.into_iter().map(|e| e.charges).collect();
            let basis = BasisSet::from_parts(panel_mesh, charges)?;
            log::info!("basis loaded from {}", path.display());
            return Ok(Solved {
                basis: Arc::new(basis),
                content_hash: key,
                from_cache: true,
            });
        }
    }

    log::info!("solving basis for {} panels", panel_mesh.len());
    let basis = BasisSet::solve(panel_mesh.clone())?;
    if let Some(path) = &file {
        let dir = path.parent().expect("cache file has a directory");
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let contents = cache::CacheContents {
            content_hash: key,
            mesh_checksum: panel_mesh.checksum(),
            n_panels: panel_mesh.len(),
            electrodes: panel_mesh
                .electrodes
                .iter()
                .enumerate()
                .map(|(e, m)| cache::CachedElectrode {
                    name: m.name.clone(),
                    role: m.role,
                    charges: basis.charges(e).to_vec(),
                })
                .collect(),
        };
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, cache::encode(&contents)).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))?;
    }
    Ok(Solved {
        basis: Arc::new(basis),
        content_hash: key,
        from_cache: false,
    })
}
