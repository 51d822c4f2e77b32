//! `gen-data`: expert rollouts to a dataset directory.

use std::fmt;
use std::path::{Path, PathBuf};

use transfuser_core::sim::generate_dataset;
use transfuser_core::tensor::fnv1a;

use crate::{CliError, Result, RunConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct GenReport {
    pub dir: PathBuf,
    pub frames: usize,
    pub routes: usize,
    pub per_scenario: Vec<(String, usize)>,
    /// FNV-1a of the manifest file bytes.
    pub manifest_hash: u64,
}

impl fmt::Display for GenReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} frames from {} routes in {}", self.frames, self.routes, self.dir.display())?;
        for (name, n) in &self.per_scenario {
            writeln!(f, "  {name:<20} {n}")?;
        }
        write!(f, "manifest hash {:016x}", self.manifest_hash)
    }
}

pub fn gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenReport> {
    cfg.validate()?;
    let dcfg = cfg.dataset_config()?;
    let manifest = generate_dataset(&dcfg, out, force)?;
    let path = out.join("manifest.json");
    let bytes = std::fs::read(&path).map_err(|source| CliError::Io { path, source })?;
    Ok(GenReport {
        dir: out.to_path_buf(),
        frames: manifest.frames.len(),
        routes: manifest.routes.len(),
        per_scenario: manifest
            .per_scenario()
            .into_iter()
            .map(|(k, n)| (k.name().to_string(), n))
            .collect(),
        manifest_hash: fnv1a(&bytes),
    })
}
