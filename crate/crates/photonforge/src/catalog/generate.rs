//! Writes one config document per catalog simulation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{Catalog, CatalogError};
use crate::sim_io::{write_atomic_bytes, write_config};

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub voxel_size: f64,
    /// Directory that relative optode fixture paths are resolved against.
    pub fixture_base: PathBuf,
    /// Only simulations at this wavelength, when set.
    pub wavelength: Option<u32>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            fixture_base: PathBuf::from("."),
            wavelength: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct GenerateReport {
    /// Session ids of the files written by this call.
    pub written: Vec<String>,
    /// Session ids whose file already existed.
    pub skipped: Vec<String>,
    /// Simulations excluded by the wavelength filter.
    pub filtered: usize,
    pub errors: Vec<CatalogError>,
}

impl GenerateReport {
    pub fn total(&self) -> usize {
        self.written.len() + self.skipped.len()
    }
}

enum Outcome {
    Written(String),
    Skipped(String),
    Filtered,
    Failed(CatalogError),
}

/// For each simulation: resolve it, name it, and write
/// `<out_dir>/<session id>.json` unless that file exists. Failures are
/// collected per simulation; the others still run.
pub fn generate_configs(catalog: &Catalog, out_dir: &Path, opts: &GenerateOptions) -> Result<GenerateReport, CatalogError> {
    std::fs::create_dir_all(out_dir)?;
    let resolved = catalog.resolve_all();
    let outcomes: Vec<Outcome> = resolved
        .into_par_iter()
        .map(|rec| {
            let rec = match rec {
                Ok(r) => r,
                Err(e) => return Outcome::Failed(e),
            };
            if opts.wavelength.is_some_and(|w| w != rec.wavelength) {
                return Outcome::Filtered;
            }
            let doc = match rec.to_config(&opts.fixture_base, opts.voxel_size) {
                Ok(d) => d,
                Err(e) => return Outcome::Failed(e),
            };
            let path = out_dir.join(format!("{}.json", doc.session.id));
            if path.exists() {
                return Outcome::Skipped(doc.session.id);
            }
            match write_atomic_bytes(&path, write_config(&doc).as_bytes()) {
                Ok(()) => Outcome::Written(doc.session.id),
                Err(e) => Outcome::Failed(CatalogError::Record {
                    simulation: rec.simulation_id,
                    message: format!("writing {}: {e}", path.display()),
                }),
            }
        })
        .collect();
    let mut report = GenerateReport::default();
    for o in outcomes {
        match o {
            Outcome::Written(id) => report.written.push(id),
            Outcome::Skipped(id) => report.skipped.push(id),
            Outcome::Filtered => report.filtered += 1,
            Outcome::Failed(e) => report.errors.push(e),
        }
    }
    Ok(report)
}
