//! Runs one scenario: builds the voxel scene from a config document and
//! traces its photons on a worker pool.
//!
//! Photons are split into fixed-size chunks. Each chunk is traced by one
//! thread into private buffers and the chunks are merged in chunk order,
//! so the outputs depend only on the config and the seed, never on the
//! number of workers.

use std::collections::HashMap;
use std::time::Instant;

use photonforge_core::transport::{retract_to_ambient, trace_batch};
use photonforge_core::{
    DetectorRecord, HeadModelError, LabelGrid, MediaTable, SourceDef, TransportError, TransportScene,
    WeightTally,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sim_io::{ConfigDocument, ConfigError, DetectorRecordSet, FluenceGrid};

pub const DEFAULT_CHUNK: u64 = 4096;

#[derive(Debug, thiserror::Error)]
pub enum SimulateError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("geometry: {0}")]
    Geometry(#[from] HeadModelError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    /// Replaces the config's seed.
    pub seed: Option<u64>,
    /// Replaces the config's photon count.
    pub photons: Option<u64>,
    pub chunk: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            seed: None,
            photons: None,
            chunk: DEFAULT_CHUNK,
        }
    }
}

/// Weight bookkeeping and timing of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario_id: String,
    pub photon_count: u64,
    pub seed: u64,
    pub workers: usize,
    pub launched: f64,
    pub detected: f64,
    pub absorbed: f64,
    pub escaped: f64,
    pub timed_out: f64,
    pub roulette_killed: f64,
    pub roulette_gained: f64,
    pub detected_photons: u64,
    /// |launched + gained − everything else| / launched.
    pub relative_residual: f64,
    pub wall_time_s: f64,
    pub photons_per_second: f64,
}

impl RunSummary {
    fn new(id: &str, seed: u64, workers: usize, t: &WeightTally, wall: f64) -> Self {
        Self {
            scenario_id: id.to_string(),
            photon_count: t.launched_photons,
            seed,
            workers,
            launched: t.launched,
            detected: t.detected,
            absorbed: t.absorbed,
            escaped: t.escaped,
            timed_out: t.timed_out,
            roulette_killed: t.roulette_killed,
            roulette_gained: t.roulette_gained,
            detected_photons: t.detected_photons,
            relative_residual: t.relative_residual(),
            wall_time_s: wall,
            photons_per_second: if wall > 0.0 {
                t.launched_photons as f64 / wall
            } else {
                0.0
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub fluence: FluenceGrid,
    pub detectors: DetectorRecordSet,
    pub summary: RunSummary,
    pub tally: WeightTally,
}

/// Voxelized geometry and optics of a config.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub grid: LabelGrid,
    pub media: MediaTable,
    pub source: SourceDef,
    pub detectors: Vec<photonforge_core::DetectorDef>,
}

impl PreparedScene {
    pub fn from_config(doc: &ConfigDocument) -> Result<Self, SimulateError> {
        doc.validate()?;
        let grid = doc.head_model()?.voxelize(doc.domain.voxel_size)?;
        let source = retract_to_ambient(&grid, &doc.source_def()?)?;
        Ok(Self {
            media: doc.media_table()?,
            detectors: doc.detector_defs()?,
            grid,
            source,
        })
    }
}

struct Chunk {
    tally: WeightTally,
    deposits: HashMap<u64, f64>,
    records: Vec<DetectorRecord>,
}

fn trace_chunk(
    scene: &TransportScene<'_>,
    source: &SourceDef,
    seed: u64,
    first: u64,
    count: u64,
) -> Result<Chunk, TransportError> {
    let voxels = scene.grid.voxel_count() as u64;
    let mut deposits: HashMap<u64, f64> = HashMap::new();
    let mut records = Vec::new();
    let mut sink = |voxel: usize, gate: usize, w: f64| {
        *deposits.entry(gate as u64 * voxels + voxel as u64).or_insert(0.0) += w;
    };
    let tally = trace_batch(scene, source, seed, first, count, &mut sink, |r| records.push(r))?;
    Ok(Chunk {
        tally,
        deposits,
        records,
    })
}

/// Traces `doc`'s photons. The returned record set and fluence grid are
/// ready to be written with `sim_io`.
pub fn run_simulation(doc: &ConfigDocument, opts: &RunOptions) -> Result<SimulationOutput, SimulateError> {
    let scene = PreparedScene::from_config(doc)?;
    run_prepared(doc, &scene, opts)
}

/// Like [`run_simulation`] with the geometry already built.
pub fn run_prepared(
    doc: &ConfigDocument,
    prepared: &PreparedScene,
    opts: &RunOptions,
) -> Result<SimulationOutput, SimulateError> {
    let started = Instant::now();
    let seed = opts.seed.unwrap_or(doc.session.rng_seed);
    let photons = opts.photons.unwrap_or(doc.session.photon_count);
    let workers = opts.workers.max(1);
    let chunk = opts.chunk.max(1);
    let gates = doc.forward.gates();
    let constants = doc.constants();
    constants.validate()?;
    let scene = TransportScene {
        grid: &prepared.grid,
        media: &prepared.media,
        detectors: &prepared.detectors,
        constants,
        gates,
        mismatch: doc.session.mismatch_flag,
    };

    let chunks = photons.div_ceil(chunk);
    let mut tally = WeightTally::default();
    let mut deposits: HashMap<u64, f64> = HashMap::new();
    let mut records = Vec::new();
    let mut merge = |c: Chunk| {
        tally.merge(&c.tally);
        for (k, v) in c.deposits {
            *deposits.entry(k).or_insert(0.0) += v;
        }
        records.extend(c.records);
    };
    let span = |i: u64| (i * chunk, chunk.min(photons - i * chunk));

    if workers == 1 {
        for i in 0..chunks {
            let (first, count) = span(i);
            merge(trace_chunk(&scene, &prepared.source, seed, first, count)?);
        }
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SimulateError::Pool(e.to_string()))?;
        let wave = workers as u64 * 2;
        let mut start = 0;
        while start < chunks {
            let end = (start + wave).min(chunks);
            let results: Vec<Result<Chunk, TransportError>> = pool.install(|| {
                (start..end)
                    .into_par_iter()
                    .map(|i| {
                        let (first, count) = span(i);
                        trace_chunk(&scene, &prepared.source, seed, first, count)
                    })
                    .collect()
            });
            for r in results {
                merge(r?);
            }
            start = end;
        }
    }

    let dims = prepared.grid.dims();
    let fluence = FluenceGrid::new(
        doc.session.id.clone(),
        dims,
        prepared.grid.voxel_size(),
        gates.width,
        gates.count,
    )
    .from_accumulated(deposits);
    let detectors = DetectorRecordSet::new(doc.session.id.clone(), photons, seed, gates, records);
    let wall = started.elapsed().as_secs_f64();
    let summary = RunSummary::new(&doc.session.id, seed, workers, &tally, wall);
    Ok(SimulationOutput {
        fluence,
        detectors,
        summary,
        tally,
    })
}
