//! Sweep execution with resume.
//!
//! Layout under the root directory:
//!
//! ```text
//! <root>/manifest                       job table (JSON)
//! <root>/mcx_input_jsons/<id>.json      config documents
//! <root>/mcx_output/<id>.detectors      detector records
//! <root>/mcx_output/<id>.fluence        fluence volume
//! <root>/mcx_output/<id>.summary.json   run summary, written last
//! ```
//!
//! [`plan`] derives the job table from the files alone, so a crashed or
//! interrupted run is resumed by planning again and executing what is not
//! done.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::sim_io::{
    parse_config, read_detector_records, verify_fluence, write_atomic, write_atomic_bytes,
    write_detector_records, write_fluence, ConfigDocument, FormatError,
};
use crate::simulate::{run_simulation, RunOptions, RunSummary};

pub const INPUT_DIR: &str = "mcx_input_jsons";
pub const OUTPUT_DIR: &str = "mcx_output";
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("worker count must be at least 1")]
    Workers,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageLayout {
    pub root: PathBuf,
}

impl StorageLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// Creates the input and output directories.
    pub fn init(&self) -> Result<(), BatchError> {
        fs::create_dir_all(self.input_dir())?;
        fs::create_dir_all(self.output_dir())?;
        Ok(())
    }

    pub fn input_dir(&self) -> PathBuf {
        self.root.join(INPUT_DIR)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.root.join(OUTPUT_DIR)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn config_path(&self, id: &str) -> PathBuf {
        self.input_dir().join(format!("{id}.json"))
    }

    pub fn detectors_path(&self, id: &str) -> PathBuf {
        self.output_dir().join(format!("{id}.detectors"))
    }

    pub fn fluence_path(&self, id: &str) -> PathBuf {
        self.output_dir().join(format!("{id}.fluence"))
    }

    pub fn summary_path(&self, id: &str) -> PathBuf {
        self.output_dir().join(format!("{id}.summary.json"))
    }

    fn relative(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.root).unwrap_or(p).to_path_buf()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobEntry {
    pub id: String,
    /// Paths relative to the root.
    pub config: PathBuf,
    pub outputs: Vec<PathBuf>,
    pub status: JobStatus,
    pub seed: u64,
    pub photons: u64,
    pub wall_time_s: Option<f64>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    /// Unix seconds.
    pub created: u64,
    pub updated: u64,
    pub entries: Vec<JobEntry>,
}

impl JobManifest {
    pub fn count(&self, status: JobStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }

    pub fn entry(&self, id: &str) -> Option<&JobEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, BatchError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| BatchError::Manifest(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), BatchError> {
        write_atomic_bytes(path, self.to_json().as_bytes()).map_err(format_to_batch)
    }
}

fn format_to_batch(e: FormatError) -> BatchError {
    match e {
        FormatError::Io(e) => BatchError::Io(e),
        other => BatchError::Manifest(other.to_string()),
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Seed of scenario `id` under a master seed.
pub fn scenario_seed(master: u64, id: &str) -> u64 {
    xxhash_rust::xxh64::xxh64(id.as_bytes(), master)
}

#[derive(Debug, Clone, Default)]
pub struct PlanOptions {
    /// Master seed; each scenario then uses [`scenario_seed`]. Without it
    /// the config's own seed is used.
    pub seed: Option<u64>,
    /// Overrides every config's photon count.
    pub photons: Option<u64>,
    /// Only configs at this wavelength.
    pub wavelength: Option<u32>,
}

/// Why existing outputs do not count as done.
#[derive(Debug)]
enum OutputState {
    Missing,
    Done { wall: f64 },
    Stale(String),
    Corrupt(String),
}

fn check_outputs(layout: &StorageLayout, id: &str, seed: u64, photons: u64) -> OutputState {
    let det = layout.detectors_path(id);
    let flu = layout.fluence_path(id);
    let sum = layout.summary_path(id);
    let present = [&det, &flu, &sum].iter().filter(|p| p.exists()).count();
    if present == 0 {
        return OutputState::Missing;
    }
    if present < 3 {
        return OutputState::Corrupt("incomplete outputs".into());
    }
    let summary: RunSummary = match fs::read_to_string(&sum)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(s) => s,
        Err(e) => return OutputState::Corrupt(format!("summary: {e}")),
    };
    let records = match fs::File::open(&det)
        .map_err(FormatError::Io)
        .and_then(|f| read_detector_records(BufReader::new(f)))
    {
        Ok(r) => r,
        Err(e) => return OutputState::Corrupt(format!("detectors: {e}")),
    };
    if let Err(e) = fs::File::open(&flu)
        .map_err(FormatError::Io)
        .and_then(|f| verify_fluence(BufReader::with_capacity(1 << 20, f)))
    {
        return OutputState::Corrupt(format!("fluence: {e}"));
    }
    if records.scenario_id != id || summary.scenario_id != id {
        return OutputState::Corrupt("outputs belong to another scenario".into());
    }
    if records.seed != seed || records.photon_count != photons {
        return OutputState::Stale(format!(
            "outputs are for seed {} / {} photons",
            records.seed, records.photon_count
        ));
    }
    OutputState::Done {
        wall: summary.wall_time_s,
    }
}

/// Builds the job table from the configs in the input directory and the
/// state of their outputs: complete and valid outputs are done, invalid
/// ones failed with a reason, everything else pending.
pub fn plan(layout: &StorageLayout, opts: &PlanOptions) -> Result<JobManifest, BatchError> {
    layout.init()?;
    let mut configs: Vec<PathBuf> = fs::read_dir(layout.input_dir())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    configs.sort();
    let created = JobManifest::load(&layout.manifest_path())
        .map(|m| m.created)
        .unwrap_or_else(|_| now());
    let mut entries = Vec::with_capacity(configs.len());
    for path in configs {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let outputs = vec![
            layout.relative(&layout.detectors_path(&id)),
            layout.relative(&layout.fluence_path(&id)),
            layout.relative(&layout.summary_path(&id)),
        ];
        let mut entry = JobEntry {
            id: id.clone(),
            config: layout.relative(&path),
            outputs,
            status: JobStatus::Pending,
            seed: 0,
            photons: 0,
            wall_time_s: None,
            reason: None,
        };
        let doc = match fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| parse_config(&t).map_err(|e| e.to_string()))
        {
            Ok(d) => d,
            Err(e) => {
                entry.status = JobStatus::Failed;
                entry.reason = Some(format!("config: {e}"));
                entries.push(entry);
                continue;
            }
        };
        if opts.wavelength.is_some_and(|w| w != doc.domain.wavelength) {
            continue;
        }
        if doc.session.id != id {
            entry.status = JobStatus::Failed;
            entry.reason = Some(format!("config: session.id {:?} does not match file name", doc.session.id));
            entries.push(entry);
            continue;
        }
        entry.seed = opts.seed.map_or(doc.session.rng_seed, |m| scenario_seed(m, &id));
        entry.photons = opts.photons.unwrap_or(doc.session.photon_count);
        match check_outputs(layout, &id, entry.seed, entry.photons) {
            OutputState::Missing => {}
            OutputState::Done { wall } => {
                entry.status = JobStatus::Done;
                entry.wall_time_s = Some(wall);
            }
            OutputState::Stale(r) => entry.reason = Some(r),
            OutputState::Corrupt(r) => {
                entry.status = JobStatus::Failed;
                entry.reason = Some(r);
            }
        }
        entries.push(entry);
    }
    Ok(JobManifest {
        created,
        updated: now(),
        entries,
    })
}

#[derive(Debug, Clone)]
pub struct ExecuteOptions {
    pub workers: usize,
    /// Stop dispatching after this many jobs have finished, as if the
    /// process had been interrupted. Jobs already running complete.
    pub stop_after: Option<usize>,
}

impl Default for ExecuteOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            stop_after: None,
        }
    }
}

#[derive(Debug)]
pub struct ExecuteReport {
    pub manifest: JobManifest,
    pub completed: usize,
    pub failed: usize,
    /// Jobs left pending because of `stop_after`.
    pub not_started: usize,
}

impl ExecuteReport {
    pub fn success(&self) -> bool {
        self.failed == 0 && self.manifest.count(JobStatus::Failed) == 0
    }
}

enum Event {
    Started(usize),
    Finished(usize, Result<f64, String>),
}

fn load_config(layout: &StorageLayout, entry: &JobEntry) -> Result<ConfigDocument, String> {
    let text = fs::read_to_string(layout.root.join(&entry.config)).map_err(|e| e.to_string())?;
    parse_config(&text).map_err(|e| format!("config: {e}"))
}

/// Runs one job and writes its outputs. Every file goes through a
/// temporary name; the summary is renamed into place last.
pub fn run_job(layout: &StorageLayout, entry: &JobEntry, threads: usize) -> Result<f64, String> {
    let started = Instant::now();
    let doc = load_config(layout, entry)?;
    let out = run_simulation(
        &doc,
        &RunOptions {
            workers: threads,
            seed: Some(entry.seed),
            photons: Some(entry.photons),
            ..RunOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let id = &entry.id;
    // a rerun must not leave an old summary next to new data
    let _ = fs::remove_file(layout.summary_path(id));
    write_atomic(&layout.detectors_path(id), |f| {
        write_detector_records(BufWriter::new(f), &out.detectors)
    })
    .map_err(|e| format!("detectors: {e}"))?;
    write_atomic(&layout.fluence_path(id), |f| {
        write_fluence(BufWriter::with_capacity(1 << 20, f), &out.fluence)
    })
    .map_err(|e| format!("fluence: {e}"))?;
    let mut summary = serde_json::to_string_pretty(&out.summary).expect("summary serializes");
    summary.push('\n');
    write_atomic_bytes(&layout.summary_path(id), summary.as_bytes()).map_err(|e| format!("summary: {e}"))?;
    log::info!(
        "{id}: {} photons, {:.0} photons/s, detected weight {:.4}",
        out.summary.photon_count,
        out.summary.photons_per_second,
        out.summary.detected
    );
    Ok(started.elapsed().as_secs_f64())
}

/// Runs every pending or failed job on `workers` threads. The manifest is
/// owned by this thread and saved after every state change; workers only
/// report back over a channel.
pub fn execute(layout: &StorageLayout, mut manifest: JobManifest, opts: &ExecuteOptions) -> Result<ExecuteReport, BatchError> {
    if opts.workers == 0 {
        return Err(BatchError::Workers);
    }
    layout.init()?;
    let todo: VecDeque<usize> = manifest
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.status != JobStatus::Done)
        .map(|(i, _)| i)
        .collect();
    if todo.is_empty() {
        manifest.updated = now();
        manifest.save(&layout.manifest_path())?;
        return Ok(ExecuteReport {
            manifest,
            completed: 0,
            failed: 0,
            not_started: 0,
        });
    }
    let pool = opts.workers.min(todo.len());
    // spare workers go to intra-job parallelism
    let threads_per_job = (opts.workers / pool).max(1);
    let entries = manifest.entries.clone();
    let queue = Mutex::new(todo);
    let stop = AtomicBool::new(false);
    let (tx, rx) = mpsc::channel::<Event>();
    let mut completed = 0;
    let mut failed = 0;

    let result: Result<(), BatchError> = std::thread::scope(|s| {
        for _ in 0..pool {
            let tx = tx.clone();
            let (queue, stop, entries) = (&queue, &stop, &entries);
            s.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Some(i) = queue.lock().expect("queue lock").pop_front() else {
                    break;
                };
                if tx.send(Event::Started(i)).is_err() {
                    break;
                }
                let r = run_job(layout, &entries[i], threads_per_job);
                if tx.send(Event::Finished(i, r)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for ev in rx {
            match ev {
                Event::Started(i) => {
                    let e = &mut manifest.entries[i];
                    e.status = JobStatus::Running;
                    e.reason = None;
                }
                Event::Finished(i, r) => {
                    let e = &mut manifest.entries[i];
                    match r {
                        Ok(wall) => {
                            e.status = JobStatus::Done;
                            e.wall_time_s = Some(wall);
                            completed += 1;
                        }
                        Err(reason) => {
                            log::error!("{}: {reason}", e.id);
                            e.status = JobStatus::Failed;
                            e.reason = Some(reason);
                            failed += 1;
                        }
                    }
                    if opts.stop_after.is_some_and(|n| completed + failed >= n) {
                        stop.store(true, Ordering::SeqCst);
                    }
                }
            }
            manifest.updated = now();
            manifest.save(&layout.manifest_path())?;
        }
        Ok(())
    });
    result?;
    let not_started = queue.into_inner().expect("queue lock").len();
    Ok(ExecuteReport {
        manifest,
        completed,
        failed,
        not_started,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_root_is_a_noop() {
        let dir = tempfile::tempdir().unwrap();
        let layout = StorageLayout::new(dir.path());
        let m = plan(&layout, &PlanOptions::default()).unwrap();
        assert!(m.entries.is_empty());
        let r = execute(&layout, m, &ExecuteOptions::default()).unwrap();
        assert!(r.success());
        assert!(layout.manifest_path().exists());
        assert!(layout.input_dir().is_dir() && layout.output_dir().is_dir());
    }

    #[test]
    fn manifest_json_round_trip() {
        let m = JobManifest {
            created: 1,
            updated: 2,
            entries: vec![JobEntry {
                id: "a".into(),
                config: "mcx_input_jsons/a.json".into(),
                outputs: vec![],
                status: JobStatus::Failed,
                seed: u64::MAX,
                photons: 10,
                wall_time_s: Some(0.5),
                reason: Some("x".into()),
            }],
        };
        let back: JobManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_json().contains("\"status\": \"failed\""));
    }

    #[test]
    fn unparsable_config_is_failed() {
        let dir = tempfile::tempdir().unwrap();
        let layout = StorageLayout::new(dir.path());
        layout.init().unwrap();
        fs::write(layout.config_path("bad"), "{").unwrap();
        let m = plan(&layout, &PlanOptions::default()).unwrap();
        assert_eq!(m.entries[0].status, JobStatus::Failed);
        assert!(m.entries[0].reason.as_deref().unwrap().starts_with("config"));
    }

    #[test]
    fn zero_workers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let layout = StorageLayout::new(dir.path());
        let m = plan(&layout, &PlanOptions::default()).unwrap();
        assert!(execute(&layout, m, &ExecuteOptions { workers: 0, stop_after: None }).is_err());
    }
}
