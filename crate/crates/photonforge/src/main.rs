use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use photonforge::batch::{execute, plan, ExecuteOptions, JobStatus, PlanOptions, StorageLayout};
use photonforge::catalog::{
    generate_configs, load_catalog, position_sweep, radius_sweep, save_catalog, try_build_catalog,
    Catalog, GenerateOptions, ScenarioTemplate,
};
use photonforge::report::{coupling_from_csv, coupling_json, detection_table, save_heatmap};
use photonforge::sim_io::parse_config;

/// Exit status for configuration problems (bad arguments, catalog or config).
const EXIT_CONFIG: u8 = 2;
/// Exit status when any job or record failed.
const EXIT_FAILED: u8 = 1;

#[derive(Parser)]
#[command(name = "photonforge", version, about = "Monte Carlo photon migration sweeps for layered head models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write config documents for every catalog simulation.
    Generate(GenerateArgs),
    /// Plan and execute the simulations under a root directory.
    Run(RunArgs),
    /// Coupling diagnostics on a magnitude matrix, or detection summaries of a root.
    Analyze(AnalyzeArgs),
    /// Check a catalog, config files and outputs without running anything.
    Validate(ValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Sweep {
    Radius,
    Position,
}

#[derive(Args)]
struct GenerateArgs {
    /// Catalog file (.ndjson, or .sqlite/.db).
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    root: PathBuf,
    /// Build the catalog from a built-in sweep and save it to --catalog first.
    #[arg(long, value_enum)]
    sweep: Option<Sweep>,
    /// Sweep wavelengths, or a filter on an existing catalog. Repeatable.
    #[arg(long)]
    wavelength: Vec<u32>,
    /// Master seed of a new sweep.
    #[arg(long)]
    seed: Option<u64>,
    /// Photons per scenario of a new sweep.
    #[arg(long)]
    photons: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    voxel_size: f64,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    root: PathBuf,
    /// Generate missing configs from this catalog before planning.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Master seed; each scenario's seed is derived from it and its id.
    #[arg(long)]
    seed: Option<u64>,
    /// Photons per scenario, replacing the configs' counts.
    #[arg(long)]
    photons: Option<u64>,
    /// Only scenarios at this wavelength.
    #[arg(long)]
    wavelength: Option<u32>,
    #[arg(long, default_value_t = 1.0)]
    voxel_size: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Sources × detectors magnitude matrix (CSV).
    #[arg(long, conflicts_with = "root")]
    matrix: Option<PathBuf>,
    /// Summarize detected weight per detector for finished scenarios.
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    threshold: f64,
    /// Write a ratio heatmap (PNG).
    #[arg(long, requires = "matrix")]
    heatmap: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    root: Option<PathBuf>,
    /// A single config document.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    voxel_size: Option<f64>,
    /// Master seed the outputs under --root were run with.
    #[arg(long)]
    seed: Option<u64>,
    /// Photon count the outputs under --root were run with.
    #[arg(long)]
    photons: Option<u64>,
}

fn init_pool(workers: Option<usize>) -> Result<usize, u8> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        log::error!("--workers must be at least 1");
        return Err(EXIT_CONFIG);
    }
    // a second call in the same process is harmless
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(n)
}

fn fail(code: u8, msg: impl std::fmt::Display) -> u8 {
    log::error!("{msg}");
    code
}

fn generate_into(catalog: &Catalog, catalog_path: &Path, root: &Path, voxel_size: f64, wavelength: Option<u32>) -> u8 {
    let layout = StorageLayout::new(root);
    if let Err(e) = layout.init() {
        return fail(EXIT_CONFIG, e);
    }
    let opts = GenerateOptions {
        voxel_size,
        fixture_base: catalog_path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        wavelength,
    };
    match generate_configs(catalog, &layout.input_dir(), &opts) {
        Ok(r) => {
            for e in &r.errors {
                log::error!("{e}");
            }
            println!(
                "generated {} configs, {} already present, {} errors",
                r.written.len(),
                r.skipped.len(),
                r.errors.len()
            );
            if r.errors.is_empty() {
                0
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => fail(EXIT_CONFIG, e),
    }
}

fn cmd_generate(a: GenerateArgs) -> u8 {
    if let Err(c) = init_pool(a.workers) {
        return c;
    }
    if !(a.voxel_size > 0.0) {
        return fail(EXIT_CONFIG, "--voxel-size must be positive");
    }
    let mut sweep_errors = 0;
    let catalog = match a.sweep {
        Some(kind) => {
            let mut t = ScenarioTemplate::default();
            if let Some(s) = a.seed {
                t.master_seed = s;
            }
            if let Some(p) = a.photons {
                t.photon_count = p;
            }
            let scenarios = match kind {
                Sweep::Radius => radius_sweep(&t, &a.wavelength),
                Sweep::Position => position_sweep(&t, &a.wavelength),
            };
            let mut ok = Vec::with_capacity(scenarios.len());
            for s in scenarios {
                match s {
                    Ok(s) => ok.push(s),
                    Err(e) => {
                        log::error!("{e}");
                        sweep_errors += 1;
                    }
                }
            }
            let c = match try_build_catalog(&t, &ok) {
                Ok(c) => c,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            if let Err(e) = save_catalog(&c, &a.catalog) {
                return fail(EXIT_CONFIG, e);
            }
            println!("catalog {} holds {} simulations", a.catalog.display(), c.simulations.len());
            c
        }
        None => match load_catalog(&a.catalog) {
            Ok(c) => c,
            Err(e) => return fail(EXIT_CONFIG, e),
        },
    };
    let filter = if a.sweep.is_some() { None } else { a.wavelength.first().copied() };
    match generate_into(&catalog, &a.catalog, &a.root, a.voxel_size, filter) {
        0 if sweep_errors > 0 => EXIT_FAILED,
        code => code,
    }
}

fn cmd_run(a: RunArgs) -> u8 {
    let workers = match init_pool(a.workers) {
        Ok(n) => n,
        Err(c) => return c,
    };
    if let Some(path) = &a.catalog {
        let catalog = match load_catalog(path) {
            Ok(c) => c,
            Err(e) => return fail(EXIT_CONFIG, e),
        };
        let code = generate_into(&catalog, path, &a.root, a.voxel_size, a.wavelength);
        if code == EXIT_CONFIG {
            return code;
        }
    }
    let layout = StorageLayout::new(&a.root);
    let manifest = match plan(
        &layout,
        &PlanOptions {
            seed: a.seed,
            photons: a.photons,
            wavelength: a.wavelength,
        },
    ) {
        Ok(m) => m,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let config_errors: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| e.reason.as_deref().is_some_and(|r| r.starts_with("config")))
        .collect();
    if !config_errors.is_empty() {
        for e in config_errors {
            log::error!("{}: {}", e.id, e.reason.as_deref().unwrap_or_default());
        }
        return EXIT_CONFIG;
    }
    println!(
        "{} scenarios: {} done, {} to run",
        manifest.entries.len(),
        manifest.count(JobStatus::Done),
        manifest.entries.len() - manifest.count(JobStatus::Done)
    );
    match execute(&layout, manifest, &ExecuteOptions { workers, stop_after: None }) {
        Ok(r) => {
            println!("ran {} scenarios, {} failed", r.completed + r.failed, r.failed);
            if r.success() {
                0
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => fail(EXIT_FAILED, e),
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<(), std::io::Error> {
    match out {
        Some(p) => fs::write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> u8 {
    if let Some(path) = &a.matrix {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => return fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
        };
        let (report, ranks) = match coupling_from_csv(&text, a.threshold) {
            Ok(r) => r,
            Err(e) => return fail(EXIT_CONFIG, e),
        };
        if let Err(e) = emit(&a.out, &coupling_json(&report, &ranks, a.threshold)) {
            return fail(EXIT_FAILED, e);
        }
        if let Some(png) = &a.heatmap {
            if let Err(e) = save_heatmap(&report, png) {
                return fail(EXIT_FAILED, e);
            }
        }
        return 0;
    }
    if let Some(root) = &a.root {
        return match detection_table(&StorageLayout::new(root)) {
            Ok(t) => match emit(&a.out, &t) {
                Ok(()) => 0,
                Err(e) => fail(EXIT_FAILED, e),
            },
            Err(e) => fail(EXIT_FAILED, e),
        };
    }
    fail(EXIT_CONFIG, "analyze needs --matrix or --root")
}

fn cmd_validate(a: ValidateArgs) -> u8 {
    let mut code = 0;
    let mut checked = false;
    if let Some(path) = &a.catalog {
        checked = true;
        match load_catalog(path) {
            Ok(c) => {
                let base = path.parent().unwrap_or(Path::new("."));
                let mut bad = 0;
                for r in c.resolve_all() {
                    if let Err(e) = r.and_then(|rec| rec.to_config(base, a.voxel_size.unwrap_or(1.0))) {
                        log::error!("{e}");
                        bad += 1;
                    }
                }
                println!("catalog: {} simulations, {bad} invalid", c.simulations.len());
                if bad > 0 {
                    code = EXIT_CONFIG;
                }
            }
            Err(e) => code = fail(EXIT_CONFIG, e),
        }
    }
    if let Some(path) = &a.config {
        checked = true;
        match fs::read_to_string(path).map_err(|e| e.to_string()).and_then(|t| parse_config(&t).map_err(|e| e.to_string())) {
            Ok(d) => println!("config {}: ok", d.session.id),
            Err(e) => code = fail(EXIT_CONFIG, format!("{}: {e}", path.display())),
        }
    }
    if let Some(root) = &a.root {
        checked = true;
        let opts = PlanOptions {
            seed: a.seed,
            photons: a.photons,
            wavelength: None,
        };
        match plan(&StorageLayout::new(root), &opts) {
            Ok(m) => {
                let mut config_bad = false;
                let mut output_bad = false;
                for e in m.entries.iter().filter(|e| e.status == JobStatus::Failed) {
                    let reason = e.reason.as_deref().unwrap_or_default();
                    log::error!("{}: {reason}", e.id);
                    if reason.starts_with("config") {
                        config_bad = true;
                    } else {
                        output_bad = true;
                    }
                }
                println!(
                    "root: {} scenarios, {} done, {} pending, {} failed",
                    m.entries.len(),
                    m.count(JobStatus::Done),
                    m.count(JobStatus::Pending),
                    m.count(JobStatus::Failed)
                );
                if config_bad {
                    code = EXIT_CONFIG;
                } else if output_bad && code == 0 {
                    code = EXIT_FAILED;
                }
            }
            Err(e) => code = fail(EXIT_CONFIG, e),
        }
    }
    if !checked {
        return fail(EXIT_CONFIG, "validate needs --catalog, --config or --root");
    }
    code
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    ExitCode::from(match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Run(a) => cmd_run(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Validate(a) => cmd_validate(a),
    })
}
