//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints its own result line; the process fails if any
//! gating criterion fails.

mod common;

use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::time::Instant;

use photonforge::batch::{execute, plan, scenario_seed, ExecuteOptions, JobStatus, PlanOptions, StorageLayout};
use photonforge::catalog::{
    build_catalog, generate_configs, position_sweep, radius_sweep, GenerateOptions, ScenarioTemplate,
};
use photonforge::fixture::{fixture_array, load_fixture, BUILTIN_FIXTURE};
use photonforge::report::reference_ranks;
use photonforge::sim_io::{
    decode_detector_records, encode_detector_records, parse_config, read_fluence, write_config, write_fluence,
    ConfigDocument, DetectorSection,
};
use photonforge::simulate::{run_simulation, RunOptions};
use photonforge_core::analysis::{compare_tpsf, coupling_diagnostic, tpsf_gate_curve, Matrix, TPSFParams};
use photonforge_core::transport::{
    boundary_interact, sample_free_path, sample_hg_cosine, BoundaryOutcome, C_VACUUM_MM_PER_PS,
};
use photonforge_core::{place_on_sphere, AngularPlacement, RngStream, TissueTag, Vec3};
use proptest::test_runner::{Config, TestRunner};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// First scenario of the radius sweep as a config at `voxel` mm.
fn layered_doc(voxel: f64) -> ConfigDocument {
    let t = ScenarioTemplate::default();
    let s: Vec<_> = radius_sweep(&t, &[]).into_iter().take(1).map(Result::unwrap).collect();
    let rec = build_catalog(&t, &s).resolve_all().remove(0).unwrap();
    rec.to_config(Path::new("."), voxel).unwrap()
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn energy_conservation() -> Outcome {
    let mut doc = layered_doc(1.0);
    doc.session.photon_count = 100_000;
    let workers = cores();
    let started = Instant::now();
    let out = run_simulation(&doc, &RunOptions { workers, ..RunOptions::default() }).unwrap();
    let wall = started.elapsed().as_secs_f64();
    // the budget is for 4 cores; fewer cores get proportionally more time
    let budget = 30.0 * 4.0 / workers.min(4) as f64;
    let fluence_gap = (out.fluence.total() - out.summary.absorbed).abs() / out.summary.launched;
    let r = out.summary.relative_residual;
    outcome(
        r <= 1e-9 && wall < budget,
        format!(
            "residual {r:.2e} (fluence vs absorbed {fluence_gap:.1e}), {wall:.1} s on {workers} core(s), budget {budget:.0} s"
        ),
    )
}

fn hg_moments() -> Outcome {
    let started = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for (i, g) in [0.0, 0.9, 0.9835].into_iter().enumerate() {
        let mut rng = RngStream::new(2024, i as u64);
        let xs: Vec<f64> = (0..1_000_000).map(|_| sample_hg_cosine(g, rng.uniform_open())).collect();
        let (mean, se) = mean_se(&xs);
        let ok = (mean - g).abs() <= 3.0 * se;
        pass &= ok;
        parts.push(format!("g={g}: |{mean:.5}-g|={:.1e} vs 3SE={:.1e}", (mean - g).abs(), 3.0 * se));
    }
    let wall = started.elapsed().as_secs_f64();
    outcome(pass && wall < 5.0, format!("{}; {wall:.2} s", parts.join(", ")))
}

fn free_path() -> Outcome {
    let mu_t = 0.6791;
    let mut rng = RngStream::new(7, 0);
    let xs: Vec<f64> = (0..1_000_000).map(|_| sample_free_path(&mut rng, mu_t).unwrap()).collect();
    let (mean, _) = mean_se(&xs);
    let rel = (mean - 1.4725).abs() / 1.4725;
    outcome(rel <= 0.01, format!("mean {mean:.4} mm, {:.3}% from 1.4725", rel * 100.0))
}

fn fresnel() -> Outcome {
    let mut rng = RngStream::new(11, 0);
    let down = Vec3::new(0.0, 0.0, -1.0);
    let normal = Vec3::new(0.0, 0.0, 1.0);
    let n = 100_000;
    let reflected = (0..n)
        .filter(|_| matches!(boundary_interact(&mut rng, down, normal, 1.4, 1.0), BoundaryOutcome::Reflected(_)))
        .count();
    let f = reflected as f64 / n as f64;
    outcome((f - 0.0278).abs() <= 0.002, format!("reflected fraction {f:.4}"))
}

fn tpsf_shape() -> Outcome {
    let mut doc = layered_doc(1.0);
    let brain = doc.domain.media[TissueTag::Brain as usize];
    doc.session.id = "homogeneous_brain".into();
    doc.session.photon_count = 1_000_000;
    doc.shapes.truncate(4);
    for tag in TissueTag::LAYERS {
        doc.domain.media[tag as usize] = brain;
    }
    let center = Vec3::from(doc.shapes[0].center);
    let scalp = doc.shapes[0].radius;
    let src = Vec3::from(doc.optode.source.pos);
    let a = AngularPlacement::of_point(center, src).unwrap();
    // 20 mm chord along the meridian
    let dtheta = (2.0 * (10.0 / scalp).asin()).to_degrees();
    let det = place_on_sphere(center, scalp, AngularPlacement::new(a.elevation() + dtheta, a.azimuth()).unwrap());
    let sds = det.distance(src);
    doc.optode.detectors = vec![DetectorSection {
        pos: det.to_array(),
        radius: photonforge_core::optodes::DEFAULT_DETECTOR_RADIUS,
    }];
    let started = Instant::now();
    let workers = cores();
    let out = run_simulation(&doc, &RunOptions { workers, ..RunOptions::default() }).unwrap();
    let wall = started.elapsed().as_secs_f64();
    let gates = doc.forward.gates();
    let mut weights = vec![0.0; gates.count];
    let mut counts = vec![0u64; gates.count];
    for r in out.detectors.records() {
        let g = gates.gate_of(r.time_of_flight);
        weights[g] += r.exit_weight;
        counts[g] += 1;
    }
    let p = TPSFParams::for_medium(&brain, sds, C_VACUUM_MM_PER_PS).unwrap();
    let analytic = tpsf_gate_curve(&p, &gates);
    let budget = 180.0 * 4.0 / workers.min(4) as f64;
    match compare_tpsf(&weights, &counts, &analytic, &gates) {
        Ok(c) => outcome(
            c.pearson_r >= 0.95 && c.peak_delta <= 300.0 && wall < budget,
            format!(
                "r {:.4} over {} gates, peak delta {:.0} ps, {} detected photons, {wall:.1} s on {workers} core(s), budget {budget:.0} s",
                c.pearson_r,
                c.gates_used,
                c.peak_delta,
                out.detectors.len()
            ),
        ),
        Err(e) => outcome(false, format!("{e} ({} detected photons)", out.detectors.len())),
    }
}

fn optode_fidelity() -> Outcome {
    const CENTER: Vec3 = Vec3::new(93.0, 93.0, 93.0);
    const DETECTORS: [[f64; 3]; 6] = [
        [99.41, 184.58, 83.35],
        [99.41, 184.58, 102.65],
        [116.76, 181.67, 83.35],
        [116.76, 181.67, 102.65],
        [134.68, 174.79, 83.35],
        [134.68, 174.79, 102.65],
    ];
    const SOURCES: [([f64; 3], [f64; 3]); 6] = [
        ([89.77, 185.25, 93.0], [3.23, -92.25, 0.0]),
        ([108.74, 182.23, 110.62], [-15.74, -89.23, -17.62]),
        ([109.03, 183.9, 93.0], [-16.03, -90.9, 0.0]),
        ([125.47, 177.59, 110.62], [-32.47, -84.59, -17.62]),
        ([126.08, 179.17, 93.0], [-33.08, -86.17, 0.0]),
        ([142.35, 168.99, 110.62], [-49.35, -75.99, -17.62]),
    ];
    let entries = load_fixture(BUILTIN_FIXTURE, Path::new(".")).unwrap();
    let array = fixture_array(&entries, CENTER).unwrap();
    let mut worst_pos: f64 = 0.0;
    let mut worst_radius: f64 = 0.0;
    let mut worst_dir: f64 = 0.0;
    let mut table_dir: f64 = 0.0;
    for (i, p) in DETECTORS.iter().enumerate() {
        let got = array.detectors[i].position;
        worst_pos = worst_pos.max((got - Vec3::from(*p)).to_array().iter().fold(0.0f64, |m, x| m.max(x.abs())));
        worst_radius = worst_radius.max((got.distance(CENTER) - 92.31).abs());
    }
    for (i, (p, d)) in SOURCES.iter().enumerate() {
        let s = &array.sources[i];
        worst_pos = worst_pos.max((s.position - Vec3::from(*p)).to_array().iter().fold(0.0f64, |m, x| m.max(x.abs())));
        worst_radius = worst_radius.max((s.position.distance(CENTER) - 92.31).abs());
        let want = (CENTER - s.position).normalized().unwrap();
        worst_dir = worst_dir.max((s.direction - want).norm());
        table_dir = table_dir.max((CENTER - Vec3::from(*p) - Vec3::from(*d)).to_array().iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }
    outcome(
        worst_pos <= 0.05 && worst_radius <= 0.02 && worst_dir <= 1e-12 && table_dir <= 1e-9,
        format!(
            "12 rows: max position error {worst_pos:.3} mm, max |r-92.31| {worst_radius:.3} mm, direction error {worst_dir:.1e}"
        ),
    )
}

fn sweep_counts(tmp: &Path) -> Outcome {
    let t = ScenarioTemplate::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, scenarios, want) in [
        ("radius", radius_sweep(&t, &[]), 72),
        ("position", position_sweep(&t, &[]), 7581),
    ] {
        let ok: Vec<_> = scenarios.into_iter().filter_map(Result::ok).collect();
        let catalog = build_catalog(&t, &ok);
        let dir = tmp.join(format!("sweep_{name}"));
        let opts = GenerateOptions::default();
        let first = generate_configs(&catalog, &dir, &opts).unwrap();
        let again = generate_configs(&catalog, &dir, &opts).unwrap();
        let on_disk = fs::read_dir(&dir).unwrap().count();
        let good = first.written.len() == want && on_disk == want && again.written.is_empty() && first.errors.is_empty();
        pass &= good;
        parts.push(format!(
            "{name}: {} written, {} on rerun",
            first.written.len(),
            again.written.len()
        ));
    }
    outcome(pass, parts.join("; "))
}

fn determinism(tmp: &Path) -> Outcome {
    let t = ScenarioTemplate::default();
    let all: Vec<_> = radius_sweep(&t, &[]).into_iter().map(Result::unwrap).collect();
    let mut picked = Vec::new();
    let mut k = 0;
    while picked.len() < 3 {
        let i = (scenario_seed(0xacce, &k.to_string()) % all.len() as u64) as usize;
        if !picked.contains(&i) {
            picked.push(i);
        }
        k += 1;
    }
    let chosen: Vec<_> = picked.iter().map(|&i| all[i].clone()).collect();
    let catalog = build_catalog(&t, &chosen);
    let opts = PlanOptions {
        seed: Some(20240),
        photons: Some(20_000),
        wavelength: None,
    };
    let mut roots = Vec::new();
    for workers in [1, 8] {
        let layout = StorageLayout::new(tmp.join(format!("det_{workers}")));
        layout.init().unwrap();
        let g = GenerateOptions {
            voxel_size: 4.0,
            ..GenerateOptions::default()
        };
        generate_configs(&catalog, &layout.input_dir(), &g).unwrap();
        let r = execute(&layout, plan(&layout, &opts).unwrap(), &ExecuteOptions { workers, stop_after: None }).unwrap();
        assert!(r.success());
        roots.push((layout, r.manifest));
    }
    let (a, m) = &roots[0];
    let b = &roots[1].0;
    let mut same = 0;
    let mut rows = 0;
    for e in m.entries.iter().filter(|e| e.status == JobStatus::Done) {
        let x = fs::read(a.detectors_path(&e.id)).unwrap();
        let y = fs::read(b.detectors_path(&e.id)).unwrap();
        rows += decode_detector_records(&x).unwrap().len();
        same += usize::from(x == y);
    }
    outcome(
        same == 3,
        format!("scenarios {picked:?}: {same}/3 detector files byte-identical ({rows} records)"),
    )
}

fn rank_plausibility() -> Outcome {
    let mut doc = layered_doc(1.0);
    doc.session.photon_count = 1_000_000;
    let n = doc.session.photon_count as f64;
    let source = doc.optode.source.index as usize;
    let out = run_simulation(&doc, &RunOptions { workers: cores(), ..RunOptions::default() }).unwrap();
    let dets = doc.optode.detectors.len();
    let mut sum = vec![0.0; dets];
    let mut sq = vec![0.0; dets];
    let mut hits = vec![0u64; dets];
    for r in out.detectors.records() {
        let d = r.detector_index as usize;
        sum[d] += r.exit_weight;
        sq[d] += r.exit_weight * r.exit_weight;
        hits[d] += 1;
    }
    let ranks = reference_ranks(32).unwrap();
    let row = ranks.row(source);
    // rank -> (sum of per-detector means, sum of their variances, detectors, detections)
    let mut groups: std::collections::BTreeMap<u32, (f64, f64, usize, u64)> = Default::default();
    for d in 0..dets {
        let mean = sum[d] / n;
        let var = (sq[d] / n - mean * mean).max(0.0) / n;
        let g = groups.entry(row[d]).or_default();
        g.0 += mean;
        g.1 += var;
        g.2 += 1;
        g.3 += hits[d];
    }
    let all = groups.len();
    // groups with fewer than 10 detections are too sparse for a standard error
    let stats: Vec<(u32, f64, f64)> = groups
        .into_iter()
        .filter(|(_, g)| g.3 >= 10)
        .map(|(rank, (s, v, c, _))| (rank, s / c as f64, v.sqrt() / c as f64))
        .collect();
    let mut violations = Vec::new();
    for w in stats.windows(2) {
        let (r0, m0, se0) = w[0];
        let (r1, m1, se1) = w[1];
        if m1 > m0 + (se0 * se0 + se1 * se1).sqrt() {
            violations.push(format!("rank {r0}->{r1}: {m0:.2e}->{m1:.2e}"));
        }
    }
    outcome(
        violations.is_empty() && stats.len() >= 3,
        format!(
            "source {source}: {} of {all} rank groups hold >= 10 detections, {} detected photons, means {}{}",
            stats.len(),
            out.detectors.len(),
            stats.iter().map(|s| format!("{:.1e}", s.1)).collect::<Vec<_>>().join(" "),
            if violations.is_empty() {
                String::new()
            } else {
                format!("; increases: {}", violations.join(", "))
            }
        ),
    )
}

fn diagnostics() -> Outcome {
    let ranks = reference_ranks(64).unwrap();
    let uniform = Matrix::filled(64, 32, 3.5);
    let u = coupling_diagnostic(&uniform, &ranks, 1.0).unwrap();
    let mut dead = uniform.clone();
    for s in 0..64 {
        dead.set(s, 3, 3.5 * 0.01);
    }
    let d = coupling_diagnostic(&dead, &ranks, 1.0).unwrap();
    outcome(
        u.flags.is_empty() && d.flagged_detectors() == [3] && d.flagged_sources().is_empty(),
        format!(
            "uniform: {} flags; dead column: detectors {:?}, sources {:?}",
            u.flags.len(),
            d.flagged_detectors(),
            d.flagged_sources()
        ),
    )
}

fn round_trips() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let cfg = runner.run(&common::config_doc(), |doc| {
        let back = parse_config(&write_config(&doc)).map_err(|e| proptest::test_runner::TestCaseError::fail(e.to_string()))?;
        proptest::prop_assert_eq!(back, doc);
        Ok(())
    });
    let det = runner.run(&common::detector_set(), |set| {
        proptest::prop_assert_eq!(decode_detector_records(&encode_detector_records(&set)).unwrap(), set);
        Ok(())
    });
    let flu = runner.run(&common::fluence_grid(), |grid| {
        let mut buf = Cursor::new(Vec::new());
        write_fluence(&mut buf, &grid).unwrap();
        proptest::prop_assert_eq!(read_fluence(buf.into_inner().as_slice()).unwrap(), grid);
        Ok(())
    });
    fn show<T: std::fmt::Debug>(r: &Result<(), proptest::test_runner::TestError<T>>) -> String {
        match r {
            Ok(()) => "ok".into(),
            Err(e) => e.to_string(),
        }
    }
    outcome(
        cfg.is_ok() && det.is_ok() && flu.is_ok(),
        format!(
            "1000 cases each: config {}, detector records {}, fluence {}",
            show(&cfg),
            show(&det),
            show(&flu)
        ),
    )
}

fn throughput() -> Outcome {
    let mut doc = layered_doc(1.0);
    doc.session.photon_count = 20_000;
    let out = run_simulation(&doc, &RunOptions::default()).unwrap();
    let rate = out.summary.photons_per_second;
    outcome(
        rate >= 1e5,
        format!("{rate:.0} photon walks/s on one core at 830 nm (goal 100000)"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path();
    type Check<'a> = (u32, &'a str, bool, Box<dyn Fn() -> Outcome + 'a>);
    let checks: Vec<Check> = vec![
        (1, "energy conservation", true, Box::new(energy_conservation)),
        (2, "HG moments", true, Box::new(hg_moments)),
        (3, "free path", true, Box::new(free_path)),
        (4, "Fresnel", true, Box::new(fresnel)),
        (5, "TPSF shape", true, Box::new(tpsf_shape)),
        (6, "optode fidelity", true, Box::new(optode_fidelity)),
        (7, "sweep counts", true, Box::new(move || sweep_counts(t))),
        (8, "determinism", true, Box::new(move || determinism(t))),
        (9, "rank plausibility", true, Box::new(rank_plausibility)),
        (10, "diagnostics", true, Box::new(diagnostics)),
        (11, "format round-trips", true, Box::new(round_trips)),
        (12, "throughput", false, Box::new(throughput)),
    ];
    let mut gating_failures = 0;
    for (n, name, gating, check) in checks {
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if gating { "" } else { " [performance goal, not gating]" };
        println!("criterion {n:>2} {verdict} {name}: {}{note}", o.detail);
        if gating && !o.pass {
            gating_failures += 1;
        }
    }
    if gating_failures > 0 {
        eprintln!("{gating_failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
