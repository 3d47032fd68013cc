//! Analysis front end: magnitude matrices in CSV, coupling reports,
//! heatmaps and per-scenario detection summaries.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use image::{Rgb, RgbImage};
use photonforge_core::analysis::{coupling_diagnostic, nn_ranks, CouplingReport, Matrix, OptodeRole, RankMatrix};
use photonforge_core::{LayeredHeadModel, Vec3};
use serde::Serialize;

use crate::batch::{JobStatus, StorageLayout};
use crate::fixture::{fixture_array, parse_fixture, BUILTIN_FIXTURE_TEXT};
use crate::sim_io::{parse_config, read_detector_records};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("csv: {0}")]
    Csv(String),
    #[error("{0}")]
    Analysis(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

/// Reads a sources × detectors matrix. The header row is a label cell
/// followed by detector indices; each row starts with its source index.
pub fn read_matrix_csv(text: &str) -> Result<Matrix<f64>, ReportError> {
    let mut rd = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| ReportError::Csv(e.to_string()))?.clone();
    let cols = header.len().saturating_sub(1);
    if cols == 0 {
        return Err(ReportError::Csv("header has no detector columns".into()));
    }
    for (i, h) in header.iter().skip(1).enumerate() {
        if h.parse::<usize>() != Ok(i) {
            return Err(ReportError::Csv(format!("header column {} should be detector {i}, got {h:?}", i + 1)));
        }
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rd.records() {
        let rec = rec.map_err(|e| ReportError::Csv(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec[0].parse::<usize>() != Ok(rows) {
            return Err(ReportError::Csv(format!("line {line}: expected source index {rows}")));
        }
        for v in rec.iter().skip(1) {
            let x: f64 = v
                .parse()
                .map_err(|_| ReportError::Csv(format!("line {line}: {v:?} is not a number")))?;
            if !x.is_finite() || x < 0.0 {
                return Err(ReportError::Csv(format!("line {line}: magnitudes must be finite and >= 0")));
            }
            data.push(x);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols, data).map_err(|e| ReportError::Analysis(e.to_string()))
}

pub fn write_matrix_csv(m: &Matrix<f64>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["source".to_string()];
    header.extend((0..m.cols()).map(|d| d.to_string()));
    w.write_record(&header).expect("in-memory write");
    for s in 0..m.rows() {
        let mut row = vec![s.to_string()];
        row.extend(m.row(s).iter().map(|v| v.to_string()));
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// NN ranks of the built-in 32 × 32 grid on the reference head. A matrix
/// with k·32 rows is read as k consecutive rows per physical source (one
/// per wavelength), and each source's ranks are repeated k times.
pub fn reference_ranks(rows: usize) -> Result<RankMatrix, ReportError> {
    let head = LayeredHeadModel::reference();
    let entries = parse_fixture(BUILTIN_FIXTURE_TEXT).map_err(|e| ReportError::Analysis(e.to_string()))?;
    let array = fixture_array(&entries, head.center()).map_err(|e| ReportError::Analysis(e.to_string()))?;
    let src: Vec<Vec3> = array.sources.iter().map(|s| s.position).collect();
    let det: Vec<Vec3> = array.detectors.iter().map(|d| d.position).collect();
    let ranks = nn_ranks(&src, &det).map_err(|e| ReportError::Analysis(e.to_string()))?;
    if rows == 0 || rows % src.len() != 0 {
        return Err(ReportError::Analysis(format!(
            "matrix has {rows} rows; the reference grid needs a multiple of {}",
            src.len()
        )));
    }
    Ok(ranks.duplicate_rows(rows / src.len()))
}

#[derive(Debug, Serialize)]
pub struct FlagOut {
    pub role: &'static str,
    pub index: usize,
    pub median_abs_log10_ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct CouplingOut {
    pub sources: usize,
    pub detectors: usize,
    pub threshold_log10: f64,
    pub max_rank: u32,
    pub flags: Vec<FlagOut>,
    pub excluded_pairs: Vec<(usize, usize)>,
}

pub fn coupling_json(report: &CouplingReport, ranks: &RankMatrix, threshold: f64) -> String {
    let out = CouplingOut {
        sources: ranks.rows(),
        detectors: ranks.cols(),
        threshold_log10: threshold,
        max_rank: ranks.max_rank(),
        flags: report
            .flags
            .iter()
            .map(|f| FlagOut {
                role: match f.role {
                    OptodeRole::Source => "source",
                    OptodeRole::Detector => "detector",
                },
                index: f.index,
                median_abs_log10_ratio: f.median_abs_log_ratio,
            })
            .collect(),
        excluded_pairs: report.excluded.clone(),
    };
    let mut s = serde_json::to_string_pretty(&out).expect("report serializes");
    s.push('\n');
    s
}

/// Runs the coupling check on a CSV matrix against reference ranks.
pub fn coupling_from_csv(text: &str, threshold: f64) -> Result<(CouplingReport, RankMatrix), ReportError> {
    let m = read_matrix_csv(text)?;
    let ranks = reference_ranks(m.rows())?;
    if ranks.cols() != m.cols() {
        return Err(ReportError::Analysis(format!(
            "matrix has {} detector columns, the reference grid has {}",
            m.cols(),
            ranks.cols()
        )));
    }
    let report = coupling_diagnostic(&m, &ranks, threshold).map_err(|e| ReportError::Analysis(e.to_string()))?;
    Ok((report, ranks))
}

fn diverging(t: f64) -> Rgb<u8> {
    // blue (low) - white - red (high), t in [-1, 1]
    let t = t.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t < 0.0 {
        Rgb([fade(t), fade(t), 255])
    } else {
        Rgb([255, fade(t), fade(t)])
    }
}

/// Heatmap of log10 ratios, rows = sources, columns = detectors, `cell`
/// pixels per pair. ±`span` decades saturate; excluded pairs are grey.
pub fn ratio_heatmap(report: &CouplingReport, cell: u32, span: f64) -> RgbImage {
    let (rows, cols) = report.ratios.shape();
    let cell = cell.max(1);
    RgbImage::from_fn(cols as u32 * cell, rows as u32 * cell, |x, y| {
        match report.ratios.get((y / cell) as usize, (x / cell) as usize) {
            Some(r) if r > 0.0 => diverging(r.log10() / span),
            Some(_) => diverging(-1.0),
            None => Rgb([128, 128, 128]),
        }
    })
}

pub fn save_heatmap(report: &CouplingReport, path: &Path) -> Result<(), ReportError> {
    ratio_heatmap(report, 8, 2.0).save(path)?;
    Ok(())
}

/// Detected weight per detector for every scenario with outputs under a root,
/// as CSV (`scenario,photons,detector_0,...`).
pub fn detection_table(layout: &StorageLayout) -> Result<String, ReportError> {
    let manifest = crate::batch::plan(layout, &Default::default()).map_err(|e| ReportError::Analysis(e.to_string()))?;
    let mut rows = Vec::new();
    let mut width = 0;
    for e in &manifest.entries {
        // any complete, readable record file counts, whatever seed made it
        if e.status == JobStatus::Failed || !layout.summary_path(&e.id).exists() {
            continue;
        }
        let Ok(f) = fs::File::open(layout.detectors_path(&e.id)) else {
            continue;
        };
        let Ok(set) = read_detector_records(BufReader::new(f)) else {
            continue;
        };
        let detectors = fs::read_to_string(layout.root.join(&e.config))
            .ok()
            .and_then(|t| parse_config(&t).ok())
            .map_or(0, |d| d.optode.detectors.len());
        let mut w = vec![0.0; detectors];
        for r in set.records() {
            let d = r.detector_index as usize;
            if w.len() <= d {
                w.resize(d + 1, 0.0);
            }
            w[d] += r.exit_weight;
        }
        width = width.max(w.len());
        rows.push((e.id.clone(), set.photon_count, w));
    }
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["scenario".to_string(), "photons".to_string()];
    header.extend((0..width).map(|d| format!("detector_{d}")));
    out.write_record(&header).map_err(|e| ReportError::Csv(e.to_string()))?;
    for (id, n, mut w) in rows {
        w.resize(width, 0.0);
        let mut rec = vec![id, n.to_string()];
        rec.extend(w.iter().map(|v| v.to_string()));
        out.write_record(&rec).map_err(|e| ReportError::Csv(e.to_string()))?;
    }
    Ok(String::from_utf8(out.into_inner().map_err(|e| ReportError::Csv(e.to_string()))?).expect("utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 2.5, 0.0, 3.0, 1e-9, 7.0]).unwrap();
        let back = read_matrix_csv(&write_matrix_csv(&m)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn csv_errors() {
        assert!(read_matrix_csv("source,0,2\n0,1,1\n").is_err());
        assert!(read_matrix_csv("source,0\n1,1\n").is_err());
        assert!(read_matrix_csv("source,0\n0,x\n").is_err());
        assert!(read_matrix_csv("source,0\n0,-1\n").is_err());
    }

    #[test]
    fn reference_ranks_are_duplicated_per_wavelength() {
        let r = reference_ranks(64).unwrap();
        assert_eq!(r.shape(), (64, 32));
        assert_eq!(r.row(0), r.row(1));
        assert!(reference_ranks(33).is_err());
    }

    #[test]
    fn dead_detector_in_csv() {
        let mut m = Matrix::filled(64, 32, 1.0);
        for s in 0..64 {
            m.set(s, 3, 0.01);
        }
        let (report, ranks) = coupling_from_csv(&write_matrix_csv(&m), 1.0).unwrap();
        assert_eq!(report.flagged_detectors(), [3]);
        assert!(report.flagged_sources().is_empty());
        let json = coupling_json(&report, &ranks, 1.0);
        assert!(json.contains("\"detector\""));
        let img = ratio_heatmap(&report, 4, 2.0);
        assert_eq!(img.dimensions(), (128, 256));
    }
}
