//! Optode fixture files.
//!
//! A fixture is a small CSV document whose first line names the format
//! version, followed by a header and one row per optode:
//!
//! ```text
//! # photonforge optode fixture v1
//! index,class,elevation_deg,azimuth_deg,radius_mm
//! 0,detector,-6,4,92.3
//! ```

use std::path::Path;

use photonforge_core::optodes::{
    array_from_fixture, reference_fixture, AngularPlacement, FixtureEntry, OptodeArray, OptodeClass,
    OptodeError, DEFAULT_DETECTOR_RADIUS,
};
use photonforge_core::Vec3;

pub const FIXTURE_VERSION_LINE: &str = "# photonforge optode fixture v1";
const HEADER: [&str; 5] = ["index", "class", "elevation_deg", "azimuth_deg", "radius_mm"];

/// Name under which the shipped reference fixture is referenced.
pub const BUILTIN_FIXTURE: &str = "optodes_v1";

/// The reference 2×16 grid as shipped in `fixtures/optodes_v1.csv`.
pub const BUILTIN_FIXTURE_TEXT: &str = include_str!("../../../fixtures/optodes_v1.csv");

#[derive(Debug, thiserror::Error)]
pub enum FixtureError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported fixture version line {0:?}")]
    Version(String),
    #[error(transparent)]
    Optode(#[from] OptodeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn write_fixture(entries: &[FixtureEntry]) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for e in entries {
        w.write_record([
            e.index.to_string(),
            e.class.name().to_string(),
            e.placement.elevation().to_string(),
            e.placement.azimuth().to_string(),
            e.radius.to_string(),
        ])
        .expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf-8");
    format!("{FIXTURE_VERSION_LINE}\n{body}")
}

pub fn parse_fixture(text: &str) -> Result<Vec<FixtureEntry>, FixtureError> {
    let first = text.lines().next().unwrap_or("");
    if first.trim_end() != FIXTURE_VERSION_LINE {
        return Err(FixtureError::Version(first.to_string()));
    }
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rd.headers().map_err(|e| FixtureError::Parse {
        line: 2,
        message: e.to_string(),
    })?;
    if headers.iter().ne(HEADER) {
        return Err(FixtureError::Parse {
            line: 2,
            message: format!("expected header {}", HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| FixtureError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| FixtureError::Parse { line, message };
        let num = |i: usize| -> Result<f64, FixtureError> {
            row[i]
                .parse::<f64>()
                .map_err(|_| bad(format!("{} is not a number: {:?}", HEADER[i], &row[i])))
        };
        let index = row[0]
            .parse::<usize>()
            .map_err(|_| bad(format!("bad index {:?}", &row[0])))?;
        let class = OptodeClass::from_name(&row[1]).ok_or_else(|| bad(format!("unknown class {:?}", &row[1])))?;
        let placement = AngularPlacement::new(num(2)?, num(3)?).map_err(|e| bad(e.to_string()))?;
        let radius = num(4)?;
        if !(radius > 0.0) {
            return Err(bad("radius must be positive".into()));
        }
        out.push(FixtureEntry {
            index,
            class,
            placement,
            radius,
        });
    }
    for class in [OptodeClass::Source, OptodeClass::Detector] {
        let mut idx: Vec<usize> = out.iter().filter(|e| e.class == class).map(|e| e.index).collect();
        idx.sort_unstable();
        if idx.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(FixtureError::Parse {
                line: 0,
                message: format!("{} indices must be 0..n without gaps", class.name()),
            });
        }
    }
    Ok(out)
}

/// Loads a fixture by reference: the built-in name or a file path
/// (relative paths are resolved against `base`).
pub fn load_fixture(reference: &str, base: &Path) -> Result<Vec<FixtureEntry>, FixtureError> {
    if reference == BUILTIN_FIXTURE {
        return parse_fixture(BUILTIN_FIXTURE_TEXT);
    }
    let path = base.join(reference);
    parse_fixture(&std::fs::read_to_string(path)?)
}

/// Optode array of a fixture around `center` with the default detector radius.
pub fn fixture_array(entries: &[FixtureEntry], center: Vec3) -> Result<OptodeArray, FixtureError> {
    Ok(array_from_fixture(center, entries, DEFAULT_DETECTOR_RADIUS)?)
}

/// Text of the reference fixture for a given placement radius.
pub fn reference_fixture_text(radius: f64) -> String {
    write_fixture(&reference_fixture(radius))
}
