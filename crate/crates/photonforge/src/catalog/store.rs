//! Catalog persistence: newline-delimited JSON or an SQLite file. Both
//! hold the same tables and preserve row order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rusqlite::{params, Connection};
use serde::{Deserialize, Serialize};

use super::{
    Catalog, CatalogError, Forward, HeadModel, HeadModelElement, Media, Session, Shape,
    ShapeElementMedia, Simulation, Source, Sphere,
};
use crate::sim_io::{write_atomic, FormatError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CatalogFormat {
    Ndjson,
    Sqlite,
}

impl CatalogFormat {
    /// `.sqlite`, `.sqlite3` and `.db` are SQLite; anything else is NDJSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("sqlite" | "sqlite3" | "db") => CatalogFormat::Sqlite,
            _ => CatalogFormat::Ndjson,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "table")]
enum Row {
    Simulations(Simulation),
    Sessions(Session),
    Forward(Forward),
    Shapes(Shape),
    Spheres(Sphere),
    ShapeElementsMedia(ShapeElementMedia),
    Media(Media),
    HeadModels(HeadModel),
    HeadModelElements(HeadModelElement),
    Sources(Source),
}

pub fn load_catalog(path: &Path) -> Result<Catalog, CatalogError> {
    let c = match CatalogFormat::from_path(path) {
        CatalogFormat::Ndjson => load_ndjson(path)?,
        CatalogFormat::Sqlite => load_sqlite(path)?,
    };
    c.check_keys()?;
    Ok(c)
}

pub fn save_catalog(catalog: &Catalog, path: &Path) -> Result<(), CatalogError> {
    match CatalogFormat::from_path(path) {
        CatalogFormat::Ndjson => save_ndjson(catalog, path),
        CatalogFormat::Sqlite => save_sqlite(catalog, path),
    }
}

pub fn write_ndjson<W: Write>(catalog: &Catalog, mut w: W) -> Result<(), CatalogError> {
    let mut line = |row: Row| -> Result<(), CatalogError> {
        serde_json::to_writer(&mut w, &row).map_err(|e| CatalogError::Schema(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    };
    let c = catalog.clone();
    c.forward.into_iter().try_for_each(|r| line(Row::Forward(r)))?;
    c.sources.into_iter().try_for_each(|r| line(Row::Sources(r)))?;
    c.media.into_iter().try_for_each(|r| line(Row::Media(r)))?;
    c.spheres.into_iter().try_for_each(|r| line(Row::Spheres(r)))?;
    c.shapes.into_iter().try_for_each(|r| line(Row::Shapes(r)))?;
    c.head_models.into_iter().try_for_each(|r| line(Row::HeadModels(r)))?;
    c.head_model_elements
        .into_iter()
        .try_for_each(|r| line(Row::HeadModelElements(r)))?;
    c.shape_elements_media
        .into_iter()
        .try_for_each(|r| line(Row::ShapeElementsMedia(r)))?;
    c.sessions.into_iter().try_for_each(|r| line(Row::Sessions(r)))?;
    c.simulations.into_iter().try_for_each(|r| line(Row::Simulations(r)))?;
    Ok(())
}

/// Reads NDJSON rows; blank lines are ignored.
pub fn read_ndjson<R: Read>(r: R) -> Result<Catalog, CatalogError> {
    let mut c = Catalog::default();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| CatalogError::Ndjson {
            line: i + 1,
            message: e.to_string(),
        })?;
        match row {
            Row::Simulations(r) => c.simulations.push(r),
            Row::Sessions(r) => c.sessions.push(r),
            Row::Forward(r) => c.forward.push(r),
            Row::Shapes(r) => c.shapes.push(r),
            Row::Spheres(r) => c.spheres.push(r),
            Row::ShapeElementsMedia(r) => c.shape_elements_media.push(r),
            Row::Media(r) => c.media.push(r),
            Row::HeadModels(r) => c.head_models.push(r),
            Row::HeadModelElements(r) => c.head_model_elements.push(r),
            Row::Sources(r) => c.sources.push(r),
        }
    }
    Ok(c)
}

pub fn load_ndjson(path: &Path) -> Result<Catalog, CatalogError> {
    read_ndjson(fs::File::open(path)?)
}

pub fn save_ndjson(catalog: &Catalog, path: &Path) -> Result<(), CatalogError> {
    let mut buf = Vec::new();
    write_ndjson(catalog, &mut buf)?;
    write_atomic(path, |f| {
        f.write_all(&buf)?;
        Ok(())
    })
    .map_err(|e| match e {
        FormatError::Io(e) => CatalogError::Io(e),
        other => CatalogError::Schema(other.to_string()),
    })
}

const SCHEMA: &str = "
CREATE TABLE Forward (id INTEGER PRIMARY KEY, t0 REAL NOT NULL, t1 REAL NOT NULL, dt REAL NOT NULL);
CREATE TABLE Sources (id INTEGER PRIMARY KEY, optode_fixture_ref TEXT NOT NULL, active_source_index INTEGER NOT NULL);
CREATE TABLE Media (id INTEGER PRIMARY KEY, tissue_tag INTEGER NOT NULL, wavelength INTEGER NOT NULL,
    mua REAL NOT NULL, mus REAL NOT NULL, g REAL NOT NULL, n REAL NOT NULL);
CREATE TABLE Spheres (id INTEGER PRIMARY KEY, center_x REAL NOT NULL, center_y REAL NOT NULL,
    center_z REAL NOT NULL, radius REAL NOT NULL);
CREATE TABLE Shapes (id INTEGER PRIMARY KEY, name TEXT NOT NULL);
CREATE TABLE HeadModels (id INTEGER PRIMARY KEY, name TEXT NOT NULL);
CREATE TABLE HeadModelElements (head_model_id INTEGER NOT NULL REFERENCES HeadModels(id),
    shape_id INTEGER NOT NULL REFERENCES Shapes(id), layer_order INTEGER NOT NULL);
CREATE TABLE ShapeElementsMedia (shape_id INTEGER NOT NULL REFERENCES Shapes(id),
    element_kind TEXT NOT NULL, element_id INTEGER NOT NULL, media_id INTEGER REFERENCES Media(id));
CREATE TABLE Sessions (id INTEGER PRIMARY KEY, photon_count INTEGER NOT NULL, rng_seed INTEGER NOT NULL,
    mismatch_flag INTEGER NOT NULL);
CREATE TABLE Simulations (id INTEGER PRIMARY KEY, session_id INTEGER NOT NULL REFERENCES Sessions(id),
    forward_id INTEGER NOT NULL REFERENCES Forward(id), sources_id INTEGER NOT NULL REFERENCES Sources(id),
    shapes_id INTEGER NOT NULL REFERENCES Shapes(id));
";

const TABLES: [&str; 10] = [
    "Simulations",
    "Sessions",
    "ShapeElementsMedia",
    "HeadModelElements",
    "HeadModels",
    "Shapes",
    "Spheres",
    "Media",
    "Sources",
    "Forward",
];

/// Writes the catalog into `path`, replacing any catalog tables already there.
/// Unsigned 64-bit fields are stored as their two's-complement bit pattern.
pub fn save_sqlite(catalog: &Catalog, path: &Path) -> Result<(), CatalogError> {
    let mut conn = Connection::open(path)?;
    let tx = conn.transaction()?;
    for t in TABLES {
        tx.execute_batch(&format!("DROP TABLE IF EXISTS {t};"))?;
    }
    tx.execute_batch(SCHEMA)?;
    {
        let mut st = tx.prepare("INSERT INTO Forward VALUES (?1, ?2, ?3, ?4)")?;
        for r in &catalog.forward {
            st.execute(params![r.id, r.t0, r.t1, r.dt])?;
        }
        let mut st = tx.prepare("INSERT INTO Sources VALUES (?1, ?2, ?3)")?;
        for r in &catalog.sources {
            st.execute(params![r.id, r.optode_fixture_ref, r.active_source_index])?;
        }
        let mut st = tx.prepare("INSERT INTO Media VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7)")?;
        for r in &catalog.media {
            st.execute(params![r.id, r.tissue_tag, r.wavelength, r.mua, r.mus, r.g, r.n])?;
        }
        let mut st = tx.prepare("INSERT INTO Spheres VALUES (?1, ?2, ?3, ?4, ?5)")?;
        for r in &catalog.spheres {
            st.execute(params![r.id, r.center_x, r.center_y, r.center_z, r.radius])?;
        }
        let mut st = tx.prepare("INSERT INTO Shapes VALUES (?1, ?2)")?;
        for r in &catalog.shapes {
            st.execute(params![r.id, r.name])?;
        }
        let mut st = tx.prepare("INSERT INTO HeadModels VALUES (?1, ?2)")?;
        for r in &catalog.head_models {
            st.execute(params![r.id, r.name])?;
        }
        let mut st = tx.prepare("INSERT INTO HeadModelElements VALUES (?1, ?2, ?3)")?;
        for r in &catalog.head_model_elements {
            st.execute(params![r.head_model_id, r.shape_id, r.layer_order])?;
        }
        let mut st = tx.prepare("INSERT INTO ShapeElementsMedia VALUES (?1, ?2, ?3, ?4)")?;
        for r in &catalog.shape_elements_media {
            st.execute(params![r.shape_id, r.element_kind, r.element_id, r.media_id])?;
        }
        let mut st = tx.prepare("INSERT INTO Sessions VALUES (?1, ?2, ?3, ?4)")?;
        for r in &catalog.sessions {
            st.execute(params![r.id, r.photon_count as i64, r.rng_seed as i64, r.mismatch_flag])?;
        }
        let mut st = tx.prepare("INSERT INTO Simulations VALUES (?1, ?2, ?3, ?4, ?5)")?;
        for r in &catalog.simulations {
            st.execute(params![r.id, r.session_id, r.forward_id, r.sources_id, r.shapes_id])?;
        }
    }
    tx.commit()?;
    Ok(())
}

fn rows<T>(
    conn: &Connection,
    table: &str,
    f: impl FnMut(&rusqlite::Row<'_>) -> rusqlite::Result<T>,
) -> Result<Vec<T>, CatalogError> {
    let mut st = conn.prepare(&format!("SELECT * FROM {table} ORDER BY rowid"))?;
    let out = st.query_map([], f)?.collect::<Result<Vec<_>, _>>()?;
    Ok(out)
}

pub fn load_sqlite(path: &Path) -> Result<Catalog, CatalogError> {
    if !path.exists() {
        return Err(CatalogError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", path.display()),
        )));
    }
    let conn = Connection::open_with_flags(path, rusqlite::OpenFlags::SQLITE_OPEN_READ_ONLY)?;
    Ok(Catalog {
        forward: rows(&conn, "Forward", |r| {
            Ok(Forward {
                id: r.get(0)?,
                t0: r.get(1)?,
                t1: r.get(2)?,
                dt: r.get(3)?,
            })
        })?,
        sources: rows(&conn, "Sources", |r| {
            Ok(Source {
                id: r.get(0)?,
                optode_fixture_ref: r.get(1)?,
                active_source_index: r.get(2)?,
            })
        })?,
        media: rows(&conn, "Media", |r| {
            Ok(Media {
                id: r.get(0)?,
                tissue_tag: r.get(1)?,
                wavelength: r.get(2)?,
                mua: r.get(3)?,
                mus: r.get(4)?,
                g: r.get(5)?,
                n: r.get(6)?,
            })
        })?,
        spheres: rows(&conn, "Spheres", |r| {
            Ok(Sphere {
                id: r.get(0)?,
                center_x: r.get(1)?,
                center_y: r.get(2)?,
                center_z: r.get(3)?,
                radius: r.get(4)?,
            })
        })?,
        shapes: rows(&conn, "Shapes", |r| {
            Ok(Shape {
                id: r.get(0)?,
                name: r.get(1)?,
            })
        })?,
        head_models: rows(&conn, "HeadModels", |r| {
            Ok(HeadModel {
                id: r.get(0)?,
                name: r.get(1)?,
            })
        })?,
        head_model_elements: rows(&conn, "HeadModelElements", |r| {
            Ok(HeadModelElement {
                head_model_id: r.get(0)?,
                shape_id: r.get(1)?,
                layer_order: r.get(2)?,
            })
        })?,
        shape_elements_media: rows(&conn, "ShapeElementsMedia", |r| {
            Ok(ShapeElementMedia {
                shape_id: r.get(0)?,
                element_kind: r.get(1)?,
                element_id: r.get(2)?,
                media_id: r.get(3)?,
            })
        })?,
        sessions: rows(&conn, "Sessions", |r| {
            Ok(Session {
                id: r.get(0)?,
                photon_count: r.get::<_, i64>(1)? as u64,
                rng_seed: r.get::<_, i64>(2)? as u64,
                mismatch_flag: r.get(3)?,
            })
        })?,
        simulations: rows(&conn, "Simulations", |r| {
            Ok(Simulation {
                id: r.get(0)?,
                session_id: r.get(1)?,
                forward_id: r.get(2)?,
                sources_id: r.get(3)?,
                shapes_id: r.get(4)?,
            })
        })?,
    })
}
