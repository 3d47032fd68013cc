//! Relational catalog of simulation scenarios.
//!
//! The catalog is a set of plain tables linked by integer ids:
//!
//! ```text
//! Simulations ─┬─ Sessions
//!              ├─ Forward
//!              ├─ Sources ── optode fixture
//!              └─ Shapes (scene) ── ShapeElementsMedia ─┬─ HeadModels ── HeadModelElements ── Shapes (layer) ── ...
//!                                                       └─ Spheres + Media (inclusion)
//! ```
//!
//! A layer shape carries exactly one sphere element with its medium. The
//! scene shape's `name` is the sweep kind and ends up in the session id.

mod generate;
mod store;
mod sweep;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use photonforge_core::{
    builtin_media, BeamKind, LayerRadii, LayeredHeadModel, SphereInclusion, TissueMedium,
    TissueTag, Vec3, TISSUE_COUNT,
};
use serde::{Deserialize, Serialize};

use crate::fixture::{fixture_array, load_fixture, FixtureError};
use crate::sim_io::{
    write_config, ConfigDocument, DetectorSection, DomainSection, ForwardSection, OptodeSection,
    SessionSection, SourceSection, SphereShape,
};

pub use generate::{generate_configs, GenerateOptions, GenerateReport};
pub use store::{
    load_catalog, load_ndjson, load_sqlite, read_ndjson, save_catalog, save_ndjson, save_sqlite,
    write_ndjson, CatalogFormat,
};
pub use sweep::{
    build_catalog, try_build_catalog, position_sweep, radius_sweep, sweep, ParamRange, ScenarioTemplate, SweepKind,
    SweepSpec, SweepScenario,
};

pub const ELEMENT_HEAD_MODEL: &str = "head_model";
pub const ELEMENT_SPHERE: &str = "sphere";

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("simulation {simulation}: {message}")]
    Record { simulation: i64, message: String },
    #[error("{0}")]
    Schema(String),
    #[error("sweep: {0}")]
    Sweep(String),
    #[error("catalog io: {0}")]
    Io(#[from] std::io::Error),
    #[error("catalog line {line}: {message}")]
    Ndjson { line: usize, message: String },
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error(transparent)]
    Fixture(#[from] FixtureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub id: i64,
    pub session_id: i64,
    pub forward_id: i64,
    pub sources_id: i64,
    pub shapes_id: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: i64,
    pub photon_count: u64,
    pub rng_seed: u64,
    pub mismatch_flag: bool,
}

/// Time window and gate width, ps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forward {
    pub id: i64,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub id: i64,
    pub center_x: f64,
    pub center_y: f64,
    pub center_z: f64,
    pub radius: f64,
}

impl Sphere {
    pub fn center(&self) -> Vec3 {
        Vec3::new(self.center_x, self.center_y, self.center_z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeElementMedia {
    pub shape_id: i64,
    /// `head_model` or `sphere`.
    pub element_kind: String,
    pub element_id: i64,
    /// Medium of a sphere element; empty for head models.
    pub media_id: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Media {
    pub id: i64,
    pub tissue_tag: u8,
    pub wavelength: u32,
    pub mua: f64,
    pub mus: f64,
    pub g: f64,
    pub n: f64,
}

impl Media {
    pub fn medium(&self) -> TissueMedium {
        TissueMedium {
            mua: self.mua,
            mus: self.mus,
            g: self.g,
            n: self.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModel {
    pub id: i64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadModelElement {
    pub head_model_id: i64,
    pub shape_id: i64,
    /// 0 = scalp (outermost) .. 3 = brain.
    pub layer_order: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub id: i64,
    /// `optodes_v1` for the built-in grid, otherwise a fixture file path.
    pub optode_fixture_ref: String,
    pub active_source_index: u32,
}

/// All catalog tables. Row order is preserved by both storage formats.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Catalog {
    pub simulations: Vec<Simulation>,
    pub sessions: Vec<Session>,
    pub forward: Vec<Forward>,
    pub shapes: Vec<Shape>,
    pub spheres: Vec<Sphere>,
    pub shape_elements_media: Vec<ShapeElementMedia>,
    pub media: Vec<Media>,
    pub head_models: Vec<HeadModel>,
    pub head_model_elements: Vec<HeadModelElement>,
    pub sources: Vec<Source>,
}

/// A simulation with every reference resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    pub simulation_id: i64,
    pub kind: String,
    pub session: Session,
    pub forward: Forward,
    pub wavelength: u32,
    pub head_center: Vec3,
    pub layers: LayerRadii,
    pub layer_media: [TissueMedium; 4],
    /// Inclusion spheres with their tissue tag and medium.
    pub inclusions: Vec<(Sphere, TissueTag, TissueMedium)>,
    pub source: Source,
}

fn index_by<T, K: std::hash::Hash + Eq + Copy>(rows: &[T], key: impl Fn(&T) -> K) -> HashMap<K, &T> {
    rows.iter().map(|r| (key(r), r)).collect()
}

impl Catalog {
    pub fn is_empty(&self) -> bool {
        self.simulations.is_empty()
    }

    /// Primary keys must be unique in every keyed table.
    pub fn check_keys(&self) -> Result<(), CatalogError> {
        fn unique<T>(name: &str, rows: &[T], id: impl Fn(&T) -> i64) -> Result<(), CatalogError> {
            let mut seen = std::collections::HashSet::new();
            for r in rows {
                if !seen.insert(id(r)) {
                    return Err(CatalogError::Schema(format!("duplicate id {} in {name}", id(r))));
                }
            }
            Ok(())
        }
        unique("Simulations", &self.simulations, |r| r.id)?;
        unique("Sessions", &self.sessions, |r| r.id)?;
        unique("Forward", &self.forward, |r| r.id)?;
        unique("Shapes", &self.shapes, |r| r.id)?;
        unique("Spheres", &self.spheres, |r| r.id)?;
        unique("Media", &self.media, |r| r.id)?;
        unique("HeadModels", &self.head_models, |r| r.id)?;
        unique("Sources", &self.sources, |r| r.id)
    }

    /// Resolves every simulation; unresolvable ones come back as errors
    /// without stopping the rest.
    pub fn resolve_all(&self) -> Vec<Result<ScenarioRecord, CatalogError>> {
        let r = Resolver::new(self);
        self.simulations.iter().map(|s| r.resolve(s)).collect()
    }

    pub fn resolve(&self, simulation_id: i64) -> Result<ScenarioRecord, CatalogError> {
        let sim = self
            .simulations
            .iter()
            .find(|s| s.id == simulation_id)
            .ok_or_else(|| CatalogError::Record {
                simulation: simulation_id,
                message: "no such simulation".into(),
            })?;
        Resolver::new(self).resolve(sim)
    }
}

struct Resolver<'a> {
    sessions: HashMap<i64, &'a Session>,
    forward: HashMap<i64, &'a Forward>,
    shapes: HashMap<i64, &'a Shape>,
    spheres: HashMap<i64, &'a Sphere>,
    media: HashMap<i64, &'a Media>,
    head_models: HashMap<i64, &'a HeadModel>,
    sources: HashMap<i64, &'a Source>,
    elements: HashMap<i64, Vec<&'a ShapeElementMedia>>,
    layers: HashMap<i64, Vec<&'a HeadModelElement>>,
}

impl<'a> Resolver<'a> {
    fn new(c: &'a Catalog) -> Self {
        let mut elements: HashMap<i64, Vec<_>> = HashMap::new();
        for e in &c.shape_elements_media {
            elements.entry(e.shape_id).or_default().push(e);
        }
        let mut layers: HashMap<i64, Vec<_>> = HashMap::new();
        for e in &c.head_model_elements {
            layers.entry(e.head_model_id).or_default().push(e);
        }
        Self {
            sessions: index_by(&c.sessions, |r| r.id),
            forward: index_by(&c.forward, |r| r.id),
            shapes: index_by(&c.shapes, |r| r.id),
            spheres: index_by(&c.spheres, |r| r.id),
            media: index_by(&c.media, |r| r.id),
            head_models: index_by(&c.head_models, |r| r.id),
            sources: index_by(&c.sources, |r| r.id),
            elements,
            layers,
        }
    }

    fn resolve(&self, sim: &Simulation) -> Result<ScenarioRecord, CatalogError> {
        let err = |message: String| CatalogError::Record {
            simulation: sim.id,
            message,
        };
        fn get<'b, T>(map: &HashMap<i64, &'b T>, id: i64, what: &str) -> Result<&'b T, String> {
            map.get(&id).copied().ok_or_else(|| format!("{what} {id} does not exist"))
        }
        let session = get(&self.sessions, sim.session_id, "session").map_err(err)?;
        let forward = get(&self.forward, sim.forward_id, "forward").map_err(err)?;
        let source = get(&self.sources, sim.sources_id, "source").map_err(err)?;
        let scene = get(&self.shapes, sim.shapes_id, "shape").map_err(err)?;
        let elements = self.elements.get(&scene.id).map(Vec::as_slice).unwrap_or(&[]);

        let mut head = None;
        let mut inclusions = Vec::new();
        let mut wavelength = None;
        let mut check_wavelength = |m: &Media| -> Result<(), CatalogError> {
            match wavelength {
                None => wavelength = Some(m.wavelength),
                Some(w) if w != m.wavelength => {
                    return Err(err(format!(
                        "media {} is at {} nm but the scenario is at {w} nm",
                        m.id, m.wavelength
                    )))
                }
                _ => {}
            }
            Ok(())
        };
        for e in elements {
            match e.element_kind.as_str() {
                ELEMENT_HEAD_MODEL => {
                    if head.is_some() {
                        return Err(err("scene has more than one head model".into()));
                    }
                    head = Some(get(&self.head_models, e.element_id, "head model").map_err(err)?);
                }
                ELEMENT_SPHERE => {
                    let sphere = get(&self.spheres, e.element_id, "sphere").map_err(err)?;
                    let media_id = e
                        .media_id
                        .ok_or_else(|| err(format!("sphere {} has no medium", sphere.id)))?;
                    let m = get(&self.media, media_id, "media").map_err(err)?;
                    check_wavelength(m)?;
                    let tag = TissueTag::from_u8(m.tissue_tag).map_err(|e| err(e.to_string()))?;
                    inclusions.push((sphere.clone(), tag, m.medium()));
                }
                other => return Err(err(format!("unknown element kind {other:?}"))),
            }
        }
        let head = head.ok_or_else(|| err("scene has no head model".into()))?;
        let mut layer_rows: Vec<&HeadModelElement> =
            self.layers.get(&head.id).cloned().unwrap_or_default();
        layer_rows.sort_by_key(|l| l.layer_order);
        if layer_rows.len() != 4 || layer_rows.iter().enumerate().any(|(i, l)| l.layer_order != i as u32) {
            return Err(err(format!(
                "head model {} must have layers 0..3, found {}",
                head.id,
                layer_rows.len()
            )));
        }
        let mut radii = [0.0; 4];
        let mut layer_media = [TissueMedium::AMBIENT; 4];
        let mut center = None;
        for (i, l) in layer_rows.iter().enumerate() {
            let els = self.elements.get(&l.shape_id).map(Vec::as_slice).unwrap_or(&[]);
            let [e] = els else {
                return Err(err(format!("layer shape {} must hold exactly one sphere", l.shape_id)));
            };
            if e.element_kind != ELEMENT_SPHERE {
                return Err(err(format!("layer shape {} must hold a sphere", l.shape_id)));
            }
            let sphere = get(&self.spheres, e.element_id, "sphere").map_err(err)?;
            let m = get(&self.media, e.media_id.unwrap_or(-1), "media").map_err(err)?;
            check_wavelength(m)?;
            let want = TissueTag::LAYERS[i];
            if m.tissue_tag != want as u8 {
                return Err(err(format!("layer {i} medium must be tagged {want}")));
            }
            match center {
                None => center = Some(sphere.center()),
                Some(c) if c != sphere.center() => {
                    return Err(err("layer spheres are not concentric".into()))
                }
                _ => {}
            }
            radii[i] = sphere.radius;
            layer_media[i] = m.medium();
        }
        let layers = LayerRadii {
            scalp: radii[0],
            skull: radii[1],
            csf: radii[2],
            brain: radii[3],
        };
        Ok(ScenarioRecord {
            simulation_id: sim.id,
            kind: scene.name.clone(),
            session: (*session).clone(),
            forward: (*forward).clone(),
            wavelength: wavelength.expect("layers carry media"),
            head_center: center.expect("four layers"),
            layers,
            layer_media,
            inclusions,
            source: (*source).clone(),
        })
    }
}

impl ScenarioRecord {
    pub fn head_model(&self) -> Result<LayeredHeadModel, CatalogError> {
        let err = |message: String| CatalogError::Record {
            simulation: self.simulation_id,
            message,
        };
        let incs = self
            .inclusions
            .iter()
            .map(|(s, tag, _)| SphereInclusion::new(s.center(), s.radius, *tag))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(e.to_string()))?;
        LayeredHeadModel::from_radii(self.head_center, self.layers, incs).map_err(|e| err(e.to_string()))
    }

    /// Media array indexed by tag. Tags not used by the scenario take the
    /// built-in value for the wavelength when one exists, otherwise a
    /// non-interacting placeholder.
    pub fn media_array(&self) -> [TissueMedium; TISSUE_COUNT] {
        let mut out = match builtin_media(self.wavelength) {
            Ok(t) => *t.entries(),
            Err(_) => [TissueMedium::AMBIENT; TISSUE_COUNT],
        };
        for (i, m) in self.layer_media.iter().enumerate() {
            out[TissueTag::LAYERS[i].index()] = *m;
        }
        for (_, tag, m) in &self.inclusions {
            out[tag.index()] = *m;
        }
        out
    }

    /// Config document with an empty session id, before naming.
    fn assemble(&self, fixture_base: &Path, voxel_size: f64) -> Result<ConfigDocument, CatalogError> {
        let err = |message: String| CatalogError::Record {
            simulation: self.simulation_id,
            message,
        };
        let model = self.head_model()?;
        let entries = load_fixture(&self.source.optode_fixture_ref, fixture_base)?;
        let array = fixture_array(&entries, self.head_center)?;
        let src = array
            .sources
            .get(self.source.active_source_index as usize)
            .ok_or_else(|| {
                err(format!(
                    "active source {} not in fixture ({} sources)",
                    self.source.active_source_index,
                    array.sources.len()
                ))
            })?;
        let dims = model.grid_dims(voxel_size).map_err(|e| err(e.to_string()))?;
        let mut shapes = Vec::with_capacity(4 + self.inclusions.len());
        for (i, r) in self.layers.as_array().into_iter().enumerate() {
            shapes.push(SphereShape {
                center: self.head_center.to_array(),
                radius: r,
                tag: TissueTag::LAYERS[i],
            });
        }
        for (s, tag, _) in &self.inclusions {
            shapes.push(SphereShape {
                center: s.center().to_array(),
                radius: s.radius,
                tag: *tag,
            });
        }
        Ok(ConfigDocument {
            session: SessionSection {
                id: String::new(),
                photon_count: self.session.photon_count,
                rng_seed: self.session.rng_seed,
                mismatch_flag: self.session.mismatch_flag,
            },
            forward: ForwardSection {
                t0: self.forward.t0,
                t1: self.forward.t1,
                dt: self.forward.dt,
            },
            optode: OptodeSection {
                source: SourceSection {
                    index: self.source.active_source_index,
                    pos: src.position.to_array(),
                    dir: src.direction.to_array(),
                    kind: BeamKind::Pencil,
                },
                detectors: array
                    .detectors
                    .iter()
                    .map(|d| DetectorSection {
                        pos: d.position.to_array(),
                        radius: d.radius,
                    })
                    .collect(),
            },
            shapes,
            domain: DomainSection {
                wavelength: self.wavelength,
                media: self.media_array(),
                dims,
                voxel_size,
            },
        }
        .canonicalized())
    }

    /// The scenario's config document, canonicalized and named
    /// `{simulation}_{kind}_{hash}` where the hash covers every other field.
    pub fn to_config(&self, fixture_base: &Path, voxel_size: f64) -> Result<ConfigDocument, CatalogError> {
        let mut doc = self.assemble(fixture_base, voxel_size)?;
        let hash = xxhash_rust::xxh64::xxh64(write_config(&doc).as_bytes(), 0);
        let mut id = String::new();
        write!(id, "{}_{}_{hash:016x}", self.simulation_id, sanitize(&self.kind)).expect("string write");
        doc.session.id = id;
        doc.validate().map_err(|e| CatalogError::Record {
            simulation: self.simulation_id,
            message: e.to_string(),
        })?;
        Ok(doc)
    }
}

fn sanitize(kind: &str) -> String {
    let s: String = kind
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '-' })
        .collect();
    if s.is_empty() {
        "scene".into()
    } else {
        s
    }
}
