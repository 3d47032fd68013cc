//! Scenario config documents.
//!
//! The on-disk form is canonical JSON: keys sorted, two-space indentation,
//! LF line endings, a trailing newline, and every real number printed in
//! fixed notation with exactly nine significant digits. Integers are
//! printed as integers. Writing a parsed canonical document reproduces it
//! byte for byte.

use std::fmt::Write as _;

use photonforge_core::head_model::{LayerRadii, LayeredHeadModel, MediaTable, SphereInclusion};
use photonforge_core::optodes::{BeamKind, DetectorDef, SourceDef};
use photonforge_core::transport::{SimulationConstants, TimeGates};
use photonforge_core::{TissueMedium, TissueTag, Vec3, TISSUE_COUNT};
use serde_json::{Map, Value};

/// Gate counts beyond this are rejected as a configuration error.
pub const MAX_GATES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    /// Dotted path of the offending field, e.g. `optode.source`.
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionSection {
    pub id: String,
    pub photon_count: u64,
    pub rng_seed: u64,
    /// Refractive-index mismatch handling at tissue interfaces.
    pub mismatch_flag: bool,
}

/// Time window `[t0, t1]` split into gates of width `dt`, ps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardSection {
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
}

impl ForwardSection {
    pub fn gate_count(&self) -> usize {
        ((self.t1 - self.t0) / self.dt - 1e-9).ceil().max(1.0) as usize
    }

    pub fn gates(&self) -> TimeGates {
        TimeGates {
            t0: self.t0,
            width: self.dt,
            count: self.gate_count(),
        }
    }
}

impl Default for ForwardSection {
    fn default() -> Self {
        Self {
            t0: 0.0,
            t1: 5000.0,
            dt: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSection {
    /// Index of the active source in its optode fixture.
    pub index: u32,
    pub pos: [f64; 3],
    pub dir: [f64; 3],
    pub kind: BeamKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorSection {
    pub pos: [f64; 3],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptodeSection {
    pub source: SourceSection,
    pub detectors: Vec<DetectorSection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SphereShape {
    pub center: [f64; 3],
    pub radius: f64,
    pub tag: TissueTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSection {
    pub wavelength: u32,
    /// Indexed by tissue tag.
    pub media: [TissueMedium; TISSUE_COUNT],
    pub dims: [usize; 3],
    pub voxel_size: f64,
}

/// One fully specified simulation. `shapes` lists the four layer spheres
/// outermost first (scalp, skull, csf, brain) followed by any inclusions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDocument {
    pub session: SessionSection,
    pub forward: ForwardSection,
    pub optode: OptodeSection,
    pub shapes: Vec<SphereShape>,
    pub domain: DomainSection,
}

/// Rounds to nine significant digits, the precision of the text form.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { 0.0 } else { v };
    }
    format_sig9(v).parse().expect("formatted number parses")
}

/// Fixed-notation decimal with exactly nine significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0.00000000".to_string();
    }
    let sci = format!("{:.8e}", v.abs());
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let mut out = String::with_capacity(24);
    if v < 0.0 {
        out.push('-');
    }
    if exp >= 8 {
        out.push_str(&digits);
        out.extend(std::iter::repeat_n('0', (exp - 8) as usize));
        out.push_str(".0");
    } else if exp >= 0 {
        let split = exp as usize + 1;
        out.push_str(&digits[..split]);
        out.push('.');
        out.push_str(&digits[split..]);
    } else {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    }
    out
}

impl ConfigDocument {
    /// Rounds every real-valued field to the precision it is stored with,
    /// so that `parse(write(doc)) == doc` afterwards.
    pub fn canonicalize(&mut self) {
        let r3 = |a: &mut [f64; 3]| a.iter_mut().for_each(|v| *v = round_sig9(*v));
        self.forward.t0 = round_sig9(self.forward.t0);
        self.forward.t1 = round_sig9(self.forward.t1);
        self.forward.dt = round_sig9(self.forward.dt);
        r3(&mut self.optode.source.pos);
        r3(&mut self.optode.source.dir);
        for d in &mut self.optode.detectors {
            r3(&mut d.pos);
            d.radius = round_sig9(d.radius);
        }
        for s in &mut self.shapes {
            r3(&mut s.center);
            s.radius = round_sig9(s.radius);
        }
        for m in &mut self.domain.media {
            m.mua = round_sig9(m.mua);
            m.mus = round_sig9(m.mus);
            m.g = round_sig9(m.g);
            m.n = round_sig9(m.n);
        }
        self.domain.voxel_size = round_sig9(self.domain.voxel_size);
    }

    pub fn canonicalized(mut self) -> Self {
        self.canonicalize();
        self
    }

    /// Semantic checks beyond the document's shape.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.session.id.is_empty()
            || self.session.id.contains(['/', '\\'])
            || self.session.id.starts_with('.')
        {
            return Err(ConfigError::new(
                "session.id",
                "must be a non-empty file-name-safe string",
            ));
        }
        let f = &self.forward;
        if !(f.t0 >= 0.0 && f.t0.is_finite()) {
            return Err(ConfigError::new("forward.t0", "must be finite and >= 0"));
        }
        if !(f.dt > 0.0 && f.dt.is_finite()) {
            return Err(ConfigError::new("forward.dt", "must be positive"));
        }
        if !(f.t1 > f.t0 && f.t1.is_finite()) {
            return Err(ConfigError::new("forward.t1", "must exceed forward.t0"));
        }
        if f.gate_count() > MAX_GATES {
            return Err(ConfigError::new(
                "forward.dt",
                format!("more than {MAX_GATES} time gates"),
            ));
        }
        self.source_def()?;
        if self.optode.detectors.is_empty() {
            return Err(ConfigError::new("optode.detectors", "at least one detector is required"));
        }
        self.detector_defs()?;
        self.media_table()?;
        let model = self.head_model()?;
        for (i, s) in self.shapes.iter().enumerate() {
            if s.tag == TissueTag::Ambient {
                return Err(ConfigError::new(format!("shapes[{i}].tag"), "ambient is not a shape tissue"));
            }
        }
        if !(self.domain.voxel_size > 0.0 && self.domain.voxel_size.is_finite()) {
            return Err(ConfigError::new("domain.voxel_size", "must be positive"));
        }
        let dims = model
            .grid_dims(self.domain.voxel_size)
            .map_err(|e| ConfigError::new("domain.voxel_size", e.to_string()))?;
        if dims != self.domain.dims {
            return Err(ConfigError::new(
                "domain.dims",
                format!("expected {dims:?} for this head model and voxel size"),
            ));
        }
        Ok(())
    }

    pub fn media_table(&self) -> Result<MediaTable, ConfigError> {
        for (i, m) in self.domain.media.iter().enumerate() {
            m.validate()
                .map_err(|e| ConfigError::new(format!("domain.media[{i}]"), e.to_string()))?;
        }
        MediaTable::new(self.domain.wavelength, self.domain.media)
            .map_err(|e| ConfigError::new("domain.media[0]", e.to_string()))
    }

    /// Rebuilds the head model from the sphere list.
    pub fn head_model(&self) -> Result<LayeredHeadModel, ConfigError> {
        const LAYERS: [TissueTag; 4] = TissueTag::LAYERS;
        if self.shapes.len() < LAYERS.len() {
            return Err(ConfigError::new("shapes", "needs the four layer spheres"));
        }
        let center = Vec3::from(self.shapes[0].center);
        for (i, (s, want)) in self.shapes.iter().zip(LAYERS).enumerate() {
            if s.tag != want {
                return Err(ConfigError::new(
                    format!("shapes[{i}].tag"),
                    format!("layer sphere {i} must be {want}"),
                ));
            }
            if Vec3::from(s.center) != center {
                return Err(ConfigError::new(
                    format!("shapes[{i}].center"),
                    "layer spheres must be concentric",
                ));
            }
        }
        let radii = LayerRadii {
            scalp: self.shapes[0].radius,
            skull: self.shapes[1].radius,
            csf: self.shapes[2].radius,
            brain: self.shapes[3].radius,
        };
        let mut model = LayeredHeadModel::from_radii(center, radii, Vec::new())
            .map_err(|e| ConfigError::new("shapes", e.to_string()))?;
        for (i, s) in self.shapes.iter().enumerate().skip(LAYERS.len()) {
            let inc = SphereInclusion::new(Vec3::from(s.center), s.radius, s.tag)
                .and_then(|inc| model.push_inclusion(inc));
            inc.map_err(|e| ConfigError::new(format!("shapes[{i}]"), e.to_string()))?;
        }
        Ok(model)
    }

    pub fn source_def(&self) -> Result<SourceDef, ConfigError> {
        let s = &self.optode.source;
        let dir = Vec3::from(s.dir);
        let pos = Vec3::from(s.pos);
        if !pos.is_finite() {
            return Err(ConfigError::new("optode.source.pos", "must be finite"));
        }
        if !((dir.norm() - 1.0).abs() < 1e-6) {
            return Err(ConfigError::new("optode.source.dir", "must be a unit vector"));
        }
        SourceDef::pencil(pos, dir).map_err(|e| ConfigError::new("optode.source", e.to_string()))
    }

    pub fn detector_defs(&self) -> Result<Vec<DetectorDef>, ConfigError> {
        self.optode
            .detectors
            .iter()
            .enumerate()
            .map(|(i, d)| {
                DetectorDef::new(Vec3::from(d.pos), d.radius)
                    .map_err(|e| ConfigError::new(format!("optode.detectors[{i}]"), e.to_string()))
            })
            .collect()
    }

    pub fn constants(&self) -> SimulationConstants {
        SimulationConstants {
            max_time: self.forward.t1,
            ..SimulationConstants::default()
        }
    }
}

enum Json {
    Obj(Vec<(&'static str, Json)>),
    Arr(Vec<Json>),
    Real(f64),
    Int(u64),
    Bool(bool),
    Str(String),
}

fn vec3(a: &[f64; 3]) -> Json {
    Json::Arr(a.iter().map(|&v| Json::Real(v)).collect())
}

fn emit(j: &Json, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match j {
        Json::Real(v) => out.push_str(&format_sig9(*v)),
        Json::Int(v) => {
            let _ = write!(out, "{v}");
        }
        Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Json::Str(s) => out.push_str(&serde_json::to_string(s).expect("strings serialize")),
        Json::Arr(items) => {
            let scalar = items
                .iter()
                .all(|i| !matches!(i, Json::Obj(_) | Json::Arr(_)));
            if items.is_empty() {
                out.push_str("[]");
            } else if scalar {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    emit(item, indent, out);
                }
                out.push(']');
            } else {
                out.push_str("[\n");
                for (k, item) in items.iter().enumerate() {
                    out.push_str(&pad(indent + 1));
                    emit(item, indent + 1, out);
                    out.push_str(if k + 1 < items.len() { ",\n" } else { "\n" });
                }
                out.push_str(&pad(indent));
                out.push(']');
            }
        }
        Json::Obj(fields) => {
            let mut sorted: Vec<&(&str, Json)> = fields.iter().collect();
            sorted.sort_by_key(|(k, _)| *k);
            out.push_str("{\n");
            for (k, (key, value)) in sorted.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                let _ = write!(out, "\"{key}\": ");
                emit(value, indent + 1, out);
                out.push_str(if k + 1 < sorted.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

fn to_json(doc: &ConfigDocument) -> Json {
    let s = &doc.session;
    let session = Json::Obj(vec![
        ("id", Json::Str(s.id.clone())),
        ("photon_count", Json::Int(s.photon_count)),
        ("rng_seed", Json::Int(s.rng_seed)),
        ("mismatch_flag", Json::Bool(s.mismatch_flag)),
    ]);
    let forward = Json::Obj(vec![
        ("t0", Json::Real(doc.forward.t0)),
        ("t1", Json::Real(doc.forward.t1)),
        ("dt", Json::Real(doc.forward.dt)),
    ]);
    let src = &doc.optode.source;
    let optode = Json::Obj(vec![
        (
            "source",
            Json::Obj(vec![
                ("index", Json::Int(src.index as u64)),
                ("pos", vec3(&src.pos)),
                ("dir", vec3(&src.dir)),
                ("kind", Json::Str(src.kind.name().to_string())),
            ]),
        ),
        (
            "detectors",
            Json::Arr(
                doc.optode
                    .detectors
                    .iter()
                    .map(|d| Json::Obj(vec![("pos", vec3(&d.pos)), ("radius", Json::Real(d.radius))]))
                    .collect(),
            ),
        ),
    ]);
    let shapes = Json::Arr(
        doc.shapes
            .iter()
            .map(|s| {
                Json::Obj(vec![
                    ("center", vec3(&s.center)),
                    ("radius", Json::Real(s.radius)),
                    ("tag", Json::Str(s.tag.name().to_string())),
                ])
            })
            .collect(),
    );
    let media = Json::Arr(
        TissueTag::ALL
            .iter()
            .zip(doc.domain.media.iter())
            .map(|(tag, m)| {
                Json::Obj(vec![
                    ("tag", Json::Str(tag.name().to_string())),
                    ("mua", Json::Real(m.mua)),
                    ("mus", Json::Real(m.mus)),
                    ("g", Json::Real(m.g)),
                    ("n", Json::Real(m.n)),
                ])
            })
            .collect(),
    );
    let domain = Json::Obj(vec![
        ("wavelength", Json::Int(doc.domain.wavelength as u64)),
        ("media", media),
        (
            "dims",
            Json::Arr(doc.domain.dims.iter().map(|&d| Json::Int(d as u64)).collect()),
        ),
        ("voxel_size", Json::Real(doc.domain.voxel_size)),
    ]);
    Json::Obj(vec![
        ("session", session),
        ("forward", forward),
        ("optode", optode),
        ("shapes", shapes),
        ("domain", domain),
    ])
}

/// Canonical text of a document.
pub fn write_config(doc: &ConfigDocument) -> String {
    let mut out = String::with_capacity(8192);
    emit(&to_json(doc), 0, &mut out);
    out.push('\n');
    out
}

struct Fields<'a> {
    path: String,
    map: &'a Map<String, Value>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<Fields<'a>, ConfigError> {
    match v {
        Value::Object(map) => Ok(Fields {
            path: path.to_string(),
            map,
        }),
        _ => Err(ConfigError::new(path, "expected an object")),
    }
}

impl<'a> Fields<'a> {
    fn get(&self, key: &str) -> Result<&'a Value, ConfigError> {
        self.map
            .get(key)
            .ok_or_else(|| ConfigError::new(join(&self.path, key), "missing field"))
    }

    fn child(&self, key: &str) -> Result<Fields<'a>, ConfigError> {
        as_object(self.get(key)?, &join(&self.path, key))
    }

    fn real(&self, key: &str) -> Result<f64, ConfigError> {
        let p = join(&self.path, key);
        real(self.get(key)?, &p)
    }

    fn uint(&self, key: &str) -> Result<u64, ConfigError> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| ConfigError::new(join(&self.path, key), "expected a non-negative integer"))
    }

    fn boolean(&self, key: &str) -> Result<bool, ConfigError> {
        self.get(key)?
            .as_bool()
            .ok_or_else(|| ConfigError::new(join(&self.path, key), "expected true or false"))
    }

    fn string(&self, key: &str) -> Result<&'a str, ConfigError> {
        self.get(key)?
            .as_str()
            .ok_or_else(|| ConfigError::new(join(&self.path, key), "expected a string"))
    }

    fn vec3(&self, key: &str) -> Result<[f64; 3], ConfigError> {
        let p = join(&self.path, key);
        let arr = self
            .get(key)?
            .as_array()
            .filter(|a| a.len() == 3)
            .ok_or_else(|| ConfigError::new(&p, "expected an array of three numbers"))?;
        Ok([
            real(&arr[0], &format!("{p}[0]"))?,
            real(&arr[1], &format!("{p}[1]"))?,
            real(&arr[2], &format!("{p}[2]"))?,
        ])
    }

    fn array(&self, key: &str) -> Result<&'a Vec<Value>, ConfigError> {
        self.get(key)?
            .as_array()
            .ok_or_else(|| ConfigError::new(join(&self.path, key), "expected an array"))
    }

    fn tissue(&self, key: &str) -> Result<TissueTag, ConfigError> {
        TissueTag::from_name(self.string(key)?)
            .map_err(|e| ConfigError::new(join(&self.path, key), e.to_string()))
    }
}

fn real(v: &Value, path: &str) -> Result<f64, ConfigError> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| ConfigError::new(path, "expected a finite number"))
}

fn parse_source(v: &Value) -> Result<SourceSection, ConfigError> {
    const PATH: &str = "optode.source";
    // a one-element list is accepted as the single source
    let obj = match v {
        Value::Array(items) if items.len() == 1 => &items[0],
        Value::Array(items) => {
            return Err(ConfigError::new(
                PATH,
                format!("exactly one source is required, found {}", items.len()),
            ))
        }
        other => other,
    };
    let f = as_object(obj, PATH)?;
    let kind_name = f.string("kind")?;
    let kind = BeamKind::from_name(kind_name)
        .ok_or_else(|| ConfigError::new(join(PATH, "kind"), format!("unknown beam kind {kind_name:?}")))?;
    let index = u32::try_from(f.uint("index")?)
        .map_err(|_| ConfigError::new(join(PATH, "index"), "out of range"))?;
    Ok(SourceSection {
        index,
        pos: f.vec3("pos")?,
        dir: f.vec3("dir")?,
        kind,
    })
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigError> {
    let doc = parse_config_unchecked(text)?;
    doc.validate()?;
    Ok(doc)
}

/// Parses the document structure without the semantic checks of
/// [`ConfigDocument::validate`].
pub fn parse_config_unchecked(text: &str) -> Result<ConfigDocument, ConfigError> {
    let root: Value = serde_json::from_str(text)
        .map_err(|e| ConfigError::new("", format!("malformed JSON: {e}")))?;
    let root = as_object(&root, "")?;

    let s = root.child("session")?;
    let session = SessionSection {
        id: s.string("id")?.to_string(),
        photon_count: s.uint("photon_count")?,
        rng_seed: s.uint("rng_seed")?,
        mismatch_flag: s.boolean("mismatch_flag")?,
    };

    let f = root.child("forward")?;
    let forward = ForwardSection {
        t0: f.real("t0")?,
        t1: f.real("t1")?,
        dt: f.real("dt")?,
    };

    let o = root.child("optode")?;
    let source = parse_source(o.get("source")?)?;
    let mut detectors = Vec::new();
    for (i, d) in o.array("detectors")?.iter().enumerate() {
        let d = as_object(d, &format!("optode.detectors[{i}]"))?;
        detectors.push(DetectorSection {
            pos: d.vec3("pos")?,
            radius: d.real("radius")?,
        });
    }

    let mut shapes = Vec::new();
    for (i, v) in root.array("shapes")?.iter().enumerate() {
        let s = as_object(v, &format!("shapes[{i}]"))?;
        shapes.push(SphereShape {
            center: s.vec3("center")?,
            radius: s.real("radius")?,
            tag: s.tissue("tag")?,
        });
    }

    let d = root.child("domain")?;
    let wavelength = u32::try_from(d.uint("wavelength")?)
        .map_err(|_| ConfigError::new("domain.wavelength", "out of range"))?;
    let media_list = d.array("media")?;
    if media_list.len() != TISSUE_COUNT {
        return Err(ConfigError::new(
            "domain.media",
            format!("expected {TISSUE_COUNT} entries indexed by tissue tag"),
        ));
    }
    let mut media = [TissueMedium::AMBIENT; TISSUE_COUNT];
    for (i, v) in media_list.iter().enumerate() {
        let m = as_object(v, &format!("domain.media[{i}]"))?;
        let tag = m.tissue("tag")?;
        if tag.index() != i {
            return Err(ConfigError::new(
                format!("domain.media[{i}].tag"),
                format!("entry {i} must describe {}", TissueTag::ALL[i]),
            ));
        }
        media[i] = TissueMedium {
            mua: m.real("mua")?,
            mus: m.real("mus")?,
            g: m.real("g")?,
            n: m.real("n")?,
        };
    }
    let dims_list = d.array("dims")?;
    if dims_list.len() != 3 {
        return Err(ConfigError::new("domain.dims", "expected three voxel counts"));
    }
    let mut dims = [0usize; 3];
    for (i, v) in dims_list.iter().enumerate() {
        dims[i] = v
            .as_u64()
            .filter(|&n| n > 0)
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| ConfigError::new(format!("domain.dims[{i}]"), "expected a positive integer"))?;
    }
    let domain = DomainSection {
        wavelength,
        media,
        dims,
        voxel_size: d.real("voxel_size")?,
    };

    Ok(ConfigDocument {
        session,
        forward,
        optode: OptodeSection { source, detectors },
        shapes,
        domain,
    })
}
