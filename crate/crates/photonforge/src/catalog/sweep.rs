//! Sweep generators: one scenario per inclusion radius or per inclusion
//! position, and the catalog that describes them.

use std::collections::BTreeMap;

use photonforge_core::{
    builtin_media, place_on_sphere, AngularPlacement, LayerRadii, LayeredHeadModel, TissueTag, Vec3,
};

use super::{
    Catalog, CatalogError, Forward, HeadModel, HeadModelElement, Media, Session, Shape,
    ShapeElementMedia, Simulation, Source, Sphere, ELEMENT_HEAD_MODEL, ELEMENT_SPHERE,
};
use crate::fixture::BUILTIN_FIXTURE;
use crate::sim_io::round_sig9;

/// Inclusive arithmetic range, e.g. 0.1..=7.2 step 0.1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRange {
    start: f64,
    stop: f64,
    step: f64,
}

impl ParamRange {
    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self, CatalogError> {
        if !(start.is_finite() && stop.is_finite() && step.is_finite()) {
            return Err(CatalogError::Sweep("range bounds must be finite".into()));
        }
        if !(step > 0.0) {
            return Err(CatalogError::Sweep(format!("step must be positive, got {step}")));
        }
        if start > stop {
            return Err(CatalogError::Sweep(format!("start {start} exceeds stop {stop}")));
        }
        Ok(Self { start, stop, step })
    }

    pub fn single(v: f64) -> Result<Self, CatalogError> {
        Self::new(v, v, 1.0)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn stop(&self) -> f64 {
        self.stop
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Values at 9 significant digits, so 0.1 + 2·0.1 is 0.3.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(|i| round_sig9(self.start + i as f64 * self.step))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SweepKind {
    /// Inclusion radius in mm at the template's fixed centre.
    Radius(ParamRange),
    /// Inclusion centre elevation × azimuth in degrees at the template's
    /// fixed radius. Both endpoints are kept, so -180 and 180 both appear.
    Position { elevation: ParamRange, azimuth: ParamRange },
}

impl SweepKind {
    pub fn name(&self) -> &'static str {
        match self {
            SweepKind::Radius(_) => "radius",
            SweepKind::Position { .. } => "position",
        }
    }

    pub fn full_radius() -> Self {
        SweepKind::Radius(ParamRange::new(0.1, 7.2, 0.1).expect("valid range"))
    }

    pub fn full_position() -> Self {
        SweepKind::Position {
            elevation: ParamRange::new(-10.0, 10.0, 1.0).expect("valid range"),
            azimuth: ParamRange::new(-180.0, 180.0, 1.0).expect("valid range"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub kind: SweepKind,
    /// One scenario per sweep point per wavelength, wavelength-major.
    pub wavelengths: Vec<u32>,
}

/// Fixed parameters shared by every scenario of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTemplate {
    pub head_center: Vec3,
    pub layers: LayerRadii,
    /// Distance of the inclusion centre from the head centre, mm.
    pub placement_radius: f64,
    /// Inclusion centre angles used by radius sweeps, degrees.
    pub inclusion_elevation: f64,
    pub inclusion_azimuth: f64,
    /// Inclusion radius used by position sweeps, mm.
    pub inclusion_radius: f64,
    pub inclusion_tag: TissueTag,
    pub photon_count: u64,
    pub master_seed: u64,
    pub mismatch: bool,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    pub fixture_ref: String,
    pub active_source_index: u32,
}

impl Default for ScenarioTemplate {
    fn default() -> Self {
        let head = LayeredHeadModel::reference();
        Self {
            head_center: head.center(),
            layers: head.layer_radii(),
            placement_radius: 60.0,
            inclusion_elevation: 0.0,
            inclusion_azimuth: 0.0,
            inclusion_radius: 7.0,
            inclusion_tag: TissueTag::Blood,
            photon_count: 1_000_000,
            master_seed: 0,
            mismatch: true,
            t0: 0.0,
            t1: 5000.0,
            dt: 100.0,
            fixture_ref: BUILTIN_FIXTURE.to_string(),
            active_source_index: 0,
        }
    }
}

/// One generated scenario before it is written into a catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepScenario {
    pub kind: &'static str,
    pub wavelength: u32,
    pub inclusion_center: Vec3,
    pub inclusion_radius: f64,
}

fn scenario(
    t: &ScenarioTemplate,
    kind: &'static str,
    wavelength: u32,
    elevation: f64,
    azimuth: f64,
    radius: f64,
) -> Result<SweepScenario, CatalogError> {
    let placement = AngularPlacement::wrapped(elevation, azimuth)
        .map_err(|e| CatalogError::Sweep(e.to_string()))?;
    let p = place_on_sphere(t.head_center, t.placement_radius, placement);
    let center = Vec3::new(round_sig9(p.x), round_sig9(p.y), round_sig9(p.z));
    let reach = (center - t.head_center).norm() + radius;
    if !(radius > 0.0) {
        return Err(CatalogError::Sweep(format!("inclusion radius {radius} must be positive")));
    }
    if reach > t.layers.brain {
        return Err(CatalogError::Sweep(format!(
            "inclusion at el {elevation} az {azimuth} r {radius} reaches {reach:.3} mm, beyond the brain sphere ({} mm)",
            t.layers.brain
        )));
    }
    Ok(SweepScenario {
        kind,
        wavelength,
        inclusion_center: center,
        inclusion_radius: radius,
    })
}

/// Expands a sweep. Points that would put the inclusion outside the brain
/// sphere come back as errors in place.
pub fn sweep(t: &ScenarioTemplate, spec: &SweepSpec) -> Vec<Result<SweepScenario, CatalogError>> {
    let kind = spec.kind.name();
    let mut out = Vec::new();
    for &wl in &spec.wavelengths {
        match &spec.kind {
            SweepKind::Radius(r) => {
                for radius in r.values() {
                    out.push(scenario(t, kind, wl, t.inclusion_elevation, t.inclusion_azimuth, radius));
                }
            }
            SweepKind::Position { elevation, azimuth } => {
                for el in elevation.values() {
                    for az in azimuth.values() {
                        out.push(scenario(t, kind, wl, el, az, t.inclusion_radius));
                    }
                }
            }
        }
    }
    out
}

/// 0.1..=7.2 mm in 0.1 mm steps at the template wavelengths (830 nm if none given).
pub fn radius_sweep(t: &ScenarioTemplate, wavelengths: &[u32]) -> Vec<Result<SweepScenario, CatalogError>> {
    sweep(
        t,
        &SweepSpec {
            kind: SweepKind::full_radius(),
            wavelengths: default_wavelengths(wavelengths),
        },
    )
}

/// Elevation -10..=10°, azimuth -180..=180°, 1° steps.
pub fn position_sweep(t: &ScenarioTemplate, wavelengths: &[u32]) -> Vec<Result<SweepScenario, CatalogError>> {
    sweep(
        t,
        &SweepSpec {
            kind: SweepKind::full_position(),
            wavelengths: default_wavelengths(wavelengths),
        },
    )
}

fn default_wavelengths(w: &[u32]) -> Vec<u32> {
    if w.is_empty() {
        vec![830]
    } else {
        w.to_vec()
    }
}

/// Seed of a scenario derived from the template's master seed.
pub(crate) fn scenario_seed(master: u64, kind: &str, simulation_id: i64) -> u64 {
    xxhash_rust::xxh64::xxh64(format!("{kind}:{simulation_id}").as_bytes(), master)
}

/// Builds the relational catalog for a list of scenarios. Layer geometry
/// and media are stored once per wavelength; each scenario gets its own
/// session, scene shape and inclusion sphere. Media come from the built-in
/// tables, so only 690 and 830 nm are accepted.
pub fn build_catalog(t: &ScenarioTemplate, scenarios: &[SweepScenario]) -> Catalog {
    try_build_catalog(t, scenarios).expect("wavelengths must have built-in media")
}

pub fn try_build_catalog(t: &ScenarioTemplate, scenarios: &[SweepScenario]) -> Result<Catalog, CatalogError> {
    let mut c = Catalog::default();
    c.forward.push(Forward {
        id: 1,
        t0: t.t0,
        t1: t.t1,
        dt: t.dt,
    });
    c.sources.push(Source {
        id: 1,
        optode_fixture_ref: t.fixture_ref.clone(),
        active_source_index: t.active_source_index,
    });
    let mut next_shape = 1;
    let mut next_sphere = 1;
    let mut next_media = 1;
    // wavelength -> (head model id, inclusion media id)
    let mut heads: BTreeMap<u32, (i64, i64)> = BTreeMap::new();

    for (i, s) in scenarios.iter().enumerate() {
        let (head_id, inc_media) = match heads.get(&s.wavelength) {
            Some(&v) => v,
            None => {
                let table = builtin_media(s.wavelength).map_err(|e| CatalogError::Sweep(e.to_string()))?;
                let head_id = c.head_models.len() as i64 + 1;
                c.head_models.push(HeadModel {
                    id: head_id,
                    name: format!("standard_head_{}", s.wavelength),
                });
                let mut add_media = |c: &mut Catalog, tag: TissueTag| {
                    let m = table.get(tag);
                    c.media.push(Media {
                        id: next_media,
                        tissue_tag: tag as u8,
                        wavelength: s.wavelength,
                        mua: m.mua,
                        mus: m.mus,
                        g: m.g,
                        n: m.n,
                    });
                    next_media += 1;
                    next_media - 1
                };
                for (order, (tag, radius)) in TissueTag::LAYERS.into_iter().zip(t.layers.as_array()).enumerate() {
                    let media_id = add_media(&mut c, tag);
                    c.spheres.push(Sphere {
                        id: next_sphere,
                        center_x: t.head_center.x,
                        center_y: t.head_center.y,
                        center_z: t.head_center.z,
                        radius,
                    });
                    c.shapes.push(Shape {
                        id: next_shape,
                        name: format!("{}_{}", tag.name(), s.wavelength),
                    });
                    c.shape_elements_media.push(ShapeElementMedia {
                        shape_id: next_shape,
                        element_kind: ELEMENT_SPHERE.into(),
                        element_id: next_sphere,
                        media_id: Some(media_id),
                    });
                    c.head_model_elements.push(HeadModelElement {
                        head_model_id: head_id,
                        shape_id: next_shape,
                        layer_order: order as u32,
                    });
                    next_sphere += 1;
                    next_shape += 1;
                }
                let inc = add_media(&mut c, t.inclusion_tag);
                heads.insert(s.wavelength, (head_id, inc));
                (head_id, inc)
            }
        };

        let sim_id = i as i64 + 1;
        c.sessions.push(Session {
            id: sim_id,
            photon_count: t.photon_count,
            rng_seed: scenario_seed(t.master_seed, s.kind, sim_id),
            mismatch_flag: t.mismatch,
        });
        c.spheres.push(Sphere {
            id: next_sphere,
            center_x: s.inclusion_center.x,
            center_y: s.inclusion_center.y,
            center_z: s.inclusion_center.z,
            radius: s.inclusion_radius,
        });
        c.shapes.push(Shape {
            id: next_shape,
            name: s.kind.to_string(),
        });
        c.shape_elements_media.push(ShapeElementMedia {
            shape_id: next_shape,
            element_kind: ELEMENT_HEAD_MODEL.into(),
            element_id: head_id,
            media_id: None,
        });
        c.shape_elements_media.push(ShapeElementMedia {
            shape_id: next_shape,
            element_kind: ELEMENT_SPHERE.into(),
            element_id: next_sphere,
            media_id: Some(inc_media),
        });
        c.simulations.push(Simulation {
            id: sim_id,
            session_id: sim_id,
            forward_id: 1,
            sources_id: 1,
            shapes_id: next_shape,
        });
        next_sphere += 1;
        next_shape += 1;
    }
    Ok(c)
}
