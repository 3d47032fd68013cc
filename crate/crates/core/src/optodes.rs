//! Source and detector placement on the scalp sphere.
//!
//! Angular frame: elevation is measured from the horizontal plane through
//! the head centre, azimuth is measured about +z starting on the +y
//! meridian and turning toward +x. In that frame the reference grid puts
//! detectors on two rows at ±6° and sources on rows at 0° and 11°, with an
//! 11.5° pitch rounded to whole degrees.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::head_model::LayeredHeadModel;
use crate::math;
use crate::vector::Vec3;

/// Detector aperture radius used by [`default_grid`], mm.
pub const DEFAULT_DETECTOR_RADIUS: f64 = 1.5;

/// Optodes per class in the reference grid (2 rows × 16).
pub const GRID_OPTODES_PER_CLASS: usize = 32;

const GRID_PITCH_DEG: f64 = 11.5;
const DETECTOR_ROW_ELEVATION_DEG: f64 = 6.0;
const DETECTOR_FIRST_AZIMUTH_DEG: f64 = 3.75;
const SOURCE_ROWS: [(f64, f64); 2] = [(0.0, -1.75), (11.0, 9.75)];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptodeError {
    #[error("elevation {0} deg outside [-90, 90]")]
    Elevation(f64),
    #[error("azimuth {0} deg outside (-180, 180]")]
    Azimuth(f64),
    #[error("optode position coincides with the sphere centre")]
    ZeroSeparation,
    #[error("direction must be a non-zero finite vector")]
    Direction,
    #[error("detector radius must be positive, got {0}")]
    DetectorRadius(f64),
}

/// Angular position on a sphere, degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngularPlacement {
    elevation: f64,
    azimuth: f64,
}

impl AngularPlacement {
    pub fn new(elevation: f64, azimuth: f64) -> Result<Self, OptodeError> {
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(OptodeError::Elevation(elevation));
        }
        if !(azimuth > -180.0 && azimuth <= 180.0) {
            return Err(OptodeError::Azimuth(azimuth));
        }
        Ok(Self { elevation, azimuth })
    }

    /// Like [`Self::new`] but wraps any finite azimuth into (-180, 180].
    pub fn wrapped(elevation: f64, azimuth: f64) -> Result<Self, OptodeError> {
        if !azimuth.is_finite() {
            return Err(OptodeError::Azimuth(azimuth));
        }
        let mut az = azimuth - 360.0 * math::floor(azimuth / 360.0);
        if az > 180.0 {
            az -= 360.0;
        }
        Self::new(elevation, az)
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    /// Inverse of [`place_on_sphere`].
    pub fn of_point(center: Vec3, p: Vec3) -> Result<Self, OptodeError> {
        let d = p - center;
        let r = d.norm();
        if r == 0.0 {
            return Err(OptodeError::ZeroSeparation);
        }
        let el = math::asin((d.z / r).clamp(-1.0, 1.0)).to_degrees();
        let az = math::atan2(d.x, d.y).to_degrees();
        Self::wrapped(el, if az == -180.0 { 180.0 } else { az })
    }
}

/// Cartesian point at `radius` from `center` in the direction given by `a`.
pub fn place_on_sphere(center: Vec3, radius: f64, a: AngularPlacement) -> Vec3 {
    let (sin_el, cos_el) = math::sin_cos(a.elevation.to_radians());
    let (sin_az, cos_az) = math::sin_cos(a.azimuth.to_radians());
    Vec3::new(
        center.x + radius * cos_el * sin_az,
        center.y + radius * cos_el * cos_az,
        center.z + radius * sin_el,
    )
}

/// Unit launch direction from `position` toward `center`.
pub fn pencil_direction(center: Vec3, position: Vec3) -> Result<Vec3, OptodeError> {
    (center - position)
        .normalized()
        .ok_or(OptodeError::ZeroSeparation)
}

/// Result of wrapping a flat arc length onto a cylinder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderProjection {
    /// Cylinder radius, mm.
    pub radius: f64,
    /// Angle subtended by the arc, rad.
    pub theta: f64,
    /// Depth of the point below the tangent plane at the arc start, mm.
    pub depth: f64,
}

/// `r = C / 2π`, `θ = l / r`, `d = r (1 − cos θ)`.
pub fn cylinder_project(circumference: f64, arc_length: f64) -> CylinderProjection {
    let radius = circumference / (2.0 * PI);
    let theta = arc_length / radius;
    CylinderProjection {
        radius,
        theta,
        depth: radius * (1.0 - math::cos(theta)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BeamKind {
    /// Collimated point source.
    #[default]
    Pencil,
}

impl BeamKind {
    pub fn name(self) -> &'static str {
        match self {
            BeamKind::Pencil => "pencil",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        (name == "pencil").then_some(BeamKind::Pencil)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceDef {
    pub position: Vec3,
    /// Unit launch direction.
    pub direction: Vec3,
    pub kind: BeamKind,
}

impl SourceDef {
    /// Pencil source; the direction is normalized.
    pub fn pencil(position: Vec3, direction: Vec3) -> Result<Self, OptodeError> {
        if !position.is_finite() {
            return Err(OptodeError::Direction);
        }
        let direction = direction.normalized().ok_or(OptodeError::Direction)?;
        Ok(Self {
            position,
            direction,
            kind: BeamKind::Pencil,
        })
    }

    /// Pencil source at `position` aimed at the sphere centre.
    pub fn aimed_at(center: Vec3, position: Vec3) -> Result<Self, OptodeError> {
        Self::pencil(position, pencil_direction(center, position)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorDef {
    pub position: Vec3,
    /// Capture radius around `position`, mm.
    pub radius: f64,
}

impl DetectorDef {
    pub fn new(position: Vec3, radius: f64) -> Result<Self, OptodeError> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(OptodeError::DetectorRadius(radius));
        }
        Ok(Self { position, radius })
    }

    #[inline]
    pub fn captures(&self, p: Vec3) -> bool {
        (p - self.position).norm_squared() <= self.radius * self.radius
    }
}

/// Ordered sources and detectors; list positions are the optode indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptodeArray {
    pub sources: Vec<SourceDef>,
    pub detectors: Vec<DetectorDef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OptodeClass {
    Source,
    Detector,
}

impl OptodeClass {
    pub fn name(self) -> &'static str {
        match self {
            OptodeClass::Source => "source",
            OptodeClass::Detector => "detector",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "source" => Some(OptodeClass::Source),
            "detector" => Some(OptodeClass::Detector),
            _ => None,
        }
    }
}

/// One optode of a fixture: index within its class, angles and placement radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureEntry {
    pub index: usize,
    pub class: OptodeClass,
    pub placement: AngularPlacement,
    pub radius: f64,
}

/// Angular positions of the 2×16 reference grid for one optode class.
///
/// Sources alternate between the 0° row (even indices) and the 11° row (odd
/// indices); detectors alternate between -6° and +6° at a shared azimuth.
pub fn reference_angles(class: OptodeClass) -> Vec<AngularPlacement> {
    let mut out = Vec::with_capacity(GRID_OPTODES_PER_CLASS);
    for k in 0..GRID_OPTODES_PER_CLASS / 2 {
        let step = GRID_PITCH_DEG * k as f64;
        match class {
            OptodeClass::Detector => {
                let az = math::round(DETECTOR_FIRST_AZIMUTH_DEG + step);
                for el in [-DETECTOR_ROW_ELEVATION_DEG, DETECTOR_ROW_ELEVATION_DEG] {
                    out.push(AngularPlacement::wrapped(el, az).expect("grid angles are finite"));
                }
            }
            OptodeClass::Source => {
                for (el, first) in SOURCE_ROWS {
                    let az = math::round(first + step);
                    out.push(AngularPlacement::wrapped(el, az).expect("grid angles are finite"));
                }
            }
        }
    }
    out
}

/// The reference fixture: all detectors then all sources, placed at `radius`.
pub fn reference_fixture(radius: f64) -> Vec<FixtureEntry> {
    let mut entries = Vec::with_capacity(2 * GRID_OPTODES_PER_CLASS);
    for class in [OptodeClass::Detector, OptodeClass::Source] {
        for (index, placement) in reference_angles(class).into_iter().enumerate() {
            entries.push(FixtureEntry {
                index,
                class,
                placement,
                radius,
            });
        }
    }
    entries
}

/// Builds an optode array from fixture entries around `center`. Entries are
/// ordered by their per-class index.
pub fn array_from_fixture(
    center: Vec3,
    entries: &[FixtureEntry],
    detector_radius: f64,
) -> Result<OptodeArray, OptodeError> {
    let mut sorted: Vec<&FixtureEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| (e.class, e.index));
    let mut array = OptodeArray::default();
    for e in sorted {
        let p = place_on_sphere(center, e.radius, e.placement);
        match e.class {
            OptodeClass::Source => array.sources.push(SourceDef::aimed_at(center, p)?),
            OptodeClass::Detector => array.detectors.push(DetectorDef::new(p, detector_radius)?),
        }
    }
    Ok(array)
}

/// 32 sources and 32 detectors on the scalp sphere of `model`.
pub fn default_grid(model: &LayeredHeadModel) -> OptodeArray {
    array_from_fixture(
        model.center(),
        &reference_fixture(model.scalp_radius()),
        DEFAULT_DETECTOR_RADIUS,
    )
    .expect("reference grid is valid")
}
