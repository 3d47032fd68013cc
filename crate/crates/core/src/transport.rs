//! Photon random walk through a voxel label grid.
//!
//! A packet is launched from a pencil source outside the tissue, marched
//! ballistically through ambient voxels, and then walks by sampling an
//! optical depth to its next interaction. Each step is truncated where the
//! tissue label changes; the unused optical depth carries over into the new
//! medium. At every interaction the packet deposits the absorbed fraction
//! `W·μa/μt` into the current voxel and time gate, scatters according to
//! Henyey-Greenstein and goes through Russian roulette once its weight drops
//! below the threshold. Label changes with a refractive mismatch are
//! resolved with unpolarized Fresnel reflection; leaving into ambient ends
//! the walk, and the exit point is checked against the detector apertures.

use core::f64::consts::PI;

use crate::head_model::{LabelGrid, MediaTable, TissueTag, TISSUE_COUNT};
use crate::math;
use crate::optodes::{DetectorDef, SourceDef};
use crate::rng::RngStream;
use crate::vector::Vec3;

/// Speed of light in vacuum, mm/ps.
pub const C_VACUUM_MM_PER_PS: f64 = 0.299_792_458;

/// Consecutive zero-length boundary events tolerated before a packet is
/// declared stuck (it can only happen on exact voxel corners).
const MAX_ZERO_LENGTH_EVENTS: u32 = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransportError {
    #[error("{0}")]
    Domain(&'static str),
    #[error("source at ({x}, {y}, {z}) lies inside a tissue voxel")]
    SourceInTissue { x: f64, y: f64, z: f64 },
    #[error("invalid simulation constants: {0}")]
    Constants(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationConstants {
    /// mm/ps.
    pub c_vacuum: f64,
    /// Weight below which roulette is played.
    pub roulette_threshold: f64,
    /// Survivor weight multiplier; survival probability is its inverse.
    pub roulette_survival: f64,
    /// Walks are cut off once their elapsed time exceeds this, ps.
    pub max_time: f64,
}

impl Default for SimulationConstants {
    fn default() -> Self {
        Self {
            c_vacuum: C_VACUUM_MM_PER_PS,
            roulette_threshold: 1e-4,
            roulette_survival: 10.0,
            max_time: 5000.0,
        }
    }
}

impl SimulationConstants {
    pub fn validate(&self) -> Result<(), TransportError> {
        if !(self.c_vacuum > 0.0 && self.c_vacuum.is_finite()) {
            return Err(TransportError::Constants("speed of light must be positive"));
        }
        if !(self.roulette_threshold > 0.0 && self.roulette_threshold < 1.0) {
            return Err(TransportError::Constants("roulette threshold must lie in (0, 1)"));
        }
        if !(self.roulette_survival > 1.0 && self.roulette_survival.is_finite()) {
            return Err(TransportError::Constants("roulette survival factor must exceed 1"));
        }
        if !(self.max_time > 0.0) {
            return Err(TransportError::Constants("max time must be positive"));
        }
        Ok(())
    }
}

/// Uniform time gates `[t0 + i·width, t0 + (i+1)·width)`, ps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGates {
    pub t0: f64,
    pub width: f64,
    pub count: usize,
}

impl Default for TimeGates {
    /// 50 gates of 100 ps.
    fn default() -> Self {
        Self {
            t0: 0.0,
            width: 100.0,
            count: 50,
        }
    }
}

impl TimeGates {
    pub fn new(t0: f64, width: f64, count: usize) -> Result<Self, TransportError> {
        if !(t0 >= 0.0 && t0.is_finite()) {
            return Err(TransportError::Constants("gate start must be finite and >= 0"));
        }
        if !(width > 0.0 && width.is_finite()) {
            return Err(TransportError::Constants("gate width must be positive"));
        }
        if count == 0 {
            return Err(TransportError::Constants("at least one time gate is required"));
        }
        Ok(Self { t0, width, count })
    }

    /// Gate holding time `t`; times before `t0` fall in the first gate and
    /// times past the end in the last.
    #[inline]
    pub fn gate_of(&self, t: f64) -> usize {
        let g = math::floor((t - self.t0) / self.width);
        if g <= 0.0 {
            0
        } else {
            (g as usize).min(self.count - 1)
        }
    }

    pub fn end(&self) -> f64 {
        self.t0 + self.width * self.count as f64
    }

    pub fn center(&self, gate: usize) -> f64 {
        self.t0 + (gate as f64 + 0.5) * self.width
    }
}

/// Exponential free path `−ln(u)/μt`.
pub fn sample_free_path(rng: &mut RngStream, mu_t: f64) -> Result<f64, TransportError> {
    if !(mu_t > 0.0) {
        return Err(TransportError::Domain("free path needs mu_t > 0"));
    }
    Ok(free_path_from_uniform(rng.uniform_open(), mu_t))
}

#[inline]
pub fn free_path_from_uniform(u: f64, mu_t: f64) -> f64 {
    -math::ln(u) / mu_t
}

/// Inverse-CDF sample of the Henyey-Greenstein deflection cosine.
#[inline]
pub fn sample_hg_cosine(g: f64, u: f64) -> f64 {
    if g.abs() < 1e-6 {
        return 2.0 * u - 1.0;
    }
    let f = (1.0 - g * g) / (1.0 - g + 2.0 * g * u);
    ((1.0 + g * g - f * f) / (2.0 * g)).clamp(-1.0, 1.0)
}

/// Rotates `dir` by a deflection angle with cosine `cos_theta` and azimuth `phi`.
#[inline]
pub fn rotate_direction(dir: Vec3, cos_theta: f64, phi: f64) -> Vec3 {
    let sin_theta = math::sqrt((1.0 - cos_theta * cos_theta).max(0.0));
    let (sin_phi, cos_phi) = math::sin_cos(phi);
    let (ux, uy, uz) = (dir.x, dir.y, dir.z);
    let out = if uz.abs() > 0.999_99 {
        Vec3::new(
            sin_theta * cos_phi,
            sin_theta * sin_phi,
            cos_theta * uz.signum(),
        )
    } else {
        let temp = math::sqrt(1.0 - uz * uz);
        Vec3::new(
            sin_theta * (ux * uz * cos_phi - uy * sin_phi) / temp + ux * cos_theta,
            sin_theta * (uy * uz * cos_phi + ux * sin_phi) / temp + uy * cos_theta,
            -sin_theta * cos_phi * temp + uz * cos_theta,
        )
    };
    out.normalized().unwrap_or(dir)
}

/// New direction after one Henyey-Greenstein scattering event.
pub fn scatter_direction(rng: &mut RngStream, g: f64, dir: Vec3) -> Vec3 {
    let cos_theta = sample_hg_cosine(g, rng.uniform_open());
    let phi = 2.0 * PI * rng.uniform_open();
    rotate_direction(dir, cos_theta, phi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Attenuation {
    /// Weight carried on after the interaction.
    pub weight: f64,
    /// Weight left behind in the medium.
    pub deposited: f64,
}

/// `W_new = W·(1 − μa/(μa+μs))`; the difference is deposited.
#[inline]
pub fn attenuate(weight: f64, mua: f64, mus: f64) -> Attenuation {
    let mu_t = mua + mus;
    if !(mu_t > 0.0) {
        return Attenuation {
            weight,
            deposited: 0.0,
        };
    }
    let new = weight * (1.0 - mua / mu_t);
    Attenuation {
        weight: new,
        deposited: weight - new,
    }
}

/// Unpolarized Fresnel reflectance for incidence cosine `cos_i` going from
/// index `n1` into `n2`; 1 under total internal reflection.
pub fn fresnel_reflectance(cos_i: f64, n1: f64, n2: f64) -> f64 {
    let cos_i = cos_i.abs().min(1.0);
    if n1 == n2 {
        return 0.0;
    }
    let sin_t2 = (n1 / n2) * (n1 / n2) * (1.0 - cos_i * cos_i);
    if sin_t2 >= 1.0 {
        return 1.0;
    }
    let cos_t = math::sqrt(1.0 - sin_t2);
    let rs = (n1 * cos_i - n2 * cos_t) / (n1 * cos_i + n2 * cos_t);
    let rp = (n1 * cos_t - n2 * cos_i) / (n1 * cos_t + n2 * cos_i);
    0.5 * (rs * rs + rp * rp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryOutcome {
    Reflected(Vec3),
    Transmitted(Vec3),
}

/// Specular reflection with Fresnel probability, Snell refraction otherwise.
///
/// `normal` may point either way across the interface. Index-matched
/// interfaces transmit unchanged without consuming a random draw.
pub fn boundary_interact(
    rng: &mut RngStream,
    dir: Vec3,
    normal: Vec3,
    n1: f64,
    n2: f64,
) -> BoundaryOutcome {
    if n1 == n2 {
        return BoundaryOutcome::Transmitted(dir);
    }
    // orient the normal against the incoming direction
    let along = dir.dot(normal);
    let n_in = if along > 0.0 { -normal } else { normal };
    let cos_i = -dir.dot(n_in);
    let r = fresnel_reflectance(cos_i, n1, n2);
    if r >= 1.0 || rng.uniform_open() < r {
        let reflected = dir + n_in * (2.0 * cos_i);
        return BoundaryOutcome::Reflected(reflected.normalized().unwrap_or(-dir));
    }
    let eta = n1 / n2;
    let sin_t2 = eta * eta * (1.0 - cos_i * cos_i);
    let cos_t = math::sqrt((1.0 - sin_t2).max(0.0));
    let refracted = dir * eta + n_in * (eta * cos_i - cos_t);
    BoundaryOutcome::Transmitted(refracted.normalized().unwrap_or(dir))
}

/// Russian roulette: weights at or above the threshold pass untouched;
/// lighter packets survive with probability `1/m` and are scaled by `m`.
#[inline]
pub fn roulette(
    rng: &mut RngStream,
    weight: f64,
    constants: &SimulationConstants,
) -> Option<f64> {
    if weight >= constants.roulette_threshold {
        return Some(weight);
    }
    if rng.uniform_open() < 1.0 / constants.roulette_survival {
        Some(weight * constants.roulette_survival)
    } else {
        None
    }
}

/// Snapshot of one packet mid-walk.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotonState {
    pub position: Vec3,
    pub direction: Vec3,
    pub weight: f64,
    /// ps since entering tissue.
    pub elapsed: f64,
    pub medium: TissueTag,
    /// Distance travelled per tissue tag, mm.
    pub partial_paths: [f64; TISSUE_COUNT],
    pub scatter_count: u64,
}

/// A packet that left the tissue through a detector aperture.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRecord {
    pub photon_index: u64,
    pub detector_index: u32,
    pub exit_position: Vec3,
    pub exit_weight: f64,
    /// ps.
    pub time_of_flight: f64,
    /// mm per tissue tag.
    pub partial_paths: [f64; TISSUE_COUNT],
    pub scatter_count: u64,
}

impl DetectorRecord {
    /// `Σ partial_path · n / c` for the given media.
    pub fn optical_time(&self, media: &MediaTable, c_vacuum: f64) -> f64 {
        media
            .iter()
            .map(|(tag, m)| self.partial_paths[tag.index()] * m.n / c_vacuum)
            .sum()
    }

    /// Exit weight re-weighted for different absorption coefficients using
    /// the recorded partial paths: `W · Π exp(−Δμa · L)`.
    pub fn reweighted(&self, original: &MediaTable, updated: &MediaTable) -> f64 {
        let mut exponent = 0.0;
        for tag in TissueTag::ALL {
            let d = updated.get(tag).mua - original.get(tag).mua;
            exponent -= d * self.partial_paths[tag.index()];
        }
        self.exit_weight * math::exp(exponent)
    }
}

/// Where a packet's weight ended up.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WeightTally {
    pub launched_photons: u64,
    pub detected_photons: u64,
    pub launched: f64,
    /// Deposited in the tissue.
    pub absorbed: f64,
    pub detected: f64,
    /// Left the tissue outside every detector, or never entered it.
    pub escaped: f64,
    /// Still in flight at the time cut-off.
    pub timed_out: f64,
    /// Weight removed by losing roulette.
    pub roulette_killed: f64,
    /// Weight added to roulette survivors.
    pub roulette_gained: f64,
}

impl WeightTally {
    pub fn merge(&mut self, o: &WeightTally) {
        self.launched_photons += o.launched_photons;
        self.detected_photons += o.detected_photons;
        self.launched += o.launched;
        self.absorbed += o.absorbed;
        self.detected += o.detected;
        self.escaped += o.escaped;
        self.timed_out += o.timed_out;
        self.roulette_killed += o.roulette_killed;
        self.roulette_gained += o.roulette_gained;
    }

    /// `launched + gained − (absorbed + detected + escaped + timed_out + killed)`.
    pub fn residual(&self) -> f64 {
        self.launched + self.roulette_gained
            - (self.absorbed + self.detected + self.escaped + self.timed_out + self.roulette_killed)
    }

    /// Residual relative to launched weight; zero for an empty tally.
    pub fn relative_residual(&self) -> f64 {
        if self.launched == 0.0 {
            self.residual().abs()
        } else {
            (self.residual() / self.launched).abs()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhotonFate {
    Detected(u32),
    Escaped,
    /// Fully absorbed (only possible in a non-scattering medium).
    Absorbed,
    RouletteKilled,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceOutcome {
    pub fate: PhotonFate,
    pub record: Option<DetectorRecord>,
    pub tally: WeightTally,
}

/// Receives energy deposits as `(linear voxel index, time gate, weight)`.
pub trait DepositSink {
    fn deposit(&mut self, voxel: usize, gate: usize, weight: f64);
}

impl<F: FnMut(usize, usize, f64)> DepositSink for F {
    #[inline]
    fn deposit(&mut self, voxel: usize, gate: usize, weight: f64) {
        self(voxel, gate, weight)
    }
}

/// Discards deposits.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl DepositSink for NullSink {
    #[inline]
    fn deposit(&mut self, _: usize, _: usize, _: f64) {}
}

/// Read-only inputs shared by every walk of a run.
#[derive(Debug, Clone, Copy)]
pub struct TransportScene<'a> {
    pub grid: &'a LabelGrid,
    pub media: &'a MediaTable,
    pub detectors: &'a [DetectorDef],
    pub constants: SimulationConstants,
    pub gates: TimeGates,
    /// Apply Fresnel/Snell at refractive-index changes. When false every
    /// interface transmits without deflection.
    pub mismatch: bool,
}

enum Step {
    Interaction { len: f64 },
    Crossing {
        len: f64,
        axis: usize,
        sign: i64,
        next: [i64; 3],
        next_tag: TissueTag,
        outside: bool,
    },
}

#[inline]
fn outside_grid(grid: &LabelGrid, v: [i64; 3]) -> bool {
    let d = grid.dims();
    v[0] < 0
        || v[1] < 0
        || v[2] < 0
        || v[0] as usize >= d[0]
        || v[1] as usize >= d[1]
        || v[2] as usize >= d[2]
}

/// Walks voxels from `pos` along `dir` until either `limit` mm have been
/// covered or the next voxel carries a different label (or lies outside the
/// grid). `vox` is updated to the voxel the packet is in at the end.
#[inline]
fn march(
    grid: &LabelGrid,
    pos: Vec3,
    dir: Vec3,
    vox: &mut [i64; 3],
    tag: TissueTag,
    limit: f64,
) -> Step {
    let vs = grid.voxel_size();
    let origin = grid.origin();
    let mut t_next = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    for a in 0..3 {
        let d = dir[a];
        if d > 0.0 {
            let b = origin[a] + (vox[a] + 1) as f64 * vs;
            t_next[a] = ((b - pos[a]) / d).max(0.0);
            t_delta[a] = vs / d;
            step[a] = 1;
        } else if d < 0.0 {
            let b = origin[a] + vox[a] as f64 * vs;
            t_next[a] = ((b - pos[a]) / d).max(0.0);
            t_delta[a] = -vs / d;
            step[a] = -1;
        }
    }
    loop {
        let axis = if t_next[0] <= t_next[1] {
            if t_next[0] <= t_next[2] {
                0
            } else {
                2
            }
        } else if t_next[1] <= t_next[2] {
            1
        } else {
            2
        };
        let t = t_next[axis];
        if t >= limit {
            return Step::Interaction { len: limit };
        }
        let mut next = *vox;
        next[axis] += step[axis];
        let outside = outside_grid(grid, next);
        let next_tag = if outside {
            TissueTag::Ambient
        } else {
            grid.label(next[0] as usize, next[1] as usize, next[2] as usize)
        };
        if outside || next_tag != tag {
            return Step::Crossing {
                len: t,
                axis,
                sign: step[axis],
                next,
                next_tag,
                outside,
            };
        }
        *vox = next;
        t_next[axis] += t_delta[axis];
    }
}

/// Distance along the ray to where it enters the grid's bounding box.
fn box_entry(grid: &LabelGrid, pos: Vec3, dir: Vec3) -> Option<f64> {
    let origin = grid.origin();
    let dims = grid.dims();
    let mut t_enter: f64 = 0.0;
    let mut t_exit = f64::INFINITY;
    for a in 0..3 {
        let lo = origin[a];
        let hi = origin[a] + dims[a] as f64 * grid.voxel_size();
        if dir[a] == 0.0 {
            if pos[a] < lo || pos[a] > hi {
                return None;
            }
            continue;
        }
        let t1 = (lo - pos[a]) / dir[a];
        let t2 = (hi - pos[a]) / dir[a];
        let (near, far) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        t_enter = t_enter.max(near);
        t_exit = t_exit.min(far);
    }
    (t_enter <= t_exit).then_some(t_enter)
}

fn voxel_clamped(grid: &LabelGrid, p: Vec3) -> [i64; 3] {
    let dims = grid.dims();
    let mut v = [0i64; 3];
    for a in 0..3 {
        let f = math::floor((p[a] - grid.origin()[a]) / grid.voxel_size());
        v[a] = (f as i64).clamp(0, dims[a] as i64 - 1);
    }
    v
}

/// Moves a source that sits in a tissue voxel back along its launch
/// direction into the nearest ambient voxel, by at most one voxel diagonal.
///
/// Optodes placed exactly on the scalp sphere often share a voxel with the
/// voxelized scalp surface; this gives them a valid launch point.
pub fn retract_to_ambient(grid: &LabelGrid, source: &SourceDef) -> Result<SourceDef, TransportError> {
    let Some(v) = grid.voxel_of(source.position) else {
        return Ok(*source);
    };
    if grid.label(v[0], v[1], v[2]) == TissueTag::Ambient {
        return Ok(*source);
    }
    let back = -source.direction;
    let mut vox = [v[0] as i64, v[1] as i64, v[2] as i64];
    let mut pos = source.position;
    let budget = math::sqrt(3.0) * grid.voxel_size() * (1.0 + 1e-9);
    let mut travelled = 0.0;
    loop {
        let tag = grid.label_or_ambient(vox);
        match march(grid, pos, back, &mut vox, tag, f64::INFINITY) {
            Step::Crossing {
                len,
                next,
                next_tag,
                ..
            } => {
                travelled += len;
                pos += back * len;
                if travelled > budget {
                    break;
                }
                if next_tag == TissueTag::Ambient {
                    // nudge past the face so the voxel lookup is unambiguous
                    let nudge = 1e-6 * grid.voxel_size();
                    let mut out = *source;
                    out.position = pos + back * nudge;
                    return Ok(out);
                }
                vox = next;
            }
            Step::Interaction { .. } => break,
        }
    }
    Err(TransportError::SourceInTissue {
        x: source.position.x,
        y: source.position.y,
        z: source.position.z,
    })
}

/// Traces one packet from `source` until it is detected, escapes, is
/// absorbed, loses roulette or runs past the time limit.
///
/// The source must lie in an ambient voxel or outside the grid.
pub fn trace_photon<S: DepositSink + ?Sized>(
    scene: &TransportScene<'_>,
    source: &SourceDef,
    rng: &mut RngStream,
    sink: &mut S,
) -> Result<TraceOutcome, TransportError> {
    let grid = scene.grid;
    let tally = WeightTally {
        launched_photons: 1,
        launched: 1.0,
        ..WeightTally::default()
    };
    let escaped = |mut tally: WeightTally, weight: f64| {
        tally.escaped += weight;
        Ok(TraceOutcome {
            fate: PhotonFate::Escaped,
            record: None,
            tally,
        })
    };

    let dir = source.direction;
    let mut pos = source.position;
    let mut vox = match grid.voxel_of(pos) {
        Some(v) => {
            if grid.label(v[0], v[1], v[2]) != TissueTag::Ambient {
                return Err(TransportError::SourceInTissue {
                    x: pos.x,
                    y: pos.y,
                    z: pos.z,
                });
            }
            [v[0] as i64, v[1] as i64, v[2] as i64]
        }
        None => match box_entry(grid, pos, dir) {
            Some(t) => {
                pos += dir * t;
                let v = voxel_clamped(grid, pos);
                if grid.label_or_ambient(v) != TissueTag::Ambient {
                    // the entry voxel itself is tissue: enter through its face
                    return trace_from_entry(scene, pos, dir, v, TissueTag::Ambient, rng, sink, tally);
                }
                v
            }
            None => return escaped(tally, 1.0),
        },
    };

    // ballistic flight through ambient voxels up to the tissue surface
    match march(grid, pos, dir, &mut vox, TissueTag::Ambient, f64::INFINITY) {
        Step::Crossing {
            len,
            next,
            next_tag,
            outside,
            ..
        } => {
            if outside {
                return escaped(tally, 1.0);
            }
            pos += dir * len;
            debug_assert_ne!(next_tag, TissueTag::Ambient);
            trace_from_entry(scene, pos, dir, next, TissueTag::Ambient, rng, sink, tally)
        }
        Step::Interaction { .. } => escaped(tally, 1.0),
    }
}

/// Continues a walk at the face of tissue voxel `entry`, arriving from a
/// medium tagged `from` (ambient at launch).
#[allow(clippy::too_many_arguments)]
fn trace_from_entry<S: DepositSink + ?Sized>(
    scene: &TransportScene<'_>,
    mut pos: Vec3,
    mut dir: Vec3,
    entry: [i64; 3],
    from: TissueTag,
    rng: &mut RngStream,
    sink: &mut S,
    mut tally: WeightTally,
) -> Result<TraceOutcome, TransportError> {
    let grid = scene.grid;
    let media = scene.media;
    let constants = &scene.constants;
    let dims = grid.dims();
    let c = constants.c_vacuum;

    let entry_tag = grid.label_or_ambient(entry);
    // refraction (or specular reflection) at the tissue surface
    let n_from = media.get(from).n;
    let n_to = media.get(entry_tag).n;
    if scene.mismatch && n_from != n_to {
        // entering face normal: the axis along which the packet is most aligned
        let normal = entry_normal(grid, pos, entry);
        match boundary_interact(rng, dir, normal, n_from, n_to) {
            BoundaryOutcome::Reflected(_) => {
                tally.escaped += 1.0;
                return Ok(TraceOutcome {
                    fate: PhotonFate::Escaped,
                    record: None,
                    tally,
                });
            }
            BoundaryOutcome::Transmitted(d) => dir = d,
        }
    }

    let mut vox = entry;
    let mut tag = entry_tag;
    let mut weight = 1.0f64;
    let mut elapsed = 0.0f64;
    let mut partial = [0.0f64; TISSUE_COUNT];
    let mut scatters = 0u64;
    let mut tau = -math::ln(rng.uniform_open());
    let mut zero_steps = 0u32;

    loop {
        let med = media.get(tag);
        let mu_t = med.mu_t();
        let limit = if mu_t > 0.0 { tau / mu_t } else { f64::INFINITY };
        let step = march(grid, pos, dir, &mut vox, tag, limit);
        let len = match step {
            Step::Interaction { len } | Step::Crossing { len, .. } => len,
        };
        pos += dir * len;
        elapsed += len * med.n / c;
        partial[tag.index()] += len;
        if elapsed > constants.max_time {
            tally.timed_out += weight;
            return Ok(TraceOutcome {
                fate: PhotonFate::TimedOut,
                record: None,
                tally,
            });
        }
        match step {
            Step::Interaction { .. } => {
                zero_steps = 0;
                let a = attenuate(weight, med.mua, med.mus);
                let lin = vox[0] as usize + dims[0] * (vox[1] as usize + dims[1] * vox[2] as usize);
                sink.deposit(lin, scene.gates.gate_of(elapsed), a.deposited);
                tally.absorbed += a.deposited;
                weight = a.weight;
                if weight <= 0.0 {
                    return Ok(TraceOutcome {
                        fate: PhotonFate::Absorbed,
                        record: None,
                        tally,
                    });
                }
                dir = scatter_direction(rng, med.g, dir);
                scatters += 1;
                match roulette(rng, weight, constants) {
                    Some(w) => {
                        if w > weight {
                            tally.roulette_gained += w - weight;
                        }
                        weight = w;
                    }
                    None => {
                        tally.roulette_killed += weight;
                        return Ok(TraceOutcome {
                            fate: PhotonFate::RouletteKilled,
                            record: None,
                            tally,
                        });
                    }
                }
                tau = -math::ln(rng.uniform_open());
            }
            Step::Crossing {
                axis,
                sign,
                next,
                next_tag,
                outside,
                ..
            } => {
                if mu_t > 0.0 {
                    tau = (tau - mu_t * len).max(0.0);
                }
                if len == 0.0 {
                    zero_steps += 1;
                    if zero_steps > MAX_ZERO_LENGTH_EVENTS {
                        tally.escaped += weight;
                        return Ok(TraceOutcome {
                            fate: PhotonFate::Escaped,
                            record: None,
                            tally,
                        });
                    }
                } else {
                    zero_steps = 0;
                }
                let n1 = med.n;
                let n2 = media.get(next_tag).n;
                let outcome = if scene.mismatch && n1 != n2 {
                    let mut normal = Vec3::ZERO;
                    normal[axis] = sign as f64;
                    boundary_interact(rng, dir, normal, n1, n2)
                } else {
                    BoundaryOutcome::Transmitted(dir)
                };
                match outcome {
                    BoundaryOutcome::Reflected(d) => dir = d,
                    BoundaryOutcome::Transmitted(d) => {
                        dir = d;
                        if outside || next_tag == TissueTag::Ambient {
                            return Ok(exit(scene, pos, weight, elapsed, partial, scatters, rng, tally));
                        }
                        vox = next;
                        tag = next_tag;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn exit(
    scene: &TransportScene<'_>,
    pos: Vec3,
    weight: f64,
    elapsed: f64,
    partial: [f64; TISSUE_COUNT],
    scatters: u64,
    rng: &RngStream,
    mut tally: WeightTally,
) -> TraceOutcome {
    match scene.detectors.iter().position(|d| d.captures(pos)) {
        Some(j) => {
            tally.detected += weight;
            tally.detected_photons += 1;
            TraceOutcome {
                fate: PhotonFate::Detected(j as u32),
                record: Some(DetectorRecord {
                    photon_index: rng.photon_index(),
                    detector_index: j as u32,
                    exit_position: pos,
                    exit_weight: weight,
                    time_of_flight: elapsed,
                    partial_paths: partial,
                    scatter_count: scatters,
                }),
                tally,
            }
        }
        None => {
            tally.escaped += weight;
            TraceOutcome {
                fate: PhotonFate::Escaped,
                record: None,
                tally,
            }
        }
    }
}

/// Normal of the face of voxel `v` on which `p` lies (the nearest face).
fn entry_normal(grid: &LabelGrid, p: Vec3, v: [i64; 3]) -> Vec3 {
    let vs = grid.voxel_size();
    let mut best = (f64::INFINITY, 0usize, 1.0);
    for a in 0..3 {
        let lo = grid.origin()[a] + v[a] as f64 * vs;
        let hi = lo + vs;
        let dl = (p[a] - lo).abs();
        let dh = (p[a] - hi).abs();
        if dl < best.0 {
            best = (dl, a, -1.0);
        }
        if dh < best.0 {
            best = (dh, a, 1.0);
        }
    }
    let mut n = Vec3::ZERO;
    n[best.1] = best.2;
    n
}

/// Traces photons `first..first + count` of a run sequentially, feeding
/// deposits to `sink` and detections to `on_detect` in photon order.
pub fn trace_batch<S, D>(
    scene: &TransportScene<'_>,
    source: &SourceDef,
    master_seed: u64,
    first: u64,
    count: u64,
    sink: &mut S,
    mut on_detect: D,
) -> Result<WeightTally, TransportError>
where
    S: DepositSink + ?Sized,
    D: FnMut(DetectorRecord),
{
    let mut total = WeightTally::default();
    if count == 0 {
        return Ok(total);
    }
    let mut rng = RngStream::new(master_seed, first);
    for index in first..first + count {
        rng.reset_to(index);
        let out = trace_photon(scene, source, &mut rng, sink)?;
        total.merge(&out.tally);
        if let Some(rec) = out.record {
            on_detect(rec);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head_model::{builtin_media, LayeredHeadModel, TissueMedium};
    use alloc::vec::Vec;

    fn mean_and_se(samples: &[f64]) -> (f64, f64) {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        (mean, math::sqrt(var / n))
    }

    #[test]
    fn free_path_mean_unit_coefficient() {
        let mut rng = RngStream::new(1, 0);
        let samples: Vec<f64> = (0..1_000_000)
            .map(|_| sample_free_path(&mut rng, 1.0).unwrap())
            .collect();
        let (mean, _) = mean_and_se(&samples);
        assert!((mean - 1.0).abs() < 0.005, "{mean}");
    }

    #[test]
    fn free_path_limits_and_errors() {
        assert!(free_path_from_uniform(1.0 - 1e-12, 2.0) < 1e-11);
        let mut rng = RngStream::new(1, 0);
        assert!(sample_free_path(&mut rng, 0.0).is_err());
        assert!(sample_free_path(&mut rng, -1.0).is_err());
    }

    #[test]
    fn scalp_free_path_mean() {
        let mu_t = 0.0191 + 0.66;
        let mut rng = RngStream::new(3, 0);
        let samples: Vec<f64> = (0..1_000_000)
            .map(|_| sample_free_path(&mut rng, mu_t).unwrap())
            .collect();
        let (mean, _) = mean_and_se(&samples);
        assert!((mean - 1.4725).abs() / 1.4725 < 0.01, "{mean}");
    }

    #[test]
    fn hg_moments() {
        for g in [-0.5, 0.0, 0.9, 0.9835] {
            let mut rng = RngStream::new(11, 0);
            let samples: Vec<f64> = (0..1_000_000)
                .map(|_| sample_hg_cosine(g, rng.uniform_open()))
                .collect();
            let (mean, se) = mean_and_se(&samples);
            assert!((mean - g).abs() <= 3.0 * se, "g={g}: mean {mean}, se {se}");
        }
    }

    #[test]
    fn hg_forward_limit_keeps_direction() {
        let mut rng = RngStream::new(5, 0);
        let dir = Vec3::new(0.2, -0.3, 0.9).normalized().unwrap();
        for _ in 0..100 {
            let out = scatter_direction(&mut rng, 1.0, dir);
            assert!((out - dir).norm() < 1e-12);
        }
    }

    #[test]
    fn scattered_directions_stay_unit() {
        let mut rng = RngStream::new(5, 1);
        let mut dir = Vec3::new(0.0, 0.0, 1.0);
        for _ in 0..10_000 {
            dir = scatter_direction(&mut rng, 0.9, dir);
            assert!((dir.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attenuation_examples() {
        let a = attenuate(1.0, 0.0191, 0.66);
        assert!((a.weight - 0.97187).abs() < 1e-5);
        assert_eq!(attenuate(0.7, 0.0, 1.0).weight, 0.7);
        let b = attenuate(1.0, 0.13, 86.35);
        assert!((b.weight - 0.99850).abs() < 1e-5);
        assert!((a.weight + a.deposited - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fresnel_values() {
        let r = fresnel_reflectance(1.0, 1.4, 1.0);
        assert!((r - 0.02778).abs() < 1e-5, "{r}");
        let critical = math::asin(1.0 / 1.4);
        assert_eq!(fresnel_reflectance(math::cos(critical + 0.01), 1.4, 1.0), 1.0);
        assert_eq!(fresnel_reflectance(0.3, 1.4, 1.4), 0.0);
    }

    #[test]
    fn boundary_matched_index_transmits_unchanged() {
        let mut rng = RngStream::new(1, 0);
        let d = Vec3::new(0.6, 0.0, 0.8);
        assert_eq!(
            boundary_interact(&mut rng, d, Vec3::new(0.0, 0.0, 1.0), 1.33, 1.33),
            BoundaryOutcome::Transmitted(d)
        );
        assert_eq!(rng.draw_counter(), 0);
    }

    #[test]
    fn boundary_total_internal_reflection() {
        let mut rng = RngStream::new(1, 0);
        // 60 degrees incidence beyond the ~45.6 degree critical angle
        let d = Vec3::new(math::sin(PI / 3.0), 0.0, math::cos(PI / 3.0));
        for _ in 0..1000 {
            match boundary_interact(&mut rng, d, Vec3::new(0.0, 0.0, 1.0), 1.4, 1.0) {
                BoundaryOutcome::Reflected(r) => {
                    assert!((r - Vec3::new(d.x, 0.0, -d.z)).norm() < 1e-12)
                }
                other => panic!("expected reflection, got {other:?}"),
            }
        }
    }

    #[test]
    fn refraction_obeys_snell() {
        let mut rng = RngStream::new(2, 0);
        let theta_i: f64 = 0.3;
        let d = Vec3::new(math::sin(theta_i), 0.0, math::cos(theta_i));
        for _ in 0..200 {
            if let BoundaryOutcome::Transmitted(t) =
                boundary_interact(&mut rng, d, Vec3::new(0.0, 0.0, -1.0), 1.4, 1.0)
            {
                let sin_t = t.x;
                assert!((1.4 * math::sin(theta_i) - 1.0 * sin_t).abs() < 1e-12);
                assert!(t.z > 0.0);
                return;
            }
        }
        panic!("no transmission in 200 trials");
    }

    #[test]
    fn roulette_rules() {
        let k = SimulationConstants::default();
        let mut rng = RngStream::new(1, 0);
        assert_eq!(roulette(&mut rng, 0.5, &k), Some(0.5));
        assert_eq!(rng.draw_counter(), 0);
        let mut survivors = 0;
        for _ in 0..1000 {
            if let Some(w) = roulette(&mut rng, 1e-5, &k) {
                assert!((w - 1e-4).abs() < 1e-18);
                survivors += 1;
            }
        }
        assert!(survivors > 50 && survivors < 160, "{survivors}");
    }

    #[test]
    fn roulette_preserves_expected_weight() {
        let k = SimulationConstants::default();
        let mut rng = RngStream::new(77, 0);
        let w = 3e-5;
        let trials = 1_000_000;
        let total: f64 = (0..trials)
            .map(|_| roulette(&mut rng, w, &k).unwrap_or(0.0))
            .sum();
        let mean = total / trials as f64;
        assert!((mean - w).abs() / w < 0.01, "{mean}");
    }

    #[test]
    fn time_gates() {
        let g = TimeGates::default();
        assert_eq!(g.gate_of(0.0), 0);
        assert_eq!(g.gate_of(99.999), 0);
        assert_eq!(g.gate_of(100.0), 1);
        assert_eq!(g.gate_of(5000.0), 49);
        assert_eq!(g.end(), 5000.0);
        assert!(TimeGates::new(0.0, 0.0, 5).is_err());
    }

    fn vacuum_like_media() -> MediaTable {
        let clear = TissueMedium::new(0.0, 0.0, 0.9, 1.4).unwrap();
        MediaTable::new(830, [TissueMedium::AMBIENT, clear, clear, clear, clear, clear]).unwrap()
    }

    #[test]
    fn ballistic_chord_time() {
        let model = LayeredHeadModel::reference();
        let grid = model.voxelize(1.0).unwrap();
        let media = vacuum_like_media();
        let scene = TransportScene {
            grid: &grid,
            media: &media,
            detectors: &[],
            constants: SimulationConstants::default(),
            gates: TimeGates::default(),
            mismatch: false,
        };
        // straight through the centre along +x, starting outside the grid
        let src = SourceDef::pencil(Vec3::new(-5.0, 93.5, 93.5), Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let mut rng = RngStream::new(1, 0);
        let out = trace_photon(&scene, &src, &mut rng, &mut NullSink).unwrap();
        assert_eq!(out.fate, PhotonFate::Escaped);
        assert_eq!(out.tally.escaped, 1.0);
        assert_eq!(out.tally.absorbed, 0.0);
        // chord through the voxelized sphere: count tissue voxels on the row
        let j = 93;
        let k = 93;
        let tissue = (0..186)
            .filter(|&i| grid.label(i, j, k) != TissueTag::Ambient)
            .count() as f64;
        let det = DetectorDef::new(Vec3::new(93.0 + tissue / 2.0, 93.5, 93.5), 0.01).unwrap();
        let dets = [det];
        let scene = TransportScene {
            detectors: &dets,
            ..scene
        };
        let mut rng = RngStream::new(1, 0);
        let out = trace_photon(&scene, &src, &mut rng, &mut NullSink).unwrap();
        let rec = out.record.expect("exit point lies on the detector");
        let expected = tissue * 1.4 / C_VACUUM_MM_PER_PS;
        assert!((rec.time_of_flight - expected).abs() / expected < 1e-12);
        assert_eq!(rec.scatter_count, 0);
    }

    #[test]
    fn source_inside_tissue_is_rejected() {
        let model = LayeredHeadModel::reference();
        let grid = model.voxelize(4.0).unwrap();
        let media = builtin_media(830).unwrap();
        let scene = TransportScene {
            grid: &grid,
            media: &media,
            detectors: &[],
            constants: SimulationConstants::default(),
            gates: TimeGates::default(),
            mismatch: true,
        };
        let src = SourceDef::pencil(model.center(), Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let mut rng = RngStream::new(1, 0);
        assert!(matches!(
            trace_photon(&scene, &src, &mut rng, &mut NullSink),
            Err(TransportError::SourceInTissue { .. })
        ));
        assert!(retract_to_ambient(&grid, &src).is_err());
    }

    #[test]
    fn layered_walks_conserve_weight_and_time() {
        let model = LayeredHeadModel::reference();
        let grid = model.voxelize(2.0).unwrap();
        let media = builtin_media(830).unwrap();
        let optodes = crate::optodes::default_grid(&model);
        let scene = TransportScene {
            grid: &grid,
            media: &media,
            detectors: &optodes.detectors,
            constants: SimulationConstants::default(),
            gates: TimeGates::default(),
            mismatch: true,
        };
        let src = retract_to_ambient(&grid, &optodes.sources[0]).unwrap();
        let mut deposited = 0.0;
        let mut records = Vec::new();
        let tally = trace_batch(
            &scene,
            &src,
            99,
            0,
            3000,
            &mut |_: usize, _: usize, w: f64| deposited += w,
            |r| records.push(r),
        )
        .unwrap();
        assert_eq!(tally.launched_photons, 3000);
        assert!(tally.relative_residual() < 1e-9, "{tally:?}");
        assert!((deposited - tally.absorbed).abs() < 1e-9);
        assert!(tally.absorbed > 0.0);
        for r in &records {
            let t = r.optical_time(&media, C_VACUUM_MM_PER_PS);
            assert!((t - r.time_of_flight).abs() / r.time_of_flight < 1e-6);
            assert!(r.exit_weight > 0.0 && r.exit_weight <= 1.0);
        }
    }

    #[test]
    fn retract_moves_surface_source_out() {
        let model = LayeredHeadModel::reference();
        let grid = model.voxelize(1.0).unwrap();
        let optodes = crate::optodes::default_grid(&model);
        for s in &optodes.sources {
            let moved = retract_to_ambient(&grid, s).unwrap();
            assert!(moved.position.distance(s.position) <= 3f64.sqrt() + 1e-6);
            if let Some(v) = grid.voxel_of(moved.position) {
                assert_eq!(grid.label(v[0], v[1], v[2]), TissueTag::Ambient);
            }
        }
    }

    #[test]
    fn reweighting_matches_absorption_change() {
        let rec = DetectorRecord {
            photon_index: 0,
            detector_index: 0,
            exit_position: Vec3::ZERO,
            exit_weight: 0.5,
            time_of_flight: 1.0,
            partial_paths: [0.0, 10.0, 0.0, 0.0, 0.0, 0.0],
            scatter_count: 3,
        };
        let a = builtin_media(830).unwrap();
        let mut b = a.clone();
        let mut scalp = *a.get(TissueTag::Scalp);
        scalp.mua += 0.01;
        b.set(TissueTag::Scalp, scalp).unwrap();
        let w = rec.reweighted(&a, &b);
        assert!((w - 0.5 * math::exp(-0.1)).abs() < 1e-12);
    }
}
