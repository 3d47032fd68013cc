//! Channel geometry, coupling diagnostics and the analytic TPSF.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::head_model::TissueMedium;
use crate::math;
use crate::optodes::cylinder_project;
use crate::transport::TimeGates;
use crate::vector::Vec3;

/// Default distance quantum for rank classes, mm.
pub const DEFAULT_RANK_QUANTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Domain(&'static str),
    #[error("matrix shapes differ: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
}

/// Dense row-major matrix, rows are sources and columns detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, AnalysisError> {
        if data.len() != rows * cols {
            return Err(AnalysisError::Domain("matrix data length does not match its shape"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Stacks `times` copies of every row in order (row 0, row 0, row 1, ...).
    /// Used when each physical source appears once per wavelength.
    pub fn duplicate_rows(&self, times: usize) -> Self {
        let mut data = Vec::with_capacity(self.data.len() * times);
        for r in 0..self.rows {
            for _ in 0..times {
                data.extend_from_slice(self.row(r));
            }
        }
        Self {
            rows: self.rows * times,
            cols: self.cols,
            data,
        }
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub type RankMatrix = Matrix<u32>;

impl RankMatrix {
    pub fn max_rank(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// Pairwise Euclidean distances, sources × detectors.
pub fn pair_distances(sources: &[Vec3], detectors: &[Vec3]) -> Matrix<f64> {
    let mut data = Vec::with_capacity(sources.len() * detectors.len());
    for s in sources {
        for d in detectors {
            data.push(s.distance(*d));
        }
    }
    Matrix {
        rows: sources.len(),
        cols: detectors.len(),
        data,
    }
}

/// Nearest-neighbour rank of every source-detector pair with the default
/// 0.1 mm quantum.
pub fn nn_ranks(sources: &[Vec3], detectors: &[Vec3]) -> Result<RankMatrix, AnalysisError> {
    nn_ranks_quantized(sources, detectors, DEFAULT_RANK_QUANTUM)
}

/// Distances are rounded to multiples of `quantum`; the distinct values,
/// sorted ascending, are numbered from 0 and every pair gets the number of
/// its class.
pub fn nn_ranks_quantized(
    sources: &[Vec3],
    detectors: &[Vec3],
    quantum: f64,
) -> Result<RankMatrix, AnalysisError> {
    if sources.is_empty() || detectors.is_empty() {
        return Err(AnalysisError::Domain("need at least one source and one detector"));
    }
    if !(quantum > 0.0 && quantum.is_finite()) {
        return Err(AnalysisError::Domain("rank quantum must be positive"));
    }
    let d = pair_distances(sources, detectors);
    Ok(ranks_from_distances(&d, quantum))
}

pub fn ranks_from_distances(distances: &Matrix<f64>, quantum: f64) -> RankMatrix {
    let keys: Vec<i64> = distances
        .as_slice()
        .iter()
        .map(|&x| math::round(x / quantum) as i64)
        .collect();
    let mut classes = keys.clone();
    classes.sort_unstable();
    classes.dedup();
    let data = keys
        .iter()
        .map(|k| classes.binary_search(k).expect("key is present") as u32)
        .collect();
    Matrix {
        rows: distances.rows,
        cols: distances.cols,
        data,
    }
}

/// A flat 2-D optode position on a strip, mm. `lateral` runs around the
/// head and is the coordinate that gets wrapped onto a cylinder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StripPoint {
    pub lateral: f64,
    pub vertical: f64,
}

impl StripPoint {
    pub const fn new(lateral: f64, vertical: f64) -> Self {
        Self { lateral, vertical }
    }

    pub fn flat(self) -> Vec3 {
        Vec3::new(self.lateral, self.vertical, 0.0)
    }

    /// Position after wrapping the lateral coordinate onto a cylinder of the
    /// given circumference: `(r sin θ, vertical, r (1 − cos θ))`.
    pub fn lifted(self, circumference: f64) -> Vec3 {
        let p = cylinder_project(circumference, self.lateral);
        Vec3::new(
            p.radius * math::sin(p.theta),
            self.vertical,
            p.depth,
        )
    }
}

/// Strip coordinates of the reference 2×16 grid unrolled from a sphere of
/// `radius`: `lateral = R·azimuth`, `vertical = R·elevation`, using the
/// exact 11.5° pitch. Returns (sources, detectors).
pub fn reference_strip(radius: f64) -> (Vec<StripPoint>, Vec<StripPoint>) {
    const PITCH: f64 = 11.5;
    let arc = |el: f64, az: f64| StripPoint::new(radius * az.to_radians(), radius * el.to_radians());
    let mut sources = Vec::with_capacity(32);
    let mut detectors = Vec::with_capacity(32);
    for k in 0..16 {
        let step = PITCH * k as f64;
        sources.push(arc(0.0, -1.75 + step));
        sources.push(arc(11.0, 9.75 + step));
        detectors.push(arc(-6.0, 3.75 + step));
        detectors.push(arc(6.0, 3.75 + step));
    }
    (sources, detectors)
}

/// Per-pair geometry of a strip layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGeometry {
    /// Flat distance, mm.
    pub d2: Matrix<f64>,
    /// Distance after the cylinder lift, mm.
    pub d3: Matrix<f64>,
    pub nn_rank: RankMatrix,
}

impl ChannelGeometry {
    pub fn from_strip(
        sources: &[StripPoint],
        detectors: &[StripPoint],
        circumference: f64,
    ) -> Result<Self, AnalysisError> {
        if !(circumference > 0.0) {
            return Err(AnalysisError::Domain("circumference must be positive"));
        }
        let flat_s: Vec<Vec3> = sources.iter().map(|p| p.flat()).collect();
        let flat_d: Vec<Vec3> = detectors.iter().map(|p| p.flat()).collect();
        let lift_s: Vec<Vec3> = sources.iter().map(|p| p.lifted(circumference)).collect();
        let lift_d: Vec<Vec3> = detectors.iter().map(|p| p.lifted(circumference)).collect();
        Ok(Self {
            d2: pair_distances(&flat_s, &flat_d),
            d3: pair_distances(&lift_s, &lift_d),
            nn_rank: nn_ranks(&flat_s, &flat_d)?,
        })
    }
}

/// `d2 − d3` for every pair, where `d3` is measured after lifting both
/// points onto the cylinder. Never negative: a chord is never longer than
/// the arc it spans.
pub fn distance_delta(
    sources: &[StripPoint],
    detectors: &[StripPoint],
    circumference: f64,
) -> Result<Matrix<f64>, AnalysisError> {
    let g = ChannelGeometry::from_strip(sources, detectors, circumference)?;
    let mut out = g.d2.clone();
    for (o, d3) in out.data.iter_mut().zip(g.d3.as_slice()) {
        // rounding can leave a tiny negative for coincident points
        *o = (*o - d3).max(0.0);
    }
    Ok(out)
}

/// Summary of one rank class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStat {
    pub rank: u32,
    pub count: usize,
    pub mean: f64,
    /// Standard error of the mean; zero for singleton groups.
    pub standard_error: f64,
}

/// Mean and standard error of `values` within each rank class, ordered by rank.
pub fn group_by_rank(values: &Matrix<f64>, ranks: &RankMatrix) -> Result<Vec<GroupStat>, AnalysisError> {
    if values.shape() != ranks.shape() {
        return Err(AnalysisError::Shape(values.shape(), ranks.shape()));
    }
    let mut groups: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (&v, &r) in values.as_slice().iter().zip(ranks.as_slice()) {
        groups.entry(r).or_default().push(v);
    }
    Ok(groups
        .into_iter()
        .map(|(rank, xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let se = if xs.len() > 1 {
                let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
                math::sqrt(var / n)
            } else {
                0.0
            };
            GroupStat {
                rank,
                count: xs.len(),
                mean,
                standard_error: se,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum OptodeRole {
    Source,
    Detector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingFlag {
    pub role: OptodeRole,
    pub index: usize,
    /// Median |log10 ratio| over the optode's pairs.
    pub median_abs_log_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingReport {
    /// Pair magnitude over its rank-group mean; `None` where excluded.
    pub ratios: Matrix<Option<f64>>,
    pub flags: Vec<CouplingFlag>,
    /// Pairs left out because their group mean is zero.
    pub excluded: Vec<(usize, usize)>,
}

impl CouplingReport {
    pub fn flagged_detectors(&self) -> Vec<usize> {
        self.flagged(OptodeRole::Detector)
    }

    pub fn flagged_sources(&self) -> Vec<usize> {
        self.flagged(OptodeRole::Source)
    }

    fn flagged(&self, role: OptodeRole) -> Vec<usize> {
        self.flags
            .iter()
            .filter(|f| f.role == role)
            .map(|f| f.index)
            .collect()
    }
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    })
}

/// Compares each pair's magnitude with the mean of its rank class and flags
/// optodes whose median |log10 ratio| exceeds `threshold_log10`.
///
/// A pair with zero magnitude in a live group has an infinite log ratio and
/// so counts fully against its optodes.
pub fn coupling_diagnostic(
    magnitude: &Matrix<f64>,
    ranks: &RankMatrix,
    threshold_log10: f64,
) -> Result<CouplingReport, AnalysisError> {
    if magnitude.shape() != ranks.shape() {
        return Err(AnalysisError::Shape(magnitude.shape(), ranks.shape()));
    }
    if !(threshold_log10 >= 0.0) {
        return Err(AnalysisError::Domain("threshold must be non-negative"));
    }
    let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    for (&v, &r) in magnitude.as_slice().iter().zip(ranks.as_slice()) {
        let e = sums.entry(r).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let (rows, cols) = magnitude.shape();
    let mut ratios = Matrix::filled(rows, cols, None);
    let mut excluded = Vec::new();
    for s in 0..rows {
        for d in 0..cols {
            let (sum, n) = sums[&ranks.get(s, d)];
            let mean = sum / n as f64;
            if mean == 0.0 || !mean.is_finite() {
                excluded.push((s, d));
            } else {
                ratios.set(s, d, Some(magnitude.get(s, d) / mean));
            }
        }
    }
    let abs_log = |r: f64| {
        if r > 0.0 {
            math::log10(r).abs()
        } else {
            f64::INFINITY
        }
    };
    let mut flags = Vec::new();
    for d in 0..cols {
        let mut xs: Vec<f64> = (0..rows).filter_map(|s| ratios.get(s, d)).map(abs_log).collect();
        if let Some(m) = median(&mut xs) {
            if m > threshold_log10 {
                flags.push(CouplingFlag {
                    role: OptodeRole::Detector,
                    index: d,
                    median_abs_log_ratio: m,
                });
            }
        }
    }
    for s in 0..rows {
        let mut xs: Vec<f64> = (0..cols).filter_map(|d| ratios.get(s, d)).map(abs_log).collect();
        if let Some(m) = median(&mut xs) {
            if m > threshold_log10 {
                flags.push(CouplingFlag {
                    role: OptodeRole::Source,
                    index: s,
                    median_abs_log_ratio: m,
                });
            }
        }
    }
    Ok(CouplingReport {
        ratios,
        flags,
        excluded,
    })
}

/// Inputs of the analytic TPSF.
///
/// The bare formula combines `D` and `μa` with time directly; here both
/// are scaled by the speed of light in the medium so that `D·v` is in mm²/ps
/// and `μa·v` in 1/ps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TPSFParams {
    /// Diffusion coefficient, mm.
    pub d: f64,
    /// Absorption coefficient, 1/mm.
    pub mua: f64,
    /// Source-detector distance, mm.
    pub r: f64,
    /// Light speed in the medium, mm/ps.
    pub speed: f64,
}

/// `D = 1 / (3 (μa + μs (1 − g)))`, mm.
pub fn diffusion_coefficient(m: &TissueMedium) -> f64 {
    1.0 / (3.0 * (m.mua + m.mus * (1.0 - m.g)))
}

impl TPSFParams {
    pub fn new(d: f64, mua: f64, r: f64, speed: f64) -> Result<Self, AnalysisError> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(AnalysisError::Domain("D must be positive"));
        }
        if !(mua >= 0.0 && mua.is_finite()) {
            return Err(AnalysisError::Domain("mua must be non-negative"));
        }
        if !(r > 0.0 && r.is_finite()) {
            return Err(AnalysisError::Domain("r must be positive"));
        }
        if !(speed > 0.0 && speed.is_finite()) {
            return Err(AnalysisError::Domain("speed must be positive"));
        }
        Ok(Self { d, mua, r, speed })
    }

    pub fn for_medium(m: &TissueMedium, r: f64, c_vacuum: f64) -> Result<Self, AnalysisError> {
        Self::new(diffusion_coefficient(m), m.mua, r, c_vacuum / m.n)
    }

    /// `r² / (4 D v)`, ps.
    pub fn diffusion_time(&self) -> f64 {
        self.r * self.r / (4.0 * self.d * self.speed)
    }

    /// Time of the maximum, ps.
    pub fn peak_time(&self) -> f64 {
        let a = self.diffusion_time();
        let k = self.mua * self.speed;
        if k == 0.0 {
            return a;
        }
        (-1.0 + math::sqrt(1.0 + 4.0 * k * a)) / (2.0 * k)
    }
}

/// `1/(4π D v t) · exp(−r²/(4 D v t) − μa v t)` for `t` in ps.
pub fn tpsf_analytic(p: &TPSFParams, t: f64) -> Result<f64, AnalysisError> {
    if !(t > 0.0) {
        return Err(AnalysisError::Domain("TPSF needs t > 0"));
    }
    let dv = p.d * p.speed;
    Ok(math::exp(-p.r * p.r / (4.0 * dv * t) - p.mua * p.speed * t) / (4.0 * PI * dv * t))
}

/// Mean of the analytic TPSF over each gate (Simpson rule, 64 panels).
pub fn tpsf_gate_curve(p: &TPSFParams, gates: &TimeGates) -> Vec<f64> {
    const PANELS: usize = 64;
    (0..gates.count)
        .map(|g| {
            let a = gates.t0 + g as f64 * gates.width;
            let h = gates.width / PANELS as f64;
            let f = |t: f64| if t > 0.0 { tpsf_analytic(p, t).unwrap_or(0.0) } else { 0.0 };
            let mut s = f(a) + f(a + gates.width);
            for i in 1..PANELS {
                s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0 / gates.width
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpsfComparison {
    pub pearson_r: f64,
    /// |t_peak(MC) − t_peak(analytic)|, ps.
    pub peak_delta: f64,
    pub gates_used: usize,
}

/// Pearson correlation of the max-normalized Monte Carlo histogram with the
/// max-normalized analytic curve over gates holding at least 10 photons.
pub fn compare_tpsf(
    mc_weights: &[f64],
    mc_counts: &[u64],
    analytic: &[f64],
    gates: &TimeGates,
) -> Result<TpsfComparison, AnalysisError> {
    let n = gates.count;
    if mc_weights.len() != n || mc_counts.len() != n || analytic.len() != n {
        return Err(AnalysisError::Domain("curves must cover the same gates"));
    }
    let mc_max = mc_weights.iter().copied().fold(0.0, f64::max);
    let an_max = analytic.iter().copied().fold(0.0, f64::max);
    if !(mc_max > 0.0) {
        return Err(AnalysisError::Domain("Monte Carlo histogram is empty"));
    }
    if !(an_max > 0.0) {
        return Err(AnalysisError::Domain("analytic curve is identically zero"));
    }
    let used: Vec<usize> = (0..n).filter(|&g| mc_counts[g] >= 10).collect();
    let xs: Vec<f64> = used.iter().map(|&g| mc_weights[g] / mc_max).collect();
    let ys: Vec<f64> = used.iter().map(|&g| analytic[g] / an_max).collect();
    let r = pearson(&xs, &ys).ok_or(AnalysisError::Domain(
        "fewer than two populated gates, correlation undefined",
    ))?;
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
            .0
    };
    Ok(TpsfComparison {
        pearson_r: r,
        peak_delta: (gates.center(argmax(mc_weights)) - gates.center(argmax(analytic))).abs(),
        gates_used: used.len(),
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / math::sqrt(sxx * syy))
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() {
        return None;
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head_model::builtin_media;
    use crate::head_model::TissueTag;
    use proptest::prelude::*;

    const SCALP_R: f64 = 92.3;

    fn strip_geometry() -> (Vec<StripPoint>, Vec<StripPoint>) {
        reference_strip(SCALP_R)
    }

    #[test]
    fn equidistant_pairs_share_rank_zero() {
        let s = [Vec3::ZERO];
        let d = [Vec3::new(5.0, 0.0, 0.0), Vec3::new(0.0, 5.0, 0.0), Vec3::new(0.0, 0.0, -5.0)];
        let r = nn_ranks(&s, &d).unwrap();
        assert!(r.as_slice().iter().all(|&x| x == 0));
    }

    #[test]
    fn two_distance_classes() {
        let s = [Vec3::ZERO];
        let d = [Vec3::new(30.0, 0.0, 0.0), Vec3::new(10.0, 0.0, 0.0)];
        let r = nn_ranks(&s, &d).unwrap();
        assert_eq!(r.as_slice(), &[1, 0]);
    }

    #[test]
    fn ranks_need_optodes() {
        assert!(nn_ranks(&[], &[Vec3::ZERO]).is_err());
        assert!(nn_ranks(&[Vec3::ZERO], &[]).is_err());
    }

    #[test]
    fn strip_fixture_rank_range() {
        let (s, d) = strip_geometry();
        let flat_s: Vec<Vec3> = s.iter().map(|p| p.flat()).collect();
        let flat_d: Vec<Vec3> = d.iter().map(|p| p.flat()).collect();
        let r = nn_ranks(&flat_s, &flat_d).unwrap().duplicate_rows(2);
        assert_eq!(r.shape(), (64, 32));
        assert!(r.max_rank() >= 7);
        // classes are contiguous from zero
        let mut seen: Vec<u32> = r.as_slice().to_vec();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, (0..=r.max_rank()).collect::<Vec<_>>());
    }

    #[test]
    fn duplicate_rows_keeps_row_order() {
        let m = Matrix::from_vec(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(m.duplicate_rows(2).as_slice(), &[1, 2, 1, 2, 3, 4, 3, 4]);
    }

    #[test]
    fn delta_trivial_cases() {
        let c = 2.0 * PI * SCALP_R;
        let p = StripPoint::new(20.0, 3.0);
        let d = distance_delta(&[p], &[p], c).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        let q = StripPoint::new(20.0, 40.0);
        let d = distance_delta(&[p], &[q], c).unwrap();
        assert!(d.get(0, 0).abs() < 1e-12);
        assert!(distance_delta(&[p], &[q], 0.0).is_err());
    }

    #[test]
    fn delta_grows_with_rank_on_fixture() {
        let (s, d) = strip_geometry();
        let c = 2.0 * PI * SCALP_R;
        let geom = ChannelGeometry::from_strip(&s, &d, c).unwrap();
        let delta = distance_delta(&s, &d, c).unwrap();
        for (d2, d3) in geom.d2.as_slice().iter().zip(geom.d3.as_slice()) {
            assert!(d3 <= &(d2 + 1e-9));
        }
        let groups = group_by_rank(&delta, &geom.nn_rank).unwrap();
        let ranks: Vec<f64> = groups.iter().map(|g| g.rank as f64).collect();
        let means: Vec<f64> = groups.iter().map(|g| g.mean).collect();
        let rho = spearman(&ranks, &means).unwrap();
        assert!(rho >= 0.9, "{rho}");
    }

    fn fixture_ranks() -> RankMatrix {
        let (s, d) = strip_geometry();
        let flat_s: Vec<Vec3> = s.iter().map(|p| p.flat()).collect();
        let flat_d: Vec<Vec3> = d.iter().map(|p| p.flat()).collect();
        nn_ranks(&flat_s, &flat_d).unwrap().duplicate_rows(2)
    }

    #[test]
    fn uniform_matrix_has_no_flags() {
        let ranks = fixture_ranks();
        let m = Matrix::filled(64, 32, 3.5);
        let rep = coupling_diagnostic(&m, &ranks, 1.0).unwrap();
        assert!(rep.flags.is_empty());
        assert!(rep.ratios.as_slice().iter().all(|r| (r.unwrap() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dead_detector_column_is_flagged() {
        let ranks = fixture_ranks();
        for dead in [0, 3, 17, 31] {
            let mut m = Matrix::filled(64, 32, 1.0);
            for s in 0..64 {
                m.set(s, dead, 0.01);
            }
            let rep = coupling_diagnostic(&m, &ranks, 1.0).unwrap();
            assert_eq!(rep.flagged_detectors(), vec![dead]);
            assert!(rep.flagged_sources().is_empty());
        }
    }

    #[test]
    fn zero_group_mean_is_excluded() {
        let ranks = Matrix::from_vec(1, 2, vec![0, 1]).unwrap();
        let m = Matrix::from_vec(1, 2, vec![0.0, 2.0]).unwrap();
        let rep = coupling_diagnostic(&m, &ranks, 1.0).unwrap();
        assert_eq!(rep.excluded, vec![(0, 0)]);
        assert_eq!(rep.ratios.get(0, 1), Some(1.0));
    }

    #[test]
    fn coupling_shape_mismatch() {
        let ranks = Matrix::filled(2, 2, 0u32);
        let m = Matrix::filled(2, 3, 1.0);
        assert!(coupling_diagnostic(&m, &ranks, 1.0).is_err());
    }

    fn brain_params(r: f64) -> TPSFParams {
        let media = builtin_media(830).unwrap();
        TPSFParams::for_medium(media.get(TissueTag::Brain), r, 0.299_792_458).unwrap()
    }

    #[test]
    fn tpsf_vanishes_at_zero() {
        let p = brain_params(20.0);
        assert!(tpsf_analytic(&p, 1e-3).unwrap() < 1e-300);
        assert!(tpsf_analytic(&p, 0.0).is_err());
        assert!(tpsf_analytic(&p, -1.0).is_err());
    }

    #[test]
    fn tpsf_peak_without_absorption() {
        let p = TPSFParams::new(2.5, 0.0, 20.0, 0.2).unwrap();
        let expected = p.diffusion_time();
        let (mut best_t, mut best) = (0.0, 0.0);
        let mut t = 0.01;
        while t < 2000.0 {
            let v = tpsf_analytic(&p, t).unwrap();
            if v > best {
                best = v;
                best_t = t;
            }
            t += 0.01;
        }
        assert!((best_t - expected).abs() < 0.02, "{best_t} vs {expected}");
        assert!((p.peak_time() - expected).abs() < 1e-12);
    }

    #[test]
    fn tpsf_absorption_factorizes() {
        let p = brain_params(20.0);
        let mut q = p;
        q.mua *= 2.0;
        for t in [10.0, 150.0, 900.0] {
            let ratio = tpsf_analytic(&q, t).unwrap() / tpsf_analytic(&p, t).unwrap();
            let expected = math::exp(-p.mua * p.speed * t);
            assert!((ratio - expected).abs() / expected < 1e-12);
        }
    }

    #[test]
    fn tpsf_self_comparison() {
        let p = brain_params(20.0);
        let gates = TimeGates::default();
        let curve = tpsf_gate_curve(&p, &gates);
        let counts = vec![100u64; gates.count];
        let c = compare_tpsf(&curve, &counts, &curve, &gates).unwrap();
        assert!((c.pearson_r - 1.0).abs() < 1e-12);
        assert_eq!(c.peak_delta, 0.0);
        let reversed: Vec<f64> = curve.iter().rev().copied().collect();
        let c = compare_tpsf(&reversed, &counts, &curve, &gates).unwrap();
        assert!(c.pearson_r < 0.5, "{}", c.pearson_r);
        let zeros = vec![0.0; gates.count];
        assert!(compare_tpsf(&zeros, &counts, &curve, &gates).is_err());
    }

    #[test]
    fn spearman_handles_ties() {
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[10.0, 20.0, 20.0, 30.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ranks_invariant_under_scaling(
            pts in proptest::collection::vec((-50.0..50.0f64, -50.0..50.0f64), 2..12),
            k in 0.5..4.0f64,
        ) {
            // snap to the quantum so rounding is the same at every scale
            let snap = |v: f64| math::round(v * 10.0) / 10.0;
            let all: Vec<Vec3> = pts.iter().map(|&(x, y)| Vec3::new(snap(x), snap(y), 0.0)).collect();
            let (s, d) = all.split_at(all.len() / 2);
            let scaled = |v: &[Vec3]| v.iter().map(|p| *p * k).collect::<Vec<_>>();
            let a = nn_ranks_quantized(s, d, 0.001).unwrap();
            let b = nn_ranks_quantized(&scaled(s), &scaled(d), 0.001 * k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn coupling_flags_scale_free(
            vals in proptest::collection::vec(0.01..100.0f64, 12),
            k in 1e-3..1e3f64,
        ) {
            let m = Matrix::from_vec(3, 4, vals).unwrap();
            let ranks = Matrix::from_vec(3, 4, vec![0, 1, 2, 3, 1, 0, 1, 2, 2, 1, 0, 1]).unwrap();
            let a = coupling_diagnostic(&m, &ranks, 0.3).unwrap();
            let b = coupling_diagnostic(&m.map(|v| v * k), &ranks, 0.3).unwrap();
            let idx = |r: &CouplingReport| r.flags.iter().map(|f| (f.role, f.index)).collect::<Vec<_>>();
            prop_assert_eq!(idx(&a), idx(&b));
        }

        #[test]
        fn delta_never_negative(
            a in (-300.0..300.0f64, -50.0..50.0f64),
            b in (-300.0..300.0f64, -50.0..50.0f64),
            c in 100.0..1000.0f64,
        ) {
            let d = distance_delta(&[StripPoint::new(a.0, a.1)], &[StripPoint::new(b.0, b.1)], c).unwrap();
            prop_assert!(d.get(0, 0) >= 0.0);
        }

        #[test]
        fn tpsf_positive_unimodal_log_concave(
            d in 0.5..5.0f64,
            mua in 0.0..0.05f64,
            r in 5.0..40.0f64,
        ) {
            let p = TPSFParams::new(d, mua, r, 0.214).unwrap();
            // log-concavity holds up to twice the diffusion time
            let t_max = 2.0 * p.diffusion_time();
            let n = 200;
            let ts: Vec<f64> = (1..=n).map(|i| t_max * i as f64 / n as f64).collect();
            let logs: Vec<f64> = ts.iter().map(|&t| math::ln(tpsf_analytic(&p, t).unwrap())).collect();
            for (t, l) in ts.iter().zip(&logs) {
                prop_assert!(tpsf_analytic(&p, *t).unwrap() > 0.0, "t={}", t);
                prop_assert!(l.is_finite());
            }
            for w in logs.windows(3) {
                prop_assert!(w[0] + w[2] - 2.0 * w[1] <= 1e-9 * w[1].abs().max(1.0));
            }
            let peak = p.peak_time();
            for w in ts.windows(2) {
                let (a, b) = (tpsf_analytic(&p, w[0]).unwrap(), tpsf_analytic(&p, w[1]).unwrap());
                if w[1] <= peak { prop_assert!(b >= a); }
                if w[0] >= peak { prop_assert!(b <= a); }
            }
        }
    }
}
