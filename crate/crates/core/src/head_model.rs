//! Parametric head geometry: four concentric tissue spheres with optional
//! embedded inclusion spheres, the optical media bound to each tissue tag,
//! and voxelization into a dense label grid.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::vector::Vec3;

/// Number of tissue tags, including ambient.
pub const TISSUE_COUNT: usize = 6;

/// Default cap on the number of voxels [`LayeredHeadModel::voxelize`] will allocate.
pub const DEFAULT_VOXEL_CAP: usize = 1 << 28;

/// Relative slack on squared radii when classifying surface points.
const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeadModelError {
    #[error("invalid medium: {0}")]
    InvalidMedium(&'static str),
    #[error("unsupported wavelength {0} nm (built-in tables exist for 690 and 830 nm)")]
    UnsupportedWavelength(u32),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(&'static str),
    #[error("inclusion {index} does not lie inside the brain sphere")]
    InclusionOutsideBrain { index: usize },
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("grid of {requested} voxels exceeds the cap of {cap}")]
    Capacity { requested: usize, cap: usize },
    #[error("label {0} is not a tissue tag")]
    InvalidLabel(u8),
    #[error("unknown tissue name {0:?}")]
    UnknownTissue(alloc::string::String),
}

/// Tissue class of a region; the discriminant is the voxel label byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum TissueTag {
    Ambient = 0,
    Scalp = 1,
    Skull = 2,
    Csf = 3,
    Brain = 4,
    Blood = 5,
}

impl TissueTag {
    pub const ALL: [TissueTag; TISSUE_COUNT] = [
        TissueTag::Ambient,
        TissueTag::Scalp,
        TissueTag::Skull,
        TissueTag::Csf,
        TissueTag::Brain,
        TissueTag::Blood,
    ];

    /// Head layers from the outside in.
    pub const LAYERS: [TissueTag; 4] = [
        TissueTag::Scalp,
        TissueTag::Skull,
        TissueTag::Csf,
        TissueTag::Brain,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_u8(label: u8) -> Result<Self, HeadModelError> {
        Self::ALL
            .get(label as usize)
            .copied()
            .ok_or(HeadModelError::InvalidLabel(label))
    }

    pub fn name(self) -> &'static str {
        match self {
            TissueTag::Ambient => "ambient",
            TissueTag::Scalp => "scalp",
            TissueTag::Skull => "skull",
            TissueTag::Csf => "csf",
            TissueTag::Brain => "brain",
            TissueTag::Blood => "blood",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, HeadModelError> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.name() == name)
            .ok_or_else(|| HeadModelError::UnknownTissue(name.into()))
    }
}

impl fmt::Display for TissueTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optical constants of one tissue at one wavelength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueMedium {
    /// Absorption coefficient, mm⁻¹.
    pub mua: f64,
    /// Scattering coefficient, mm⁻¹.
    pub mus: f64,
    /// Anisotropy factor (mean deflection cosine).
    pub g: f64,
    /// Refractive index.
    pub n: f64,
}

impl TissueMedium {
    pub const AMBIENT: TissueMedium = TissueMedium {
        mua: 0.0,
        mus: 0.0,
        g: 0.0,
        n: 1.0,
    };

    pub fn new(mua: f64, mus: f64, g: f64, n: f64) -> Result<Self, HeadModelError> {
        let m = Self { mua, mus, g, n };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), HeadModelError> {
        if !(self.mua >= 0.0 && self.mua.is_finite()) {
            return Err(HeadModelError::InvalidMedium("mua must be finite and >= 0"));
        }
        if !(self.mus >= 0.0 && self.mus.is_finite()) {
            return Err(HeadModelError::InvalidMedium("mus must be finite and >= 0"));
        }
        if !(-1.0..=1.0).contains(&self.g) {
            return Err(HeadModelError::InvalidMedium("g must lie in [-1, 1]"));
        }
        if !(self.n >= 1.0 && self.n.is_finite()) {
            return Err(HeadModelError::InvalidMedium("n must be finite and >= 1"));
        }
        Ok(())
    }

    /// Total interaction coefficient μa + μs.
    #[inline]
    pub fn mu_t(&self) -> f64 {
        self.mua + self.mus
    }
}

/// One [`TissueMedium`] per tissue tag at a single wavelength.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaTable {
    wavelength_nm: u32,
    entries: [TissueMedium; TISSUE_COUNT],
}

impl MediaTable {
    /// Builds a table; `entries` is indexed by [`TissueTag::index`].
    pub fn new(
        wavelength_nm: u32,
        entries: [TissueMedium; TISSUE_COUNT],
    ) -> Result<Self, HeadModelError> {
        for m in &entries {
            m.validate()?;
        }
        let ambient = entries[TissueTag::Ambient.index()];
        if ambient.mua != 0.0 || ambient.mus != 0.0 || ambient.n != 1.0 {
            return Err(HeadModelError::InvalidMedium(
                "ambient medium must have mua = mus = 0 and n = 1",
            ));
        }
        Ok(Self {
            wavelength_nm,
            entries,
        })
    }

    pub fn wavelength_nm(&self) -> u32 {
        self.wavelength_nm
    }

    #[inline]
    pub fn get(&self, tag: TissueTag) -> &TissueMedium {
        &self.entries[tag.index()]
    }

    pub fn entries(&self) -> &[TissueMedium; TISSUE_COUNT] {
        &self.entries
    }

    /// Replaces the medium for a non-ambient tag.
    pub fn set(&mut self, tag: TissueTag, medium: TissueMedium) -> Result<(), HeadModelError> {
        medium.validate()?;
        if tag == TissueTag::Ambient {
            return Err(HeadModelError::InvalidMedium("the ambient medium is fixed"));
        }
        self.entries[tag.index()] = medium;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (TissueTag, &TissueMedium)> {
        TissueTag::ALL.iter().copied().zip(self.entries.iter())
    }
}

/// Standard head-tissue optical properties at 690 or 830 nm.
pub fn builtin_media(wavelength_nm: u32) -> Result<MediaTable, HeadModelError> {
    let m = |mua, mus, g, n| TissueMedium { mua, mus, g, n };
    let entries = match wavelength_nm {
        830 => [
            TissueMedium::AMBIENT,
            m(0.0191, 0.66, 0.9, 1.4),
            m(0.0136, 0.86, 0.9, 1.4),
            m(0.0260, 0.01, 0.9, 1.4),
            m(0.0186, 1.11, 0.9, 1.4),
            m(0.46, 75.06, 0.9835, 1.33),
        ],
        690 => [
            TissueMedium::AMBIENT,
            m(0.0159, 0.80, 0.9, 1.4),
            m(0.0101, 1.00, 0.9, 1.4),
            m(0.0004, 0.01, 0.9, 1.4),
            m(0.0178, 1.25, 0.9, 1.4),
            m(0.13, 86.35, 0.9835, 1.33),
        ],
        other => return Err(HeadModelError::UnsupportedWavelength(other)),
    };
    MediaTable::new(wavelength_nm, entries)
}

/// Layer thicknesses, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerThickness {
    pub scalp: f64,
    pub skull: f64,
    pub csf: f64,
}

impl LayerThickness {
    /// Scalp 8 mm, skull 5 mm, CSF 2.5 mm.
    pub const REFERENCE: LayerThickness = LayerThickness {
        scalp: 8.0,
        skull: 5.0,
        csf: 2.5,
    };

    pub fn total(&self) -> f64 {
        self.scalp + self.skull + self.csf
    }
}

/// Outer radius of each layer, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerRadii {
    pub scalp: f64,
    pub skull: f64,
    pub csf: f64,
    pub brain: f64,
}

impl LayerRadii {
    pub fn as_array(&self) -> [f64; 4] {
        [self.scalp, self.skull, self.csf, self.brain]
    }
}

/// A sphere embedded in the brain with its own medium (usually blood).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereInclusion {
    pub center: Vec3,
    pub radius: f64,
    pub medium_tag: TissueTag,
}

impl SphereInclusion {
    pub fn new(center: Vec3, radius: f64, medium_tag: TissueTag) -> Result<Self, HeadModelError> {
        if !(radius > 0.0 && radius.is_finite()) || !center.is_finite() {
            return Err(HeadModelError::InvalidGeometry(
                "inclusion radius must be positive and finite",
            ));
        }
        if medium_tag == TissueTag::Ambient {
            return Err(HeadModelError::InvalidGeometry(
                "inclusions cannot be ambient",
            ));
        }
        Ok(Self {
            center,
            radius,
            medium_tag,
        })
    }
}

/// Four concentric spheres (scalp, skull, CSF, brain) plus inclusions inside the brain.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredHeadModel {
    center: Vec3,
    scalp_radius: f64,
    thickness: LayerThickness,
    inclusions: Vec<SphereInclusion>,
    radii: LayerRadii,
}

impl LayeredHeadModel {
    pub fn new(
        center: Vec3,
        scalp_radius: f64,
        thickness: LayerThickness,
        inclusions: Vec<SphereInclusion>,
    ) -> Result<Self, HeadModelError> {
        if !center.is_finite() {
            return Err(HeadModelError::InvalidGeometry("center must be finite"));
        }
        if !(scalp_radius > 0.0 && scalp_radius.is_finite()) {
            return Err(HeadModelError::InvalidGeometry(
                "scalp radius must be positive and finite",
            ));
        }
        let t = thickness;
        if ![t.scalp, t.skull, t.csf]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite())
        {
            return Err(HeadModelError::InvalidGeometry(
                "layer thicknesses must be finite and >= 0",
            ));
        }
        if scalp_radius <= t.total() {
            return Err(HeadModelError::InvalidGeometry(
                "scalp radius must exceed the summed layer thicknesses",
            ));
        }
        let skull = scalp_radius - t.scalp;
        let csf = skull - t.skull;
        let brain = csf - t.csf;
        let radii = LayerRadii {
            scalp: scalp_radius,
            skull,
            csf,
            brain,
        };
        let mut model = Self {
            center,
            scalp_radius,
            thickness,
            inclusions: Vec::new(),
            radii,
        };
        for inc in inclusions {
            model.push_inclusion(inc)?;
        }
        Ok(model)
    }

    /// Builds a model from the four outer radii directly, so radii read back
    /// from a file are used exactly as written.
    pub fn from_radii(
        center: Vec3,
        radii: LayerRadii,
        inclusions: Vec<SphereInclusion>,
    ) -> Result<Self, HeadModelError> {
        let r = radii.as_array();
        if !r.iter().all(|v| v.is_finite()) || !(r[3] > 0.0) {
            return Err(HeadModelError::InvalidGeometry("layer radii must be finite and positive"));
        }
        if !(r[0] >= r[1] && r[1] >= r[2] && r[2] >= r[3]) {
            return Err(HeadModelError::InvalidGeometry(
                "layer radii must not increase inward",
            ));
        }
        let mut model = Self::new(
            center,
            radii.scalp,
            LayerThickness {
                scalp: radii.scalp - radii.skull,
                skull: radii.skull - radii.csf,
                csf: radii.csf - radii.brain,
            },
            Vec::new(),
        )?;
        model.radii = radii;
        for inc in inclusions {
            model.push_inclusion(inc)?;
        }
        Ok(model)
    }

    /// Centre (93, 93, 93), scalp radius 92.3 mm, reference thicknesses, no inclusions.
    pub fn reference() -> Self {
        Self::new(
            Vec3::splat(93.0),
            92.3,
            LayerThickness::REFERENCE,
            Vec::new(),
        )
        .expect("reference head model is valid")
    }

    /// Adds an inclusion; it must lie entirely inside the brain sphere.
    pub fn push_inclusion(&mut self, inclusion: SphereInclusion) -> Result<(), HeadModelError> {
        let inc = SphereInclusion::new(inclusion.center, inclusion.radius, inclusion.medium_tag)?;
        if inc.center.distance(self.center) + inc.radius > self.radii.brain {
            return Err(HeadModelError::InclusionOutsideBrain {
                index: self.inclusions.len(),
            });
        }
        self.inclusions.push(inc);
        Ok(())
    }

    pub fn with_inclusion(mut self, inclusion: SphereInclusion) -> Result<Self, HeadModelError> {
        self.push_inclusion(inclusion)?;
        Ok(self)
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn scalp_radius(&self) -> f64 {
        self.scalp_radius
    }

    pub fn thickness(&self) -> LayerThickness {
        self.thickness
    }

    pub fn inclusions(&self) -> &[SphereInclusion] {
        &self.inclusions
    }

    pub fn layer_radii(&self) -> LayerRadii {
        self.radii
    }

    /// Tissue at `p`. Points on a sphere surface belong to the inner region;
    /// an inclusion overrides the brain label, the smallest containing
    /// inclusion winning when they overlap.
    pub fn medium_at(&self, p: Vec3) -> TissueTag {
        let d2 = (p - self.center).norm_squared();
        let r = &self.radii;
        // surface points computed as centre + offset carry rounding error
        let within = |radius: f64| d2 <= radius * radius * (1.0 + TIE_TOLERANCE);
        if !within(r.scalp) {
            return TissueTag::Ambient;
        }
        if within(r.brain) {
            let mut best: Option<&SphereInclusion> = None;
            for inc in &self.inclusions {
                if (p - inc.center).norm_squared() <= inc.radius * inc.radius
                    && best.is_none_or(|b| inc.radius < b.radius)
                {
                    best = Some(inc);
                }
            }
            return best.map_or(TissueTag::Brain, |inc| inc.medium_tag);
        }
        if within(r.csf) {
            TissueTag::Csf
        } else if within(r.skull) {
            TissueTag::Skull
        } else {
            TissueTag::Scalp
        }
    }

    /// Voxelizes with [`DEFAULT_VOXEL_CAP`].
    pub fn voxelize(&self, voxel_size: f64) -> Result<LabelGrid, HeadModelError> {
        self.voxelize_with_cap(voxel_size, DEFAULT_VOXEL_CAP)
    }

    /// Dense label grid centred on the head that fully encloses the scalp
    /// sphere. Each voxel takes the label of [`Self::medium_at`] at its centre.
    pub fn voxelize_with_cap(
        &self,
        voxel_size: f64,
        max_voxels: usize,
    ) -> Result<LabelGrid, HeadModelError> {
        let dims = self.grid_dims(voxel_size)?;
        let requested = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .unwrap_or(usize::MAX);
        if requested > max_voxels {
            return Err(HeadModelError::Capacity {
                requested,
                cap: max_voxels,
            });
        }
        let origin = self.grid_origin(voxel_size, dims);
        let mut labels = vec![0u8; requested];
        let mut idx = 0;
        for k in 0..dims[2] {
            let z = origin.z + (k as f64 + 0.5) * voxel_size;
            for j in 0..dims[1] {
                let y = origin.y + (j as f64 + 0.5) * voxel_size;
                for i in 0..dims[0] {
                    let x = origin.x + (i as f64 + 0.5) * voxel_size;
                    labels[idx] = self.medium_at(Vec3::new(x, y, z)) as u8;
                    idx += 1;
                }
            }
        }
        Ok(LabelGrid {
            dims,
            voxel_size,
            origin,
            labels,
        })
    }

    /// Voxel counts per axis for a given voxel size. The grid covers the
    /// scalp sphere's bounding cube snapped outward to whole millimetres,
    /// `ceil(2 ceil(R) / size)` voxels per axis, at least 1.
    pub fn grid_dims(&self, voxel_size: f64) -> Result<[usize; 3], HeadModelError> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(HeadModelError::InvalidVoxelSize(voxel_size));
        }
        let n = math::ceil(2.0 * math::ceil(self.scalp_radius) / voxel_size);
        if n > usize::MAX as f64 / 4.0 {
            return Err(HeadModelError::Capacity {
                requested: usize::MAX,
                cap: DEFAULT_VOXEL_CAP,
            });
        }
        let n = (n as usize).max(1);
        Ok([n, n, n])
    }

    /// Lower corner of the grid, chosen so the grid is centred on the head.
    pub fn grid_origin(&self, voxel_size: f64, dims: [usize; 3]) -> Vec3 {
        let half = |d: usize| d as f64 * voxel_size * 0.5;
        Vec3::new(
            self.center.x - half(dims[0]),
            self.center.y - half(dims[1]),
            self.center.z - half(dims[2]),
        )
    }
}

/// Dense voxel grid of tissue labels, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    dims: [usize; 3],
    voxel_size: f64,
    origin: Vec3,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn from_parts(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Vec3,
        labels: Vec<u8>,
    ) -> Result<Self, HeadModelError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(HeadModelError::InvalidGeometry("grid dims must be > 0"));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(HeadModelError::InvalidVoxelSize(voxel_size));
        }
        if !origin.is_finite() {
            return Err(HeadModelError::InvalidGeometry("grid origin must be finite"));
        }
        if labels.len() != dims[0] * dims[1] * dims[2] {
            return Err(HeadModelError::InvalidGeometry(
                "label count does not match grid dims",
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= TISSUE_COUNT) {
            return Err(HeadModelError::InvalidLabel(bad));
        }
        Ok(Self {
            dims,
            voxel_size,
            origin,
            labels,
        })
    }

    /// Grid of one uniform label.
    pub fn uniform(
        dims: [usize; 3],
        voxel_size: f64,
        origin: Vec3,
        tag: TissueTag,
    ) -> Result<Self, HeadModelError> {
        let n = dims[0] * dims[1] * dims[2];
        Self::from_parts(dims, voxel_size, origin, vec![tag as u8; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn label(&self, i: usize, j: usize, k: usize) -> TissueTag {
        // labels are validated on construction
        TissueTag::ALL[self.labels[self.linear_index(i, j, k)] as usize]
    }

    /// Label at signed voxel coordinates; anything outside the grid is ambient.
    #[inline]
    pub fn label_or_ambient(&self, v: [i64; 3]) -> TissueTag {
        if v[0] < 0
            || v[1] < 0
            || v[2] < 0
            || v[0] as usize >= self.dims[0]
            || v[1] as usize >= self.dims[1]
            || v[2] as usize >= self.dims[2]
        {
            TissueTag::Ambient
        } else {
            self.label(v[0] as usize, v[1] as usize, v[2] as usize)
        }
    }

    /// Voxel containing `p`, if it is inside the grid.
    pub fn voxel_of(&self, p: Vec3) -> Option<[usize; 3]> {
        let mut out = [0usize; 3];
        for (a, slot) in out.iter_mut().enumerate() {
            let f = math::floor((p[a] - self.origin[a]) / self.voxel_size);
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            *slot = f as usize;
        }
        Some(out)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.voxel_size;
        Vec3::new(
            self.origin.x + (i as f64 + 0.5) * s,
            self.origin.y + (j as f64 + 0.5) * s,
            self.origin.z + (k as f64 + 0.5) * s,
        )
    }

    pub fn count(&self, tag: TissueTag) -> usize {
        self.labels.iter().filter(|&&l| l == tag as u8).count()
    }
}
