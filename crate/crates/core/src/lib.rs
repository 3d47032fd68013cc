//! Deterministic Monte Carlo photon migration through a layered spherical
//! head model.
//!
//! This crate is `no_std` (it needs `alloc`) and holds everything that is
//! pure computation:
//!
//! * [`head_model`]: tissue media tables, the four-sphere head geometry and
//!   its voxelization.
//! * [`optodes`]: source/detector placement on the scalp sphere and the
//!   cylinder projection used to lift flat strip coordinates into 3-D.
//! * [`transport`]: the photon random walk (free-path sampling,
//!   Henyey-Greenstein scattering, Fresnel boundaries, roulette, detection).
//! * [`analysis`]: channel geometry, coupling diagnostics and the analytic
//!   TPSF used to check the transport kernel.
//!
//! IO, file formats, the parallel driver and the CLI live in the
//! `photonforge` crate.
//!
//! Units are millimetres, picoseconds and inverse millimetres throughout.

#![cfg_attr(not(feature = "std"), no_std)]

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("photonforge-core needs either the `std` or the `libm` feature");

extern crate alloc;

pub mod analysis;
pub mod head_model;
pub(crate) mod math;
pub mod optodes;
pub mod rng;
pub mod transport;
mod vector;

pub use head_model::{
    builtin_media, HeadModelError, LabelGrid, LayerRadii, LayerThickness, LayeredHeadModel,
    MediaTable, SphereInclusion, TissueMedium, TissueTag, TISSUE_COUNT,
};
pub use optodes::{
    cylinder_project, default_grid, pencil_direction, place_on_sphere, AngularPlacement,
    BeamKind, CylinderProjection, DetectorDef, OptodeArray, OptodeClass, OptodeError,
    SourceDef,
};
pub use rng::RngStream;
pub use transport::{
    trace_photon, DetectorRecord, PhotonFate, SimulationConstants, TimeGates, TraceOutcome,
    TransportError, TransportScene, WeightTally,
};
pub use vector::Vec3;
