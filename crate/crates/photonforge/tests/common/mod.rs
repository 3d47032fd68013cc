#![allow(dead_code)]

use photonforge::sim_io::{
    ConfigDocument, DetectorRecordSet, DetectorSection, DomainSection, FluenceGrid, ForwardSection,
    OptodeSection, SessionSection, SourceSection, SphereShape,
};
use photonforge_core::{BeamKind, DetectorRecord, TimeGates, TissueMedium, TissueTag, Vec3, TISSUE_COUNT};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        proptest::num::f64::NORMAL,
        Just(0.0),
        proptest::num::f64::SUBNORMAL,
    ]
}

fn point(span: f64) -> impl Strategy<Value = [f64; 3]> {
    [-span..span, -span..span, -span..span]
}

fn unit() -> impl Strategy<Value = [f64; 3]> {
    point(1.0)
        .prop_filter("non-degenerate", |p| Vec3::from(*p).norm() > 1e-3)
        .prop_map(|p| Vec3::from(p).normalized().unwrap().to_array())
}

fn medium() -> impl Strategy<Value = TissueMedium> {
    (0.0..2.0f64, 0.0..120.0f64, -1.0..=1.0f64, 1.0..2.0f64).prop_map(|(mua, mus, g, n)| TissueMedium {
        mua,
        mus,
        g,
        n,
    })
}

fn layer_tag() -> impl Strategy<Value = TissueTag> {
    proptest::sample::select(&TissueTag::ALL[1..])
}

/// Valid, canonical config documents.
pub fn config_doc() -> impl Strategy<Value = ConfigDocument> {
    let session = ("[a-z0-9_]{1,24}", any::<u64>(), any::<u64>(), any::<bool>());
    let forward = (0.0..2000.0f64, 0.5..500.0f64, 1u32..300, 0.0..1.0f64);
    let head = (point(200.0), 10.0..90.0f64, [0.05..8.0f64, 0.05..8.0, 0.05..8.0]);
    let source = (any::<u32>(), point(300.0), unit());
    let detectors = proptest::collection::vec((point(300.0), 0.01..10.0f64), 1..8);
    let inclusions = proptest::collection::vec((unit(), 0.0..0.9f64, 0.05..0.5f64, layer_tag()), 0..4);
    let domain = (proptest::array::uniform5(medium()), 500u32..1100, 0.5..8.0f64);
    (session, forward, head, source, detectors, inclusions, domain).prop_map(
        |(session, forward, head, source, detectors, inclusions, domain)| {
            let (brain, [d_csf, d_skull, d_scalp]) = (head.1, head.2);
            let radii = [brain + d_csf + d_skull + d_scalp, brain + d_csf + d_skull, brain + d_csf, brain];
            let mut shapes: Vec<SphereShape> = TissueTag::LAYERS
                .iter()
                .zip(radii)
                .map(|(&tag, radius)| SphereShape {
                    center: head.0,
                    radius,
                    tag,
                })
                .collect();
            for (dir, depth, size, tag) in inclusions {
                let r = size * brain;
                let d = depth * (brain - r);
                let c = Vec3::from(head.0) + Vec3::from(dir) * d;
                shapes.push(SphereShape {
                    center: c.to_array(),
                    radius: r,
                    tag,
                });
            }
            let mut media = [TissueMedium::AMBIENT; TISSUE_COUNT];
            media[1..].copy_from_slice(&domain.0);
            let (t0, dt, k, frac) = forward;
            let mut doc = ConfigDocument {
                session: SessionSection {
                    id: session.0,
                    photon_count: session.1,
                    rng_seed: session.2,
                    mismatch_flag: session.3,
                },
                forward: ForwardSection {
                    t0,
                    t1: t0 + dt * (k as f64 - frac),
                    dt,
                },
                optode: OptodeSection {
                    source: SourceSection {
                        index: source.0,
                        pos: source.1,
                        dir: source.2,
                        kind: BeamKind::Pencil,
                    },
                    detectors: detectors
                        .into_iter()
                        .map(|(pos, radius)| DetectorSection { pos, radius })
                        .collect(),
                },
                shapes,
                domain: DomainSection {
                    wavelength: domain.1,
                    media,
                    dims: [1, 1, 1],
                    voxel_size: domain.2,
                },
            }
            .canonicalized();
            let model = doc.head_model().expect("generated head is valid");
            doc.domain.dims = model.grid_dims(doc.domain.voxel_size).expect("grid fits");
            doc
        },
    )
}

fn record() -> impl Strategy<Value = DetectorRecord> {
    (
        0u64..1_000_000,
        any::<u32>(),
        [finite(), finite(), finite()],
        finite(),
        finite(),
        proptest::array::uniform6(finite()),
        any::<u64>(),
    )
        .prop_map(|(photon_index, detector_index, p, w, tof, paths, scatter)| DetectorRecord {
            photon_index,
            detector_index,
            exit_position: Vec3::from(p),
            exit_weight: w,
            time_of_flight: tof,
            partial_paths: paths,
            scatter_count: scatter,
        })
}

pub fn detector_set() -> impl Strategy<Value = DetectorRecordSet> {
    (
        "\\PC{0,32}",
        0u64..u64::MAX / 2,
        any::<u64>(),
        (0.0..1e4f64, 1e-3..1e3f64, 1usize..100_000),
        proptest::collection::vec(record(), 0..40),
    )
        .prop_map(|(id, extra, seed, (t0, width, count), records)| {
            let photons = records.len() as u64 + extra;
            DetectorRecordSet::new(id, photons, seed, TimeGates::new(t0, width, count).unwrap(), records)
        })
}

pub fn fluence_grid() -> impl Strategy<Value = FluenceGrid> {
    (
        "\\PC{0,32}",
        [1usize..12, 1usize..12, 1usize..12],
        finite(),
        finite(),
        1usize..6,
        proptest::collection::vec((any::<u64>(), proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL), 0..64),
    )
        .prop_map(|(id, dims, voxel, width, gates, cells)| {
            let mut g = FluenceGrid::new(id, dims, voxel, width, gates);
            let n = g.voxel_count() as u64;
            for (k, v) in cells {
                let k = k % g.cell_count();
                g.set((k % n) as usize, (k / n) as usize, v);
            }
            g
        })
}
