use photonforge_core::analysis::{distance_delta, nn_ranks, pair_distances, reference_strip};
use photonforge_core::{default_grid, place_on_sphere, AngularPlacement, LayeredHeadModel, TissueTag, Vec3};
use proptest::prelude::*;

proptest! {
    #[test]
    fn placement_angles_round_trip(el in -89.0..89.0f64, az in -179.9..180.0f64, r in 1.0..200.0f64) {
        let c = Vec3::new(93.0, 93.0, 93.0);
        let p = place_on_sphere(c, r, AngularPlacement::new(el, az).unwrap());
        prop_assert!((p.distance(c) - r).abs() < 1e-9);
        let back = AngularPlacement::of_point(c, p).unwrap();
        prop_assert!((back.elevation() - el).abs() < 1e-9);
        prop_assert!((back.azimuth() - az).abs() < 1e-9);
    }

    #[test]
    fn layers_nest_along_any_ray(el in -90.0..90.0f64, az in -179.9..180.0f64) {
        let m = LayeredHeadModel::reference();
        let a = AngularPlacement::new(el, az).unwrap();
        let at = |r: f64| m.medium_at(place_on_sphere(m.center(), r, a));
        prop_assert_eq!(at(92.0), TissueTag::Scalp);
        prop_assert_eq!(at(84.0), TissueTag::Skull);
        prop_assert_eq!(at(79.0), TissueTag::Csf);
        prop_assert_eq!(at(10.0), TissueTag::Brain);
        prop_assert_eq!(at(92.4), TissueTag::Ambient);
    }
}

#[test]
fn reference_grid_ranks_and_separations() {
    let m = LayeredHeadModel::reference();
    let g = default_grid(&m);
    assert_eq!((g.sources.len(), g.detectors.len()), (32, 32));
    let src: Vec<Vec3> = g.sources.iter().map(|s| s.position).collect();
    let det: Vec<Vec3> = g.detectors.iter().map(|d| d.position).collect();
    let ranks = nn_ranks(&src, &det).unwrap();
    let dist = pair_distances(&src, &det);
    // rank order agrees with distance order
    for s in 0..32 {
        for a in 0..32 {
            for b in 0..32 {
                if dist.get(s, a) + 0.2 < dist.get(s, b) {
                    assert!(ranks.get(s, a) <= ranks.get(s, b));
                }
            }
        }
    }
    for s in &g.sources {
        assert!((s.direction - (m.center() - s.position).normalized().unwrap()).norm() < 1e-12);
    }
    let (ss, ds) = reference_strip(92.3);
    let delta = distance_delta(&ss, &ds, 2.0 * std::f64::consts::PI * 92.3).unwrap();
    assert!(delta.as_slice().iter().all(|&d| d >= 0.0));
}
