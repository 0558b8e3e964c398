mod common;

use retina_track::canonical::{self, GridGraph, SpaceBuildConfig};
use retina_track::image::Image;
use retina_track::phantom::{self, AppearanceModel, Calibration, GazeAngle, GridSpec};

#[test]
fn neutral_scan_edges_match_render_offsets() {
    let cal = Calibration::default();
    let spec = GridSpec::default();
    let scan = phantom::grid_scan(common::default_phantom(), &cal, &AppearanceModel::neutral(), spec).unwrap();
    let build = canonical::build_space(&scan.frames, &GridGraph::from_scan(&scan), &SpaceBuildConfig::default()).unwrap();
    assert_eq!(build.registration.measurements.len(), 40);
    for m in &build.registration.measurements {
        let (a, b) = (spec.node_gaze(m.from), spec.node_gaze(m.to));
        let truth = ((b.yaw - a.yaw) * 40.18, -(b.pitch - a.pitch) * 40.17);
        assert!((m.mu.dx - truth.0).abs() < 0.25 && (m.mu.dy - truth.1).abs() < 0.25, "edge {}: {:?} vs {truth:?}", m.edge, m.mu);
        let w: f64 = m.correspondences.iter().map(|c| c.score).sum();
        assert!((m.weight - w).abs() < 1e-9);
    }
    assert_eq!(build.positions[scan.central_node], [0.0, 0.0]);
    let pairs: usize = build.registration.measurements.iter().map(|m| m.correspondences.len()).sum();
    assert_eq!(build.space.len(), 2 * pairs);
}

#[test]
fn blank_frame_isolates_its_node() {
    let cal = Calibration::default();
    let mut scan = phantom::grid_scan(common::default_phantom(), &cal, &AppearanceModel::nominal(2), GridSpec::default()).unwrap();
    scan.frames[0].image = Image::filled(253, 207, 0.5);
    let build = canonical::build_space(&scan.frames, &GridGraph::from_scan(&scan), &SpaceBuildConfig::default());
    // a corner node has two edges; removing both isolates it
    assert!(matches!(build, Err(retina_track::Error::SpaceConstruction { .. })));

    let mut scan = phantom::grid_scan(common::default_phantom(), &cal, &AppearanceModel::nominal(2), GridSpec::default()).unwrap();
    scan.frames[7].image = Image::filled(253, 207, 0.5);
    let graph = GridGraph::from_scan(&scan);
    let expected: Vec<usize> = graph.edges.iter().enumerate().filter(|(_, e)| e.0 == 7 || e.1 == 7).map(|(k, _)| k).collect();
    let err = canonical::build_space(&scan.frames, &graph, &SpaceBuildConfig::default()).unwrap_err();
    match err {
        retina_track::Error::SpaceConstruction { failed_edges, unreachable } => {
            assert_eq!(failed_edges, expected);
            assert_eq!(unreachable, vec![7]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn one_failed_edge_keeps_the_grid_connected() {
    let cal = Calibration::default();
    let mut scan = phantom::grid_scan(common::default_phantom(), &cal, &AppearanceModel::nominal(4), GridSpec::default()).unwrap();
    // flatten most of node 1 so that only one of its edges loses support
    let h = scan.frames[1].height();
    for y in h / 3..h {
        for x in 0..scan.frames[1].width() {
            scan.frames[1].image.set(x, y, 0.5);
        }
    }
    let graph = GridGraph::from_scan(&scan);
    let build = canonical::build_space(&scan.frames, &graph, &SpaceBuildConfig::default()).unwrap();
    assert_eq!(build.registration.failed.len(), 1);
    let (k, _) = &build.registration.failed[0];
    let (a, b) = graph.edges[*k];
    assert!(a == 1 || b == 1);
    assert_eq!(build.registration.measurements.len(), 39);
    assert_eq!(build.positions.len(), 25);
}

#[test]
fn single_frame_scan_has_no_edges() {
    let cal = Calibration::default();
    let spec = GridSpec { rows: 1, cols: 1, spacing_deg: 2.5 };
    let scan = phantom::grid_scan(common::default_phantom(), &cal, &AppearanceModel::neutral(), spec).unwrap();
    let build = canonical::build_space(&scan.frames, &GridGraph::from_scan(&scan), &SpaceBuildConfig::default()).unwrap();
    assert!(build.registration.measurements.is_empty());
    assert_eq!(build.positions, vec![[0.0, 0.0]]);
}

#[test]
fn confident_candidates_are_true_matches() {
    let s = common::pair_study(20, 5, &AppearanceModel::nominal(8));
    assert!(s.confident > 1000);
    let rate = s.confident_true as f64 / s.confident as f64;
    assert!(rate >= 0.99, "{rate}");
}

#[test]
fn neutral_pairs_register_to_subpixel() {
    let s = common::pair_study(15, 6, &AppearanceModel::neutral());
    for e in &s.errors {
        let e = e.expect("registration");
        assert!(e[0].abs() < 0.25 && e[1].abs() < 0.25, "{e:?}");
    }
}

#[test]
fn gaze_sign_matches_rendering() {
    let cal = Calibration::default();
    let ph = common::default_phantom();
    let space = &common::default_space().space;
    let cfg = retina_track::gaze::TrackerConfig::default();
    for g in [GazeAngle::new(3.0, 0.0), GazeAngle::new(0.0, 3.0), GazeAngle::new(-2.0, -4.0)] {
        let f = phantom::render_frame(ph, g, &cal, &phantom::AppearanceParams::neutral()).unwrap();
        let e = retina_track::gaze::track_frame(&f, space, &cfg).unwrap();
        assert!((e.yaw - g.yaw).abs() < 0.05 && (e.pitch - g.pitch).abs() < 0.05, "{g:?} -> {e:?}");
    }
}
