mod common;

use std::collections::BTreeMap;

use hsm_core::engine::Mode;
use hsm_core::epipolar_graph::Keypoint;
use hsm_core::geometry::{Intrinsics, Model, TiePointStatus};
use hsm_core::io::{
    cameras_to_text, intrinsics_to_text, load_config, parse_cameras, parse_intrinsics,
    parse_tie_points, point_cloud_to_ply, read_model, tie_points_to_text, write_model, IoError,
    KeypointFile, MatchEdge, MatchFile, PipelineConfig,
};
use hsm_core::robust::TwoViewModel;
use hsm_core::synthetic::{generate, SceneKind, SceneSpec};
use nalgebra::Vector2;
use proptest::prelude::*;

const GOLDEN: &str = include_str!("fixtures/default_config.txt");

fn ring12() -> Model {
    let scene = generate(&SceneSpec::new(SceneKind::Ring, 12, 200, 3).with_noise(0.5, 0.02));
    let mut m = scene.truth_model();
    if let Some(tp) = m.tie_points.values_mut().nth(3) {
        tp.reject();
    }
    if let Some(tp) = m.tie_points.values_mut().nth(5) {
        tp.position = None;
        tp.status = TiePointStatus::Pending;
    }
    m
}

#[test]
fn default_config_matches_golden_file() {
    assert_eq!(PipelineConfig::default().to_text(), GOLDEN);
}

#[test]
fn default_config_reproduces_parameter_table() {
    let c = PipelineConfig::default();
    assert_eq!(c.pyramid_levels, 12);
    assert_eq!(c.keypoints_per_image, 7500);
    assert_eq!(c.broad_keypoints, 300);
    assert_eq!(c.edge_connectivity, 8);
    assert_eq!(c.match_ratio, 1.5);
    assert_eq!(c.msac_iterations, 1000);
    assert_eq!(c.bucket_divisor, 25.0);
    assert_eq!(c.min_matches, 10);
    assert_eq!(c.gric_ratio, 1.2);
    assert_eq!(c.min_track_length, 3);
    assert_eq!(c.ba_iterations, 100);
    assert_eq!(c.reproj_divisor, 1800.0);
    assert_eq!(c.autocal_cameras, 4);
    assert_eq!(c.fix_internals_after, 25);
    assert_eq!(c.final_min_track_length, 2);
    assert_eq!(c.final_reproj_divisor, 2400.0);
    c.validate().unwrap();
}

#[test]
fn golden_file_parses_back_to_defaults() {
    let mut c = PipelineConfig::default();
    c.seed = 99;
    c.apply_text(GOLDEN).unwrap();
    assert_eq!(c, PipelineConfig::default());
}

#[test]
fn diagonal_relative_thresholds_resolve_per_image() {
    let c = PipelineConfig::default();
    // 6 Mpixel reference image with a 3600 px diagonal.
    let n = c.narrow_config(3600.0);
    assert_eq!(n.bucket_size, 144.0);
    assert_eq!(n.inlier_threshold, 6.0);
    let e = c.engine_config();
    assert_eq!(3600.0 / e.reproj_divisor, 2.0);
    assert_eq!(3600.0 / e.final_reproj_divisor, 1.5);
    assert_eq!(e.ba.max_iterations, 100);
    assert_eq!(e.autocal_min_cameras, 4);
    assert_eq!(e.mode, Mode::Autocalibrated);
}

#[test]
fn config_file_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(
        &path,
        "# override\nseed = 7\r\nmode = calibrated\n\nworkers=3\n",
    )
    .unwrap();
    let c = load_config(Some(&path), [("HSM_SEED", "11"), ("PATH", "/bin")]).unwrap();
    assert_eq!((c.seed, c.mode, c.workers), (11, Mode::Calibrated, 3));
}

#[test]
fn config_errors_name_line_and_key() {
    let mut c = PipelineConfig::default();
    let e = c.apply_text("seed = 1\n# c\nbogus = 2\n").unwrap_err();
    assert_eq!(e.line, 3);
    assert!(e.message.contains("bogus"));
    let e = c.apply_text("seed = x\n").unwrap_err();
    assert_eq!(e.line, 1);
    let e = c.apply_text("seed 1\n").unwrap_err();
    assert!(e.message.contains("key = value"));
    assert!(c
        .apply_env([("HSM_MODE", "fisheye")])
        .unwrap_err()
        .contains("HSM_MODE"));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.cfg");
    let err = load_config(Some(&missing), Vec::<(String, String)>::new()).unwrap_err();
    assert!(err.to_string().contains("none.cfg"));
}

#[test]
fn validation_rejects_out_of_range_values() {
    for (k, v) in [
        ("reproj_divisor", "0"),
        ("min_track_length", "1"),
        ("match_ratio", "0.5"),
        ("workers", "0"),
        ("min_matches", "7"),
        ("survivor_fraction", "1.5"),
        ("bucket_divisor", "inf"),
    ] {
        let mut c = PipelineConfig::default();
        c.set(k, v).unwrap();
        let e = c.validate().unwrap_err();
        assert!(e.contains(k), "{k}: {e}");
    }
}

#[test]
fn every_key_round_trips() {
    for k in PipelineConfig::keys() {
        let mut c = PipelineConfig::default();
        let v = c.get(k).unwrap();
        c.set(k, &v).unwrap();
        assert_eq!(c, PipelineConfig::default(), "{k}");
    }
}

#[test]
fn twelve_camera_model_round_trip_is_bit_equal() {
    let m = ring12();
    assert_eq!(m.cameras.len(), 12);
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("model_0");
    let paths = write_model(&m, &prefix).unwrap();
    let back = read_model(&prefix).unwrap();
    assert_eq!(back, m);
    let first = std::fs::read_to_string(&paths.cameras).unwrap();
    write_model(&back, &prefix).unwrap();
    assert_eq!(std::fs::read_to_string(&paths.cameras).unwrap(), first);
    assert_eq!(tie_points_to_text(&back), tie_points_to_text(&m));
}

#[test]
fn projective_model_round_trip() {
    let m = common::projectify(&ring12(), 4);
    let mut back = parse_cameras(&cameras_to_text(&m)).unwrap();
    back.tie_points = parse_tie_points(&tie_points_to_text(&m)).unwrap();
    assert_eq!(back, m);
}

#[test]
fn truncated_camera_file_names_the_line() {
    let text = cameras_to_text(&ring12());
    let cut = &text[..text.len() - 40];
    let last = cut.lines().count();
    let e = parse_cameras(cut).unwrap_err();
    assert_eq!(e.line, last, "{e}");

    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("m");
    write_model(&ring12(), &prefix).unwrap();
    let cams = dir.path().join("m.cameras.txt");
    std::fs::write(&cams, cut).unwrap();
    match read_model(&prefix).unwrap_err() {
        IoError::Parse { path, error } => {
            assert_eq!(path, cams);
            assert_eq!(error.line, last);
        }
        other => panic!("{other}"),
    }
}

#[test]
fn truncated_block_names_the_missing_line() {
    let kp = KeypointFile {
        size: (3000.0, 2000.0),
        keypoints: (0..3)
            .map(|i| Keypoint {
                xy: Vector2::new(i as f64, 1.0),
                scale: 2.0,
                angle: 0.5,
                descriptor: vec![0.25; 4],
            })
            .collect(),
    };
    let text = kp.to_text();
    let cut: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    let e = KeypointFile::parse(&cut).unwrap_err();
    assert_eq!(e.line, 6);
    assert!(e.message.contains("keypoint 3 of 3"));

    let m = MatchFile {
        edges: vec![MatchEdge {
            pair: (0, 1),
            model_class: TwoViewModel::Fundamental,
            matches: vec![(1, 2), (3, 4)],
        }],
    };
    let e = MatchFile::parse("edge 0 1 F 2\n1 2\n").unwrap_err();
    assert_eq!(e.line, 3);
    assert_eq!(MatchFile::parse(&m.to_text()).unwrap(), m);
    assert_eq!(MatchFile::parse("edge 0 1 Q 2\n").unwrap_err().line, 1);
}

#[test]
fn crlf_input_parses_like_lf() {
    let k: BTreeMap<usize, Intrinsics> = [
        (0, Intrinsics::simple(3000.0, 1500.0, 1000.0)),
        (4, Intrinsics::simple(2500.5, 1499.0, 1001.0)),
    ]
    .into();
    let text = intrinsics_to_text(&k);
    assert_eq!(parse_intrinsics(&text.replace('\n', "\r\n")).unwrap(), k);
    assert_eq!(parse_intrinsics(&text).unwrap(), k);
    assert!(parse_intrinsics("0 -1 1 0 0 0\n")
        .unwrap_err()
        .message
        .contains("intrinsics"));
}

/// Minimal reader for the ASCII polygon format: magic, format line, element
/// and property declarations, then exactly one line per vertex with one token
/// per declared property.
fn read_ascii_ply(text: &str) -> (Vec<(String, String)>, Vec<Vec<f64>>) {
    let mut lines = text.split('\n');
    assert_eq!(lines.next(), Some("ply"));
    assert_eq!(lines.next(), Some("format ascii 1.0"));
    let mut count = None;
    let mut props = Vec::new();
    for l in lines.by_ref() {
        let t: Vec<&str> = l.split(' ').collect();
        match t[0] {
            "comment" => {}
            "element" => {
                assert_eq!(t[1], "vertex");
                count = Some(t[2].parse::<usize>().unwrap());
            }
            "property" => {
                assert_eq!(t.len(), 3);
                assert!(
                    ["char", "uchar", "short", "ushort", "int", "uint", "float", "double"]
                        .contains(&t[1])
                );
                props.push((t[1].to_string(), t[2].to_string()));
            }
            "end_header" => break,
            other => panic!("unexpected header keyword {other}"),
        }
    }
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(' ').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), count.unwrap());
    for r in &rows {
        assert_eq!(r.len(), props.len());
    }
    (props, rows)
}

#[test]
fn point_cloud_conforms_to_ascii_format() {
    let m = ring12();
    let (props, rows) = read_ascii_ply(&point_cloud_to_ply(&m));
    let names: Vec<&str> = props.iter().map(|p| p.1.as_str()).collect();
    assert_eq!(names, ["x", "y", "z", "track_id", "track_length"]);
    assert_eq!(rows.len(), m.triangulated_count());
    for (row, (tid, tp)) in rows.iter().zip(m.triangulated()) {
        let x = tp.position.unwrap();
        assert_eq!([row[0], row[1], row[2]], [x.x, x.y, x.z]);
        assert_eq!(row[3] as usize, tid);
        assert_eq!(row[4] as usize, tp.track.len());
        assert_eq!(row[3].fract(), 0.0);
    }
}

proptest! {
    #[test]
    fn keypoint_files_round_trip(
        pts in prop::collection::vec(
            (any::<f64>(), any::<f64>(), 0.1f64..100.0, -4.0f64..4.0, prop::collection::vec(any::<f32>(), 3)),
            0..20,
        ),
        w in 1.0f64..1e5,
    ) {
        let pts: Vec<_> = pts.into_iter().filter(|p| p.0.is_finite() && p.1.is_finite()
            && p.4.iter().all(|d| d.is_finite())).collect();
        let f = KeypointFile {
            size: (w, w / 2.0),
            keypoints: pts.into_iter().map(|(x, y, scale, angle, descriptor)| Keypoint {
                xy: Vector2::new(x, y), scale, angle, descriptor,
            }).collect(),
        };
        let text = f.to_text();
        let back = KeypointFile::parse(&text).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn projective_cameras_round_trip(seed in 0u64..500) {
        let scene = generate(&SceneSpec::new(SceneKind::Ring, 5, 40, seed));
        let m = common::projectify(&scene.truth_model(), seed);
        let text = cameras_to_text(&m);
        let back = parse_cameras(&text).unwrap();
        prop_assert_eq!(&back.cameras, &m.cameras);
        prop_assert_eq!(cameras_to_text(&back), text);
    }
}
