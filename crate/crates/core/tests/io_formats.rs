use std::collections::BTreeSet;
use std::fs;

use handlift_core::io_formats::*;
use handlift_core::metrics::{evaluate, MetricsConfig};
use handlift_core::pipeline::{FrameAnnotation, ManualOverride, OverrideAction};
use handlift_core::synth::{generate_scene, render_detections, NoiseSpec, SceneSpec};
use handlift_core::{HandStatus, Pose3D};
use nalgebra::Point3;

fn small_scene() -> (handlift_core::synth::SyntheticScene, Vec<handlift_core::pipeline::FrameInput>) {
    let scene = generate_scene(&SceneSpec {
        duration_frames: 6,
        seed: 3,
        ..SceneSpec::default()
    })
    .unwrap();
    let noise = NoiseSpec {
        pixel_sigma: 1.5,
        p_miss: 0.2,
        p_false_positive: 0.5,
        p_side_flip: 0.1,
        ..NoiseSpec::default()
    };
    let frames = render_detections(&scene.ground_truth, &scene.cameras, &noise, 3, 20.0).unwrap();
    (scene, frames)
}

#[test]
fn calibration_round_trips_bitwise() {
    let (scene, _) = small_scene();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("calib.json");
    save_calibration(&scene.cameras, &p).unwrap();
    assert_eq!(load_calibration(&p).unwrap(), scene.cameras);
}

#[test]
fn calibration_rejects_reflection() {
    let (scene, _) = small_scene();
    let mut cams = scene.cameras.clone();
    let mut m = cams[2].extrinsic;
    for k in 0..4 {
        m[(0, k)] = -m[(0, k)];
    }
    cams[2].extrinsic = m;
    let text = calibration_to_string(&cams);
    match parse_calibration(&text, "c.json".as_ref()) {
        Err(IoError::Validation { field, reason, .. }) => {
            assert_eq!(field, "cameras[2].extrinsic");
            assert!(reason.contains("determinant"), "{reason}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn calibration_names_bad_focal_length() {
    let text = r#"{"cameras":[{"id":"a","fx":0.0,"fy":900.0,"cx":640.0,"cy":360.0,"width":1280,"height":720,
        "extrinsic":[1,0,0,0, 0,1,0,0, 0,0,1,2, 0,0,0,1]}]}"#;
    match parse_calibration(text, "c.json".as_ref()) {
        Err(IoError::Validation { field, .. }) => assert_eq!(field, "cameras[0].fx"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn detections_round_trip_exactly() {
    let (_, frames) = small_scene();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    save_detections(&frames, &p, Precision::Exact).unwrap();
    assert_eq!(load_detections(&p, 21).unwrap(), frames);
}

#[test]
fn fixed_precision_detections_round_trip_quantized_values() {
    let (_, mut frames) = small_scene();
    for f in &mut frames {
        f.timestamp = (f.timestamp * 1e6).round() / 1e6;
        for dets in f.detections.values_mut() {
            for d in dets {
                for p in &mut d.keypoints {
                    p.x = (p.x * 100.0).round() / 100.0;
                    p.y = (p.y * 100.0).round() / 100.0;
                }
                for v in d.bbox.iter_mut() {
                    *v = (*v * 100.0).round() / 100.0;
                }
                for c in &mut d.keypoint_conf {
                    *c = (*c * 1e6).round() / 1e6;
                }
                d.side_prob = (d.side_prob * 1e6).round() / 1e6;
                d.det_conf = (d.det_conf * 1e6).round() / 1e6;
            }
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    save_detections(&frames, &p, Precision::Fixed).unwrap();
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.lines().next().unwrap().starts_with("{\"frame\":0,\"time\":0.000000,\"cams\":{"));
    assert_eq!(load_detections(&p, 21).unwrap(), frames);
}

#[test]
fn empty_detection_file_is_an_empty_stream() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    fs::write(&p, "").unwrap();
    assert!(load_detections(&p, 21).unwrap().is_empty());
}

#[test]
fn short_keypoint_list_cites_line() {
    let (_, frames) = small_scene();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    let mut lines: Vec<String> = frames.iter().map(|f| detection_line(f, Precision::Exact)).collect();
    let mut bad = frames[2].clone();
    for dets in bad.detections.values_mut() {
        for d in dets {
            d.keypoints.pop();
            d.keypoint_conf.pop();
        }
    }
    lines[2] = detection_line(&bad, Precision::Exact);
    fs::write(&p, lines.join("\n")).unwrap();
    match load_detections(&p, 21) {
        Err(IoError::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("expected 21 keypoints, got 20"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn decreasing_frame_index_is_an_ordering_error() {
    let (_, frames) = small_scene();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    let text = [&frames[1], &frames[0]]
        .iter()
        .map(|f| detection_line(f, Precision::Exact))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&p, text).unwrap();
    assert!(matches!(
        load_detections(&p, 21),
        Err(IoError::Ordering { line: 2, previous: 1, got: 0, .. })
    ));
}

#[test]
fn repeated_frame_lines_merge_and_confidences_clamp() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.jsonl");
    let kps = |c: f64| format!("[{}]", vec![format!("[10,20,{c}]"); 21].join(","));
    let text = format!(
        "{{\"frame\":4,\"time\":0.2,\"cams\":{{\"a\":[{{\"bbox\":[0,0,1,1],\"kps\":{},\"side\":1.5,\"conf\":0.5}}]}}}}\n\
         {{\"frame\":4,\"time\":0.2,\"cams\":{{\"a\":[{{\"bbox\":[0,0,1,1],\"kps\":{},\"side\":0.2,\"conf\":-1}}]}}}}\n",
        kps(0.5),
        kps(2.0)
    );
    fs::write(&p, text).unwrap();
    let frames = load_detections(&p, 21).unwrap();
    assert_eq!(frames.len(), 1);
    let dets = &frames[0].detections["a"];
    assert_eq!(dets.len(), 2);
    assert_eq!(dets[0].side_prob, 1.0);
    assert_eq!(dets[1].det_conf, 0.0);
    assert!(dets[1].keypoint_conf.iter().all(|c| *c == 1.0));
}

fn annotations_with_everything() -> (Vec<FrameAnnotation>, Vec<String>) {
    let (scene, _) = small_scene();
    let ids: Vec<String> = scene.cameras.iter().map(|c| c.id.clone()).collect();
    let mut gt = scene.ground_truth.clone();
    gt[1].hands[0].status = HandStatus::CarriedForward;
    let carried = gt[1].hands[0].track_id;
    gt[1].skipped.insert(carried);
    gt[2].hands[1].contributing = [(0, 1), (3, 0), (7, 2)]
        .into_iter()
        .map(|(c, i)| handlift_core::clustering::DetectionRef::new(c, i))
        .collect();
    gt[2].hands[1].interpolated_joints = BTreeSet::from([4, 9]);
    gt[3].manual_overrides = vec![
        ManualOverride {
            frame: 3,
            camera_id: "cam2".into(),
            detection_index: 1,
            action: OverrideAction::Assign(2),
        },
        ManualOverride {
            frame: 3,
            camera_id: "cam5".into(),
            detection_index: 0,
            action: OverrideAction::Reject,
        },
    ];
    for (k, f) in gt.iter_mut().enumerate() {
        f.accepted_threshold = 0.05 + 0.005 * k as f64;
    }
    (gt, ids)
}

#[test]
fn annotations_round_trip_every_field() {
    let (gt, ids) = annotations_with_everything();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.jsonl");
    write_annotations(&gt, &ids, &p, Precision::Exact).unwrap();
    assert_eq!(load_annotations(&p, Some(&ids)).unwrap(), gt);
    let text = fs::read_to_string(&p).unwrap();
    assert!(text.lines().nth(1).unwrap().contains("\"status\":\"CARRIED_FORWARD\""));
    assert!(text.lines().nth(3).unwrap().contains("\"overrides\":[{\"camera\":\"cam2\",\"index\":1,\"track\":2}"));
}

#[test]
fn fixed_annotations_round_trip_quantized_values() {
    let (mut gt, ids) = annotations_with_everything();
    for f in &mut gt {
        f.accepted_threshold = (f.accepted_threshold * 1e6).round() / 1e6;
        for h in &mut f.hands {
            h.pose = Pose3D::new(
                h.pose
                    .joints
                    .iter()
                    .map(|p| Point3::from(p.coords.map(|v| (v * 1e6).round() / 1e6)))
                    .collect(),
            );
        }
    }
    let text = annotations_to_string(&gt, &ids, Precision::Fixed);
    assert!(text.starts_with("{\"frame\":0,\"threshold\":0.050000,\"hands\":[{\"track\":1,\"side\":\"RIGHT\",\"side_conf\":1.000000,"));
    assert_eq!(parse_annotations(&text, "a".as_ref(), Some(&ids)).unwrap(), gt);
    // writing is deterministic
    assert_eq!(text, annotations_to_string(&gt, &ids, Precision::Fixed));
}

#[test]
fn ground_truth_evaluated_against_itself() {
    let (scene, _) = small_scene();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("gt.jsonl");
    write_ground_truth(&scene.ground_truth, &p, Precision::Exact).unwrap();
    let gt = load_ground_truth(&p).unwrap();
    assert_eq!(gt, scene.ground_truth);
    let r = evaluate(&gt, &gt, &MetricsConfig::default()).unwrap();
    assert_eq!(r.mpjpe_mm, 0.0);
    assert_eq!(r.track_acc, 1.0);
    assert_eq!(r.pck_auc, 1.0);
}

#[test]
fn report_round_trips() {
    let (scene, _) = small_scene();
    let mut pred = scene.ground_truth.clone();
    for f in &mut pred {
        for h in &mut f.hands {
            h.pose = h.pose.translated(&nalgebra::Vector3::new(0.0021, 0.0, 0.0));
        }
    }
    pred[2].hands[0].status = HandStatus::CarriedForward;
    let r = evaluate(&scene.ground_truth, &pred, &MetricsConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("report.json");
    write_report(&r, &p).unwrap();
    assert_eq!(load_report(&p).unwrap(), r);
}

#[test]
fn dataset_directory_round_trips() {
    let (scene, frames) = small_scene();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), "seq", 20.0, &scene.cameras, &frames, Some(&scene.ground_truth)).unwrap();
    let ds = load_dataset(&manifest, None, 21).unwrap();
    assert_eq!(ds.cameras, scene.cameras);
    assert_eq!(ds.frames, frames);
    assert_eq!(ds.ground_truth.unwrap(), scene.ground_truth);
    assert!(load_dataset(&manifest, Some("nope"), 21).is_err());

    fs::remove_file(dir.path().join(CALIBRATION_FILE)).unwrap();
    match load_manifest(&manifest) {
        Err(IoError::Validation { field, reason, .. }) => {
            assert_eq!(field, "calibration");
            assert!(reason.contains(CALIBRATION_FILE));
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}
