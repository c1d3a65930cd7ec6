use std::path::{Path, PathBuf};

use futures::StreamExt;
use handlift_core::io_formats::{load_calibration, write_dataset, CALIBRATION_FILE};
use handlift_core::synth::{generate_scene, render_detections, NoiseSpec, SceneSpec};
use handlift_service::{track_color, AppState};
use nalgebra::Point3;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tempfile::TempDir;
use tokio_tungstenite::tungstenite::Message;

struct Server {
    base: String,
    client: reqwest::Client,
}

impl Server {
    async fn start() -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(handlift_service::serve(listener, AppState::new()));
        Self {
            base: format!("http://{addr}"),
            client: reqwest::Client::new(),
        }
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn create(&self, manifest: &Path) -> String {
        let (code, v) = self.post("/v1/sessions", json!({ "manifest": manifest })).await;
        assert_eq!(code, StatusCode::CREATED, "{v}");
        v["id"].as_str().unwrap().to_owned()
    }

    async fn step(&self, id: &str, n: i64) -> Value {
        let (code, v) = self.post(&format!("/v1/sessions/{id}/step"), json!({ "n": n })).await;
        assert_eq!(code, StatusCode::OK, "{v}");
        v
    }
}

fn dataset(dir: &Path, frames: usize, seed: u64, noise: NoiseSpec) -> PathBuf {
    let spec = SceneSpec {
        duration_frames: frames,
        seed,
        ..SceneSpec::default()
    };
    let scene = generate_scene(&spec).unwrap();
    let inputs = render_detections(&scene.ground_truth, &scene.cameras, &noise, seed, spec.fps).unwrap();
    write_dataset(dir, "test", spec.fps, &scene.cameras, &inputs, Some(&scene.ground_truth)).unwrap()
}

fn noisy() -> NoiseSpec {
    NoiseSpec {
        pixel_sigma: 1.0,
        p_miss: 0.1,
        p_false_positive: 0.3,
        ..NoiseSpec::default()
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn create_reports_cursor_zero() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 5, 1, NoiseSpec::default());
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;
    let (code, v) = srv.get(&format!("/v1/sessions/{id}/state")).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["state"]["cursor"], 0);
    assert_eq!(v["state"]["frames"], 5);
    assert_eq!(v["state"]["mode"], "PAUSED");
    assert!(v["payload"].is_null());
    let (code, _) = srv.get("/v1/sessions/nope/state").await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_manifests_are_client_errors_with_context() {
    let dir = TempDir::new().unwrap();
    let srv = Server::start().await;

    let missing = dir.path().join("absent.json");
    let (code, v) = srv.post("/v1/sessions", json!({ "manifest": missing })).await;
    assert!(code.is_client_error());
    assert!(v["error"].as_str().unwrap().contains("absent.json"), "{v}");

    let garbled = dir.path().join("garbled.json");
    std::fs::write(&garbled, "{\n  \"sequence\": \"x\",\n  oops\n}\n").unwrap();
    let (code, v) = srv.post("/v1/sessions", json!({ "manifest": garbled })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("garbled.json:3"), "{v}");

    let manifest = dataset(&dir.path().join("ds"), 3, 1, NoiseSpec::default());
    std::fs::remove_file(dir.path().join("ds").join(CALIBRATION_FILE)).unwrap();
    let (code, v) = srv.post("/v1/sessions", json!({ "manifest": manifest })).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("calibration"), "{v}");

    let (code, _) = srv.post("/v1/sessions", json!({ "wrong": 1 })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stepping_back_and_forth_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 20, 4, noisy());
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;

    let back = srv.step(&id, -1).await;
    assert_eq!(back["moved"], 0);
    assert_eq!(back["state"]["cursor"], 0);

    srv.step(&id, 6).await;
    let first = srv.step(&id, 1).await;
    let undone = srv.step(&id, -1).await;
    assert_eq!(undone["state"]["cursor"], 6);
    let again = srv.step(&id, 1).await;
    assert_eq!(first["payload"]["annotation"], again["payload"]["annotation"]);
    assert_eq!(first["payload"]["cameras"], again["payload"]["cameras"]);

    let end = srv.step(&id, 1000).await;
    assert_eq!(end["state"]["cursor"], 20);
    assert_eq!(end["state"]["end_of_sequence"], true);
    assert_eq!(end["moved"], 13);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stepping_back_beyond_the_ring_replays() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 12, 6, noisy());
    let srv = Server::start().await;
    let (code, v) = srv
        .post("/v1/sessions", json!({ "manifest": manifest, "config": { "history_len": 3 } }))
        .await;
    assert_eq!(code, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap();
    let mut seen = Vec::new();
    for _ in 0..12 {
        seen.push(srv.step(id, 1).await["payload"]["annotation"].clone());
    }
    let back = srv.step(id, -10).await;
    assert_eq!(back["state"]["cursor"], 2);
    assert_eq!(back["payload"]["annotation"], seen[1]);
    for expected in &seen[2..] {
        assert_eq!(&srv.step(id, 1).await["payload"]["annotation"], expected);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn run_pushes_every_frame_in_order() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 200, 2, NoiseSpec::default());
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;
    let url = format!("{}/v1/sessions/{id}/stream", srv.base.replace("http", "ws"));
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    let (code, _) = srv.post(&format!("/v1/sessions/{id}/run"), json!({})).await;
    assert_eq!(code, StatusCode::ACCEPTED);

    let mut frames = Vec::new();
    while let Some(msg) = ws.next().await {
        let Message::Text(text) = msg.unwrap() else { continue };
        let v: Value = serde_json::from_str(&text).unwrap();
        match v["type"].as_str().unwrap() {
            "frame" => frames.push(v["frame"].as_u64().unwrap()),
            "end_of_sequence" => break,
            other => panic!("unexpected event {other}"),
        }
    }
    assert_eq!(frames.len(), 200);
    assert!(frames.windows(2).all(|w| w[0] < w[1]));
    let (_, state) = srv.get(&format!("/v1/sessions/{id}/state")).await;
    assert_eq!(state["state"]["mode"], "PAUSED");
    assert_eq!(state["state"]["end_of_sequence"], true);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_steps_apply_one_at_a_time() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 30, 5, noisy());
    let srv = std::sync::Arc::new(Server::start().await);
    let id = srv.create(&manifest).await;
    let url = format!("{}/v1/sessions/{id}/stream", srv.base.replace("http", "ws"));
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();

    let requests: Vec<_> = (0..24)
        .map(|_| {
            let srv = srv.clone();
            let id = id.clone();
            tokio::spawn(async move { srv.step(&id, 1).await["state"]["cursor"].as_u64().unwrap() })
        })
        .collect();
    let mut cursors = Vec::new();
    for r in requests {
        cursors.push(r.await.unwrap());
    }
    // every request observed a distinct cursor: none saw a half-applied step
    cursors.sort_unstable();
    assert_eq!(cursors, (1..=24).collect::<Vec<u64>>());

    let mut pushed = Vec::new();
    while pushed.len() < 24 {
        let Message::Text(text) = ws.next().await.unwrap().unwrap() else { continue };
        let v: Value = serde_json::from_str(&text).unwrap();
        pushed.push((v["seq"].as_u64().unwrap(), v["cursor"].as_u64().unwrap()));
    }
    assert!(pushed.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 + 1 == w[1].1), "{pushed:?}");

    // same result as stepping serially
    let serial = srv.create(&manifest).await;
    srv.step(&serial, 24).await;
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    srv.post(&format!("/v1/sessions/{id}/export"), json!({ "path": a })).await;
    srv.post(&format!("/v1/sessions/{serial}/export"), json!({ "path": b })).await;
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_are_isolated() {
    let dir = TempDir::new().unwrap();
    let a = dataset(&dir.path().join("a"), 10, 1, NoiseSpec::default());
    let b = dataset(&dir.path().join("b"), 10, 2, noisy());
    let srv = Server::start().await;
    let sa = srv.create(&a).await;
    let sb = srv.create(&b).await;
    assert_ne!(sa, sb);
    srv.step(&sa, 4).await;
    let (code, _) = srv
        .post(&format!("/v1/sessions/{sb}/params"), json!({ "delta_default": 0.1 }))
        .await;
    assert_eq!(code, StatusCode::OK);
    let (_, va) = srv.get(&format!("/v1/sessions/{sa}/state")).await;
    let (_, vb) = srv.get(&format!("/v1/sessions/{sb}/state")).await;
    assert_eq!(va["state"]["cursor"], 4);
    assert_eq!(vb["state"]["cursor"], 0);
    assert_eq!(va["state"]["search"]["delta_default"], 0.05);
    assert_eq!(vb["state"]["search"]["delta_default"], 0.1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn params_are_validated_and_applied() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 300, 3, NoiseSpec::default());
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;
    let params = format!("/v1/sessions/{id}/params");

    let (code, v) = srv.post(&params, json!({ "delta_default": -1.0 })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "delta_default");
    let (code, v) = srv.post(&params, json!({ "criterion": "BEST" })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "criterion");
    let (code, v) = srv.post(&params, json!({ "no_such_knob": 1 })).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    assert_eq!(v["field"], "no_such_knob");

    srv.step(&id, 3).await;
    let (code, _) = srv.post(&params, json!({ "criterion": "NS", "delta_default": 0.08 })).await;
    assert_eq!(code, StatusCode::OK);
    let next = srv.step(&id, 1).await;
    assert_eq!(next["payload"]["accepted_threshold"], 0.08);

    let (code, _) = srv.post(&params, json!({ "criterion": "CD", "delta_default": 0.06 })).await;
    assert_eq!(code, StatusCode::OK);
    let next = srv.step(&id, 1).await;
    assert_eq!(next["payload"]["accepted_threshold"], 0.06);

    srv.post(&format!("/v1/sessions/{id}/run"), json!({})).await;
    let (code, _) = srv.post(&params, json!({ "delta_default": 0.05 })).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = srv.post(&format!("/v1/sessions/{id}/overlay"), json!({ "mode": "RAW" })).await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = srv.post(&format!("/v1/sessions/{id}/pause"), json!({})).await;
    assert_eq!(code, StatusCode::OK);
    let (code, _) = srv.post(&params, json!({ "delta_default": 0.05 })).await;
    assert_eq!(code, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn rejected_camera_disappears_from_sources() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 10, 5, NoiseSpec::default());
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;
    srv.step(&id, 2).await;
    let (code, _) = srv.post(&format!("/v1/sessions/{id}/cameras/cam3/reject"), json!({})).await;
    assert_eq!(code, StatusCode::OK);
    let (code, _) = srv.post(&format!("/v1/sessions/{id}/cameras/cam42/reject"), json!({})).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    for _ in 0..5 {
        let v = srv.step(&id, 1).await;
        let hands = v["payload"]["annotation"]["hands"].as_array().unwrap();
        assert_eq!(hands.len(), 4);
        for h in hands {
            assert!(h["sources"].as_array().unwrap().iter().all(|s| s[0] != "cam3"), "{h}");
        }
        let tile = &v["payload"]["cameras"][3];
        assert_eq!(tile["rejected"], true);
    }
    srv.post(&format!("/v1/sessions/{id}/cameras/cam3/reject"), json!({ "rejected": false })).await;
    let v = srv.step(&id, 1).await;
    let hands = v["payload"]["annotation"]["hands"].as_array().unwrap();
    assert!(hands.iter().any(|h| h["sources"].as_array().unwrap().iter().any(|s| s[0] == "cam3")));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reprojected_overlay_matches_server_geometry() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 10, 8, noisy());
    let cameras = load_calibration(&dir.path().join(CALIBRATION_FILE)).unwrap();
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;
    srv.post(&format!("/v1/sessions/{id}/overlay"), json!({ "mode": "REPROJECTED" })).await;
    let mut checked = 0;
    for _ in 0..10 {
        let p = srv.step(&id, 1).await["payload"].clone();
        assert_eq!(p["overlay"], "REPROJECTED");
        let hands = p["annotation"]["hands"].as_array().unwrap();
        for (cam, tile) in cameras.iter().zip(p["cameras"].as_array().unwrap()) {
            assert_eq!(tile["camera"], cam.id.as_str());
            for (h, overlay) in hands.iter().zip(tile["hands"].as_array().unwrap()) {
                assert_eq!(h["track"], overlay["track"]);
                assert_eq!(overlay["color"], track_color(h["track"].as_u64().unwrap() as _).as_str());
                for (j, uv) in h["joints"].as_array().unwrap().iter().zip(overlay["joints"].as_array().unwrap()) {
                    let x = Point3::new(j[0].as_f64().unwrap(), j[1].as_f64().unwrap(), j[2].as_f64().unwrap());
                    let Ok(expected) = cam.project(&x) else {
                        assert!(uv.is_null());
                        continue;
                    };
                    assert!((uv[0].as_f64().unwrap() - expected.x).abs() < 1e-6);
                    assert!((uv[1].as_f64().unwrap() - expected.y).abs() < 1e-6);
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 1000);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn matched_overlay_colors_detections_by_track() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 4, 9, noisy());
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;
    let p = srv.step(&id, 3).await["payload"].clone();
    assert_eq!(p["overlay"], "MATCHED");
    let hands = p["annotation"]["hands"].as_array().unwrap();
    let mut owned = 0;
    for tile in p["cameras"].as_array().unwrap() {
        for d in tile["detections"].as_array().unwrap() {
            match d["track"].as_u64() {
                Some(t) => {
                    owned += 1;
                    assert_eq!(d["color"], track_color(t as _).as_str());
                    let h = hands.iter().find(|h| h["track"] == t).unwrap();
                    assert!(h["sources"].as_array().unwrap().contains(&json!([tile["camera"], d["index"]])));
                }
                None => assert_eq!(d["color"], handlift_service::UNMATCHED_COLOR),
            }
        }
    }
    let sources: usize = hands.iter().map(|h| h["sources"].as_array().unwrap().len()).sum();
    assert_eq!(owned, sources);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overrides_and_export() {
    let dir = TempDir::new().unwrap();
    let manifest = dataset(dir.path(), 10, 5, NoiseSpec::default());
    let srv = Server::start().await;
    let id = srv.create(&manifest).await;
    let out = dir.path().join("export.jsonl");
    let (code, _) = srv.post(&format!("/v1/sessions/{id}/export"), json!({ "path": out })).await;
    assert_eq!(code, StatusCode::CONFLICT);

    srv.step(&id, 3).await;
    let ov = json!({ "frame": 3, "camera": "cam1", "index": 0, "track": "REJECT" });
    let (code, v) = srv.post(&format!("/v1/sessions/{id}/override"), ov.clone()).await;
    assert_eq!(code, StatusCode::OK, "{v}");
    assert_eq!(v["state"]["pending_overrides"][0], ov);
    let (code, _) = srv
        .post(&format!("/v1/sessions/{id}/override"), json!({ "frame": 3, "camera": "cam1", "index": 0, "track": 2 }))
        .await;
    assert_eq!(code, StatusCode::CONFLICT);
    let (code, _) = srv
        .post(&format!("/v1/sessions/{id}/override"), json!({ "frame": 9, "camera": "cam1", "index": 0, "track": 2 }))
        .await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
    let (code, _) = srv
        .post(&format!("/v1/sessions/{id}/override"), json!({ "frame": 3, "camera": "cam1", "index": 0, "track": 77 }))
        .await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);

    let v = srv.step(&id, 1).await;
    let a = &v["payload"]["annotation"];
    // the frame record already carries the frame number
    assert_eq!(a["overrides"][0], json!({ "camera": "cam1", "index": 0, "track": "REJECT" }));
    assert!(a["hands"]
        .as_array()
        .unwrap()
        .iter()
        .all(|h| !h["sources"].as_array().unwrap().contains(&json!(["cam1", 0]))));

    let (code, v) = srv.post(&format!("/v1/sessions/{id}/export"), json!({ "path": out })).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["frames"], 4);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().nth(3).unwrap().contains("\"overrides\""));
}
