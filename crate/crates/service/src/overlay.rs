//! Push payloads: per-camera overlay geometry for one processed frame.

use std::collections::{BTreeMap, BTreeSet};

use handlift_core::pipeline::{FrameAnnotation, FrameInput};
use handlift_core::{CameraModel, TrackId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OverlayMode {
    Raw,
    Matched,
    Reprojected,
}

pub const UNMATCHED_COLOR: &str = "#9e9e9e";

/// Stable color for a track: the hue comes from a fixed 64-bit mix of the id,
/// so it is identical across frames, tiles, sessions and processes.
pub fn track_color(track: TrackId) -> String {
    let mut z = track.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let hue = (z % 360) as f64;
    let (s, v) = (0.65, 0.95);
    let c = v * s;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let byte = |f: f64| ((f + m) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", byte(r), byte(g), byte(b))
}

fn point(p: nalgebra::Point2<f64>) -> Value {
    json!([p.x, p.y])
}

#[allow(clippy::too_many_arguments)]
pub fn frame_payload(
    session: &str,
    seq: u64,
    cursor: usize,
    mode: OverlayMode,
    cameras: &[CameraModel],
    rejected: &BTreeSet<String>,
    input: &FrameInput,
    annotation: &FrameAnnotation,
    record: Value,
) -> Value {
    let mut owner: BTreeMap<(usize, usize), TrackId> = BTreeMap::new();
    for h in &annotation.hands {
        for r in &h.contributing {
            owner.insert((r.camera, r.index), h.track_id);
        }
    }
    let tiles: Vec<Value> = cameras
        .iter()
        .enumerate()
        .map(|(c, cam)| {
            let is_rejected = rejected.contains(&cam.id);
            let mut tile = json!({ "camera": cam.id, "rejected": is_rejected, "image": null });
            match mode {
                OverlayMode::Raw | OverlayMode::Matched => {
                    let dets = input.detections.get(&cam.id).map(Vec::as_slice).unwrap_or_default();
                    let items: Vec<Value> = dets
                        .iter()
                        .enumerate()
                        .map(|(i, d)| {
                            let track = match mode {
                                OverlayMode::Matched => owner.get(&(c, i)).copied(),
                                _ => None,
                            };
                            json!({
                                "index": i,
                                "keypoints": d.keypoints.iter().map(|p| point(*p)).collect::<Vec<_>>(),
                                "conf": d.keypoint_conf,
                                "bbox": d.bbox,
                                "track": track,
                                "color": track.map(track_color).unwrap_or_else(|| UNMATCHED_COLOR.to_owned()),
                            })
                        })
                        .collect();
                    tile["detections"] = Value::Array(items);
                }
                OverlayMode::Reprojected => {
                    let hands: Vec<Value> = annotation
                        .hands
                        .iter()
                        .map(|h| {
                            let joints: Vec<Value> = h
                                .pose
                                .joints
                                .iter()
                                .map(|p| cam.project(p).map(point).unwrap_or(Value::Null))
                                .collect();
                            json!({
                                "track": h.track_id,
                                "color": track_color(h.track_id),
                                "status": h.status.as_str(),
                                "joints": joints,
                            })
                        })
                        .collect();
                    tile["hands"] = Value::Array(hands);
                }
            }
            tile
        })
        .collect();
    json!({
        "type": "frame",
        "session": session,
        "seq": seq,
        "cursor": cursor,
        "frame": annotation.frame_index,
        "overlay": mode,
        "accepted_threshold": annotation.accepted_threshold,
        "skipped": annotation.skipped,
        "annotation": record,
        "cameras": tiles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colors_are_stable_and_distinct() {
        assert_eq!(track_color(3), track_color(3));
        let colors: BTreeSet<String> = (1..=8).map(track_color).collect();
        assert!(colors.len() >= 7);
        assert!(colors.iter().all(|c| c.len() == 7 && c.starts_with('#')));
    }
}
