//! File formats: calibration (JSON), detections and annotations (JSON lines,
//! one frame per line), evaluation reports (flat JSON) and dataset manifests.
//!
//! Writers are deterministic. With [`Precision::Fixed`] meters and ratios get
//! 6 fractional digits and pixels 2. [`Precision::Exact`] writes the shortest
//! representation that parses back to the same `f64`, which is what the
//! synthetic generator uses so that zero-noise data survives a trip through
//! disk unchanged. Calibration is always written exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Matrix4, Point2, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{DetectionRef, HandEstimate, HandStatus, Side, TrackId};
use crate::geometry::{CameraModel, Detection2D, GeometryError, Pose3D};
use crate::metrics::{EvalReport, TrackBreakdown};
use crate::pipeline::{FrameAnnotation, FrameInput, ManualOverride, OverrideAction};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: invalid `{field}`: {reason}")]
    Validation {
        path: PathBuf,
        field: String,
        reason: String,
    },
    #[error("{path}:{line}: frame {got} comes after frame {previous}")]
    Ordering {
        path: PathBuf,
        line: usize,
        previous: u64,
        got: u64,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_owned(),
            error: source,
        }
    }

    fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_owned(),
            line,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Precision {
    #[default]
    Fixed,
    Exact,
}

#[derive(Debug, Clone, Copy)]
enum Unit {
    Meters,
    Pixels,
    Ratio,
}

fn push_num(out: &mut String, v: f64, unit: Unit, precision: Precision) {
    if !v.is_finite() {
        out.push_str("null");
        return;
    }
    match precision {
        Precision::Exact => write!(out, "{v:?}"),
        Precision::Fixed => {
            let digits = match unit {
                Unit::Pixels => 2,
                Unit::Meters | Unit::Ratio => 6,
            };
            write!(out, "{v:.digits$}")
        }
    }
    .expect("writing to a String cannot fail");
}

fn push_str(out: &mut String, s: &str) {
    out.push_str(&serde_json::to_string(s).expect("strings always serialize"));
}

fn nan_if_null(v: Option<f64>) -> f64 {
    v.unwrap_or(f64::NAN)
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| IoError::io(path, e))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| IoError::io(path, e))?);
    w.write_all(contents.as_bytes()).map_err(|e| IoError::io(path, e))?;
    w.flush().map_err(|e| IoError::io(path, e))
}

fn read_file(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

// ---------------------------------------------------------------- calibration

#[derive(Serialize, Deserialize)]
struct CalibrationDoc {
    cameras: Vec<CameraRecord>,
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    id: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    extrinsic: Vec<f64>,
}

pub fn calibration_to_string(cameras: &[CameraModel]) -> String {
    let doc = CalibrationDoc {
        cameras: cameras
            .iter()
            .map(|c| CameraRecord {
                id: c.id.clone(),
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                extrinsic: (0..4)
                    .flat_map(|r| (0..4).map(move |k| (r, k)))
                    .map(|(r, k)| c.extrinsic[(r, k)])
                    .collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("calibration serializes");
    s.push('\n');
    s
}

pub fn save_calibration(cameras: &[CameraModel], path: &Path) -> Result<(), IoError> {
    write_file(path, &calibration_to_string(cameras))
}

pub fn parse_calibration(text: &str, path: &Path) -> Result<Vec<CameraModel>, IoError> {
    let doc: CalibrationDoc =
        serde_json::from_str(text).map_err(|e| IoError::parse(path, e.line(), e.to_string()))?;
    let mut ids = BTreeSet::new();
    doc.cameras
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let invalid = |field: String, reason: String| IoError::Validation {
                path: path.to_owned(),
                field,
                reason,
            };
            if !ids.insert(r.id.clone()) {
                return Err(invalid(format!("cameras[{i}].id"), format!("duplicate id {:?}", r.id)));
            }
            if r.extrinsic.len() != 16 {
                return Err(invalid(
                    format!("cameras[{i}].extrinsic"),
                    format!("expected 16 values, got {}", r.extrinsic.len()),
                ));
            }
            let extrinsic = Matrix4::from_row_slice(&r.extrinsic);
            CameraModel::new(r.id, r.fx, r.fy, r.cx, r.cy, extrinsic, r.width, r.height).map_err(|e| match e {
                GeometryError::InvalidCamera { field, reason, .. } => {
                    invalid(format!("cameras[{i}].{field}"), reason)
                }
                other => invalid(format!("cameras[{i}]"), other.to_string()),
            })
        })
        .collect()
}

pub fn load_calibration(path: &Path) -> Result<Vec<CameraModel>, IoError> {
    parse_calibration(&read_file(path)?, path)
}

// ----------------------------------------------------------------- detections

#[derive(Deserialize)]
struct DetectionRecord {
    frame: u64,
    #[serde(default)]
    time: Option<f64>,
    #[serde(default)]
    cams: BTreeMap<String, Vec<DetectionEntry>>,
}

#[derive(Deserialize)]
struct DetectionEntry {
    bbox: [f64; 4],
    kps: Vec<[f64; 3]>,
    side: f64,
    conf: f64,
}

pub fn detection_line(frame: &FrameInput, precision: Precision) -> String {
    let mut s = String::new();
    write!(s, "{{\"frame\":{},\"time\":", frame.frame_index).unwrap();
    push_num(&mut s, frame.timestamp, Unit::Ratio, precision);
    s.push_str(",\"cams\":{");
    for (ci, (id, dets)) in frame.detections.iter().enumerate() {
        if ci > 0 {
            s.push(',');
        }
        push_str(&mut s, id);
        s.push_str(":[");
        for (di, d) in dets.iter().enumerate() {
            if di > 0 {
                s.push(',');
            }
            s.push_str("{\"bbox\":[");
            for (k, v) in d.bbox.iter().enumerate() {
                if k > 0 {
                    s.push(',');
                }
                push_num(&mut s, *v, Unit::Pixels, precision);
            }
            s.push_str("],\"kps\":[");
            for (k, (p, c)) in d.keypoints.iter().zip(&d.keypoint_conf).enumerate() {
                if k > 0 {
                    s.push(',');
                }
                s.push('[');
                push_num(&mut s, p.x, Unit::Pixels, precision);
                s.push(',');
                push_num(&mut s, p.y, Unit::Pixels, precision);
                s.push(',');
                push_num(&mut s, *c, Unit::Ratio, precision);
                s.push(']');
            }
            s.push_str("],\"side\":");
            push_num(&mut s, d.side_prob, Unit::Ratio, precision);
            s.push_str(",\"conf\":");
            push_num(&mut s, d.det_conf, Unit::Ratio, precision);
            s.push('}');
        }
        s.push(']');
    }
    s.push_str("}}");
    s
}

pub fn save_detections(frames: &[FrameInput], path: &Path, precision: Precision) -> Result<(), IoError> {
    let mut s = String::new();
    for f in frames {
        s.push_str(&detection_line(f, precision));
        s.push('\n');
    }
    write_file(path, &s)
}

fn clamp_unit(v: f64, what: &str, path: &Path, line: usize) -> f64 {
    if (0.0..=1.0).contains(&v) {
        v
    } else {
        let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        warn!("{}:{line}: {what} {v} clamped to {c}", path.display());
        c
    }
}

/// Streaming reader of a detection file. Consecutive lines with the same
/// frame index are merged into one frame.
pub struct DetectionReader<R> {
    lines: std::io::Lines<R>,
    path: PathBuf,
    joint_count: usize,
    line_no: usize,
    pending: Option<(usize, FrameInput)>,
    last_frame: Option<u64>,
    done: bool,
}

impl DetectionReader<BufReader<File>> {
    pub fn open(path: &Path, joint_count: usize) -> Result<Self, IoError> {
        let file = File::open(path).map_err(|e| IoError::io(path, e))?;
        Ok(Self::new(BufReader::new(file), path, joint_count))
    }
}

impl<R: BufRead> DetectionReader<R> {
    pub fn new(reader: R, path: &Path, joint_count: usize) -> Self {
        Self {
            lines: reader.lines(),
            path: path.to_owned(),
            joint_count,
            line_no: 0,
            pending: None,
            last_frame: None,
            done: false,
        }
    }

    fn parse_line(&self, text: &str, line: usize) -> Result<FrameInput, IoError> {
        let path = self.path.as_path();
        let rec: DetectionRecord =
            serde_json::from_str(text).map_err(|e| IoError::parse(path, line, e.to_string()))?;
        let mut detections = BTreeMap::new();
        for (cam, entries) in rec.cams {
            let mut dets = Vec::with_capacity(entries.len());
            for (i, e) in entries.into_iter().enumerate() {
                if e.kps.len() != self.joint_count {
                    return Err(IoError::parse(
                        path,
                        line,
                        format!(
                            "camera {cam} detection {i}: expected {} keypoints, got {}",
                            self.joint_count,
                            e.kps.len()
                        ),
                    ));
                }
                let d = Detection2D {
                    keypoints: e.kps.iter().map(|k| Point2::new(k[0], k[1])).collect(),
                    keypoint_conf: e.kps.iter().map(|k| clamp_unit(k[2], "keypoint confidence", path, line)).collect(),
                    bbox: e.bbox,
                    side_prob: clamp_unit(e.side, "side probability", path, line),
                    det_conf: clamp_unit(e.conf, "detection confidence", path, line),
                };
                d.validate()
                    .map_err(|err| IoError::parse(path, line, format!("camera {cam} detection {i}: {err}")))?;
                dets.push(d);
            }
            detections.insert(cam, dets);
        }
        Ok(FrameInput {
            frame_index: rec.frame,
            timestamp: rec.time.unwrap_or(0.0),
            detections,
        })
    }

    fn next_record(&mut self) -> Option<Result<(usize, FrameInput), IoError>> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(IoError::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let n = self.line_no;
            return Some(self.parse_line(&line, n).map(|f| (n, f)));
        }
    }
}

impl<R: BufRead> Iterator for DetectionReader<R> {
    type Item = Result<FrameInput, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let (line, mut frame) = match self.pending.take() {
            Some(p) => p,
            None => match self.next_record() {
                None => return None,
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok(p)) => p,
            },
        };
        if let Some(prev) = self.last_frame {
            if frame.frame_index <= prev {
                self.done = true;
                return Some(Err(IoError::Ordering {
                    path: self.path.clone(),
                    line,
                    previous: prev,
                    got: frame.frame_index,
                }));
            }
        }
        loop {
            match self.next_record() {
                None => break,
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok((_, next))) if next.frame_index == frame.frame_index => {
                    for (cam, dets) in next.detections {
                        frame.detections.entry(cam).or_default().extend(dets);
                    }
                }
                Some(Ok(p)) => {
                    self.pending = Some(p);
                    break;
                }
            }
        }
        self.last_frame = Some(frame.frame_index);
        Some(Ok(frame))
    }
}

pub fn load_detections(path: &Path, joint_count: usize) -> Result<Vec<FrameInput>, IoError> {
    DetectionReader::open(path, joint_count)?.collect()
}

// ---------------------------------------------------------------- annotations

#[derive(Deserialize)]
struct AnnotationRecord {
    frame: u64,
    threshold: Option<f64>,
    hands: Vec<HandRecord>,
    #[serde(default)]
    overrides: Vec<OverrideRecord>,
}

#[derive(Deserialize)]
struct HandRecord {
    track: TrackId,
    side: Side,
    side_conf: f64,
    status: HandStatus,
    joints: Vec<[Option<f64>; 3]>,
    #[serde(default)]
    sources: Vec<(String, usize)>,
    #[serde(default)]
    interpolated: Vec<usize>,
}

#[derive(Deserialize)]
struct OverrideRecord {
    camera: String,
    index: usize,
    track: OverrideAction,
}

/// One annotation line. `camera_ids` maps camera indices to ids.
pub fn annotation_line(a: &FrameAnnotation, camera_ids: &[String], precision: Precision) -> String {
    let mut s = String::new();
    write!(s, "{{\"frame\":{},\"threshold\":", a.frame_index).unwrap();
    push_num(&mut s, a.accepted_threshold, Unit::Meters, precision);
    s.push_str(",\"hands\":[");
    for (hi, h) in a.hands.iter().enumerate() {
        if hi > 0 {
            s.push(',');
        }
        write!(s, "{{\"track\":{},\"side\":\"{}\",\"side_conf\":", h.track_id, h.side.as_str()).unwrap();
        push_num(&mut s, h.side_confidence, Unit::Ratio, precision);
        write!(s, ",\"status\":\"{}\",\"joints\":[", h.status.as_str()).unwrap();
        for (j, p) in h.pose.joints.iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            s.push('[');
            push_num(&mut s, p.x, Unit::Meters, precision);
            s.push(',');
            push_num(&mut s, p.y, Unit::Meters, precision);
            s.push(',');
            push_num(&mut s, p.z, Unit::Meters, precision);
            s.push(']');
        }
        s.push_str("],\"sources\":[");
        for (k, r) in h.contributing.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push('[');
            match camera_ids.get(r.camera) {
                Some(id) => push_str(&mut s, id),
                None => push_str(&mut s, &r.camera.to_string()),
            }
            write!(s, ",{}]", r.index).unwrap();
        }
        s.push(']');
        if !h.interpolated_joints.is_empty() {
            s.push_str(",\"interpolated\":[");
            let list: Vec<String> = h.interpolated_joints.iter().map(|j| j.to_string()).collect();
            s.push_str(&list.join(","));
            s.push(']');
        }
        s.push('}');
    }
    s.push(']');
    if !a.manual_overrides.is_empty() {
        s.push_str(",\"overrides\":[");
        for (k, o) in a.manual_overrides.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push_str("{\"camera\":");
            push_str(&mut s, &o.camera_id);
            write!(s, ",\"index\":{},\"track\":", o.detection_index).unwrap();
            match o.action {
                OverrideAction::Assign(t) => write!(s, "{t}").unwrap(),
                OverrideAction::Reject => s.push_str("\"REJECT\""),
            }
            s.push('}');
        }
        s.push(']');
    }
    s.push('}');
    s
}

pub fn annotations_to_string(annotations: &[FrameAnnotation], camera_ids: &[String], precision: Precision) -> String {
    let mut s = String::new();
    for a in annotations {
        s.push_str(&annotation_line(a, camera_ids, precision));
        s.push('\n');
    }
    s
}

pub fn write_annotations(
    annotations: &[FrameAnnotation],
    camera_ids: &[String],
    path: &Path,
    precision: Precision,
) -> Result<(), IoError> {
    write_file(path, &annotations_to_string(annotations, camera_ids, precision))
}

/// Parses annotation (or ground-truth) lines. Source camera ids are resolved
/// against `camera_ids`; with `None`, sources are not read.
pub fn parse_annotations(text: &str, path: &Path, camera_ids: Option<&[String]>) -> Result<Vec<FrameAnnotation>, IoError> {
    let mut out: Vec<FrameAnnotation> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(line).map_err(|e| IoError::parse(path, n, e.to_string()))?;
        if let Some(prev) = out.last() {
            if rec.frame <= prev.frame_index {
                return Err(IoError::Ordering {
                    path: path.to_owned(),
                    line: n,
                    previous: prev.frame_index,
                    got: rec.frame,
                });
            }
        }
        let mut hands = Vec::with_capacity(rec.hands.len());
        let mut seen = BTreeSet::new();
        for h in rec.hands {
            if !seen.insert(h.track) {
                return Err(IoError::parse(path, n, format!("track {} listed twice", h.track)));
            }
            let mut contributing = BTreeSet::new();
            if let Some(ids) = camera_ids {
                for (cam, idx) in &h.sources {
                    let c = ids
                        .iter()
                        .position(|id| id == cam)
                        .ok_or_else(|| IoError::parse(path, n, format!("unknown camera {cam:?} in sources")))?;
                    contributing.insert(DetectionRef::new(c, *idx));
                }
            }
            hands.push(HandEstimate {
                track_id: h.track,
                pose: Pose3D::new(
                    h.joints
                        .iter()
                        .map(|p| Point3::new(nan_if_null(p[0]), nan_if_null(p[1]), nan_if_null(p[2])))
                        .collect(),
                ),
                side: h.side,
                side_confidence: h.side_conf,
                contributing,
                status: h.status,
                interpolated_joints: h.interpolated.into_iter().collect(),
            });
        }
        let skipped = hands
            .iter()
            .filter(|h| h.status == HandStatus::CarriedForward)
            .map(|h| h.track_id)
            .collect();
        out.push(FrameAnnotation {
            frame_index: rec.frame,
            hands,
            accepted_threshold: nan_if_null(rec.threshold),
            skipped,
            manual_overrides: rec
                .overrides
                .into_iter()
                .map(|o| ManualOverride {
                    frame: rec.frame,
                    camera_id: o.camera,
                    detection_index: o.index,
                    action: o.track,
                })
                .collect(),
        });
    }
    Ok(out)
}

pub fn load_annotations(path: &Path, camera_ids: Option<&[String]>) -> Result<Vec<FrameAnnotation>, IoError> {
    parse_annotations(&read_file(path)?, path, camera_ids)
}

/// Ground truth shares the annotation schema.
pub fn load_ground_truth(path: &Path) -> Result<Vec<FrameAnnotation>, IoError> {
    load_annotations(path, None)
}

pub fn write_ground_truth(gt: &[FrameAnnotation], path: &Path, precision: Precision) -> Result<(), IoError> {
    write_annotations(gt, &[], path, precision)
}

// -------------------------------------------------------------------- reports

/// Flat key-value rendering of a report. Values are written exactly.
pub fn report_to_string(r: &EvalReport) -> String {
    let mut m = serde_json::Map::new();
    m.insert("mpjpe_mm".into(), r.mpjpe_mm.into());
    m.insert("pck_auc".into(), r.pck_auc.into());
    m.insert("track_acc".into(), r.track_acc.into());
    m.insert("skipped_frames".into(), r.skipped_frames.into());
    m.insert("matched_pairs".into(), r.matched_pairs.into());
    for (t, b) in &r.per_track {
        m.insert(format!("track.{t}.matched_frames"), b.matched_frames.into());
        m.insert(format!("track.{t}.mpjpe_mm"), b.mpjpe_mm.into());
    }
    for (t, n) in &r.per_track_skipped {
        m.insert(format!("pred_track.{t}.skipped"), (*n).into());
    }
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(m)).expect("report serializes");
    s.push('\n');
    s
}

pub fn write_report(r: &EvalReport, path: &Path) -> Result<(), IoError> {
    write_file(path, &report_to_string(r))
}

pub fn parse_report(text: &str, path: &Path) -> Result<EvalReport, IoError> {
    let m: BTreeMap<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| IoError::parse(path, e.line(), e.to_string()))?;
    let bad = |key: &str| IoError::parse(path, 0, format!("bad or missing value for {key:?}"));
    let float = |key: &str| m.get(key).and_then(|v| v.as_f64()).ok_or_else(|| bad(key));
    let count = |key: &str| {
        m.get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| bad(key))
    };
    let mut per_track: BTreeMap<TrackId, TrackBreakdown> = BTreeMap::new();
    let mut per_track_skipped = BTreeMap::new();
    for key in m.keys() {
        let parts: Vec<&str> = key.split('.').collect();
        match parts.as_slice() {
            ["track", t, field] => {
                let t: TrackId = t.parse().map_err(|_| bad(key))?;
                let entry = per_track.entry(t).or_default();
                match *field {
                    "matched_frames" => entry.matched_frames = count(key)?,
                    "mpjpe_mm" => entry.mpjpe_mm = float(key)?,
                    _ => return Err(bad(key)),
                }
            }
            ["pred_track", t, "skipped"] => {
                let t: TrackId = t.parse().map_err(|_| bad(key))?;
                per_track_skipped.insert(t, count(key)?);
            }
            _ => {}
        }
    }
    Ok(EvalReport {
        mpjpe_mm: float("mpjpe_mm")?,
        pck_auc: float("pck_auc")?,
        track_acc: float("track_acc")?,
        skipped_frames: count("skipped_frames")?,
        matched_pairs: count("matched_pairs")?,
        per_track,
        per_track_skipped,
    })
}

pub fn load_report(path: &Path) -> Result<EvalReport, IoError> {
    parse_report(&read_file(path)?, path)
}

// ------------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSource {
    pub name: String,
    pub path: String,
}

/// Describes one sequence on disk. Paths are relative to the manifest's
/// directory. The first detection source is the default one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sequence: String,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub cameras: Vec<String>,
    pub calibration: String,
    pub detections: Vec<DetectionSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

fn default_fps() -> f64 {
    20.0
}

/// A manifest with its files loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    pub cameras: Vec<CameraModel>,
    pub frames: Vec<FrameInput>,
    pub ground_truth: Option<Vec<FrameAnnotation>>,
}

impl DatasetManifest {
    pub fn resolve(&self, root: &Path, rel: &str) -> PathBuf {
        root.join(rel)
    }

    pub fn source(&self, name: Option<&str>) -> Option<&DetectionSource> {
        match name {
            None => self.detections.first(),
            Some(n) => self.detections.iter().find(|d| d.name == n),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    let text = read_file(path)?;
    let m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| IoError::parse(path, e.line(), e.to_string()))?;
    let invalid = |field: &str, reason: String| IoError::Validation {
        path: path.to_owned(),
        field: field.to_owned(),
        reason,
    };
    let mut ids = BTreeSet::new();
    for id in &m.cameras {
        if !ids.insert(id) {
            return Err(invalid("cameras", format!("duplicate camera id {id:?}")));
        }
    }
    if m.detections.is_empty() {
        return Err(invalid("detections", "at least one detection file is required".into()));
    }
    let root = path.parent().unwrap_or(Path::new("."));
    let mut files = vec![("calibration", m.calibration.as_str())];
    files.extend(m.detections.iter().map(|d| ("detections", d.path.as_str())));
    if let Some(gt) = &m.ground_truth {
        files.push(("ground_truth", gt.as_str()));
    }
    for (field, rel) in files {
        let p = root.join(rel);
        if !p.is_file() {
            return Err(invalid(field, format!("{} does not exist", p.display())));
        }
    }
    Ok(m)
}

/// Loads a manifest and everything it references. `source` picks a detection
/// file by name; `None` takes the first.
pub fn load_dataset(path: &Path, source: Option<&str>, joint_count: usize) -> Result<Dataset, IoError> {
    let manifest = load_manifest(path)?;
    let root = path.parent().unwrap_or(Path::new(".")).to_owned();
    let cameras = load_calibration(&root.join(&manifest.calibration))?;
    let calib_ids: Vec<&String> = cameras.iter().map(|c| &c.id).collect();
    let listed: Vec<&String> = manifest.cameras.iter().collect();
    if calib_ids != listed {
        return Err(IoError::Validation {
            path: path.to_owned(),
            field: "cameras".into(),
            reason: format!("manifest lists {listed:?} but the calibration has {calib_ids:?}"),
        });
    }
    let src = manifest.source(source).ok_or_else(|| IoError::Validation {
        path: path.to_owned(),
        field: "detections".into(),
        reason: format!("no detection source named {:?}", source.unwrap_or_default()),
    })?;
    let frames = load_detections(&root.join(&src.path), joint_count)?;
    let ground_truth = match &manifest.ground_truth {
        Some(gt) => Some(load_ground_truth(&root.join(gt))?),
        None => None,
    };
    Ok(Dataset {
        manifest,
        root,
        cameras,
        frames,
        ground_truth,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

/// Writes a complete dataset directory: manifest, calibration, detections and
/// (optionally) ground truth, all exact.
pub fn write_dataset(
    dir: &Path,
    sequence: &str,
    fps: f64,
    cameras: &[CameraModel],
    frames: &[FrameInput],
    ground_truth: Option<&[FrameAnnotation]>,
) -> Result<PathBuf, IoError> {
    fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    save_calibration(cameras, &dir.join(CALIBRATION_FILE))?;
    save_detections(frames, &dir.join(DETECTIONS_FILE), Precision::Exact)?;
    if let Some(gt) = ground_truth {
        write_ground_truth(gt, &dir.join(GROUND_TRUTH_FILE), Precision::Exact)?;
    }
    let manifest = DatasetManifest {
        sequence: sequence.to_owned(),
        fps,
        cameras: cameras.iter().map(|c| c.id.clone()).collect(),
        calibration: CALIBRATION_FILE.into(),
        detections: vec![DetectionSource {
            name: "default".into(),
            path: DETECTIONS_FILE.into(),
        }],
        ground_truth: ground_truth.map(|_| GROUND_TRUTH_FILE.into()),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(&path, &text)?;
    Ok(path)
}
