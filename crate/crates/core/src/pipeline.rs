//! Sequence driver: detections in, tracked 3D hands out.
//!
//! Each frame goes through proposal lifting, clustering under the configured
//! threshold criterion, fusion and a track update. The first frame (and any
//! frame with no live tracks) bootstraps with DM at the default threshold.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::clustering::{
    build_proposals_filtered, pose_distance, ClusterConstraints, DetectionRef, HandEstimate,
    HandStatus, ProposalParams, TrackId, TrackState,
};
use crate::geometry::{CameraModel, Detection2D, GeometryError, DEFAULT_JOINT_COUNT};
use crate::threshold_search::{
    fallback, select, select_bootstrap, ConfigError, FrameContext, SearchConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub search: SearchConfig,
    pub proposal: ProposalParams,
    /// Consecutive carried-forward frames a track survives.
    pub max_coast: u32,
    /// Annotations kept in `SessionState::history`.
    pub history_len: usize,
    pub joint_count: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            proposal: ProposalParams::default(),
            max_coast: 30,
            history_len: 600,
            joint_count: DEFAULT_JOINT_COUNT,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.search.validate()?;
        let cutoff = self.proposal.conf_cutoff;
        if !(0.0..=1.0).contains(&cutoff) {
            return Err(ConfigError::new("conf_cutoff", "must lie in [0, 1]"));
        }
        if !(self.proposal.max_residual_px.is_finite() && self.proposal.max_residual_px > 0.0) {
            return Err(ConfigError::new("max_residual_px", "must be positive"));
        }
        if self.joint_count == 0 {
            return Err(ConfigError::new("joint_count", "must be at least 1"));
        }
        Ok(())
    }
}

/// Detections of one synchronized frame, keyed by camera id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameInput {
    pub frame_index: u64,
    pub timestamp: f64,
    pub detections: BTreeMap<String, Vec<Detection2D>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverrideAction {
    Assign(TrackId),
    Reject,
}

impl Serialize for OverrideAction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            OverrideAction::Assign(t) => s.serialize_u64(*t),
            OverrideAction::Reject => s.serialize_str("REJECT"),
        }
    }
}

impl<'de> Deserialize<'de> for OverrideAction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(t) => Ok(OverrideAction::Assign(t)),
            Raw::S(s) if s.eq_ignore_ascii_case("reject") => Ok(OverrideAction::Reject),
            Raw::S(s) => Err(serde::de::Error::custom(format!("expected a track id or REJECT, got {s:?}"))),
        }
    }
}

/// A human decision about one detection of one frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManualOverride {
    pub frame: u64,
    #[serde(rename = "camera")]
    pub camera_id: String,
    #[serde(rename = "index")]
    pub detection_index: usize,
    #[serde(rename = "track")]
    pub action: OverrideAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverrideError {
    #[error("unknown track {0}")]
    UnknownTrack(TrackId),
    #[error("frame {frame} has no detection {index} in camera {camera}")]
    UnknownDetection { frame: u64, camera: String, index: usize },
    #[error("override targets frame {got} but the current frame is {expected}")]
    WrongFrame { expected: u64, got: u64 },
    #[error("detection {index} in camera {camera} already has a conflicting override")]
    Conflict { camera: String, index: usize },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Override(#[from] OverrideError),
    #[error("camera {camera} detection {index}: {source}")]
    InvalidDetection {
        camera: String,
        index: usize,
        #[source]
        source: GeometryError,
    },
    #[error("frame {got} does not follow frame {previous}")]
    Ordering { previous: u64, got: u64 },
    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: u64,
        #[source]
        source: Box<PipelineError>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameAnnotation {
    pub frame_index: u64,
    /// Ordered by track id.
    pub hands: Vec<HandEstimate>,
    pub accepted_threshold: f64,
    pub skipped: BTreeSet<TrackId>,
    pub manual_overrides: Vec<ManualOverride>,
}

impl FrameAnnotation {
    pub fn hand(&self, track: TrackId) -> Option<&HandEstimate> {
        self.hands.iter().find(|h| h.track_id == track)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub cameras: Vec<CameraModel>,
    pub config: PipelineConfig,
    pub tracks: Vec<TrackState>,
    /// Ids of cameras whose detections are ignored.
    pub camera_mask: BTreeSet<String>,
    pub history: VecDeque<FrameAnnotation>,
    pub last_accepted: f64,
    pub next_track_id: TrackId,
    pub last_frame: Option<u64>,
    pub pending_overrides: Vec<ManualOverride>,
    pub tracks_born: usize,
    pub tracks_retired: usize,
}

impl SessionState {
    pub fn new(cameras: Vec<CameraModel>, config: PipelineConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        if cameras.is_empty() {
            return Err(ConfigError::new("cameras", "calibration is empty"));
        }
        let mut ids = BTreeSet::new();
        for c in &cameras {
            c.validate()
                .map_err(|e| ConfigError::new(format!("cameras.{}", c.id), e.to_string()))?;
            if !ids.insert(c.id.clone()) {
                return Err(ConfigError::new("cameras", format!("duplicate camera id {}", c.id)));
            }
        }
        let last_accepted = config.search.delta_default;
        Ok(Self {
            cameras,
            config,
            tracks: Vec::new(),
            camera_mask: BTreeSet::new(),
            history: VecDeque::new(),
            last_accepted,
            next_track_id: 1,
            last_frame: None,
            pending_overrides: Vec::new(),
            tracks_born: 0,
            tracks_retired: 0,
        })
    }

    pub fn camera_index(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn camera_ids(&self) -> Vec<String> {
        self.cameras.iter().map(|c| c.id.clone()).collect()
    }

    /// Takes effect from the next frame. A new `delta_default` also re-centres
    /// the region-growing search on it.
    pub fn set_search_config(&mut self, search: SearchConfig) -> Result<(), ConfigError> {
        search.validate()?;
        if search.delta_default != self.config.search.delta_default {
            self.last_accepted = search.delta_default;
        }
        self.config.search = search;
        Ok(())
    }

    /// Adds or removes a camera from the rejection mask.
    pub fn set_camera_rejected(&mut self, camera_id: &str, rejected: bool) -> Result<(), ConfigError> {
        if self.camera_index(camera_id).is_none() {
            return Err(ConfigError::new("camera_id", format!("unknown camera {camera_id}")));
        }
        if rejected {
            self.camera_mask.insert(camera_id.to_owned());
        } else {
            self.camera_mask.remove(camera_id);
        }
        Ok(())
    }

    /// Processes one frame in place. See [`annotate_frame`].
    pub fn annotate(&mut self, input: &FrameInput) -> Result<FrameAnnotation, PipelineError> {
        if let Some(prev) = self.last_frame {
            if input.frame_index <= prev {
                return Err(PipelineError::Ordering {
                    previous: prev,
                    got: input.frame_index,
                });
            }
        }
        let detections = self.arrange_detections(input)?;
        let overrides: Vec<ManualOverride> = self
            .pending_overrides
            .iter()
            .filter(|o| o.frame == input.frame_index)
            .cloned()
            .collect();
        let mut rejected = BTreeSet::new();
        let mut constraints = ClusterConstraints::default();
        for o in &overrides {
            let cam = self.check_override(o, &detections)?;
            let r = DetectionRef::new(cam, o.detection_index);
            match o.action {
                OverrideAction::Reject => {
                    rejected.insert(r);
                }
                OverrideAction::Assign(t) => {
                    constraints.forced.insert(r, t);
                }
            }
        }

        let mut proposals = build_proposals_filtered(&self.cameras, &detections, &self.config.proposal, |r| {
            !rejected.contains(&r)
        });
        proposals.retain(|p| constraints.proposal_tag(p).is_ok());

        let cutoff = self.config.proposal.conf_cutoff;
        let bootstrap = self.tracks.is_empty();
        let (selection, filled) = {
            let ctx = FrameContext::new(&self.cameras, &detections, &self.tracks, proposals)
                .with_constraints(constraints)
                .with_conf_cutoff(cutoff);
            let selection = if bootstrap {
                select_bootstrap(&ctx, &self.config.search)
            } else {
                select(&ctx, self.last_accepted, &self.config.search)
            };
            let filled = fallback(&self.tracks, &selection, self.config.max_coast);
            (selection, filled)
        };

        // track update
        let mut any_fused = false;
        self.tracks.retain(|t| !filled.retired.contains(&t.track_id));
        self.tracks_retired += filled.retired.len();
        let mut hands = filled.estimates;
        for t in &mut self.tracks {
            let Some(est) = hands.iter().find(|h| h.track_id == t.track_id) else {
                continue;
            };
            if est.status == HandStatus::Fused {
                any_fused = true;
                t.last_pose = est.pose.clone();
                t.frames_since_update = 0;
                t.side = est.side;
                t.side_confidence = est.side_confidence;
                if let Some(Some(sel)) = selection.per_hand.get(&t.track_id) {
                    t.last_threshold = sel.threshold;
                }
            } else {
                t.frames_since_update += 1;
            }
        }

        let mut spawned: Vec<&HandEstimate> = Vec::new();
        let separation = self.config.search.spawn_separation;
        let mut new_hands = Vec::new();
        for s in &selection.spawns {
            let too_close = spawned.iter().any(|h| {
                pose_distance(&h.pose, &s.estimate.pose).is_ok_and(|d| d < separation)
            });
            if too_close {
                continue;
            }
            spawned.push(&s.estimate);
            let id = self.next_track_id;
            self.next_track_id += 1;
            self.tracks_born += 1;
            let mut est = s.estimate.clone();
            est.track_id = id;
            self.tracks.push(TrackState {
                track_id: id,
                last_pose: est.pose.clone(),
                last_threshold: s.threshold,
                frames_since_update: 0,
                side: est.side,
                side_confidence: est.side_confidence,
            });
            new_hands.push(est);
        }
        hands.extend(new_hands);
        hands.sort_by_key(|h| h.track_id);

        if bootstrap {
            self.last_accepted = self.config.search.delta_default;
        } else if any_fused {
            self.last_accepted = selection.accepted_threshold;
        }

        let annotation = FrameAnnotation {
            frame_index: input.frame_index,
            hands,
            accepted_threshold: selection.accepted_threshold,
            skipped: filled.skipped,
            manual_overrides: overrides,
        };
        self.pending_overrides.retain(|o| o.frame != input.frame_index);
        self.last_frame = Some(input.frame_index);
        if self.config.history_len > 0 {
            if self.history.len() == self.config.history_len {
                self.history.pop_front();
            }
            self.history.push_back(annotation.clone());
        }
        Ok(annotation)
    }

    /// Per-camera detection lists in calibration order, masked cameras empty.
    fn arrange_detections(&self, input: &FrameInput) -> Result<Vec<Vec<Detection2D>>, PipelineError> {
        let mut out = vec![Vec::new(); self.cameras.len()];
        for (id, dets) in &input.detections {
            let cam = self
                .camera_index(id)
                .ok_or_else(|| ConfigError::new("cams", format!("camera {id} is not in the calibration")))?;
            for (i, d) in dets.iter().enumerate() {
                d.validate().map_err(|source| PipelineError::InvalidDetection {
                    camera: id.clone(),
                    index: i,
                    source,
                })?;
                if d.joint_count() != self.config.joint_count {
                    return Err(PipelineError::InvalidDetection {
                        camera: id.clone(),
                        index: i,
                        source: GeometryError::InvalidInput(format!(
                            "expected {} keypoints, got {}",
                            self.config.joint_count,
                            d.joint_count()
                        )),
                    });
                }
            }
            if !self.camera_mask.contains(id) {
                out[cam] = dets.clone();
            }
        }
        Ok(out)
    }

    fn check_override(&self, o: &ManualOverride, detections: &[Vec<Detection2D>]) -> Result<usize, OverrideError> {
        let unknown = || OverrideError::UnknownDetection {
            frame: o.frame,
            camera: o.camera_id.clone(),
            index: o.detection_index,
        };
        let cam = self.camera_index(&o.camera_id).ok_or_else(unknown)?;
        if o.detection_index >= detections[cam].len() {
            return Err(unknown());
        }
        if let OverrideAction::Assign(t) = o.action {
            if !self.tracks.iter().any(|tr| tr.track_id == t) {
                return Err(OverrideError::UnknownTrack(t));
            }
        }
        Ok(cam)
    }

    /// Records a manual override for the upcoming frame `input`. It becomes a
    /// hard constraint when that frame is annotated.
    pub fn apply_manual_override(&mut self, input: &FrameInput, o: ManualOverride) -> Result<(), OverrideError> {
        if o.frame != input.frame_index {
            return Err(OverrideError::WrongFrame {
                expected: input.frame_index,
                got: o.frame,
            });
        }
        self.camera_index(&o.camera_id)
            .ok_or_else(|| OverrideError::UnknownDetection {
                frame: o.frame,
                camera: o.camera_id.clone(),
                index: o.detection_index,
            })?;
        let count = input.detections.get(&o.camera_id).map_or(0, Vec::len);
        if o.detection_index >= count {
            return Err(OverrideError::UnknownDetection {
                frame: o.frame,
                camera: o.camera_id.clone(),
                index: o.detection_index,
            });
        }
        if let OverrideAction::Assign(t) = o.action {
            if !self.tracks.iter().any(|tr| tr.track_id == t) {
                return Err(OverrideError::UnknownTrack(t));
            }
        }
        for p in self.pending_overrides.iter().filter(|p| p.frame == o.frame) {
            let same_detection = p.camera_id == o.camera_id && p.detection_index == o.detection_index;
            if same_detection && p.action == o.action {
                return Ok(());
            }
            let same_track_same_camera = p.camera_id == o.camera_id
                && matches!((p.action, o.action), (OverrideAction::Assign(a), OverrideAction::Assign(b)) if a == b);
            if same_detection || same_track_same_camera {
                return Err(OverrideError::Conflict {
                    camera: o.camera_id,
                    index: o.detection_index,
                });
            }
        }
        self.pending_overrides.push(o);
        Ok(())
    }
}

/// Pure form of [`SessionState::annotate`].
pub fn annotate_frame(state: &SessionState, input: &FrameInput) -> Result<(FrameAnnotation, SessionState), PipelineError> {
    let mut next = state.clone();
    let a = next.annotate(input)?;
    Ok((a, next))
}

/// Pure form of [`SessionState::apply_manual_override`].
pub fn apply_manual_override(
    state: &SessionState,
    input: &FrameInput,
    o: ManualOverride,
) -> Result<SessionState, OverrideError> {
    let mut next = state.clone();
    next.apply_manual_override(input, o)?;
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub frames: usize,
    /// Frames in which at least one track was carried forward.
    pub skipped_frames: usize,
    /// Sum of per-track skipped flags.
    pub skipped_flags: usize,
    pub per_track_skipped: BTreeMap<TrackId, usize>,
    pub mean_accepted_threshold: f64,
    pub tracks_born: usize,
    pub tracks_retired: usize,
}

impl SequenceSummary {
    pub fn from_annotations(annotations: &[FrameAnnotation], tracks_born: usize, tracks_retired: usize) -> Self {
        let mut per_track_skipped: BTreeMap<TrackId, usize> = BTreeMap::new();
        for a in annotations {
            for h in &a.hands {
                per_track_skipped.entry(h.track_id).or_default();
            }
            for t in &a.skipped {
                *per_track_skipped.entry(*t).or_default() += 1;
            }
        }
        let mean_accepted_threshold = if annotations.is_empty() {
            0.0
        } else {
            annotations.iter().map(|a| a.accepted_threshold).sum::<f64>() / annotations.len() as f64
        };
        Self {
            frames: annotations.len(),
            skipped_frames: annotations.iter().filter(|a| !a.skipped.is_empty()).count(),
            skipped_flags: per_track_skipped.values().sum(),
            per_track_skipped,
            mean_accepted_threshold,
            tracks_born,
            tracks_retired,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceResult {
    pub annotations: Vec<FrameAnnotation>,
    pub summary: SequenceSummary,
    pub final_state: SessionState,
}

/// Folds [`annotate_frame`] over a frame stream.
pub fn annotate_sequence<I>(config: &PipelineConfig, cameras: &[CameraModel], frames: I) -> Result<SequenceResult, PipelineError>
where
    I: IntoIterator,
    I::Item: std::borrow::Borrow<FrameInput>,
{
    use std::borrow::Borrow;
    let mut state = SessionState::new(cameras.to_vec(), config.clone())?;
    let mut annotations = Vec::new();
    for f in frames {
        let f = f.borrow();
        let a = state.annotate(f).map_err(|e| PipelineError::AtFrame {
            frame: f.frame_index,
            source: Box::new(e),
        })?;
        annotations.push(a);
    }
    if annotations.is_empty() {
        return Err(ConfigError::new("detections", "the frame stream is empty").into());
    }
    let summary = SequenceSummary::from_annotations(&annotations, state.tracks_born, state.tracks_retired);
    Ok(SequenceResult {
        annotations,
        summary,
        final_state: state,
    })
}
