//! One annotation session: a loaded dataset, the live pipeline state, the
//! annotations produced so far and a bounded ring of snapshots for stepping
//! backwards.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use handlift_core::io_formats::{annotation_line, annotations_to_string, load_dataset, Dataset, IoError, Precision};
use handlift_core::pipeline::{
    FrameAnnotation, FrameInput, ManualOverride, OverrideError, PipelineConfig, PipelineError, SessionState,
};
use handlift_core::{ConfigError, SearchConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::overlay::{frame_payload, OverlayMode};

/// Everything a session needs besides the manifest. The pipeline keys sit at
/// the top level, so a batch run config file is accepted as is.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    /// Named detection source from the manifest; the first one when unset.
    pub source: Option<String>,
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Running,
    Paused,
    Stepping,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error(transparent)]
    Load(#[from] IoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Override(#[from] OverrideError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("unknown camera {0:?}")]
    UnknownCamera(String),
    #[error("session is running; pause it first")]
    Running,
    #[error("nothing has been annotated yet")]
    NothingAnnotated,
    #[error("the sequence is exhausted; there is no frame to override")]
    EndOfSequence,
    #[error("{path}: {error}")]
    Export { path: String, error: std::io::Error },
}

/// Settings as they were when a frame was processed, enough to replay it.
#[derive(Debug, Clone)]
struct FrameLog {
    search: SearchConfig,
    camera_mask: BTreeSet<String>,
    overrides: Vec<ManualOverride>,
}

pub struct Session {
    pub id: String,
    dataset: Dataset,
    config: SessionConfig,
    initial: SessionState,
    state: SessionState,
    annotations: Vec<FrameAnnotation>,
    /// State right before processing the frame at each position.
    snapshots: BTreeMap<usize, SessionState>,
    log: Vec<FrameLog>,
    ring: usize,
    search: SearchConfig,
    camera_mask: BTreeSet<String>,
    pub mode: Mode,
    pub overlay: OverlayMode,
    seq: u64,
}

impl Session {
    pub fn open(id: String, manifest: &Path, config: SessionConfig) -> Result<Self, SessionError> {
        config.pipeline.validate()?;
        let dataset = load_dataset(manifest, config.source.as_deref(), config.pipeline.joint_count)?;
        if dataset.frames.is_empty() {
            return Err(ConfigError::new("detections", "the detection file has no frames").into());
        }
        let state = SessionState::new(dataset.cameras.clone(), config.pipeline.clone())?;
        Ok(Self {
            id,
            ring: config.pipeline.history_len.max(1),
            search: config.pipeline.search,
            camera_mask: BTreeSet::new(),
            initial: state.clone(),
            state,
            dataset,
            config,
            annotations: Vec::new(),
            snapshots: BTreeMap::new(),
            log: Vec::new(),
            mode: Mode::Paused,
            overlay: OverlayMode::Matched,
            seq: 0,
        })
    }

    /// Number of frames processed so far; the next frame to process.
    pub fn cursor(&self) -> usize {
        self.annotations.len()
    }

    pub fn len(&self) -> usize {
        self.dataset.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.frames.is_empty()
    }

    pub fn at_end(&self) -> bool {
        self.cursor() == self.len()
    }

    pub fn annotations(&self) -> &[FrameAnnotation] {
        &self.annotations
    }

    pub fn camera_ids(&self) -> Vec<String> {
        self.state.camera_ids()
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    fn require_idle(&self) -> Result<(), SessionError> {
        if self.mode == Mode::Running {
            return Err(SessionError::Running);
        }
        Ok(())
    }

    /// Processes the next frame. Returns `None` at the end of the sequence.
    pub fn step_forward(&mut self) -> Result<Option<Value>, SessionError> {
        let pos = self.cursor();
        let Some(input) = self.dataset.frames.get(pos) else {
            return Ok(None);
        };
        let mut before = self.state.clone();
        before.history.clear();
        let entry = FrameLog {
            search: self.state.config.search,
            camera_mask: self.state.camera_mask.clone(),
            overrides: self.state.pending_overrides.clone(),
        };
        match self.state.annotate(input) {
            Ok(a) => self.annotations.push(a),
            Err(e) => {
                self.state = before;
                return Err(e.into());
            }
        }
        self.snapshots.insert(pos, before);
        self.log.push(entry);
        while self.snapshots.len() > self.ring {
            self.snapshots.pop_first();
        }
        self.seq += 1;
        Ok(Some(self.payload()))
    }

    /// Undoes the last processed frame. The restored state re-applies the
    /// overrides that frame consumed once it is processed again.
    pub fn step_back(&mut self) -> bool {
        let Some(target) = self.cursor().checked_sub(1) else {
            return false;
        };
        let mut state = match self.snapshots.remove(&target) {
            Some(s) => s,
            None => self.replay_to(target),
        };
        self.snapshots.retain(|p, _| *p < target);
        // live settings win over the ones recorded with the snapshot
        state.set_search_config(self.search).expect("live search config was validated");
        state.camera_mask = self.camera_mask.clone();
        self.state = state;
        self.annotations.truncate(target);
        self.log.truncate(target);
        true
    }

    /// Rebuilds the state right before `target` from the nearest retained
    /// snapshot (or the initial state) by re-running the logged frames.
    fn replay_to(&self, target: usize) -> SessionState {
        let (start, mut state) = match self.snapshots.range(..target).next_back() {
            Some((p, s)) => (*p, s.clone()),
            None => (0, self.initial.clone()),
        };
        for pos in start..target {
            let entry = &self.log[pos];
            state.set_search_config(entry.search).expect("logged config was valid");
            state.camera_mask = entry.camera_mask.clone();
            state.pending_overrides = entry.overrides.clone();
            state
                .annotate(&self.dataset.frames[pos])
                .expect("replaying a frame that succeeded before");
        }
        let entry = &self.log[target];
        state.camera_mask = entry.camera_mask.clone();
        state.pending_overrides = entry.overrides.clone();
        state.history.clear();
        state
    }

    pub fn pause(&mut self) {
        self.mode = Mode::Paused;
    }

    pub fn set_params(&mut self, patch: &serde_json::Map<String, Value>) -> Result<(), SessionError> {
        self.require_idle()?;
        let mut merged = serde_json::to_value(self.search).expect("search config serializes");
        let obj = merged.as_object_mut().expect("search config is an object");
        for (key, v) in patch {
            if !obj.contains_key(key) {
                return Err(ConfigError::new(key, "is not a search parameter").into());
            }
            let mut probe = obj.clone();
            probe.insert(key.clone(), v.clone());
            serde_json::from_value::<SearchConfig>(Value::Object(probe))
                .map_err(|e| ConfigError::new(key, e.to_string()))?;
            obj.insert(key.clone(), v.clone());
        }
        let search: SearchConfig = serde_json::from_value(merged).map_err(|e| ConfigError::new("search", e.to_string()))?;
        self.state.set_search_config(search)?;
        self.search = search;
        Ok(())
    }

    pub fn set_overlay(&mut self, overlay: OverlayMode) -> Result<(), SessionError> {
        self.require_idle()?;
        self.overlay = overlay;
        Ok(())
    }

    pub fn reject_camera(&mut self, camera: &str, rejected: bool) -> Result<(), SessionError> {
        self.require_idle()?;
        self.state
            .set_camera_rejected(camera, rejected)
            .map_err(|_| SessionError::UnknownCamera(camera.to_owned()))?;
        self.camera_mask = self.state.camera_mask.clone();
        Ok(())
    }

    /// Queues an override for the next frame to be processed.
    pub fn manual_match(&mut self, o: ManualOverride) -> Result<(), SessionError> {
        self.require_idle()?;
        let input: &FrameInput = self.dataset.frames.get(self.cursor()).ok_or(SessionError::EndOfSequence)?;
        self.state.apply_manual_override(input, o)?;
        Ok(())
    }

    pub fn export_text(&self) -> Result<String, SessionError> {
        if self.annotations.is_empty() {
            return Err(SessionError::NothingAnnotated);
        }
        Ok(annotations_to_string(&self.annotations, &self.camera_ids(), self.config.precision))
    }

    pub fn export(&self, path: &Path) -> Result<usize, SessionError> {
        let text = self.export_text()?;
        std::fs::write(path, text).map_err(|error| SessionError::Export {
            path: path.display().to_string(),
            error,
        })?;
        Ok(self.annotations.len())
    }

    /// Overlay payload for the most recently processed frame.
    pub fn payload(&self) -> Value {
        let Some(a) = self.annotations.last() else {
            return Value::Null;
        };
        let input = &self.dataset.frames[self.cursor() - 1];
        let record: Value =
            serde_json::from_str(&annotation_line(a, &self.camera_ids(), Precision::Exact)).expect("annotation line is JSON");
        frame_payload(
            &self.id,
            self.seq,
            self.cursor(),
            self.overlay,
            &self.dataset.cameras,
            &self.state.camera_mask,
            input,
            a,
            record,
        )
    }

    pub fn status(&self) -> Value {
        json!({
            "id": self.id,
            "sequence": self.dataset.manifest.sequence,
            "cursor": self.cursor(),
            "frames": self.len(),
            "frame": self.annotations.last().map(|a| a.frame_index),
            "next_frame": self.dataset.frames.get(self.cursor()).map(|f| f.frame_index),
            "end_of_sequence": self.at_end(),
            "mode": self.mode,
            "overlay": self.overlay,
            "search": self.search,
            "cameras": self.camera_ids(),
            "rejected_cameras": self.state.camera_mask,
            "tracks": self.state.tracks.iter().map(|t| t.track_id).collect::<Vec<_>>(),
            "pending_overrides": self.state.pending_overrides,
            "seq": self.seq,
        })
    }
}
