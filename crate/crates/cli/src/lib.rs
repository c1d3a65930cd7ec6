//! Batch commands behind the `handlift` binary. Each command is a plain
//! function so that tests (and other tools) can drive it without a process.
//!
//! Configuration is layered as JSON: built-in defaults, then the optional
//! `--config` file, then command-line settings. Unknown keys are rejected.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use handlift_core::io_formats::{
    load_annotations, load_dataset, load_ground_truth, report_to_string, write_annotations, write_dataset, Dataset,
    Precision,
};
use handlift_core::metrics::{evaluate, EvalReport, MetricsConfig};
use handlift_core::pipeline::{annotate_sequence, PipelineConfig, SequenceSummary};
use handlift_core::synth::{generate_scene, render_detections, NoiseSpec, SceneSpec};
use handlift_core::{ConfigError, Criterion, MatchingMode};
use handlift_service::{AppState, SessionConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const ABLATION_TEXT_FILE: &str = "ablation.txt";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    /// Detection source named in the manifest; the first one when unset.
    pub source: Option<String>,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
    pub precision: Precision,
    pub out: Option<PathBuf>,
    /// Drives every random draw of `synth`; overrides `scene.seed`.
    pub seed: u64,
    pub scene: SceneSpec,
    pub noise: NoiseSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            source: None,
            pipeline: PipelineConfig::default(),
            metrics: MetricsConfig::default(),
            precision: Precision::Fixed,
            out: None,
            seed: 0,
            scene: SceneSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.pipeline.validate()?;
        self.scene.validate()?;
        self.noise.validate()
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            pipeline: self.pipeline.clone(),
            source: self.source.clone(),
            precision: self.precision,
        }
    }

    fn manifest(&self) -> Result<&Path> {
        match &self.manifest {
            Some(m) => Ok(m),
            None => Err(ConfigError::new("manifest", "is required").into()),
        }
    }

    fn out_dir(&self, fallback: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
    }
}

/// Builds a config from defaults, an optional file and `(dotted.key, value)`
/// settings, in increasing precedence. Values that parse as JSON are taken as
/// JSON, anything else as a string.
pub fn load_config(file: Option<&Path>, settings: &[(String, String)]) -> Result<RunConfig> {
    let defaults = serde_json::to_value(RunConfig::default())?;
    let mut merged = defaults.clone();
    if let Some(path) = file {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let user: Value = serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))?;
        check_keys(&user, &defaults, "").with_context(|| format!("{}", path.display()))?;
        merge(&mut merged, user);
    }
    for (key, raw) in settings {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut patch = value;
        for part in key.split('.').rev() {
            let mut m = Map::new();
            m.insert(part.to_owned(), patch);
            patch = Value::Object(m);
        }
        check_keys(&patch, &defaults, "")?;
        merge(&mut merged, patch);
    }
    let cfg: RunConfig = serde_json::from_value(merged).context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_keys(user: &Value, reference: &Value, prefix: &str) -> Result<(), ConfigError> {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return Ok(());
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            None => return Err(ConfigError::new(&path, "is not a known setting")),
            Some(sub) => check_keys(v, sub, &path)?,
        }
    }
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn dataset(cfg: &RunConfig) -> Result<Dataset> {
    let manifest = cfg.manifest()?;
    Ok(load_dataset(manifest, cfg.source.as_deref(), cfg.pipeline.joint_count)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

// ---------------------------------------------------------------- annotate

#[derive(Debug, Clone)]
pub struct AnnotateOutput {
    pub annotations: PathBuf,
    pub summary_path: PathBuf,
    pub summary: SequenceSummary,
}

pub fn cmd_annotate(cfg: &RunConfig) -> Result<AnnotateOutput> {
    let data = dataset(cfg)?;
    log::info!(
        "annotating {} frames of {:?} with {}-{}",
        data.frames.len(),
        data.manifest.sequence,
        mode_label(cfg.pipeline.search.mode),
        cfg.pipeline.search.criterion
    );
    let result = annotate_sequence(&cfg.pipeline, &data.cameras, &data.frames)
        .with_context(|| format!("annotating sequence {:?}", data.manifest.sequence))?;
    let out = cfg.out_dir("out");
    create_dir(&out)?;
    let ids: Vec<String> = data.cameras.iter().map(|c| c.id.clone()).collect();
    let annotations = out.join(ANNOTATIONS_FILE);
    write_annotations(&result.annotations, &ids, &annotations, cfg.precision)?;
    let summary_path = out.join(SUMMARY_FILE);
    write(&summary_path, &(serde_json::to_string_pretty(&result.summary)? + "\n"))?;
    Ok(AnnotateOutput {
        annotations,
        summary_path,
        summary: result.summary,
    })
}

// ---------------------------------------------------------------- evaluate

pub fn cmd_evaluate(pred: &Path, gt: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let gt = load_ground_truth(gt)?;
    let pred = load_annotations(pred, None)?;
    let report = evaluate(&gt, &pred, &cfg.metrics)?;
    if let Some(out) = &cfg.out {
        let path = if out.extension().is_some() { out.clone() } else { out.join(REPORT_FILE) };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write(&path, &report_to_string(&report))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------- synth

/// Renders a synthetic sequence into a dataset directory and returns the
/// manifest path.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = SceneSpec {
        seed: cfg.seed,
        ..cfg.scene.clone()
    };
    let scene = generate_scene(&spec)?;
    let frames = render_detections(&scene.ground_truth, &scene.cameras, &cfg.noise, cfg.seed, spec.fps)?;
    let dir = cfg.out_dir("synth");
    let name = format!("synth-{:?}-seed{}", spec.trajectory, cfg.seed).to_lowercase();
    let manifest = write_dataset(&dir, &name, spec.fps, &scene.cameras, &frames, Some(&scene.ground_truth))?;
    log::info!("wrote {} frames to {}", frames.len(), dir.display());
    Ok(manifest)
}

// ---------------------------------------------------------------- ablate

/// The six search configurations, in table order.
pub const ABLATION_GRID: [(MatchingMode, Criterion); 6] = [
    (MatchingMode::Dm, Criterion::Ns),
    (MatchingMode::Dm, Criterion::Cd),
    (MatchingMode::Dm, Criterion::Repr),
    (MatchingMode::Tm, Criterion::Ns),
    (MatchingMode::Tm, Criterion::Cd),
    (MatchingMode::Tm, Criterion::Repr),
];

pub fn mode_label(m: MatchingMode) -> &'static str {
    match m {
        MatchingMode::Dm => "DM",
        MatchingMode::Tm => "TM",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub mode: MatchingMode,
    pub criterion: Criterion,
    pub report: EvalReport,
}

impl AblationRow {
    pub fn label(&self) -> String {
        format!("{}-{}", mode_label(self.mode), self.criterion)
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutput {
    pub rows: Vec<AblationRow>,
    pub text: String,
    pub csv: String,
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationOutput> {
    let data = dataset(cfg)?;
    let Some(gt) = data.ground_truth.as_deref() else {
        return Err(ConfigError::new("ground_truth", "the manifest lists no ground truth; ablation needs it").into());
    };
    let rows: Vec<AblationRow> = ABLATION_GRID
        .par_iter()
        .map(|&(mode, criterion)| -> Result<AblationRow> {
            let mut pipeline = cfg.pipeline.clone();
            pipeline.search.mode = mode;
            pipeline.search.criterion = criterion;
            let result = annotate_sequence(&pipeline, &data.cameras, &data.frames)?;
            let report = evaluate(gt, &result.annotations, &cfg.metrics)?;
            log::info!("{}-{criterion}: {:.4} mm", mode_label(mode), report.mpjpe_mm);
            Ok(AblationRow { mode, criterion, report })
        })
        .collect::<Result<_>>()?;
    let text = ablation_text(&rows);
    let csv = ablation_csv(&rows);
    let out = cfg.out_dir("out");
    create_dir(&out)?;
    write(&out.join(ABLATION_TEXT_FILE), &text)?;
    write(&out.join(ABLATION_CSV_FILE), &csv)?;
    Ok(AblationOutput { rows, text, csv })
}

pub fn ablation_text(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<8} {:>12} {:>8} {:>8} {:>14}\n",
        "config", "MPJPE (mm)", "AUC", "skipped", "track-acc@1cm"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>12.4} {:>8.4} {:>8} {:>14.4}",
            r.label(),
            r.report.mpjpe_mm,
            r.report.pck_auc,
            r.report.skipped_frames,
            r.report.track_acc
        );
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("config,mode,criterion,mpjpe_mm,pck_auc,skipped_frames,track_acc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.label(),
            mode_label(r.mode),
            r.criterion,
            r.report.mpjpe_mm,
            r.report.pck_auc,
            r.report.skipped_frames,
            r.report.track_acc
        );
    }
    s
}

// ---------------------------------------------------------------- serve

/// Binds `addr`, optionally opens a session on the configured manifest, and
/// serves until the process is terminated. `on_ready` receives the bound
/// address and the initial session id.
pub fn cmd_serve(cfg: &RunConfig, addr: &str, on_ready: impl FnOnce(std::net::SocketAddr, Option<String>)) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("cannot start the async runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("cannot listen on {addr}"))?;
        let app = AppState::new();
        let session = match &cfg.manifest {
            Some(m) => Some(app.create_session(m, cfg.session_config())?),
            None => None,
        };
        on_ready(listener.local_addr()?, session);
        handlift_service::serve(listener, app).await?;
        bail!("server stopped unexpectedly")
    })
}
