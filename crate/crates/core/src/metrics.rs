//! Evaluation against ground truth: MPJPE, PCK-AUC, keypoint tracking
//! accuracy and skipped-frame counts.
//!
//! Predicted and ground-truth hands are put in correspondence per frame by a
//! minimum-cost assignment on mean joint distance. Every hand present in a
//! predicted frame is evaluated, including carried-forward ones.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::min_cost_assignment;
use crate::clustering::{pose_distance, HandEstimate, HandStatus, TrackId};
use crate::geometry::Pose3D;
use crate::pipeline::FrameAnnotation;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("nothing to evaluate: {0}")]
    EmptyEvaluation(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    /// Hands farther apart than this (m) are never matched.
    pub match_gate: f64,
    pub pck_max_mm: f64,
    pub pck_steps: usize,
    /// Keypoint tracking gate (m).
    pub track_tau: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            match_gate: 0.25,
            pck_max_mm: 50.0,
            pck_steps: 100,
            track_tau: 0.01,
        }
    }
}

/// A ground-truth hand matched to a predicted hand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandMatch {
    pub gt: usize,
    pub pred: usize,
    pub distance: f64,
}

/// One-to-one matching minimizing the summed mean joint distance. Pairs
/// farther apart than `gate` stay unmatched.
pub fn match_hands(gt: &[HandEstimate], pred: &[HandEstimate], gate: f64) -> Vec<HandMatch> {
    let costs: Vec<Vec<Option<f64>>> = gt
        .iter()
        .map(|g| {
            pred.iter()
                .map(|p| pose_distance(&g.pose, &p.pose).ok().filter(|d| *d <= gate))
                .collect()
        })
        .collect();
    min_cost_assignment(&costs)
        .into_iter()
        .enumerate()
        .filter_map(|(gi, pi)| {
            pi.and_then(|pi| costs[gi][pi].map(|d| HandMatch { gt: gi, pred: pi, distance: d }))
        })
        .collect()
}

fn joint_errors<'a>(gt: &'a Pose3D, pred: &'a Pose3D) -> impl Iterator<Item = f64> + 'a {
    gt.joints
        .iter()
        .zip(&pred.joints)
        .filter(|(a, b)| a.iter().chain(b.iter()).all(|v| v.is_finite()))
        .map(|(a, b)| (a - b).norm())
}

fn frames_by_index(seq: &[FrameAnnotation]) -> BTreeMap<u64, &FrameAnnotation> {
    seq.iter().map(|f| (f.frame_index, f)).collect()
}

/// Every matched (gt hand, pred hand) pair over the sequence, per frame.
struct Matched<'a> {
    frame: u64,
    gt: &'a HandEstimate,
    pred: &'a HandEstimate,
}

fn matched_pairs<'a>(gt: &'a [FrameAnnotation], pred: &'a [FrameAnnotation], gate: f64) -> Vec<Matched<'a>> {
    let preds = frames_by_index(pred);
    let mut out = Vec::new();
    for g in gt {
        let Some(p) = preds.get(&g.frame_index) else {
            continue;
        };
        for m in match_hands(&g.hands, &p.hands, gate) {
            out.push(Matched {
                frame: g.frame_index,
                gt: &g.hands[m.gt],
                pred: &p.hands[m.pred],
            });
        }
    }
    out
}

fn all_errors_m(gt: &[FrameAnnotation], pred: &[FrameAnnotation], gate: f64) -> Vec<f64> {
    matched_pairs(gt, pred, gate)
        .iter()
        .flat_map(|m| joint_errors(&m.gt.pose, &m.pred.pose))
        .collect()
}

/// Mean per-joint position error in millimeters, absolute world frame.
pub fn mpjpe(gt: &[FrameAnnotation], pred: &[FrameAnnotation], config: &MetricsConfig) -> Result<f64, MetricsError> {
    let errors = all_errors_m(gt, pred, config.match_gate);
    if errors.is_empty() {
        return Err(MetricsError::EmptyEvaluation("no matched joints"));
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64 * 1000.0)
}

/// Thresholds (mm) of the PCK curve: `pck_steps` uniform values in
/// `(0, pck_max_mm]`.
pub fn pck_thresholds_mm(config: &MetricsConfig) -> Vec<f64> {
    (1..=config.pck_steps)
        .map(|k| config.pck_max_mm * k as f64 / config.pck_steps as f64)
        .collect()
}

/// PCK-AUC computed from a list of joint errors in millimeters.
pub fn pck_auc_from_errors(errors_mm: &[f64], config: &MetricsConfig) -> Result<f64, MetricsError> {
    if errors_mm.is_empty() || config.pck_steps == 0 {
        return Err(MetricsError::EmptyEvaluation("no matched joints"));
    }
    let thresholds = pck_thresholds_mm(config);
    let total: f64 = thresholds
        .iter()
        .map(|t| errors_mm.iter().filter(|e| **e <= *t).count() as f64 / errors_mm.len() as f64)
        .sum();
    Ok(total / thresholds.len() as f64)
}

pub fn pck_auc(gt: &[FrameAnnotation], pred: &[FrameAnnotation], config: &MetricsConfig) -> Result<f64, MetricsError> {
    let errors: Vec<f64> = all_errors_m(gt, pred, config.match_gate)
        .into_iter()
        .map(|e| e * 1000.0)
        .collect();
    pck_auc_from_errors(&errors, config)
}

/// Error tallies behind [`tracking_accuracy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MotaCounts {
    pub gt_keypoints: usize,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub id_switches: usize,
}

impl MotaCounts {
    pub fn accuracy(&self) -> f64 {
        if self.gt_keypoints == 0 {
            return 0.0;
        }
        let errors = (self.false_negatives + self.false_positives + self.id_switches) as f64;
        (1.0 - errors / self.gt_keypoints as f64).clamp(0.0, 1.0)
    }
}

fn finite_joints(p: &Pose3D) -> usize {
    (0..p.joint_count()).filter(|&j| p.is_joint_finite(j)).count()
}

/// Keypoint-level MOTA tallies.
///
/// * a matched joint within `tau` is a true positive, otherwise a miss;
/// * every joint of an unmatched ground-truth hand is a miss;
/// * every joint of an unmatched predicted hand is a false positive;
/// * when a ground-truth hand's matched track id differs from the one it had
///   at its previous matched frame, each of its joints counts one switch.
pub fn mota_counts(gt: &[FrameAnnotation], pred: &[FrameAnnotation], config: &MetricsConfig) -> MotaCounts {
    let preds = frames_by_index(pred);
    let mut counts = MotaCounts::default();
    let mut last_id: BTreeMap<TrackId, TrackId> = BTreeMap::new();
    let gt_frames: BTreeSet<u64> = gt.iter().map(|g| g.frame_index).collect();
    for g in gt {
        let pred_hands: &[HandEstimate] = preds.get(&g.frame_index).map_or(&[], |p| &p.hands);
        let matches = match_hands(&g.hands, pred_hands, config.match_gate);
        let mut gt_matched = vec![None; g.hands.len()];
        let mut pred_matched = vec![false; pred_hands.len()];
        for m in &matches {
            gt_matched[m.gt] = Some(m.pred);
            pred_matched[m.pred] = true;
        }
        for (gi, gh) in g.hands.iter().enumerate() {
            let n = finite_joints(&gh.pose);
            counts.gt_keypoints += n;
            match gt_matched[gi] {
                None => counts.false_negatives += n,
                Some(pi) => {
                    let ph = &pred_hands[pi];
                    let within = joint_errors(&gh.pose, &ph.pose).filter(|e| *e <= config.track_tau).count();
                    counts.true_positives += within;
                    counts.false_negatives += n - within;
                    if let Some(prev) = last_id.insert(gh.track_id, ph.track_id) {
                        if prev != ph.track_id {
                            counts.id_switches += n;
                        }
                    }
                }
            }
        }
        for (pi, ph) in pred_hands.iter().enumerate() {
            if !pred_matched[pi] {
                counts.false_positives += finite_joints(&ph.pose);
            }
        }
    }
    // predicted frames with no ground-truth counterpart are all false positives
    for p in pred.iter().filter(|p| !gt_frames.contains(&p.frame_index)) {
        counts.false_positives += p.hands.iter().map(|h| finite_joints(&h.pose)).sum::<usize>();
    }
    counts
}

/// Keypoint tracking accuracy, `1 - (FN + FP + IDSW) / GT keypoints`,
/// clamped to `[0, 1]`.
pub fn tracking_accuracy(gt: &[FrameAnnotation], pred: &[FrameAnnotation], config: &MetricsConfig) -> Result<f64, MetricsError> {
    let counts = mota_counts(gt, pred, config);
    if counts.gt_keypoints == 0 {
        return Err(MetricsError::EmptyEvaluation("no ground-truth keypoints"));
    }
    Ok(counts.accuracy())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SkippedFrames {
    pub frames: usize,
    pub per_track: BTreeMap<TrackId, usize>,
}

/// Frames in which some track was carried forward, or missing between its
/// first and last appearance.
pub fn skipped_frames(pred: &[FrameAnnotation]) -> SkippedFrames {
    let mut span: BTreeMap<TrackId, (u64, u64)> = BTreeMap::new();
    for f in pred {
        for h in &f.hands {
            let e = span.entry(h.track_id).or_insert((f.frame_index, f.frame_index));
            e.0 = e.0.min(f.frame_index);
            e.1 = e.1.max(f.frame_index);
        }
    }
    let mut out = SkippedFrames {
        frames: 0,
        per_track: span.keys().map(|t| (*t, 0)).collect(),
    };
    for f in pred {
        let mut skipped_here = false;
        for (t, (first, last)) in &span {
            if f.frame_index < *first || f.frame_index > *last {
                continue;
            }
            let skipped = match f.hand(*t) {
                None => true,
                Some(h) => h.status == HandStatus::CarriedForward || f.skipped.contains(t),
            };
            if skipped {
                skipped_here = true;
                *out.per_track.get_mut(t).expect("span key") += 1;
            }
        }
        if skipped_here {
            out.frames += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackBreakdown {
    pub matched_frames: usize,
    pub mpjpe_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub pck_auc: f64,
    pub track_acc: f64,
    pub skipped_frames: usize,
    pub matched_pairs: usize,
    /// Keyed by ground-truth track id.
    pub per_track: BTreeMap<TrackId, TrackBreakdown>,
    /// Keyed by predicted track id.
    pub per_track_skipped: BTreeMap<TrackId, usize>,
}

pub fn evaluate(gt: &[FrameAnnotation], pred: &[FrameAnnotation], config: &MetricsConfig) -> Result<EvalReport, MetricsError> {
    let pairs = matched_pairs(gt, pred, config.match_gate);
    let mut errors_mm = Vec::new();
    let mut per_track: BTreeMap<TrackId, (BTreeSet<u64>, f64, usize)> = BTreeMap::new();
    for m in &pairs {
        let e = per_track.entry(m.gt.track_id).or_default();
        e.0.insert(m.frame);
        for d in joint_errors(&m.gt.pose, &m.pred.pose) {
            errors_mm.push(d * 1000.0);
            e.1 += d * 1000.0;
            e.2 += 1;
        }
    }
    if errors_mm.is_empty() {
        return Err(MetricsError::EmptyEvaluation("no matched joints"));
    }
    let mpjpe_mm = errors_mm.iter().sum::<f64>() / errors_mm.len() as f64;
    let skipped = skipped_frames(pred);
    Ok(EvalReport {
        mpjpe_mm,
        pck_auc: pck_auc_from_errors(&errors_mm, config)?,
        track_acc: tracking_accuracy(gt, pred, config)?,
        skipped_frames: skipped.frames,
        matched_pairs: pairs.len(),
        per_track: per_track
            .into_iter()
            .map(|(t, (frames, sum, n))| {
                let mpjpe_mm = if n == 0 { 0.0 } else { sum / n as f64 };
                (
                    t,
                    TrackBreakdown {
                        matched_frames: frames.len(),
                        mpjpe_mm,
                    },
                )
            })
            .collect(),
        per_track_skipped: skipped.per_track,
    })
}
