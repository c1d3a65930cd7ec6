//! Region-growing search over the clustering threshold.
//!
//! Candidate thresholds grow outward from the previously accepted one. Three
//! criteria pick the per-frame result:
//!
//! * `NS` clusters once at the default threshold.
//! * `CD` walks the candidates in order and stops at the first threshold that
//!   yields a valid cluster for every expected hand.
//! * `REPR` pools the valid clusters of every candidate and, per track, picks
//!   the one whose fused pose has the smallest summed squared reprojection
//!   error against its own detections.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::clustering::{
    associate_tracks, cluster_with_distances, fuse_cluster, pose_distance, Cluster,
    ClusterConstraints, DetectionRef, DistanceMatrix, HandEstimate, HandStatus, MatchingMode,
    Proposal3D, TrackId, TrackState,
};
use crate::geometry::{reprojection_error_with_cutoff, CameraModel, Detection2D, DEFAULT_CONF_CUTOFF};

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration: `{field}` {reason}")]
pub struct ConfigError {
    pub field: String,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Criterion {
    #[serde(alias = "ns")]
    Ns,
    #[serde(alias = "cd")]
    Cd,
    #[serde(alias = "repr", alias = "Repr")]
    Repr,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::Ns, Criterion::Cd, Criterion::Repr];

    pub fn label(self) -> &'static str {
        match self {
            Criterion::Ns => "NS",
            Criterion::Cd => "CD",
            Criterion::Repr => "Repr",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Number of hands the CD criterion must cover. `Auto` uses the live track
/// count, or on a cold start the number of DM-valid clusters at the default
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpectedHands {
    #[default]
    Auto,
    Count(usize),
}

impl Serialize for ExpectedHands {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ExpectedHands::Auto => s.serialize_str("AUTO"),
            ExpectedHands::Count(n) => s.serialize_u64(*n as u64),
        }
    }
}

impl<'de> Deserialize<'de> for ExpectedHands {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(usize),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(ExpectedHands::Count(n)),
            Raw::S(s) if s.eq_ignore_ascii_case("auto") => Ok(ExpectedHands::Auto),
            Raw::S(s) => s
                .parse()
                .map(ExpectedHands::Count)
                .map_err(|_| serde::de::Error::custom(format!("expected AUTO or a count, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub mode: MatchingMode,
    pub criterion: Criterion,
    pub delta_default: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub step: f64,
    pub max_offsets: usize,
    /// Minimum proposals for a cluster to enter the REPR pool.
    pub cluster_size_min: usize,
    pub expected_hands: ExpectedHands,
    /// Association radius (m) between clusters and tracks in DM mode. In TM
    /// mode the searched threshold is the association radius.
    pub association_gate: f64,
    /// New tracks are not spawned closer than this (m) to a live track.
    pub spawn_separation: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            mode: MatchingMode::Tm,
            criterion: Criterion::Repr,
            delta_default: 0.05,
            delta_min: 0.005,
            delta_max: 0.25,
            step: 0.005,
            max_offsets: 20,
            cluster_size_min: 3,
            expected_hands: ExpectedHands::Auto,
            association_gate: 0.25,
            spawn_separation: 0.1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ConfigError::new(field, format!("must be positive, got {v}")))
            }
        };
        positive("delta_min", self.delta_min)?;
        positive("delta_max", self.delta_max)?;
        positive("delta_default", self.delta_default)?;
        positive("step", self.step)?;
        positive("association_gate", self.association_gate)?;
        if !(self.spawn_separation.is_finite() && self.spawn_separation >= 0.0) {
            return Err(ConfigError::new("spawn_separation", "must be non-negative"));
        }
        if self.delta_min > self.delta_max {
            return Err(ConfigError::new("delta_min", "must not exceed delta_max"));
        }
        if !(self.delta_min..=self.delta_max).contains(&self.delta_default) {
            return Err(ConfigError::new(
                "delta_default",
                format!("must lie in [{}, {}]", self.delta_min, self.delta_max),
            ));
        }
        if self.cluster_size_min == 0 {
            return Err(ConfigError::new("cluster_size_min", "must be at least 1"));
        }
        Ok(())
    }

    pub fn clamp(&self, delta: f64) -> f64 {
        delta.clamp(self.delta_min, self.delta_max)
    }
}

fn nano(x: f64) -> i64 {
    (x * 1e9).round() as i64
}

/// Thresholds to try, ordered by distance from `last_accepted` (clamped into
/// range), smaller first at equal distance, without duplicates.
pub fn candidate_thresholds(last_accepted: f64, config: &SearchConfig) -> Vec<f64> {
    let center = config.clamp(last_accepted);
    let mut values = Vec::with_capacity(2 * config.max_offsets + 1);
    values.push(center);
    for k in 1..=config.max_offsets {
        let off = k as f64 * config.step;
        values.push(config.clamp(center - off));
        values.push(config.clamp(center + off));
    }
    values.sort_by_key(|&v| (nano((v - center).abs()), nano(v)));
    values.dedup_by_key(|v| nano(*v));
    values
}

/// Everything the criteria need about one frame. Proposals and their
/// distance matrix are computed once and shared by every candidate threshold.
pub struct FrameContext<'a> {
    pub cameras: &'a [CameraModel],
    pub detections: &'a [Vec<Detection2D>],
    pub proposals: Vec<Proposal3D>,
    pub distances: DistanceMatrix,
    pub tracks: &'a [TrackState],
    pub constraints: ClusterConstraints,
    pub conf_cutoff: f64,
    fusion_cache: RefCell<BTreeMap<(Vec<DetectionRef>, Option<TrackId>), Option<HandEstimate>>>,
}

impl<'a> FrameContext<'a> {
    pub fn new(
        cameras: &'a [CameraModel],
        detections: &'a [Vec<Detection2D>],
        tracks: &'a [TrackState],
        proposals: Vec<Proposal3D>,
    ) -> Self {
        let distances = DistanceMatrix::new(&proposals);
        Self {
            cameras,
            detections,
            proposals,
            distances,
            tracks,
            constraints: ClusterConstraints::default(),
            conf_cutoff: DEFAULT_CONF_CUTOFF,
            fusion_cache: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn with_constraints(mut self, constraints: ClusterConstraints) -> Self {
        self.constraints = constraints;
        self
    }

    pub fn with_conf_cutoff(mut self, cutoff: f64) -> Self {
        self.conf_cutoff = cutoff;
        self
    }

    pub fn track(&self, id: TrackId) -> Option<&TrackState> {
        self.tracks.iter().find(|t| t.track_id == id)
    }

    /// Fused estimate for a cluster, memoized by detection set and track.
    pub fn fuse(&self, cluster: &Cluster, track: Option<TrackId>) -> Option<HandEstimate> {
        let key = (cluster.detections.iter().copied().collect::<Vec<_>>(), track);
        if let Some(hit) = self.fusion_cache.borrow().get(&key) {
            return hit.clone();
        }
        let previous = track.and_then(|t| self.track(t)).map(|t| &t.last_pose);
        let fused = fuse_cluster(
            cluster,
            self.cameras,
            self.detections,
            track.unwrap_or(0),
            previous,
            self.conf_cutoff,
        )
        .ok();
        self.fusion_cache.borrow_mut().insert(key, fused.clone());
        fused
    }

    /// Summed squared reprojection error of a fused pose against the
    /// cluster's own detections.
    pub fn cluster_cost(&self, cluster: &Cluster, estimate: &HandEstimate) -> f64 {
        let matched: Vec<(&CameraModel, &Detection2D)> = cluster
            .detections
            .iter()
            .map(|r| (&self.cameras[r.camera], &self.detections[r.camera][r.index]))
            .collect();
        reprojection_error_with_cutoff(&estimate.pose, &matched, self.conf_cutoff)
    }
}

/// Clustering and association at one threshold.
#[derive(Debug, Clone)]
pub struct ThresholdOutcome {
    pub delta: f64,
    pub clusters: Vec<Cluster>,
    /// Track -> index of its valid assigned cluster.
    pub covered: BTreeMap<TrackId, usize>,
    /// Indices of unassigned DM-valid clusters far enough from every track.
    pub spawns: Vec<usize>,
}

impl ThresholdOutcome {
    pub fn coverage(&self) -> usize {
        self.covered.len() + self.spawns.len()
    }
}

pub fn evaluate_threshold(ctx: &FrameContext<'_>, delta: f64, config: &SearchConfig) -> ThresholdOutcome {
    evaluate_threshold_in_mode(ctx, delta, config, config.mode)
}

fn evaluate_threshold_in_mode(
    ctx: &FrameContext<'_>,
    delta: f64,
    config: &SearchConfig,
    mode: MatchingMode,
) -> ThresholdOutcome {
    let mut clusters = cluster_with_distances(&ctx.proposals, &ctx.distances, delta, &ctx.constraints);
    let gate = match mode {
        MatchingMode::Tm => delta,
        MatchingMode::Dm => config.association_gate,
    };
    let assoc = associate_tracks(&mut clusters, &ctx.proposals, ctx.tracks, gate, mode);
    let covered = clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_valid(mode) || c.forced_track.is_some())
        .filter_map(|(i, c)| c.seed_track.map(|t| (t, i)))
        .collect();
    let spawns = assoc
        .spawn_candidates
        .iter()
        .copied()
        .filter(|&i| {
            let mean = clusters[i].mean_pose(&ctx.proposals);
            ctx.tracks.iter().all(|t| {
                pose_distance(&mean, &t.last_pose).map_or(true, |d| d >= config.spawn_separation)
            })
        })
        .collect();
    ThresholdOutcome {
        delta,
        clusters,
        covered,
        spawns,
    }
}

/// A cluster chosen for a hand together with its fused estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedCluster {
    pub threshold: f64,
    pub cluster: Cluster,
    pub estimate: HandEstimate,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSelection {
    pub accepted_threshold: f64,
    /// `None` marks a miss.
    pub per_hand: BTreeMap<TrackId, Option<SelectedCluster>>,
    pub criterion_cost: BTreeMap<TrackId, f64>,
    pub searched_offsets: usize,
    /// Clusters that should start new tracks.
    pub spawns: Vec<SelectedCluster>,
}

impl FrameSelection {
    pub fn misses(&self) -> impl Iterator<Item = TrackId> + '_ {
        self.per_hand.iter().filter(|(_, s)| s.is_none()).map(|(t, _)| *t)
    }

    pub fn covered(&self) -> usize {
        self.per_hand.values().filter(|s| s.is_some()).count()
    }
}

fn selected(ctx: &FrameContext<'_>, delta: f64, cluster: &Cluster, track: Option<TrackId>) -> Option<SelectedCluster> {
    let estimate = ctx.fuse(cluster, track)?;
    let cost = ctx.cluster_cost(cluster, &estimate);
    Some(SelectedCluster {
        threshold: delta,
        cluster: cluster.clone(),
        estimate,
        cost,
    })
}

fn selection_from_outcome(ctx: &FrameContext<'_>, outcome: &ThresholdOutcome, searched_offsets: usize) -> FrameSelection {
    let mut per_hand = BTreeMap::new();
    let mut criterion_cost = BTreeMap::new();
    for t in ctx.tracks {
        let choice = outcome
            .covered
            .get(&t.track_id)
            .and_then(|&ci| selected(ctx, outcome.delta, &outcome.clusters[ci], Some(t.track_id)));
        if let Some(c) = &choice {
            criterion_cost.insert(t.track_id, c.cost);
        }
        per_hand.insert(t.track_id, choice);
    }
    let spawns = outcome
        .spawns
        .iter()
        .filter_map(|&ci| selected(ctx, outcome.delta, &outcome.clusters[ci], None))
        .collect();
    FrameSelection {
        accepted_threshold: outcome.delta,
        per_hand,
        criterion_cost,
        searched_offsets,
        spawns,
    }
}

/// Cold start: DM at the default threshold; every spawnable cluster starts a
/// track.
pub fn select_bootstrap(ctx: &FrameContext<'_>, config: &SearchConfig) -> FrameSelection {
    let outcome = evaluate_threshold_in_mode(ctx, config.delta_default, config, MatchingMode::Dm);
    selection_from_outcome(ctx, &outcome, 0)
}

/// No search: cluster once at the default threshold.
pub fn select_ns(ctx: &FrameContext<'_>, config: &SearchConfig) -> FrameSelection {
    let outcome = evaluate_threshold(ctx, config.delta_default, config);
    selection_from_outcome(ctx, &outcome, 0)
}

fn expected_hands(ctx: &FrameContext<'_>, config: &SearchConfig) -> usize {
    match config.expected_hands {
        ExpectedHands::Count(n) => n,
        ExpectedHands::Auto if !ctx.tracks.is_empty() => ctx.tracks.len(),
        ExpectedHands::Auto => {
            let o = evaluate_threshold_in_mode(ctx, config.delta_default, config, MatchingMode::Dm);
            o.clusters.iter().filter(|c| c.is_dm_valid()).count()
        }
    }
}

/// Closest displacement: first candidate that covers every expected hand,
/// else the candidate with the largest coverage (smallest threshold on ties).
pub fn select_cd(ctx: &FrameContext<'_>, last_accepted: f64, config: &SearchConfig) -> FrameSelection {
    let expected = expected_hands(ctx, config);
    let candidates = candidate_thresholds(last_accepted, config);
    let mut best: Option<ThresholdOutcome> = None;
    for (k, &delta) in candidates.iter().enumerate() {
        let outcome = evaluate_threshold(ctx, delta, config);
        if outcome.covered.len() == ctx.tracks.len() && outcome.coverage() >= expected {
            return selection_from_outcome(ctx, &outcome, k);
        }
        let better = match &best {
            None => true,
            Some(b) => {
                outcome.coverage() > b.coverage()
                    || (outcome.coverage() == b.coverage() && outcome.delta < b.delta)
            }
        };
        if better {
            best = Some(outcome);
        }
    }
    match best {
        Some(b) => selection_from_outcome(ctx, &b, candidates.len().saturating_sub(1)),
        None => unreachable!("candidate list always holds the center"),
    }
}

/// One pooled (threshold, cluster) entry associated to a track.
struct PoolEntry {
    order: usize,
    threshold: f64,
    cluster: Cluster,
    track: TrackId,
}

/// Reprojection-error minimizer over the pooled clusters of every candidate.
///
/// Per track the pool holds the valid clusters assigned to it at any
/// candidate, deduplicated by detection set. Clusters with at least
/// `cluster_size_min` proposals are preferred; smaller ones are only used
/// when a track has no large cluster. When two tracks' picks share a
/// detection, the track with the lower cost keeps it and the other falls
/// back to its next best disjoint option.
pub fn select_repr(ctx: &FrameContext<'_>, last_accepted: f64, config: &SearchConfig) -> FrameSelection {
    let candidates = candidate_thresholds(last_accepted, config);
    let outcomes: Vec<ThresholdOutcome> = candidates
        .iter()
        .map(|&d| evaluate_threshold(ctx, d, config))
        .collect();

    let mut pool: BTreeMap<TrackId, Vec<PoolEntry>> = BTreeMap::new();
    let mut order = 0;
    for outcome in &outcomes {
        for (&track, &ci) in &outcome.covered {
            pool.entry(track).or_default().push(PoolEntry {
                order,
                threshold: outcome.delta,
                cluster: outcome.clusters[ci].clone(),
                track,
            });
            order += 1;
        }
    }

    // ranked options per track, cheapest first
    let mut ranked: BTreeMap<TrackId, Vec<(f64, usize, SelectedCluster)>> = BTreeMap::new();
    for (track, entries) in &pool {
        let pinned = entries.iter().any(|e| e.cluster.forced_track == Some(*track));
        let eligible: Vec<&PoolEntry> = entries
            .iter()
            .filter(|e| !pinned || e.cluster.forced_track == Some(*track))
            .collect();
        let large: Vec<&PoolEntry> = eligible
            .iter()
            .copied()
            .filter(|e| e.cluster.proposals.len() >= config.cluster_size_min)
            .collect();
        let tier = if large.is_empty() { eligible } else { large };
        // the same detection set fuses to the same pose; keep its first entry
        let mut seen: BTreeSet<&BTreeSet<DetectionRef>> = BTreeSet::new();
        let mut options: Vec<(f64, usize, SelectedCluster)> = tier
            .into_iter()
            .filter(|e| seen.insert(&e.cluster.detections))
            .filter_map(|e| {
                selected(ctx, e.threshold, &e.cluster, Some(e.track)).map(|s| (s.cost, e.order, s))
            })
            .collect();
        options.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ranked.insert(*track, options);
    }

    let mut track_order: Vec<TrackId> = ranked.keys().copied().collect();
    track_order.sort_by(|a, b| {
        let ca = ranked[a].first().map_or(f64::INFINITY, |o| o.0);
        let cb = ranked[b].first().map_or(f64::INFINITY, |o| o.0);
        ca.total_cmp(&cb).then(a.cmp(b))
    });
    let mut claimed: BTreeSet<DetectionRef> = BTreeSet::new();
    let mut per_hand: BTreeMap<TrackId, Option<SelectedCluster>> =
        ctx.tracks.iter().map(|t| (t.track_id, None)).collect();
    let mut criterion_cost = BTreeMap::new();
    for track in track_order {
        let pick = ranked[&track]
            .iter()
            .find(|o| o.2.cluster.detections.is_disjoint(&claimed));
        if let Some((cost, _, sel)) = pick {
            claimed.extend(sel.cluster.detections.iter().copied());
            criterion_cost.insert(track, *cost);
            per_hand.insert(track, Some(sel.clone()));
        }
    }

    // majority threshold among the chosen clusters, smallest on ties
    let mut votes: BTreeMap<i64, (usize, f64)> = BTreeMap::new();
    for sel in per_hand.values().flatten() {
        let v = votes.entry(nano(sel.threshold)).or_insert((0, sel.threshold));
        v.0 += 1;
    }
    let accepted_threshold = votes
        .values()
        .fold(None::<(usize, f64)>, |best, &(n, d)| match best {
            Some((bn, _)) if bn >= n => best,
            _ => Some((n, d)),
        })
        .map(|(_, d)| d)
        .unwrap_or_else(|| config.clamp(last_accepted));

    let accepted_outcome = outcomes
        .iter()
        .find(|o| nano(o.delta) == nano(accepted_threshold));
    let spawns = accepted_outcome
        .map(|o| {
            o.spawns
                .iter()
                .filter(|&&ci| o.clusters[ci].detections.is_disjoint(&claimed))
                .filter_map(|&ci| selected(ctx, o.delta, &o.clusters[ci], None))
                .collect()
        })
        .unwrap_or_default();

    FrameSelection {
        accepted_threshold,
        per_hand,
        criterion_cost,
        searched_offsets: candidates.len().saturating_sub(1),
        spawns,
    }
}

/// Runs the configured criterion.
pub fn select(ctx: &FrameContext<'_>, last_accepted: f64, config: &SearchConfig) -> FrameSelection {
    match config.criterion {
        Criterion::Ns => select_ns(ctx, config),
        Criterion::Cd => select_cd(ctx, last_accepted, config),
        Criterion::Repr => select_repr(ctx, last_accepted, config),
    }
}

/// Per-track outcome after the fallback rule is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct FilledSelection {
    /// One estimate per surviving track, ordered by track id.
    pub estimates: Vec<HandEstimate>,
    pub skipped: BTreeSet<TrackId>,
    pub retired: BTreeSet<TrackId>,
}

/// Fills every missed track with its last pose. Tracks that would exceed
/// `max_coast` consecutive misses are retired instead.
pub fn fallback(tracks: &[TrackState], selection: &FrameSelection, max_coast: u32) -> FilledSelection {
    let mut out = FilledSelection {
        estimates: Vec::new(),
        skipped: BTreeSet::new(),
        retired: BTreeSet::new(),
    };
    let mut sorted: Vec<&TrackState> = tracks.iter().collect();
    sorted.sort_by_key(|t| t.track_id);
    for t in sorted {
        match selection.per_hand.get(&t.track_id) {
            Some(Some(sel)) => {
                let mut est = sel.estimate.clone();
                est.track_id = t.track_id;
                out.estimates.push(est);
            }
            _ if t.frames_since_update + 1 > max_coast => {
                out.retired.insert(t.track_id);
            }
            _ => {
                out.skipped.insert(t.track_id);
                out.estimates.push(HandEstimate {
                    track_id: t.track_id,
                    pose: t.last_pose.clone(),
                    side: t.side,
                    side_confidence: t.side_confidence,
                    contributing: BTreeSet::new(),
                    status: HandStatus::CarriedForward,
                    interpolated_joints: BTreeSet::new(),
                });
            }
        }
    }
    out
}
