//! Dynamic matching over the space of pairwise-triangulated hand proposals.
//!
//! Every cross-camera pair of detections is lifted to a 3D proposal. Proposals
//! closer than a threshold are linked, and each connected component becomes a
//! candidate hand once it is made conflict-free (one detection per camera).

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Point2, Point3, Vector3};
use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::min_cost_assignment;
use crate::geometry::{
    triangulate_multiview, triangulate_pair, CameraModel, Detection2D, GeometryError, Pose3D,
    DEFAULT_CONF_CUTOFF,
};

pub type TrackId = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusteringError {
    #[error("poses have no common finite joints")]
    Incomparable,
}

/// A detection addressed by camera position in the rig and its index in that
/// camera's detection list for the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DetectionRef {
    pub camera: usize,
    pub index: usize,
}

impl DetectionRef {
    pub fn new(camera: usize, index: usize) -> Self {
        Self { camera, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn as_str(self) -> &'static str {
        match self {
            Side::Left => "LEFT",
            Side::Right => "RIGHT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HandStatus {
    Fused,
    CarriedForward,
}

impl HandStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            HandStatus::Fused => "FUSED",
            HandStatus::CarriedForward => "CARRIED_FORWARD",
        }
    }
}

/// Dynamic Matching needs three cameras per hand; Tracking Mode accepts two
/// when a previous-frame hand seeds the cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MatchingMode {
    #[serde(alias = "dm")]
    Dm,
    #[serde(alias = "tm")]
    Tm,
}

/// A hand pose triangulated from one detection in each of two cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal3D {
    pub pose: Pose3D,
    /// Ordered by camera index.
    pub source: [DetectionRef; 2],
    pub mean_conf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalParams {
    pub conf_cutoff: f64,
    /// Largest RMS reprojection residual (px) over the two views for a joint
    /// triangulation to count as consistent.
    pub max_residual_px: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            conf_cutoff: DEFAULT_CONF_CUTOFF,
            max_residual_px: 15.0,
        }
    }
}

fn lift_pair(
    cam_a: &CameraModel,
    cam_b: &CameraModel,
    det_a: &Detection2D,
    det_b: &Detection2D,
    params: &ProposalParams,
) -> Option<Pose3D> {
    let joints = det_a.joint_count();
    if joints == 0 || det_b.joint_count() != joints {
        return None;
    }
    let lift = |j: usize| -> Option<Point3<f64>> {
        let (ua, ub) = (&det_a.keypoints[j], &det_b.keypoints[j]);
        let p = triangulate_pair(cam_a, cam_b, ua, ub).ok()?;
        let ra = (cam_a.project(&p).ok()? - ua).norm_squared();
        let rb = (cam_b.project(&p).ok()? - ub).norm_squared();
        (((ra + rb) / 2.0).sqrt() <= params.max_residual_px).then_some(p)
    };
    let confident = |j: usize| {
        det_a.keypoint_conf[j] >= params.conf_cutoff && det_b.keypoint_conf[j] >= params.conf_cutoff
    };
    // wrist first: cheap rejection of mismatched pairs
    if !confident(0) {
        return None;
    }
    let wrist = lift(0)?;
    let mut pose = Pose3D::missing(joints);
    pose.joints[0] = wrist;
    let mut mutual = 1;
    let mut ok = 1;
    for j in 1..joints {
        if !confident(j) {
            continue;
        }
        mutual += 1;
        if let Some(p) = lift(j) {
            pose.joints[j] = p;
            ok += 1;
        }
    }
    (2 * ok >= mutual).then_some(pose)
}

/// Lifts every cross-camera detection pair to a proposal. Pairs that fail to
/// triangulate consistently are dropped.
pub fn build_proposals(
    cameras: &[CameraModel],
    detections: &[Vec<Detection2D>],
    params: &ProposalParams,
) -> Vec<Proposal3D> {
    build_proposals_filtered(cameras, detections, params, |_| true)
}

/// As [`build_proposals`], skipping detections for which `allow` is false.
pub fn build_proposals_filtered<F>(
    cameras: &[CameraModel],
    detections: &[Vec<Detection2D>],
    params: &ProposalParams,
    allow: F,
) -> Vec<Proposal3D>
where
    F: Fn(DetectionRef) -> bool + Sync,
{
    let n = cameras.len().min(detections.len());
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|&(a, b)| !detections[a].is_empty() && !detections[b].is_empty())
        .collect();
    pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut out = Vec::new();
            for (ia, det_a) in detections[a].iter().enumerate() {
                let ra = DetectionRef::new(a, ia);
                if !allow(ra) {
                    continue;
                }
                for (ib, det_b) in detections[b].iter().enumerate() {
                    let rb = DetectionRef::new(b, ib);
                    if !allow(rb) {
                        continue;
                    }
                    if let Some(pose) = lift_pair(&cameras[a], &cameras[b], det_a, det_b, params) {
                        out.push(Proposal3D {
                            pose,
                            source: [ra, rb],
                            mean_conf: 0.5 * (det_a.det_conf + det_b.det_conf),
                        });
                    }
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Mean Euclidean distance over joints finite in both poses.
pub fn pose_distance(a: &Pose3D, b: &Pose3D) -> Result<f64, ClusteringError> {
    if a.joint_count() != b.joint_count() {
        return Err(ClusteringError::Incomparable);
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (j, (pa, pb)) in a.joints.iter().zip(&b.joints).enumerate() {
        if a.is_joint_finite(j) && b.is_joint_finite(j) {
            sum += (pa - pb).norm();
            count += 1;
        }
    }
    if count == 0 {
        return Err(ClusteringError::Incomparable);
    }
    Ok(sum / count as f64)
}

/// Per-joint mean over the finite joints of `poses`.
pub fn mean_pose<'a>(poses: impl IntoIterator<Item = &'a Pose3D>, joint_count: usize) -> Pose3D {
    let mut sums = vec![Vector3::zeros(); joint_count];
    let mut counts = vec![0usize; joint_count];
    for pose in poses {
        for j in 0..joint_count.min(pose.joint_count()) {
            if pose.is_joint_finite(j) {
                sums[j] += pose.joints[j].coords;
                counts[j] += 1;
            }
        }
    }
    Pose3D::new(
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| {
                if c == 0 {
                    Point3::new(f64::NAN, f64::NAN, f64::NAN)
                } else {
                    Point3::from(s / c as f64)
                }
            })
            .collect(),
    )
}

/// Symmetric matrix of pairwise proposal distances; incomparable pairs are
/// infinite.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(proposals: &[Proposal3D]) -> Self {
        let n = proposals.len();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| {
                        pose_distance(&proposals[i].pose, &proposals[j].pose).unwrap_or(f64::INFINITY)
                    })
                    .collect()
            })
            .collect();
        let mut data = vec![0.0; n * n];
        for (i, row) in upper.iter().enumerate() {
            for (k, &d) in row.iter().enumerate() {
                let j = i + 1 + k;
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self { n, data }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

/// Manual constraints applied before clustering: detections pinned to a track.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterConstraints {
    pub forced: BTreeMap<DetectionRef, TrackId>,
}

impl ClusterConstraints {
    /// Track a proposal is pinned to. `Err` when its two detections are
    /// pinned to different tracks.
    pub fn proposal_tag(&self, p: &Proposal3D) -> Result<Option<TrackId>, ()> {
        let a = self.forced.get(&p.source[0]);
        let b = self.forced.get(&p.source[1]);
        match (a, b) {
            (Some(x), Some(y)) if x != y => Err(()),
            (Some(x), _) | (_, Some(x)) => Ok(Some(*x)),
            (None, None) => Ok(None),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Indices into the frame's proposal list, ascending.
    pub proposals: Vec<usize>,
    pub cameras: BTreeSet<usize>,
    pub detections: BTreeSet<DetectionRef>,
    pub seed_track: Option<TrackId>,
    /// Set when a member detection is manually pinned to a track.
    pub forced_track: Option<TrackId>,
}

impl Cluster {
    fn from_members(members: Vec<usize>, proposals: &[Proposal3D], tags: &[Option<TrackId>]) -> Self {
        let mut cameras = BTreeSet::new();
        let mut detections = BTreeSet::new();
        let mut forced_track = None;
        for &m in &members {
            for d in proposals[m].source {
                cameras.insert(d.camera);
                detections.insert(d);
            }
            forced_track = forced_track.or(tags[m]);
        }
        Self {
            proposals: members,
            cameras,
            detections,
            seed_track: None,
            forced_track,
        }
    }

    pub fn is_conflict_free(&self) -> bool {
        self.detections.len() == self.cameras.len()
    }

    pub fn is_dm_valid(&self) -> bool {
        self.cameras.len() >= 3
    }

    pub fn is_tm_valid(&self) -> bool {
        self.cameras.len() >= 2 && self.seed_track.is_some()
    }

    pub fn is_valid(&self, mode: MatchingMode) -> bool {
        match mode {
            MatchingMode::Dm => self.is_dm_valid(),
            MatchingMode::Tm => self.is_dm_valid() || self.is_tm_valid(),
        }
    }

    pub fn mean_pose(&self, proposals: &[Proposal3D]) -> Pose3D {
        let joints = self
            .proposals
            .first()
            .map(|&i| proposals[i].pose.joint_count())
            .unwrap_or(0);
        mean_pose(self.proposals.iter().map(|&i| &proposals[i].pose), joints)
    }
}

/// Single-linkage components of the graph with an edge wherever the distance
/// is below `delta`. Components are sorted by their smallest member.
pub fn connected_components(dist: &DistanceMatrix, delta: f64) -> Vec<Vec<usize>> {
    linked_components(dist, delta, &vec![None; dist.len()])
}

fn linked_components(dist: &DistanceMatrix, delta: f64, tags: &[Option<TrackId>]) -> Vec<Vec<usize>> {
    let n = dist.len();
    let mut uf = UnionFind::<usize>::new(n);
    for i in 0..n {
        for j in i + 1..n {
            let compatible = match (tags[i], tags[j]) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            };
            if compatible && dist.get(i, j) < delta {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let labels = uf.into_labeling();
    let mut first_of_label: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let key = *first_of_label.entry(label).or_insert(i);
        groups.entry(key).or_default().push(i);
    }
    groups.into_values().collect()
}

fn members_conflict(members: &[usize], proposals: &[Proposal3D], tags: &[Option<TrackId>]) -> bool {
    let mut per_camera: BTreeMap<usize, usize> = BTreeMap::new();
    let mut tag = None;
    for &m in members {
        for d in proposals[m].source {
            if let Some(prev) = per_camera.insert(d.camera, d.index) {
                if prev != d.index {
                    return true;
                }
            }
        }
        if let Some(t) = tags[m] {
            if tag.is_some_and(|x| x != t) {
                return true;
            }
            tag = Some(t);
        }
    }
    false
}

/// Removes the most distant proposal until the component is conflict-free.
/// Returns (kept, removed).
fn resolve_conflicts(
    mut members: Vec<usize>,
    proposals: &[Proposal3D],
    dist: &DistanceMatrix,
    tags: &[Option<TrackId>],
) -> (Vec<usize>, Vec<usize>) {
    let mut removed = Vec::new();
    while members.len() > 1 && members_conflict(&members, proposals, tags) {
        let mut worst = (0usize, f64::NEG_INFINITY);
        for (pos, &m) in members.iter().enumerate() {
            let sum: f64 = members.iter().filter(|&&o| o != m).map(|&o| dist.get(m, o)).sum();
            let mean = sum / (members.len() - 1) as f64;
            // ties go to the later proposal
            if mean >= worst.1 {
                worst = (pos, mean);
            }
        }
        removed.push(members.remove(worst.0));
    }
    (members, removed)
}

/// Clusters proposals at threshold `delta`.
pub fn cluster_proposals(proposals: &[Proposal3D], delta: f64) -> Vec<Cluster> {
    let dist = DistanceMatrix::new(proposals);
    cluster_with_distances(proposals, &dist, delta, &ClusterConstraints::default())
}

/// Clusters proposals using a precomputed distance matrix.
///
/// Each component is made conflict-free by dropping its most distant members;
/// dropped proposals become singleton clusters. A final greedy pass keeps
/// clusters disjoint in detections, favoring pinned, then larger clusters.
pub fn cluster_with_distances(
    proposals: &[Proposal3D],
    dist: &DistanceMatrix,
    delta: f64,
    constraints: &ClusterConstraints,
) -> Vec<Cluster> {
    let tags: Vec<Option<TrackId>> = proposals
        .iter()
        .map(|p| constraints.proposal_tag(p).unwrap_or(None))
        .collect();
    let mut member_sets = Vec::new();
    for component in linked_components(dist, delta, &tags) {
        let (kept, removed) = resolve_conflicts(component, proposals, dist, &tags);
        member_sets.push(kept);
        member_sets.extend(removed.into_iter().map(|r| vec![r]));
    }
    let mut clusters: Vec<Cluster> = member_sets
        .into_iter()
        .map(|mut m| {
            m.sort_unstable();
            Cluster::from_members(m, proposals, &tags)
        })
        .collect();
    clusters.sort_by(|a, b| {
        b.forced_track
            .is_some()
            .cmp(&a.forced_track.is_some())
            .then(b.cameras.len().cmp(&a.cameras.len()))
            .then(b.proposals.len().cmp(&a.proposals.len()))
            .then(a.proposals[0].cmp(&b.proposals[0]))
    });

    let mut claimed: BTreeSet<DetectionRef> = BTreeSet::new();
    let mut out = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        let keep: Vec<usize> = cluster
            .proposals
            .iter()
            .copied()
            .filter(|&p| proposals[p].source.iter().all(|d| !claimed.contains(d)))
            .collect();
        if keep.is_empty() {
            continue;
        }
        let cluster = if keep.len() == cluster.proposals.len() {
            cluster
        } else {
            Cluster::from_members(keep, proposals, &tags)
        };
        claimed.extend(cluster.detections.iter().copied());
        out.push(cluster);
    }
    out.sort_by_key(|c| c.proposals[0]);
    out
}

/// Persistent state of one tracked hand.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub track_id: TrackId,
    pub last_pose: Pose3D,
    pub last_threshold: f64,
    pub frames_since_update: u32,
    pub side: Side,
    pub side_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// Track assigned to each cluster (mirrors `Cluster::seed_track`).
    pub cluster_track: Vec<Option<TrackId>>,
    pub unmatched_tracks: Vec<TrackId>,
    /// DM-valid clusters left unassigned; candidates for new tracks.
    pub spawn_candidates: Vec<usize>,
}

/// One-to-one association of clusters to tracks minimizing total distance
/// between the cluster mean pose and the track's last pose. Pairs at or
/// beyond `gate` are not allowed. In DM mode only DM-valid clusters take
/// part. Clusters pinned to a track can only go to that track, and such a
/// track only accepts pinned clusters.
pub fn associate_tracks(
    clusters: &mut [Cluster],
    proposals: &[Proposal3D],
    tracks: &[TrackState],
    gate: f64,
    mode: MatchingMode,
) -> Association {
    let pinned_tracks: BTreeSet<TrackId> = clusters.iter().filter_map(|c| c.forced_track).collect();
    let costs: Vec<Vec<Option<f64>>> = clusters
        .iter()
        .map(|c| {
            let eligible = mode == MatchingMode::Tm || c.is_dm_valid() || c.forced_track.is_some();
            let mean = c.mean_pose(proposals);
            tracks
                .iter()
                .map(|t| {
                    if !eligible {
                        return None;
                    }
                    let d = pose_distance(&mean, &t.last_pose).ok();
                    match c.forced_track {
                        Some(f) if f == t.track_id => Some(d.unwrap_or(0.0)),
                        Some(_) => None,
                        None if pinned_tracks.contains(&t.track_id) => None,
                        None => d.filter(|&d| d < gate),
                    }
                })
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&costs);

    let mut result = Association::default();
    let mut matched = BTreeSet::new();
    for (ci, (cluster, a)) in clusters.iter_mut().zip(&assignment).enumerate() {
        cluster.seed_track = a.map(|ti| tracks[ti].track_id);
        result.cluster_track.push(cluster.seed_track);
        match cluster.seed_track {
            Some(t) => {
                matched.insert(t);
            }
            None if cluster.is_dm_valid() && cluster.forced_track.is_none() => {
                result.spawn_candidates.push(ci)
            }
            None => {}
        }
    }
    result.unmatched_tracks = tracks
        .iter()
        .map(|t| t.track_id)
        .filter(|t| !matched.contains(t))
        .collect();
    result
}

/// One hand in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct HandEstimate {
    pub track_id: TrackId,
    pub pose: Pose3D,
    pub side: Side,
    pub side_confidence: f64,
    pub contributing: BTreeSet<DetectionRef>,
    pub status: HandStatus,
    pub interpolated_joints: BTreeSet<usize>,
}

/// Confidence-weighted vote over the right-hand probabilities of the
/// detections. Returns the side and `|mean - 0.5| * 2`.
pub fn vote_side<'a>(detections: impl IntoIterator<Item = &'a Detection2D>) -> (Side, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut plain = 0.0;
    let mut n = 0usize;
    for d in detections {
        num += d.det_conf * d.side_prob;
        den += d.det_conf;
        plain += d.side_prob;
        n += 1;
    }
    let mean = if den > 0.0 {
        num / den
    } else if n > 0 {
        plain / n as f64
    } else {
        0.5
    };
    let side = if mean >= 0.5 { Side::Right } else { Side::Left };
    (side, ((mean - 0.5).abs() * 2.0).min(1.0))
}

/// Triangulates every joint of a cluster from all of its detections, weighted
/// by keypoint confidence. Joints that cannot be triangulated are filled in
/// from `previous` shifted by the mean displacement of the recovered joints,
/// or with the centroid of the recovered joints when there is no history.
pub fn fuse_cluster(
    cluster: &Cluster,
    cameras: &[CameraModel],
    detections: &[Vec<Detection2D>],
    track_id: TrackId,
    previous: Option<&Pose3D>,
    conf_cutoff: f64,
) -> Result<HandEstimate, GeometryError> {
    let refs: Vec<DetectionRef> = cluster.detections.iter().copied().collect();
    let dets: Vec<&Detection2D> = refs.iter().map(|r| &detections[r.camera][r.index]).collect();
    let cams: Vec<&CameraModel> = refs.iter().map(|r| &cameras[r.camera]).collect();
    let joints = dets.first().map(|d| d.joint_count()).unwrap_or(0);

    let mut pose = Pose3D::missing(joints);
    let mut missing = BTreeSet::new();
    let mut obs: Vec<Point2<f64>> = Vec::with_capacity(dets.len());
    let mut weights: Vec<f64> = Vec::with_capacity(dets.len());
    for j in 0..joints {
        obs.clear();
        weights.clear();
        for d in &dets {
            obs.push(d.keypoints[j]);
            let c = d.keypoint_conf[j];
            weights.push(if c >= conf_cutoff { c } else { 0.0 });
        }
        match triangulate_multiview(&cams, &obs, &weights) {
            Ok(p) => pose.joints[j] = p,
            Err(_) => {
                missing.insert(j);
            }
        }
    }
    if joints == 0 || missing.len() == joints {
        return Err(GeometryError::InsufficientViews(0));
    }
    if !missing.is_empty() {
        let recovered: Vec<usize> = (0..joints).filter(|j| !missing.contains(j)).collect();
        let prev = previous.filter(|p| p.joint_count() == joints && p.is_complete());
        let fill = match prev {
            Some(prev) => {
                let shift = recovered
                    .iter()
                    .map(|&j| pose.joints[j] - prev.joints[j])
                    .sum::<Vector3<f64>>()
                    / recovered.len() as f64;
                missing.iter().map(|&j| (j, prev.joints[j] + shift)).collect::<Vec<_>>()
            }
            None => {
                let centroid = recovered.iter().map(|&j| pose.joints[j].coords).sum::<Vector3<f64>>()
                    / recovered.len() as f64;
                missing.iter().map(|&j| (j, Point3::from(centroid))).collect()
            }
        };
        for (j, p) in fill {
            pose.joints[j] = p;
        }
    }
    let (side, side_confidence) = vote_side(dets.iter().copied());
    Ok(HandEstimate {
        track_id,
        pose,
        side,
        side_confidence,
        contributing: cluster.detections.clone(),
        status: HandStatus::Fused,
        interpolated_joints: missing,
    })
}
