//! Training-data augmentation by articulated pose transformation.
//!
//! Candidate poses are produced by rotating and stretching limb chains,
//! screened by a bone-ratio discriminator, and kept preferentially when they
//! land in under-populated pose clusters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::model::{PersonPose, SkeletonSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseTransError {
    #[error("invalid transform parameters: {0}")]
    InvalidParams(String),
    #[error("skeleton `{0}` defines no torso")]
    NoTorso(String),
    #[error("torso is unlabeled or shorter than 1e-6 px")]
    DegenerateTorso,
    #[error("need at least {needed} poses, got {got}")]
    TooFewPoses { needed: usize, got: usize },
    #[error("bone {a}-{b} has {reason}")]
    DegenerateStatistics { a: usize, b: usize, reason: &'static str },
    #[error("pose has {actual} keypoints, skeleton expects {expected}")]
    SkeletonMismatch { expected: usize, actual: usize },
    #[error("augmentation stalled after {accepted} of {budget} samples")]
    BudgetUnreachable { accepted: usize, budget: usize },
}

const MIN_TORSO: f64 = 1e-6;
/// Poses required to fit a [`PlausibilityModel`].
pub const MIN_FIT_POSES: usize = 30;
const MAX_KMEANS_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformParams {
    /// Largest absolute rotation per bone, radians.
    pub limb_rotation_max: f64,
    pub limb_scale_range: (f64, f64),
    pub attempts_max: usize,
    pub seed: u64,
}

impl Default for TransformParams {
    fn default() -> Self {
        TransformParams {
            limb_rotation_max: 0.52,
            limb_scale_range: (0.8, 1.2),
            attempts_max: 10,
            seed: 0,
        }
    }
}

impl TransformParams {
    /// A zero rotation limit is accepted and makes the transform a pure
    /// bone scaling.
    pub fn validate(&self) -> Result<(), PoseTransError> {
        let (lo, hi) = self.limb_scale_range;
        if !(0.0..std::f64::consts::PI).contains(&self.limb_rotation_max) {
            return Err(PoseTransError::InvalidParams(format!(
                "limb_rotation_max must be in [0, pi), got {}",
                self.limb_rotation_max
            )));
        }
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            return Err(PoseTransError::InvalidParams(format!(
                "limb_scale_range must satisfy 0 < low <= 1 <= high, got ({lo}, {hi})"
            )));
        }
        if self.attempts_max == 0 {
            return Err(PoseTransError::InvalidParams("attempts_max must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_len(pose: &PersonPose, skeleton: &SkeletonSpec) -> Result<(), PoseTransError> {
    if pose.keypoints.len() != skeleton.len() {
        return Err(PoseTransError::SkeletonMismatch {
            expected: skeleton.len(),
            actual: pose.keypoints.len(),
        });
    }
    Ok(())
}

/// Torso midpoint and length.
pub fn torso_frame(pose: &PersonPose, skeleton: &SkeletonSpec) -> Result<([f64; 2], f64), PoseTransError> {
    check_len(pose, skeleton)?;
    let torso = skeleton.torso().ok_or_else(|| PoseTransError::NoTorso(skeleton.name().to_string()))?;
    let mean = |idx: &[usize]| -> Result<[f64; 2], PoseTransError> {
        let mut s = [0.0; 2];
        for &i in idx {
            let k = &pose.keypoints[i];
            if !k.v.is_labeled() {
                return Err(PoseTransError::DegenerateTorso);
            }
            s[0] += k.x;
            s[1] += k.y;
        }
        Ok([s[0] / idx.len() as f64, s[1] / idx.len() as f64])
    };
    let (u, l) = (mean(&torso.upper)?, mean(&torso.lower)?);
    let len = (u[0] - l[0]).hypot(u[1] - l[1]);
    if !(len >= MIN_TORSO) {
        return Err(PoseTransError::DegenerateTorso);
    }
    Ok(([(u[0] + l[0]) / 2.0, (u[1] + l[1]) / 2.0], len))
}

/// Rotates bone `chain[bone] → chain[bone + 1]` by `angle` about its proximal
/// joint and scales it by `scale`, carrying every labeled keypoint further
/// down the chain along.
///
/// For a downstream point `k` with proximal joint `p` and distal joint `q`:
/// `k' = k + (R − I)(k − p) + (s − 1)·R(q − p)`. Does nothing when either
/// bone endpoint is unlabeled.
pub fn apply_bone_transform(pose: &mut PersonPose, chain: &[usize], bone: usize, angle: f64, scale: f64) {
    let (pi, qi) = (chain[bone], chain[bone + 1]);
    let (p, q) = (pose.keypoints[pi], pose.keypoints[qi]);
    if !(p.v.is_labeled() && q.v.is_labeled()) {
        return;
    }
    let (s, c) = angle.sin_cos();
    let rot = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
    let (rqx, rqy) = rot(q.x - p.x, q.y - p.y);
    let (ex, ey) = ((scale - 1.0) * rqx, (scale - 1.0) * rqy);
    for &ki in &chain[bone + 1..] {
        let k = &mut pose.keypoints[ki];
        if !k.v.is_labeled() {
            continue;
        }
        let (dx, dy) = (k.x - p.x, k.y - p.y);
        let (rx, ry) = rot(dx, dy);
        k.x += (rx - dx) + ex;
        k.y += (ry - dy) + ey;
    }
}

fn chains_of(skeleton: &SkeletonSpec) -> Vec<Vec<usize>> {
    if skeleton.chains().is_empty() {
        skeleton.limb_pairs().iter().map(|&(a, b)| vec![a, b]).collect()
    } else {
        skeleton.chains().to_vec()
    }
}

/// Randomly articulates `pose`.
///
/// Each limb chain is picked with probability 1/2 (at least one always is).
/// Every bone of a picked chain, proximal first, is rotated by a uniform
/// angle in `[−max, max]` and scaled by a uniform factor in the scale range.
/// Visibility flags, confidences and all metadata are kept.
pub fn transform_pose<R: Rng + ?Sized>(
    pose: &PersonPose,
    skeleton: &SkeletonSpec,
    params: &TransformParams,
    rng: &mut R,
) -> Result<PersonPose, PoseTransError> {
    params.validate()?;
    check_len(pose, skeleton)?;
    let chains = chains_of(skeleton);
    let mut out = pose.clone();
    if chains.is_empty() {
        return Ok(out);
    }
    let mut picked: Vec<bool> = chains.iter().map(|_| rng.random_bool(0.5)).collect();
    if !picked.iter().any(|&b| b) {
        picked[rng.random_range(0..chains.len())] = true;
    }
    let m = params.limb_rotation_max;
    let (lo, hi) = params.limb_scale_range;
    for (chain, _) in chains.iter().zip(&picked).filter(|(_, &p)| p) {
        for bone in 0..chain.len().saturating_sub(1) {
            let angle = rng.random_range(-m..=m);
            let scale = rng.random_range(lo..=hi);
            apply_bone_transform(&mut out, chain, bone, angle, scale);
        }
    }
    Ok(out)
}

/// Bone-length / torso-length statistics used as the plausibility gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityModel {
    pub bones: Vec<(usize, usize)>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub threshold: f64,
}

// The torso segment itself has ratio 1 by construction.
fn scored_bones(skeleton: &SkeletonSpec) -> Vec<(usize, usize)> {
    let torso = skeleton.torso();
    skeleton
        .limb_pairs()
        .iter()
        .copied()
        .filter(|&(a, b)| match torso {
            Some(t) if t.upper.len() == 1 && t.lower.len() == 1 => {
                let (u, l) = (t.upper[0], t.lower[0]);
                !((a, b) == (u, l) || (a, b) == (l, u))
            }
            _ => true,
        })
        .collect()
}

fn bone_ratio(pose: &PersonPose, a: usize, b: usize, torso: f64) -> Option<f64> {
    let (ka, kb) = (&pose.keypoints[a], &pose.keypoints[b]);
    (ka.v.is_labeled() && kb.v.is_labeled()).then(|| (ka.x - kb.x).hypot(ka.y - kb.y) / torso)
}

impl PlausibilityModel {
    /// Fits per-bone ratio mean and population standard deviation. Poses
    /// without a usable torso are skipped; at least [`MIN_FIT_POSES`] usable
    /// poses are required and every bone must vary.
    pub fn fit(poses: &[PersonPose], skeleton: &SkeletonSpec, threshold: f64) -> Result<Self, PoseTransError> {
        if !(threshold > 0.0) {
            return Err(PoseTransError::InvalidParams(format!("threshold must be > 0, got {threshold}")));
        }
        if skeleton.torso().is_none() {
            return Err(PoseTransError::NoTorso(skeleton.name().to_string()));
        }
        let bones = scored_bones(skeleton);
        let mut samples: Vec<Vec<f64>> = vec![Vec::new(); bones.len()];
        let mut usable = 0;
        for p in poses {
            check_len(p, skeleton)?;
            let Ok((_, torso)) = torso_frame(p, skeleton) else { continue };
            usable += 1;
            for (s, &(a, b)) in samples.iter_mut().zip(&bones) {
                if let Some(r) = bone_ratio(p, a, b, torso) {
                    s.push(r);
                }
            }
        }
        if usable < MIN_FIT_POSES {
            return Err(PoseTransError::TooFewPoses {
                needed: MIN_FIT_POSES,
                got: usable,
            });
        }
        let mut mean = Vec::with_capacity(bones.len());
        let mut std = Vec::with_capacity(bones.len());
        for (s, &(a, b)) in samples.iter().zip(&bones) {
            if s.len() < 2 {
                return Err(PoseTransError::DegenerateStatistics { a, b, reason: "fewer than two samples" });
            }
            let m = s.iter().sum::<f64>() / s.len() as f64;
            let sd = (s.iter().map(|r| (r - m).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
            if !(sd > 0.0) {
                return Err(PoseTransError::DegenerateStatistics { a, b, reason: "zero variance" });
            }
            mean.push(m);
            std.push(sd);
        }
        Ok(PlausibilityModel {
            bones,
            mean,
            std,
            threshold,
        })
    }

    /// Largest absolute z-score over the bones whose endpoints are labeled;
    /// 0 when no bone can be scored.
    pub fn score(&self, pose: &PersonPose, skeleton: &SkeletonSpec) -> Result<f64, PoseTransError> {
        let (_, torso) = torso_frame(pose, skeleton)?;
        let mut worst: f64 = 0.0;
        for (i, &(a, b)) in self.bones.iter().enumerate() {
            if let Some(r) = bone_ratio(pose, a, b, torso) {
                worst = worst.max(((r - self.mean[i]) / self.std[i]).abs());
            }
        }
        Ok(worst)
    }

    pub fn passes(&self, pose: &PersonPose, skeleton: &SkeletonSpec) -> Result<bool, PoseTransError> {
        Ok(self.score(pose, skeleton)? <= self.threshold)
    }
}

/// Free-function form of [`PlausibilityModel::score`].
pub fn plausibility_score(pose: &PersonPose, model: &PlausibilityModel, skeleton: &SkeletonSpec) -> Result<f64, PoseTransError> {
    model.score(pose, skeleton)
}

/// Pose in torso coordinates, flattened `(x, y)` per keypoint. Unlabeled
/// keypoints sit at the torso midpoint.
pub fn normalize_pose(pose: &PersonPose, skeleton: &SkeletonSpec) -> Result<Vec<f64>, PoseTransError> {
    let (c, len) = torso_frame(pose, skeleton)?;
    Ok(pose
        .keypoints
        .iter()
        .flat_map(|k| if k.v.is_labeled() { [(k.x - c[0]) / len, (k.y - c[1]) / len] } else { [0.0, 0.0] })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub objective_history: Vec<f64>,
}

impl ClusterModel {
    /// Nearest centroid and its squared distance; ties go to the lower index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, v)
    }

    pub fn assign(&self, pose: &PersonPose, skeleton: &SkeletonSpec) -> Result<usize, PoseTransError> {
        Ok(self.nearest(&normalize_pose(pose, skeleton)?).0)
    }

    pub fn objective(&self) -> f64 {
        *self.objective_history.last().unwrap_or(&0.0)
    }
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// k-means on torso-normalized poses.
///
/// The first centroid is a seeded random pose; each further one is the pose
/// farthest from those already chosen. Lloyd iterations then run until the
/// assignment stops changing or 100 updates have been made. A cluster that
/// empties keeps its previous centroid.
pub fn cluster_poses(poses: &[PersonPose], skeleton: &SkeletonSpec, k: usize, seed: u64) -> Result<ClusterModel, PoseTransError> {
    if k == 0 {
        return Err(PoseTransError::InvalidParams("k must be >= 1".into()));
    }
    if poses.len() < k {
        return Err(PoseTransError::TooFewPoses {
            needed: k,
            got: poses.len(),
        });
    }
    let points = exec::try_map_slice(poses, |p| normalize_pose(p, skeleton))?;
    let dim = points[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let (far, _) = min_d
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        centroids.push(points[far].clone());
        for (m, p) in min_d.iter_mut().zip(&points) {
            *m = m.min(sq_dist(p, &points[far]));
        }
    }

    let assign_all = |c: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let near = exec::map_slice(&points, |p| nearest(c, p));
        let obj = near.iter().map(|n| n.1).sum();
        (near.into_iter().map(|n| n.0).collect(), obj)
    };
    let (mut assignment, obj) = assign_all(&centroids);
    let mut history = vec![obj];
    for _ in 0..MAX_KMEANS_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(sums).zip(&counts) {
            if n > 0 {
                *c = s.into_iter().map(|v| v / n as f64).collect();
            }
        }
        let (next, obj) = assign_all(&centroids);
        history.push(obj);
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }
    }
    let mut sizes = vec![0; k];
    for &a in &assignment {
        sizes[a] += 1;
    }
    Ok(ClusterModel {
        k,
        centroids,
        assignment,
        sizes,
        objective_history: history,
    })
}

/// Generates `budget` plausible transformed poses, favoring rare clusters.
///
/// Work proceeds in rounds. Each round derives one candidate per source pose
/// (in parallel, seeded by round and source index), retrying the transform
/// up to `attempts_max` times until the discriminator passes. The round then
/// accepts up to `max(1, candidates / k)` of them, each time taking the
/// candidate whose cluster is currently smallest (lowest index on ties) and
/// counting it into that cluster. Fails with `BudgetUnreachable` once
/// `budget × attempts_max` failed attempts accumulate without an acceptance.
pub fn augment_dataset(
    poses: &[PersonPose],
    skeleton: &SkeletonSpec,
    params: &TransformParams,
    plaus: &PlausibilityModel,
    clusters: &ClusterModel,
    budget: usize,
) -> Result<Vec<PersonPose>, PoseTransError> {
    params.validate()?;
    if budget == 0 {
        return Ok(Vec::new());
    }
    if poses.is_empty() {
        return Err(PoseTransError::BudgetUnreachable { accepted: 0, budget });
    }
    for p in poses {
        check_len(p, skeleton)?;
    }
    let mut sizes = clusters.sizes.clone();
    let mut accepted = Vec::with_capacity(budget);
    let fail_limit = budget.saturating_mul(params.attempts_max);
    let mut stalled = 0usize;
    let n = poses.len() as u64;

    for round in 0u64.. {
        let generated = exec::map_range(poses.len(), |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(exec::derive_seed(params.seed, round * n + i as u64));
            let mut failures = 0;
            for _ in 0..params.attempts_max {
                let cand = transform_pose(&poses[i], skeleton, params, &mut rng).ok();
                let placed = cand.and_then(|c| {
                    let ok = plaus.passes(&c, skeleton).unwrap_or(false);
                    let cluster = clusters.assign(&c, skeleton).ok()?;
                    ok.then_some((c, cluster))
                });
                match placed {
                    Some(hit) => return (Some(hit), failures),
                    None => failures += 1,
                }
            }
            (None, failures)
        });
        let failures: usize = generated.iter().map(|g| g.1).sum();
        let mut pool: Vec<(PersonPose, usize)> = generated.into_iter().filter_map(|g| g.0).collect();
        if pool.is_empty() {
            stalled += failures;
            if stalled >= fail_limit {
                return Err(PoseTransError::BudgetUnreachable {
                    accepted: accepted.len(),
                    budget,
                });
            }
            continue;
        }
        stalled = 0;
        let quota = (pool.len() / clusters.k.max(1)).max(1);
        for _ in 0..quota {
            if accepted.len() == budget || pool.is_empty() {
                break;
            }
            let pick = (0..pool.len()).min_by_key(|&i| (sizes[pool[i].1], i)).unwrap();
            let (pose, cluster) = pool.remove(pick);
            sizes[cluster] += 1;
            accepted.push(pose);
        }
        if accepted.len() == budget {
            break;
        }
    }
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{skeleton_by_name, Keypoint};

    fn coco_pose(arm: f64) -> PersonPose {
        let sk = skeleton_by_name("coco17").unwrap();
        let mut kps = vec![Keypoint::visible(0.0, 0.0); sk.len()];
        let set = |kps: &mut Vec<Keypoint>, i: usize, x: f64, y: f64| kps[i] = Keypoint::visible(x, y);
        for i in 0..5 {
            set(&mut kps, i, 50.0 + i as f64, 10.0);
        }
        set(&mut kps, 5, 40.0, 30.0);
        set(&mut kps, 6, 60.0, 30.0);
        set(&mut kps, 7, 40.0 - arm, 30.0);
        set(&mut kps, 8, 60.0 + arm, 30.0);
        set(&mut kps, 9, 40.0 - 2.0 * arm, 30.0);
        set(&mut kps, 10, 60.0 + 2.0 * arm, 30.0);
        set(&mut kps, 11, 44.0, 80.0);
        set(&mut kps, 12, 56.0, 80.0);
        set(&mut kps, 13, 44.0, 110.0);
        set(&mut kps, 14, 56.0, 110.0);
        set(&mut kps, 15, 44.0, 140.0);
        set(&mut kps, 16, 56.0, 140.0);
        PersonPose::new(3, "gt", kps, 1.0)
    }

    #[test]
    fn identity_limits_are_exact() {
        let sk = skeleton_by_name("coco17").unwrap();
        let p = coco_pose(20.0);
        let params = TransformParams {
            limb_rotation_max: 0.0,
            limb_scale_range: (1.0, 1.0),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(transform_pose(&p, &sk, &params, &mut rng).unwrap(), p);
        }
    }

    #[test]
    fn bone_rotation_preserves_length() {
        let mut p = coco_pose(20.0);
        let chain = [5, 7, 9];
        apply_bone_transform(&mut p, &chain, 1, 0.3, 1.0);
        let (e, w) = (p.keypoints[7], p.keypoints[9]);
        assert!(((w.x - e.x).hypot(w.y - e.y) - 20.0).abs() < 1e-12);
        let ang = (w.y - e.y).atan2(w.x - e.x);
        let expected = std::f64::consts::PI + 0.3;
        let diff = (ang - expected).rem_euclid(2.0 * std::f64::consts::PI);
        assert!(diff < 1e-12 || (2.0 * std::f64::consts::PI - diff) < 1e-12);
    }

    #[test]
    fn scaling_stretches_and_carries_children() {
        let mut p = coco_pose(20.0);
        apply_bone_transform(&mut p, &[5, 7, 9], 0, 0.0, 1.5);
        assert_eq!((p.keypoints[7].x, p.keypoints[9].x), (10.0, -10.0));
    }

    #[test]
    fn transform_is_seeded() {
        let sk = skeleton_by_name("coco17").unwrap();
        let p = coco_pose(20.0);
        let params = TransformParams::default();
        let a = transform_pose(&p, &sk, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = transform_pose(&p, &sk, &params, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, p);
        assert_eq!(a.keypoints.iter().map(|k| k.v).collect::<Vec<_>>(), p.keypoints.iter().map(|k| k.v).collect::<Vec<_>>());
    }

    #[test]
    fn params_validation() {
        assert!(TransformParams::default().validate().is_ok());
        assert!(TransformParams { limb_scale_range: (1.1, 1.2), ..Default::default() }.validate().is_err());
        assert!(TransformParams { limb_rotation_max: 4.0, ..Default::default() }.validate().is_err());
        assert!(TransformParams { attempts_max: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn degenerate_torso() {
        let sk = skeleton_by_name("coco17").unwrap();
        let mut p = coco_pose(20.0);
        for i in [5, 6, 11, 12] {
            p.keypoints[i] = Keypoint::visible(10.0, 10.0);
        }
        assert_eq!(torso_frame(&p, &sk), Err(PoseTransError::DegenerateTorso));
    }

    #[test]
    fn single_cluster_is_mean() {
        let sk = skeleton_by_name("coco17").unwrap();
        let poses: Vec<PersonPose> = (0..5).map(|i| coco_pose(10.0 + i as f64)).collect();
        let m = cluster_poses(&poses, &sk, 1, 0).unwrap();
        let pts: Vec<Vec<f64>> = poses.iter().map(|p| normalize_pose(p, &sk).unwrap()).collect();
        for (d, c) in m.centroids[0].iter().enumerate() {
            let mean = pts.iter().map(|p| p[d]).sum::<f64>() / 5.0;
            assert!((c - mean).abs() < 1e-12);
        }
        assert_eq!(m.sizes, vec![5]);
    }

    #[test]
    fn too_few_poses_for_k() {
        let sk = skeleton_by_name("coco17").unwrap();
        assert_eq!(
            cluster_poses(&[coco_pose(10.0)], &sk, 2, 0),
            Err(PoseTransError::TooFewPoses { needed: 2, got: 1 })
        );
    }
}
