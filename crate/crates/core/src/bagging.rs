//! Bagging ensembles: simple (unweighted) and score-weighted fusion of base
//! model outputs, for rigid 6-DoF poses and for 2D keypoint poses.
//!
//! Weighted bagging assigns each member `wh = 1 / ((1 − score)² + ε)`.
//! Translations and keypoints are averaged with those weights; rotations use
//! the weighted chordal L2 mean.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat3::Mat3;
use crate::model::{Keypoint, MatchedGroup, ModelError, PersonPose, RigidPose, Visibility, ROTATION_ARITH_TOL};
use crate::rotation::{chordal_mean, chordal_mean_weighted, RotationError, RotationSample};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BaggingError {
    #[error("nothing to fuse")]
    EmptyInput,
    #[error("matched group has no members")]
    EmptyGroup,
    #[error("{poses} poses but {scores} scores")]
    LengthMismatch { poses: usize, scores: usize },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaggingMode {
    Simple,
    #[default]
    Weighted,
}

/// How weighted translations are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNormalization {
    /// `Σ whᵢ·Taᵢ / Σ whᵢ`, a convex combination.
    #[default]
    SumWeights,
    /// `(1/n)·Σ whᵢ·Taᵢ`, the unnormalized formula taken literally.
    #[serde(rename = "paper_1_over_n")]
    LiteralOneOverN,
}

impl FromStr for BaggingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "simple" => Ok(BaggingMode::Simple),
            "weighted" => Ok(BaggingMode::Weighted),
            other => Err(format!("unknown bagging mode `{other}` (expected simple|weighted)")),
        }
    }
}

impl fmt::Display for BaggingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaggingMode::Simple => "simple",
            BaggingMode::Weighted => "weighted",
        })
    }
}

impl FromStr for WeightNormalization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum_weights" => Ok(WeightNormalization::SumWeights),
            "paper_1_over_n" => Ok(WeightNormalization::LiteralOneOverN),
            other => Err(format!(
                "unknown weight normalization `{other}` (expected sum_weights|paper_1_over_n)"
            )),
        }
    }
}

impl fmt::Display for WeightNormalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightNormalization::SumWeights => "sum_weights",
            WeightNormalization::LiteralOneOverN => "paper_1_over_n",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaggingConfig {
    pub mode: BaggingMode,
    pub epsilon: f64,
    pub weight_normalization: WeightNormalization,
}

impl Default for BaggingConfig {
    fn default() -> Self {
        BaggingConfig {
            mode: BaggingMode::Weighted,
            epsilon: 1e-6,
            weight_normalization: WeightNormalization::SumWeights,
        }
    }
}

impl BaggingConfig {
    pub fn simple() -> Self {
        BaggingConfig {
            mode: BaggingMode::Simple,
            ..Default::default()
        }
    }

    pub fn weighted() -> Self {
        BaggingConfig::default()
    }

    pub fn validate(&self) -> Result<(), BaggingError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(BaggingError::NonPositiveEpsilon(self.epsilon));
        }
        Ok(())
    }
}

/// Fused output of any strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FusedPose {
    Keypoints(PersonPose),
    Rigid(RigidPose),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedResult {
    pub pose: FusedPose,
    /// Raw per-member weights in member order.
    pub member_weights: Vec<(String, f64)>,
    pub strategy: String,
}

impl FusedResult {
    pub fn keypoints(&self) -> Option<&PersonPose> {
        match &self.pose {
            FusedPose::Keypoints(p) => Some(p),
            FusedPose::Rigid(_) => None,
        }
    }

    pub fn rigid(&self) -> Option<&RigidPose> {
        match &self.pose {
            FusedPose::Rigid(r) => Some(r),
            FusedPose::Keypoints(_) => None,
        }
    }
}

/// Per-model weight `1 / ((1 − sc)² + ε)`.
pub fn weight_from_score(sc: f64, epsilon: f64) -> Result<f64, BaggingError> {
    if !(0.0..=1.0).contains(&sc) {
        return Err(BaggingError::ScoreOutOfRange(sc));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(BaggingError::NonPositiveEpsilon(epsilon));
    }
    Ok(1.0 / ((1.0 - sc).powi(2) + epsilon))
}

/// Raw member weights for the configured mode.
fn member_weights(scores: &[f64], cfg: &BaggingConfig) -> Result<Vec<f64>, BaggingError> {
    cfg.validate()?;
    scores
        .iter()
        .map(|&s| match cfg.mode {
            BaggingMode::Simple => {
                if (0.0..=1.0).contains(&s) {
                    Ok(1.0)
                } else {
                    Err(BaggingError::ScoreOutOfRange(s))
                }
            }
            BaggingMode::Weighted => weight_from_score(s, cfg.epsilon),
        })
        .collect()
}

/// Weights divided by their maximum. Equal weights become exactly 1.0, so
/// equal-score weighted bagging reproduces the unweighted sums bit for bit.
fn relative(weights: &[f64]) -> Vec<f64> {
    let max = weights.iter().cloned().fold(0.0f64, f64::max);
    weights.iter().map(|w| w / max).collect()
}

fn mean_translation(ts: impl Iterator<Item = ([f64; 3], f64)>, divisor: Option<f64>) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut wsum = 0.0;
    for (t, w) in ts {
        for k in 0..3 {
            acc[k] += w * t[k];
        }
        wsum += w;
    }
    let d = divisor.unwrap_or(wsum);
    [acc[0] / d, acc[1] / d, acc[2] / d]
}

/// Unweighted bagging: arithmetic mean translation and chordal mean rotation.
pub fn simple_bag_rigid(poses: &[RigidPose]) -> Result<RigidPose, BaggingError> {
    if poses.is_empty() {
        return Err(BaggingError::EmptyInput);
    }
    let n = poses.len() as f64;
    let mut acc = [0.0; 3];
    for p in poses {
        let t = p.translation();
        for k in 0..3 {
            acc[k] += t[k];
        }
    }
    let translation = [acc[0] / n, acc[1] / n, acc[2] / n];
    let rotations: Vec<Mat3> = poses.iter().map(RigidPose::rotation).collect();
    let rotation = chordal_mean(&rotations)?;
    Ok(RigidPose::with_tolerance(translation, rotation, ROTATION_ARITH_TOL)?)
}

/// Score-weighted bagging of rigid poses.
pub fn weighted_bag_rigid(poses: &[RigidPose], scores: &[f64], cfg: &BaggingConfig) -> Result<RigidPose, BaggingError> {
    if poses.is_empty() {
        return Err(BaggingError::EmptyInput);
    }
    if poses.len() != scores.len() {
        return Err(BaggingError::LengthMismatch {
            poses: poses.len(),
            scores: scores.len(),
        });
    }
    let raw = member_weights(scores, cfg)?;
    let translation = match cfg.weight_normalization {
        WeightNormalization::SumWeights => {
            let rel = relative(&raw);
            mean_translation(poses.iter().map(RigidPose::translation).zip(rel.iter().copied()), None)
        }
        WeightNormalization::LiteralOneOverN => mean_translation(
            poses.iter().map(RigidPose::translation).zip(raw.iter().copied()),
            Some(poses.len() as f64),
        ),
    };
    // The rotation minimizer is invariant to weight scale.
    let rel = relative(&raw);
    let samples = poses
        .iter()
        .zip(&rel)
        .map(|(p, &w)| RotationSample::new(p.rotation(), w))
        .collect::<Result<Vec<_>, _>>()?;
    let rotation = chordal_mean_weighted(&samples)?;
    Ok(RigidPose::with_tolerance(translation, rotation, ROTATION_ARITH_TOL)?)
}

/// Fuses rigid-pose members `(model_id, pose, score)` into a [`FusedResult`].
pub fn fuse_rigid(members: &[(String, RigidPose, f64)], cfg: &BaggingConfig) -> Result<FusedResult, BaggingError> {
    if members.is_empty() {
        return Err(BaggingError::EmptyInput);
    }
    let mut sorted: Vec<&(String, RigidPose, f64)> = members.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let poses: Vec<RigidPose> = sorted.iter().map(|m| m.1).collect();
    let scores: Vec<f64> = sorted.iter().map(|m| m.2).collect();
    let pose = match cfg.mode {
        BaggingMode::Simple => {
            member_weights(&scores, cfg)?;
            simple_bag_rigid(&poses)?
        }
        BaggingMode::Weighted => weighted_bag_rigid(&poses, &scores, cfg)?,
    };
    let weights = member_weights(&scores, cfg)?;
    Ok(FusedResult {
        pose: FusedPose::Rigid(pose),
        member_weights: sorted.iter().map(|m| m.0.clone()).zip(weights).collect(),
        strategy: cfg.mode.to_string(),
    })
}

/// Fuses a matched group of keypoint poses.
///
/// Each keypoint is averaged over the members that label it (or report a
/// positive confidence), with weights renormalized per keypoint. A keypoint
/// no member observes stays unlabeled at the origin. Detection score is the
/// weighted mean of member scores.
pub fn fuse_keypoints(group: &MatchedGroup, cfg: &BaggingConfig) -> Result<FusedResult, BaggingError> {
    if group.is_empty() {
        return Err(BaggingError::EmptyGroup);
    }
    let members = group.members();
    let scores: Vec<f64> = members.iter().map(|(_, p)| p.score).collect();
    let raw = member_weights(&scores, cfg)?;
    let literal = cfg.weight_normalization == WeightNormalization::LiteralOneOverN;
    let w: Vec<f64> = if literal { raw.clone() } else { relative(&raw) };

    let k = members[0].1.keypoints.len();
    let mut keypoints = Vec::with_capacity(k);
    for j in 0..k {
        let (mut sx, mut sy, mut sc, mut ws, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut v = Visibility::Unlabeled;
        for ((_, p), &wi) in members.iter().zip(&w) {
            let kp = &p.keypoints[j];
            if !(kp.v.is_labeled() || kp.confidence > 0.0) {
                continue;
            }
            sx += wi * kp.x;
            sy += wi * kp.y;
            sc += wi * kp.confidence;
            ws += wi;
            n += 1;
            v = v.max(if kp.v.is_labeled() { kp.v } else { Visibility::Visible });
        }
        if n == 0 {
            keypoints.push(Keypoint::unlabeled());
            continue;
        }
        let d = if literal { n as f64 } else { ws };
        keypoints.push(Keypoint::new(sx / d, sy / d, v, (sc / d).clamp(0.0, 1.0)));
    }

    let d = if literal {
        members.len() as f64
    } else {
        w.iter().sum()
    };
    let score = (members.iter().zip(&w).map(|((_, p), wi)| wi * p.score).sum::<f64>() / d).clamp(0.0, 1.0);
    let pose = PersonPose::new(group.image_id(), "fused", keypoints, score);
    Ok(FusedResult {
        pose: FusedPose::Keypoints(pose),
        member_weights: members.iter().map(|(m, _)| m.clone()).zip(raw).collect(),
        strategy: cfg.mode.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat3::normalize;

    fn rigid(t: [f64; 3], r: Mat3) -> RigidPose {
        RigidPose::new(t, r).unwrap()
    }

    #[test]
    fn weight_examples() {
        assert!((weight_from_score(0.0, 1e-6).unwrap() - 1.0 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!((weight_from_score(0.5, 1e-6).unwrap() - 1.0 / 0.250001).abs() < 1e-12);
        assert!((weight_from_score(1.0, 1e-6).unwrap() - 1e6).abs() < 1e-6);
        assert_eq!(weight_from_score(1.1, 1e-6), Err(BaggingError::ScoreOutOfRange(1.1)));
        assert_eq!(weight_from_score(0.5, 0.0), Err(BaggingError::NonPositiveEpsilon(0.0)));
    }

    #[test]
    fn simple_bagging_means() {
        let r = Mat3::from_axis_angle(normalize([1.0, 0.0, 1.0]), 0.4);
        let out = simple_bag_rigid(&[rigid([0.0, 0.0, 0.0], r), rigid([2.0, 4.0, 6.0], r)]).unwrap();
        assert_eq!(out.translation(), [1.0, 2.0, 3.0]);
        assert!((out.rotation() - r).frobenius_norm() < 1e-13);
        let same = rigid([1.5, -2.0, 0.25], r);
        let out = simple_bag_rigid(&[same, same, same]).unwrap();
        assert_eq!(out.translation(), same.translation());
        assert_eq!(simple_bag_rigid(&[]), Err(BaggingError::EmptyInput));
    }

    #[test]
    fn weighted_two_translation_example() {
        let poses = [rigid([0.0; 3], Mat3::IDENTITY), rigid([1.0, 0.0, 0.0], Mat3::IDENTITY)];
        let w0 = 1.0 / (0.01 + 1e-6);
        let w1 = 1.0 / (0.25 + 1e-6);
        let out = weighted_bag_rigid(&poses, &[0.9, 0.5], &BaggingConfig::weighted()).unwrap();
        assert!((out.translation()[0] - w1 / (w0 + w1)).abs() < 1e-15);
        assert!((out.translation()[0] - 0.03846).abs() < 1e-5);

        let literal = BaggingConfig {
            weight_normalization: WeightNormalization::LiteralOneOverN,
            ..BaggingConfig::weighted()
        };
        let out = weighted_bag_rigid(&poses, &[0.9, 0.5], &literal).unwrap();
        assert!((out.translation()[0] - 0.5 * w1).abs() < 1e-12);
    }

    #[test]
    fn weighted_dominant_member() {
        let a = rigid([3.0, -1.0, 2.0], Mat3::rot_z(0.1));
        let b = rigid([-5.0, 4.0, 9.0], Mat3::rot_z(1.0));
        let out = weighted_bag_rigid(&[a, b], &[1.0, 0.0], &BaggingConfig::weighted()).unwrap();
        for k in 0..3 {
            let rel = (out.translation()[k] - a.translation()[k]).abs() / (b.translation()[k] - a.translation()[k]).abs();
            assert!(rel < 2e-6);
        }
        assert!((out.rotation() - a.rotation()).frobenius_norm() < 2e-6);
    }

    #[test]
    fn weighted_rejects_bad_input() {
        let a = rigid([0.0; 3], Mat3::IDENTITY);
        let cfg = BaggingConfig::weighted();
        assert_eq!(
            weighted_bag_rigid(&[a], &[0.5, 0.5], &cfg),
            Err(BaggingError::LengthMismatch { poses: 1, scores: 2 })
        );
        assert_eq!(weighted_bag_rigid(&[a], &[-0.1], &cfg), Err(BaggingError::ScoreOutOfRange(-0.1)));
        assert_eq!(weighted_bag_rigid(&[], &[], &cfg), Err(BaggingError::EmptyInput));
    }

    #[test]
    fn literal_mode_coincides_with_simple_when_weights_are_one() {
        // wh = 1 exactly requires (1 − sc)² + ε = 1, e.g. sc = 1 with ε = 1.
        let poses = [rigid([1.0, 2.0, 3.0], Mat3::rot_z(0.2)), rigid([4.0, -2.0, 0.5], Mat3::rot_z(0.5))];
        let cfg = BaggingConfig {
            epsilon: 1.0,
            weight_normalization: WeightNormalization::LiteralOneOverN,
            ..BaggingConfig::weighted()
        };
        let literal = weighted_bag_rigid(&poses, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(literal, simple_bag_rigid(&poses).unwrap());
    }

    fn kp_pose(model: &str, xs: &[f64], score: f64) -> PersonPose {
        PersonPose::new(1, model, xs.iter().map(|&x| Keypoint::visible(x, 2.0 * x)).collect(), score)
    }

    #[test]
    fn fuse_singleton_and_identical_members() {
        let p = kp_pose("a", &[1.0, 2.5, 7.0], 0.7);
        let out = fuse_keypoints(&MatchedGroup::singleton(p.clone()), &BaggingConfig::weighted()).unwrap();
        let fused = out.keypoints().unwrap();
        assert_eq!(fused.keypoints, p.keypoints);
        assert_eq!(fused.score, p.score);

        let q = kp_pose("b", &[1.0, 2.5, 7.0], 0.2);
        let g = MatchedGroup::new(1, vec![("a".into(), p.clone()), ("b".into(), q)], vec![1.0, 1.0]).unwrap();
        let out = fuse_keypoints(&g, &BaggingConfig::weighted()).unwrap();
        assert_eq!(out.keypoints().unwrap().keypoints, p.keypoints);
    }

    #[test]
    fn fuse_weighted_keypoint_example() {
        let a = kp_pose("a", &[0.0], 0.9);
        let b = kp_pose("b", &[1.0], 0.5);
        let g = MatchedGroup::new(1, vec![("a".into(), a), ("b".into(), b)], vec![1.0, 1.0]).unwrap();
        let out = fuse_keypoints(&g, &BaggingConfig::weighted()).unwrap();
        let w0 = 1.0 / (0.01 + 1e-6);
        let w1 = 1.0 / (0.25 + 1e-6);
        let x = out.keypoints().unwrap().keypoints[0].x;
        assert!((x - w1 / (w0 + w1)).abs() < 1e-15);
        assert!((x - 0.03846).abs() < 1e-5);
        assert_eq!(out.member_weights[0].0, "a");
        assert!((out.member_weights[0].1 - w0).abs() < 1e-9);

        let simple = fuse_keypoints(&g, &BaggingConfig::simple()).unwrap();
        assert_eq!(simple.keypoints().unwrap().keypoints[0].x, 0.5);
        assert_eq!(simple.keypoints().unwrap().score, 0.7);
    }

    #[test]
    fn fuse_skips_unobserved_members_per_keypoint() {
        let a = kp_pose("a", &[2.0, 4.0], 0.6);
        let mut b = kp_pose("b", &[10.0, 8.0], 0.6);
        b.keypoints[0] = Keypoint::unlabeled();
        let mut c = kp_pose("c", &[0.0, 6.0], 0.6);
        c.keypoints[1] = Keypoint::unlabeled();
        let g = MatchedGroup::new(1, vec![("a".into(), a), ("b".into(), b), ("c".into(), c)], vec![1.0; 3]).unwrap();
        let out = fuse_keypoints(&g, &BaggingConfig::weighted()).unwrap();
        let kps = &out.keypoints().unwrap().keypoints;
        assert_eq!(kps[0].x, 1.0);
        assert_eq!(kps[1].x, 6.0);

        let mut d = kp_pose("a", &[1.0], 0.5);
        d.keypoints[0] = Keypoint::unlabeled();
        let out = fuse_keypoints(&MatchedGroup::singleton(d), &BaggingConfig::weighted()).unwrap();
        assert_eq!(out.keypoints().unwrap().keypoints[0], Keypoint::unlabeled());
    }
}
