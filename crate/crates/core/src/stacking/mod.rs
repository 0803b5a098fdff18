//! Stacked generalization: second-level regressors trained on the
//! concatenated outputs of the base models.
//!
//! A [`MatchedGroup`] is encoded into a fixed-width feature row. Blocks are
//! laid out by model id (sorted), then keypoint index, then `(x, y, conf)`,
//! with the member's detection score closing each block. Coordinates are
//! normalized to the box spanned by every observed member keypoint, so a
//! learner sees the same numbers regardless of image scale.

mod codec;
pub mod forest;
mod matrix;
pub mod mlp;
pub mod ridge;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{hungarian, oks_with_area, AssociationConfig, AssociationError};
use crate::bagging::{FusedPose, FusedResult};
use crate::exec::derive_seed;
use crate::model::{Keypoint, MatchedGroup, ModelError, PersonPose, SkeletonSpec, Visibility};
use crate::posetrans::{transform_pose, PlausibilityModel, PoseTransError, TransformParams};

pub use codec::{FORMAT_VERSION, MAGIC};
pub use forest::{ForestModel, ForestParams};
pub use matrix::{mse, Matrix};
pub use mlp::{EpochRecord, MlpModel, MlpTraining};
pub use ridge::RidgeModel;

#[derive(Debug, Error)]
pub enum StackingError {
    #[error("no group could be matched to a ground-truth instance")]
    NoMatchedRows,
    #[error("normal equations are singular; use a positive ridge penalty")]
    SingularSystem,
    #[error("need at least {needed} training rows, got {got}")]
    InsufficientRows { needed: usize, got: usize },
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("training data contains non-finite values")]
    NonFiniteInput,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("model `{0}` is not part of the feature layout")]
    UnknownModel(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u16),
    #[error("model file is truncated")]
    Truncated,
    #[error("malformed model file: {0}")]
    Codec(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error(transparent)]
    PoseTrans(#[from] PoseTransError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain mini-batch gradient descent.
    #[default]
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = StackingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            _ => Err(StackingError::InvalidConfig(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dropout_rate: f64,
    pub learning_rate: f64,
    /// L2 weight decay added to the weight gradients (biases are exempt).
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub split_ratio: f64,
    /// Consecutive non-improving epochs before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dropout_rate: 0.4,
            learning_rate: 0.004,
            decay: 0.0,
            epochs: 40,
            batch_size: 200,
            split_ratio: 0.8,
            early_stop_patience: 5,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), StackingError> {
        let bad = |m: String| Err(StackingError::InvalidConfig(m));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return bad(format!("decay must be >= 0, got {}", self.decay));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio must be in (0, 1), got {}", self.split_ratio));
        }
        Ok(())
    }
}

/// Which meta-learner to train and its learner-specific settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Ridge { lambda: f64 },
    RandomForest(ForestParams),
    Mlp { hidden: Vec<usize> },
}

impl LearnerSpec {
    pub fn kind(&self) -> LearnerKind {
        match self {
            LearnerSpec::Ridge { .. } => LearnerKind::Ridge,
            LearnerSpec::RandomForest(_) => LearnerKind::RandomForest,
            LearnerSpec::Mlp { .. } => LearnerKind::Mlp,
        }
    }

    /// Defaults: `lambda = 1.0`, 100 trees of depth 8, hidden `[64, 64]`.
    pub fn default_for(kind: LearnerKind) -> Self {
        match kind {
            LearnerKind::Ridge => LearnerSpec::Ridge { lambda: 1.0 },
            LearnerKind::RandomForest => LearnerSpec::RandomForest(ForestParams::default()),
            LearnerKind::Mlp => LearnerSpec::Mlp { hidden: vec![64, 64] },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Ridge,
    RandomForest,
    Mlp,
}

impl FromStr for LearnerKind {
    type Err = StackingError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ridge" => Ok(LearnerKind::Ridge),
            "random_forest" | "forest" | "rf" => Ok(LearnerKind::RandomForest),
            "mlp" => Ok(LearnerKind::Mlp),
            _ => Err(StackingError::InvalidConfig(format!("unknown learner kind `{s}`"))),
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Ridge => "ridge",
            LearnerKind::RandomForest => "random_forest",
            LearnerKind::Mlp => "mlp",
        })
    }
}

/// Model order and keypoint count that fix the feature row layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub model_ids: Vec<String>,
    pub keypoints: usize,
}

impl FeatureLayout {
    /// Sorts and deduplicates `model_ids`.
    pub fn new(mut model_ids: Vec<String>, keypoints: usize) -> Result<Self, StackingError> {
        model_ids.sort();
        model_ids.dedup();
        if model_ids.is_empty() {
            return Err(StackingError::InvalidConfig("feature layout needs at least one model".into()));
        }
        if keypoints == 0 {
            return Err(StackingError::InvalidConfig("feature layout needs at least one keypoint".into()));
        }
        Ok(FeatureLayout { model_ids, keypoints })
    }

    /// `3·K + 1`: `(x, y, conf)` per keypoint plus the detection score.
    pub fn block_len(&self) -> usize {
        3 * self.keypoints + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.model_ids.len() * self.block_len()
    }

    pub fn target_dim(&self) -> usize {
        2 * self.keypoints
    }

    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.model_ids.binary_search_by(|m| m.as_str().cmp(id)).ok()
    }
}

/// Normalization box: `x' = (x − x0)/w`, `y' = (y − y0)/h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Frame {
    pub fn normalize(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x) / self.w, (y - self.y) / self.h)
    }

    pub fn denormalize(&self, x: f64, y: f64) -> (f64, f64) {
        (self.x + x * self.w, self.y + y * self.h)
    }

    /// Box around every observed keypoint of every member, each side at
    /// least one pixel.
    pub fn of_group(group: &MatchedGroup) -> Frame {
        let mut pts = group
            .members()
            .iter()
            .flat_map(|(_, p)| p.keypoints.iter())
            .filter(|k| observed(k));
        let Some(first) = pts.next() else {
            return Frame { x: 0.0, y: 0.0, w: 1.0, h: 1.0 };
        };
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for k in pts {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        Frame {
            x: x0,
            y: y0,
            w: (x1 - x0).max(1.0),
            h: (y1 - y0).max(1.0),
        }
    }
}

fn observed(k: &Keypoint) -> bool {
    k.v.is_labeled() || k.confidence > 0.0
}

/// One group encoded as a feature row.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedGroup {
    pub features: Vec<f64>,
    /// Per model in layout order: true when the model has no member.
    pub missing: Vec<bool>,
    pub frame: Frame,
}

/// Encodes `group` under `layout`.
///
/// A member keypoint that is not observed takes the mean normalized position
/// of the members that observe it (the frame center if none do) and zero
/// confidence. An absent model's block is the element-wise mean of the
/// present blocks with score 0.
pub fn encode_group(group: &MatchedGroup, layout: &FeatureLayout) -> Result<EncodedGroup, StackingError> {
    let k = layout.keypoints;
    let b = layout.block_len();
    let frame = Frame::of_group(group);
    let mut present: Vec<Option<&PersonPose>> = vec![None; layout.model_ids.len()];
    for (model, pose) in group.members() {
        let idx = layout.model_index(model).ok_or_else(|| StackingError::UnknownModel(model.clone()))?;
        if pose.keypoints.len() != k {
            return Err(StackingError::DimensionMismatch {
                expected: layout.feature_dim(),
                actual: group.len() * (3 * pose.keypoints.len() + 1),
            });
        }
        present[idx] = Some(pose);
    }

    let mut fill = vec![(0.5, 0.5); k];
    for (j, f) in fill.iter_mut().enumerate() {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for p in present.iter().flatten() {
            let kp = &p.keypoints[j];
            if observed(kp) {
                let (x, y) = frame.normalize(kp.x, kp.y);
                sx += x;
                sy += y;
                n += 1;
            }
        }
        if n > 0 {
            *f = (sx / n as f64, sy / n as f64);
        }
    }

    let mut features = vec![0.0; layout.feature_dim()];
    for (m, p) in present.iter().enumerate() {
        let Some(p) = p else { continue };
        let block = &mut features[m * b..(m + 1) * b];
        for (j, kp) in p.keypoints.iter().enumerate() {
            let (x, y, c) = if observed(kp) {
                let (x, y) = frame.normalize(kp.x, kp.y);
                (x, y, kp.confidence)
            } else {
                (fill[j].0, fill[j].1, 0.0)
            };
            block[3 * j] = x;
            block[3 * j + 1] = y;
            block[3 * j + 2] = c;
        }
        block[3 * k] = p.score;
    }

    let n_present = present.iter().filter(|p| p.is_some()).count();
    let mut mean_block = vec![0.0; 3 * k];
    for (m, p) in present.iter().enumerate() {
        if p.is_some() {
            for (acc, v) in mean_block.iter_mut().zip(&features[m * b..m * b + 3 * k]) {
                *acc += v;
            }
        }
    }
    mean_block.iter_mut().for_each(|v| *v /= n_present.max(1) as f64);
    for (m, p) in present.iter().enumerate() {
        if p.is_none() {
            features[m * b..m * b + 3 * k].copy_from_slice(&mean_block);
            features[m * b + 3 * k] = 0.0;
        }
    }

    Ok(EncodedGroup {
        features,
        missing: present.iter().map(Option::is_none).collect(),
        frame,
    })
}

/// Training rows for a meta-learner.
#[derive(Debug, Clone, PartialEq)]
pub struct StackDataset {
    pub layout: FeatureLayout,
    pub features: Matrix,
    /// Ground-truth keypoints in the row's frame, `(x, y)` per keypoint.
    pub targets: Matrix,
    /// Per row, per model: true when the model had no member in the group.
    pub missing_mask: Vec<Vec<bool>>,
    /// Per row, per keypoint: true when the target keypoint was labeled.
    /// Unlabeled targets hold the member mean so they carry no correction.
    pub target_labeled: Vec<Vec<bool>>,
    pub frames: Vec<Frame>,
    pub image_ids: Vec<u64>,
}

impl StackDataset {
    pub fn rows(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0
    }

    pub fn subset(&self, idx: &[usize]) -> StackDataset {
        StackDataset {
            layout: self.layout.clone(),
            features: self.features.select_rows(idx),
            targets: self.targets.select_rows(idx),
            missing_mask: idx.iter().map(|&i| self.missing_mask[i].clone()).collect(),
            target_labeled: idx.iter().map(|&i| self.target_labeled[i].clone()).collect(),
            frames: idx.iter().map(|&i| self.frames[i]).collect(),
            image_ids: idx.iter().map(|&i| self.image_ids[i]).collect(),
        }
    }

    /// Concatenates datasets that share a layout.
    pub fn concat(parts: &[StackDataset]) -> Result<StackDataset, StackingError> {
        let first = parts.first().ok_or(StackingError::EmptyDataset)?;
        let mut out = StackDataset {
            layout: first.layout.clone(),
            features: Matrix::zeros(0, first.layout.feature_dim()),
            targets: Matrix::zeros(0, first.layout.target_dim()),
            missing_mask: Vec::new(),
            target_labeled: Vec::new(),
            frames: Vec::new(),
            image_ids: Vec::new(),
        };
        let mut feats = Vec::new();
        let mut targs = Vec::new();
        for p in parts {
            if p.layout != first.layout {
                return Err(StackingError::InvalidConfig("datasets have different layouts".into()));
            }
            feats.extend_from_slice(p.features.as_slice());
            targs.extend_from_slice(p.targets.as_slice());
            out.missing_mask.extend(p.missing_mask.iter().cloned());
            out.target_labeled.extend(p.target_labeled.iter().cloned());
            out.frames.extend_from_slice(&p.frames);
            out.image_ids.extend_from_slice(&p.image_ids);
        }
        let n = out.frames.len();
        out.features = Matrix::from_vec(n, first.layout.feature_dim(), feats);
        out.targets = Matrix::from_vec(n, first.layout.target_dim(), targs);
        Ok(out)
    }
}

/// Builds one row per group that matches a ground-truth pose. The layout
/// covers every model id seen in `groups`.
pub fn build_stack_dataset(
    groups: &[MatchedGroup],
    ground_truth: &[PersonPose],
    skeleton: &SkeletonSpec,
    cfg: &AssociationConfig,
) -> Result<StackDataset, StackingError> {
    let ids: BTreeSet<String> = groups.iter().flat_map(|g| g.members().iter().map(|(m, _)| m.clone())).collect();
    if ids.is_empty() {
        return Err(StackingError::NoMatchedRows);
    }
    let layout = FeatureLayout::new(ids.into_iter().collect(), skeleton.len())?;
    build_stack_dataset_with_layout(groups, ground_truth, skeleton, cfg, &layout)
}

/// [`build_stack_dataset`] with an explicit layout.
///
/// Within each image, groups are assigned to non-crowd ground truth by
/// [`hungarian`] on `1 − OKS` between the group's highest-scoring member and
/// the ground truth; pairs below `cfg.oks_threshold` are dropped. Rows keep
/// the order of `groups`.
pub fn build_stack_dataset_with_layout(
    groups: &[MatchedGroup],
    ground_truth: &[PersonPose],
    skeleton: &SkeletonSpec,
    cfg: &AssociationConfig,
    layout: &FeatureLayout,
) -> Result<StackDataset, StackingError> {
    cfg.validate()?;
    let k = skeleton.len();
    if layout.keypoints != k {
        return Err(StackingError::DimensionMismatch {
            expected: layout.keypoints,
            actual: k,
        });
    }
    for gt in ground_truth {
        if gt.keypoints.len() != k {
            return Err(StackingError::DimensionMismatch {
                expected: k,
                actual: gt.keypoints.len(),
            });
        }
    }

    let pairs = pair_with_ground_truth(groups, ground_truth, skeleton, cfg)?;

    let mut feats = Vec::with_capacity(pairs.len() * layout.feature_dim());
    let mut targs = Vec::with_capacity(pairs.len() * layout.target_dim());
    let mut ds = StackDataset {
        layout: layout.clone(),
        features: Matrix::zeros(0, 0),
        targets: Matrix::zeros(0, 0),
        missing_mask: Vec::new(),
        target_labeled: Vec::new(),
        frames: Vec::new(),
        image_ids: Vec::new(),
    };
    for (g, t) in pairs {
        let enc = encode_group(&groups[g], layout)?;
        let gt = &ground_truth[t];
        let mut labeled = Vec::with_capacity(k);
        for (j, kp) in gt.keypoints.iter().enumerate() {
            if kp.v.is_labeled() {
                let (x, y) = enc.frame.normalize(kp.x, kp.y);
                targs.extend([x, y]);
                labeled.push(true);
            } else {
                targs.extend(member_mean(&enc.features, layout, &enc.missing, j));
                labeled.push(false);
            }
        }
        feats.extend_from_slice(&enc.features);
        ds.missing_mask.push(enc.missing);
        ds.target_labeled.push(labeled);
        ds.frames.push(enc.frame);
        ds.image_ids.push(groups[g].image_id());
    }
    let n = ds.frames.len();
    ds.features = Matrix::from_vec(n, layout.feature_dim(), feats);
    ds.targets = Matrix::from_vec(n, layout.target_dim(), targs);
    Ok(ds)
}

/// `(group, ground truth)` index pairs used as stacking rows, sorted by group
/// index. Crowd and fully unlabeled ground truth never pair.
pub fn pair_with_ground_truth(
    groups: &[MatchedGroup],
    ground_truth: &[PersonPose],
    skeleton: &SkeletonSpec,
    cfg: &AssociationConfig,
) -> Result<Vec<(usize, usize)>, StackingError> {
    let mut by_image: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_image.entry(g.image_id()).or_default().0.push(i);
    }
    for (i, gt) in ground_truth.iter().enumerate() {
        if !gt.iscrowd && gt.num_labeled() > 0 {
            if let Some(e) = by_image.get_mut(&gt.image_id) {
                e.1.push(i);
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (gi, ti) in by_image.values() {
        if gi.is_empty() || ti.is_empty() {
            continue;
        }
        let cost: Vec<Vec<f64>> = gi
            .iter()
            .map(|&g| {
                let anchor = groups[g].anchor();
                ti.iter()
                    .map(|&t| {
                        let gt = &ground_truth[t];
                        let sim = gt
                            .scale_area()
                            .and_then(|a| oks_with_area(anchor, gt, a, skeleton.oks_sigmas()))
                            .unwrap_or(0.0);
                        1.0 - sim
                    })
                    .collect()
            })
            .collect();
        for (r, c) in hungarian(&cost)? {
            if 1.0 - cost[r][c] >= cfg.oks_threshold {
                pairs.push((gi[r], ti[c]));
            }
        }
    }
    if pairs.is_empty() {
        return Err(StackingError::NoMatchedRows);
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Extra stacking rows made by articulating matched `(group, ground truth)`
/// pairs.
///
/// Pairs are visited round-robin. Each attempt replays one random
/// articulation, seeded from `params.seed` and the attempt number, on the
/// ground truth and on every member, and keeps the result when the
/// transformed ground truth passes `plaus`. Augmented rows get fresh image
/// ids above every id in the input. Fails with `BudgetUnreachable` after
/// `budget × attempts_max` consecutive rejections.
pub fn augment_pairs(
    groups: &[MatchedGroup],
    ground_truth: &[PersonPose],
    pairs: &[(usize, usize)],
    skeleton: &SkeletonSpec,
    params: &TransformParams,
    plaus: &PlausibilityModel,
    budget: usize,
) -> Result<(Vec<MatchedGroup>, Vec<PersonPose>), StackingError> {
    params.validate()?;
    let (mut out_groups, mut out_gt) = (Vec::with_capacity(budget), Vec::with_capacity(budget));
    if budget == 0 {
        return Ok((out_groups, out_gt));
    }
    if pairs.is_empty() {
        return Err(StackingError::NoMatchedRows);
    }
    let next_id = groups
        .iter()
        .map(MatchedGroup::image_id)
        .chain(ground_truth.iter().map(|p| p.image_id))
        .max()
        .map_or(0, |m| m + 1);
    let patience = budget.saturating_mul(params.attempts_max);
    let (mut attempt, mut stalled) = (0u64, 0usize);
    while out_groups.len() < budget {
        if stalled >= patience {
            return Err(PoseTransError::BudgetUnreachable {
                accepted: out_groups.len(),
                budget,
            }
            .into());
        }
        let (g, t) = pairs[attempt as usize % pairs.len()];
        let seed = derive_seed(params.seed, attempt);
        attempt += 1;
        let replay = |p: &PersonPose| transform_pose(p, skeleton, params, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut gt = replay(&ground_truth[t])?;
        if !plaus.passes(&gt, skeleton)? {
            stalled += 1;
            continue;
        }
        stalled = 0;
        let image_id = next_id + out_groups.len() as u64;
        gt.image_id = image_id;
        let mut members = Vec::with_capacity(groups[g].len());
        for (m, p) in groups[g].members() {
            let mut q = replay(p)?;
            q.image_id = image_id;
            members.push((m.clone(), q));
        }
        out_groups.push(MatchedGroup::new(image_id, members, groups[g].match_quality().to_vec())?);
        out_gt.push(gt);
    }
    Ok((out_groups, out_gt))
}

fn member_mean(features: &[f64], layout: &FeatureLayout, missing: &[bool], j: usize) -> [f64; 2] {
    let b = layout.block_len();
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (m, &miss) in missing.iter().enumerate() {
        if !miss {
            sx += features[m * b + 3 * j];
            sy += features[m * b + 3 * j + 1];
            n += 1.0;
        }
    }
    [sx / n, sy / n]
}

/// Trained parameters of one learner kind.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnerParams {
    Ridge(RidgeModel),
    RandomForest(ForestModel),
    Mlp(MlpModel),
}

/// A trained regressor from feature rows to normalized keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearner {
    params: LearnerParams,
    feature_dim: usize,
    target_dim: usize,
    layout: Option<FeatureLayout>,
}

impl MetaLearner {
    fn from_params(
        params: LearnerParams,
        feature_dim: usize,
        target_dim: usize,
        layout: Option<FeatureLayout>,
    ) -> Result<Self, StackingError> {
        if let Some(l) = &layout {
            if l.feature_dim() != feature_dim || l.target_dim() != target_dim {
                return Err(StackingError::DimensionMismatch {
                    expected: l.feature_dim(),
                    actual: feature_dim,
                });
            }
        }
        Ok(MetaLearner {
            params,
            feature_dim,
            target_dim,
            layout,
        })
    }

    pub fn kind(&self) -> LearnerKind {
        match self.params {
            LearnerParams::Ridge(_) => LearnerKind::Ridge,
            LearnerParams::RandomForest(_) => LearnerKind::RandomForest,
            LearnerParams::Mlp(_) => LearnerKind::Mlp,
        }
    }

    pub fn params(&self) -> &LearnerParams {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn layout(&self) -> Option<&FeatureLayout> {
        self.layout.as_ref()
    }

    /// Attaches a feature layout; its dimensions must agree with the model.
    pub fn with_layout(self, layout: FeatureLayout) -> Result<Self, StackingError> {
        MetaLearner::from_params(self.params, self.feature_dim, self.target_dim, Some(layout))
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<Vec<f64>, StackingError> {
        if row.len() != self.feature_dim {
            return Err(StackingError::DimensionMismatch {
                expected: self.feature_dim,
                actual: row.len(),
            });
        }
        Ok(match &self.params {
            LearnerParams::Ridge(m) => m.predict_row(row),
            LearnerParams::RandomForest(m) => m.predict_row(row),
            LearnerParams::Mlp(m) => m.predict_row(row),
        })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix, StackingError> {
        let mut out = Vec::with_capacity(x.rows() * self.target_dim);
        for r in x.iter_rows() {
            out.extend(self.predict_row(r)?);
        }
        Ok(Matrix::from_vec(x.rows(), self.target_dim, out))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, StackingError> {
        codec::decode(buf)
    }

    pub fn save(&self, path: &Path) -> Result<(), StackingError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StackingError> {
        MetaLearner::from_bytes(&std::fs::read(path)?)
    }
}

/// Closed-form ridge regression with an unpenalized intercept.
pub fn ridge_fit(x: &Matrix, y: &Matrix, lambda: f64) -> Result<MetaLearner, StackingError> {
    let m = ridge::fit(x, y, lambda)?;
    MetaLearner::from_params(LearnerParams::Ridge(m), x.cols(), y.cols(), None)
}

/// Bagged multi-output CART regression trees.
pub fn random_forest_fit(x: &Matrix, y: &Matrix, params: &ForestParams) -> Result<MetaLearner, StackingError> {
    let m = forest::fit(x, y, params)?;
    MetaLearner::from_params(LearnerParams::RandomForest(m), x.cols(), y.cols(), None)
}

/// Trains an MLP, early-stopping on a seeded `split_ratio` holdout of the
/// given rows.
pub fn mlp_fit(x: &Matrix, y: &Matrix, cfg: &TrainConfig, hidden: &[usize]) -> Result<MetaLearner, StackingError> {
    Ok(mlp_fit_detailed(x, y, cfg, hidden)?.0)
}

/// [`mlp_fit`] that also returns the training history.
pub fn mlp_fit_detailed(
    x: &Matrix,
    y: &Matrix,
    cfg: &TrainConfig,
    hidden: &[usize],
) -> Result<(MetaLearner, MlpTraining), StackingError> {
    cfg.validate()?;
    if x.rows() != y.rows() {
        return Err(StackingError::DimensionMismatch {
            expected: x.rows(),
            actual: y.rows(),
        });
    }
    let (tr, va) = split_indices(x.rows(), cfg.split_ratio, cfg.seed);
    mlp_fit_with_validation(
        &x.select_rows(&tr),
        &y.select_rows(&tr),
        &x.select_rows(&va),
        &y.select_rows(&va),
        cfg,
        hidden,
    )
}

/// Trains an MLP on `(xt, yt)` with early stopping on `(xv, yv)`.
pub fn mlp_fit_with_validation(
    xt: &Matrix,
    yt: &Matrix,
    xv: &Matrix,
    yv: &Matrix,
    cfg: &TrainConfig,
    hidden: &[usize],
) -> Result<(MetaLearner, MlpTraining), StackingError> {
    let t = mlp::fit_with_validation(xt, yt, xv, yv, cfg, hidden)?;
    let learner = MetaLearner::from_params(LearnerParams::Mlp(t.model.clone()), xt.cols(), yt.cols(), None)?;
    Ok((learner, t))
}

/// Seeded shuffle split into `round(n·ratio)` training rows and the rest.
/// With two or more rows both parts are non-empty.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_train = (n as f64 * ratio).round() as usize;
    n_train = if n >= 2 { n_train.clamp(1, n - 1) } else { n };
    let val = idx.split_off(n_train);
    (idx, val)
}

/// Holdout metrics recorded by [`stack_train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackReport {
    pub kind: LearnerKind,
    pub train_rows: usize,
    pub val_rows: usize,
    /// MSE in normalized coordinates over all target entries.
    pub val_mse: Option<f64>,
    /// Mean Euclidean error in pixels over labeled target keypoints.
    pub val_pixel_error: Option<f64>,
    pub per_keypoint_pixel_error: Vec<Option<f64>>,
    /// Same MSE for each base model's own keypoints, over the validation
    /// rows where that model is present.
    pub base_model_val_mse: Vec<(String, Option<f64>)>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedStack {
    pub learner: MetaLearner,
    pub report: StackReport,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Splits `dataset` by seeded shuffle, fits `spec` on the training part and
/// evaluates on the holdout. The forest's seed is taken from `cfg.seed`.
pub fn stack_train(dataset: &StackDataset, spec: &LearnerSpec, cfg: &TrainConfig) -> Result<TrainedStack, StackingError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(StackingError::EmptyDataset);
    }
    let (tr, va) = split_indices(dataset.rows(), cfg.split_ratio, cfg.seed);
    let (xt, yt) = (dataset.features.select_rows(&tr), dataset.targets.select_rows(&tr));
    let (xv, yv) = (dataset.features.select_rows(&va), dataset.targets.select_rows(&va));

    let (learner, history, best_epoch) = match spec {
        LearnerSpec::Ridge { lambda } => (ridge_fit(&xt, &yt, *lambda)?, Vec::new(), None),
        LearnerSpec::RandomForest(p) => {
            let p = ForestParams { seed: cfg.seed, ..p.clone() };
            (random_forest_fit(&xt, &yt, &p)?, Vec::new(), None)
        }
        LearnerSpec::Mlp { hidden } => {
            let (l, t) = mlp_fit_with_validation(&xt, &yt, &xv, &yv, cfg, hidden)?;
            (l, t.history, Some(t.best_epoch))
        }
    };
    let learner = learner.with_layout(dataset.layout.clone())?;

    let val = dataset.subset(&va);
    let pred = learner.predict(&xv)?;
    let k = dataset.layout.keypoints;
    let (val_mse, val_pixel_error, per_keypoint_pixel_error) = if va.is_empty() {
        (None, None, vec![None; k])
    } else {
        let (mean, per) = pixel_errors(&val, &pred);
        (Some(mse(&pred, &yv)), mean, per)
    };
    let base_model_val_mse = base_model_mse(&val);

    Ok(TrainedStack {
        learner,
        report: StackReport {
            kind: spec.kind(),
            train_rows: tr.len(),
            val_rows: va.len(),
            val_mse,
            val_pixel_error,
            per_keypoint_pixel_error,
            base_model_val_mse,
            history,
            best_epoch,
        },
        train_indices: tr,
        val_indices: va,
    })
}

/// Mean pixel error of normalized predictions against the dataset targets,
/// overall and per keypoint, over labeled targets only.
pub fn pixel_errors(ds: &StackDataset, pred: &Matrix) -> (Option<f64>, Vec<Option<f64>>) {
    let k = ds.layout.keypoints;
    let mut sum = vec![0.0; k];
    let mut cnt = vec![0usize; k];
    for i in 0..ds.rows() {
        let f = ds.frames[i];
        for j in 0..k {
            if !ds.target_labeled[i][j] {
                continue;
            }
            let (px, py) = f.denormalize(pred.get(i, 2 * j), pred.get(i, 2 * j + 1));
            let (tx, ty) = f.denormalize(ds.targets.get(i, 2 * j), ds.targets.get(i, 2 * j + 1));
            sum[j] += (px - tx).hypot(py - ty);
            cnt[j] += 1;
        }
    }
    let total: usize = cnt.iter().sum();
    let mean = (total > 0).then(|| sum.iter().sum::<f64>() / total as f64);
    let per = sum.iter().zip(&cnt).map(|(s, &c)| (c > 0).then(|| s / c as f64)).collect();
    (mean, per)
}

/// MSE of each base model's normalized keypoints against the targets, over
/// rows where the model is present.
pub fn base_model_mse(ds: &StackDataset) -> Vec<(String, Option<f64>)> {
    let k = ds.layout.keypoints;
    let b = ds.layout.block_len();
    ds.layout
        .model_ids
        .iter()
        .enumerate()
        .map(|(m, id)| {
            let (mut sse, mut n) = (0.0, 0usize);
            for i in 0..ds.rows() {
                if ds.missing_mask[i][m] {
                    continue;
                }
                let row = ds.features.row(i);
                for j in 0..k {
                    for a in 0..2 {
                        sse += (row[m * b + 3 * j + a] - ds.targets.get(i, 2 * j + a)).powi(2);
                    }
                }
                n += 2 * k;
            }
            (id.clone(), (n > 0).then(|| sse / n as f64))
        })
        .collect()
}

/// Refines a group with a trained learner.
///
/// Predicted coordinates are mapped back to pixels. A keypoint observed by
/// any member takes the highest member visibility and the mean observed
/// confidence; otherwise it is unlabeled with zero confidence. The detection
/// score is the mean of member scores.
pub fn stack_predict(model: &MetaLearner, group: &MatchedGroup, skeleton: &SkeletonSpec) -> Result<FusedResult, StackingError> {
    let layout = model
        .layout()
        .ok_or_else(|| StackingError::InvalidConfig("model carries no feature layout".into()))?;
    if skeleton.len() != layout.keypoints {
        return Err(StackingError::DimensionMismatch {
            expected: model.feature_dim(),
            actual: layout.model_ids.len() * (3 * skeleton.len() + 1),
        });
    }
    if group.is_empty() {
        return Err(StackingError::EmptyDataset);
    }
    let enc = encode_group(group, layout)?;
    let pred = model.predict_row(&enc.features)?;

    let members = group.members();
    let mut keypoints = Vec::with_capacity(layout.keypoints);
    for j in 0..layout.keypoints {
        let (x, y) = enc.frame.denormalize(pred[2 * j], pred[2 * j + 1]);
        let mut v = Visibility::Unlabeled;
        let (mut conf, mut n) = (0.0, 0usize);
        for (_, p) in members {
            let kp = &p.keypoints[j];
            if observed(kp) {
                v = v.max(if kp.v.is_labeled() { kp.v } else { Visibility::Visible });
                conf += kp.confidence;
                n += 1;
            }
        }
        let conf = if n > 0 { (conf / n as f64).clamp(0.0, 1.0) } else { 0.0 };
        keypoints.push(Keypoint::new(x, y, v, conf));
    }
    let score = members.iter().map(|(_, p)| p.score).sum::<f64>() / members.len() as f64;
    let share = 1.0 / members.len() as f64;
    Ok(FusedResult {
        pose: FusedPose::Keypoints(PersonPose::new(group.image_id(), "fused", keypoints, score)),
        member_weights: members.iter().map(|(m, _)| (m.clone(), share)).collect(),
        strategy: format!("stack:{}", model.kind()),
    })
}
