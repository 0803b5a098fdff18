//! Synthetic scenes and simulated detectors for desk-scale fusion
//! experiments.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::association::{hungarian, match_instances, oks_with_area, AssociationConfig, AssociationError};
use crate::bagging::{fuse_keypoints, BaggingConfig, BaggingError, BaggingMode, WeightNormalization};
use crate::dataio::CocoImage;
use crate::eval::{evaluate_map, EvalError};
use crate::exec;
use crate::model::{BBox, Keypoint, MatchedGroup, PersonPose, SkeletonSpec, Visibility};
use crate::posetrans::{apply_bone_transform, PlausibilityModel, PoseTransError};
use crate::stacking::{
    build_stack_dataset_with_layout, stack_predict, stack_train, FeatureLayout, LearnerSpec, StackDataset, StackReport,
    StackingError, TrainConfig,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no articulation template for skeleton `{0}`")]
    UnsupportedSkeleton(String),
    #[error("could not place person {person} after {attempts} attempts")]
    PlacementFailure { person: usize, attempts: usize },
    #[error("invalid detector model: {0}")]
    InvalidNoise(String),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error(transparent)]
    PoseTrans(#[from] PoseTransError),
    #[error(transparent)]
    Association(#[from] AssociationError),
    #[error(transparent)]
    Bagging(#[from] BaggingError),
    #[error(transparent)]
    Stacking(#[from] StackingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

// Standing poses in torso units: torso midpoint at the origin, shoulders to
// hips one unit apart, y pointing down.
const COCO17_TEMPLATE: [(f64, f64); 17] = [
    (0.0, -0.85),
    (0.07, -0.92),
    (-0.07, -0.92),
    (0.15, -0.88),
    (-0.15, -0.88),
    (0.35, -0.5),
    (-0.35, -0.5),
    (0.45, -0.05),
    (-0.45, -0.05),
    (0.5, 0.35),
    (-0.5, 0.35),
    (0.2, 0.5),
    (-0.2, 0.5),
    (0.22, 1.05),
    (-0.22, 1.05),
    (0.23, 1.6),
    (-0.23, 1.6),
];

const MPII16_TEMPLATE: [(f64, f64); 16] = [
    (-0.23, 1.6),
    (-0.22, 1.05),
    (-0.2, 0.5),
    (0.2, 0.5),
    (0.22, 1.05),
    (0.23, 1.6),
    (0.0, 0.5),
    (0.0, -0.5),
    (0.0, -0.62),
    (0.0, -1.05),
    (-0.5, 0.35),
    (-0.45, -0.05),
    (-0.35, -0.5),
    (0.35, -0.5),
    (0.45, -0.05),
    (0.5, 0.35),
];

/// Poses used to fit the shared plausibility model.
const PRIOR_FIT_POSES: usize = 1000;
const PRIOR_FIT_SEED: u64 = 0x0005_EED0_FA11;
const PLACEMENT_ATTEMPTS: usize = 1000;
const MIN_CENTER_GAP: f64 = 10.0;
const OCCLUSION_RATE: f64 = 0.1;

/// Random articulation of a fixed template: every limb bone is rotated by up
/// to ±0.5 rad and scaled by a factor in [0.9, 1.1], then every keypoint is
/// jittered uniformly by up to 3% of the torso length.
#[derive(Debug, Clone, PartialEq)]
pub struct ArticulationPrior {
    skeleton: SkeletonSpec,
    template: Vec<(f64, f64)>,
    pub max_angle: f64,
    pub scale_range: (f64, f64),
    pub jitter: f64,
}

impl ArticulationPrior {
    pub fn new(skeleton: &SkeletonSpec) -> Result<Self, SynthError> {
        let template: Vec<(f64, f64)> = match skeleton.name() {
            "coco17" => COCO17_TEMPLATE.to_vec(),
            "mpii16" => MPII16_TEMPLATE.to_vec(),
            other => return Err(SynthError::UnsupportedSkeleton(other.to_string())),
        };
        Ok(ArticulationPrior {
            skeleton: skeleton.clone(),
            template,
            max_angle: 0.5,
            scale_range: (0.9, 1.1),
            jitter: 0.03,
        })
    }

    pub fn skeleton(&self) -> &SkeletonSpec {
        &self.skeleton
    }

    /// Samples a pose with torso length `torso` centered at `center`. All
    /// keypoints are labeled; a few are marked occluded.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, center: (f64, f64), torso: f64, image_id: u64) -> PersonPose {
        let kps = self.template.iter().map(|&(x, y)| Keypoint::visible(x, y)).collect();
        let mut pose = PersonPose::new(image_id, "gt", kps, 1.0);
        for chain in self.skeleton.chains() {
            for bone in 0..chain.len().saturating_sub(1) {
                let a = rng.random_range(-self.max_angle..=self.max_angle);
                let s = rng.random_range(self.scale_range.0..=self.scale_range.1);
                apply_bone_transform(&mut pose, chain, bone, a, s);
            }
        }
        for k in &mut pose.keypoints {
            k.x = center.0 + torso * (k.x + rng.random_range(-self.jitter..=self.jitter));
            k.y = center.1 + torso * (k.y + rng.random_range(-self.jitter..=self.jitter));
            if rng.random_bool(OCCLUSION_RATE) {
                k.v = Visibility::Occluded;
            }
        }
        let ext = pose.keypoint_extent().expect("all keypoints labeled");
        let pad = 0.1 * ext.w.max(ext.h);
        let bbox = BBox {
            x: ext.x - pad,
            y: ext.y - pad,
            w: ext.w + 2.0 * pad,
            h: ext.h + 2.0 * pad,
        };
        pose.area = Some(bbox.area());
        pose.bbox = Some(bbox);
        pose
    }

    /// Plausibility gate fitted on poses drawn from this prior with a fixed
    /// seed, threshold 3.
    pub fn plausibility_model(&self) -> Result<PlausibilityModel, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(PRIOR_FIT_SEED);
        let corpus: Vec<PersonPose> = (0..PRIOR_FIT_POSES).map(|_| self.sample(&mut rng, (0.0, 0.0), 100.0, 0)).collect();
        Ok(PlausibilityModel::fit(&corpus, &self.skeleton, 3.0)?)
    }
}

/// One synthetic image and its people.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: CocoImage,
    pub people: Vec<PersonPose>,
}

/// Scene sampler sharing one prior and plausibility model.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    pub prior: ArticulationPrior,
    pub plausibility: PlausibilityModel,
}

impl SceneGenerator {
    pub fn new(skeleton: &SkeletonSpec) -> Result<Self, SynthError> {
        let prior = ArticulationPrior::new(skeleton)?;
        let plausibility = prior.plausibility_model()?;
        Ok(SceneGenerator { prior, plausibility })
    }

    /// People are placed with torso lengths between 8% and 20% of the image
    /// height, fully inside the image and with centers at least 10 px apart.
    /// Implausible draws are resampled.
    pub fn scene(&self, num_people: usize, image_size: (u32, u32), image_id: u64, seed: u64) -> Result<Scene, SynthError> {
        let (w, h) = (image_size.0 as f64, image_size.1 as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut people: Vec<PersonPose> = Vec::with_capacity(num_people);
        let mut centers: Vec<(f64, f64)> = Vec::with_capacity(num_people);
        for person in 0..num_people {
            let mut placed = false;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let torso = rng.random_range(0.08 * h..=0.2 * h);
                let (mx, top, bottom) = (0.7 * torso, 1.2 * torso, 1.8 * torso);
                if 2.0 * mx >= w || top + bottom >= h {
                    continue;
                }
                let c = (rng.random_range(mx..w - mx), rng.random_range(top..h - bottom));
                if centers.iter().any(|o| (o.0 - c.0).hypot(o.1 - c.1) < MIN_CENTER_GAP) {
                    continue;
                }
                let pose = self.prior.sample(&mut rng, c, torso, image_id);
                if !self.plausibility.passes(&pose, self.prior.skeleton())? {
                    continue;
                }
                centers.push(c);
                people.push(pose);
                placed = true;
                break;
            }
            if !placed {
                return Err(SynthError::PlacementFailure {
                    person,
                    attempts: PLACEMENT_ATTEMPTS,
                });
            }
        }
        Ok(Scene {
            image: CocoImage {
                id: image_id,
                width: image_size.0,
                height: image_size.1,
                file_name: format!("synthetic_{image_id:06}.png"),
            },
            people,
        })
    }
}

/// One-off form of [`SceneGenerator::scene`].
pub fn generate_scene(
    num_people: usize,
    skeleton: &SkeletonSpec,
    image_size: (u32, u32),
    image_id: u64,
    seed: u64,
) -> Result<Scene, SynthError> {
    SceneGenerator::new(skeleton)?.scene(num_people, image_size, image_id, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorNoiseModel {
    pub coordinate_noise_sigma: f64,
    pub score_bias: f64,
    pub miss_rate: f64,
    pub systematic_offset: (f64, f64),
    pub seed: u64,
}

impl Default for DetectorNoiseModel {
    fn default() -> Self {
        DetectorNoiseModel {
            coordinate_noise_sigma: 4.0,
            score_bias: 0.0,
            miss_rate: 0.0,
            systematic_offset: (0.0, 0.0),
            seed: 0,
        }
    }
}

impl DetectorNoiseModel {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.coordinate_noise_sigma >= 0.0 && self.coordinate_noise_sigma.is_finite()) {
            return Err(SynthError::InvalidNoise(format!("sigma must be >= 0, got {}", self.coordinate_noise_sigma)));
        }
        if !(0.0..1.0).contains(&self.miss_rate) {
            return Err(SynthError::InvalidNoise(format!("miss_rate must be in [0, 1), got {}", self.miss_rate)));
        }
        if !self.score_bias.is_finite() || !self.systematic_offset.0.is_finite() || !self.systematic_offset.1.is_finite() {
            return Err(SynthError::InvalidNoise("bias and offset must be finite".into()));
        }
        Ok(())
    }
}

/// Simulates one detector on ground-truth poses.
///
/// Each pose is dropped with probability `miss_rate`; otherwise every labeled
/// keypoint gets independent Gaussian noise plus the systematic offset.
/// A keypoint's confidence is its OKS term against the ground truth and the
/// detection score is `clamp(OKS + score_bias, 0, 1)`. Unlabeled ground-truth
/// keypoints come out unlabeled with zero confidence.
pub fn simulate_detector(
    gt: &[PersonPose],
    noise: &DetectorNoiseModel,
    skeleton: &SkeletonSpec,
    model_id: &str,
) -> Result<Vec<PersonPose>, SynthError> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, noise.coordinate_noise_sigma).expect("sigma validated");
    let sigmas = skeleton.oks_sigmas();
    let mut out = Vec::with_capacity(gt.len());
    for g in gt {
        let miss = rng.random::<f64>() < noise.miss_rate;
        let area = g.scale_area().unwrap_or(1.0);
        let kps: Vec<Keypoint> = g
            .keypoints
            .iter()
            .zip(sigmas)
            .map(|(k, s)| {
                let (dx, dy) = (normal.sample(&mut rng), normal.sample(&mut rng));
                if !k.v.is_labeled() {
                    return Keypoint::unlabeled();
                }
                let (x, y) = (k.x + dx + noise.systematic_offset.0, k.y + dy + noise.systematic_offset.1);
                let d2 = (x - k.x).powi(2) + (y - k.y).powi(2);
                let conf = (-d2 / (2.0 * area * (2.0 * s).powi(2))).exp();
                Keypoint::new(x, y, if conf > 0.0 { Visibility::Visible } else { Visibility::Unlabeled }, conf)
            })
            .collect();
        if miss {
            continue;
        }
        let mut p = PersonPose::new(g.image_id, model_id, kps, 0.0);
        let q = oks_with_area(&p, g, area, sigmas).unwrap_or(0.0);
        p.score = (q + noise.score_bias).clamp(0.0, 1.0);
        out.push(p);
    }
    Ok(out)
}

/// A fusion method compared in [`run_fusion_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Strategy {
    Bagging(BaggingConfig),
    Stacking(LearnerSpec),
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Bagging(c) => match (c.mode, c.weight_normalization) {
                (BaggingMode::Simple, _) => "bagging:simple".into(),
                (BaggingMode::Weighted, WeightNormalization::SumWeights) => "bagging:weighted".into(),
                (BaggingMode::Weighted, WeightNormalization::LiteralOneOverN) => "bagging:weighted_1_over_n".into(),
            },
            Strategy::Stacking(s) => format!("stack:{}", s.kind()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub skeleton: String,
    pub num_scenes: usize,
    /// Inclusive range of people per scene.
    pub people_per_scene: (usize, usize),
    pub image_size: (u32, u32),
    pub detectors: Vec<(String, DetectorNoiseModel)>,
    pub strategies: Vec<Strategy>,
    pub association: AssociationConfig,
    /// Scenes generated separately to train stacking strategies.
    pub stack_train_scenes: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            skeleton: "coco17".into(),
            num_scenes: 200,
            people_per_scene: (1, 4),
            image_size: (640, 480),
            detectors: vec![
                ("det_a".into(), DetectorNoiseModel { seed: 1, ..Default::default() }),
                ("det_b".into(), DetectorNoiseModel { seed: 2, ..Default::default() }),
            ],
            strategies: vec![
                Strategy::Bagging(BaggingConfig::simple()),
                Strategy::Bagging(BaggingConfig::weighted()),
            ],
            association: AssociationConfig::default(),
            stack_train_scenes: 200,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub map: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub map_medium: Option<f64>,
    pub map_large: Option<f64>,
    /// Mean pixel error over labeled keypoints of OKS-matched people.
    pub mean_keypoint_error: Option<f64>,
}

/// Per-scene paired difference `method − baseline` in mean keypoint error
/// with a normal-approximation 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub method: String,
    pub baseline: String,
    pub scenes: usize,
    pub mean_diff: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PairedComparison {
    /// True when the whole interval lies below zero.
    pub fn significantly_lower(&self) -> bool {
        self.ci_high < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<MethodRow>,
    pub comparisons: Vec<PairedComparison>,
    pub stack_reports: Vec<(String, StackReport)>,
}

impl ExperimentReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn comparison(&self, method: &str, baseline: &str) -> Option<&PairedComparison> {
        self.comparisons.iter().find(|c| c.method == method && c.baseline == baseline)
    }

    /// Text table with one row per method.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let mut s = format!(
            "{:<w$}  {:>7}  {:>7}  {:>7}  {:>10}  {:>9}  {:>9}\n",
            "method", "mAP", "mAP_50", "mAP_75", "mAP_Medium", "mAP_Large", "err_px"
        );
        let f = |v: Option<f64>, p: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.p$}"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>7.4}  {:>7.4}  {:>7.4}  {:>10}  {:>9}  {:>9}",
                r.method,
                r.map,
                r.map_50,
                r.map_75,
                f(r.map_medium, 4),
                f(r.map_large, 4),
                f(r.mean_keypoint_error, 3)
            );
        }
        s
    }
}

struct SceneOutput {
    gt: Vec<PersonPose>,
    /// Per method (detectors first, then strategies).
    preds: Vec<Vec<PersonPose>>,
}

fn detector_outputs(
    scene: &Scene,
    cfg: &ExperimentConfig,
    skeleton: &SkeletonSpec,
    scene_seed: u64,
) -> Result<BTreeMap<String, Vec<PersonPose>>, SynthError> {
    let mut per_model = BTreeMap::new();
    // Seeds depend only on the detector's own seed so a detector listed twice
    // produces identical output.
    for (name, noise) in &cfg.detectors {
        let n = DetectorNoiseModel {
            seed: exec::derive_seed(noise.seed, scene_seed),
            ..noise.clone()
        };
        per_model.insert(name.clone(), simulate_detector(&scene.people, &n, skeleton, name)?);
    }
    Ok(per_model)
}

fn sample_scene(gen: &SceneGenerator, cfg: &ExperimentConfig, image_id: u64, seed: u64) -> Result<Scene, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.people_per_scene.0..=cfg.people_per_scene.1);
    gen.scene(n, cfg.image_size, image_id, rng.random())
}

/// Groups and ground truth from separately seeded scenes, as a stacking
/// training set whose layout covers every configured detector.
pub fn synthetic_stack_dataset(
    cfg: &ExperimentConfig,
    num_scenes: usize,
    seed: u64,
) -> Result<StackDataset, SynthError> {
    let skeleton = experiment_skeleton(cfg)?;
    let gen = SceneGenerator::new(&skeleton)?;
    let layout = FeatureLayout::new(cfg.detectors.iter().map(|d| d.0.clone()).collect(), skeleton.len())?;
    let parts = exec::map_range(num_scenes, |i| -> Result<(Vec<MatchedGroup>, Vec<PersonPose>), SynthError> {
        let s = exec::derive_seed(seed, i as u64);
        let scene = sample_scene(&gen, cfg, i as u64, s)?;
        let per_model = detector_outputs(&scene, cfg, &skeleton, s)?;
        Ok((match_instances(&per_model, &skeleton, &cfg.association)?, scene.people))
    });
    let mut groups = Vec::new();
    let mut gt = Vec::new();
    for p in parts {
        let (g, t) = p?;
        groups.extend(g);
        gt.extend(t);
    }
    Ok(build_stack_dataset_with_layout(&groups, &gt, &skeleton, &cfg.association, &layout)?)
}

fn experiment_skeleton(cfg: &ExperimentConfig) -> Result<SkeletonSpec, SynthError> {
    crate::model::skeleton_by_name(&cfg.skeleton)
        .ok_or_else(|| SynthError::InvalidExperiment(format!("unknown skeleton `{}`", cfg.skeleton)))
}

/// Evaluates every detector and every strategy over the same seeded scenes.
///
/// Scenes are simulated in parallel with seeds derived from `cfg.seed`.
/// Stacking strategies are trained first on `stack_train_scenes` other
/// scenes. Paired comparisons pit each strategy against each detector.
pub fn run_fusion_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, SynthError> {
    if cfg.detectors.len() < 2 {
        return Err(SynthError::InvalidExperiment("at least two detectors are required".into()));
    }
    if cfg.num_scenes == 0 || cfg.people_per_scene.0 > cfg.people_per_scene.1 {
        return Err(SynthError::InvalidExperiment("need scenes and a valid people range".into()));
    }
    cfg.association.validate()?;
    let skeleton = experiment_skeleton(cfg)?;
    let gen = SceneGenerator::new(&skeleton)?;

    let mut stacks = Vec::new();
    for s in &cfg.strategies {
        if let Strategy::Stacking(spec) = s {
            let ds = synthetic_stack_dataset(cfg, cfg.stack_train_scenes, exec::derive_seed(cfg.seed, u64::MAX))?;
            stacks.push(stack_train(&ds, spec, &cfg.train)?);
        }
    }

    let n_methods = cfg.detectors.len() + cfg.strategies.len();
    let outputs = exec::map_range(cfg.num_scenes, |i| -> Result<SceneOutput, SynthError> {
        let s = exec::derive_seed(cfg.seed, i as u64);
        let scene = sample_scene(&gen, cfg, i as u64, s)?;
        let per_model = detector_outputs(&scene, cfg, &skeleton, s)?;
        let groups = match_instances(&per_model, &skeleton, &cfg.association)?;
        let mut preds: Vec<Vec<PersonPose>> = cfg.detectors.iter().map(|(n, _)| per_model[n].clone()).collect();
        let mut stack_i = 0;
        for strat in &cfg.strategies {
            let fused = match strat {
                Strategy::Bagging(b) => groups
                    .iter()
                    .map(|g| Ok(fuse_keypoints(g, b)?.keypoints().expect("keypoint fusion").clone()))
                    .collect::<Result<Vec<_>, SynthError>>()?,
                Strategy::Stacking(_) => {
                    let model = &stacks[stack_i].learner;
                    stack_i += 1;
                    groups
                        .iter()
                        .map(|g| Ok(stack_predict(model, g, &skeleton)?.keypoints().expect("keypoint fusion").clone()))
                        .collect::<Result<Vec<_>, SynthError>>()?
                }
            };
            preds.push(fused);
        }
        Ok(SceneOutput { gt: scene.people, preds })
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let names: Vec<String> = cfg
        .detectors
        .iter()
        .map(|d| d.0.clone())
        .chain(cfg.strategies.iter().map(Strategy::name))
        .collect();
    let gt_all: Vec<PersonPose> = outputs.iter().flat_map(|o| o.gt.iter().cloned()).collect();
    // scene_err[m][i]: mean keypoint error of method m in scene i.
    let scene_err: Vec<Vec<Option<(f64, usize)>>> = (0..n_methods)
        .map(|m| outputs.iter().map(|o| keypoint_error(&o.preds[m], &o.gt, &skeleton)).collect())
        .collect();

    let mut rows = Vec::with_capacity(n_methods);
    for (m, name) in names.iter().enumerate() {
        let preds: Vec<PersonPose> = outputs.iter().flat_map(|o| o.preds[m].iter().cloned()).collect();
        let r = evaluate_map(&preds, &gt_all, &skeleton)?;
        let (sum, n) = scene_err[m].iter().flatten().fold((0.0, 0usize), |a, &(s, c)| (a.0 + s * c as f64, a.1 + c));
        rows.push(MethodRow {
            method: name.clone(),
            map: r.map,
            map_50: r.map_50,
            map_75: r.map_75,
            map_medium: r.map_medium,
            map_large: r.map_large,
            mean_keypoint_error: (n > 0).then(|| sum / n as f64),
        });
    }

    let mut comparisons = Vec::new();
    for s in cfg.detectors.len()..n_methods {
        for d in 0..cfg.detectors.len() {
            let diffs: Vec<f64> = scene_err[s]
                .iter()
                .zip(&scene_err[d])
                .filter_map(|(a, b)| Some(a.as_ref()?.0 - b.as_ref()?.0))
                .collect();
            if diffs.len() < 2 {
                continue;
            }
            let n = diffs.len() as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let half = 1.96 * (var / n).sqrt();
            comparisons.push(PairedComparison {
                method: names[s].clone(),
                baseline: names[d].clone(),
                scenes: diffs.len(),
                mean_diff: mean,
                ci_low: mean - half,
                ci_high: mean + half,
            });
        }
    }

    let stack_reports = cfg
        .strategies
        .iter()
        .filter(|s| matches!(s, Strategy::Stacking(_)))
        .map(Strategy::name)
        .zip(stacks.into_iter().map(|t| t.report))
        .collect();
    Ok(ExperimentReport {
        rows,
        comparisons,
        stack_reports,
    })
}

/// Mean pixel error over labeled ground-truth keypoints of people matched
/// one-to-one (minimum `1 − OKS`, OKS ≥ 0.5), with the number of keypoints
/// it averages. `None` when nothing matches.
pub fn keypoint_error(preds: &[PersonPose], gt: &[PersonPose], skeleton: &SkeletonSpec) -> Option<(f64, usize)> {
    if preds.is_empty() || gt.is_empty() {
        return None;
    }
    let sim: Vec<Vec<f64>> = gt
        .iter()
        .map(|g| {
            let area = g.scale_area().unwrap_or(1.0);
            preds.iter().map(|p| oks_with_area(p, g, area, skeleton.oks_sigmas()).unwrap_or(0.0)).collect()
        })
        .collect();
    let cost: Vec<Vec<f64>> = sim.iter().map(|r| r.iter().map(|s| 1.0 - s).collect()).collect();
    let pairs = hungarian(&cost).ok()?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (g, p) in pairs {
        if sim[g][p] < 0.5 {
            continue;
        }
        for (k, q) in gt[g].keypoints.iter().zip(&preds[p].keypoints) {
            if k.v.is_labeled() {
                sum += (k.x - q.x).hypot(k.y - q.y);
                n += 1;
            }
        }
    }
    (n > 0).then(|| (sum / n as f64, n))
}
