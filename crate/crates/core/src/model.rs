//! Domain types shared across the toolkit: skeleton definitions, keypoints,
//! person poses, rigid poses and matched groups.
//!
//! Every type validates on construction and is immutable afterwards, so values
//! can be shared freely between worker threads.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat3::Mat3;

/// Orthonormality tolerance for freshly constructed rotations.
pub const ROTATION_CONSTRUCT_TOL: f64 = 1e-9;
/// Orthonormality tolerance for rotations produced by arithmetic.
pub const ROTATION_ARITH_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("keypoint count mismatch: expected {expected}, got {actual}")]
    KeypointCountMismatch { expected: usize, actual: usize },
    #[error("{field} out of range [0, 1]: {value}")]
    ScoreOutOfRange { field: String, value: f64 },
    #[error("non-finite coordinate at keypoint {index} ({axis})")]
    NonFiniteCoordinate { index: usize, axis: &'static str },
    #[error("invalid visibility flag {flag} at keypoint {index}")]
    InvalidVisibility { index: usize, flag: u8 },
    #[error("invalid area {0}: must be positive")]
    InvalidArea(f64),
    #[error("invalid bounding box: width and height must be non-negative and finite")]
    InvalidBBox,
    #[error("invalid skeleton `{name}`: {reason}")]
    InvalidSkeleton { name: String, reason: String },
    #[error("matrix is not a rotation: ‖RᵀR − I‖ = {orthonormality:e}, det = {det}")]
    NotARotation { orthonormality: f64, det: f64 },
    #[error("invalid matched group: {0}")]
    InvalidGroup(String),
}

/// Keypoint index sets whose midpoints define the torso axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Torso {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

/// A named keypoint taxonomy with bone topology and OKS falloff constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSkeleton")]
pub struct SkeletonSpec {
    name: String,
    keypoint_names: Vec<String>,
    limb_pairs: Vec<(usize, usize)>,
    oks_sigmas: Vec<f64>,
    torso: Option<Torso>,
    head_segment: Option<(usize, usize)>,
    chains: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
struct RawSkeleton {
    name: String,
    keypoint_names: Vec<String>,
    limb_pairs: Vec<(usize, usize)>,
    oks_sigmas: Vec<f64>,
    #[serde(default)]
    torso: Option<Torso>,
    #[serde(default)]
    head_segment: Option<(usize, usize)>,
    #[serde(default)]
    chains: Vec<Vec<usize>>,
}

impl TryFrom<RawSkeleton> for SkeletonSpec {
    type Error = ModelError;
    fn try_from(raw: RawSkeleton) -> Result<Self, ModelError> {
        SkeletonBuilder {
            torso: raw.torso,
            head_segment: raw.head_segment,
            chains: raw.chains,
        }
        .build(raw.name, raw.keypoint_names, raw.limb_pairs, raw.oks_sigmas)
    }
}

/// Optional skeleton attributes used by normalization, PCKh and augmentation.
#[derive(Debug, Clone, Default)]
pub struct SkeletonBuilder {
    pub torso: Option<Torso>,
    pub head_segment: Option<(usize, usize)>,
    pub chains: Vec<Vec<usize>>,
}

impl SkeletonBuilder {
    pub fn build(
        self,
        name: impl Into<String>,
        keypoint_names: Vec<String>,
        limb_pairs: Vec<(usize, usize)>,
        oks_sigmas: Vec<f64>,
    ) -> Result<SkeletonSpec, ModelError> {
        let name = name.into();
        let bad = |reason: String| ModelError::InvalidSkeleton {
            name: name.clone(),
            reason,
        };
        let k = keypoint_names.len();
        if k == 0 {
            return Err(bad("no keypoints".into()));
        }
        let mut seen = HashSet::new();
        for n in &keypoint_names {
            if !seen.insert(n.as_str()) {
                return Err(bad(format!("duplicate keypoint name `{n}`")));
            }
        }
        if oks_sigmas.len() != k {
            return Err(bad(format!("{} sigmas for {k} keypoints", oks_sigmas.len())));
        }
        if let Some((i, s)) = oks_sigmas
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(bad(format!("sigma {i} is not positive: {s}")));
        }
        let in_range = |i: usize| i < k;
        if let Some(&(a, b)) = limb_pairs.iter().find(|(a, b)| !in_range(*a) || !in_range(*b)) {
            return Err(bad(format!("limb ({a}, {b}) out of range")));
        }
        if let Some(t) = &self.torso {
            if t.upper.is_empty() || t.lower.is_empty() {
                return Err(bad("torso index sets must be nonempty".into()));
            }
            if !t.upper.iter().chain(&t.lower).all(|&i| in_range(i)) {
                return Err(bad("torso index out of range".into()));
            }
        }
        if let Some((a, b)) = self.head_segment {
            if !in_range(a) || !in_range(b) {
                return Err(bad("head segment index out of range".into()));
            }
        }
        for chain in &self.chains {
            if chain.len() < 2 || !chain.iter().all(|&i| in_range(i)) {
                return Err(bad(format!("invalid limb chain {chain:?}")));
            }
        }
        Ok(SkeletonSpec {
            name,
            keypoint_names,
            limb_pairs,
            oks_sigmas,
            torso: self.torso,
            head_segment: self.head_segment,
            chains: self.chains,
        })
    }
}

impl SkeletonSpec {
    /// Builds a skeleton with no torso, head segment or limb chains.
    pub fn new(
        name: impl Into<String>,
        keypoint_names: Vec<String>,
        limb_pairs: Vec<(usize, usize)>,
        oks_sigmas: Vec<f64>,
    ) -> Result<Self, ModelError> {
        SkeletonBuilder::default().build(name, keypoint_names, limb_pairs, oks_sigmas)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Number of keypoints K.
    pub fn len(&self) -> usize {
        self.keypoint_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoint_names.is_empty()
    }

    pub fn keypoint_names(&self) -> &[String] {
        &self.keypoint_names
    }

    pub fn limb_pairs(&self) -> &[(usize, usize)] {
        &self.limb_pairs
    }

    pub fn oks_sigmas(&self) -> &[f64] {
        &self.oks_sigmas
    }

    pub fn torso(&self) -> Option<&Torso> {
        self.torso.as_ref()
    }

    pub fn head_segment(&self) -> Option<(usize, usize)> {
        self.head_segment
    }

    /// Kinematic chains listed from the proximal joint outwards.
    pub fn chains(&self) -> &[Vec<usize>] {
        &self.chains
    }

    pub fn index_of(&self, keypoint: &str) -> Option<usize> {
        self.keypoint_names.iter().position(|n| n == keypoint)
    }
}

const BUILTIN_SKELETONS: &str = include_str!("../data/skeletons.json");

/// Built-in skeletons: `coco17` (COCO keypoints with the reference OKS sigma
/// table) and `mpii16`.
pub fn default_skeletons() -> Vec<SkeletonSpec> {
    serde_json::from_str(BUILTIN_SKELETONS).expect("built-in skeleton table is valid")
}

/// Looks up a built-in skeleton by name.
pub fn skeleton_by_name(name: &str) -> Option<SkeletonSpec> {
    default_skeletons().into_iter().find(|s| s.name == name)
}

/// COCO visibility flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Visibility {
    #[default]
    Unlabeled = 0,
    Occluded = 1,
    Visible = 2,
}

impl Visibility {
    pub fn is_labeled(self) -> bool {
        self != Visibility::Unlabeled
    }
}

impl From<Visibility> for u8 {
    fn from(v: Visibility) -> u8 {
        v as u8
    }
}

impl TryFrom<u8> for Visibility {
    type Error = u8;
    fn try_from(v: u8) -> Result<Self, u8> {
        match v {
            0 => Ok(Visibility::Unlabeled),
            1 => Ok(Visibility::Occluded),
            2 => Ok(Visibility::Visible),
            other => Err(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: Visibility,
    pub confidence: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: Visibility, confidence: f64) -> Self {
        Keypoint { x, y, v, confidence }
    }

    /// A labeled, fully confident keypoint.
    pub fn visible(x: f64, y: f64) -> Self {
        Keypoint::new(x, y, Visibility::Visible, 1.0)
    }

    pub fn unlabeled() -> Self {
        Keypoint::default()
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// One person's keypoints with a detection score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonPose {
    pub keypoints: Vec<Keypoint>,
    pub score: f64,
    pub bbox: Option<BBox>,
    pub area: Option<f64>,
    pub image_id: u64,
    pub source_model: String,
    #[serde(default)]
    pub iscrowd: bool,
}

impl PersonPose {
    pub fn new(image_id: u64, source_model: impl Into<String>, keypoints: Vec<Keypoint>, score: f64) -> Self {
        PersonPose {
            keypoints,
            score,
            bbox: None,
            area: None,
            image_id,
            source_model: source_model.into(),
            iscrowd: false,
        }
    }

    pub fn with_area(mut self, area: f64) -> Self {
        self.area = Some(area);
        self
    }

    pub fn with_bbox(mut self, bbox: BBox) -> Self {
        self.bbox = Some(bbox);
        self
    }

    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.v.is_labeled()).count()
    }

    /// Area from the annotation, falling back to the bounding box.
    pub fn annotated_area(&self) -> Option<f64> {
        self.area.or_else(|| self.bbox.map(|b| b.area()))
    }

    /// Tight box around the labeled keypoints, if any.
    pub fn keypoint_extent(&self) -> Option<BBox> {
        let mut it = self.keypoints.iter().filter(|k| k.v.is_labeled());
        let first = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for k in it {
            x0 = x0.min(k.x);
            y0 = y0.min(k.y);
            x1 = x1.max(k.x);
            y1 = y1.max(k.y);
        }
        Some(BBox {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Object scale used as OKS reference: annotated area, else bbox area,
    /// else the keypoint-extent area floored at one pixel².
    pub fn scale_area(&self) -> Option<f64> {
        match self.annotated_area() {
            Some(a) if a > 0.0 => Some(a),
            _ => self.keypoint_extent().map(|b| b.area().max(1.0)),
        }
    }
}

/// Checks a pose against its skeleton and returns it unchanged when valid.
pub fn validate_pose(pose: PersonPose, skeleton: &SkeletonSpec) -> Result<PersonPose, ModelError> {
    if pose.keypoints.len() != skeleton.len() {
        return Err(ModelError::KeypointCountMismatch {
            expected: skeleton.len(),
            actual: pose.keypoints.len(),
        });
    }
    if !(0.0..=1.0).contains(&pose.score) {
        return Err(ModelError::ScoreOutOfRange {
            field: "score".into(),
            value: pose.score,
        });
    }
    for (i, k) in pose.keypoints.iter().enumerate() {
        if !k.x.is_finite() {
            return Err(ModelError::NonFiniteCoordinate { index: i, axis: "x" });
        }
        if !k.y.is_finite() {
            return Err(ModelError::NonFiniteCoordinate { index: i, axis: "y" });
        }
        if !(0.0..=1.0).contains(&k.confidence) {
            return Err(ModelError::ScoreOutOfRange {
                field: format!("keypoints[{i}].confidence"),
                value: k.confidence,
            });
        }
    }
    if let Some(a) = pose.area {
        if !(a.is_finite() && a > 0.0) {
            return Err(ModelError::InvalidArea(a));
        }
    }
    if let Some(b) = pose.bbox {
        let ok = [b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) && b.w >= 0.0 && b.h >= 0.0;
        if !ok {
            return Err(ModelError::InvalidBBox);
        }
    }
    Ok(pose)
}

/// A 6-DoF rigid pose: translation plus a rotation in SO(3).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    translation: [f64; 3],
    rotation: Mat3,
}

impl RigidPose {
    /// Rejects rotations whose orthonormality or determinant error exceeds 1e-9.
    pub fn new(translation: [f64; 3], rotation: Mat3) -> Result<Self, ModelError> {
        Self::with_tolerance(translation, rotation, ROTATION_CONSTRUCT_TOL)
    }

    pub(crate) fn with_tolerance(translation: [f64; 3], rotation: Mat3, tol: f64) -> Result<Self, ModelError> {
        check_rotation(&rotation, tol)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteCoordinate { index: 0, axis: "translation" });
        }
        Ok(RigidPose { translation, rotation })
    }

    pub fn translation(&self) -> [f64; 3] {
        self.translation
    }

    pub fn rotation(&self) -> Mat3 {
        self.rotation
    }
}

/// Verifies `‖RᵀR − I‖_F ≤ tol` and `|det R − 1| ≤ tol`.
pub fn check_rotation(r: &Mat3, tol: f64) -> Result<(), ModelError> {
    let orthonormality = r.orthonormality_error();
    let det = r.det();
    if !r.is_finite() || !(orthonormality <= tol) || !((det - 1.0).abs() <= tol) {
        return Err(ModelError::NotARotation { orthonormality, det });
    }
    Ok(())
}

/// Co-referring detections of one person from different base models.
///
/// Members are kept sorted by model id so that every downstream reduction sums
/// in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedGroup {
    image_id: u64,
    members: Vec<(String, PersonPose)>,
    match_quality: Vec<f64>,
}

impl MatchedGroup {
    /// `match_quality[i]` is the OKS between member `i` and the group anchor
    /// when the member joined (1.0 for the anchor itself).
    pub fn new(
        image_id: u64,
        members: Vec<(String, PersonPose)>,
        match_quality: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if members.is_empty() {
            return Err(ModelError::InvalidGroup("group has no members".into()));
        }
        if match_quality.len() != members.len() {
            return Err(ModelError::InvalidGroup(format!(
                "{} quality values for {} members",
                match_quality.len(),
                members.len()
            )));
        }
        if let Some(q) = match_quality.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(ModelError::InvalidGroup(format!("match quality {q} outside [0, 1]")));
        }
        let mut seen = HashSet::new();
        for (m, _) in &members {
            if !seen.insert(m.as_str()) {
                return Err(ModelError::InvalidGroup(format!("duplicate source model `{m}`")));
            }
        }
        let mut paired: Vec<_> = members.into_iter().zip(match_quality).collect();
        paired.sort_by(|a, b| a.0 .0.cmp(&b.0 .0));
        let (members, match_quality) = paired.into_iter().unzip();
        Ok(MatchedGroup {
            image_id,
            members,
            match_quality,
        })
    }

    /// Convenience constructor for a single detection.
    pub fn singleton(pose: PersonPose) -> Self {
        let model = pose.source_model.clone();
        MatchedGroup {
            image_id: pose.image_id,
            members: vec![(model, pose)],
            match_quality: vec![1.0],
        }
    }

    pub fn image_id(&self) -> u64 {
        self.image_id
    }

    pub fn members(&self) -> &[(String, PersonPose)] {
        &self.members
    }

    pub fn match_quality(&self) -> &[f64] {
        &self.match_quality
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn member(&self, model: &str) -> Option<&PersonPose> {
        self.members.iter().find(|(m, _)| m == model).map(|(_, p)| p)
    }

    /// Highest-scoring member; ties resolve to the smallest model id.
    pub fn anchor(&self) -> &PersonPose {
        let mut best = &self.members[0].1;
        for (_, p) in &self.members[1..] {
            if p.score > best.score {
                best = p;
            }
        }
        best
    }
}

impl fmt::Display for MatchedGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<&str> = self.members.iter().map(|(m, _)| m.as_str()).collect();
        write!(f, "image {} [{}]", self.image_id, ids.join(", "))
    }
}
