//! Fusion of multi-person pose predictions from several base estimators.
//!
//! The crate covers the full pipeline: associating detections across models,
//! bagging (simple and score-weighted, including chordal L2 rotation
//! averaging), stacking with trainable meta-learners, pose-transformation
//! augmentation, COCO-style evaluation and a synthetic detector benchmark.

// Negated comparisons are used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod association;
pub mod bagging;
pub mod dataio;
pub mod eval;
pub mod exec;
pub mod mat3;
pub mod model;
pub mod posetrans;
pub mod rotation;
pub mod stacking;
pub mod synth;

pub use mat3::Mat3;
pub use model::{
    default_skeletons, skeleton_by_name, validate_pose, BBox, Keypoint, MatchedGroup, ModelError, PersonPose,
    RigidPose, SkeletonSpec, Visibility,
};
