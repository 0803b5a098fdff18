//! COCO keypoint annotation and result files, and the TOML run configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::association::AssociationConfig;
use crate::bagging::{BaggingConfig, FusedResult};
use crate::model::{skeleton_by_name, validate_pose, BBox, Keypoint, ModelError, PersonPose, SkeletonSpec, Visibility};
use crate::stacking::TrainConfig;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at {location}: {message}")]
    Parse { path: String, location: String, message: String },
    #[error("{path}: annotation {index}: {message}")]
    Schema { path: String, index: usize, message: String },
    #[error("{path}: record {index} has {actual} keypoint numbers, expected {expected}")]
    KeypointCountMismatch { path: String, index: usize, expected: usize, actual: usize },
    #[error("{path}: record {index} has score {value} outside [0, 1]")]
    ScoreOutOfRange { path: String, index: usize, value: f64 },
    #[error("{path}: record {index} keypoint {keypoint} has confidence {value} outside [0, 1]")]
    ConfidenceOutOfRange { path: String, index: usize, keypoint: usize, value: f64 },
    #[error("{path}: record {index}: {source}")]
    InvalidPose {
        path: String,
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("cannot write {what}: {message}")]
    Unwritable { what: String, message: String },
    #[error("config: {0}")]
    Config(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T, DataError> {
    serde_json::from_str(text).map_err(|e| DataError::Parse {
        path: path.display().to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    #[serde(default)]
    pub width: u32,
    #[serde(default)]
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    #[serde(default = "person_category")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    #[serde(default)]
    pub num_keypoints: Option<u32>,
    pub area: f64,
    #[serde(default)]
    pub bbox: Option<[f64; 4]>,
    #[serde(default)]
    pub iscrowd: u8,
}

fn person_category() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub keypoints: Vec<String>,
    /// 1-based keypoint index pairs.
    #[serde(default)]
    pub skeleton: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct RawDataset {
    #[serde(default)]
    images: Vec<CocoImage>,
    annotations: Vec<Value>,
}

/// One keypoint result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    #[serde(default = "person_category")]
    pub category_id: u64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

/// Loads a COCO keypoint annotation file as ground-truth poses.
///
/// Every annotation must carry `keypoints` and `area` and reference a listed
/// image. Keypoint triplets are `(x, y, v)`; labeled keypoints get confidence
/// 1. Poses are tagged with the model id `"gt"` and score 1.
pub fn load_annotations(path: &Path, skeleton: &SkeletonSpec) -> Result<(Vec<CocoImage>, Vec<PersonPose>), DataError> {
    let text = read(path)?;
    let raw: RawDataset = parse_json(path, &text)?;
    let p = path.display().to_string();
    let image_ids: BTreeSet<u64> = raw.images.iter().map(|i| i.id).collect();
    let mut poses = Vec::with_capacity(raw.annotations.len());
    for (index, v) in raw.annotations.into_iter().enumerate() {
        let schema = |message: String| DataError::Schema {
            path: p.clone(),
            index,
            message,
        };
        let Some(obj) = v.as_object() else {
            return Err(schema("annotation is not an object".into()));
        };
        for field in ["keypoints", "area", "image_id", "id"] {
            if !obj.contains_key(field) {
                return Err(schema(format!("missing field `{field}`")));
            }
        }
        let ann: CocoAnnotation = serde_json::from_value(v).map_err(|e| schema(e.to_string()))?;
        if !image_ids.contains(&ann.image_id) {
            return Err(schema(format!("unknown image id {}", ann.image_id)));
        }
        let k = skeleton.len();
        if ann.keypoints.len() != 3 * k {
            return Err(DataError::KeypointCountMismatch {
                path: p.clone(),
                index,
                expected: 3 * k,
                actual: ann.keypoints.len(),
            });
        }
        let mut kps = Vec::with_capacity(k);
        for (j, t) in ann.keypoints.chunks_exact(3).enumerate() {
            let v = if t[2] == 0.0 {
                Visibility::Unlabeled
            } else if t[2] == 1.0 {
                Visibility::Occluded
            } else if t[2] == 2.0 {
                Visibility::Visible
            } else {
                return Err(schema(format!("keypoint {j} has visibility {}, expected 0, 1 or 2", t[2])));
            };
            kps.push(Keypoint::new(t[0], t[1], v, if v.is_labeled() { 1.0 } else { 0.0 }));
        }
        let mut pose = PersonPose::new(ann.image_id, "gt", kps, 1.0).with_area(ann.area);
        pose.bbox = ann.bbox.map(|b| BBox { x: b[0], y: b[1], w: b[2], h: b[3] });
        pose.iscrowd = ann.iscrowd != 0;
        let pose = validate_pose(pose, skeleton).map_err(|source| DataError::InvalidPose {
            path: p.clone(),
            index,
            source,
        })?;
        poses.push(pose);
    }
    Ok((raw.images, poses))
}

/// Loads a COCO keypoint results file as poses of `model_id`.
///
/// The third number of each triplet is read as a confidence in `[0, 1]`;
/// a keypoint is visible when its confidence is positive and unlabeled
/// otherwise.
pub fn load_predictions(path: &Path, model_id: &str, skeleton: &SkeletonSpec) -> Result<Vec<PersonPose>, DataError> {
    let text = read(path)?;
    let records: Vec<Value> = parse_json(path, &text)?;
    let p = path.display().to_string();
    let k = skeleton.len();
    let mut poses = Vec::with_capacity(records.len());
    for (index, v) in records.into_iter().enumerate() {
        let r: CocoResult = serde_json::from_value(v).map_err(|e| DataError::Parse {
            path: p.clone(),
            location: format!("record {index}"),
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(DataError::ScoreOutOfRange { path: p.clone(), index, value: r.score });
        }
        if r.keypoints.len() != 3 * k {
            return Err(DataError::KeypointCountMismatch {
                path: p.clone(),
                index,
                expected: 3 * k,
                actual: r.keypoints.len(),
            });
        }
        let mut kps = Vec::with_capacity(k);
        for (j, t) in r.keypoints.chunks_exact(3).enumerate() {
            if !(0.0..=1.0).contains(&t[2]) {
                return Err(DataError::ConfidenceOutOfRange {
                    path: p.clone(),
                    index,
                    keypoint: j,
                    value: t[2],
                });
            }
            let v = if t[2] > 0.0 { Visibility::Visible } else { Visibility::Unlabeled };
            kps.push(Keypoint::new(t[0], t[1], v, t[2]));
        }
        let pose = validate_pose(PersonPose::new(r.image_id, model_id, kps, r.score), skeleton).map_err(|source| {
            DataError::InvalidPose {
                path: p.clone(),
                index,
                source,
            }
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

fn push_num(out: &mut String, what: &str, v: f64) -> Result<(), DataError> {
    if !v.is_finite() {
        return Err(DataError::Unwritable {
            what: what.to_string(),
            message: format!("non-finite value {v}"),
        });
    }
    // 17 significant digits identify every f64 uniquely.
    let _ = write!(out, "{v:.16e}");
    Ok(())
}

/// Serializes poses as a COCO keypoint results array, one record per line,
/// in input order. Each triplet's third number is the keypoint confidence.
pub fn results_json(poses: &[&PersonPose]) -> Result<String, DataError> {
    let mut s = String::from("[");
    for (i, p) in poses.iter().enumerate() {
        s.push_str(if i == 0 { "\n  " } else { ",\n  " });
        let _ = write!(s, "{{\"image_id\": {}, \"category_id\": 1, \"keypoints\": [", p.image_id);
        for (j, k) in p.keypoints.iter().enumerate() {
            if j > 0 {
                s.push_str(", ");
            }
            let what = format!("record {i} keypoint {j}");
            push_num(&mut s, &what, k.x)?;
            s.push_str(", ");
            push_num(&mut s, &what, k.y)?;
            s.push_str(", ");
            push_num(&mut s, &what, k.confidence)?;
        }
        s.push_str("], \"score\": ");
        push_num(&mut s, &format!("record {i} score"), p.score)?;
        s.push('}');
    }
    s.push_str(if poses.is_empty() { "]\n" } else { "\n]\n" });
    Ok(s)
}

fn write_file(path: &Path, text: &str) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes fused keypoint results; rigid results are rejected.
pub fn write_results(results: &[FusedResult], path: &Path) -> Result<(), DataError> {
    let poses = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.keypoints().ok_or_else(|| DataError::Unwritable {
                what: format!("result {i}"),
                message: "rigid poses have no keypoint result schema".into(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_file(path, &results_json(&poses)?)
}

/// Writes plain poses in the results schema.
pub fn write_poses(poses: &[PersonPose], path: &Path) -> Result<(), DataError> {
    let refs: Vec<&PersonPose> = poses.iter().collect();
    write_file(path, &results_json(&refs)?)
}

/// Builds a COCO annotation dataset for `poses`. Each pose needs an area.
pub fn annotations_dataset(images: &[CocoImage], poses: &[PersonPose], skeleton: &SkeletonSpec) -> Result<CocoDataset, DataError> {
    let annotations = poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let area = p.annotated_area().ok_or_else(|| DataError::Unwritable {
                what: format!("annotation {i}"),
                message: "pose has no area".into(),
            })?;
            Ok(CocoAnnotation {
                id: i as u64 + 1,
                image_id: p.image_id,
                category_id: 1,
                keypoints: p.keypoints.iter().flat_map(|k| [k.x, k.y, k.v as u8 as f64]).collect(),
                num_keypoints: Some(p.num_labeled() as u32),
                area,
                bbox: p.bbox.map(|b| [b.x, b.y, b.w, b.h]),
                iscrowd: p.iscrowd as u8,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(CocoDataset {
        images: images.to_vec(),
        annotations,
        categories: vec![CocoCategory {
            id: 1,
            name: "person".into(),
            keypoints: skeleton.keypoint_names().to_vec(),
            skeleton: skeleton.limb_pairs().iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
        }],
    })
}

pub fn write_annotations(images: &[CocoImage], poses: &[PersonPose], skeleton: &SkeletonSpec, path: &Path) -> Result<(), DataError> {
    let ds = annotations_dataset(images, poses, skeleton)?;
    let text = serde_json::to_string_pretty(&ds).map_err(|e| DataError::Unwritable {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, &(text + "\n"))
}

/// Writes any serializable report as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DataError::Unwritable {
        what: path.display().to_string(),
        message: e.to_string(),
    })?;
    write_file(path, &(text + "\n"))
}

/// A complete batch run description, read from TOML.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_skeleton")]
    pub skeleton: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    /// Model id to results file.
    pub predictions: BTreeMap<String, PathBuf>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub summary: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub association: AssociationConfig,
    #[serde(default)]
    pub bagging: BaggingConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_skeleton() -> String {
    "coco17".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("fused_results.json")
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            skeleton: default_skeleton(),
            seed: 0,
            ground_truth: None,
            predictions: BTreeMap::new(),
            output: default_output(),
            summary: None,
            model: None,
            association: AssociationConfig::default(),
            bagging: BaggingConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))
    }

    /// Reads, path-resolves and validates a config file.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let cfg = RunConfig::read(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and path-resolves a config file without validating it, so that
    /// callers can apply overrides first.
    pub fn read(path: &Path) -> Result<Self, DataError> {
        let mut cfg = RunConfig::parse(&read(path)?)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.predictions.values_mut().for_each(fix);
        fix(&mut self.output);
        self.ground_truth.iter_mut().for_each(fix);
        self.summary.iter_mut().for_each(fix);
        self.model.iter_mut().for_each(fix);
    }

    pub fn skeleton_spec(&self) -> Result<SkeletonSpec, DataError> {
        skeleton_by_name(&self.skeleton).ok_or_else(|| DataError::Config(format!("unknown skeleton `{}`", self.skeleton)))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.skeleton_spec()?;
        if self.predictions.is_empty() {
            return Err(DataError::Config("at least one prediction file is required".into()));
        }
        let mut seen = BTreeSet::new();
        let all = self
            .predictions
            .values()
            .chain([&self.output])
            .chain(&self.ground_truth)
            .chain(&self.summary)
            .chain(&self.model);
        for p in all {
            if !seen.insert(p.clone()) {
                return Err(DataError::Config(format!("path {} is used more than once", p.display())));
            }
        }
        self.association.validate().map_err(|e| DataError::Config(e.to_string()))?;
        self.bagging.validate().map_err(|e| DataError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| DataError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::skeleton_by_name;

    fn coco() -> SkeletonSpec {
        skeleton_by_name("coco17").unwrap()
    }

    fn ann_json(numbers: usize) -> String {
        let kps: Vec<String> = (0..numbers).map(|i| if i % 3 == 2 { "2".into() } else { format!("{}", 10 + i) }).collect();
        format!(
            r#"{{"images": [{{"id": 7, "width": 640, "height": 480, "file_name": "a.jpg"}}],
               "annotations": [{{"id": 1, "image_id": 7, "category_id": 1, "keypoints": [{}],
                                 "num_keypoints": 17, "area": 1234.5, "bbox": [1, 2, 30, 40], "iscrowd": 0}}],
               "categories": []}}"#,
            kps.join(",")
        )
    }

    #[test]
    fn minimal_annotation_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("gt.json");
        std::fs::write(&f, ann_json(51)).unwrap();
        let (images, poses) = load_annotations(&f, &coco()).unwrap();
        assert_eq!(images.len(), 1);
        assert_eq!(poses.len(), 1);
        assert_eq!(poses[0].area, Some(1234.5));
        assert_eq!(poses[0].bbox.unwrap().h, 40.0);
        assert_eq!(poses[0].keypoints[0].x, 10.0);
    }

    #[test]
    fn short_keypoint_list() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("gt.json");
        std::fs::write(&f, ann_json(50)).unwrap();
        assert!(matches!(
            load_annotations(&f, &coco()),
            Err(DataError::KeypointCountMismatch { expected: 51, actual: 50, .. })
        ));
    }

    #[test]
    fn missing_area_is_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("gt.json");
        std::fs::write(&f, ann_json(51).replace("\"area\": 1234.5,", "")).unwrap();
        let e = load_annotations(&f, &coco()).unwrap_err();
        assert!(matches!(e, DataError::Schema { index: 0, .. }), "{e}");
        assert!(e.to_string().contains("area"));
    }

    #[test]
    fn empty_annotation_list() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("gt.json");
        std::fs::write(&f, r#"{"images": [], "annotations": []}"#).unwrap();
        assert!(load_annotations(&f, &coco()).unwrap().1.is_empty());
    }

    #[test]
    fn malformed_json_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.json");
        std::fs::write(&f, "[\n{\"image_id\": 1,,}]").unwrap();
        match load_predictions(&f, "a", &coco()) {
            Err(DataError::Parse { location, .. }) => assert!(location.starts_with("line 2"), "{location}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_score_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.json");
        let kps = vec!["1"; 51].join(",");
        std::fs::write(
            &f,
            format!(r#"[{{"image_id": 1, "keypoints": [{kps}], "score": 0.5}}, {{"image_id": 1, "keypoints": [{kps}]}}]"#),
        )
        .unwrap();
        match load_predictions(&f, "a", &coco()) {
            Err(DataError::Parse { location, message, .. }) => {
                assert_eq!(location, "record 1");
                assert!(message.contains("score"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn results_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let kps: Vec<Keypoint> = (0..17)
            .map(|j| Keypoint::new(0.1 * j as f64 + 1.0 / 3.0, -2e-7 * j as f64, Visibility::Visible, 0.123456789))
            .collect();
        let poses = vec![
            PersonPose::new(3, "a", kps.clone(), 0.7),
            PersonPose::new(3, "a", kps, std::f64::consts::FRAC_1_SQRT_2),
        ];
        let f1 = dir.path().join("r1.json");
        write_poses(&poses, &f1).unwrap();
        let back = load_predictions(&f1, "a", &coco()).unwrap();
        assert_eq!(back, poses);
        let f2 = dir.path().join("r2.json");
        write_poses(&back, &f2).unwrap();
        assert_eq!(std::fs::read(&f1).unwrap(), std::fs::read(&f2).unwrap());
    }

    #[test]
    fn empty_results_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("r.json");
        write_results(&[], &f).unwrap();
        assert!(load_predictions(&f, "a", &coco()).unwrap().is_empty());
    }

    #[test]
    fn config_paths_and_validation() {
        let cfg = RunConfig::parse(
            r#"
            skeleton = "coco17"
            seed = 3
            output = "out.json"
            [predictions]
            a = "a.json"
            b = "b.json"
            [bagging]
            mode = "simple"
            [train]
            epochs = 7
            "#,
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.batch_size, 200);
        assert!(cfg.validate().is_ok());
        let mut dup = cfg.clone();
        dup.output = PathBuf::from("a.json");
        assert!(dup.validate().is_err());
        let mut r = cfg.clone();
        r.resolve_paths(Path::new("/data"));
        assert_eq!(r.predictions["a"], PathBuf::from("/data/a.json"));
        assert!(RunConfig::parse("bogus = 1\n[predictions]\na = \"x\"").is_err());
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
