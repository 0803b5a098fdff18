//! Cross-model instance association: OKS similarity, a rectangular Hungarian
//! solver and sequential per-model group merging.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::model::{MatchedGroup, ModelError, PersonPose, SkeletonSpec};

/// Largest cost matrix dimension accepted by [`hungarian`].
pub const MAX_ASSIGNMENT_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssociationError {
    #[error("reference pose has no labeled keypoints")]
    NoLabeledKeypoints,
    #[error("reference pose has neither area nor bbox")]
    MissingArea,
    #[error("cost entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("cost row {row} has {len} entries, expected {expected}")]
    RaggedCost { row: usize, len: usize, expected: usize },
    #[error("cost matrix {rows}×{cols} exceeds the {MAX_ASSIGNMENT_DIM}×{MAX_ASSIGNMENT_DIM} limit")]
    TooLarge { rows: usize, cols: usize },
    #[error("pose from model `{model}` has {actual} keypoints, skeleton `{skeleton}` has {expected}")]
    SkeletonMismatch {
        model: String,
        skeleton: String,
        expected: usize,
        actual: usize,
    },
    #[error("poses from several images ({first} and {other}) passed to one matching call")]
    MixedImages { first: u64, other: u64 },
    #[error("oks threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    pub oks_threshold: f64,
    pub allow_singletons: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        AssociationConfig {
            oks_threshold: 0.5,
            allow_singletons: true,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), AssociationError> {
        if !(0.0..=1.0).contains(&self.oks_threshold) {
            return Err(AssociationError::InvalidThreshold(self.oks_threshold));
        }
        Ok(())
    }
}

/// Object keypoint similarity of `candidate` against `reference`, using the
/// reference's annotated area (or bbox area) as the squared object scale.
///
/// Each labeled reference keypoint contributes `exp(−d² / (2·s²·κ²))` with
/// `κ = 2σ`, matching the reference COCO evaluation code.
pub fn oks(candidate: &PersonPose, reference: &PersonPose, skeleton: &SkeletonSpec) -> Result<f64, AssociationError> {
    let area = reference.annotated_area().ok_or(AssociationError::MissingArea)?;
    if !(area > 0.0) {
        return Err(AssociationError::MissingArea);
    }
    oks_with_area(candidate, reference, area, skeleton.oks_sigmas()).ok_or(AssociationError::NoLabeledKeypoints)
}

/// OKS with an explicit scale; `None` when the reference has no labeled
/// keypoints.
pub fn oks_with_area(candidate: &PersonPose, reference: &PersonPose, area: f64, sigmas: &[f64]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((c, r), &sigma) in candidate.keypoints.iter().zip(&reference.keypoints).zip(sigmas) {
        if !r.v.is_labeled() {
            continue;
        }
        let k2 = (2.0 * sigma).powi(2);
        let d2 = (c.x - r.x).powi(2) + (c.y - r.y).powi(2);
        sum += (-d2 / (2.0 * area * k2)).exp();
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Minimum-cost one-to-one assignment on a rectangular cost matrix.
///
/// Covers `min(rows, cols)` pairs, returned sorted by row. Among optimal
/// assignments the lexicographically smallest `(row, col)` sequence is chosen.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<(usize, usize)>, AssociationError> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    for (r, row) in cost.iter().enumerate() {
        if row.len() != cols {
            return Err(AssociationError::RaggedCost {
                row: r,
                len: row.len(),
                expected: cols,
            });
        }
        if let Some(c) = row.iter().position(|v| !v.is_finite()) {
            return Err(AssociationError::NonFiniteCost { row: r, col: c });
        }
    }
    if rows > MAX_ASSIGNMENT_DIM || cols > MAX_ASSIGNMENT_DIM {
        return Err(AssociationError::TooLarge { rows, cols });
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }

    // Pad to square; dummy rows/columns come last so they never win a
    // lexicographic tie against a real index.
    let n = rows.max(cols);
    let c = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };
    let (u, v, col_of_row) = solve_square(n, &c);

    let scale = cost.iter().flatten().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| c(i, j) - u[i] - v[j] <= tol;
    let col_of_row = lexicographic_min_matching(n, col_of_row, &tight);

    Ok((0..rows)
        .filter_map(|i| {
            let j = col_of_row[i];
            (j < cols).then_some((i, j))
        })
        .collect())
}

/// Shortest augmenting path Hungarian method on a square matrix. Returns the
/// row and column potentials and the optimal column for each row.
fn solve_square(n: usize, c: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based arrays; index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[p[j] - 1] = j - 1;
    }
    (u[1..].to_vec(), v[1..].to_vec(), col_of_row)
}

/// Walks rows in order and fixes each to the smallest tight column that still
/// admits a perfect matching on the tight graph. Every perfect matching of the
/// tight graph is optimal, so the result is the lexicographically smallest
/// optimal assignment.
fn lexicographic_min_matching(n: usize, mut col_of_row: Vec<usize>, tight: &dyn Fn(usize, usize) -> bool) -> Vec<usize> {
    let mut row_of_col = vec![0usize; n];
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }
    let mut col_fixed = vec![false; n];
    for i in 0..n {
        for c in 0..n {
            if col_fixed[c] || !tight(i, c) {
                continue;
            }
            if col_of_row[i] == c {
                col_fixed[c] = true;
                break;
            }
            // Swap in (i, c), then re-route the displaced row to i's old column.
            let displaced = row_of_col[c];
            let old = col_of_row[i];
            let mut trial_cor = col_of_row.clone();
            let mut trial_roc = row_of_col.clone();
            trial_cor[i] = c;
            trial_roc[c] = i;
            let mut blocked = col_fixed.clone();
            blocked[c] = true;
            if augment(displaced, old, i, &blocked, tight, &mut trial_cor, &mut trial_roc) {
                col_of_row = trial_cor;
                row_of_col = trial_roc;
                col_fixed[c] = true;
                break;
            }
        }
        debug_assert!(col_fixed[col_of_row[i]]);
    }
    col_of_row
}

/// Finds an alternating path in the tight graph from the free row `start` to
/// the free column `target`, avoiding blocked columns and rows `≤ last_fixed`.
fn augment(
    start: usize,
    target: usize,
    last_fixed: usize,
    blocked: &[bool],
    tight: &dyn Fn(usize, usize) -> bool,
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) -> bool {
    let n = blocked.len();
    // BFS over columns; parent_row[j] is the row from which column j was reached.
    let mut parent_row = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([start]);
    let mut visited_row = vec![false; n];
    visited_row[start] = true;
    while let Some(r) = queue.pop_front() {
        for j in 0..n {
            if blocked[j] || parent_row[j] != usize::MAX || !tight(r, j) {
                continue;
            }
            parent_row[j] = r;
            if j == target {
                let mut j = j;
                loop {
                    let r = parent_row[j];
                    let next = col_of_row[r];
                    col_of_row[r] = j;
                    row_of_col[j] = r;
                    if r == start {
                        return true;
                    }
                    j = next;
                }
            }
            let nr = row_of_col[j];
            if nr > last_fixed && !visited_row[nr] {
                visited_row[nr] = true;
                queue.push_back(nr);
            }
        }
    }
    false
}

struct WorkingGroup {
    members: Vec<(String, PersonPose)>,
    quality: Vec<f64>,
}

impl WorkingGroup {
    fn anchor(&self) -> &PersonPose {
        let mut best = &self.members[0].1;
        for (_, p) in &self.members[1..] {
            if p.score > best.score {
                best = p;
            }
        }
        best
    }
}

fn check_pose(model: &str, p: &PersonPose, skeleton: &SkeletonSpec) -> Result<(), AssociationError> {
    if p.keypoints.len() != skeleton.len() {
        return Err(AssociationError::SkeletonMismatch {
            model: model.to_string(),
            skeleton: skeleton.name().to_string(),
            expected: skeleton.len(),
            actual: p.keypoints.len(),
        });
    }
    Ok(())
}

/// Similarity used for matching: OKS with the anchor's scale area (annotated,
/// bbox or keypoint extent); zero when the anchor has no labeled keypoints.
fn matching_similarity(candidate: &PersonPose, anchor: &PersonPose, skeleton: &SkeletonSpec) -> f64 {
    anchor
        .scale_area()
        .and_then(|area| oks_with_area(candidate, anchor, area, skeleton.oks_sigmas()))
        .unwrap_or(0.0)
}

/// Groups the detections of one image across models.
///
/// Models are merged in ascending id order. Each new model's poses are
/// assigned to the running groups by [`hungarian`] on `1 − OKS` against each
/// group's highest-scoring member; assigned pairs below the threshold are
/// split. Leftover poses open new groups; single-member groups are dropped at
/// the end unless `allow_singletons`.
pub fn match_instances(
    per_model: &BTreeMap<String, Vec<PersonPose>>,
    skeleton: &SkeletonSpec,
    cfg: &AssociationConfig,
) -> Result<Vec<MatchedGroup>, AssociationError> {
    cfg.validate()?;
    let mut image_id: Option<u64> = None;
    for (model, poses) in per_model {
        for p in poses {
            check_pose(model, p, skeleton)?;
            match image_id {
                None => image_id = Some(p.image_id),
                Some(first) if first != p.image_id => {
                    return Err(AssociationError::MixedImages {
                        first,
                        other: p.image_id,
                    })
                }
                _ => {}
            }
        }
    }
    let Some(image_id) = image_id else {
        return Ok(Vec::new());
    };

    let mut groups: Vec<WorkingGroup> = Vec::new();
    for (model, poses) in per_model {
        let mut taken = vec![false; poses.len()];
        if !groups.is_empty() && !poses.is_empty() {
            let cost: Vec<Vec<f64>> = groups
                .iter()
                .map(|g| {
                    let anchor = g.anchor();
                    poses.iter().map(|p| 1.0 - matching_similarity(p, anchor, skeleton)).collect()
                })
                .collect();
            for (g, p) in hungarian(&cost)? {
                let sim = 1.0 - cost[g][p];
                if sim >= cfg.oks_threshold {
                    groups[g].members.push((model.clone(), poses[p].clone()));
                    groups[g].quality.push(sim.clamp(0.0, 1.0));
                    taken[p] = true;
                }
            }
        }
        for (p, pose) in poses.iter().enumerate() {
            if !taken[p] {
                groups.push(WorkingGroup {
                    members: vec![(model.clone(), pose.clone())],
                    quality: vec![1.0],
                });
            }
        }
    }

    groups
        .into_iter()
        .filter(|g| cfg.allow_singletons || g.members.len() > 1)
        .map(|g| MatchedGroup::new(image_id, g.members, g.quality).map_err(AssociationError::from))
        .collect()
}

/// Runs [`match_instances`] independently per image. Groups are returned in
/// ascending image id order.
pub fn match_all_images(
    per_model: &BTreeMap<String, Vec<PersonPose>>,
    skeleton: &SkeletonSpec,
    cfg: &AssociationConfig,
) -> Result<Vec<MatchedGroup>, AssociationError> {
    let images: BTreeSet<u64> = per_model.values().flatten().map(|p| p.image_id).collect();
    let mut by_image: BTreeMap<u64, BTreeMap<String, Vec<PersonPose>>> =
        images.iter().map(|&id| (id, BTreeMap::new())).collect();
    for (model, poses) in per_model {
        for p in poses {
            by_image
                .get_mut(&p.image_id)
                .expect("image collected above")
                .entry(model.clone())
                .or_default()
                .push(p.clone());
        }
    }
    let buckets: Vec<BTreeMap<String, Vec<PersonPose>>> = by_image.into_values().collect();
    let per_image = exec::try_map_slice(&buckets, |b| match_instances(b, skeleton, cfg))?;
    Ok(per_image.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{skeleton_by_name, Keypoint};

    fn toy_skeleton() -> SkeletonSpec {
        SkeletonSpec::new(
            "toy3",
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2)],
            vec![0.1, 0.2, 0.3],
        )
        .unwrap()
    }

    fn person(model: &str, pts: &[(f64, f64)], score: f64) -> PersonPose {
        PersonPose::new(1, model, pts.iter().map(|&(x, y)| Keypoint::visible(x, y)).collect(), score)
    }

    #[test]
    fn oks_identity_is_one() {
        let sk = toy_skeleton();
        let p = person("m", &[(1.0, 2.0), (3.0, 4.0), (5.0, 6.0)], 1.0).with_area(100.0);
        assert_eq!(oks(&p, &p, &sk).unwrap(), 1.0);
    }

    #[test]
    fn oks_matches_hand_computation() {
        let sk = toy_skeleton();
        let area = 400.0;
        let reference = person("gt", &[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)], 1.0).with_area(area);
        // Displacements 1, 2 and 3 pixels along y.
        let cand = person("p", &[(0.0, 1.0), (10.0, 2.0), (20.0, 3.0)], 1.0);
        // exp(−d²/(2·s²·(2σ)²)) for (d, σ) = (1, 0.1), (2, 0.2), (3, 0.3):
        // each exponent is −(d/σ)²/(8·400) = −1/32 since d/σ = 10 throughout.
        let expected = (-1.0f64 / 32.0).exp();
        assert!((oks(&cand, &reference, &sk).unwrap() - expected).abs() < 1e-15);

        // At d² = 2·s²·κ² every term is e⁻¹.
        let d = |sigma: f64| (2.0 * area * (2.0 * sigma).powi(2)).sqrt();
        let far = person("p", &[(d(0.1), 0.0), (10.0 + d(0.2), 0.0), (20.0 + d(0.3), 0.0)], 1.0);
        assert!((oks(&far, &reference, &sk).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn oks_ignores_unlabeled_reference_keypoints_and_reports_errors() {
        let sk = toy_skeleton();
        let mut reference = person("gt", &[(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)], 1.0).with_area(100.0);
        reference.keypoints[2] = Keypoint::unlabeled();
        let mut cand = reference.clone();
        cand.keypoints[2] = Keypoint::visible(1000.0, 1000.0);
        assert_eq!(oks(&cand, &reference, &sk).unwrap(), 1.0);

        let no_area = person("gt", &[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)], 1.0);
        assert_eq!(oks(&cand, &no_area, &sk), Err(AssociationError::MissingArea));
        let mut empty = reference.clone();
        empty.keypoints = vec![Keypoint::unlabeled(); 3];
        assert_eq!(oks(&cand, &empty, &sk), Err(AssociationError::NoLabeledKeypoints));
    }

    #[test]
    fn hungarian_small_cases() {
        assert_eq!(hungarian(&[vec![5.0]]).unwrap(), vec![(0, 0)]);
        assert_eq!(hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap(), vec![(0, 0), (1, 1)]);
        assert_eq!(hungarian(&[]).unwrap(), vec![]);
        assert_eq!(
            hungarian(&[vec![1.0, f64::NAN]]),
            Err(AssociationError::NonFiniteCost { row: 0, col: 1 })
        );
        let big = vec![vec![0.0; 65]; 2];
        assert!(matches!(hungarian(&big), Err(AssociationError::TooLarge { .. })));
    }

    #[test]
    fn hungarian_rectangular() {
        let wide = [vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]];
        assert_eq!(hungarian(&wide).unwrap(), vec![(0, 1), (1, 0)]);
        let tall = [vec![4.0, 2.0], vec![1.0, 0.0], vec![3.0, 5.0]];
        // Two optima of cost 3; rows (0, 1) beat rows (1, 2).
        assert_eq!(hungarian(&tall).unwrap(), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn hungarian_breaks_ties_lexicographically() {
        let flat = vec![vec![1.0; 4]; 4];
        assert_eq!(hungarian(&flat).unwrap(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        let tall = vec![vec![1.0]; 3];
        assert_eq!(hungarian(&tall).unwrap(), vec![(0, 0)]);
        // Both diagonals cost 2; the main diagonal is lexicographically smaller.
        let tie = [vec![1.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(hungarian(&tie).unwrap(), vec![(0, 0), (1, 1)]);
        let anti = [vec![2.0, 1.0, 1.0], vec![1.0, 2.0, 1.0], vec![1.0, 1.0, 2.0]];
        assert_eq!(hungarian(&anti).unwrap(), vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn matching_merges_identical_and_splits_disjoint() {
        let sk = skeleton_by_name("coco17").unwrap();
        let pts: Vec<(f64, f64)> = (0..17).map(|i| (100.0 + i as f64 * 3.0, 200.0 + i as f64 * 5.0)).collect();
        let far: Vec<(f64, f64)> = pts.iter().map(|(x, y)| (x + 900.0, y + 900.0)).collect();
        let cfg = AssociationConfig::default();

        let mut per_model = BTreeMap::new();
        per_model.insert("a".to_string(), vec![person("a", &pts, 0.9)]);
        per_model.insert("b".to_string(), vec![person("b", &pts, 0.8)]);
        let groups = match_instances(&per_model, &sk, &cfg).unwrap();
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].len(), 2);

        per_model.insert("b".to_string(), vec![person("b", &far, 0.8)]);
        let groups = match_instances(&per_model, &sk, &cfg).unwrap();
        assert_eq!(groups.len(), 2);
        assert!(groups.iter().all(|g| g.len() == 1));

        let strict = AssociationConfig {
            allow_singletons: false,
            ..cfg
        };
        assert!(match_instances(&per_model, &sk, &strict).unwrap().is_empty());
    }

    #[test]
    fn matching_rejects_wrong_skeleton() {
        let sk = skeleton_by_name("coco17").unwrap();
        let mut per_model = BTreeMap::new();
        per_model.insert("a".to_string(), vec![person("a", &[(0.0, 0.0); 16], 0.9)]);
        assert!(matches!(
            match_instances(&per_model, &sk, &AssociationConfig::default()),
            Err(AssociationError::SkeletonMismatch { expected: 17, actual: 16, .. })
        ));
    }
}
