//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use posefuse::association::hungarian;
use posefuse::bagging::{
    fuse_keypoints, simple_bag_rigid, weight_from_score, weighted_bag_rigid, BaggingConfig, WeightNormalization,
};
use posefuse::dataio::{load_annotations, load_predictions, write_annotations, write_poses};
use posefuse::eval::{bench_table, bench_throughput, confusion_metrics, evaluate_map, f1_score};
use posefuse::mat3::Mat3;
use posefuse::model::{skeleton_by_name, Keypoint, MatchedGroup, PersonPose, RigidPose, SkeletonSpec};
use posefuse::posetrans::{
    apply_bone_transform, augment_dataset, cluster_poses, PlausibilityModel, TransformParams,
};
use posefuse::rotation::{brute_force_rotation_mean, chordal_mean, chordal_mean_weighted, chordal_objective, RotationSample};
use posefuse::stacking::{
    mlp_fit_with_validation, ridge_fit, stack_train, ForestParams, LearnerParams, LearnerSpec, Matrix, MetaLearner,
    MlpModel, Optimizer, TrainConfig,
};
use posefuse::synth::{
    run_fusion_experiment, synthetic_stack_dataset, ArticulationPrior, DetectorNoiseModel, ExperimentConfig, Strategy,
};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    loop {
        let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 0.1 && n <= 1.0 {
            let axis = [v[0] / n, v[1] / n, v[2] / n];
            return Mat3::from_axis_angle(axis, rng.random_range(0.0..std::f64::consts::PI));
        }
    }
}

fn c1_rotation_mean() -> Check {
    let start = Instant::now();
    let step = 1f64.to_radians();
    let mut worst_gap = f64::NEG_INFINITY;
    for set in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(set);
        let n = rng.random_range(2..=8);
        let samples: Vec<RotationSample> =
            (0..n).map(|_| RotationSample::new(random_rotation(&mut rng), 1.0).unwrap()).collect();
        let closed = chordal_mean_weighted(&samples).map_err(|e| e.to_string())?;
        let grid = brute_force_rotation_mean(&samples, step).map_err(|e| e.to_string())?;
        let (a, b) = (chordal_objective(&samples, &closed), chordal_objective(&samples, &grid));
        worst_gap = worst_gap.max(a - b);
        ensure(a <= b + 1e-12, || format!("set {set}: closed form {a} > grid {b}"))?;
    }
    let mean = chordal_mean(&[Mat3::rot_z(0.2), Mat3::rot_z(0.4)]).map_err(|e| e.to_string())?;
    let err = (mean - Mat3::rot_z(0.3)).frobenius_norm();
    ensure(err < 1e-9, || format!("Rz(0.2), Rz(0.4) mean is {err} from Rz(0.3)"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("100 sets, worst closed-minus-grid objective {worst_gap:.3e}, same-axis error {err:.1e}, {elapsed:.2?}"))
}

fn c2_score_weight() -> Check {
    let w = weight_from_score(0.5, 1e-6).map_err(|e| e.to_string())?;
    // 1 / (0.5² + 1e-6) = 1 / 0.250001
    let hand = 3.999_984_000_064;
    ensure((w - hand).abs() < 1e-9, || format!("got {w}, expected {hand}"))?;
    let mut prev = f64::NEG_INFINITY;
    for i in 0..=1000 {
        let sc = i as f64 * 1e-3;
        let w = weight_from_score(sc, 1e-6).map_err(|e| e.to_string())?;
        ensure(w > prev, || format!("not increasing at sc = {sc}"))?;
        prev = w;
    }
    Ok(format!("w(0.5) = {w:.12}, strictly increasing over 1001 grid points"))
}

fn random_group(rng: &mut ChaCha8Rng, image: u64) -> MatchedGroup {
    let n = rng.random_range(2..=5);
    let score = rng.random_range(0.0..=1.0);
    let members = (0..n)
        .map(|m| {
            let kps = (0..17)
                .map(|_| Keypoint::visible(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0)))
                .collect();
            (format!("m{m}"), PersonPose::new(image, format!("m{m}"), kps, score))
        })
        .collect();
    MatchedGroup::new(image, members, vec![1.0; n]).unwrap()
}

fn c3_bagging_reduction() -> Check {
    let weighted = BaggingConfig::weighted();
    let simple = BaggingConfig::simple();
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_group(&mut rng, seed);
        let a = fuse_keypoints(&g, &weighted).map_err(|e| e.to_string())?;
        let b = fuse_keypoints(&g, &simple).map_err(|e| e.to_string())?;
        let (a, b) = (a.keypoints().unwrap(), b.keypoints().unwrap());
        for (p, q) in a.keypoints.iter().zip(&b.keypoints) {
            ensure(p.x.to_bits() == q.x.to_bits() && p.y.to_bits() == q.y.to_bits(), || {
                format!("group {seed}: weighted {:?} != simple {:?}", (p.x, p.y), (q.x, q.y))
            })?;
        }
        let n = rng.random_range(2..=5);
        let score = rng.random_range(0.0..=1.0);
        let poses: Vec<RigidPose> = (0..n)
            .map(|_| {
                let t = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
                RigidPose::new(t, random_rotation(&mut rng)).unwrap()
            })
            .collect();
        let wr = weighted_bag_rigid(&poses, &vec![score; n], &weighted).map_err(|e| e.to_string())?;
        let sr = simple_bag_rigid(&poses).map_err(|e| e.to_string())?;
        ensure(wr == sr, || format!("rigid set {seed}: weighted {wr:?} != simple {sr:?}"))?;
    }

    let poses = [
        RigidPose::new([0.0; 3], Mat3::IDENTITY).unwrap(),
        RigidPose::new([1.0, 0.0, 0.0], Mat3::IDENTITY).unwrap(),
    ];
    let (w0, w1) = (1.0 / (0.01 + 1e-6), 1.0 / (0.25 + 1e-6));
    let normalized = weighted_bag_rigid(&poses, &[0.9, 0.5], &weighted).map_err(|e| e.to_string())?.translation()[0];
    ensure((normalized - 0.03846).abs() < 1e-5 && (normalized - w1 / (w0 + w1)).abs() < 1e-15, || {
        format!("normalized x = {normalized}")
    })?;
    let literal_cfg = BaggingConfig {
        weight_normalization: WeightNormalization::LiteralOneOverN,
        ..weighted
    };
    let literal = weighted_bag_rigid(&poses, &[0.9, 0.5], &literal_cfg).map_err(|e| e.to_string())?.translation()[0];
    // (1/2)·(w0·0 + w1·1)
    let hand = 0.5 * w1;
    ensure((literal - hand).abs() < 1e-12, || format!("literal x = {literal}, hand {hand}"))?;
    Ok(format!("50 keypoint + 50 rigid groups bit-identical; x = {normalized:.5} normalized, {literal:.6} literal"))
}

fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let (rows, cols) = (cost.len(), cost[0].len());
    fn rec(cost: &[Vec<f64>], r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, transpose: bool) {
        let (rows, cols) = if transpose { (cost[0].len(), cost.len()) } else { (cost.len(), cost[0].len()) };
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let v = if transpose { cost[c][r] } else { cost[r][c] };
                rec(cost, r + 1, used, acc + v, best, transpose);
                used[c] = false;
            }
        }
    }
    let transpose = rows > cols;
    let mut best = f64::INFINITY;
    let mut used = vec![false; if transpose { rows } else { cols }];
    rec(cost, 0, &mut used, 0.0, &mut best, transpose);
    best
}

fn c4_assignment() -> Check {
    let start = Instant::now();
    for inst in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(inst);
        let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let cost: Vec<Vec<f64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
        let pairs = hungarian(&cost).map_err(|e| e.to_string())?;
        ensure(pairs.len() == r.min(c), || format!("instance {inst}: {} pairs for {r}x{c}", pairs.len()))?;
        let total: f64 = pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        let best = brute_assignment(&cost);
        ensure((total - best).abs() < 1e-9, || format!("instance {inst}: hungarian {total} vs exhaustive {best}"))?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!("1000 instances up to 6x6 optimal, {elapsed:.2?}"))
}

fn c5_table_arithmetic() -> Check {
    let round4 = |v: f64| (v * 1e4).round() / 1e4;
    let a = f1_score(0.9950, 1.0).ok_or("undefined F1")?;
    let b = f1_score(0.9950, 0.9800).ok_or("undefined F1")?;
    ensure(round4(a) == 0.9975, || format!("F1(0.995, 1.0) = {a}"))?;
    ensure(round4(b) == 0.9874, || format!("F1(0.995, 0.98) = {b}"))?;
    let m = confusion_metrics(199, 1, 0, 0);
    ensure(round4(m.f1.unwrap_or(0.0)) == 0.9975, || format!("counts 199/1/0 give {m:?}"))?;
    let m = confusion_metrics(9751, 49, 199, 0);
    ensure(round4(m.f1.unwrap_or(0.0)) == 0.9874, || format!("counts 9751/49/199 give {m:?}"))?;
    Ok(format!("F1 {:.4} and {:.4}", a, b))
}

fn eval_person(image: u64, dx: f64, score: f64) -> PersonPose {
    let kps = (0..17).map(|j| Keypoint::visible(100.0 + dx + 7.0 * j as f64, 80.0 + 11.0 * j as f64)).collect();
    PersonPose::new(image, "m", kps, score)
}

fn c6_evaluator() -> Check {
    let sk = skeleton_by_name("coco17").unwrap();
    let gt = vec![
        eval_person(1, 0.0, 1.0).with_area(5000.0),
        eval_person(1, 400.0, 1.0).with_area(20000.0),
        eval_person(2, 0.0, 1.0).with_area(5000.0),
    ];
    let r = evaluate_map(&gt, &gt, &sk).map_err(|e| e.to_string())?;
    ensure(r.map == 1.0, || format!("perfect predictions give {}", r.map))?;
    let r = evaluate_map(&[], &gt, &sk).map_err(|e| e.to_string())?;
    ensure(r.map == 0.0, || format!("empty predictions give {}", r.map))?;

    let g2 = vec![eval_person(1, 0.0, 1.0).with_area(5000.0), eval_person(1, 500.0, 1.0).with_area(5000.0)];
    let hit_first = vec![eval_person(1, 0.0, 0.9), eval_person(1, 2000.0, 0.8)];
    let r = evaluate_map(&hit_first, &g2, &sk).map_err(|e| e.to_string())?;
    ensure((r.map_50 - 51.0 / 101.0).abs() < 1e-12, || format!("hit-first AP50 {}", r.map_50))?;
    let miss_first = vec![eval_person(1, 0.0, 0.8), eval_person(1, 2000.0, 0.9)];
    let r = evaluate_map(&miss_first, &g2, &sk).map_err(|e| e.to_string())?;
    ensure((r.map_50 - 0.5 * 51.0 / 101.0).abs() < 1e-12, || format!("miss-first AP50 {}", r.map_50))?;

    for seed in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_gt = rng.random_range(1..=4);
        let gt: Vec<PersonPose> = (0..n_gt)
            .map(|i| eval_person(rng.random_range(1..=2), 300.0 * i as f64, 1.0).with_area(rng.random_range(500.0..20000.0)))
            .collect();
        let preds: Vec<PersonPose> = (0..rng.random_range(0..=5))
            .map(|_| {
                let base = &gt[rng.random_range(0..gt.len())];
                let s = rng.random_range(0.0..30.0);
                let kps = base
                    .keypoints
                    .iter()
                    .map(|k| Keypoint::visible(k.x + rng.random_range(-s..=s), k.y + rng.random_range(-s..=s)))
                    .collect();
                PersonPose::new(base.image_id, "m", kps, rng.random_range(0.0..=1.0))
            })
            .collect();
        let r = evaluate_map(&preds, &gt, &sk).map_err(|e| e.to_string())?;
        ensure(r.map <= r.map_50, || format!("seed {seed}: mAP {} > mAP_50 {}", r.map, r.map_50))?;
    }
    Ok("exact 1.0 / 0.0, hand PR cases to 1e-12, mAP <= mAP_50 on 500 seeds".into())
}

/// Full-batch gradient descent on the centered ridge objective.
fn ridge_by_gradient_descent(x: &[Vec<f64>], y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let (n, d) = (x.len(), x[0].len());
    let xm: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let ym = y.iter().sum::<f64>() / n as f64;
    let xc: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&xm).map(|(a, m)| a - m).collect()).collect();
    let mut w = vec![0.0; d];
    // Step below 1/L for L = 2·(‖Xc‖_F² + λ).
    let frob: f64 = xc.iter().flatten().map(|v| v * v).sum();
    let step = 0.9 / (2.0 * (frob + lambda));
    for _ in 0..200_000 {
        let mut grad = vec![0.0; d];
        for (row, &yi) in xc.iter().zip(y) {
            let r: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() - (yi - ym);
            for j in 0..d {
                grad[j] += 2.0 * r * row[j];
            }
        }
        for j in 0..d {
            grad[j] += 2.0 * lambda * w[j];
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for j in 0..d {
            w[j] -= step * grad[j];
        }
        if norm < 1e-12 {
            break;
        }
    }
    let b = ym - xm.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    (w, b)
}

fn c7_meta_learner_oracles() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..50).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| 1.5 * r[0] - 2.0 * r[1] + 0.5 * r[2] + 0.1 * r[3] + 3.0 + rng.random_range(-0.3..0.3))
            .collect();
        let xm = Matrix::from_rows(&x);
        let ym = Matrix::from_vec(50, 1, y.clone());
        let model = ridge_fit(&xm, &ym, 0.1).map_err(|e| e.to_string())?;
        let LearnerParams::Ridge(r) = model.params() else {
            return Err("ridge_fit returned another learner".into());
        };
        let (w, b) = ridge_by_gradient_descent(&x, &y, 0.1);
        for j in 0..4 {
            worst = worst.max((r.coefficients.get(j, 0) - w[j]).abs());
        }
        worst = worst.max((r.intercept[0] - b).abs());
    }
    ensure(worst < 1e-5, || format!("ridge differs from gradient descent by {worst}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = MlpModel::init(5, &[3], 2, 11);
    for p in net.params_mut().iter_mut().skip(15).take(3) {
        *p = 0.3;
    }
    let xs = Matrix::from_vec(8, 5, (0..40).map(|_| rng.random_range(-1.0..1.0)).collect());
    let ys = Matrix::from_vec(8, 2, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let analytic = net.gradient(&xs, &ys);
    let mut worst_rel = 0.0f64;
    let h = 1e-6;
    for i in 0..net.params().len() {
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let numeric = (plus.loss(&xs, &ys) - minus.loss(&xs, &ys)) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst_rel = worst_rel.max(rel);
    }
    ensure(worst_rel < 1e-4, || format!("MLP gradient relative error {worst_rel}"))?;

    // Validation targets are the negated training targets, so fitting the
    // training data makes validation worse after the first epochs.
    let xt = Matrix::from_vec(64, 1, (0..64).map(|i| -1.0 + 2.0 * i as f64 / 63.0).collect());
    let yt = xt.clone();
    let yv = Matrix::from_vec(64, 1, xt.as_slice().iter().map(|v| -v).collect());
    let cfg = TrainConfig {
        dropout_rate: 0.0,
        learning_rate: 0.05,
        epochs: 60,
        batch_size: 16,
        early_stop_patience: 3,
        optimizer: Optimizer::Sgd,
        seed: 3,
        ..Default::default()
    };
    let (_, t) = mlp_fit_with_validation(&xt, &yt, &xt, &yv, &cfg, &[8]).map_err(|e| e.to_string())?;
    let best = t
        .history
        .iter()
        .map(|e| e.val_loss)
        .fold(f64::INFINITY, f64::min);
    let kept = t.model.loss(&xt, &yv);
    let last = t.history.last().map(|e| e.val_loss).unwrap_or(f64::NAN);
    ensure(t.stopped_early, || "training did not stop early".into())?;
    ensure((kept - best).abs() <= 1e-12 * best.max(1.0), || format!("kept val loss {kept}, best {best}"))?;
    ensure(last > best, || format!("last val loss {last} is not worse than best {best}"))?;
    Ok(format!(
        "ridge max gap {worst:.1e}, MLP grad rel err {worst_rel:.1e}, early stop kept epoch {} of {}",
        t.best_epoch,
        t.history.len()
    ))
}

fn identity_plus_noise() -> ExperimentConfig {
    let det = |name: &str, sigma: f64, seed: u64| {
        (
            name.to_string(),
            DetectorNoiseModel {
                coordinate_noise_sigma: sigma,
                seed,
                ..Default::default()
            },
        )
    };
    ExperimentConfig {
        detectors: vec![det("det_a", 3.0, 1), det("det_b", 6.0, 2)],
        ..Default::default()
    }
}

fn c8_stacking_lift() -> Check {
    let cfg = identity_plus_noise();
    let ds = synthetic_stack_dataset(&cfg, 150, 42).map_err(|e| e.to_string())?;
    let spec = LearnerSpec::Ridge { lambda: 1e-3 };
    let a = stack_train(&ds, &spec, &cfg.train).map_err(|e| e.to_string())?;
    let b = stack_train(&ds, &spec, &cfg.train).map_err(|e| e.to_string())?;
    ensure(a.report == b.report, || "stacking run is not deterministic".into())?;
    let stacked = a.report.val_mse.ok_or("no validation rows")?;
    let best_base = a
        .report
        .base_model_val_mse
        .iter()
        .filter_map(|(_, m)| *m)
        .fold(f64::INFINITY, f64::min);
    ensure(stacked <= best_base, || format!("stacked {stacked} > best base {best_base}"))?;
    Ok(format!("{} rows, stacked val MSE {stacked:.3e} <= best base {best_base:.3e}", ds.rows()))
}

fn c9_fusion_lift() -> Check {
    let det = |name: &str, seed: u64| {
        (
            name.to_string(),
            DetectorNoiseModel {
                coordinate_noise_sigma: 4.0,
                seed,
                ..Default::default()
            },
        )
    };
    let cfg = ExperimentConfig {
        num_scenes: 200,
        detectors: vec![det("det_a", 1), det("det_b", 2)],
        strategies: vec![Strategy::Bagging(BaggingConfig::weighted())],
        seed: 2024,
        ..Default::default()
    };
    let r = run_fusion_experiment(&cfg).map_err(|e| e.to_string())?;
    let fused = r.row("bagging:weighted").ok_or("missing fused row")?;
    let mut notes = Vec::new();
    for d in ["det_a", "det_b"] {
        let base = r.row(d).ok_or("missing detector row")?;
        ensure(fused.map >= base.map, || format!("fused mAP {} < {d} mAP {}", fused.map, base.map))?;
        let c = r.comparison("bagging:weighted", d).ok_or("missing comparison")?;
        ensure(c.significantly_lower(), || format!("error vs {d}: CI [{}, {}]", c.ci_low, c.ci_high))?;
        notes.push(format!("{d} mAP {:.4} CI [{:+.2}, {:+.2}] px", base.map, c.ci_low, c.ci_high));
    }
    Ok(format!("fused mAP {:.4}; {}", fused.map, notes.join("; ")))
}

fn raise_arms(pose: &mut PersonPose, sk: &SkeletonSpec) {
    for chain in &sk.chains()[..2] {
        let side = if chain[0] == 5 { 1.0 } else { -1.0 };
        apply_bone_transform(pose, chain, 0, side * 2.6, 1.0);
    }
}

fn c10_augmentation() -> Check {
    let sk = skeleton_by_name("coco17").unwrap();
    let prior = ArticulationPrior::new(&sk).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut poses: Vec<PersonPose> = (0..100)
        .map(|i| prior.sample(&mut rng, (320.0, 240.0), 60.0, i))
        .collect();
    for p in poses.iter_mut().take(10) {
        raise_arms(p, &sk);
    }
    let plaus = PlausibilityModel::fit(&poses, &sk, 3.0).map_err(|e| e.to_string())?;
    let clusters = cluster_poses(&poses, &sk, 2, 5).map_err(|e| e.to_string())?;
    let rare = (0..clusters.k).min_by_key(|&c| clusters.sizes[c]).unwrap();
    let before = clusters.sizes[rare] as f64 / poses.len() as f64;

    let params = TransformParams {
        seed: 17,
        ..Default::default()
    };
    let out = augment_dataset(&poses, &sk, &params, &plaus, &clusters, 60).map_err(|e| e.to_string())?;
    ensure(out.len() == 60, || format!("{} poses for budget 60", out.len()))?;
    for (i, p) in out.iter().enumerate() {
        ensure(plaus.passes(p, &sk).map_err(|e| e.to_string())?, || format!("augmented pose {i} fails the gate"))?;
    }
    let mut rare_after = clusters.sizes[rare];
    for p in &out {
        if clusters.assign(p, &sk).map_err(|e| e.to_string())? == rare {
            rare_after += 1;
        }
    }
    let after = rare_after as f64 / (poses.len() + out.len()) as f64;
    ensure(after > before, || format!("rare share {before} -> {after}"))?;

    let identity = TransformParams {
        limb_rotation_max: 0.0,
        limb_scale_range: (1.0, 1.0),
        ..params
    };
    let copies = augment_dataset(&poses, &sk, &identity, &plaus, &clusters, 25).map_err(|e| e.to_string())?;
    for c in &copies {
        ensure(poses.iter().any(|p| p == c), || "identity parameters changed a pose".into())?;
    }
    Ok(format!("60 plausible poses, rare share {before:.3} -> {after:.3}, identity gives exact copies"))
}

fn c11_determinism() -> Check {
    let (files_a, out_a) = common::run_all_subcommands(&[])?;
    let (files_b, out_b) = common::run_all_subcommands(&["--jobs", "1"])?;
    ensure(files_a == files_b, || {
        let diff: Vec<&String> = files_a.keys().filter(|k| files_a.get(*k) != files_b.get(*k)).collect();
        format!("output files differ: {diff:?}")
    })?;
    ensure(out_a == out_b, || "standard output differs between runs".into())?;

    let sk = skeleton_by_name("coco17").unwrap();
    let fixture = common::fixture_dir();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let preds = load_predictions(&fixture.join("det_a.json"), "det_a", &sk).map_err(|e| e.to_string())?;
    let (p1, p2) = (tmp.path().join("p1.json"), tmp.path().join("p2.json"));
    write_poses(&preds, &p1).map_err(|e| e.to_string())?;
    let again = load_predictions(&p1, "det_a", &sk).map_err(|e| e.to_string())?;
    ensure(again == preds, || "prediction round trip changed poses".into())?;
    write_poses(&again, &p2).map_err(|e| e.to_string())?;
    let same = |a: &std::path::Path, b: &std::path::Path| std::fs::read(a).ok() == std::fs::read(b).ok();
    ensure(same(&p1, &p2), || "results write/load/write is not byte-identical".into())?;
    let (images, gt) = load_annotations(&fixture.join("ground_truth.json"), &sk).map_err(|e| e.to_string())?;
    let (a1, a2) = (tmp.path().join("a1.json"), tmp.path().join("a2.json"));
    write_annotations(&images, &gt, &sk, &a1).map_err(|e| e.to_string())?;
    let (images2, gt2) = load_annotations(&a1, &sk).map_err(|e| e.to_string())?;
    write_annotations(&images2, &gt2, &sk, &a2).map_err(|e| e.to_string())?;
    ensure(same(&a1, &a2), || "annotation write/load/write is not byte-identical".into())?;

    let ds = synthetic_stack_dataset(&identity_plus_noise(), 20, 8).map_err(|e| e.to_string())?;
    let specs = [
        LearnerSpec::Ridge { lambda: 1.0 },
        LearnerSpec::RandomForest(ForestParams {
            trees: 5,
            ..Default::default()
        }),
        LearnerSpec::Mlp { hidden: vec![8] },
    ];
    let quick = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    for spec in &specs {
        let m = stack_train(&ds, spec, &quick).map_err(|e| e.to_string())?.learner;
        let bytes = m.to_bytes();
        let back = MetaLearner::from_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back.to_bytes() == bytes, || format!("{} model bytes changed", spec.kind()))?;
        let (p, q) = (m.predict(&ds.features).unwrap(), back.predict(&ds.features).unwrap());
        let bitwise = p.as_slice().iter().zip(q.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(bitwise, || format!("{} predictions changed after reload", spec.kind()))?;
    }
    Ok(format!(
        "{} subcommand runs and {} files identical across runs and job counts; dataio and 3 model kinds round-trip exactly",
        common::SUBCOMMAND_RUNS.len(),
        files_a.len()
    ))
}

fn c12_throughput() -> Check {
    let resolutions = [(640, 480), (1280, 720)];
    let rows = bench_throughput(|_| std::thread::sleep(Duration::from_millis(10)), &resolutions, 5)
        .map_err(|e| e.to_string())?;
    ensure(rows.len() == resolutions.len(), || format!("{} rows", rows.len()))?;
    for r in &rows {
        ensure((10.0..=20.0).contains(&r.latency_ms), || format!("median latency {} ms", r.latency_ms))?;
        ensure((r.fps - 1000.0 / r.latency_ms).abs() < 1e-9, || "fps is not 1000 / latency".into())?;
    }
    let table = bench_table(&rows);
    let lines: Vec<&str> = table.lines().collect();
    ensure(lines.len() == 3 && lines[0].contains("resolution") && lines[0].contains("fps"), || {
        format!("unexpected table:\n{table}")
    })?;
    ensure(lines[1].contains("640x480") && lines[2].contains("1280x720"), || format!("rows out of order:\n{table}"))?;
    let lat: Vec<String> = rows.iter().map(|r| format!("{:.2} ms", r.latency_ms)).collect();
    Ok(format!("sleep-10ms medians {}", lat.join(", ")))
}

fn main() {
    let criteria: [Criterion; 12] = [
        ("rotation-mean correctness", c1_rotation_mean),
        ("score weight fidelity", c2_score_weight),
        ("bagging reduction", c3_bagging_reduction),
        ("assignment optimality", c4_assignment),
        ("table arithmetic", c5_table_arithmetic),
        ("evaluator sanity", c6_evaluator),
        ("meta-learner oracles", c7_meta_learner_oracles),
        ("stacking lift", c8_stacking_lift),
        ("fusion lift", c9_fusion_lift),
        ("augmentation contract", c10_augmentation),
        ("determinism and round trips", c11_determinism),
        ("throughput harness", c12_throughput),
    ];
    let mut results = BTreeMap::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match &outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => println!("FAIL {:>2} {name}: {why}", i + 1),
        }
        results.insert(i + 1, outcome.is_ok());
    }
    let failed = results.values().filter(|ok| !**ok).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
