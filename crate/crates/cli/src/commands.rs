use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use posefuse::association::{match_all_images, match_instances};
use posefuse::bagging::{fuse_keypoints, BaggingConfig, BaggingMode, FusedResult, WeightNormalization};
use posefuse::dataio::{
    load_annotations, load_predictions, write_annotations, write_json, write_poses, write_results, CocoImage, RunConfig,
};
use posefuse::eval::{bench_table, bench_throughput, evaluate_map, evaluate_pckh, keypoint_confusion, EvalReport};
use posefuse::exec;
use posefuse::model::{skeleton_by_name, MatchedGroup, PersonPose, SkeletonSpec};
use posefuse::posetrans::{augment_dataset, cluster_poses, PlausibilityModel, TransformParams};
use posefuse::stacking::{
    augment_pairs, build_stack_dataset, build_stack_dataset_with_layout, pair_with_ground_truth, stack_predict,
    stack_train, ForestParams, LearnerKind, LearnerSpec, MetaLearner, StackDataset, StackReport,
};
use posefuse::synth::{
    run_fusion_experiment, simulate_detector, DetectorNoiseModel, ExperimentConfig, SceneGenerator, Strategy,
};

use crate::args::{
    AugmentArgs, BenchArgs, Command, DetectorArg, EvalArgs, ExperimentArgs, FuseArgs, MatchArgs, RunArgs, SceneArgs,
    StrategyArg, SynthArgs, TrainArgs, TrainStackArgs, TransformArgs,
};
use crate::Failure;

pub fn run(command: Command) -> Result<String, Failure> {
    match command {
        Command::Match(a) => run_match(a),
        Command::Fuse(a) => run_fuse(a),
        Command::TrainStack(a) => run_train_stack(a),
        Command::Augment(a) => run_augment(a),
        Command::Eval(a) => run_eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Synth(a) => run_synth(a),
        Command::Experiment(a) => run_experiment(a),
    }
}

fn base_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => Ok(RunConfig::read(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn apply_run_args(cfg: &mut RunConfig, a: &RunArgs) {
    if let Some(s) = &a.skeleton {
        cfg.skeleton = s.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(p) = &a.ground_truth {
        cfg.ground_truth = Some(p.clone());
    }
    if !a.predictions.is_empty() {
        cfg.predictions = a.predictions.iter().cloned().collect();
    }
    if let Some(t) = a.oks_threshold {
        cfg.association.oks_threshold = t;
    }
    if let Some(s) = a.allow_singletons {
        cfg.association.allow_singletons = s;
    }
}

fn run_config(a: &RunArgs, extra: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, Failure> {
    let mut cfg = base_config(a.config.as_deref())?;
    apply_run_args(&mut cfg, a);
    extra(&mut cfg);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn skeleton(name: &str) -> Result<SkeletonSpec, Failure> {
    skeleton_by_name(name).ok_or_else(|| Failure::Usage(format!("unknown skeleton `{name}`")))
}

fn load_all_predictions(cfg: &RunConfig, sk: &SkeletonSpec) -> Result<BTreeMap<String, Vec<PersonPose>>, Failure> {
    let files: Vec<(&String, &PathBuf)> = cfg.predictions.iter().collect();
    let loaded = exec::try_map_slice(&files, |(id, path)| load_predictions(path, id, sk))?;
    Ok(files.into_iter().map(|(id, _)| id.clone()).zip(loaded).collect())
}

fn load_ground_truth(path: Option<&Path>, sk: &SkeletonSpec) -> Result<(Vec<CocoImage>, Vec<PersonPose>), Failure> {
    let path = path.ok_or_else(|| Failure::Usage("a ground-truth file is required (--ground-truth)".into()))?;
    Ok(load_annotations(path, sk)?)
}

fn matched_groups(cfg: &RunConfig, sk: &SkeletonSpec) -> Result<Vec<MatchedGroup>, Failure> {
    let per_model = load_all_predictions(cfg, sk)?;
    Ok(match_all_images(&per_model, sk, &cfg.association)?)
}

fn run_match(a: MatchArgs) -> Result<String, Failure> {
    let cfg = run_config(&a.run, |_| {})?;
    let sk = cfg.skeleton_spec()?;
    let groups = matched_groups(&cfg, &sk)?;
    match &a.groups {
        Some(path) => {
            write_json(&groups, path)?;
            Ok(format!("groups={}\n", groups.len()))
        }
        None => {
            let mut s = serde_json::to_string_pretty(&groups).map_err(|e| Failure::Data(e.to_string()))?;
            s.push('\n');
            Ok(s)
        }
    }
}

#[derive(Serialize)]
struct FuseSummary<'a> {
    groups: usize,
    fused: usize,
    strategy: &'a str,
    evaluation: Option<EvalReport>,
}

fn run_fuse(a: FuseArgs) -> Result<String, Failure> {
    let cfg = run_config(&a.run, |c| {
        if let Some(p) = &a.output {
            c.output = p.clone();
        }
        if let Some(p) = &a.summary {
            c.summary = Some(p.clone());
        }
        if let Some(p) = &a.model {
            c.model = Some(p.clone());
        }
        if let Some(m) = a.strategy.and_then(StrategyArg::mode) {
            c.bagging.mode = m;
        }
        if let Some(e) = a.epsilon {
            c.bagging.epsilon = e;
        }
        if let Some(n) = a.weight_normalization {
            c.bagging.weight_normalization = n;
        }
    })?;
    let sk = cfg.skeleton_spec()?;
    let groups = matched_groups(&cfg, &sk)?;
    let (fused, strategy): (Vec<FusedResult>, String) = if a.strategy == Some(StrategyArg::Stack) {
        let path = cfg.model.as_deref().ok_or_else(|| Failure::Usage("--strategy stack needs --model".into()))?;
        let model = MetaLearner::load(path)?;
        let fused = exec::try_map_slice(&groups, |g| stack_predict(&model, g, &sk))?;
        (fused, format!("stack:{}", model.kind()))
    } else {
        let fused = exec::try_map_slice(&groups, |g| fuse_keypoints(g, &cfg.bagging))?;
        (fused, bagging_name(&cfg.bagging))
    };
    write_results(&fused, &cfg.output)?;

    let evaluation = match &cfg.ground_truth {
        Some(path) => {
            let (_, gt) = load_annotations(path, &sk)?;
            let poses: Vec<PersonPose> = fused.iter().filter_map(|f| f.keypoints().cloned()).collect();
            let mut report = evaluate_map(&poses, &gt, &sk)?;
            report.per_image.clear();
            Some(report)
        }
        None => None,
    };
    let mut line = format!("groups={} fused={} strategy={}", groups.len(), fused.len(), strategy);
    if let Some(r) = &evaluation {
        let _ = write!(line, " map={:.3}", r.map);
    }
    line.push('\n');
    if let Some(path) = &cfg.summary {
        let summary = FuseSummary {
            groups: groups.len(),
            fused: fused.len(),
            strategy: &strategy,
            evaluation,
        };
        write_json(&summary, path)?;
    }
    Ok(line)
}

fn bagging_name(b: &BaggingConfig) -> String {
    match (b.mode, b.weight_normalization) {
        (BaggingMode::Simple, _) => "simple".into(),
        (BaggingMode::Weighted, WeightNormalization::SumWeights) => "weighted".into(),
        (BaggingMode::Weighted, WeightNormalization::LiteralOneOverN) => "weighted_1_over_n".into(),
    }
}

fn apply_train_args(cfg: &mut RunConfig, t: &TrainArgs) {
    let c = &mut cfg.train;
    if let Some(v) = t.dropout_rate {
        c.dropout_rate = v;
    }
    if let Some(v) = t.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = t.decay {
        c.decay = v;
    }
    if let Some(v) = t.epochs {
        c.epochs = v;
    }
    if let Some(v) = t.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = t.split_ratio {
        c.split_ratio = v;
    }
    if let Some(v) = t.early_stop_patience {
        c.early_stop_patience = v;
    }
    if let Some(v) = t.optimizer {
        c.optimizer = v;
    }
}

fn transform_params(t: &TransformArgs, seed: u64) -> TransformParams {
    TransformParams {
        limb_rotation_max: t.limb_rotation_max,
        limb_scale_range: (t.limb_scale_min, t.limb_scale_max),
        attempts_max: t.attempts_max,
        seed,
    }
}

fn plausibility_corpus(gt: &[PersonPose]) -> Vec<PersonPose> {
    gt.iter().filter(|p| !p.iscrowd && p.num_labeled() > 0).cloned().collect()
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    rows: usize,
    augmented_rows: usize,
    report: &'a StackReport,
}

fn run_train_stack(a: TrainStackArgs) -> Result<String, Failure> {
    let cfg = run_config(&a.run, |c| {
        apply_train_args(c, &a.train);
        if let Some(p) = &a.model {
            c.model = Some(p.clone());
        }
        if let Some(p) = &a.summary {
            c.summary = Some(p.clone());
        }
    })?;
    let sk = cfg.skeleton_spec()?;
    let model_path = cfg.model.clone().ok_or_else(|| Failure::Usage("a model output path is required (--model)".into()))?;
    let (_, gt) = load_ground_truth(cfg.ground_truth.as_deref(), &sk)?;
    let groups = matched_groups(&cfg, &sk)?;
    let mut dataset = build_stack_dataset(&groups, &gt, &sk, &cfg.association)?;
    let base_rows = dataset.rows();

    if a.augment_budget > 0 {
        let plaus = PlausibilityModel::fit(&plausibility_corpus(&gt), &sk, a.transform.plausibility_threshold)?;
        let pairs = pair_with_ground_truth(&groups, &gt, &sk, &cfg.association)?;
        let params = transform_params(&a.transform, cfg.seed);
        let (extra_groups, extra_gt) = augment_pairs(&groups, &gt, &pairs, &sk, &params, &plaus, a.augment_budget)?;
        let extra = build_stack_dataset_with_layout(&extra_groups, &extra_gt, &sk, &cfg.association, &dataset.layout)?;
        dataset = StackDataset::concat(&[dataset, extra])?;
    }

    let spec = match a.learner {
        LearnerKind::Ridge => LearnerSpec::Ridge { lambda: a.lambda },
        LearnerKind::RandomForest => LearnerSpec::RandomForest(ForestParams {
            trees: a.trees,
            max_depth: a.max_depth,
            min_leaf: a.min_leaf,
            ..Default::default()
        }),
        LearnerKind::Mlp => LearnerSpec::Mlp { hidden: a.hidden.clone() },
    };
    let trained = stack_train(&dataset, &spec, &cfg.train)?;
    trained.learner.save(&model_path)?;
    let r = &trained.report;
    let f = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x:.6}"));
    let mut s = format!(
        "learner={} rows={} augmented={} train={} val={} val_mse={} val_pixel_error={}\n",
        r.kind,
        dataset.rows(),
        dataset.rows() - base_rows,
        r.train_rows,
        r.val_rows,
        f(r.val_mse),
        f(r.val_pixel_error)
    );
    for (m, mse) in &r.base_model_val_mse {
        let _ = writeln!(s, "base={m} val_mse={}", f(*mse));
    }
    if let Some(path) = &cfg.summary {
        let summary = TrainSummary {
            rows: dataset.rows(),
            augmented_rows: dataset.rows() - base_rows,
            report: r,
        };
        write_json(&summary, path)?;
    }
    Ok(s)
}

fn run_augment(a: AugmentArgs) -> Result<String, Failure> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(s) = &a.skeleton {
        cfg.skeleton = s.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.ground_truth {
        cfg.ground_truth = Some(p.clone());
    }
    let sk = skeleton(&cfg.skeleton)?;
    let (images, gt) = load_ground_truth(cfg.ground_truth.as_deref(), &sk)?;
    let corpus = plausibility_corpus(&gt);
    let plaus = PlausibilityModel::fit(&corpus, &sk, a.transform.plausibility_threshold)?;
    let clusters = cluster_poses(&corpus, &sk, a.clusters, cfg.seed)?;
    let params = transform_params(&a.transform, cfg.seed);
    let extra = augment_dataset(&corpus, &sk, &params, &plaus, &clusters, a.budget)?;
    let added = extra.len();
    let mut all = gt;
    all.extend(extra);
    write_annotations(&images, &all, &sk, &a.output)?;
    Ok(format!("source={} augmented={} clusters={}\n", corpus.len(), added, clusters.k))
}

fn run_eval(a: EvalArgs) -> Result<String, Failure> {
    let mut cfg = base_config(a.config.as_deref())?;
    if let Some(s) = &a.skeleton {
        cfg.skeleton = s.clone();
    }
    if let Some(p) = &a.ground_truth {
        cfg.ground_truth = Some(p.clone());
    }
    let results = a.results.clone().unwrap_or_else(|| cfg.output.clone());
    let sk = skeleton(&cfg.skeleton)?;
    let (_, gt) = load_ground_truth(cfg.ground_truth.as_deref(), &sk)?;
    let preds = load_predictions(&results, "results", &sk)?;
    let mut report = evaluate_map(&preds, &gt, &sk)?;
    if sk.head_segment().is_some() {
        report.pckh_05 = Some(evaluate_pckh(&preds, &gt, &sk, 0.5)?);
    }
    if let Some(d) = a.distance_threshold {
        report = report.with_confusion(&keypoint_confusion(&preds, &gt, &sk, d)?.metrics());
    }
    if a.json {
        let mut s = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
        s.push('\n');
        Ok(s)
    } else {
        Ok(report.to_table())
    }
}

fn noise_model(d: &DetectorArg, seed: u64) -> DetectorNoiseModel {
    DetectorNoiseModel {
        coordinate_noise_sigma: d.sigma,
        score_bias: d.score_bias,
        miss_rate: d.miss_rate,
        systematic_offset: d.offset,
        seed,
    }
}

fn run_bench(a: BenchArgs) -> Result<String, Failure> {
    let sk = skeleton("coco17")?;
    let gen = SceneGenerator::new(&sk)?;
    let detectors = [("det_a", 4.0), ("det_b", 4.0)];
    let mut frames = Vec::with_capacity(a.resolutions.len());
    for (i, &res) in a.resolutions.iter().enumerate() {
        let seed = exec::derive_seed(a.seed, i as u64);
        let scene = gen.scene(a.people, res, i as u64, seed)?;
        let mut per_model = BTreeMap::new();
        for (d, &(name, sigma)) in detectors.iter().enumerate() {
            let noise = DetectorNoiseModel {
                coordinate_noise_sigma: sigma,
                seed: exec::derive_seed(seed, d as u64 + 1),
                ..Default::default()
            };
            per_model.insert(name.to_string(), simulate_detector(&scene.people, &noise, &sk, name)?);
        }
        frames.push((res, per_model));
    }
    let cfg = BaggingConfig::weighted();
    let fuse_frame = |per_model: &BTreeMap<String, Vec<PersonPose>>| -> Result<Vec<FusedResult>, Failure> {
        let groups = match_instances(per_model, &sk, &Default::default())?;
        Ok(groups.iter().map(|g| fuse_keypoints(g, &cfg)).collect::<Result<Vec<_>, _>>()?)
    };
    let mut failure = None;
    let rows = bench_throughput(
        |res| {
            if let Some((_, f)) = frames.iter().find(|(r, _)| *r == res) {
                if let Err(e) = fuse_frame(f) {
                    failure.get_or_insert(e);
                }
            }
        },
        &a.resolutions,
        a.repeats,
    )
    .map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(path) = &a.output {
        let mut all = Vec::new();
        for (_, f) in &frames {
            all.extend(fuse_frame(f)?.into_iter().filter_map(|r| r.keypoints().cloned()));
        }
        write_poses(&all, path)?;
    }
    Ok(bench_table(&rows))
}

fn detector_models(scene: &SceneArgs) -> Result<Vec<(String, DetectorNoiseModel)>, Failure> {
    let mut seen = std::collections::BTreeSet::new();
    scene
        .detectors
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if !seen.insert(d.name.clone()) {
                return Err(Failure::Usage(format!("detector `{}` is listed twice", d.name)));
            }
            let m = noise_model(d, exec::derive_seed(scene.seed, i as u64 + 1));
            m.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            Ok((d.name.clone(), m))
        })
        .collect()
}

fn run_synth(a: SynthArgs) -> Result<String, Failure> {
    let sk = skeleton(&a.scene.skeleton)?;
    if a.scene.people_min > a.scene.people_max {
        return Err(Failure::Usage("--people-min exceeds --people-max".into()));
    }
    let detectors = detector_models(&a.scene)?;
    let gen = SceneGenerator::new(&sk)?;
    let size = (a.scene.width, a.scene.height);
    let scenes = exec::map_range(a.scenes, |i| {
        use rand::{Rng, SeedableRng};
        let seed = exec::derive_seed(a.scene.seed, i as u64);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(a.scene.people_min..=a.scene.people_max);
        gen.scene(n, size, i as u64 + 1, rng.random())
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let images: Vec<CocoImage> = scenes.iter().map(|s| s.image.clone()).collect();
    let gt: Vec<PersonPose> = scenes.iter().flat_map(|s| s.people.iter().cloned()).collect();
    write_annotations(&images, &gt, &sk, &a.out_dir.join("ground_truth.json"))?;
    let mut cfg = RunConfig {
        skeleton: a.scene.skeleton.clone(),
        seed: a.scene.seed,
        ground_truth: Some("ground_truth.json".into()),
        output: "fused_results.json".into(),
        summary: Some("summary.json".into()),
        model: Some("stack_model.bin".into()),
        ..Default::default()
    };
    cfg.train.seed = a.scene.seed;
    for (name, noise) in &detectors {
        let mut preds = Vec::new();
        for s in &scenes {
            let n = DetectorNoiseModel {
                seed: exec::derive_seed(noise.seed, s.image.id),
                ..noise.clone()
            };
            preds.extend(simulate_detector(&s.people, &n, &sk, name)?);
        }
        let file = format!("{name}.json");
        write_poses(&preds, &a.out_dir.join(&file))?;
        cfg.predictions.insert(name.clone(), file.into());
    }
    std::fs::write(a.out_dir.join("run.toml"), cfg.to_toml())?;
    Ok(format!("scenes={} people={} detectors={}\n", scenes.len(), gt.len(), detectors.len()))
}

fn parse_strategy(s: &str) -> Result<Strategy, Failure> {
    let bag = |mode, weight_normalization| {
        Strategy::Bagging(BaggingConfig {
            mode,
            weight_normalization,
            ..Default::default()
        })
    };
    Ok(match s {
        "simple" => bag(BaggingMode::Simple, WeightNormalization::SumWeights),
        "weighted" => bag(BaggingMode::Weighted, WeightNormalization::SumWeights),
        "weighted_1_over_n" => bag(BaggingMode::Weighted, WeightNormalization::LiteralOneOverN),
        other => match other.strip_prefix("stack:") {
            Some(kind) => Strategy::Stacking(LearnerSpec::default_for(kind.parse::<LearnerKind>().map_err(|e| Failure::Usage(e.to_string()))?)),
            None => return Err(Failure::Usage(format!("unknown strategy `{other}`"))),
        },
    })
}

fn run_experiment(a: ExperimentArgs) -> Result<String, Failure> {
    let strategies = a.strategies.iter().map(|s| parse_strategy(s)).collect::<Result<Vec<_>, _>>()?;
    let cfg = ExperimentConfig {
        skeleton: a.scene.skeleton.clone(),
        num_scenes: a.scenes,
        people_per_scene: (a.scene.people_min, a.scene.people_max),
        image_size: (a.scene.width, a.scene.height),
        detectors: detector_models(&a.scene)?,
        strategies,
        stack_train_scenes: a.stack_train_scenes,
        seed: a.scene.seed,
        ..Default::default()
    };
    let report = run_fusion_experiment(&cfg).map_err(|e| match e {
        posefuse::synth::SynthError::InvalidExperiment(m) => Failure::Usage(m),
        other => other.into(),
    })?;
    if a.json {
        let mut s = serde_json::to_string_pretty(&report).map_err(|e| Failure::Data(e.to_string()))?;
        s.push('\n');
        return Ok(s);
    }
    let mut s = report.to_table();
    for c in &report.comparisons {
        let _ = writeln!(
            s,
            "{} vs {}: error diff {:+.3} px, 95% CI [{:+.3}, {:+.3}] over {} scenes",
            c.method, c.baseline, c.mean_diff, c.ci_low, c.ci_high, c.scenes
        );
    }
    Ok(s)
}
