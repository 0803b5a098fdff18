use posefuse::bagging::BaggingConfig;
use posefuse::stacking::{LearnerSpec, LearnerKind};
use posefuse::synth::{run_fusion_experiment, DetectorNoiseModel, ExperimentConfig, Strategy};

fn det(name: &str, sigma: f64, seed: u64) -> (String, DetectorNoiseModel) {
    (name.into(), DetectorNoiseModel { coordinate_noise_sigma: sigma, seed, ..Default::default() })
}

#[test]
fn weighted_bagging_beats_each_unbiased_detector() {
    let cfg = ExperimentConfig {
        num_scenes: 200,
        detectors: vec![det("a", 4.0, 1), det("b", 4.0, 2)],
        strategies: vec![Strategy::Bagging(BaggingConfig::weighted())],
        ..Default::default()
    };
    let r = run_fusion_experiment(&cfg).unwrap();
    println!("{}", r.to_table());
    let fused = r.row("bagging:weighted").unwrap();
    for d in ["a", "b"] {
        assert!(fused.map >= r.row(d).unwrap().map);
        let c = r.comparison("bagging:weighted", d).unwrap();
        println!("{c:?}");
        assert!(c.significantly_lower());
    }
}

#[test]
fn perfect_plus_broken_tracks_the_perfect_detector() {
    let cfg = ExperimentConfig {
        num_scenes: 100,
        detectors: vec![det("perfect", 0.0, 1), det("broken", 50.0, 2)],
        strategies: vec![Strategy::Bagging(BaggingConfig::weighted())],
        ..Default::default()
    };
    let r = run_fusion_experiment(&cfg).unwrap();
    println!("{}", r.to_table());
    let fused = r.row("bagging:weighted").unwrap().map;
    assert!((fused - r.row("perfect").unwrap().map).abs() <= 0.02);
}

#[test]
fn duplicated_detector_is_a_fixed_point() {
    let cfg = ExperimentConfig {
        num_scenes: 30,
        detectors: vec![det("a", 4.0, 5), det("a_again", 4.0, 5)],
        strategies: vec![Strategy::Bagging(BaggingConfig::simple()), Strategy::Bagging(BaggingConfig::weighted())],
        ..Default::default()
    };
    let r = run_fusion_experiment(&cfg).unwrap();
    let base = r.row("a").unwrap();
    for s in ["bagging:simple", "bagging:weighted"] {
        let f = r.row(s).unwrap();
        assert!((f.map - base.map).abs() < 1e-12);
        assert!((f.mean_keypoint_error.unwrap() - base.mean_keypoint_error.unwrap()).abs() < 1e-9);
    }
}

#[test]
fn stacking_runs_in_the_experiment() {
    let cfg = ExperimentConfig {
        num_scenes: 50,
        stack_train_scenes: 100,
        detectors: vec![det("a", 3.0, 1), det("b", 8.0, 2)],
        strategies: vec![Strategy::Stacking(LearnerSpec::default_for(LearnerKind::Ridge))],
        ..Default::default()
    };
    let r = run_fusion_experiment(&cfg).unwrap();
    println!("{}", r.to_table());
    let (_, rep) = &r.stack_reports[0];
    println!("{:?} {:?}", rep.val_mse, rep.base_model_val_mse);
    assert!(r.row("stack:ridge").unwrap().map > 0.5);
}
