use std::fs;
use std::process::Command;

use apnet_model::FusionStrategy;
use apnet_pipeline::train::{self, Head, CHECKPOINT_FILE, CONFIG_FILE, LAYOUT_FILE, METRICS_FILE};
use apnet_pipeline::{ExperimentConfig, Profile};

const TINY: &str = r#"
[scene]
extent = 20.0
density = 10.0
buildings = 1
trees = 2
walls = 1
cars = 1
poles = 2

[raster]
width = 32
height = 32
pixel_size = 0.25

[branch]
channels = 8
a_widths = [4, 8]
p_widths = [8]
p_neighbors = 4
p_candidates = 8

[train]
epochs = 2
crop_pixels = 16
crops_per_scene = 1
batch_size = 2
train_scenes = 2
val_scenes = 1
"#;

fn tiny(strategy: FusionStrategy) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml_str(TINY, &ExperimentConfig::profile(Profile::Small)).unwrap();
    c.strategy = strategy;
    c
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(FusionStrategy::Gaf);
    let mut seen = Vec::new();
    let outcome = train::train(&config, Some(dir.path()), |r| seen.push(r.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    for f in [CHECKPOINT_FILE, CONFIG_FILE, METRICS_FILE, LAYOUT_FILE] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    for r in &outcome.history {
        assert!(r.loss.total.is_finite());
    }
    // Header plus one row per head per epoch.
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv, outcome.metrics_csv);
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    let snapshot = ExperimentConfig::load(&dir.path().join(CONFIG_FILE), Profile::PaperRatio).unwrap();
    assert_eq!(snapshot, config);
}

#[test]
fn training_is_bitwise_reproducible() {
    let config = tiny(FusionStrategy::Concatenation);
    let a = train::train(&config, None, |_| {}).unwrap();
    let b = train::train(&config, None, |_| {}).unwrap();
    assert_eq!(a.metrics_csv, b.metrics_csv);
    let c = train::train(&ExperimentConfig { seed: 1, ..config }, None, |_| {}).unwrap();
    assert_ne!(a.metrics_csv, c.metrics_csv);
}

#[test]
fn evaluate_reloads_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(FusionStrategy::Addition);
    let outcome = train::train(&config, Some(dir.path()), |_| {}).unwrap();
    let preds = dir.path().join("preds");
    let eval = train::evaluate(&config, &dir.path().join(CHECKPOINT_FILE), None, Some(&preds)).unwrap();
    assert_eq!(&eval, &outcome.last().validation);
    assert!(preds.join("predictions-0.xyzrgbl").exists());
    assert!(train::evaluate(&config, &dir.path().join(CHECKPOINT_FILE), Some(99), None).is_ok());
    let wrong = ExperimentConfig { strategy: FusionStrategy::Gaf, ..config };
    assert!(train::load_model(&wrong, &dir.path().join(CHECKPOINT_FILE)).is_err());
}

#[test]
fn single_branch_strategies_report_one_head() {
    for (strategy, head) in [(FusionStrategy::AOnly, Head::Aerial), (FusionStrategy::POnly, Head::Point)] {
        let outcome = train::train(&tiny(strategy), None, |_| {}).unwrap();
        let eval = &outcome.last().validation;
        assert_eq!(eval.heads.len(), 1);
        assert_eq!(eval.final_head, head);
        assert!(eval.head(Head::Fused).is_none());
    }
}

#[test]
fn ablation_matches_individual_runs() {
    let config = tiny(FusionStrategy::Gaf);
    let rows = train::ablate(&config, &[FusionStrategy::NaiveGaf], &[4], None, |_, _, _| {}).unwrap();
    let single = train::train(&ExperimentConfig { seed: 4, strategy: FusionStrategy::NaiveGaf, ..config.clone() }, None, |_| {}).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].per_seed, vec![single.last().validation.final_metrics().clone()]);
    assert!(train::ablation_table(&rows).contains("naive-gaf"));

    let dup = [FusionStrategy::Gaf, FusionStrategy::Gaf];
    assert!(train::ablate(&config, &dup, &[0], None, |_, _, _| {}).is_err());
    assert!(train::ablate(&config, &[FusionStrategy::Gaf], &[1, 1], None, |_, _, _| {}).is_err());
    assert!(train::ablate(&config, &[], &[0], None, |_, _, _| {}).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let base = ExperimentConfig::profile(Profile::Small);
    for text in ["[train]\ncrop_pixels = 30\n", "[train]\ncrop_pixels = 256\n", "[train]\nbogus = 1\n", "[train]\ncrops_per_scene = 0\n"] {
        assert!(ExperimentConfig::from_toml_str(text, &base).and_then(|c| c.validate()).is_err(), "{text}");
    }
}

#[test]
fn cli_runs_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_apnet");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let d = dir.path().to_str().unwrap();
    let c = cfg.to_str().unwrap();

    run(&["generate", "--config", c, "--seed", "3", "--out", d]);
    let scene = dir.path().join("scene-3.xyzrgbl");
    assert!(scene.exists());
    run(&["project", "--config", c, "--input", scene.to_str().unwrap(), "--out", &format!("{d}/proj")]);
    run(&["downsample", "--config", c, "--input", scene.to_str().unwrap(), "--out", &format!("{d}/down")]);
    assert!(dir.path().join("down/scene-3-down.xyzrgbl").exists());
    run(&["dump-aerial", "--config", c, "--out", &format!("{d}/aerial")]);

    let train_dir = format!("{d}/run");
    run(&["train", "--config", c, "--strategy", "addition", "--out", &train_dir]);
    let eval = run(&["evaluate", "--run", &train_dir]);
    assert!(eval.lines().any(|l| l.starts_with("fused,")));

    let ablate_dir = format!("{d}/ablate");
    let table = run(&["ablate", "--config", c, "--strategies", "a-only,p-only", "--seeds", "0", "--out", &ablate_dir]);
    assert!(table.contains("a-only") && table.contains("p-only"));
    assert!(dir.path().join("ablate/p-only/seed-0/metrics.csv").exists());

    let checks = run(&["grad-check", "--trials", "2"]);
    assert!(checks.lines().all(|l| l.ends_with("ok")));

    let bad = Command::new(bin).args(["train", "--strategy", "bogus"]).output().unwrap();
    assert!(!bad.status.success());
    let bad = Command::new(bin).args(["train", "--profile", "huge"]).output().unwrap();
    assert!(!bad.status.success());
}
