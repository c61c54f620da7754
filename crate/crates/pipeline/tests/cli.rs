//! End-to-end checks of the `talkgen` binary on small runs.

use std::path::Path;
use std::process::{Command, Output};

use talkgen::dataset::DatasetManifest;
use talkgen::generate::GenerationManifest;
use talkgen::RunConfig;
use talkgen_core::backbone::Dit;
use talkgen_core::eval::{MetricValue, MetricsReport};
use talkgen_core::params::Checkpoint;

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talkgen"))
        .arg("--data-root")
        .arg(root)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("run talkgen")
}

fn ok(root: &Path, args: &[&str]) -> Output {
    let out = run(root, args);
    assert!(out.status.success(), "talkgen {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// A two-scene 13-frame dataset with briefly trained checkpoints.
fn trained_root() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["dataset", "--num-scenes", "2", "--duration", "13"]);
    ok(root, &["train-lr", "--steps", "2"]);
    ok(root, &["train-refiner", "--steps", "2"]);
    tmp
}

fn scalar(report: &MetricsReport, name: &str) -> f64 {
    match &report.metrics[name] {
        MetricValue::Scalar(v) => *v,
        MetricValue::Correlation(c) => c.value().expect("defined correlation"),
    }
}

#[test]
fn default_config_carries_the_published_constants() {
    let cfg = RunConfig::default();
    assert_eq!((cfg.sampler.lr.cfg_scale, cfg.sampler.lr.steps), (6.5, 30));
    assert_eq!((cfg.sampler.refiner.cfg_scale, cfg.sampler.refiner.steps), (1.5, 20));
    assert_eq!(cfg.degradation.alpha_deg, 0.7);
    assert_eq!(cfg.refl.threshold, 0.4);
    assert_eq!(
        (cfg.dropout.text, cfg.dropout.audio, cfg.dropout.reference, cfg.dropout.first_frame),
        (0.10, 0.10, 0.20, 0.20)
    );
    assert_eq!(cfg.provenance.published_learning_rate, 5e-5);
    assert_eq!(cfg.train_lr.lr, 1e-3);
    assert_eq!((cfg.world.f, cfg.world.h, cfg.world.w, cfg.world.overlap), (3, 32, 32, 1));
    let golden = include_str!("golden/default_config.toml");
    assert_eq!(cfg.to_toml(), golden);
    assert_eq!(RunConfig::parse(golden).unwrap(), cfg);
}

#[test]
fn empty_dataset_succeeds_with_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["dataset", "--num-scenes", "0"]);
    let m: DatasetManifest = serde_json::from_slice(&std::fs::read(tmp.path().join("dataset/manifest.json")).unwrap()).unwrap();
    assert!(m.scenes.is_empty());
}

#[test]
fn datasets_are_reproducible_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["dataset", "--num-scenes", "3", "--duration", "13", "--out", "a"]);
    ok(root, &["dataset", "--num-scenes", "3", "--duration", "13", "--out", "b"]);
    let read = |d: &str| std::fs::read(root.join(d).join("manifest.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    let m: DatasetManifest = serde_json::from_slice(&read("a")).unwrap();
    assert_eq!(m.scenes.len(), 3);
    let data = talkgen::dataset::Dataset::open(&root.join("a")).unwrap();
    for (_, render) in data.load_all().unwrap() {
        assert_eq!(render.lr.dim().0, 13);
        assert_eq!(render.hr.dim().0, 13);
    }

    let again = run(root, &["dataset", "--num-scenes", "1", "--out", "a"]);
    assert_eq!(code(&again), 2, "{}", stderr(&again));
    ok(root, &["--force", "dataset", "--num-scenes", "1", "--duration", "13", "--out", "a"]);
}

#[test]
fn zero_steps_checkpoint_equals_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["dataset", "--num-scenes", "1", "--duration", "13"]);
    ok(root, &["train-lr", "--steps", "0"]);
    let cfg = RunConfig::default();
    let init = Dit::init(cfg.lr_dit(), cfg.lr_model.init_seed).unwrap();
    let saved = Dit::read_from(&Checkpoint::load(&root.join("checkpoints/lr.ckpt")).unwrap(), "lr").unwrap();
    assert_eq!(saved.params, init.params);
}

#[test]
fn resumed_training_matches_an_unbroken_run() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["dataset", "--num-scenes", "2", "--duration", "13"]);
    for phase in ["train-lr", "train-refiner"] {
        let straight = format!("straight/{phase}.ckpt");
        let split = format!("split/{phase}.ckpt");
        ok(root, &[phase, "--steps", "4", "--out", &straight]);
        ok(root, &[phase, "--steps", "2", "--out", &split]);
        ok(root, &[phase, "--steps", "4", "--out", &split, "--resume", &split]);
        let a = Checkpoint::load(&root.join(&straight)).unwrap();
        let b = Checkpoint::load(&root.join(&split)).unwrap();
        assert_eq!(a.arrays, b.arrays, "{phase}");
        let log = |p: &str| std::fs::read_to_string(root.join(format!("{p}.log.jsonl"))).unwrap();
        assert_eq!(log(&straight), log(&split), "{phase}");
        assert_eq!(log(&straight).lines().count(), 4);
        for line in log(&straight).lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["loss"].as_f64().unwrap().is_finite());
        }
    }
}

#[test]
fn refl_resumes_exactly_too() {
    let tmp = trained_root();
    let root = tmp.path();
    ok(root, &["refl", "--steps", "2", "--out", "straight.ckpt"]);
    ok(root, &["refl", "--steps", "1", "--out", "split.ckpt"]);
    ok(root, &["refl", "--steps", "2", "--out", "split.ckpt", "--resume", "split.ckpt"]);
    let a = Checkpoint::load(&root.join("straight.ckpt")).unwrap();
    let b = Checkpoint::load(&root.join("split.ckpt")).unwrap();
    assert_eq!(a.arrays, b.arrays);
}

#[test]
fn dataset_geometry_mismatch_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["--set", "world.f=1", "dataset", "--num-scenes", "1", "--duration", "5"]);
    let out = run(root, &["train-lr", "--steps", "1"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("fewer than one"), "{}", stderr(&out));
    assert!(!root.join("checkpoints/lr.ckpt").exists());
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--set", "world.nonsense=1", "dataset"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    // input paths are validated before any work starts
    let out = run(tmp.path(), &["generate", "--duration", "13"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("does not exist"), "{}", stderr(&out));
}

#[test]
fn corrupt_checkpoints_are_runtime_failures() {
    let tmp = trained_root();
    let root = tmp.path();
    std::fs::write(root.join("checkpoints/lr.ckpt"), b"not a checkpoint").unwrap();
    let out = run(root, &["generate", "--duration", "13"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn generation_respects_the_chunk_grammar() {
    let tmp = trained_root();
    let root = tmp.path();
    let bad = run(root, &["generate", "--duration", "30"]);
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("nearest valid duration is 25"), "{}", stderr(&bad));

    ok(root, &["generate", "--duration", "13", "--out", "one"]);
    let m = GenerationManifest::load(&root.join("one")).unwrap();
    assert_eq!(m.chunks.len(), 1);
    assert!(m.seams.is_empty());
    assert_eq!(m.frames.len(), 13);
}

#[test]
fn nine_chunk_generation_has_clean_seams_and_evaluates() {
    let tmp = trained_root();
    let root = tmp.path();
    ok(root, &["generate", "--duration", "109", "--out", "long"]);
    let m = GenerationManifest::load(&root.join("long")).unwrap();
    assert_eq!(m.chunks.len(), 9);
    assert_eq!(m.seams.len(), 8);
    for s in &m.seams {
        assert_eq!((s.latent_diff, s.frame_diff), (0.0, 0.0), "{s:?}");
    }
    ok(root, &["evaluate", "--generation", "long", "--report-dir", "report"]);
    let report = MetricsReport::load(&root.join("report/report.json")).unwrap();
    assert!(report.unavailable.is_empty());
    assert_eq!(report.series["identity_drift"].len(), 109 / report.window);
}

#[test]
fn ground_truth_render_scores_as_its_own_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let args = ["evaluate", "--render", "--scene-seed", "4", "--duration", "37", "--report-dir"];
    ok(root, &[&args[..], &["r1"]].concat());
    ok(root, &[&args[..], &["r2"]].concat());
    let r1 = std::fs::read(root.join("r1/report.json")).unwrap();
    assert_eq!(r1, std::fs::read(root.join("r2/report.json")).unwrap());

    let report = MetricsReport::load(&root.join("r1/report.json")).unwrap();
    assert!(scalar(&report, "lipsync") >= 0.95);
    assert!(report.series["identity_drift"].iter().all(|d| *d < 0.05), "{:?}", report.series["identity_drift"]);
    assert_eq!(report.config, serde_json::to_value(RunConfig::default()).unwrap());
    for plot in &report.plots {
        assert!(root.join("r1").join(plot).exists(), "{plot}");
    }
}

#[test]
fn frames_without_truth_mark_oracle_metrics_unavailable() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    ok(root, &["dataset", "--num-scenes", "1", "--duration", "13"]);
    let m: DatasetManifest = serde_json::from_slice(&std::fs::read(root.join("dataset/manifest.json")).unwrap()).unwrap();
    let hr = root.join("dataset").join(&m.scenes[0].hr);
    ok(root, &["evaluate", "--frames", hr.to_str().unwrap(), "--report-dir", "rep"]);
    let report = MetricsReport::load(&root.join("rep/report.json")).unwrap();
    assert!(report.unavailable.iter().any(|u| u.starts_with("lipsync")), "{:?}", report.unavailable);
    assert!(report.metrics.contains_key("identity_drift_final") && !report.metrics.contains_key("hkc"));
}
