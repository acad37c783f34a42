use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use egoloc_core::checkpoint::Checkpoint;
use egoloc_core::config::RunConfig;
use egoloc_core::dataset::DataConfig;
use egoloc_core::encoders::init_encoders;
use egoloc_core::eval::EvalReport;
use egoloc_core::pipeline::stage_seed;
use egoloc_core::stage1::Stage1Model;

fn egoloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_egoloc")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = egoloc(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(args: &[&str]) -> i32 {
    egoloc(args).status.code().expect("exit code")
}

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data = DataConfig {
        train_scenes: 2,
        train_sequences_per_scene: 2,
        sequence_s: 20,
        seen_test_scenes: 1,
        seen_test_sequences_per_scene: 1,
        unseen_test_scenes: 1,
        unseen_test_sequences_per_scene: 1,
        train_participants: 2,
        unseen_participants: 1,
    };
    cfg.stage1.steps = 3;
    cfg.stage2.steps = 3;
    cfg.stage2.clip_s = 10;
    cfg.velocity.steps = 3;
    cfg.eval.chance_draws = 1000;
    cfg
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Work {
    fn new(cfg: &RunConfig) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.json");
        std::fs::write(&config, serde_json::to_string_pretty(&cfg.to_json().unwrap()).unwrap()).unwrap();
        Self { config: config.to_string_lossy().into_owned(), _dir: dir, root }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    files(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap())).collect()
}

#[test]
fn gen_is_reproducible_and_guards_output() {
    let w = Work::new(&small());
    let (a, b) = (w.path("a"), w.path("b"));
    ok(&["gen", "--config", &w.config, "--out", &a]);
    ok(&["gen", "--config", &w.config, "--out", &b]);
    assert_eq!(tree(Path::new(&a)), tree(Path::new(&b)));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(Path::new(&a).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["scenes"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["sequences"].as_array().unwrap().len(), 6);

    assert_eq!(code(&["gen", "--config", &w.config, "--out", &a]), 2);
    ok(&["gen", "--config", &w.config, "--out", &a, "--force"]);
    assert_eq!(tree(Path::new(&a)), tree(Path::new(&b)));
}

#[test]
fn default_profile_has_expected_scene_split() {
    let cfg = RunConfig::default();
    assert_eq!((cfg.data.train_scenes, cfg.data.seen_test_scenes, cfg.data.unseen_test_scenes), (8, 2, 2));
}

#[test]
fn errors_map_to_exit_codes() {
    let w = Work::new(&small());
    let data = w.path("data");
    assert_eq!(code(&["train", "--stage", "1", "--data", &data, "--out", &w.path("x.ckpt")]), 3);
    ok(&["gen", "--config", &w.config, "--out", &data]);
    assert_eq!(code(&["train", "--stage", "2", "--data", &data, "--out", &w.path("x.ckpt")]), 2);
    assert_eq!(code(&["train", "--stage", "3", "--data", &data, "--out", &w.path("x.ckpt")]), 2);
    assert_eq!(code(&["gen", "--profile", "huge", "--out", &w.path("other")]), 2);

    // a config that would generate a different dataset
    let mut other = small();
    other.data.sequence_s = 30;
    let o = Work::new(&other);
    assert_eq!(code(&["train", "--stage", "1", "--config", &o.config, "--data", &data, "--out", &w.path("x.ckpt")]), 4);

    std::fs::write(Path::new(&data).join("manifest.json"), "{ broken").unwrap();
    let out = egoloc(&["train", "--stage", "1", "--data", &data, "--out", &w.path("x.ckpt")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));
}

#[test]
fn zero_steps_returns_initialization() {
    let cfg = small();
    let w = Work::new(&cfg);
    let data = w.path("data");
    ok(&["gen", "--config", &w.config, "--out", &data]);
    let ck = w.path("s1.ckpt");
    ok(&["train", "--stage", "1", "--data", &data, "--out", &ck, "--steps", "0"]);
    let (model, _) = Stage1Model::from_checkpoint(&Checkpoint::load(Path::new(&ck)).unwrap()).unwrap();
    let (mut imu, mut point) = init_encoders(&cfg.encoder, stage_seed(cfg.seed, "stage1")).unwrap();
    imu.params.quantize_f32();
    point.params.quantize_f32();
    assert_eq!(model.imu.params, imu.params);
    assert_eq!(model.point.params, point.params);
}

#[test]
fn train_and_eval_end_to_end() {
    let cfg = small();
    let w = Work::new(&cfg);
    let data = w.path("data");
    ok(&["gen", "--config", &w.config, "--out", &data]);
    let (s1, s2, vel) = (w.path("m/s1.ckpt"), w.path("m/s2.ckpt"), w.path("m/vel.ckpt"));
    ok(&["train", "--stage", "1", "--data", &data, "--out", &s1]);
    ok(&["train", "--stage", "2", "--data", &data, "--stage1", &s1, "--out", &s2]);
    ok(&["train", "--stage", "velocity", "--data", &data, "--out", &vel]);
    assert!(Path::new(&w.path("m/s1.trace.csv")).exists());
    let trace = std::fs::read_to_string(w.path("m/s2.trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);

    let again = w.path("m/s1b.ckpt");
    ok(&["train", "--stage", "1", "--data", &data, "--out", &again]);
    assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&again).unwrap());

    let report = w.path("out/report.json");
    ok(&["eval", "--data", &data, "--stage1", &s1, "--stage2", &s2, "--velocity", &vel, "--out", &report, "--heatmaps"]);
    let r = EvalReport::read(Path::new(&report)).unwrap();
    let mut pairs: Vec<(String, String)> = r.results.iter().map(|m| (m.method.clone(), m.split.name().to_string())).collect();
    pairs.sort();
    let mut want = Vec::new();
    for m in ["dead-reckoning", "stage1-retrieval", "stage2"] {
        for s in ["test-seen", "test-unseen"] {
            want.push((m.to_string(), s.to_string()));
        }
    }
    assert_eq!(pairs, want);
    for m in &r.results {
        assert!(m.success.windows(2).all(|p| p[0].rate <= p[1].rate));
        assert_eq!(m.seconds, 20);
        if m.method == "dead-reckoning" {
            assert_eq!(m.drift_m[0], 0.0);
        }
    }
    let stage2 = r.results.iter().find(|m| m.method == "stage2").unwrap();
    assert!(stage2.relative_score.is_some() && stage2.action_topk.is_some());
    assert!(Path::new(&w.path("out/report.drift.csv")).exists());
    // both heatmap stages for each of the 2 sequences × 20 seconds
    assert_eq!(files(&w.root.join("out/heatmaps")).len(), 2 * 2 * 20);
    assert_eq!(files(&w.root.join("out/predictions")).len(), 2 * 2);

    let report2 = w.path("out2/report.json");
    ok(&["eval", "--data", &data, "--stage1", &s1, "--stage2", &s2, "--velocity", &vel, "--out", &report2]);
    assert_eq!(std::fs::read(&report).unwrap(), std::fs::read(&report2).unwrap());

    let ex = w.path("export");
    ok(&["export-heatmaps", "--data", &data, "--stage1", &s1, "--stage2", &s2, "--sequence", "4", "--out", &ex, "--format", "pgm"]);
    let exported = files(Path::new(&ex));
    assert_eq!(exported.iter().filter(|p| p.extension().is_some_and(|e| e == "pgm")).count(), 40);
    assert!(exported.iter().any(|p| p.ends_with("predictions.csv")));

    // a stage-2 checkpoint over different encoders is rejected
    let other = w.path("m/s1-seed2.ckpt");
    ok(&["train", "--stage", "1", "--data", &data, "--out", &other, "--seed", "2"]);
    assert_eq!(code(&["eval", "--data", &data, "--stage1", &other, "--stage2", &s2, "--velocity", &vel, "--out", &w.path("bad.json")]), 4);
}
