use egoloc_core::config::RunConfig;
use egoloc_core::dataset::{DataConfig, Dataset, Split};
use egoloc_core::error::Error;
use egoloc_core::pipeline::{generate, stage_seed};

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
    cfg.stage2.clip_s = 10;
    cfg
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let text = small().to_json().unwrap().to_string();
    assert_eq!(RunConfig::from_json(&text).unwrap(), small());
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["stage2"]["mystery"] = 1.into();
    assert!(matches!(RunConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    assert!(matches!(RunConfig::from_json("{\"bogus\": 1}"), Err(Error::Config(_))));
    // omitted sections fall back to defaults
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());

    let mut bad = RunConfig::default();
    bad.eval.thresholds_m = vec![0.6, 0.2];
    assert!(bad.validate().is_err());
    let mut bad = RunConfig::default();
    bad.stage2.clip_s = bad.data.sequence_s + 1;
    assert!(bad.validate().is_err());
    assert!(RunConfig::profile("desk").is_ok());
    assert!(RunConfig::profile("paper-scale").unwrap().validate().is_ok());
    assert!(matches!(RunConfig::profile("nope"), Err(Error::Config(_))));
}

#[test]
fn hashes_track_generation_settings_only() {
    let a = small();
    let mut b = small();
    b.seed = 99;
    b.stage2.steps = 3;
    assert_eq!(a.dataset_hash().unwrap(), b.dataset_hash().unwrap());
    assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    b.data.sequence_s = 30;
    assert_ne!(a.dataset_hash().unwrap(), b.dataset_hash().unwrap());
    assert_ne!(stage_seed(1, "stage1"), stage_seed(1, "stage2"));
    assert_eq!(stage_seed(1, "stage1"), stage_seed(1, "stage1"));
}

#[test]
fn dataset_is_deterministic_and_round_trips() {
    let cfg = small();
    let a = generate(&cfg).unwrap();
    assert_eq!(a, generate(&cfg).unwrap());
    assert_eq!(a.split(Split::Train).count(), 4);
    assert_eq!(a.split(Split::TestSeen).count(), 1);
    assert_eq!(a.split(Split::TestUnseen).count(), 1);
    for s in &a.sequences {
        assert_eq!(s.labels.len(), 20);
        assert_eq!(s.windows().unwrap().len(), 20);
    }
    let seen: Vec<usize> = a.split(Split::TestSeen).map(|s| s.scene).collect();
    let train: Vec<usize> = a.split(Split::Train).map(|s| s.scene).collect();
    assert!(seen.iter().all(|s| train.contains(s)));
    assert!(a.split(Split::TestUnseen).all(|s| !train.contains(&s.scene)));

    let dir = tempfile::tempdir().unwrap();
    let config = cfg.to_json().unwrap();
    a.write(dir.path(), &config).unwrap();
    let (back, manifest) = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, a);
    assert_eq!(manifest.config, config);
    assert_eq!(manifest.config_hash, cfg.dataset_hash().unwrap());

    let other = tempfile::tempdir().unwrap();
    a.write(other.path(), &config).unwrap();
    for entry in walk(dir.path()) {
        let rel = entry.strip_prefix(dir.path()).unwrap();
        assert_eq!(std::fs::read(&entry).unwrap(), std::fs::read(other.path().join(rel)).unwrap(), "{}", rel.display());
    }
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn damaged_datasets_are_data_errors() {
    let cfg = small();
    let ds = generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));
    ds.write(dir.path(), &cfg.to_json().unwrap()).unwrap();
    std::fs::remove_file(dir.path().join("sequences/seq_0001.imu")).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));
    let manifest = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).find(|p| p.is_file()).unwrap();
    std::fs::write(&manifest, "{ not json").unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert_eq!(err.exit_code(), 3);
}
