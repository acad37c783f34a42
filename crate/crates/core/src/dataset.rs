//! Generated benchmark data: scenes, sequences and their train / seen-test /
//! unseen-test assignment, in memory and on disk.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::motion::{
    ground_truth_labels, plan_script, read_labels_csv, simulate_trajectory, synthesize_imu, window_imu, write_labels_csv,
    ActionClass, ActionScript, ImuStream, ImuWindow, MotionConfig, Participant, SecondLabel,
};
use crate::rng;
use crate::world::{generate_scene, segment_patch, Scene, ScenePointCloud, SegmentGrid, SegmentPatch, WorldConfig};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "egoloc-dataset";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test-seen",
            Split::TestUnseen => "test-unseen",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub train_sequences_per_scene: usize,
    pub sequence_s: usize,
    /// Training scenes re-used with fresh sequences for the seen test split.
    pub seen_test_scenes: usize,
    pub seen_test_sequences_per_scene: usize,
    pub unseen_test_scenes: usize,
    pub unseen_test_sequences_per_scene: usize,
    /// Size of the participant pool shared by train and seen-test.
    pub train_participants: usize,
    pub unseen_participants: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 8,
            train_sequences_per_scene: 20,
            sequence_s: 60,
            seen_test_scenes: 2,
            seen_test_sequences_per_scene: 5,
            unseen_test_scenes: 2,
            unseen_test_sequences_per_scene: 5,
            train_participants: 8,
            unseen_participants: 4,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.train_scenes >= 1, Config, "need at least one training scene");
        ensure!(self.seen_test_scenes <= self.train_scenes, Config, "seen-test scenes must be a subset of the training scenes");
        ensure!(self.sequence_s >= 10, Config, "sequences must last at least 10 s");
        ensure!(self.train_participants >= 1 && self.unseen_participants >= 1, Config, "participant pools must be non-empty");
        Ok(())
    }
}

/// Participant ids of the unseen pool start here, disjoint from training.
const UNSEEN_PARTICIPANT_BASE: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub id: usize,
    pub seed: u64,
    pub scene: Scene,
    pub cloud: ScenePointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: usize,
    pub scene: usize,
    pub split: Split,
    pub participant: Participant,
    pub seed: u64,
    pub script: ActionScript,
    pub imu: ImuStream,
    pub labels: Vec<SecondLabel>,
}

impl Sequence {
    pub fn windows(&self) -> Result<Vec<ImuWindow>> {
        window_imu(&self.imu)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config_hash: String,
    pub scenes: Vec<SceneData>,
    pub sequences: Vec<Sequence>,
}

/// Everything generation depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenSettings {
    pub world: WorldConfig,
    pub motion: MotionConfig,
    pub data: DataConfig,
    pub actions: Vec<ActionClass>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(move |s| s.split == split)
    }

    pub fn scene(&self, id: usize) -> &SceneData {
        &self.scenes[id]
    }
}

/// All `G²` cell-centered patches of a scene.
pub fn scene_patches(scene: &SceneData, grid: &SegmentGrid, side: f64, n: usize) -> Vec<SegmentPatch> {
    (0..grid.num_segments()).map(|s| segment_patch(&scene.scene, &scene.cloud, grid, s, side, n)).collect()
}

fn make_sequence(
    id: usize,
    scene: &SceneData,
    split: Split,
    participant: Participant,
    seed: u64,
    g: &GenSettings,
) -> Result<Sequence> {
    let total = g.data.sequence_s as f64;
    let script = plan_script(&scene.scene, &g.actions, &g.motion, total, seed)?;
    let traj = simulate_trajectory(&scene.scene, &script, &g.motion)?;
    let imu = synthesize_imu(&traj, &script, &g.actions, &participant, &g.motion, seed)?;
    let labels = ground_truth_labels(&traj, &script, &g.world.grid());
    Ok(Sequence { id, scene: scene.id, split, participant, seed, script, imu, labels })
}

pub fn generate_dataset(g: &GenSettings, config_hash: &str, seed: u64) -> Result<Dataset> {
    g.world.validate()?;
    g.motion.validate()?;
    g.data.validate()?;
    crate::motion::validate_actions(&g.actions)?;
    let d = &g.data;
    let n_scenes = d.train_scenes + d.unseen_test_scenes;
    let scenes = (0..n_scenes)
        .map(|id| {
            let s = rng::derive(seed, &[0x5C, id as u64]);
            let (scene, cloud) = generate_scene(&g.world, s)?;
            Ok(SceneData { id, seed: s, scene, cloud })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut plan: Vec<(usize, Split, u64)> = Vec::new();
    for sc in 0..d.train_scenes {
        for k in 0..d.train_sequences_per_scene {
            plan.push((sc, Split::Train, k as u64));
        }
    }
    for sc in 0..d.seen_test_scenes {
        for k in 0..d.seen_test_sequences_per_scene {
            plan.push((sc, Split::TestSeen, k as u64));
        }
    }
    for sc in d.train_scenes..n_scenes {
        for k in 0..d.unseen_test_sequences_per_scene {
            plan.push((sc, Split::TestUnseen, k as u64));
        }
    }
    let sequences = plan
        .into_iter()
        .enumerate()
        .map(|(id, (sc, split, k))| {
            let s = rng::derive(seed, &[0x5E9, sc as u64, split as u64, k]);
            let pid = match split {
                Split::TestUnseen => UNSEEN_PARTICIPANT_BASE + rng::derive(s, &[1]) % d.unseen_participants as u64,
                _ => 1 + rng::derive(s, &[1]) % d.train_participants as u64,
            };
            let participant = Participant::sample(rng::derive(seed, &[0x9A, pid]), &g.motion);
            let participant = Participant { id: pid, ..participant };
            make_sequence(id, &scenes[sc], split, participant, s, g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { seed, config_hash: config_hash.to_string(), scenes, sequences })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub id: usize,
    pub seed: u64,
    pub scene: String,
    pub cloud: String,
    pub splits: Vec<Split>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceEntry {
    pub id: usize,
    pub scene: usize,
    pub split: Split,
    pub participant: Participant,
    pub seed: u64,
    pub imu: String,
    pub script: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub scenes: Vec<SceneEntry>,
    pub sequences: Vec<SequenceEntry>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

impl Dataset {
    /// Writes every file plus the manifest; `config` is echoed verbatim.
    pub fn write(&self, dir: &Path, config: &serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir.join("scenes")).map_err(|e| Error::io(dir, e))?;
        fs::create_dir_all(dir.join("sequences")).map_err(|e| Error::io(dir, e))?;
        let mut scenes = Vec::new();
        for s in &self.scenes {
            let scene = format!("scenes/scene_{:03}.json", s.id);
            let cloud = format!("scenes/scene_{:03}.cloud", s.id);
            write_file(&dir.join(&scene), serde_json::to_string_pretty(&s.scene)?.as_bytes())?;
            let mut buf = Vec::new();
            s.cloud.write_to(&mut buf).map_err(|e| Error::io(&cloud, e))?;
            write_file(&dir.join(&cloud), &buf)?;
            let mut splits: Vec<Split> = self.sequences.iter().filter(|q| q.scene == s.id).map(|q| q.split).collect();
            splits.sort();
            splits.dedup();
            scenes.push(SceneEntry { id: s.id, seed: s.seed, scene, cloud, splits });
        }
        let mut sequences = Vec::new();
        for q in &self.sequences {
            let stem = format!("sequences/seq_{:04}", q.id);
            let (imu, script, labels) = (format!("{stem}.imu"), format!("{stem}.script.jsonl"), format!("{stem}.labels.csv"));
            let mut buf = Vec::new();
            q.imu.write_to(&mut buf).map_err(|e| Error::io(&imu, e))?;
            write_file(&dir.join(&imu), &buf)?;
            let mut buf = Vec::new();
            q.script.write_jsonl(&mut buf)?;
            write_file(&dir.join(&script), &buf)?;
            let mut buf = Vec::new();
            write_labels_csv(&q.labels, &mut buf).map_err(|e| Error::io(&labels, e))?;
            write_file(&dir.join(&labels), &buf)?;
            sequences.push(SequenceEntry {
                id: q.id,
                scene: q.scene,
                split: q.split,
                participant: q.participant,
                seed: q.seed,
                imu,
                script,
                labels,
            });
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            config: config.clone(),
            scenes,
            sequences,
        };
        write_file(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST);
        let bytes = read_file(&path)?;
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
        ensure!(m.format == MANIFEST_FORMAT, Data, "manifest {} has unknown format {:?}", path.display(), m.format);
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<(Self, Manifest)> {
        let m = Self::read_manifest(dir)?;
        let data_err = |what: &str, p: &PathBuf, e: std::io::Error| Error::Data(format!("{what} {}: {e}", p.display()));
        let mut scenes = Vec::new();
        for (i, e) in m.scenes.iter().enumerate() {
            ensure!(e.id == i, Data, "manifest scene ids must be 0..n in order");
            let p = dir.join(&e.scene);
            let scene: Scene = serde_json::from_slice(&read_file(&p)?).map_err(|err| Error::Data(format!("scene {}: {err}", p.display())))?;
            let p = dir.join(&e.cloud);
            let cloud = ScenePointCloud::read_from(&read_file(&p)?[..]).map_err(|err| data_err("cloud", &p, err))?;
            scenes.push(SceneData { id: e.id, seed: e.seed, scene, cloud });
        }
        let mut sequences = Vec::new();
        for (i, e) in m.sequences.iter().enumerate() {
            ensure!(e.id == i, Data, "manifest sequence ids must be 0..n in order");
            ensure!(e.scene < scenes.len(), Data, "sequence {} refers to missing scene {}", e.id, e.scene);
            let p = dir.join(&e.imu);
            let imu = ImuStream::read_from(&read_file(&p)?[..]).map_err(|err| data_err("imu stream", &p, err))?;
            let p = dir.join(&e.script);
            let text = String::from_utf8(read_file(&p)?).map_err(|_| Error::Data(format!("script {} is not UTF-8", p.display())))?;
            let script = ActionScript::read_jsonl(&text)?;
            let p = dir.join(&e.labels);
            let text = String::from_utf8(read_file(&p)?).map_err(|_| Error::Data(format!("labels {} are not UTF-8", p.display())))?;
            let labels = read_labels_csv(&text)?;
            sequences.push(Sequence { id: e.id, scene: e.scene, split: e.split, participant: e.participant, seed: e.seed, script, imu, labels });
        }
        let ds = Self { seed: m.seed, config_hash: m.config_hash.clone(), scenes, sequences };
        Ok((ds, m))
    }
}
