//! Glue between generated data, the trainable stages and evaluation.

use crate::baselines::{displacement_samples, drift_curve, reckon_sequence, train_velocity_net, VelocityNet, VelocityRun};
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, scene_patches, Dataset, Split};
use crate::encoders::{semantic_embed, EmbedKind, SemanticTable};
use crate::error::{ensure, Result};
use crate::eval::{chance_success, conventions, relative_score, success_rate, topk_accuracy, ChanceLevel, EvalReport, MethodReport, ThresholdRate, TopK, REPORT_FORMAT};
use crate::numerics::Tensor;
use crate::rng;
use crate::stage1::{argmax, train_stage1, AlignedSample, Stage1Dataset, Stage1Model, Stage1Run};
use crate::stage2::{infer, train_stage2, FeatureSequence, Inference, Reasoner, Stage2Config, Stage2Run};
use crate::world::{SegmentPatch, WorldConfig};

pub const METHOD_STAGE2: &str = "stage2";
pub const METHOD_RETRIEVAL: &str = "stage1-retrieval";
pub const METHOD_DEAD_RECKONING: &str = "dead-reckoning";

/// Independent seeds of each pipeline stage for one run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let tag = match stage {
        "data" => 0xDA7A,
        "stage1" => 0x51,
        "stage2" => 0x52,
        "velocity" => 0x7E,
        _ => 0xEE,
    };
    rng::derive(seed, &[tag])
}

/// Cell-centered patches of every scene, indexed `[scene][segment]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBank {
    pub per_scene: Vec<Vec<SegmentPatch>>,
}

impl PatchBank {
    pub fn build(ds: &Dataset, world: &WorldConfig) -> Self {
        let grid = world.grid();
        let per_scene = ds
            .scenes
            .iter()
            .map(|s| scene_patches(s, &grid, world.patch_side_m, world.patch_points))
            .collect();
        Self { per_scene }
    }

    pub fn scene(&self, id: usize) -> &[SegmentPatch] {
        &self.per_scene[id]
    }
}

pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    generate_dataset(&cfg.gen_settings(), &cfg.dataset_hash()?, stage_seed(cfg.seed, "data"))
}

/// One aligned sample per labelled second of every sequence in `split`.
pub fn stage1_data(ds: &Dataset, split: Split, bank: &PatchBank, table: &SemanticTable, seed: u64) -> Result<Stage1Dataset> {
    let s = bank.per_scene.first().map_or(0, Vec::len);
    let mut scene_slot = vec![None; ds.scenes.len()];
    let mut patches = Vec::new();
    let mut samples = Vec::new();
    let image_seed = rng::derive(seed, &[0x1A6E]);
    for q in ds.split(split) {
        let slot = *scene_slot[q.scene].get_or_insert_with(|| {
            patches.extend(bank.scene(q.scene).iter().cloned());
            patches.len() / s - 1
        });
        let windows = q.windows()?;
        for (w, l) in windows.into_iter().zip(&q.labels) {
            let key = (q.id as u64) << 16 | l.t as u64;
            samples.push(AlignedSample {
                image: semantic_embed(table, l.action, EmbedKind::Image, key, image_seed)?,
                text: semantic_embed(table, l.action, EmbedKind::Text, key, image_seed)?,
                window: w,
                patch: slot * s + l.segment,
                action: l.action,
            });
        }
    }
    Ok(Stage1Dataset { samples, patches })
}

pub fn semantic_table(cfg: &RunConfig, seed: u64) -> Result<SemanticTable> {
    SemanticTable::new(cfg.actions.len(), cfg.encoder.dim, cfg.stage1.image_sigma, rng::derive(seed, &[0x7AB]))
}

/// Stage-1 training on the train split.
pub fn run_stage1(cfg: &RunConfig, ds: &Dataset, bank: &PatchBank) -> Result<Stage1Run> {
    let seed = stage_seed(cfg.seed, "stage1");
    let table = semantic_table(cfg, seed)?;
    let data = stage1_data(ds, Split::Train, bank, &table, seed)?;
    train_stage1(&data, &table, &cfg.encoder, &cfg.stage1, seed)
}

/// Frozen patch features of every scene, `S × D` each, indexed by scene id.
pub fn patch_features(model: &Stage1Model, bank: &PatchBank) -> Result<Vec<Tensor>> {
    bank.per_scene
        .iter()
        .map(|ps| model.point.encode(&ps.iter().collect::<Vec<_>>()))
        .collect()
}

/// Frozen per-second IMU features and labels of every sequence in `split`.
pub fn feature_sequences(model: &Stage1Model, ds: &Dataset, split: Split) -> Result<Vec<FeatureSequence>> {
    ds.split(split)
        .map(|q| {
            let windows = q.windows()?;
            let n = windows.len().min(q.labels.len());
            let feats = model.imu.encode(&windows[..n].iter().collect::<Vec<_>>())?;
            Ok(FeatureSequence {
                scene: q.scene,
                imu: feats.into_data(),
                segments: q.labels[..n].iter().map(|l| l.segment).collect(),
                actions: q.labels[..n].iter().map(|l| l.action).collect(),
            })
        })
        .collect()
}

/// A stage-2 run plus the encoder checksums around it.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Outcome {
    pub run: Stage2Run,
    pub checksums_before: (String, String),
    pub checksums_after: (String, String),
}

/// Stage-2 training on the train split over frozen stage-1 encoders.
pub fn run_stage2(cfg: &RunConfig, stage2: &Stage2Config, ds: &Dataset, bank: &PatchBank, stage1: &Stage1Model) -> Result<Stage2Outcome> {
    ensure!(stage1.imu.cfg.dim == cfg.encoder.dim, Compat, "stage-1 features have dim {}, config expects {}", stage1.imu.cfg.dim, cfg.encoder.dim);
    let before = stage1.checksums();
    let pf = patch_features(stage1, bank)?;
    let train = feature_sequences(stage1, ds, Split::Train)?;
    let run = train_stage2(&train, &pf, stage1.imu.cfg.dim, cfg.world.grid_cells, cfg.actions.len(), stage2, stage_seed(cfg.seed, "stage2"))?;
    Ok(Stage2Outcome { run, checksums_before: before, checksums_after: stage1.checksums() })
}

pub fn run_velocity(cfg: &RunConfig, ds: &Dataset) -> Result<VelocityRun> {
    let mut samples = Vec::new();
    for q in ds.split(Split::Train) {
        samples.extend(displacement_samples(&q.windows()?, &q.labels));
    }
    train_velocity_net(&samples, &cfg.velocity, stage_seed(cfg.seed, "velocity"))
}

/// Trained models evaluated together.
pub struct Models<'a> {
    pub stage1: &'a Stage1Model,
    pub stage2: &'a Reasoner,
    pub velocity: &'a VelocityNet,
}

/// Per-sequence outputs of all methods on one split.
pub struct SplitOutputs {
    pub sequence_ids: Vec<usize>,
    pub truth: Vec<Vec<[f64; 2]>>,
    pub inference: Vec<Inference>,
    pub retrieval: Vec<Vec<[f64; 2]>>,
    pub reckoned: Vec<Vec<[f64; 2]>>,
    pub segments: Vec<Vec<usize>>,
    pub actions: Vec<Vec<usize>>,
}

pub fn run_split(cfg: &RunConfig, ds: &Dataset, bank: &PatchBank, models: &Models, split: Split) -> Result<SplitOutputs> {
    let grid = cfg.world.grid();
    let centers = grid.centers();
    let pf = patch_features(models.stage1, bank)?;
    let feats = feature_sequences(models.stage1, ds, split)?;
    let mut out = SplitOutputs { sequence_ids: vec![], truth: vec![], inference: vec![], retrieval: vec![], reckoned: vec![], segments: vec![], actions: vec![] };
    for (q, f) in ds.split(split).zip(&feats) {
        let inf = infer(models.stage2, &f.imu, &pf[f.scene], &centers)?;
        let n = f.len();
        out.retrieval.push((0..n).map(|t| centers[argmax(inf.stage1_heatmap.slice(t))]).collect());
        out.reckoned.push(reckon_sequence(models.velocity, &q.windows()?, &q.labels)?);
        out.truth.push(q.labels[..n].iter().map(|l| l.position).collect());
        out.segments.push(f.segments.clone());
        out.actions.push(f.actions.clone());
        out.sequence_ids.push(q.id);
        out.inference.push(inf);
    }
    ensure!(!out.truth.is_empty(), Invalid, "split {} has no sequences", split.name());
    Ok(out)
}

fn method_report(cfg: &RunConfig, method: &str, split: Split, preds: &[Vec<[f64; 2]>], truth: &[Vec<[f64; 2]>]) -> Result<MethodReport> {
    let all_p: Vec<[f64; 2]> = preds.concat();
    let all_t: Vec<[f64; 2]> = truth.concat();
    let success = cfg
        .eval
        .thresholds_m
        .iter()
        .map(|&th| Ok(ThresholdRate { threshold_m: th, rate: success_rate(&all_p, &all_t, th)? }))
        .collect::<Result<_>>()?;
    Ok(MethodReport {
        method: method.into(),
        split,
        seconds: all_t.len(),
        success,
        relative_score: None,
        action_topk: None,
        drift_m: drift_curve(preds, truth)?,
    })
}

fn mean_rs(maps: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let v: Vec<f64> = maps.collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Reports of all three methods on one split.
pub fn split_reports(cfg: &RunConfig, out: &SplitOutputs, split: Split) -> Result<Vec<MethodReport>> {
    let stage2_pos: Vec<Vec<[f64; 2]>> = out.inference.iter().map(|i| i.positions.clone()).collect();
    let mut s2 = method_report(cfg, METHOD_STAGE2, split, &stage2_pos, &out.truth)?;
    let rs_of = |pick: fn(&Inference) -> &crate::stage2::Heatmap| {
        mean_rs(out.inference.iter().zip(&out.segments).flat_map(move |(i, segs)| segs.iter().enumerate().map(move |(t, &s)| relative_score(pick(i).slice(t), s))))
    };
    s2.relative_score = Some(rs_of(|i| &i.stage2_heatmap)?);
    let logits: Vec<f64> = out.inference.iter().flat_map(|i| i.action_logits.data().iter().copied()).collect();
    let labels: Vec<usize> = out.actions.concat();
    let logits = Tensor::new(vec![labels.len(), cfg.actions.len()], logits)?;
    s2.action_topk = Some(
        cfg.eval
            .topk
            .iter()
            .filter(|&&k| k <= cfg.actions.len())
            .map(|&k| Ok(TopK { k, accuracy: topk_accuracy(&logits, &labels, k)? }))
            .collect::<Result<_>>()?,
    );
    let mut s1 = method_report(cfg, METHOD_RETRIEVAL, split, &out.retrieval, &out.truth)?;
    s1.relative_score = Some(rs_of(|i| &i.stage1_heatmap)?);
    let dr = method_report(cfg, METHOD_DEAD_RECKONING, split, &out.reckoned, &out.truth)?;
    Ok(vec![s2, s1, dr])
}

pub fn chance_levels(cfg: &RunConfig) -> Vec<ChanceLevel> {
    let grid = cfg.world.grid();
    cfg.eval
        .thresholds_m
        .iter()
        .map(|&th| ChanceLevel { threshold_m: th, rate: chance_success(&grid, th, cfg.eval.chance_draws, cfg.seed) })
        .collect()
}

pub fn build_report(cfg: &RunConfig, dataset_hash: &str, results: Vec<MethodReport>) -> Result<EvalReport> {
    let report = EvalReport {
        format: REPORT_FORMAT.into(),
        seeds: vec![cfg.seed],
        config_hash: cfg.hash()?,
        dataset_config_hash: dataset_hash.into(),
        config: cfg.to_json()?,
        conventions: conventions(),
        chance: chance_levels(cfg),
        results,
    };
    report.validate()?;
    Ok(report)
}
