//! Contrastive alignment of the IMU and patch encoders with each other and
//! with the frozen semantic embeddings, plus similarity-argmax retrieval.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::{Bound, EncoderConfig, ImuEncoder, PointEncoder, SemanticTable};
use crate::error::{ensure, Error, Result};
use crate::motion::ImuWindow;
use crate::numerics::{AdamW, AdamWConfig, Graph, NodeId, ParamSet, Tensor};
use crate::rng;
use crate::world::SegmentPatch;

pub const CHECKPOINT_KIND: &str = "stage1";

/// Weights of the five pairwise terms: image–IMU, image–patch, text–IMU,
/// text–patch and IMU–patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairWeights {
    pub image_imu: f64,
    pub image_patch: f64,
    pub text_imu: f64,
    pub text_patch: f64,
    pub imu_patch: f64,
}

impl Default for PairWeights {
    fn default() -> Self {
        Self { image_imu: 0.1, image_patch: 1.0, text_imu: 1.0, text_patch: 1.0, imu_patch: 1.0 }
    }
}

impl PairWeights {
    /// IMU↔patch only: the semantic guidance switched off.
    pub fn without_semantics() -> Self {
        Self { image_imu: 0.0, image_patch: 0.0, text_imu: 0.0, text_patch: 0.0, imu_patch: 1.0 }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.image_imu, self.image_patch, self.text_imu, self.text_patch, self.imu_patch]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub weights: PairWeights,
    pub temperature: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    /// Window of the moving average used for smoothed losses.
    pub smoothing: usize,
    pub image_sigma: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            weights: PairWeights::default(),
            temperature: 0.07,
            batch: 64,
            steps: 2000,
            optimizer: AdamWConfig::default(),
            smoothing: 100,
            image_sigma: 0.2,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.weights.as_array().iter().all(|w| *w >= 0.0 && w.is_finite()), Config, "loss weights must be non-negative");
        ensure!(self.temperature > 0.0, Config, "temperature must be positive");
        ensure!(self.batch >= 1, Config, "batch must be at least 1");
        ensure!(self.smoothing >= 1, Config, "smoothing window must be at least 1");
        ensure!(self.optimizer.lr >= 0.0, Config, "learning rate must be non-negative");
        Ok(())
    }
}

/// One synchronized second: semantic embeddings, IMU window and the index
/// of the patch at the wearer's location.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSample {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub window: ImuWindow,
    pub patch: usize,
    pub action: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage1Dataset {
    pub samples: Vec<AlignedSample>,
    pub patches: Vec<SegmentPatch>,
}

/// Symmetric in-batch contrastive loss between row-aligned feature sets.
pub fn infonce(g: &mut Graph, a: NodeId, b: NodeId, temperature: f64) -> Result<NodeId> {
    let (sa, sb) = (g.value(a).shape().to_vec(), g.value(b).shape().to_vec());
    ensure!(sa.len() == 2 && sa == sb, Invalid, "contrastive inputs must be matching B×D, got {sa:?} and {sb:?}");
    let n = sa[0];
    let targets: Vec<usize> = (0..n).collect();
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let logits = g.mul_scalar(sim, 1.0 / temperature)?;
    let rows = g.cross_entropy(logits, &targets)?;
    let lt = g.transpose(logits)?;
    let cols = g.cross_entropy(lt, &targets)?;
    let both = g.add(rows, cols)?;
    Ok(g.mul_scalar(both, 0.5 / n as f64)?)
}

/// Value-only form of [`infonce`].
pub fn infonce_value(a: &Tensor, b: &Tensor, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = infonce(&mut g, a, b, temperature)?;
    Ok(g.value(l).item())
}

/// Feature nodes of one batch, each `B × D`.
pub struct Features {
    pub image: NodeId,
    pub text: NodeId,
    pub imu: NodeId,
    pub patch: NodeId,
}

/// Weighted five-term objective; zero-weight terms are left out of the graph.
pub fn stage1_loss(g: &mut Graph, f: &Features, weights: &PairWeights, temperature: f64) -> Result<NodeId> {
    let pairs = [(f.image, f.imu), (f.image, f.patch), (f.text, f.imu), (f.text, f.patch), (f.imu, f.patch)];
    let mut total: Option<NodeId> = None;
    for ((a, b), w) in pairs.into_iter().zip(weights.as_array()) {
        if w == 0.0 {
            continue;
        }
        let l = infonce(g, a, b, temperature)?;
        let l = g.mul_scalar(l, w)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Model {
    pub imu: ImuEncoder,
    pub point: PointEncoder,
}

/// Settings stored alongside stage-1 parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage1Echo {
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Run {
    pub model: Stage1Model,
    pub losses: Vec<f64>,
    pub table_checksum_before: String,
    pub table_checksum_after: String,
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(trace: &[f64], w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for i in 0..trace.len() {
        acc += trace[i];
        if i >= w {
            acc -= trace[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

fn joint_params(imu: &ImuEncoder, point: &PointEncoder) -> ParamSet {
    let mut p = imu.params.clone();
    for (n, t) in point.params.names().iter().zip(point.params.tensors()) {
        p.push(n.clone(), t.clone());
    }
    p
}

fn split_params(model: &mut Stage1Model, joint: &ParamSet) {
    let k = model.imu.params.len();
    for (i, t) in joint.tensors().iter().enumerate() {
        if i < k {
            model.imu.params.tensors_mut()[i] = t.clone();
        } else {
            model.point.params.tensors_mut()[i - k] = t.clone();
        }
    }
}

/// Seeded epoch shuffling into fixed-size batches; the tail of each epoch
/// that does not fill a batch is skipped.
pub(crate) struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Batcher {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Self { order: (0..n).collect(), pos: n, batch, rng: rng::stream(seed, &[0xBA7C]) };
        b.pos = b.order.len();
        b
    }

    pub(crate) fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let s = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        s
    }
}

fn batch_rows(rows: impl Iterator<Item = Vec<f64>>, d: usize) -> Result<Tensor> {
    let data: Vec<f64> = rows.flatten().collect();
    let n = data.len() / d;
    Ok(Tensor::new(vec![n, d], data)?)
}

/// Loss of one batch, with gradients into the encoders when `train` is set.
fn batch_loss(model: &Stage1Model, joint: &ParamSet, data: &Stage1Dataset, idx: &[usize], cfg: &Stage1Config, train: bool) -> Result<(f64, Option<Vec<Tensor>>)> {
    let d = model.imu.cfg.dim;
    let mut g = Graph::new();
    let p = Bound::new(joint, &mut g, train);
    let samples: Vec<&AlignedSample> = idx.iter().map(|&i| &data.samples[i]).collect();
    let windows: Vec<&ImuWindow> = samples.iter().map(|s| &s.window).collect();
    let patches: Vec<&SegmentPatch> = samples.iter().map(|s| &data.patches[s.patch]).collect();
    let xm = g.constant(model.imu.batch_input(&windows)?);
    let xp = g.constant(model.point.batch_input(&patches)?);
    let imu = model.imu.forward(&mut g, &p, xm)?;
    let patch = model.point.forward(&mut g, &p, xp)?;
    let image = g.constant(batch_rows(samples.iter().map(|s| s.image.clone()), d)?);
    let text = g.constant(batch_rows(samples.iter().map(|s| s.text.clone()), d)?);
    let f = Features { image, text, imu, patch };
    let loss = stage1_loss(&mut g, &f, &cfg.weights, cfg.temperature)?;
    let value = g.value(loss).item();
    ensure!(value.is_finite(), Invalid, "stage-1 loss became non-finite");
    if !train {
        return Ok((value, None));
    }
    g.backward(loss)?;
    Ok((value, Some(joint.grads_from(&g, &p.ids))))
}

pub fn train_stage1(
    data: &Stage1Dataset,
    table: &SemanticTable,
    enc_cfg: &EncoderConfig,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Run> {
    cfg.validate()?;
    enc_cfg.validate()?;
    ensure!(data.samples.len() >= cfg.batch, Invalid, "dataset has {} samples, fewer than the batch of {}", data.samples.len(), cfg.batch);
    ensure!(table.dim == enc_cfg.dim, Compat, "semantic table dim {} differs from encoder dim {}", table.dim, enc_cfg.dim);
    let before = table.checksum();
    let (imu, point) = crate::encoders::init_encoders(enc_cfg, seed)?;
    let mut model = Stage1Model { imu, point };
    let mut joint = joint_params(&model.imu, &model.point);
    let mut opt = AdamW::new(cfg.optimizer, &joint);
    let mut batches = Batcher::new(data.samples.len(), cfg.batch, seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = batches.next().to_vec();
        let (loss, grads) = batch_loss(&model, &joint, data, &idx, cfg, true)?;
        losses.push(loss);
        opt.step(&mut joint, &grads.expect("training batch has grads"))?;
    }
    joint.quantize_f32();
    split_params(&mut model, &joint);
    Ok(Stage1Run { model, losses, table_checksum_before: before, table_checksum_after: table.checksum() })
}

/// Mean loss over consecutive batches of `data` in order, without training.
pub fn evaluate_stage1(model: &Stage1Model, data: &Stage1Dataset, cfg: &Stage1Config) -> Result<f64> {
    let joint = joint_params(&model.imu, &model.point);
    let n = data.samples.len() / cfg.batch;
    ensure!(n > 0, Invalid, "dataset smaller than one batch");
    let mut total = 0.0;
    for b in 0..n {
        let idx: Vec<usize> = (b * cfg.batch..(b + 1) * cfg.batch).collect();
        total += batch_loss(model, &joint, data, &idx, cfg, false)?.0;
    }
    Ok(total / n as f64)
}

impl Stage1Model {
    pub fn to_checkpoint(&self, echo: &Stage1Echo, meta: serde_json::Value) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, echo, &joint_params(&self.imu, &self.point), meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Stage1Echo)> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let echo: Stage1Echo = ckpt.config()?;
        let (imu, point) = crate::encoders::init_encoders(&echo.encoder, 0)?;
        let mut model = Self { imu, point };
        let mut joint = joint_params(&model.imu, &model.point);
        joint.assign(&ckpt.params).map_err(|e| Error::Compat(format!("stage-1 parameters: {e}")))?;
        split_params(&mut model, &joint);
        Ok((model, echo))
    }

    pub fn checksums(&self) -> (String, String) {
        (self.imu.params.checksum(), self.point.params.checksum())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-second best-matching segment by feature similarity.
pub fn retrieve_location(imu_feats: &Tensor, patch_feats: &Tensor) -> Result<Vec<usize>> {
    let sim = similarity(imu_feats, patch_feats)?;
    let s = patch_feats.shape()[0];
    Ok(sim.data().chunks(s).map(argmax).collect())
}

/// `T × S` dot products of IMU and patch features.
pub fn similarity(imu_feats: &Tensor, patch_feats: &Tensor) -> Result<Tensor> {
    ensure!(
        imu_feats.ndim() == 2 && patch_feats.ndim() == 2 && imu_feats.shape()[1] == patch_feats.shape()[1],
        Invalid,
        "feature shapes {:?} and {:?} do not align",
        imu_feats.shape(),
        patch_feats.shape()
    );
    let (t, d, s) = (imu_feats.shape()[0], imu_feats.shape()[1], patch_feats.shape()[0]);
    let mut out = vec![0.0; t * s];
    for i in 0..t {
        let a = &imu_feats.data()[i * d..(i + 1) * d];
        for j in 0..s {
            let b = &patch_feats.data()[j * d..(j + 1) * d];
            out[i * s + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::new(vec![t, s], out)?)
}
