//! Sequential localization over frozen stage-1 features: correspondence
//! heatmaps, temporal and spatial 3-D conv reasoning, per-second segment
//! classification and location-attended action recognition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::{init_bias, init_weight, Bound};
use crate::error::{ensure, Error, Result};
use crate::numerics::{AdamW, AdamWConfig, Graph, NodeId, ParamSet, Tensor};
use crate::rng;
use crate::stage1::argmax;

pub const CHECKPOINT_KIND: &str = "stage2";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// Clip length in seconds.
    pub clip_s: usize,
    pub channels: usize,
    pub heatmap_temperature: f64,
    pub temporal: bool,
    pub spatial: bool,
    pub temporal_residual: bool,
    pub spatial_residual: bool,
    /// Attend over patch features with the predicted location before
    /// classifying actions; off gives the IMU-only action head.
    pub action_attention: bool,
    pub action_loss_weight: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
    pub smoothing: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            clip_s: 10,
            channels: 16,
            heatmap_temperature: 0.07,
            temporal: true,
            spatial: true,
            temporal_residual: true,
            spatial_residual: true,
            action_attention: true,
            action_loss_weight: 1.0,
            batch: 2,
            steps: 1000,
            optimizer: AdamWConfig::default(),
            smoothing: 50,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.clip_s >= 1, Config, "clip_s must be positive");
        ensure!(self.channels >= 1, Config, "channels must be positive");
        ensure!(self.heatmap_temperature > 0.0, Config, "heatmap temperature must be positive");
        ensure!(self.action_loss_weight >= 0.0, Config, "action loss weight must be non-negative");
        ensure!(self.batch >= 1 && self.smoothing >= 1, Config, "batch and smoothing must be positive");
        ensure!(self.optimizer.lr >= 0.0, Config, "learning rate must be non-negative");
        Ok(())
    }
}

/// Per-second distributions over the `G × G` cells, `T × S` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: usize,
    pub values: Tensor,
}

impl Heatmap {
    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }
}

fn softmax_row(row: &[f64], scale: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = row.iter().map(|v| ((v - m) * scale).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `H_t = softmax_s(⟨imu_t, patch_s⟩ / temperature)`.
pub fn correspondence_heatmaps(imu_feats: &Tensor, patch_feats: &Tensor, grid: usize, temperature: f64) -> Result<Heatmap> {
    ensure!(temperature > 0.0, Invalid, "heatmap temperature must be positive");
    ensure!(patch_feats.shape()[0] == grid * grid, Invalid, "{} patch features for a {grid}×{grid} grid", patch_feats.shape()[0]);
    let sim = crate::stage1::similarity(imu_feats, patch_feats)?;
    let s = grid * grid;
    let data: Vec<f64> = sim.data().chunks(s).flat_map(|r| softmax_row(r, 1.0 / temperature)).collect();
    Ok(Heatmap { grid, values: Tensor::new(sim.shape().to_vec(), data)? })
}

/// Network input channel: `τ · ln(S · H)`, the similarity centered per
/// second, floored to keep empty cells finite.
fn heat_channel(h: &Heatmap, temperature: f64) -> Vec<f64> {
    let s = (h.grid * h.grid) as f64;
    h.values.data().iter().map(|p| temperature * (s * p).max(1e-300).ln()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reasoner {
    pub cfg: Stage2Config,
    pub dim: usize,
    pub grid: usize,
    pub classes: usize,
    pub params: ParamSet,
}

impl Reasoner {
    pub fn init(cfg: &Stage2Config, dim: usize, grid: usize, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        ensure!(dim >= 1 && grid >= 2 && classes >= 1, Invalid, "bad reasoner dimensions");
        let mut rng = rng::stream(seed, &[0x52]);
        let c = cfg.channels;
        let mut p = ParamSet::new();
        let mut lin = |p: &mut ParamSet, name: &str, i: usize, o: usize| {
            p.push(format!("{name}.w"), init_weight(&mut rng, &[i, o], i));
            p.push(format!("{name}.b"), init_bias(&mut rng, o, i));
        };
        lin(&mut p, "temporal.imu_proj", dim, c);
        lin(&mut p, "spatial.point_proj", dim, c);
        lin(&mut p, "spatial.head", c, 1);
        lin(&mut p, "action.attend_proj", dim, dim);
        lin(&mut p, "action.mlp1", dim, dim);
        lin(&mut p, "action.mlp2", dim, classes);
        let mut conv = |p: &mut ParamSet, name: &str, k: [usize; 3], i: usize, o: usize| {
            let fan = k.iter().product::<usize>() * i;
            p.push(format!("{name}.w"), init_weight(&mut rng, &[k[0], k[1], k[2], i, o], fan));
            p.push(format!("{name}.b"), init_bias(&mut rng, o, fan));
        };
        if cfg.temporal {
            conv(&mut p, "temporal.conv1", [3, 3, 3], 1 + c, c);
            conv(&mut p, "temporal.conv2", [3, 3, 3], c, c);
        } else {
            conv(&mut p, "temporal.mix", [1, 1, 1], 1 + c, c);
        }
        if cfg.spatial {
            for (i, name) in ["spatial.conv1", "spatial.conv2", "spatial.conv3"].iter().enumerate() {
                conv(&mut p, name, [1, 3, 3], if i == 0 { 2 * c } else { c }, c);
            }
        } else {
            conv(&mut p, "spatial.mix", [1, 1, 1], 2 * c, c);
        }
        if !cfg.action_attention {
            for name in ["action.attend_proj.w", "action.attend_proj.b"] {
                p.get_mut(name).expect("registered above").data_mut().fill(0.0);
            }
        }
        Ok(Self { cfg: cfg.clone(), dim, grid, classes, params: p })
    }

    fn conv_block(&self, g: &mut Graph, p: &Bound, x: NodeId, name: &str, dil: [usize; 3], pad: [usize; 3]) -> Result<NodeId> {
        let h = g.conv3d(x, p.id(&format!("{name}.w")), dil, pad)?;
        let h = g.add_bias(h, p.id(&format!("{name}.b")))?;
        Ok(g.relu(h)?)
    }

    /// Broadcast IMU projection `(B,T,G,G,C)` and the refined volume.
    pub fn temporal_reason(&self, g: &mut Graph, p: &Bound, heat: NodeId, imu: NodeId) -> Result<(NodeId, NodeId)> {
        let hs = g.value(heat).shape().to_vec();
        ensure!(hs.len() == 5 && hs[4] == 1, Invalid, "heat volume must be (B,T,G,G,1), got {hs:?}");
        let (b, t, gr) = (hs[0], hs[1], hs[2]);
        ensure!(t == self.cfg.clip_s, Invalid, "clip has {t} seconds, reasoner expects {}", self.cfg.clip_s);
        ensure!(gr == self.grid, Invalid, "grid {gr} differs from the reasoner's {}", self.grid);
        let c = self.cfg.channels;
        let flat = g.reshape(imu, &[b * t, self.dim])?;
        let proj = g.affine(flat, p.id("temporal.imu_proj.w"), p.id("temporal.imu_proj.b"))?;
        let proj = g.reshape(proj, &[b, t, 1, 1, c])?;
        let proj = g.broadcast(proj, &[b, t, gr, gr, c])?;
        let x = g.concat(&[heat, proj], 4)?;
        let mut h = if self.cfg.temporal {
            let h = self.conv_block(g, p, x, "temporal.conv1", [1; 3], [1; 3])?;
            self.conv_block(g, p, h, "temporal.conv2", [1; 3], [1; 3])?
        } else {
            self.conv_block(g, p, x, "temporal.mix", [1; 3], [0; 3])?
        };
        if self.cfg.temporal_residual {
            h = g.add(h, proj)?;
        }
        Ok((proj, h))
    }

    /// Trajectory logits `(B·T, S)` from the refined volume and patch
    /// features `(B, S, D)`.
    pub fn spatial_reason(&self, g: &mut Graph, p: &Bound, refined: NodeId, patches: NodeId) -> Result<NodeId> {
        let rs = g.value(refined).shape().to_vec();
        let (b, t, gr, c) = (rs[0], rs[1], rs[2], rs[4]);
        let s = gr * gr;
        let flat = g.reshape(patches, &[b * s, self.dim])?;
        let pf = g.affine(flat, p.id("spatial.point_proj.w"), p.id("spatial.point_proj.b"))?;
        let pf = g.reshape(pf, &[b, 1, gr, gr, c])?;
        let pf = g.broadcast(pf, &[b, t, gr, gr, c])?;
        let x = g.concat(&[refined, pf], 4)?;
        let mut y = if self.cfg.spatial {
            let y = self.conv_block(g, p, x, "spatial.conv1", [1, 1, 1], [0, 1, 1])?;
            let y = self.conv_block(g, p, y, "spatial.conv2", [1, 2, 2], [0, 2, 2])?;
            self.conv_block(g, p, y, "spatial.conv3", [1, 4, 4], [0, 4, 4])?
        } else {
            self.conv_block(g, p, x, "spatial.mix", [1; 3], [0; 3])?
        };
        if self.cfg.spatial_residual {
            y = g.add(y, pf)?;
        }
        let y = g.reshape(y, &[b * t * s, c])?;
        let logits = g.affine(y, p.id("spatial.head.w"), p.id("spatial.head.b"))?;
        Ok(g.reshape(logits, &[b * t, s])?)
    }

    /// Action logits `(B·T, |C|)` from trajectory probabilities `(B·T, S)`.
    pub fn action_recognize(&self, g: &mut Graph, p: &Bound, probs: NodeId, patches: NodeId, imu: NodeId) -> Result<NodeId> {
        let ps = g.value(patches).shape().to_vec();
        let (b, s) = (ps[0], ps[1]);
        let bt = g.value(probs).shape()[0];
        let t = bt / b;
        let imu = g.reshape(imu, &[bt, self.dim])?;
        let fused = if self.cfg.action_attention {
            let pr = g.reshape(probs, &[b, t, s])?;
            let attended = g.matmul(pr, patches)?;
            let attended = g.reshape(attended, &[bt, self.dim])?;
            let a = g.affine(attended, p.id("action.attend_proj.w"), p.id("action.attend_proj.b"))?;
            g.add(a, imu)?
        } else {
            imu
        };
        let h = g.affine(fused, p.id("action.mlp1.w"), p.id("action.mlp1.b"))?;
        let h = g.relu(h)?;
        Ok(g.affine(h, p.id("action.mlp2.w"), p.id("action.mlp2.b"))?)
    }

    /// Full forward pass: `(trajectory logits, action logits)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, clip: &ClipInputs) -> Result<(NodeId, NodeId)> {
        let heat = g.constant(clip.heat.clone());
        let imu = g.constant(clip.imu.clone());
        let patches = g.constant(clip.patches.clone());
        let (_, refined) = self.temporal_reason(g, p, heat, imu)?;
        let logits = self.spatial_reason(g, p, refined, patches)?;
        let probs = g.softmax(logits, 1)?;
        let actions = self.action_recognize(g, p, probs, patches, imu)?;
        Ok((logits, actions))
    }
}

/// Summed cross-entropy over rows; divided by `batch` for a per-clip mean.
pub fn traj_loss(g: &mut Graph, logits: NodeId, labels: &[usize], batch: usize) -> Result<NodeId> {
    let s = g.value(logits).shape()[1];
    ensure!(labels.iter().all(|&l| l < s), Invalid, "segment label out of range [0, {s})");
    let ce = g.cross_entropy(logits, labels)?;
    Ok(g.mul_scalar(ce, 1.0 / batch as f64)?)
}

pub fn action_loss(g: &mut Graph, logits: NodeId, labels: &[usize], batch: usize) -> Result<NodeId> {
    let c = g.value(logits).shape()[1];
    ensure!(labels.iter().all(|&l| l < c), Invalid, "action label out of range [0, {c})");
    let ce = g.cross_entropy(logits, labels)?;
    Ok(g.mul_scalar(ce, 1.0 / batch as f64)?)
}

/// Network-ready tensors of a batch of clips.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInputs {
    /// `(B, T, G, G, 1)`
    pub heat: Tensor,
    /// `(B, T, D)`
    pub imu: Tensor,
    /// `(B, S, D)`
    pub patches: Tensor,
}

/// One clip: `T` IMU features, the scene's patch features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip<'a> {
    pub imu: &'a [f64],
    pub patches: &'a Tensor,
    pub segments: &'a [usize],
    pub actions: &'a [usize],
}

pub fn clip_inputs(clips: &[Clip], dim: usize, grid: usize, temperature: f64) -> Result<ClipInputs> {
    ensure!(!clips.is_empty(), Invalid, "empty clip batch");
    let t = clips[0].imu.len() / dim;
    let s = grid * grid;
    let (mut heat, mut imu, mut patches) = (Vec::new(), Vec::new(), Vec::new());
    for c in clips {
        ensure!(c.imu.len() == t * dim, Invalid, "clips in a batch must share a length");
        let f = Tensor::new(vec![t, dim], c.imu.to_vec())?;
        let h = correspondence_heatmaps(&f, c.patches, grid, temperature)?;
        heat.extend(heat_channel(&h, temperature));
        imu.extend_from_slice(c.imu);
        patches.extend_from_slice(c.patches.data());
    }
    let b = clips.len();
    Ok(ClipInputs {
        heat: Tensor::new(vec![b, t, grid, grid, 1], heat)?,
        imu: Tensor::new(vec![b, t, dim], imu)?,
        patches: Tensor::new(vec![b, s, dim], patches)?,
    })
}

/// Frozen features of one sequence for stage-2 training or inference.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub scene: usize,
    /// `len × D`, row-major.
    pub imu: Vec<f64>,
    pub segments: Vec<usize>,
    pub actions: Vec<usize>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Run {
    pub model: Reasoner,
    /// Per-step (total, trajectory, action) losses.
    pub losses: Vec<[f64; 3]>,
}

/// Settings stored alongside stage-2 parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage2Echo {
    pub stage2: Stage2Config,
    pub dim: usize,
    pub grid: usize,
    pub classes: usize,
    pub seed: u64,
    /// Checksums of the stage-1 encoders the reasoner was trained on.
    pub encoder_checksums: [String; 2],
}

fn step_loss(model: &Reasoner, params: &ParamSet, inputs: &ClipInputs, seg: &[usize], act: &[usize], b: usize, train: bool) -> Result<([f64; 3], Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let p = Bound::new(params, &mut g, train);
    let (logits, alog) = model.forward(&mut g, &p, inputs)?;
    let lt = traj_loss(&mut g, logits, seg, b)?;
    let la = action_loss(&mut g, alog, act, b)?;
    let w = model.cfg.action_loss_weight;
    let total = if w == 0.0 {
        lt
    } else {
        let wa = g.mul_scalar(la, w)?;
        g.add(lt, wa)?
    };
    let vals = [g.value(total).item(), g.value(lt).item(), g.value(la).item()];
    ensure!(vals[0].is_finite(), Invalid, "stage-2 loss became non-finite");
    if !train {
        return Ok((vals, None));
    }
    g.backward(total)?;
    let grads = params.grads_from(&g, &p.ids);
    Ok((vals, Some(grads)))
}

/// Trains the reasoner on random clips drawn from `seqs`; `patches[scene]`
/// holds each scene's `S × D` frozen patch features.
pub fn train_stage2(seqs: &[FeatureSequence], patches: &[Tensor], dim: usize, grid: usize, classes: usize, cfg: &Stage2Config, seed: u64) -> Result<Stage2Run> {
    cfg.validate()?;
    let t = cfg.clip_s;
    let usable: Vec<&FeatureSequence> = seqs.iter().filter(|s| s.len() >= t).collect();
    ensure!(!usable.is_empty(), Invalid, "no training sequence is at least {t} s long");
    for s in &usable {
        let p = patches.get(s.scene).ok_or_else(|| Error::Invalid(format!("no patch features for scene {}", s.scene)))?;
        ensure!(p.shape() == [grid * grid, dim], Compat, "patch features {:?} do not match grid {grid} and dim {dim}", p.shape());
        ensure!(s.imu.len() == s.len() * dim, Compat, "IMU features do not match dim {dim}");
    }
    let mut model = Reasoner::init(cfg, dim, grid, classes, seed)?;
    let mut params = model.params.clone();
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let frozen_attention = !cfg.action_attention;
    let mut rng = rng::stream(seed, &[0xC11]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| {
                let q = rng.random_range(0..usable.len());
                (q, rng.random_range(0..=usable[q].len() - t))
            })
            .collect();
        let clips: Vec<Clip> = picks
            .iter()
            .map(|&(q, st)| {
                let s = usable[q];
                Clip { imu: &s.imu[st * dim..(st + t) * dim], patches: &patches[s.scene], segments: &s.segments[st..st + t], actions: &s.actions[st..st + t] }
            })
            .collect();
        let inputs = clip_inputs(&clips, dim, grid, cfg.heatmap_temperature)?;
        let seg: Vec<usize> = clips.iter().flat_map(|c| c.segments.iter().copied()).collect();
        let act: Vec<usize> = clips.iter().flat_map(|c| c.actions.iter().copied()).collect();
        let (vals, grads) = step_loss(&model, &params, &inputs, &seg, &act, cfg.batch, true)?;
        let mut grads = grads.expect("training step has grads");
        if frozen_attention {
            for name in ["action.attend_proj.w", "action.attend_proj.b"] {
                let i = params.index_of(name).expect("registered");
                grads[i].data_mut().fill(0.0);
            }
        }
        opt.step(&mut params, &grads)?;
        losses.push(vals);
    }
    params.quantize_f32();
    model.params = params;
    Ok(Stage2Run { model, losses })
}

impl Reasoner {
    pub fn to_checkpoint(&self, echo: &Stage2Echo, meta: serde_json::Value) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, echo, &self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Stage2Echo)> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let echo: Stage2Echo = ckpt.config()?;
        let mut model = Self::init(&echo.stage2, echo.dim, echo.grid, echo.classes, 0)?;
        model.params.assign(&ckpt.params).map_err(|e| Error::Compat(format!("stage-2 parameters: {e}")))?;
        Ok((model, echo))
    }
}

/// Per-second outputs of [`infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub segments: Vec<usize>,
    pub positions: Vec<[f64; 2]>,
    pub actions: Vec<usize>,
    pub confidence: Vec<f64>,
    /// Action logits, `len × |C|`.
    pub action_logits: Tensor,
    pub stage1_heatmap: Heatmap,
    pub stage2_heatmap: Heatmap,
}

/// Runs the reasoner over consecutive `T`-second blocks. A trailing partial
/// block is padded by repeating its last second; padded outputs are dropped.
pub fn infer(model: &Reasoner, imu: &[f64], patches: &Tensor, centers: &[[f64; 2]]) -> Result<Inference> {
    let (d, gr, t) = (model.dim, model.grid, model.cfg.clip_s);
    let s = gr * gr;
    ensure!(patches.shape() == [s, d], Compat, "patch features {:?} do not match the reasoner (grid {gr}, dim {d})", patches.shape());
    ensure!(centers.len() == s, Compat, "{} cell centers for {s} segments", centers.len());
    ensure!(imu.len() % d == 0 && !imu.is_empty(), Invalid, "IMU features must be a non-empty multiple of dim {d}");
    let n = imu.len() / d;
    let (mut h1, mut h2, mut alog) = (Vec::with_capacity(n * s), Vec::with_capacity(n * s), Vec::with_capacity(n * model.classes));
    for start in (0..n).step_by(t) {
        let mut block: Vec<f64> = imu[start * d..(start + t).min(n) * d].to_vec();
        let valid = block.len() / d;
        while block.len() < t * d {
            let last = block[block.len() - d..].to_vec();
            block.extend(last);
        }
        let dummy = vec![0usize; t];
        let clip = Clip { imu: &block, patches, segments: &dummy, actions: &dummy };
        let inputs = clip_inputs(&[clip], d, gr, model.cfg.heatmap_temperature)?;
        let f = Tensor::new(vec![t, d], block.clone())?;
        let heat = correspondence_heatmaps(&f, patches, gr, model.cfg.heatmap_temperature)?;
        h1.extend_from_slice(&heat.values.data()[..valid * s]);
        let mut g = Graph::new();
        let p = Bound::new(&model.params, &mut g, false);
        let (logits, actions) = model.forward(&mut g, &p, &inputs)?;
        let probs = g.softmax(logits, 1)?;
        h2.extend_from_slice(&g.value(probs).data()[..valid * s]);
        alog.extend_from_slice(&g.value(actions).data()[..valid * model.classes]);
    }
    let stage2 = Heatmap { grid: gr, values: Tensor::new(vec![n, s], h2)? };
    let segments: Vec<usize> = (0..n).map(|i| argmax(stage2.slice(i))).collect();
    let confidence = segments.iter().enumerate().map(|(i, &sg)| stage2.slice(i)[sg]).collect();
    let action_logits = Tensor::new(vec![n, model.classes], alog)?;
    let actions = (0..n).map(|i| argmax(action_logits.row(i))).collect();
    Ok(Inference {
        positions: segments.iter().map(|&sg| centers[sg]).collect(),
        segments,
        actions,
        confidence,
        action_logits,
        stage1_heatmap: Heatmap { grid: gr, values: Tensor::new(vec![n, s], h1)? },
        stage2_heatmap: stage2,
    })
}
