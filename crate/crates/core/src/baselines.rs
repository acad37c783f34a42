//! Velocity-accumulation baseline: a small regression net predicts each
//! second's displacement from raw IMU, and positions are integrated from a
//! known start.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoders::{init_bias, init_weight, Bound};
use crate::error::{ensure, Error, Result};
use crate::motion::{ImuWindow, SecondLabel, GRAVITY};
use crate::numerics::{AdamW, AdamWConfig, Graph, NodeId, ParamSet, Tensor};
use crate::rng;

pub const CHECKPOINT_KIND: &str = "velocity";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VelocityConfig {
    pub imu_rate: usize,
    pub channels: usize,
    pub kernel: usize,
    pub hidden: usize,
    pub accel_scale: f64,
    pub gyro_scale: f64,
    pub batch: usize,
    pub steps: usize,
    pub optimizer: AdamWConfig,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        Self {
            imu_rate: 50,
            channels: 16,
            kernel: 5,
            hidden: 64,
            accel_scale: 0.5,
            gyro_scale: 1.0,
            batch: 64,
            steps: 1500,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl VelocityConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.imu_rate >= 4, Config, "velocity net needs at least 4 samples per second");
        ensure!(self.kernel % 2 == 1, Config, "velocity kernel must be odd");
        ensure!(self.channels > 0 && self.hidden > 0 && self.batch > 0, Config, "velocity widths and batch must be positive");
        ensure!(self.optimizer.lr >= 0.0, Config, "learning rate must be non-negative");
        Ok(())
    }

    /// Temporal length after two stride-2 convolutions over two seconds.
    fn pooled_len(&self) -> usize {
        let down = |n: usize| (n - 1) / 2 + 1;
        down(down(2 * self.imu_rate))
    }
}

/// One training pair: the previous and current second of IMU, the true
/// world-frame displacement between their mean positions and the heading at
/// the start of the current second.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementSample {
    pub prev: ImuWindow,
    pub cur: ImuWindow,
    pub heading: f64,
    pub displacement: [f64; 2],
}

/// Pairs for every second after the first.
pub fn displacement_samples(windows: &[ImuWindow], labels: &[SecondLabel]) -> Vec<DisplacementSample> {
    let n = windows.len().min(labels.len());
    (1..n)
        .map(|k| DisplacementSample {
            prev: windows[k - 1].clone(),
            cur: windows[k].clone(),
            heading: labels[k].heading,
            displacement: [labels[k].position[0] - labels[k - 1].position[0], labels[k].position[1] - labels[k - 1].position[1]],
        })
        .collect()
}

fn rotate(v: [f64; 2], angle: f64) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    pub cfg: VelocityConfig,
    pub params: ParamSet,
}

impl VelocityNet {
    pub fn init(cfg: &VelocityConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[0x7E1]);
        let (c, k) = (cfg.channels, cfg.kernel);
        let flat = cfg.pooled_len() * c;
        let mut p = ParamSet::new();
        p.push("vel.conv1.w", init_weight(&mut rng, &[k, 6, c], k * 6));
        p.push("vel.conv1.b", init_bias(&mut rng, c, k * 6));
        p.push("vel.conv2.w", init_weight(&mut rng, &[k, c, c], k * c));
        p.push("vel.conv2.b", init_bias(&mut rng, c, k * c));
        p.push("vel.fc.w", init_weight(&mut rng, &[flat, cfg.hidden], flat));
        p.push("vel.fc.b", init_bias(&mut rng, cfg.hidden, flat));
        p.push("vel.head.w", init_weight(&mut rng, &[cfg.hidden, 2], cfg.hidden));
        p.push("vel.head.b", init_bias(&mut rng, 2, cfg.hidden));
        Ok(Self { cfg: cfg.clone(), params: p })
    }

    /// `(B, 2·rate, 6)` input from consecutive window pairs.
    pub fn batch_input(&self, pairs: &[(&ImuWindow, &ImuWindow)]) -> Result<Tensor> {
        ensure!(!pairs.is_empty(), Invalid, "empty velocity batch");
        let r = self.cfg.imu_rate;
        let mut data = Vec::with_capacity(pairs.len() * 2 * r * 6);
        for (a, b) in pairs {
            ensure!(a.rows.len() == r && b.rows.len() == r, Invalid, "IMU windows must hold {r} rows");
            for row in a.rows.iter().chain(&b.rows) {
                let (sa, sg) = (self.cfg.accel_scale, self.cfg.gyro_scale);
                data.extend([
                    row[0] as f64 * sa,
                    row[1] as f64 * sa,
                    (row[2] as f64 - GRAVITY) * sa,
                    row[3] as f64 * sg,
                    row[4] as f64 * sg,
                    row[5] as f64 * sg,
                ]);
            }
        }
        Ok(Tensor::new(vec![pairs.len(), 2 * r, 6], data)?)
    }

    /// Heading-frame displacement `(B, 2)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let b = g.value(x).shape()[0];
        let pad = self.cfg.kernel / 2;
        let h = g.conv1d(x, p.id("vel.conv1.w"), 2, pad)?;
        let h = g.add_bias(h, p.id("vel.conv1.b"))?;
        let h = g.relu(h)?;
        let h = g.conv1d(h, p.id("vel.conv2.w"), 2, pad)?;
        let h = g.add_bias(h, p.id("vel.conv2.b"))?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[b, self.cfg.pooled_len() * self.cfg.channels])?;
        let h = g.affine(h, p.id("vel.fc.w"), p.id("vel.fc.b"))?;
        let h = g.relu(h)?;
        Ok(g.affine(h, p.id("vel.head.w"), p.id("vel.head.b"))?)
    }

    /// World-frame displacement of each consecutive pair, rotated by the
    /// given headings.
    pub fn predict(&self, pairs: &[(&ImuWindow, &ImuWindow)], headings: &[f64]) -> Result<Vec<[f64; 2]>> {
        ensure!(pairs.len() == headings.len(), Invalid, "{} pairs but {} headings", pairs.len(), headings.len());
        let mut out = Vec::with_capacity(pairs.len());
        for (chunk, hs) in pairs.chunks(256).zip(headings.chunks(256)) {
            let mut g = Graph::new();
            let p = Bound::new(&self.params, &mut g, false);
            let x = g.constant(self.batch_input(chunk)?);
            let y = self.forward(&mut g, &p, x)?;
            out.extend(g.value(y).data().chunks(2).zip(hs).map(|(d, &h)| rotate([d[0], d[1]], h)));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, seed: u64, meta: serde_json::Value) -> Result<Checkpoint> {
        Checkpoint::new(CHECKPOINT_KIND, &VelocityEcho { velocity: self.cfg.clone(), seed }, &self.params, meta)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, u64)> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let echo: VelocityEcho = ckpt.config()?;
        let mut net = Self::init(&echo.velocity, 0)?;
        net.params.assign(&ckpt.params).map_err(|e| Error::Compat(format!("velocity parameters: {e}")))?;
        Ok((net, echo.seed))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VelocityEcho {
    velocity: VelocityConfig,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityRun {
    pub net: VelocityNet,
    pub losses: Vec<f64>,
}

/// Mean-squared-error regression of heading-frame displacements.
pub fn train_velocity_net(samples: &[DisplacementSample], cfg: &VelocityConfig, seed: u64) -> Result<VelocityRun> {
    ensure!(!samples.is_empty(), Invalid, "no displacement samples to train on");
    let mut net = VelocityNet::init(cfg, seed)?;
    let mut params = net.params.clone();
    let mut opt = AdamW::new(cfg.optimizer, &params);
    let mut order = crate::stage1::Batcher::new(samples.len(), cfg.batch.min(samples.len()), rng::derive(seed, &[0x7E2]));
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = order.next().to_vec();
        let pairs: Vec<_> = idx.iter().map(|&i| (&samples[i].prev, &samples[i].cur)).collect();
        let target: Vec<f64> = idx
            .iter()
            .flat_map(|&i| rotate(samples[i].displacement, -samples[i].heading))
            .collect();
        let mut g = Graph::new();
        let p = Bound::new(&params, &mut g, true);
        let x = g.constant(net.batch_input(&pairs)?);
        let y = net.forward(&mut g, &p, x)?;
        let neg = g.constant(Tensor::new(vec![idx.len(), 2], target.into_iter().map(|v| -v).collect())?);
        let diff = g.add(y, neg)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq)?;
        let loss = g.mul_scalar(total, 1.0 / idx.len() as f64)?;
        let value = g.value(loss).item();
        ensure!(value.is_finite(), Invalid, "velocity loss became non-finite");
        g.backward(loss)?;
        let grads = params.grads_from(&g, &p.ids);
        opt.step(&mut params, &grads)?;
        losses.push(value);
    }
    params.quantize_f32();
    net.params = params;
    Ok(VelocityRun { net, losses })
}

/// `ẑ_0 = z0`, `ẑ_t = z0 + Σ_{k=1..t} Δ_k`. No clamping to the scene.
pub fn dead_reckon(z0: [f64; 2], displacements: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut z = z0;
    std::iter::once(z0)
        .chain(displacements.iter().map(|d| {
            z = [z[0] + d[0], z[1] + d[1]];
            z
        }))
        .collect()
}

/// Heading at the start of each second from the initial heading and the
/// integrated yaw-rate gyro; gyro bias makes it drift.
pub fn integrate_heading(h0: f64, windows: &[ImuWindow]) -> Vec<f64> {
    let mut h = h0;
    windows
        .iter()
        .map(|w| {
            let start = h;
            let dt = 1.0 / w.rows.len() as f64;
            h += w.rows.iter().map(|r| r[5] as f64).sum::<f64>() * dt;
            start
        })
        .collect()
}

/// Dead-reckoned trajectory of one sequence from its true initial position
/// and heading, with later headings integrated from the gyro.
pub fn reckon_sequence(net: &VelocityNet, windows: &[ImuWindow], labels: &[SecondLabel]) -> Result<Vec<[f64; 2]>> {
    let n = windows.len().min(labels.len());
    ensure!(n >= 1, Invalid, "sequence has no labelled seconds");
    let headings = integrate_heading(labels[0].heading, &windows[..n]);
    let pairs: Vec<_> = (1..n).map(|k| (&windows[k - 1], &windows[k])).collect();
    let d = if pairs.is_empty() { Vec::new() } else { net.predict(&pairs, &headings[1..])? };
    Ok(dead_reckon(labels[0].position, &d))
}

/// Mean Euclidean error per elapsed second over sequences. Sequences may
/// differ in length; each second averages over the sequences that reach it.
pub fn drift_curve(preds: &[Vec<[f64; 2]>], truths: &[Vec<[f64; 2]>]) -> Result<Vec<f64>> {
    ensure!(preds.len() == truths.len(), Invalid, "{} predicted but {} true trajectories", preds.len(), truths.len());
    let mut sum = Vec::new();
    let mut count = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        ensure!(p.len() == t.len(), Invalid, "trajectory lengths differ ({} vs {})", p.len(), t.len());
        if sum.len() < p.len() {
            sum.resize(p.len(), 0.0);
            count.resize(p.len(), 0usize);
        }
        for (i, (a, b)) in p.iter().zip(t).enumerate() {
            sum[i] += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            count[i] += 1;
        }
    }
    Ok(sum.into_iter().zip(count).map(|(s, c)| s / c as f64).collect())
}
