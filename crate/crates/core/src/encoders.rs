//! Trainable IMU and point-patch encoders and the frozen semantic table
//! standing in for pretrained image and caption encoders.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::motion::{ImuWindow, GRAVITY};
use crate::numerics::{Graph, NodeId, ParamSet, Tensor};
use crate::rng;
use crate::world::SegmentPatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub imu_rate: usize,
    pub imu_channels: [usize; 2],
    pub imu_kernel: usize,
    /// Adds a 1×1 shortcut around the second IMU conv block.
    pub imu_residual: bool,
    pub accel_scale: f64,
    pub gyro_scale: f64,
    pub point_hidden: [usize; 2],
    pub patch_points: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            imu_rate: 50,
            imu_channels: [16, 32],
            imu_kernel: 5,
            imu_residual: true,
            accel_scale: 0.5,
            gyro_scale: 1.0,
            point_hidden: [32, 64],
            patch_points: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim >= 4, Config, "feature dim must be at least 4, got {}", self.dim);
        ensure!(self.imu_kernel % 2 == 1, Config, "imu_kernel must be odd");
        ensure!(self.imu_rate >= 2 && self.patch_points >= 1, Config, "rate and patch size must be positive");
        ensure!(self.imu_channels.iter().chain(&self.point_hidden).all(|&c| c > 0), Config, "channel widths must be positive");
        Ok(())
    }
}

/// Uniform ±√(6/fan_in) weights.
pub fn init_weight(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let a = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-a..a)).collect()).expect("shape/len agree")
}

/// Uniform ±1/√fan_in biases.
pub fn init_bias(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Tensor {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::vector((0..n).map(|_| rng.random_range(-a..a)).collect())
}

/// Looks up bound parameter nodes by name.
pub struct Bound<'a> {
    pub params: &'a ParamSet,
    pub ids: Vec<NodeId>,
}

impl<'a> Bound<'a> {
    pub fn new(params: &'a ParamSet, g: &mut Graph, trainable: bool) -> Self {
        Self { params, ids: params.bind(g, trainable) }
    }

    pub fn id(&self, name: &str) -> NodeId {
        self.ids[self.params.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"))]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImuEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
}

pub fn init_encoders(cfg: &EncoderConfig, seed: u64) -> Result<(ImuEncoder, PointEncoder)> {
    cfg.validate()?;
    Ok((ImuEncoder::init(cfg, seed), PointEncoder::init(cfg, seed)))
}

impl ImuEncoder {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0xE1]);
        let [c1, c2] = cfg.imu_channels;
        let k = cfg.imu_kernel;
        let mut p = ParamSet::new();
        p.push("imu.conv1.w", init_weight(&mut rng, &[k, 6, c1], k * 6));
        p.push("imu.conv1.b", init_bias(&mut rng, c1, k * 6));
        p.push("imu.conv2.w", init_weight(&mut rng, &[k, c1, c2], k * c1));
        p.push("imu.conv2.b", init_bias(&mut rng, c2, k * c1));
        if cfg.imu_residual {
            p.push("imu.skip.w", init_weight(&mut rng, &[1, c1, c2], c1));
        }
        p.push("imu.head.w", init_weight(&mut rng, &[c2, cfg.dim], c2));
        p.push("imu.head.b", init_bias(&mut rng, cfg.dim, c2));
        Self { cfg: cfg.clone(), params: p }
    }

    /// Removes gravity, rescales and stacks windows into `(B, rate, 6)`.
    pub fn batch_input(&self, windows: &[&ImuWindow]) -> Result<Tensor> {
        let r = self.cfg.imu_rate;
        let mut data = Vec::with_capacity(windows.len() * r * 6);
        for w in windows {
            ensure!(w.rows.len() == r, Invalid, "IMU window has {} rows, encoder expects {r}", w.rows.len());
            for row in &w.rows {
                data.extend([
                    row[0] as f64 * self.cfg.accel_scale,
                    row[1] as f64 * self.cfg.accel_scale,
                    (row[2] as f64 - GRAVITY) * self.cfg.accel_scale,
                    row[3] as f64 * self.cfg.gyro_scale,
                    row[4] as f64 * self.cfg.gyro_scale,
                    row[5] as f64 * self.cfg.gyro_scale,
                ]);
            }
        }
        ensure!(!windows.is_empty(), Invalid, "empty IMU batch");
        Ok(Tensor::new(vec![windows.len(), r, 6], data)?)
    }

    /// `(B, rate, 6)` input to `(B, dim)` unit-norm features.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let pad = self.cfg.imu_kernel / 2;
        let h = g.conv1d(x, p.id("imu.conv1.w"), 2, pad)?;
        let h = g.add_bias(h, p.id("imu.conv1.b"))?;
        let h1 = g.relu(h)?;
        let h = g.conv1d(h1, p.id("imu.conv2.w"), 1, pad)?;
        let h = g.add_bias(h, p.id("imu.conv2.b"))?;
        let mut h = g.relu(h)?;
        if self.cfg.imu_residual {
            let skip = g.conv1d(h1, p.id("imu.skip.w"), 1, 0)?;
            h = g.add(h, skip)?;
        }
        let pooled = g.meanpool(h, 1)?;
        let z = g.affine(pooled, p.id("imu.head.w"), p.id("imu.head.b"))?;
        Ok(g.l2_normalize(z, 1)?)
    }

    /// Features of many windows without gradients, in chunks.
    pub fn encode(&self, windows: &[&ImuWindow]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(windows.len() * self.cfg.dim);
        for chunk in windows.chunks(256) {
            let mut g = Graph::new();
            let p = Bound::new(&self.params, &mut g, false);
            let x = g.constant(self.batch_input(chunk)?);
            let f = self.forward(&mut g, &p, x)?;
            out.extend_from_slice(g.value(f).data());
        }
        ensure!(!windows.is_empty(), Invalid, "nothing to encode");
        Ok(Tensor::new(vec![windows.len(), self.cfg.dim], out)?)
    }
}

pub fn encode_imu(enc: &ImuEncoder, window: &ImuWindow) -> Result<Vec<f64>> {
    Ok(enc.encode(&[window])?.into_data())
}

impl PointEncoder {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0xE2]);
        let [h1, h2] = cfg.point_hidden;
        let mut p = ParamSet::new();
        p.push("point.mlp1.w", init_weight(&mut rng, &[3, h1], 3));
        p.push("point.mlp1.b", init_bias(&mut rng, h1, 3));
        p.push("point.mlp2.w", init_weight(&mut rng, &[h1, h2], h1));
        p.push("point.mlp2.b", init_bias(&mut rng, h2, h1));
        p.push("point.head.w", init_weight(&mut rng, &[h2, cfg.dim], h2));
        p.push("point.head.b", init_bias(&mut rng, cfg.dim, h2));
        Self { cfg: cfg.clone(), params: p }
    }

    /// Stacks patches into `(B, N, 3)`.
    pub fn batch_input(&self, patches: &[&SegmentPatch]) -> Result<Tensor> {
        let n = self.cfg.patch_points;
        ensure!(!patches.is_empty(), Invalid, "empty patch batch");
        let mut data = Vec::with_capacity(patches.len() * n * 3);
        for p in patches {
            ensure!(p.points.len() == n, Invalid, "patch has {} points, encoder expects {n}", p.points.len());
            data.extend(p.points.iter().flat_map(|q| q.iter().copied()));
        }
        Ok(Tensor::new(vec![patches.len(), n, 3], data)?)
    }

    /// `(B, N, 3)` input to `(B, dim)` unit-norm features.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let shape = g.value(x).shape().to_vec();
        let (b, n) = (shape[0], shape[1]);
        let flat = g.reshape(x, &[b * n, 3])?;
        let h = g.affine(flat, p.id("point.mlp1.w"), p.id("point.mlp1.b"))?;
        let h = g.relu(h)?;
        let h = g.affine(h, p.id("point.mlp2.w"), p.id("point.mlp2.b"))?;
        let h = g.relu(h)?;
        let h = g.reshape(h, &[b, n, self.cfg.point_hidden[1]])?;
        let pooled = g.maxpool(h, 1)?;
        let z = g.affine(pooled, p.id("point.head.w"), p.id("point.head.b"))?;
        Ok(g.l2_normalize(z, 1)?)
    }

    pub fn encode(&self, patches: &[&SegmentPatch]) -> Result<Tensor> {
        ensure!(!patches.is_empty(), Invalid, "nothing to encode");
        let mut out = Vec::with_capacity(patches.len() * self.cfg.dim);
        for chunk in patches.chunks(64) {
            let mut g = Graph::new();
            let p = Bound::new(&self.params, &mut g, false);
            let x = g.constant(self.batch_input(chunk)?);
            let f = self.forward(&mut g, &p, x)?;
            out.extend_from_slice(g.value(f).data());
        }
        Ok(Tensor::new(vec![patches.len(), self.cfg.dim], out)?)
    }
}

pub fn encode_patch(enc: &PointEncoder, patch: &SegmentPatch) -> Result<Vec<f64>> {
    Ok(enc.encode(&[patch])?.into_data())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedKind {
    Image,
    Text,
}

/// Frozen per-class caption embeddings and the image-noise scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticTable {
    pub dim: usize,
    pub image_sigma: f64,
    pub seed: u64,
    pub text: Vec<Vec<f64>>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n >= 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl SemanticTable {
    /// Seeded Gaussian directions orthonormalized in class order. With more
    /// classes than dimensions the surplus rows are only normalized.
    pub fn new(classes: usize, dim: usize, image_sigma: f64, seed: u64) -> Result<Self> {
        ensure!(dim >= 4 && classes >= 1, Config, "semantic table needs dim ≥ 4 and at least one class");
        ensure!(image_sigma >= 0.0, Config, "image_sigma must be non-negative");
        let mut rng = rng::stream(seed, &[0x5E7]);
        let mut text: Vec<Vec<f64>> = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            if c < dim {
                for u in &text {
                    let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
                }
            }
            normalize(&mut v);
            text.push(v);
        }
        Ok(Self { dim, image_sigma, seed, text })
    }

    pub fn classes(&self) -> usize {
        self.text.len()
    }

    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.image_sigma.to_le_bytes());
        for v in self.text.iter().flatten() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Caption embeddings are the class vector itself. Image embeddings add an
/// isotropic perturbation of total expected norm `image_sigma`, seeded by
/// `(seed, t)`, then renormalize.
pub fn semantic_embed(table: &SemanticTable, class: usize, kind: EmbedKind, t: u64, seed: u64) -> Result<Vec<f64>> {
    let e = table
        .text
        .get(class)
        .ok_or_else(|| Error::Invalid(format!("class {class} not in semantic table of {}", table.classes())))?;
    match kind {
        EmbedKind::Text => Ok(e.clone()),
        EmbedKind::Image => {
            if table.image_sigma == 0.0 {
                return Ok(e.clone());
            }
            let mut rng = rng::stream(seed, &[0x1A6, t, class as u64]);
            let s = table.image_sigma / (table.dim as f64).sqrt();
            let mut v: Vec<f64> = e
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + s * z
                })
                .collect();
            normalize(&mut v);
            Ok(v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_rows_are_orthonormal() {
        let t = SemanticTable::new(7, 64, 0.2, 1).unwrap();
        for i in 0..7 {
            let n: f64 = t.text[i].iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            for j in 0..i {
                let d: f64 = t.text[i].iter().zip(&t.text[j]).map(|(a, b)| a * b).sum();
                assert!(d.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn image_embed_without_noise_is_caption() {
        let t = SemanticTable::new(5, 16, 0.0, 1).unwrap();
        let a = semantic_embed(&t, 3, EmbedKind::Image, 9, 2).unwrap();
        assert_eq!(a, semantic_embed(&t, 3, EmbedKind::Text, 0, 0).unwrap());
        assert!(semantic_embed(&t, 5, EmbedKind::Text, 0, 0).is_err());
    }
}
