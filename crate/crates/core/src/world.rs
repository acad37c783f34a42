//! Synthetic indoor scenes: anchor placement, point clouds, the uniform
//! segment grid and fixed-size local patches.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;

/// Floor points carry a small positive height jitter of this scale.
pub const FLOOR_Z_SIGMA: f64 = 0.01;
pub const FLOOR_Z_MAX: f64 = 0.05;
pub const CEILING_M: f64 = 2.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorType {
    pub id: u8,
    pub name: String,
    /// Height range (m) of the cluster's points.
    pub height_m: [f64; 2],
    /// Lateral standard deviation (m) of the cluster's footprint.
    pub spread_m: f64,
    pub density: f64,
}

/// The built-in anchor catalog. Mean heights are at least 0.15 m apart.
pub fn default_anchor_types() -> Vec<AnchorType> {
    let t = |id, name: &str, lo, hi, spread| AnchorType {
        id,
        name: name.to_string(),
        height_m: [lo, hi],
        spread_m: spread,
        density: 1.0,
    };
    vec![
        t(0, "open_floor", 0.0, 0.03, 0.30),
        t(1, "table", 0.35, 0.75, 0.25),
        t(2, "counter", 0.55, 0.95, 0.25),
        t(3, "sink", 0.80, 1.20, 0.22),
        t(4, "stove", 1.00, 1.60, 0.22),
        t(5, "cabinet", 1.40, 2.20, 0.22),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub extent_m: f64,
    pub anchor_types: Vec<AnchorType>,
    /// Number of anchors per type name.
    pub anchor_counts: BTreeMap<String, usize>,
    pub min_anchor_dist_m: f64,
    pub anchor_margin_m: f64,
    /// Uniform floor points per square meter.
    pub floor_density: f64,
    /// Points per anchor cluster before the type's density weight.
    pub cluster_points: usize,
    pub grid_cells: usize,
    pub patch_side_m: f64,
    pub patch_points: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let anchor_types = default_anchor_types();
        let anchor_counts = anchor_types.iter().map(|t| (t.name.clone(), 1)).collect();
        Self {
            extent_m: 4.0,
            anchor_types,
            anchor_counts,
            min_anchor_dist_m: 0.6,
            anchor_margin_m: 0.3,
            floor_density: 200.0,
            cluster_points: 800,
            grid_cells: 20,
            patch_side_m: 1.0,
            patch_points: 256,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!((2.5..=6.5).contains(&self.extent_m), Config, "extent {} outside [2.5, 6.5] m", self.extent_m);
        ensure!(self.grid_cells >= 2, Config, "grid_cells must be at least 2");
        ensure!(self.patch_points > 0, Config, "patch_points must be positive");
        ensure!(self.patch_side_m > 0.0, Config, "patch_side_m must be positive");
        let mut ids: Vec<u8> = self.anchor_types.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ensure!(ids.len() == self.anchor_types.len(), Config, "anchor type ids must be distinct");
        for t in &self.anchor_types {
            ensure!(t.spread_m > 0.0, Config, "anchor type {} needs positive spread", t.name);
            ensure!(t.height_m[0] <= t.height_m[1], Config, "anchor type {} height range inverted", t.name);
        }
        for name in self.anchor_counts.keys() {
            ensure!(self.anchor_type(name).is_some(), Config, "unknown anchor type {name}");
        }
        let total: usize = self.anchor_counts.values().sum();
        ensure!(total >= 3, Config, "at least 3 anchors required, got {total}");
        Ok(())
    }

    pub fn anchor_type(&self, name: &str) -> Option<&AnchorType> {
        self.anchor_types.iter().find(|t| t.name == name)
    }

    pub fn grid(&self) -> SegmentGrid {
        SegmentGrid::new(self.extent_m, self.grid_cells)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Anchor {
    pub type_id: u8,
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub extent_m: f64,
    pub anchor_types: Vec<AnchorType>,
    pub anchors: Vec<Anchor>,
    pub seed: u64,
}

impl Scene {
    pub fn anchor_type(&self, anchor: &Anchor) -> &AnchorType {
        self.anchor_types
            .iter()
            .find(|t| t.id == anchor.type_id)
            .expect("anchor refers to a type of its scene")
    }

    pub fn bounds(&self) -> Bounds {
        Bounds { min: [0.0, 0.0], max: [self.extent_m, self.extent_m] }
    }
}

/// Axis-aligned floor rectangle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    pub fn shifted(self, by: [f64; 2]) -> Self {
        Self {
            min: [self.min[0] + by[0], self.min[1] + by[1]],
            max: [self.max[0] + by[0], self.max[1] + by[1]],
        }
    }
}

/// Scene points in meters, stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePointCloud {
    pub points: Vec<[f32; 3]>,
}

impl ScenePointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Little-endian: u64 point count, then x, y, z as f32 per point.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&(self.points.len() as u64).to_le_bytes())?;
        for p in &self.points {
            for c in p {
                w.write_all(&c.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> std::io::Result<Self> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut buf = vec![0u8; n * 12];
        r.read_exact(&mut buf)?;
        let points = buf
            .chunks_exact(12)
            .map(|c| {
                let f = |i: usize| f32::from_le_bytes([c[i], c[i + 1], c[i + 2], c[i + 3]]);
                [f(0), f(4), f(8)]
            })
            .collect();
        Ok(Self { points })
    }

    pub fn shifted(&self, by: [f64; 2]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [(p[0] as f64 + by[0]) as f32, (p[1] as f64 + by[1]) as f32, p[2]])
                .collect(),
        }
    }
}

fn floor_z(rng: &mut impl Rng) -> f64 {
    let n = Normal::new(0.0, FLOOR_Z_SIGMA).expect("valid sigma");
    n.sample(rng).abs().min(FLOOR_Z_MAX)
}

/// Places anchors and samples the scene's point cloud.
pub fn generate_scene(cfg: &WorldConfig, seed: u64) -> Result<(Scene, ScenePointCloud)> {
    cfg.validate()?;
    let l = cfg.extent_m;
    let mut rng = rng::stream(seed, &[0x5CE0]);
    let (lo, hi) = (cfg.anchor_margin_m, l - cfg.anchor_margin_m);
    let mut anchors: Vec<Anchor> = Vec::new();
    for t in &cfg.anchor_types {
        let count = cfg.anchor_counts.get(&t.name).copied().unwrap_or(0);
        for _ in 0..count {
            let mut placed = None;
            for _ in 0..1000 {
                let c = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
                let ok = anchors.iter().all(|a| {
                    let d = ((a.center[0] - c[0]).powi(2) + (a.center[1] - c[1]).powi(2)).sqrt();
                    d >= cfg.min_anchor_dist_m
                });
                if ok {
                    placed = Some(c);
                    break;
                }
            }
            let center = placed.ok_or_else(|| {
                Error::Invalid(format!("could not place anchor {} after 1000 attempts", t.name))
            })?;
            anchors.push(Anchor { type_id: t.id, center });
        }
    }

    let mut points = Vec::new();
    let n_floor = (cfg.floor_density * l * l).round() as usize;
    for _ in 0..n_floor {
        let x = rng.random_range(0.0..l);
        let y = rng.random_range(0.0..l);
        points.push([x as f32, y as f32, floor_z(&mut rng) as f32]);
    }
    for a in &anchors {
        let t = cfg.anchor_types.iter().find(|t| t.id == a.type_id).expect("placed from catalog");
        let lateral = Normal::new(0.0, t.spread_m).expect("positive spread");
        let n = (cfg.cluster_points as f64 * t.density).round() as usize;
        for _ in 0..n {
            let x = (a.center[0] + lateral.sample(&mut rng)).clamp(0.0, l);
            let y = (a.center[1] + lateral.sample(&mut rng)).clamp(0.0, l);
            let z = if t.height_m[1] > t.height_m[0] {
                rng.random_range(t.height_m[0]..t.height_m[1])
            } else {
                t.height_m[0]
            };
            points.push([x as f32, y as f32, z.min(CEILING_M) as f32]);
        }
    }
    let scene = Scene { extent_m: l, anchor_types: cfg.anchor_types.clone(), anchors, seed };
    Ok((scene, ScenePointCloud { points }))
}

/// Uniform `g × g` partition of the square floor `[0, extent]²`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentGrid {
    pub extent_m: f64,
    pub cells: usize,
    pub cell_side_m: f64,
}

impl SegmentGrid {
    pub fn new(extent_m: f64, cells: usize) -> Self {
        Self { extent_m, cells, cell_side_m: extent_m / cells as f64 }
    }

    pub fn num_segments(&self) -> usize {
        self.cells * self.cells
    }

    fn axis_index(&self, v: f64) -> usize {
        let i = (v / self.cell_side_m).floor();
        if i < 0.0 {
            0
        } else {
            (i as usize).min(self.cells - 1)
        }
    }

    /// Segment index `row · G + col` of a floor position; positions outside
    /// the scene are clamped to the border cells.
    pub fn segment_of(&self, xy: [f64; 2]) -> usize {
        self.axis_index(xy[1]) * self.cells + self.axis_index(xy[0])
    }

    pub fn center(&self, s: usize) -> [f64; 2] {
        let (row, col) = (s / self.cells, s % self.cells);
        [(col as f64 + 0.5) * self.cell_side_m, (row as f64 + 0.5) * self.cell_side_m]
    }

    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.num_segments()).map(|s| self.center(s)).collect()
    }
}

/// Grid over a scene's floor.
pub fn partition(scene: &Scene, cells: usize) -> SegmentGrid {
    SegmentGrid::new(scene.extent_m, cells.max(2))
}

pub fn nearest_segment(z: [f64; 2], grid: &SegmentGrid) -> usize {
    grid.segment_of(z)
}

/// Fixed-size local point set, re-centered on the patch center in x and y.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentPatch {
    pub segment: usize,
    pub points: Vec<[f64; 3]>,
}

impl SegmentPatch {
    pub fn mean_z(&self) -> f64 {
        self.points.iter().map(|p| p[2]).sum::<f64>() / self.points.len() as f64
    }

    pub fn var_z(&self) -> f64 {
        let m = self.mean_z();
        self.points.iter().map(|p| (p[2] - m).powi(2)).sum::<f64>() / self.points.len() as f64
    }
}

/// Extracts the `n` points of the square patch of side `side` around
/// `center`: subsampled when crowded, padded with floor samples otherwise.
pub fn patch_at(
    cloud: &ScenePointCloud,
    bounds: Bounds,
    center: [f64; 2],
    side: f64,
    n: usize,
    segment: usize,
    seed: u64,
) -> SegmentPatch {
    let h = side / 2.0;
    let local: Vec<[f64; 3]> = cloud
        .points
        .iter()
        .filter_map(|p| {
            let dx = p[0] as f64 - center[0];
            let dy = p[1] as f64 - center[1];
            (dx.abs() <= h && dy.abs() <= h).then_some([dx, dy, p[2] as f64])
        })
        .collect();
    let mut rng = rng::stream(seed, &[0x9A7C]);
    let points = if local.len() >= n {
        let mut idx = sample(&mut rng, local.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| local[i]).collect()
    } else {
        let x0 = (center[0] - h).max(bounds.min[0]) - center[0];
        let x1 = (center[0] + h).min(bounds.max[0]) - center[0];
        let y0 = (center[1] - h).max(bounds.min[1]) - center[1];
        let y1 = (center[1] + h).min(bounds.max[1]) - center[1];
        let mut pts = local;
        while pts.len() < n {
            let x = if x1 > x0 { rng.random_range(x0..x1) } else { x0 };
            let y = if y1 > y0 { rng.random_range(y0..y1) } else { y0 };
            pts.push([x, y, floor_z(&mut rng)]);
        }
        pts
    };
    SegmentPatch { segment, points }
}

/// Patch centered on segment `s` of `grid`, seeded by the scene and segment.
pub fn segment_patch(scene: &Scene, cloud: &ScenePointCloud, grid: &SegmentGrid, s: usize, side: f64, n: usize) -> SegmentPatch {
    let seed = rng::derive(scene.seed, &[0x9A7C, s as u64]);
    patch_at(cloud, scene.bounds(), grid.center(s), side, n, s, seed)
}
