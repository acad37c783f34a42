//! Localization and action metrics plus the JSON report.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;
use crate::rng;
use crate::world::SegmentGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thresholds_m: Vec<f64>,
    pub topk: Vec<usize>,
    pub splits: Vec<Split>,
    /// Draws of the Monte-Carlo chance estimate.
    pub chance_draws: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { thresholds_m: vec![0.2, 0.4, 0.6], topk: vec![1, 5], splits: vec![Split::TestSeen, Split::TestUnseen], chance_draws: 1_000_000 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.thresholds_m.is_empty(), Config, "at least one threshold is required");
        ensure!(self.thresholds_m.iter().all(|t| *t > 0.0), Config, "thresholds must be positive");
        ensure!(self.thresholds_m.windows(2).all(|w| w[0] < w[1]), Config, "thresholds must be strictly ascending");
        ensure!(self.topk.iter().all(|k| *k >= 1), Config, "top-k values must be at least 1");
        ensure!(self.chance_draws >= 1, Config, "chance_draws must be positive");
        Ok(())
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Fraction of seconds with `‖pred − truth‖ ≤ threshold`.
pub fn success_rate(pred: &[[f64; 2]], truth: &[[f64; 2]], threshold: f64) -> Result<f64> {
    ensure!(pred.len() == truth.len(), Invalid, "{} predictions for {} ground-truth positions", pred.len(), truth.len());
    ensure!(!pred.is_empty(), Invalid, "empty trajectory");
    let hits = pred.iter().zip(truth).filter(|(p, t)| dist(**p, **t) <= threshold).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Share of other cells strictly below the true cell, ties counted half,
/// over `S − 1`.
pub fn relative_score(slice: &[f64], truth: usize) -> Result<f64> {
    ensure!(truth < slice.len(), Invalid, "segment {truth} out of range [0, {})", slice.len());
    ensure!(slice.len() >= 2, Invalid, "relative score needs at least two cells");
    let v = slice[truth];
    let (mut below, mut ties) = (0usize, 0usize);
    for (s, &h) in slice.iter().enumerate() {
        if s == truth {
            continue;
        }
        if h < v {
            below += 1;
        } else if h == v {
            ties += 1;
        }
    }
    Ok((below as f64 + 0.5 * ties as f64) / (slice.len() - 1) as f64)
}

/// Fraction of rows whose label is among the `k` largest logits; equal
/// logits rank by lower index first.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    ensure!(logits.ndim() == 2, Invalid, "logits must be 2-D");
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    ensure!(n == labels.len() && n > 0, Invalid, "{n} logit rows for {} labels", labels.len());
    ensure!(k >= 1 && k <= c, Invalid, "k = {k} outside [1, {c}]");
    ensure!(labels.iter().all(|&l| l < c), Invalid, "label out of range [0, {c})");
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            let rank = row.iter().enumerate().filter(|&(j, &v)| v > row[l] || (v == row[l] && j < l)).count();
            rank < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Monte-Carlo success rate of a predictor choosing a uniformly random cell
/// center for a position uniform over the scene.
pub fn chance_success(grid: &SegmentGrid, threshold: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = rng::stream(seed, &[0xC4A]);
    let centers = grid.centers();
    let l = grid.extent_m;
    let hits = (0..draws)
        .filter(|_| {
            let z = [rng.random_range(0.0..l), rng.random_range(0.0..l)];
            let s = rng.random_range(0..centers.len());
            dist(centers[s], z) <= threshold
        })
        .count();
    hits as f64 / draws as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRate {
    pub threshold_m: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
}

/// One method on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub split: Split,
    pub seconds: usize,
    pub success: Vec<ThresholdRate>,
    pub relative_score: Option<f64>,
    pub action_topk: Option<Vec<TopK>>,
    /// Mean error per elapsed second.
    pub drift_m: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceLevel {
    pub threshold_m: f64,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub dataset_config_hash: String,
    pub config: serde_json::Value,
    pub conventions: Vec<String>,
    pub chance: Vec<ChanceLevel>,
    pub results: Vec<MethodReport>,
}

pub const REPORT_FORMAT: &str = "egoloc-report/1";

/// Design choices in effect that affect how the numbers should be read.
pub fn conventions() -> Vec<String> {
    [
        "relative score: ties count half, denominator S-1, ground-truth cell excluded",
        "argmax ties resolve to the lowest index",
        "success uses the center of the predicted cell against the mean true position of each second",
        "stage-2 inference runs in consecutive clip-length blocks; a short final block repeats its last second",
        "dead reckoning starts from the true initial position and heading, then integrates the gyro for heading",
        "unseen split: new scenes and new participants",
        "chance: uniform random cell center against a position uniform over the scene",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for r in &self.results {
            let rates = r.success.iter().map(|s| s.rate).chain(r.relative_score).chain(r.action_topk.iter().flatten().map(|k| k.accuracy));
            for v in rates {
                ensure!((0.0..=1.0).contains(&v), Invalid, "{} on {} has rate {v} outside [0, 1]", r.method, r.split.name());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `t,method_split...` columns of the drift curves.
    pub fn drift_csv(&self) -> String {
        let n = self.results.iter().map(|r| r.drift_m.len()).max().unwrap_or(0);
        let mut out = String::from("t");
        for r in &self.results {
            out.push_str(&format!(",{}_{}", r.method, r.split.name()));
        }
        out.push('\n');
        for t in 0..n {
            out.push_str(&t.to_string());
            for r in &self.results {
                out.push(',');
                if let Some(v) = r.drift_m.get(t) {
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}
