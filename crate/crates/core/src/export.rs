//! Heatmap and trajectory files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::stage2::Heatmap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Csv => "csv",
            HeatmapFormat::Pgm => "pgm",
        }
    }
}

/// One second as `G` rows of `G` comma-separated values; row `i` holds
/// cells `i·G .. (i+1)·G`.
pub fn heatmap_csv(h: &Heatmap, t: usize) -> String {
    let mut out = String::new();
    for row in h.slice(t).chunks(h.grid) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Binary 8-bit PGM scaled so the largest cell is 255.
pub fn heatmap_pgm(h: &Heatmap, t: usize) -> Vec<u8> {
    let slice = h.slice(t);
    let max = slice.iter().fold(0.0f64, |a, &b| a.max(b));
    let mut out = format!("P5\n{} {}\n255\n", h.grid, h.grid).into_bytes();
    out.extend(slice.iter().map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 }));
    out
}

/// Writes one file per second, `{prefix}_t{t:04}.{ext}`, into `dir`.
pub fn write_heatmaps(h: &Heatmap, dir: &Path, prefix: &str, format: HeatmapFormat) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..h.len() {
        let path = dir.join(format!("{prefix}_t{t:04}.{}", format.extension()));
        let bytes = match format {
            HeatmapFormat::Csv => heatmap_csv(h, t).into_bytes(),
            HeatmapFormat::Pgm => heatmap_pgm(h, t),
        };
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(h.len())
}

/// Per-second prediction row.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub t: usize,
    pub position: [f64; 2],
    pub segment: Option<usize>,
    pub action: Option<usize>,
    pub confidence: Option<f64>,
}

/// CSV with header `t,x,y,segment,action,confidence`; absent fields are
/// left empty.
pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("t,x,y,segment,action,confidence\n");
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.t,
            r.position[0],
            r.position[1],
            opt(r.segment.map(|s| s.to_string())),
            opt(r.action.map(|a| a.to_string())),
            opt(r.confidence.map(|c| c.to_string()))
        );
    }
    out
}

pub fn read_predictions_csv(text: &str) -> Result<Vec<PredictionRow>> {
    let mut lines = text.lines();
    ensure!(lines.next() == Some("t,x,y,segment,action,confidence"), Data, "prediction CSV header mismatch");
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Data(format!("malformed prediction row {i}"));
            let f: Vec<&str> = l.split(',').collect();
            ensure!(f.len() == 6, Data, "prediction row {i} has {} fields", f.len());
            let opt_usize = |s: &str| if s.is_empty() { Ok(None) } else { s.parse().map(Some).map_err(|_| bad()) };
            Ok(PredictionRow {
                t: f[0].parse().map_err(|_| bad())?,
                position: [f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?],
                segment: opt_usize(f[3])?,
                action: opt_usize(f[4])?,
                confidence: if f[5].is_empty() { None } else { Some(f[5].parse().map_err(|_| bad())?) },
            })
        })
        .collect()
}
