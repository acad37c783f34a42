use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use egoloc_core::baselines::VelocityNet;
use egoloc_core::checkpoint::Checkpoint;
use egoloc_core::config::RunConfig;
use egoloc_core::dataset::{Dataset, Manifest, Split, MANIFEST};
use egoloc_core::error::{Error, Result};
use egoloc_core::export::{predictions_csv, write_heatmaps, HeatmapFormat, PredictionRow};
use egoloc_core::pipeline::{self, Models, PatchBank};
use egoloc_core::stage1::{smoothed, Stage1Echo, Stage1Model};
use egoloc_core::stage2::{Reasoner, Stage2Echo};

#[derive(Parser)]
#[command(name = "egoloc", version, about = "Inertial localization on synthetic indoor scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Velocity,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Pgm,
}

impl From<Format> for HeatmapFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => HeatmapFormat::Csv,
            Format::Pgm => HeatmapFormat::Pgm,
        }
    }
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration; defaults to the dataset's own config, or the
    /// desk profile when generating.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenes, sequences and the manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage and write its checkpoint and loss trace.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stage-1 checkpoint, required for stage 2.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Evaluate all methods on the test splits and write a JSON report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        velocity: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also export both heatmap stages for every evaluated second.
        #[arg(long)]
        heatmaps: bool,
        #[arg(long, value_enum, default_value = "csv")]
        heatmap_format: Format,
    },
    /// Export heatmaps and predictions of one sequence.
    ExportHeatmaps {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        sequence: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
}

fn resolve_config(common: &Common, manifest: Option<&Manifest>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, &common.profile, manifest) {
        (Some(path), _, _) => RunConfig::load(path)?,
        (None, Some(p), _) => RunConfig::profile(p)?,
        (None, None, Some(m)) => RunConfig::from_json(&m.config.to_string())?,
        (None, None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_data(dir: &Path, cfg: &RunConfig) -> Result<(Dataset, Manifest)> {
    let (ds, m) = Dataset::load(dir)?;
    let want = cfg.dataset_hash()?;
    if m.config_hash != want {
        return Err(Error::Compat(format!("dataset {} was generated with config {}, the run config gives {want}", dir.display(), m.config_hash)));
    }
    Ok((ds, m))
}

fn check_dataset(ckpt: &Checkpoint, manifest: &Manifest, what: &str) -> Result<()> {
    match ckpt.header.meta.get("dataset_config_hash").and_then(|v| v.as_str()) {
        Some(h) if h == manifest.config_hash => Ok(()),
        Some(h) => Err(Error::Compat(format!("{what} checkpoint was trained on dataset config {h}, not {}", manifest.config_hash))),
        None => Err(Error::Compat(format!("{what} checkpoint does not record its dataset config"))),
    }
}

fn meta(cfg: &RunConfig, manifest: &Manifest) -> Result<serde_json::Value> {
    Ok(json!({
        "dataset_config_hash": manifest.config_hash,
        "run_config_hash": cfg.hash()?,
        "run_config": cfg.to_json()?,
    }))
}

fn load_stage1(path: &Path, manifest: &Manifest) -> Result<Stage1Model> {
    let ck = Checkpoint::load(path)?;
    check_dataset(&ck, manifest, "stage-1")?;
    Ok(Stage1Model::from_checkpoint(&ck)?.0)
}

fn load_stage2(path: &Path, manifest: &Manifest, stage1: &Stage1Model) -> Result<Reasoner> {
    let ck = Checkpoint::load(path)?;
    check_dataset(&ck, manifest, "stage-2")?;
    let (model, echo) = Reasoner::from_checkpoint(&ck)?;
    let (a, b) = stage1.checksums();
    if echo.encoder_checksums != [a, b] {
        return Err(Error::Compat("stage-2 checkpoint was trained on different stage-1 encoders".into()));
    }
    Ok(model)
}

fn cmd_gen(common: &Common, out: &Path, force: bool) -> Result<()> {
    let cfg = resolve_config(common, None)?;
    let non_empty = out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::Config(format!("{} exists and is not empty; pass --force to replace it", out.display())));
        }
        for sub in ["scenes", "sequences"] {
            let p = out.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    let ds = pipeline::generate(&cfg)?;
    ds.write(out, &cfg.to_json()?)?;
    println!(
        "wrote {} scenes and {} sequences to {} (config {})",
        ds.scenes.len(),
        ds.sequences.len(),
        out.join(MANIFEST).display(),
        cfg.hash()?
    );
    Ok(())
}

fn cmd_train(common: &Common, stage: Stage, data: &Path, out: &Path, stage1: Option<&Path>, steps: Option<usize>) -> Result<()> {
    let manifest = Dataset::read_manifest(data)?;
    let mut cfg = resolve_config(common, Some(&manifest))?;
    if let Some(n) = steps {
        match stage {
            Stage::One => cfg.stage1.steps = n,
            Stage::Two => cfg.stage2.steps = n,
            Stage::Velocity => cfg.velocity.steps = n,
        }
    }
    let prerequisite = match stage {
        Stage::Two => Some(stage1.ok_or_else(|| Error::Config("stage 2 needs --stage1 <checkpoint>".into()))?),
        _ => None,
    };
    let (ds, manifest) = load_data(data, &cfg)?;
    let meta = meta(&cfg, &manifest)?;
    let (ckpt, trace) = match stage {
        Stage::One => {
            let bank = PatchBank::build(&ds, &cfg.world);
            let run = pipeline::run_stage1(&cfg, &ds, &bank)?;
            let echo = Stage1Echo { encoder: cfg.encoder.clone(), stage1: cfg.stage1.clone(), seed: cfg.seed };
            let sm = smoothed(&run.losses, cfg.stage1.smoothing);
            let rows: String = run.losses.iter().zip(&sm).enumerate().map(|(i, (l, s))| format!("{i},{l},{s}\n")).collect();
            (run.model.to_checkpoint(&echo, meta)?, format!("step,loss,smoothed\n{rows}"))
        }
        Stage::Two => {
            let s1 = load_stage1(prerequisite.expect("checked above"), &manifest)?;
            let bank = PatchBank::build(&ds, &cfg.world);
            let outcome = pipeline::run_stage2(&cfg, &cfg.stage2, &ds, &bank, &s1)?;
            if outcome.checksums_before != outcome.checksums_after {
                return Err(Error::Invalid("stage-1 encoders changed during stage-2 training".into()));
            }
            let (a, b) = outcome.checksums_after;
            let echo = Stage2Echo {
                stage2: cfg.stage2.clone(),
                dim: cfg.encoder.dim,
                grid: cfg.world.grid_cells,
                classes: cfg.actions.len(),
                seed: cfg.seed,
                encoder_checksums: [a, b],
            };
            let rows: String = outcome.run.losses.iter().enumerate().map(|(i, l)| format!("{i},{},{},{}\n", l[0], l[1], l[2])).collect();
            (outcome.run.model.to_checkpoint(&echo, meta)?, format!("step,total,trajectory,action\n{rows}"))
        }
        Stage::Velocity => {
            let run = pipeline::run_velocity(&cfg, &ds)?;
            let rows: String = run.losses.iter().enumerate().map(|(i, l)| format!("{i},{l}\n")).collect();
            (run.net.to_checkpoint(cfg.seed, meta)?, format!("step,loss\n{rows}"))
        }
    };
    write(out, ckpt.to_bytes()?)?;
    let trace_path = sibling(out, ".trace.csv");
    write(&trace_path, trace)?;
    println!("wrote {} and {} (config {})", out.display(), trace_path.display(), cfg.hash()?);
    Ok(())
}

fn export_sequence(dir: &Path, inf: &egoloc_core::stage2::Inference, format: HeatmapFormat) -> Result<usize> {
    Ok(write_heatmaps(&inf.stage1_heatmap, dir, "stage1", format)? + write_heatmaps(&inf.stage2_heatmap, dir, "stage2", format)?)
}

fn stage2_rows(inf: &egoloc_core::stage2::Inference) -> Vec<PredictionRow> {
    (0..inf.segments.len())
        .map(|t| PredictionRow {
            t,
            position: inf.positions[t],
            segment: Some(inf.segments[t]),
            action: Some(inf.actions[t]),
            confidence: Some(inf.confidence[t]),
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(common: &Common, data: &Path, s1: &Path, s2: &Path, vel: &Path, out: &Path, heatmaps: bool, format: HeatmapFormat) -> Result<()> {
    let manifest = Dataset::read_manifest(data)?;
    let cfg = resolve_config(common, Some(&manifest))?;
    let (ds, manifest) = load_data(data, &cfg)?;
    let stage1 = load_stage1(s1, &manifest)?;
    let stage2 = load_stage2(s2, &manifest, &stage1)?;
    let vck = Checkpoint::load(vel)?;
    check_dataset(&vck, &manifest, "velocity")?;
    let (velocity, _) = VelocityNet::from_checkpoint(&vck)?;
    if stage2.grid != cfg.world.grid_cells || stage2.classes != cfg.actions.len() {
        return Err(Error::Compat("stage-2 checkpoint grid or class count differs from the dataset config".into()));
    }
    let bank = PatchBank::build(&ds, &cfg.world);
    let models = Models { stage1: &stage1, stage2: &stage2, velocity: &velocity };
    let base = out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let mut results = Vec::new();
    let mut files = 0;
    for &split in &cfg.eval.splits {
        if split == Split::Train {
            return Err(Error::Config("evaluation splits must be test splits".into()));
        }
        let outputs = pipeline::run_split(&cfg, &ds, &bank, &models, split)?;
        for (i, id) in outputs.sequence_ids.iter().enumerate() {
            let stem = base.join("predictions").join(split.name()).join(format!("seq_{id:04}"));
            write(&sibling(&stem, ".stage2.csv"), predictions_csv(&stage2_rows(&outputs.inference[i])))?;
            let dr: Vec<PredictionRow> = outputs.reckoned[i]
                .iter()
                .enumerate()
                .map(|(t, p)| PredictionRow { t, position: *p, segment: None, action: None, confidence: None })
                .collect();
            write(&sibling(&stem, ".dead-reckoning.csv"), predictions_csv(&dr))?;
            if heatmaps {
                let dir = base.join("heatmaps").join(split.name()).join(format!("seq_{id:04}"));
                files += export_sequence(&dir, &outputs.inference[i], format)?;
            }
        }
        results.extend(pipeline::split_reports(&cfg, &outputs, split)?);
    }
    let report = pipeline::build_report(&cfg, &manifest.config_hash, results)?;
    report.write(out)?;
    let drift = sibling(out, ".drift.csv");
    write(&drift, report.drift_csv())?;
    for r in &report.results {
        let rates: Vec<String> = r.success.iter().map(|s| format!("{:.3}@{}m", s.rate, s.threshold_m)).collect();
        println!("{:<17} {:<12} {}", r.method, r.split.name(), rates.join(" "));
    }
    if heatmaps {
        println!("exported {files} heatmap files");
    }
    println!("wrote {} and {}", out.display(), drift.display());
    Ok(())
}

fn cmd_export(common: &Common, data: &Path, s1: &Path, s2: &Path, sequence: usize, out: &Path, format: HeatmapFormat) -> Result<()> {
    let manifest = Dataset::read_manifest(data)?;
    let cfg = resolve_config(common, Some(&manifest))?;
    let (ds, manifest) = load_data(data, &cfg)?;
    let stage1 = load_stage1(s1, &manifest)?;
    let stage2 = load_stage2(s2, &manifest, &stage1)?;
    let q = ds.sequences.get(sequence).ok_or_else(|| Error::Config(format!("no sequence {sequence} in the dataset")))?;
    let grid = cfg.world.grid();
    let bank = PatchBank::build(&ds, &cfg.world);
    let pf = stage1.point.encode(&bank.scene(q.scene).iter().collect::<Vec<_>>())?;
    let windows = q.windows()?;
    let imu = stage1.imu.encode(&windows.iter().collect::<Vec<_>>())?;
    let inf = egoloc_core::stage2::infer(&stage2, imu.data(), &pf, &grid.centers())?;
    let n = export_sequence(out, &inf, format)?;
    write(&out.join("predictions.csv"), predictions_csv(&stage2_rows(&inf)))?;
    println!("exported {n} heatmap files and predictions for sequence {sequence} to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, out, force } => cmd_gen(&common, &out, force),
        Command::Train { common, stage, data, out, stage1, steps } => cmd_train(&common, stage, &data, &out, stage1.as_deref(), steps),
        Command::Eval { common, data, stage1, stage2, velocity, out, heatmaps, heatmap_format } => {
            cmd_eval(&common, &data, &stage1, &stage2, &velocity, &out, heatmaps, heatmap_format.into())
        }
        Command::ExportHeatmaps { common, data, stage1, stage2, sequence, out, format } => cmd_export(&common, &data, &stage1, &stage2, sequence, &out, format.into()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
