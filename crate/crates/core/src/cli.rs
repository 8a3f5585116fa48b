//! The `crunet` command-line tool.

use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::{output_path, RunConfig, Stage};
use crate::data::{generate_phantom_case, load_case, load_dataset, save_case, Contrast, KSpaceCase, ScanMeta};
use crate::error::{Error, Result};
use crate::inference::{evaluate_cases, reconstruct_case, save_recon, Reconstructor, TargetOrder};
use crate::nn::checkpoint::read_checkpoint_meta;
use crate::nn::{load_checkpoint, Model};
use crate::objectives::MetricReport;
use crate::sampling::{Accel, Trajectory};
use crate::training::{describe_reports, mix_seed, run_plan, RunLayout};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "crunet", version, about = "Prompt-conditioned recurrent cardiac MRI reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic multi-coil cases stratified over contrast, trajectory and acceleration.
    Simulate(SimulateArgs),
    /// Train a model (stage 1: flat, 2: curriculum, 3: long-epoch fine-tune).
    Train(TrainArgs),
    /// Reconstruct a dataset and write the grouped metric report.
    Eval(EvalArgs),
    /// Reconstruct one case with sliding-window inference.
    Recon(ReconArgs),
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 9)]
    pub cases: usize,
    /// Matrix size as HxW.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub coils: usize,
    #[arg(long, value_delimiter = ',', default_value = "cine")]
    pub contrasts: Vec<Contrast>,
    #[arg(long, value_delimiter = ',', default_value = "uniform,gaussian,pseudo_radial")]
    pub trajectories: Vec<Trajectory>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,24")]
    pub accels: Vec<Accel>,
    /// Standard deviation of the complex k-space noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Continue after the given (1-based) step, starting from its checkpoint.
    #[arg(long)]
    pub resume: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    /// Root-sum-of-squares of the zero-filled measurements.
    Zf,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Model checkpoint (not needed with --baseline).
    #[arg(long, required_unless_present = "baseline")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Central fraction of H and W kept for the metrics.
    #[arg(long, default_value_t = 0.5)]
    pub crop: f64,
    #[arg(long, value_enum, conflicts_with = "ckpt")]
    pub baseline: Option<Baseline>,
}

#[derive(Debug, clap::Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub case: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Runs a parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Recon(a) => cmd_recon(&a, out),
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn require(flag: &str, path: &Path, dir: bool) -> Result<()> {
    let ok = if dir { path.is_dir() } else { path.is_file() };
    if ok {
        Ok(())
    } else {
        let kind = if dir { "directory" } else { "file" };
        Err(Error::validation(format!("{flag}: {kind} {} does not exist", path.display())))
    }
}

fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::validation(format!("--size: expected HxW, got '{s}'"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Scanner sites cycled through by the simulator.
const SITES: [(&str, &str, &str, &str); 3] = [
    ("Siemens", "Vida", "3.0T", "C001"),
    ("GE", "SIGNA Premier", "3.0T", "C002"),
    ("Philips", "Ingenia", "1.5T", "C003"),
];

#[derive(Debug, Serialize)]
pub struct ManifestEntry {
    pub case_id: String,
    pub dir: String,
    pub contrast: Contrast,
    pub trajectory: Trajectory,
    pub accel: Accel,
    pub center_id: String,
    pub frames: usize,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub cases: Vec<ManifestEntry>,
}

/// The simulated cases, in manifest order. Case `i` takes grid cell
/// `i mod (contrasts × trajectories × accels)`.
pub fn simulate_cases(a: &SimulateArgs) -> Result<Vec<KSpaceCase>> {
    let (h, w) = parse_size(&a.size)?;
    if a.cases == 0 {
        return Err(Error::validation("--cases: must be at least 1"));
    }
    if a.contrasts.is_empty() || a.trajectories.is_empty() || a.accels.is_empty() {
        return Err(Error::validation("--contrasts, --trajectories and --accels must be non-empty"));
    }
    let mut grid = Vec::new();
    for &c in &a.contrasts {
        for &t in &a.trajectories {
            for &r in &a.accels {
                grid.push((c, t, r));
            }
        }
    }
    (0..a.cases)
        .map(|i| {
            let (contrast, trajectory, accel) = grid[i % grid.len()];
            let (vendor, model, field, center) = SITES[i % SITES.len()];
            let meta = ScanMeta {
                vendor: vendor.into(),
                scanner_model: model.into(),
                field_strength: field.into(),
                contrast,
                trajectory,
                accel,
                center_id: center.into(),
            };
            let id = format!("case_{i:04}");
            generate_phantom_case(&id, &meta, a.frames, a.coils, h, w, mix_seed(a.seed, i as u64, 0), a.noise_std)
        })
        .collect()
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let cases = simulate_cases(a)?;
    let root = output_path(&a.out);
    let mut entries = Vec::with_capacity(cases.len());
    for case in &cases {
        let dir = root.join(&case.id);
        save_case(case, &dir)?;
        entries.push(ManifestEntry {
            case_id: case.id.clone(),
            dir: case.id.clone(),
            contrast: case.meta.contrast,
            trajectory: case.meta.trajectory,
            accel: case.meta.accel,
            center_id: case.meta.center_id.clone(),
            frames: case.dims().0,
        });
    }
    let manifest = Manifest {
        count: entries.len(),
        seed: a.seed,
        cases: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = root.join("manifest.json");
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    say(out, &text)
}

fn stage_checkpoint(layout: &RunLayout, plan: &crate::training::StagePlan, step: usize) -> Result<PathBuf> {
    let spec = plan.steps.get(step - 1).ok_or_else(|| {
        Error::validation(format!("--resume: step {step} is out of range, the plan has {} steps", plan.steps.len()))
    })?;
    let path = layout.checkpoint_path(&spec.final_checkpoint_label());
    if !path.is_file() {
        return Err(Error::validation(format!(
            "--resume: checkpoint {} of step {step} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    require("--config", &a.config, false)?;
    let cfg = RunConfig::load(&a.config)?;
    cfg.validate()?;
    let stage = Stage::try_from(a.stage)?;
    let layout = RunLayout::new(&cfg.paths.output_dir);

    // The plan of stage 3 depends on the starting cascade count, which is
    // known from checkpoint metadata without loading the weights.
    let start_cascades = match &cfg.paths.checkpoint {
        Some(c) => read_checkpoint_meta(c)?.config.num_cascades,
        None if stage == Stage::Three && a.resume.is_none() => {
            return Err(Error::validation("paths.checkpoint: stage 3 fine-tunes an existing model and needs one"));
        }
        None => cfg.model.num_cascades,
    };
    let plan = cfg.plan(stage, start_cascades);
    let (start_step, init) = match a.resume {
        Some(0) => return Err(Error::validation("--resume: steps are numbered from 1")),
        Some(k) => (k, Some(stage_checkpoint(&layout, &plan, k)?)),
        None => (0, cfg.paths.checkpoint.clone()),
    };
    let cases = load_dataset(&cfg.paths.data_dir)?;
    let mut model = match &init {
        Some(path) => load_checkpoint(path, DType::F32)?.0,
        None => Model::new(cfg.model.clone(), DType::F32)?,
    };
    if start_step < plan.steps.len() {
        crate::training::StagePlan {
            steps: plan.steps[start_step..].to_vec(),
        }
        .validate(model.num_cascades())?;
    }

    let reports = run_plan(&mut model, &cases, &plan, start_step, &cfg.train_options(), &layout)?;
    say(out, &describe_reports(&reports))
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    if !(a.crop > 0.0 && a.crop <= 1.0) {
        return Err(Error::validation(format!("--crop: must lie in (0, 1], got {}", a.crop)));
    }
    require("--data", &a.data, true)?;
    if let Some(c) = &a.ckpt {
        require("--ckpt", c, false)?;
    }
    let cases = load_dataset(&a.data)?;
    let report: MetricReport = match (&a.ckpt, a.baseline) {
        (_, Some(Baseline::Zf)) => evaluate_cases(&Reconstructor::ZeroFilled, &cases, a.crop)?,
        (Some(ckpt), None) => {
            let (model, _) = load_checkpoint(ckpt, DType::F32)?;
            evaluate_cases(&Reconstructor::Model(&model), &cases, a.crop)?
        }
        (None, None) => return Err(Error::validation("--ckpt or --baseline is required")),
    };
    let path = output_path(&a.report);
    write_file(&path, report.to_json()?.as_bytes())?;
    let o = &report.overall;
    say(
        out,
        &format!(
            "Overall Mean ({} cases): PSNR {:.3} dB, SSIM {:.4}, NMSE {:.5}\n",
            o.count, o.psnr, o.ssim, o.nmse
        ),
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn cmd_recon(a: &ReconArgs, out: &mut dyn Write) -> Result<()> {
    require("--case", &a.case, true)?;
    require("--ckpt", &a.ckpt, false)?;
    let case = load_case(&a.case)?;
    let (model, _) = load_checkpoint(&a.ckpt, DType::F32)?;
    let image = reconstruct_case(&model, &case, TargetOrder::Forward)?;
    let dir = output_path(&a.out);
    save_recon(&case.id, &image, &dir)?;
    let (t, h, w) = image.dim();
    say(out, &format!("{}: wrote {t}x{h}x{w} float32 to {}\n", case.id, dir.display()))
}
