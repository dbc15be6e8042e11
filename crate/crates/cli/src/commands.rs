//! Argument parsing and the five verbs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use gentron::guidance::{sample, GuidanceConfig};
use gentron::model::{GenTron, Variant};
use gentron::numerics::{Rng, Tensor};
use gentron::trainer::{finetune_t2v, load_checkpoint, save_checkpoint, train_t2i, Branch, TrainOutcome};

use crate::check::{self, inflation_gap, Suite};
use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::error::CliError;
use crate::ppm::Image;

/// Largest per-frame deviation accepted by the pre-fine-tuning check.
pub const INFLATION_TOL: f64 = 1e-6;

#[derive(Debug, Parser)]
#[command(name = "gentron", version, about = "Desk-scale text-to-image and text-to-video diffusion transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a text-to-image model.
    TrainT2i(TrainArgs),
    /// Inflate a text-to-image checkpoint and fine-tune it on images and clips.
    FinetuneT2v(FinetuneArgs),
    /// Sample an image, or a clip with --motion.
    Sample(SampleArgs),
    /// Run self-check suites.
    Check(CheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Gaussians,
    Shapes,
    ShapesVideo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Adaln,
    Cross,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Adaln => Variant::AdalnZero,
            VariantArg::Cross => Variant::CrossAttention,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Gradients,
    Schedule,
    Guidance,
    GaussianOracle,
    VideoIdentity,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Schedule => Suite::Schedule,
            SuiteArg::Guidance => Suite::Guidance,
            SuiteArg::GaussianOracle => Suite::GaussianOracle,
            SuiteArg::VideoIdentity => Suite::VideoIdentity,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum)]
    pub kind: Kind,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clip length for shapes-video.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Cluster count for gaussians.
    #[arg(long, default_value_t = 4)]
    pub clusters: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub p_text_drop: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Text-to-image checkpoint to inflate.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image dataset for the motion-free branch.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub videos: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub p_motion_free: Option<f64>,
    #[arg(long)]
    pub p_text_drop: Option<f64>,
    /// Clip length; defaults to the video dataset's.
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Text guidance scale, 7.5 unless the config says otherwise.
    #[arg(long)]
    pub lambda_t: Option<f64>,
    /// Motion guidance scale, 1.2 unless the config says otherwise.
    #[arg(long)]
    pub lambda_m: Option<f64>,
    /// Sample a clip with motion-free guidance; needs a video checkpoint.
    #[arg(long)]
    pub motion: bool,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: SuiteArg,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainT2i(a) => train(&a),
        Command::FinetuneT2v(a) => finetune(&a),
        Command::Sample(a) => sample_cmd(&a),
        Command::Check(a) => check_cmd(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let seed = RunConfig::default().resolve_seed(a.seed)?;
    let ds = match a.kind {
        Kind::Gaussians => data::gaussians(a.n, a.clusters, seed)?,
        Kind::Shapes => data::shapes(a.n, seed),
        Kind::ShapesVideo => {
            if a.frames < 2 {
                return Err(CliError::Usage("--frames must be at least 2 for clips".into()));
            }
            data::shapes_video(a.n, a.frames, seed)
        }
    };
    ds.write(&a.out)?;
    println!("wrote {} items ({} classes) to {}", ds.len(), ds.manifest.classes.len(), a.out.display());
    Ok(())
}

fn write_losses(path: &Path, outcome: &TrainOutcome) -> Result<(), CliError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    if outcome.branches.is_empty() {
        writeln!(f, "step,loss")?;
        for (i, l) in outcome.losses.iter().enumerate() {
            writeln!(f, "{i},{l}")?;
        }
    } else {
        writeln!(f, "step,loss,branch")?;
        for (i, (l, b)) in outcome.losses.iter().zip(&outcome.branches).enumerate() {
            let b = match b {
                Branch::MotionFree => "motion-free",
                Branch::Video => "video",
            };
            writeln!(f, "{i},{l},{b}")?;
        }
    }
    f.flush()?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json serializes"))?;
    Ok(())
}

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    path.cloned().ok_or_else(|| CliError::Usage(format!("no {what} given (flag or config)")))
}

fn check_latent_shape(cfg: &RunConfig, ds: &Dataset) -> Result<(), CliError> {
    if cfg.model.latent_shape[..] != ds.manifest.latent_shape[..] {
        return Err(CliError::Schema(format!(
            "dataset latents are {:?}, model expects {:?}",
            ds.manifest.latent_shape, cfg.model.latent_shape
        )));
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.seed = Some(cfg.resolve_seed(a.seed)?);
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = a.p_text_drop {
        cfg.train.p_text_drop = v;
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v.into();
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset.clone();
    }
    cfg.validate()?;
    let ds = Dataset::read(&require(cfg.dataset.as_ref(), "dataset")?)?;
    check_latent_shape(&cfg, &ds)?;
    let pairs = ds.image_pairs()?;
    let seed = cfg.seed.unwrap_or_default();
    let schedule = cfg.schedule.build()?;
    let mut model = GenTron::new(cfg.model.clone(), &mut Rng::new(seed))?;
    let mut tc = cfg.train.clone();
    tc.seed = seed.wrapping_add(1);
    let outcome = train_t2i(&mut model, &pairs, &schedule, &tc)?;

    fs::create_dir_all(&a.out)?;
    save_checkpoint(&model, Some(&outcome.optimizer), a.out.join("model.ckpt"))?;
    write_losses(&a.out.join("loss.csv"), &outcome)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    write_json(
        &a.out.join("run_manifest.json"),
        &json!({
            "command": "train-t2i",
            "config": cfg,
            "parameters": model.num_parameters(),
            "initial_loss": outcome.losses.first(),
            "final_loss": last,
        }),
    )?;
    println!(
        "trained {} parameters for {} steps: loss {:.4} -> {:.4}",
        model.num_parameters(),
        outcome.losses.len(),
        outcome.losses.first().copied().unwrap_or(f64::NAN),
        last
    );
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.seed = Some(cfg.resolve_seed(a.seed)?);
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = a.p_motion_free {
        cfg.train.p_motion_free = v;
    }
    if let Some(v) = a.p_text_drop {
        cfg.train.p_text_drop = v;
    }
    if a.images.is_some() {
        cfg.dataset = a.images.clone();
    }
    if a.videos.is_some() {
        cfg.video_dataset = a.videos.clone();
    }
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.inflated {
        return Err(CliError::Schema(format!("{} is a video checkpoint, expected text-to-image", a.checkpoint.display())));
    }
    cfg.model = ck.config.clone();
    let videos = Dataset::read(&require(cfg.video_dataset.as_ref(), "video dataset")?)?;
    check_latent_shape(&cfg, &videos)?;
    let clips = videos.video_pairs()?;
    cfg.train.t_frames = a.frames.unwrap_or(videos.manifest.frames);
    cfg.validate()?;
    let images = match &cfg.dataset {
        Some(p) => {
            let ds = Dataset::read(p)?;
            check_latent_shape(&cfg, &ds)?;
            ds.image_pairs()?
        }
        None if cfg.train.p_motion_free > 0.0 => {
            return Err(CliError::Usage("motion-free steps need an image dataset (--images)".into()));
        }
        None => Vec::new(),
    };
    let seed = cfg.seed.unwrap_or_default();
    let t2i = ck.into_t2i()?;
    let mut model = t2i.clone().inflate(&mut Rng::new(seed))?;
    let gap = inflation_gap(&t2i, &model, seed, cfg.train.t_frames)?;
    let ok = gap < INFLATION_TOL;
    println!("inflation identity: max abs diff {gap:.2e} ({})", if ok { "ok" } else { "FAILED" });
    if !ok {
        return Err(CliError::CheckFailed(format!("inflated model deviates from the image model by {gap:.2e}")));
    }

    let schedule = cfg.schedule.build()?;
    let mut tc = cfg.train.clone();
    tc.seed = seed.wrapping_add(1);
    let outcome = finetune_t2v(&mut model, &images, &clips, &schedule, &tc)?;
    let still = outcome.branches.iter().filter(|b| **b == Branch::MotionFree).count();

    fs::create_dir_all(&a.out)?;
    save_checkpoint(&model, Some(&outcome.optimizer), a.out.join("model.ckpt"))?;
    write_losses(&a.out.join("loss.csv"), &outcome)?;
    write_json(
        &a.out.join("run_manifest.json"),
        &json!({
            "command": "finetune-t2v",
            "config": cfg,
            "source_checkpoint": a.checkpoint,
            "p_motion_free": cfg.train.p_motion_free,
            "inflation_gap": gap,
            "motion_free_steps": still,
            "video_steps": outcome.branches.len() - still,
            "final_loss": outcome.losses.last(),
        }),
    )?;
    println!(
        "fine-tuned {} steps ({still} motion-free): final loss {:.4}",
        outcome.losses.len(),
        outcome.losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_latents(path: &Path, x: &Tensor) -> Result<(), CliError> {
    let mut bytes = Vec::with_capacity(x.numel() * 4);
    x.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    fs::write(path, bytes)?;
    Ok(())
}

/// Rounds away representation noise such as `1 - 1.2 = -0.19999999999999996`.
fn tidy(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

fn sample_cmd(a: &SampleArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    let seed = cfg.resolve_seed(a.seed)?;
    let model = load_checkpoint(&a.checkpoint)?.into_model()?;
    if model.is_inflated() != a.motion {
        let msg = if a.motion {
            "--motion needs a video checkpoint; this one is text-to-image"
        } else {
            "this is a video checkpoint; pass --motion"
        };
        return Err(gentron::Error::ModeMismatch(msg.into()).into());
    }
    let schedule = cfg.schedule.build()?;
    let g = GuidanceConfig {
        lambda_t: a.lambda_t.unwrap_or(cfg.guidance.lambda_t),
        lambda_m: a.lambda_m.unwrap_or(cfg.guidance.lambda_m),
        motion_enabled: a.motion,
        steps: schedule.len(),
        frames: a.frames.unwrap_or(cfg.guidance.frames),
    };
    g.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if a.motion {
        println!(
            "guidance: lambda_t={} lambda_m={} -> {}·ε(c_T,c_M) + {}·ε(∅,c_M) + {}·ε(∅,∅)",
            g.lambda_t,
            g.lambda_m,
            g.lambda_t,
            tidy(g.lambda_m - g.lambda_t),
            tidy(1.0 - g.lambda_m)
        );
    } else {
        println!("guidance: lambda_t={} -> {}·ε(c_T) + {}·ε(∅)", g.lambda_t, g.lambda_t, tidy(1.0 - g.lambda_t));
    }
    let cond = model.encode(&a.prompt);
    let x = sample(&model, &schedule, &cond, &g, &mut Rng::new(seed))?;

    fs::create_dir_all(&a.out)?;
    let count = if a.motion { g.frames } else { 1 };
    let shape = model.config().latent_shape;
    let mut files = Vec::with_capacity(count);
    for t in 0..count {
        let frame = if a.motion { x.slice_leading(t, 1)?.reshape(&shape)? } else { x.clone() };
        let name = format!("frame_{t:03}.ppm");
        Image::from_latent(&frame)?.write(&a.out.join(&name))?;
        files.push(json!({ "t": t, "file": name }));
    }
    write_latents(&a.out.join("latents.bin"), &x)?;
    write_json(
        &a.out.join("manifest.json"),
        &json!({
            "prompt": a.prompt,
            "mode": if a.motion { "video" } else { "image" },
            "seed": seed,
            "steps": g.steps,
            "lambda_t": g.lambda_t,
            "lambda_m": if a.motion { Some(g.lambda_m) } else { None },
            "latent_shape": x.shape(),
            "frames": files,
        }),
    )?;
    println!("wrote {count} frame(s) to {}", a.out.display());
    Ok(())
}

fn check_cmd(a: &CheckArgs) -> Result<(), CliError> {
    let lines = check::run(a.suite.into());
    let failed = lines.iter().filter(|l| !l.passed).count();
    for l in &lines {
        println!("{l}");
    }
    println!("{} checks, {failed} failed", lines.len());
    if failed > 0 {
        return Err(CliError::CheckFailed(format!("{failed} of {} checks failed", lines.len())));
    }
    Ok(())
}
