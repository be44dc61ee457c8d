use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maskguide::controlnet::MaskPlacement;
use maskguide::diffusion::{Geometry, ModelCheckpoint, ModelConfig, SamplerMode};
use maskguide::finetune::{self, Branch, EvalConfig, MaskSamplerKind, TrainConfig};
use maskguide::{Error, Result};
use maskguide_cli::config::{ControlMode, GuidanceMask, Method, RefineConfig, RunConfig, CHECKPOINT_ENV};
use maskguide_cli::{exit_code, pipeline, selfcheck, EXIT_REPLAY_MISMATCH};
use maskguide_nn::ParamStore;

#[derive(Parser)]
#[command(name = "maskguide", version, about = "Mask-guided latent diffusion inpainting at toy scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Inpaint the background around a masked product.
    Generate(GenerateArgs),
    /// Close, open, then dilate a mask.
    RefineMask(RefineArgs),
    /// Write the four-level latent mask pyramid of a mask.
    MakePyramid(PyramidArgs),
    /// Train one network of a checkpoint.
    Train(TrainArgs),
    /// Compare over-completion of an instance-trained and a random-trained checkpoint.
    EvalOvercompletion(EvalArgs),
    /// Run the invariant suites against fixture checkpoints.
    Selfcheck(SelfcheckArgs),
    /// Re-run a recorded generation and compare output hashes.
    Replay(ReplayArgs),
    /// Write untrained test-geometry fixture checkpoints.
    MakeFixtures(FixtureArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dualbranch,
    Blended,
    Soft,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ddim,
    Ddpm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ControlModeArg {
    None,
    Edge,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum GuidanceArg {
    Product,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlacementArg {
    Stream,
    OutputOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum GeometryArg {
    Paper,
    Test,
}

impl From<GeometryArg> for Geometry {
    fn from(g: GeometryArg) -> Self {
        match g {
            GeometryArg::Paper => Geometry::Paper,
            GeometryArg::Test => Geometry::Test,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON run config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Product mask PNG, white on the subject to keep.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Checkpoint directory (default: $MASKGUIDE_CHECKPOINT_DIR).
    #[arg(long, visible_alias = "checkpoint")]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    geometry: Option<GeometryArg>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    sampler: Option<SamplerArg>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Denoising strength for the blended methods.
    #[arg(long)]
    denoise: Option<f64>,
    #[arg(long, value_enum)]
    control_mode: Option<ControlModeArg>,
    #[arg(long)]
    control_image: Option<PathBuf>,
    #[arg(long)]
    edge_threshold: Option<f32>,
    #[arg(long, value_enum)]
    guidance_mask: Option<GuidanceArg>,
    #[arg(long, value_enum)]
    mask_placement: Option<PlacementArg>,
    #[arg(long)]
    conditioning_scale: Option<f32>,
    #[arg(long)]
    branch_scale: Option<f32>,
    #[arg(long)]
    no_paste_back: bool,
    #[arg(long)]
    feather: Option<usize>,
    #[arg(long)]
    close: Option<usize>,
    #[arg(long)]
    open: Option<usize>,
    #[arg(long)]
    dilate: Option<usize>,
    /// Reserved; upscaling is not implemented.
    #[arg(long)]
    upscale: Option<String>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    close: usize,
    #[arg(long, default_value_t = 3)]
    open: usize,
    #[arg(long, default_value_t = 5)]
    dilate: usize,
}

#[derive(Args)]
struct PyramidArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Side of the finest level (default: mask side / 8).
    #[arg(long)]
    latent_size: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BranchArg {
    Autoencoder,
    Base,
    Control,
    Inpaint,
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerKindArg {
    Instance,
    Random,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    branch: BranchArg,
    #[arg(long, value_enum, default_value = "random")]
    mask_sampler: SamplerKindArg,
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    corpus_seed: u64,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Starting checkpoint (default: $MASKGUIDE_CHECKPOINT_DIR; the
    /// autoencoder may start from nothing).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Geometry of a checkpoint created from scratch.
    #[arg(long, value_enum, default_value = "test")]
    geometry: GeometryArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Instance-trained checkpoint.
    #[arg(long)]
    ckpt_a: PathBuf,
    /// Random-trained checkpoint.
    #[arg(long)]
    ckpt_b: PathBuf,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    corpus_seed: u64,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Fixture checkpoint (default: $MASKGUIDE_CHECKPOINT_DIR).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    record: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_config(a: GenerateArgs) -> Result<RunConfig> {
    if a.upscale.is_some() {
        return Err(Error::Invalid("--upscale is reserved and not implemented".into()));
    }
    let mut c = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $v:expr) => {
            if let Some(v) = $v {
                $field = v;
            }
        };
    }
    c.image = a.image.or(c.image);
    c.mask = a.mask.or(c.mask);
    c.output = a.out.or(c.output);
    c.checkpoint = a.ckpt.or(c.checkpoint);
    c.control.image = a.control_image.or(c.control.image);
    c.geometry = a.geometry.map(Geometry::from).or(c.geometry);
    set!(c.prompt, a.prompt);
    set!(c.steps, a.steps);
    set!(c.seed, a.seed);
    set!(c.denoise, a.denoise);
    set!(c.branch_scale, a.branch_scale);
    set!(c.feather_px, a.feather);
    set!(c.refine.close, a.close);
    set!(c.refine.open, a.open);
    set!(c.refine.dilate, a.dilate);
    set!(c.control.edge_threshold, a.edge_threshold);
    set!(c.control.conditioning_scale, a.conditioning_scale);
    set!(
        c.method,
        a.method.map(|m| match m {
            MethodArg::Dualbranch => Method::DualBranch,
            MethodArg::Blended => Method::Blended,
            MethodArg::Soft => Method::Soft,
        })
    );
    set!(
        c.sampler,
        a.sampler.map(|s| match s {
            SamplerArg::Ddim => SamplerMode::Ddim,
            SamplerArg::Ddpm => SamplerMode::Ddpm,
        })
    );
    set!(
        c.control.mode,
        a.control_mode.map(|m| match m {
            ControlModeArg::None => ControlMode::None,
            ControlModeArg::Edge => ControlMode::Edge,
            ControlModeArg::File => ControlMode::File,
        })
    );
    set!(
        c.control.guidance_mask,
        a.guidance_mask.map(|g| match g {
            GuidanceArg::Product => GuidanceMask::Product,
            GuidanceArg::None => GuidanceMask::None,
        })
    );
    set!(
        c.control.placement,
        a.mask_placement.map(|p| match p {
            PlacementArg::Stream => MaskPlacement::Stream,
            PlacementArg::OutputOnly => MaskPlacement::OutputOnly,
        })
    );
    if a.no_paste_back {
        c.paste_back = false;
    }
    Ok(c)
}

fn checkpoint_or_env(p: Option<PathBuf>) -> Result<PathBuf> {
    p.or_else(|| std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from))
        .ok_or_else(|| Error::Invalid(format!("no checkpoint given and {CHECKPOINT_ENV} is not set")))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn train(a: TrainArgs) -> Result<()> {
    let branch = match a.branch {
        BranchArg::Autoencoder => Branch::Autoencoder,
        BranchArg::Base => Branch::Base,
        BranchArg::Control => Branch::Control,
        BranchArg::Inpaint => Branch::Inpaint,
    };
    let start = match (a.ckpt, branch) {
        (Some(p), _) => Some(p),
        (None, Branch::Autoencoder) => std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from),
        (None, _) => Some(checkpoint_or_env(None)?),
    };
    let mut ckpt = match start {
        Some(p) => ModelCheckpoint::load(&p)?,
        None => ModelCheckpoint::new(ModelConfig::compact(a.geometry.into()), ParamStore::new()),
    };
    let mut cfg = TrainConfig::defaults(branch);
    cfg.steps = a.steps;
    cfg.seed = a.seed;
    cfg.corpus_seed = a.corpus_seed;
    cfg.mask_sampler = match a.mask_sampler {
        SamplerKindArg::Instance => MaskSamplerKind::Instance,
        SamplerKindArg::Random => MaskSamplerKind::Random,
    };
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    let every = (cfg.steps / 20).max(1);
    let log = finetune::train::train_with_progress(&mut ckpt, &cfg, |s, l| {
        if s % every == 0 || s + 1 == cfg.steps {
            eprintln!("step {s:>6}  loss {l:.5}");
        }
    })?;
    ckpt.save(&a.out)?;
    write_json(&a.out.join("train_log.json"), &log)
}

fn eval(a: EvalArgs) -> Result<()> {
    let instance = ModelCheckpoint::load(&a.ckpt_a)?;
    let random = ModelCheckpoint::load(&a.ckpt_b)?;
    if instance.config.geometry != random.config.geometry {
        return Err(Error::Geometry(format!(
            "checkpoints have {} and {} geometry",
            instance.config.geometry, random.config.geometry
        )));
    }
    let cfg = EvalConfig { scenes: a.scenes, steps: a.steps, seed: a.seed, corpus_seed: a.corpus_seed, ..Default::default() };
    let cmp = finetune::eval_compare(&random, &instance, &cfg)?;
    println!(
        "instance {:.4}  random {:.4}  diff {:+.4}  wins/losses/ties {}/{}/{}  p = {:.4}",
        cmp.instance.mean, cmp.random.mean, cmp.mean_diff, cmp.wins, cmp.losses, cmp.ties, cmp.p_value
    );
    write_json(&a.report, &cmp)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Generate(a) => {
            let record = pipeline::generate(&run_config(a)?)?;
            println!("{}  sha256 {}", record.output.display(), record.output_sha256);
        }
        Command::RefineMask(a) => {
            let refined =
                pipeline::refine_file(&a.mask, &a.out, &RefineConfig { close: a.close, open: a.open, dilate: a.dilate })?;
            println!("{}  coverage {:.4}", a.out.display(), refined.coverage());
        }
        Command::MakePyramid(a) => {
            let (_, files) = pipeline::make_pyramid(&a.mask, &a.out_dir, a.latent_size)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Train(a) => train(a)?,
        Command::EvalOvercompletion(a) => eval(a)?,
        Command::Selfcheck(a) => {
            let dir = checkpoint_or_env(a.ckpt)?;
            let mut code = 0;
            for r in selfcheck::selfcheck(&dir, a.steps)? {
                println!("{} {:<14} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                if !r.passed && code == 0 {
                    code = r.code;
                }
            }
            return Ok(code);
        }
        Command::Replay(a) => {
            let record = pipeline::RunRecord::load(&a.record)?;
            let outcome = pipeline::replay(&record, a.out)?;
            println!("expected {}\nactual   {}", outcome.expected, outcome.actual);
            if !outcome.matches() {
                return Ok(EXIT_REPLAY_MISMATCH);
            }
        }
        Command::MakeFixtures(a) => {
            let ckpt = selfcheck::make_fixtures(&a.out, a.seed)?;
            println!("{}  fingerprint {}", a.out.display(), ckpt.fingerprint());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
