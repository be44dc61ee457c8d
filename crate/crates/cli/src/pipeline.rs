//! Mask refinement, pyramid construction, sampling and run records.

use std::path::{Path, PathBuf};
use std::time::Instant;

use maskguide::baselines::{blended_sample, latent_mask, BlendConfig, BlendMode};
use maskguide::brushnet::{feather, inpaint_sample, InpaintConfig, INPAINT};
use maskguide::controlnet::{make_edge_condition, ControlInput, GuidanceOptions, CONTROL};
use maskguide::diffusion::checkpoint::sha256_hex;
use maskguide::diffusion::{embed_prompt, ImageTensor, ModelCheckpoint};
use maskguide::mask_ops::{build_mask_pyramid, refine_mask, BinaryMask, MaskPyramid, RefineParams};
use maskguide::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ControlMode, GuidanceMask, Method, RefineConfig, RunConfig};
use crate::io;

pub const TOOL_VERSION: &str = concat!("maskguide ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHashes {
    pub image: String,
    pub mask: String,
    pub control_image: Option<String>,
    /// Fingerprint over the checkpoint's config and tensors.
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub config: RunConfig,
    pub inputs: InputHashes,
    pub output: PathBuf,
    /// sha256 of the written PNG.
    pub output_sha256: String,
    pub wall_time_s: f64,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::Invalid(format!("run record `{}`: {e}", path.display())))?;
        serde_json::from_slice(&raw).map_err(|e| Error::Invalid(format!("run record `{}`: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Where the record for an output image is written: `out.png` → `out.run.json`.
pub fn record_path(output: &Path) -> PathBuf {
    output.with_extension("run.json")
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

pub fn refine_params(r: &RefineConfig) -> Result<RefineParams> {
    RefineParams::squares(r.close, r.open, r.dilate)
}

pub fn refine_file(input: &Path, output: &Path, r: &RefineConfig) -> Result<BinaryMask> {
    let refined = refine_mask(&io::read_mask(input)?, &refine_params(r)?);
    io::write_mask(output, &refined)?;
    Ok(refined)
}

#[derive(Serialize)]
struct PyramidIndex<'a> {
    files: Vec<String>,
    sizes: Vec<usize>,
    index_map: &'a [usize],
}

/// Writes `level_{k}.png` for each pyramid level plus `index_map.json`, and
/// returns the level file paths. `latent_size` defaults to the mask side / 8.
pub fn make_pyramid(mask_path: &Path, out_dir: &Path, latent_size: Option<usize>) -> Result<(MaskPyramid, Vec<PathBuf>)> {
    let mask = io::read_mask(mask_path)?;
    if mask.height() != mask.width() {
        return Err(Error::Geometry(format!("mask must be square, got {}x{}", mask.height(), mask.width())));
    }
    let l = latent_size.unwrap_or(mask.height() / maskguide::diffusion::DOWNSAMPLE_FACTOR);
    let pyr = build_mask_pyramid(&mask, l)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::new();
    for (k, level) in pyr.levels().iter().enumerate() {
        let p = out_dir.join(format!("level_{k}.png"));
        io::write_soft(&p, level)?;
        paths.push(p);
    }
    let index = PyramidIndex {
        files: paths.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect(),
        sizes: pyr.levels().iter().map(|l| l.height()).collect(),
        index_map: pyr.index_map(),
    };
    let ip = out_dir.join("index_map.json");
    std::fs::write(&ip, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&ip, e))?;
    Ok((pyr, paths))
}

/// Runs the configured method and returns the image without writing it.
pub fn render(cfg: &RunConfig, ckpt: &ModelCheckpoint) -> Result<ImageTensor> {
    let geo = ckpt.config.geometry;
    if let Some(g) = cfg.geometry {
        if g != geo {
            return Err(Error::Geometry(format!("config asks for {g} geometry, checkpoint is {geo}")));
        }
    }
    let image_path = cfg.image.as_deref().expect("validated");
    let mask_path = cfg.mask.as_deref().expect("validated");
    let img = io::read_image(image_path)?;
    let s = geo.image_size();
    if (img.height(), img.width()) != (s, s) {
        return Err(Error::Geometry(format!(
            "`{}` is {}x{}, the {geo} checkpoint needs {s}x{s}",
            image_path.display(),
            img.height(),
            img.width()
        )));
    }
    let product = io::read_mask(mask_path)?;
    if (product.height(), product.width()) != (s, s) {
        return Err(Error::Geometry(format!(
            "mask `{}` is {}x{}, image is {s}x{s}",
            mask_path.display(),
            product.height(),
            product.width()
        )));
    }
    let refined = refine_mask(&product, &refine_params(&cfg.refine)?);
    let hole = refined.not();
    let prompt = embed_prompt(&cfg.prompt);
    let l = geo.latent_size();

    match cfg.method {
        Method::DualBranch => {
            if !ckpt.has_branch(INPAINT) {
                return Err(Error::Checkpoint("the dualbranch method needs a checkpoint with an inpaint branch".into()));
            }
            let cond = match cfg.control.mode {
                ControlMode::None => None,
                ControlMode::Edge => Some(make_edge_condition(&img, cfg.control.edge_threshold)),
                ControlMode::File => {
                    let p = cfg.control.image.as_deref().expect("validated");
                    let c = io::read_condition(p)?;
                    if (c.height(), c.width()) != (s, s) {
                        return Err(Error::Geometry(format!(
                            "control image `{}` is {}x{}, image is {s}x{s}",
                            p.display(),
                            c.height(),
                            c.width()
                        )));
                    }
                    Some(c)
                }
            };
            if cond.is_some() && !ckpt.has_branch(CONTROL) {
                return Err(Error::Checkpoint("control conditioning needs a checkpoint with a control branch".into()));
            }
            let cond_t = cond.map(|c| c.to_tensor());
            let pyramid = match cfg.control.guidance_mask {
                GuidanceMask::Product if cond_t.is_some() => Some(build_mask_pyramid(&refined, l)?),
                _ => None,
            };
            let options = GuidanceOptions {
                placement: cfg.control.placement,
                conditioning_scale: cfg.control.conditioning_scale,
                rebinarize: None,
            };
            let control = cond_t.as_ref().map(|c| ControlInput { cond: c, pyramid: pyramid.as_ref(), options: &options });
            let icfg = InpaintConfig {
                steps: cfg.steps,
                sampler: cfg.sampler,
                seed: cfg.seed,
                paste_back: cfg.paste_back,
                feather_px: cfg.feather_px,
                branch_scale: cfg.branch_scale,
                ..Default::default()
            };
            Ok(inpaint_sample(ckpt, &img, &hole, &prompt, control, &icfg)?.image)
        }
        Method::Blended | Method::Soft => {
            let (mask, mode) = match cfg.method {
                Method::Blended => (latent_mask(&hole.to_soft(), l, BlendMode::Hard)?, BlendMode::Hard),
                _ => (latent_mask(&feather(&hole, cfg.feather_px), l, BlendMode::Soft)?, BlendMode::Soft),
            };
            let bcfg = BlendConfig {
                mask,
                denoise_strength: cfg.denoise,
                mode,
                steps: cfg.steps,
                sampler: cfg.sampler,
                seed: cfg.seed,
            };
            Ok(blended_sample(ckpt, &img, &prompt, &bcfg)?.image)
        }
    }
}

fn input_hashes(cfg: &RunConfig, ckpt: &ModelCheckpoint) -> Result<InputHashes> {
    Ok(InputHashes {
        image: file_sha256(cfg.image.as_deref().expect("validated"))?,
        mask: file_sha256(cfg.mask.as_deref().expect("validated"))?,
        control_image: cfg.control.image.as_deref().map(file_sha256).transpose()?,
        checkpoint: ckpt.fingerprint(),
    })
}

/// Validates, loads the checkpoint, renders, and writes the PNG together with
/// its run record.
pub fn generate(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let ckpt = ModelCheckpoint::load(&cfg.checkpoint_dir()?)?;
    let inputs = input_hashes(cfg, &ckpt)?;
    let img = render(cfg, &ckpt)?;
    let output = cfg.output.clone().expect("validated");
    io::write_image(&output, &img)?;
    let record = RunRecord {
        tool: TOOL_VERSION.to_string(),
        config: absolute(cfg)?,
        inputs,
        output_sha256: file_sha256(&output)?,
        output: canonical(&output)?,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    record.save(&record_path(&output))?;
    Ok(record)
}

fn canonical(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| Error::io(p, e))
}

/// The config with every path made absolute, so a record replays from any
/// working directory.
fn absolute(cfg: &RunConfig) -> Result<RunConfig> {
    let opt = |p: &Option<PathBuf>| p.as_deref().map(canonical).transpose();
    let mut c = cfg.clone();
    c.checkpoint = Some(canonical(&cfg.checkpoint_dir()?)?);
    c.image = opt(&cfg.image)?;
    c.mask = opt(&cfg.mask)?;
    c.output = opt(&cfg.output)?;
    c.control.image = opt(&cfg.control.image)?;
    Ok(c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayOutcome {
    pub expected: String,
    pub actual: String,
    pub output: PathBuf,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.expected == self.actual
    }
}

/// Re-runs a record's config, refusing if any input changed since. The
/// replayed image goes to `output` (default: `<stem>.replay.png` next to the
/// original).
pub fn replay(record: &RunRecord, output: Option<PathBuf>) -> Result<ReplayOutcome> {
    let out = output.unwrap_or_else(|| record.output.with_extension("replay.png"));
    let cfg = RunConfig { output: Some(out.clone()), ..record.config.clone() };
    cfg.validate()?;
    let ckpt = ModelCheckpoint::load(&cfg.checkpoint_dir()?)?;
    let now = input_hashes(&cfg, &ckpt)?;
    for (what, then, now) in [
        ("image", Some(&record.inputs.image), Some(&now.image)),
        ("mask", Some(&record.inputs.mask), Some(&now.mask)),
        ("control image", record.inputs.control_image.as_ref(), now.control_image.as_ref()),
        ("checkpoint", Some(&record.inputs.checkpoint), Some(&now.checkpoint)),
    ] {
        if then != now {
            return Err(Error::Invalid(format!("{what} changed since the run was recorded")));
        }
    }
    let img = render(&cfg, &ckpt)?;
    io::write_image(&out, &img)?;
    Ok(ReplayOutcome { expected: record.output_sha256.clone(), actual: file_sha256(&out)?, output: out })
}
