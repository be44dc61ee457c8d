//! Run configuration. Files are JSON; every field has a default so a config
//! file only needs the values it changes, and command-line flags are applied
//! on top of whatever the file sets.

use std::path::{Path, PathBuf};

use maskguide::controlnet::{MaskPlacement, DEFAULT_EDGE_THRESHOLD};
use maskguide::diffusion::{Geometry, SamplerMode};
use maskguide::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default checkpoint directory.
pub const CHECKPOINT_ENV: &str = "MASKGUIDE_CHECKPOINT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Frozen base plus the inpaint branch, optionally with guided control.
    DualBranch,
    /// Hard latent blending with the base alone.
    Blended,
    /// Latent blending with a feathered grayscale mask.
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    None,
    /// Sobel edges of the input image.
    Edge,
    /// A grayscale condition image read from `control.image`.
    File,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMask {
    /// Multiply control residuals by the refined product-mask pyramid.
    Product,
    /// Run the control branch unguided.
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub close: usize,
    pub open: usize,
    pub dilate: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { close: 3, open: 3, dilate: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub mode: ControlMode,
    pub image: Option<PathBuf>,
    pub edge_threshold: f32,
    pub guidance_mask: GuidanceMask,
    pub placement: MaskPlacement,
    pub conditioning_scale: f32,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            mode: ControlMode::None,
            image: None,
            edge_threshold: DEFAULT_EDGE_THRESHOLD,
            guidance_mask: GuidanceMask::Product,
            placement: MaskPlacement::Stream,
            conditioning_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Expected geometry; `None` takes it from the checkpoint.
    pub geometry: Option<Geometry>,
    pub method: Method,
    pub sampler: SamplerMode,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub image: Option<PathBuf>,
    /// Product mask: 1 (white) on the subject to keep.
    pub mask: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub prompt: String,
    pub refine: RefineConfig,
    pub control: ControlConfig,
    pub branch_scale: f32,
    /// Dual-branch only. The blended methods keep the preserved region by
    /// construction and return the raw decode.
    pub paste_back: bool,
    pub feather_px: usize,
    /// Blended methods only.
    pub denoise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            geometry: None,
            method: Method::DualBranch,
            sampler: SamplerMode::Ddim,
            steps: 20,
            seed: 0,
            checkpoint: None,
            image: None,
            mask: None,
            output: None,
            prompt: String::new(),
            refine: RefineConfig::default(),
            control: ControlConfig::default(),
            branch_scale: 1.0,
            paste_back: true,
            feather_px: 2,
            denoise: 1.0,
        }
    }
}

fn require_file(what: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
    let p = p.as_ref().ok_or_else(|| Error::Invalid(format!("no {what} given")))?;
    if !p.is_file() {
        return Err(Error::Invalid(format!("{what} `{}` does not exist", p.display())));
    }
    Ok(p.clone())
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::Invalid(format!("config `{}`: {e}", path.display())))?;
        serde_json::from_slice(&raw).map_err(|e| Error::Invalid(format!("config `{}`: {e}", path.display())))
    }

    /// Checkpoint directory, falling back to the environment default.
    pub fn checkpoint_dir(&self) -> Result<PathBuf> {
        match &self.checkpoint {
            Some(p) => Ok(p.clone()),
            None => std::env::var_os(CHECKPOINT_ENV).map(PathBuf::from).ok_or_else(|| {
                Error::Invalid(format!("no checkpoint given and {CHECKPOINT_ENV} is not set"))
            }),
        }
    }

    /// Checks everything that can be checked without loading weights. Any
    /// failure here maps to the bad-config exit code.
    pub fn validate(&self) -> Result<()> {
        require_file("input image", &self.image)?;
        require_file("mask", &self.mask)?;
        if self.output.is_none() {
            return Err(Error::Invalid("no output path given".into()));
        }
        let ckpt = self.checkpoint_dir()?;
        if !ckpt.join("manifest.json").is_file() {
            return Err(Error::Invalid(format!("checkpoint `{}` has no manifest.json", ckpt.display())));
        }
        if self.steps == 0 {
            return Err(Error::Invalid("steps must be positive".into()));
        }
        for (name, k) in [("close", self.refine.close), ("open", self.refine.open), ("dilate", self.refine.dilate)] {
            if k % 2 == 0 {
                return Err(Error::Invalid(format!("{name} kernel size must be odd, got {k}")));
            }
        }
        if !(0.0..=1.0).contains(&self.denoise) {
            return Err(Error::Invalid(format!("denoise must be in [0, 1], got {}", self.denoise)));
        }
        if !self.branch_scale.is_finite() || !self.control.conditioning_scale.is_finite() {
            return Err(Error::Invalid("scales must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.control.edge_threshold) {
            return Err(Error::Invalid("edge threshold must be in [0, 1]".into()));
        }
        match self.control.mode {
            ControlMode::File => {
                require_file("control image", &self.control.image)?;
            }
            ControlMode::Edge | ControlMode::None => {
                if self.control.image.is_some() {
                    return Err(Error::Invalid("a control image needs control mode `file`".into()));
                }
            }
        }
        if self.control.mode != ControlMode::None && self.method != Method::DualBranch {
            return Err(Error::Invalid("control conditioning is only available with the dualbranch method".into()));
        }
        Ok(())
    }
}
