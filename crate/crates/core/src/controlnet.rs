//! Control branch and train-free mask guidance.
//!
//! The branch is a copy of the base encoder and mid block. A small strided
//! stem embeds the condition map to latent resolution; 13 zero-initialised
//! 1×1 convolutions turn the encoder taps into residuals for the frozen base.
//!
//! Guidance multiplies the branch by the product-mask pyramid. The stem sees
//! exactly one 8×8 pixel cell per latent cell, so when the stream is masked
//! at each tap (the default [`MaskPlacement::Stream`]) condition pixels whose
//! cell is zero at level 0 cannot reach the output at all.

use maskguide_nn::{Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::layers::Ctx;
use crate::diffusion::model::{ImageTensor, ModelConfig, DOWNSAMPLE_FACTOR};
use crate::diffusion::schedule::{sample_step, NoiseSchedule, SamplerMode};
use crate::diffusion::unet::{denoiser_forward, run_encoder, tap_channels, EncoderHooks, Injected, BASE};
use crate::mask_ops::{MaskPyramid, SoftMask, NUM_INJECTION_POINTS};
use crate::{Error, Result};

pub const CONTROL: &str = "control.";
pub const DEFAULT_EDGE_THRESHOLD: f32 = 0.2;
const STEM_WIDTHS: [usize; 2] = [16, 32];

/// Single-channel condition map at image resolution, values in `[0, 1]`.
/// All-zero regions carry no control.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlCondition(SoftMask);

impl ControlCondition {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        Ok(Self(SoftMask::new(height, width, values)?))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(SoftMask::filled(height, width, 0.0).expect("0 is in range"))
    }

    pub fn from_soft(m: SoftMask) -> Self {
        Self(m)
    }

    pub fn as_soft(&self) -> &SoftMask {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn values(&self) -> &[f32] {
        self.0.values()
    }

    /// `[1, 1, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        self.0.to_tensor()
    }

    pub fn stack(conds: &[ControlCondition]) -> Result<Tensor> {
        let ts: Vec<Tensor> = conds.iter().map(|c| c.to_tensor()).collect();
        Ok(Tensor::stack(&ts)?)
    }
}

fn luma(img: &ImageTensor, y: usize, x: usize) -> f32 {
    let [r, g, b] = img.pixel(y, x);
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Sobel gradient magnitude of the luma, replicate border, divided by its
/// maximum, with values below `threshold` zeroed. A constant image gives an
/// all-zero map.
pub fn make_edge_condition(img: &ImageTensor, threshold: f32) -> ControlCondition {
    let (h, w) = (img.height(), img.width());
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        luma(img, yy, xx)
    };
    let mut mag = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            mag[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().copied().fold(0.0f32, f32::max);
    let values = mag
        .into_iter()
        .map(|m| {
            let v = if max > 0.0 { (m / max).min(1.0) } else { 0.0 };
            if v < threshold {
                0.0
            } else {
                v
            }
        })
        .collect();
    ControlCondition(SoftMask::new(h, w, values).expect("normalised into [0, 1]"))
}

/// The 13 residuals a control branch adds to the base encoder skips and mid
/// block.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlResiduals(Vec<Tensor>);

impl ControlResiduals {
    pub fn new(res: Vec<Tensor>) -> Result<Self> {
        if res.len() != NUM_INJECTION_POINTS {
            return Err(Error::Shape(format!(
                "control residuals need {NUM_INJECTION_POINTS} entries, got {}",
                res.len()
            )));
        }
        Ok(Self(res))
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.0
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a.bit_eq(b))
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Adds `control.*` parameters: a copy of the base encoder and mid block
/// (time and text conditioning included), the condition stem, and the zero
/// convolutions.
pub fn init_control<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<()> {
    let copied: Vec<(String, Tensor)> = store
        .iter()
        .filter_map(|(name, t)| {
            let rest = name.strip_prefix(BASE)?;
            let keep = ["time_mlp.", "text_proj.", "conv_in.", "enc.", "mid."].iter().any(|p| rest.starts_with(p));
            keep.then(|| (format!("{CONTROL}{rest}"), t.clone()))
        })
        .collect();
    if copied.is_empty() {
        return Err(Error::Checkpoint("control branch needs trained base weights".into()));
    }
    for (name, t) in copied {
        store.insert(name, t);
    }
    let ch = cfg.unet_channels;
    let mut init = Init { store, rng };
    init.conv("control.stem.0", 1, STEM_WIDTHS[0], 2, 1.0);
    init.conv("control.stem.1", STEM_WIDTHS[0], STEM_WIDTHS[1], 2, 1.0);
    init.conv("control.stem.2", STEM_WIDTHS[1], ch[0], 2, 1.0);
    for (i, c) in tap_channels(ch).into_iter().enumerate() {
        init.zero_conv(&format!("control.zero.{i}"), c, c, 1);
    }
    Ok(())
}

/// Overwrites every zero convolution under `prefix` with Gaussian values so
/// a fresh branch produces non-trivial residuals.
pub fn perturb_zero_convs<R: Rng>(store: &mut ParamStore, prefix: &str, std: f32, rng: &mut R) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with(prefix) && n.contains(".zero."))
        .map(String::from)
        .collect();
    for n in names {
        let shape = store.get(&n).expect("name listed").shape();
        store.insert(n, Tensor::randn(shape, std, rng));
    }
}

/// Graph-level control branch. Returns the 13 residual variables.
pub fn control_branch(
    ctx: &mut Ctx<'_>,
    x: Var,
    ts: &[usize],
    text: Var,
    cond: Var,
    stream_masks: Option<&[Var]>,
) -> Result<Vec<Var>> {
    let xs = ctx.g.value(x).shape();
    let cs = ctx.g.value(cond).shape();
    if cs[1] != 1 || cs[2] != xs[2] * DOWNSAMPLE_FACTOR || cs[3] != xs[3] * DOWNSAMPLE_FACTOR {
        return Err(Error::Shape(format!(
            "condition {:?} does not match latent {:?} at factor {DOWNSAMPLE_FACTOR}",
            cs, xs
        )));
    }
    let mut s = ctx.conv("control.stem.0", cond, 2, 0)?;
    s = ctx.g.silu(s);
    s = ctx.conv("control.stem.1", s, 2, 0)?;
    s = ctx.g.silu(s);
    s = ctx.conv("control.stem.2", s, 2, 0)?;
    let hooks = EncoderHooks { stem_extra: Some(s), stream_masks };
    let enc = run_encoder(ctx, CONTROL, x, ts, Some(text), hooks)?;
    enc.taps
        .iter()
        .enumerate()
        .map(|(i, &tap)| ctx.conv(&format!("control.zero.{i}"), tap, 1, 0))
        .collect()
}

fn run_control(
    params: &ParamStore,
    cond: &Tensor,
    x_t: &Tensor,
    ts: &[usize],
    text: &Tensor,
    stream: Option<&MaskPyramid>,
) -> Result<ControlResiduals> {
    let mut g = Graph::new();
    let x = g.input(x_t.clone());
    let tx = g.input(text.clone());
    let c = g.input(cond.clone());
    let masks: Option<Vec<Var>> = stream.map(|p| p.levels().iter().map(|l| g.input(l.to_tensor())).collect());
    let mut ctx = Ctx::new(&mut g, params, None);
    let res = control_branch(&mut ctx, x, ts, tx, c, masks.as_deref())?;
    ControlResiduals::new(res.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Unmasked control residuals. `cond` is `[1 or N, 1, H, W]` at image
/// resolution.
pub fn control_forward(
    params: &ParamStore,
    cond: &Tensor,
    x_t: &Tensor,
    ts: &[usize],
    text: &Tensor,
) -> Result<ControlResiduals> {
    run_control(params, cond, x_t, ts, text, None)
}

/// `residual_i ⊙ level[index_map[i]]`, the mask broadcast over batch and
/// channels. The input is left untouched.
pub fn apply_mask_guidance(res: &ControlResiduals, pyr: &MaskPyramid) -> Result<ControlResiduals> {
    let mut out = Vec::with_capacity(NUM_INJECTION_POINTS);
    for (i, r) in res.0.iter().enumerate() {
        let level = pyr.level_for(i);
        let [n, c, h, w] = r.shape();
        if (h, w) != (level.height(), level.width()) {
            return Err(Error::Shape(format!(
                "residual {i} is {h}x{w} but pyramid level {} is {}x{}",
                pyr.index_map()[i],
                level.height(),
                level.width()
            )));
        }
        let m = level.values();
        let mut t = r.clone();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v *= m[k % (h * w)];
        }
        debug_assert_eq!(t.numel(), n * c * h * w);
        out.push(t);
    }
    Ok(ControlResiduals(out))
}

/// Where the guidance mask is applied inside the control branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPlacement {
    /// Multiply the encoder stream at every tap and the emitted residuals.
    #[default]
    Stream,
    /// Multiply only the emitted residuals.
    OutputOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceOptions {
    pub placement: MaskPlacement,
    /// Multiplies the residuals after masking.
    pub conditioning_scale: f32,
    /// Threshold the pyramid levels to {0, 1} before use.
    pub rebinarize: Option<f32>,
}

impl Default for GuidanceOptions {
    fn default() -> Self {
        Self { placement: MaskPlacement::Stream, conditioning_scale: 1.0, rebinarize: None }
    }
}

/// Everything the control branch needs besides the latent and prompt.
#[derive(Clone, Copy)]
pub struct ControlInput<'a> {
    /// `[1 or N, 1, H, W]` condition at image resolution.
    pub cond: &'a Tensor,
    /// Product-mask pyramid; `None` runs the branch unguided.
    pub pyramid: Option<&'a MaskPyramid>,
    pub options: &'a GuidanceOptions,
}

fn rebinarized(pyr: &MaskPyramid, at: f32) -> Result<MaskPyramid> {
    let levels = pyr.levels().iter().map(|l| l.threshold(at).to_soft()).collect();
    MaskPyramid::from_levels(levels)
}

/// Control residuals for one denoising step, masked when a pyramid is given.
/// The conditioning scale is not applied here.
pub fn control_residuals(
    params: &ParamStore,
    input: ControlInput<'_>,
    x_t: &Tensor,
    ts: &[usize],
    text: &Tensor,
) -> Result<ControlResiduals> {
    let Some(pyr) = input.pyramid else {
        return control_forward(params, input.cond, x_t, ts, text);
    };
    let owned;
    let pyr = match input.options.rebinarize {
        Some(at) => {
            owned = rebinarized(pyr, at)?;
            &owned
        }
        None => pyr,
    };
    let stream = (input.options.placement == MaskPlacement::Stream).then_some(pyr);
    let res = run_control(params, input.cond, x_t, ts, text, stream)?;
    apply_mask_guidance(&res, pyr)
}

/// One reverse step of the base denoiser with (optionally guided) control.
/// `control = None` runs the base alone.
#[allow(clippy::too_many_arguments)]
pub fn guided_denoise_step<R: Rng>(
    x_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    text: &Tensor,
    control: Option<ControlInput<'_>>,
    params: &ParamStore,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor> {
    let res = control.map(|c| control_residuals(params, c, x_t, &[t], text)).transpose()?;
    let injected = Injected {
        control: res
            .as_ref()
            .zip(control)
            .map(|(r, c)| (r.as_slice(), c.options.conditioning_scale)),
        branch: None,
    };
    let (eps, _) = denoiser_forward(params, x_t, &[t], text, injected)?;
    sample_step(x_t, t, t_prev, &eps, sched, mode, rng)
}
