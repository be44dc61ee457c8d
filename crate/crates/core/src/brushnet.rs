//! Dual-branch inpainting: a text-free copy of the denoiser reads the noisy
//! latent, the latent of the hole-masked image and the downsampled hole, and
//! feeds 25 zero-convolution residuals into the frozen base.

use maskguide_nn::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controlnet::{control_residuals, ControlInput};
use crate::diffusion::autoencoder::{decode_latent, encode_image};
use crate::diffusion::layers::Ctx;
use crate::diffusion::model::{ImageTensor, LatentTensor, LATENT_CHANNELS};
use crate::diffusion::sampler::guide;
use crate::diffusion::schedule::{sample_step, sampling_timesteps, SamplerMode};
use crate::diffusion::unet::{
    decoder_channels, denoiser_forward, run_decoder, run_encoder, tap_channels, EncoderHooks, Injected,
    BASE, NUM_DECODER_POINTS,
};
use crate::diffusion::{ModelCheckpoint, TextEmbedding};
use crate::mask_ops::{downsample_cubic, BinaryMask, SoftMask, NUM_INJECTION_POINTS};
use crate::{Error, Result};

pub const INPAINT: &str = "inpaint.";
pub const BRANCH_CHANNELS: usize = 2 * LATENT_CHANNELS + 1;
pub const NUM_BRANCH_POINTS: usize = NUM_INJECTION_POINTS + NUM_DECODER_POINTS;
/// Grey level written into hole pixels before encoding (0 after mapping to
/// `[-1, 1]`).
pub const HOLE_FILL: f32 = 0.5;

/// Copies the base into `inpaint.*` without any text conditioning tensors,
/// widens `conv_in` to 9 input channels (new channels start at zero) and adds
/// the 25 zero convolutions.
pub fn init_inpaint(store: &mut ParamStore, cfg: &crate::diffusion::ModelConfig) -> Result<()> {
    let copied: Vec<(String, Tensor)> = store
        .iter()
        .filter_map(|(name, t)| {
            let rest = name.strip_prefix(BASE)?;
            let text = rest.starts_with("text_proj.") || rest.contains(".film_");
            let head = rest.starts_with("out_") || rest.starts_with("conv_in.weight");
            (!text && !head).then(|| (format!("{INPAINT}{rest}"), t.clone()))
        })
        .collect();
    let w = store
        .get("base.conv_in.weight")
        .ok_or_else(|| Error::Checkpoint("inpaint branch needs trained base weights".into()))?;
    let [c0, cin, k, _] = w.shape();
    let mut wide = Tensor::zeros([c0, BRANCH_CHANNELS, k, k]);
    for o in 0..c0 {
        for i in 0..cin {
            let src = &w.data()[(o * cin + i) * k * k..][..k * k];
            wide.data_mut()[(o * BRANCH_CHANNELS + i) * k * k..][..k * k].copy_from_slice(src);
        }
    }
    for (name, t) in copied {
        store.insert(name, t);
    }
    store.insert("inpaint.conv_in.weight", wide);
    for (i, c) in tap_channels(cfg.unet_channels).into_iter().enumerate() {
        store.insert(format!("inpaint.zero.enc.{i}.weight"), Tensor::zeros([c, c, 1, 1]));
        store.insert(format!("inpaint.zero.enc.{i}.bias"), Tensor::zeros([1, c, 1, 1]));
    }
    for (j, c) in decoder_channels(cfg.unet_channels).into_iter().enumerate() {
        store.insert(format!("inpaint.zero.dec.{j}.weight"), Tensor::zeros([c, c, 1, 1]));
        store.insert(format!("inpaint.zero.dec.{j}.bias"), Tensor::zeros([1, c, 1, 1]));
    }
    Ok(())
}

/// Hole pixels are replaced by mid-grey, then the image is encoded.
pub fn masked_image(img: &ImageTensor, hole: &BinaryMask) -> Result<ImageTensor> {
    let [n, _, h, w] = img.tensor().shape();
    if (hole.height(), hole.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "hole is {}x{} but image is {h}x{w}",
            hole.height(),
            hole.width()
        )));
    }
    let mut t = img.tensor().clone();
    let m = hole.values();
    for (k, v) in t.data_mut().iter_mut().enumerate() {
        if m[k % (h * w)] == 1 {
            *v = HOLE_FILL;
        }
    }
    debug_assert_eq!(t.numel(), n * 3 * h * w);
    ImageTensor::new(t)
}

pub fn make_masked_image_latent(params: &ParamStore, img: &ImageTensor, hole: &BinaryMask) -> Result<LatentTensor> {
    encode_image(params, &masked_image(img, hole)?)
}

/// `[N, 9, L, L]`: noisy latent, masked-image latent, downsampled hole.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchInput(Tensor);

impl BranchInput {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Cubic downsample of the hole to the latent side, as `[1, 1, L, L]`.
pub fn hole_at_latent(hole: &BinaryMask, l: usize) -> Result<Tensor> {
    Ok(downsample_cubic(&hole.to_soft(), l, l)?.to_tensor())
}

/// Concatenates `[x_t ‖ masked_latent ‖ mask]`. `mask_l` holds one
/// latent-resolution mask per batch item (or one shared by all).
pub fn assemble_branch_input(x_t: &Tensor, masked_latent: &Tensor, mask_l: &Tensor) -> Result<BranchInput> {
    let [n, c, l, l2] = x_t.shape();
    if c != LATENT_CHANNELS || masked_latent.shape() != x_t.shape() {
        return Err(Error::Shape(format!(
            "branch input: x_t {:?} vs masked latent {:?}",
            x_t.shape(),
            masked_latent.shape()
        )));
    }
    let [mn, mc, mh, mw] = mask_l.shape();
    if mc != 1 || (mh, mw) != (l, l2) || (mn != n && mn != 1) {
        return Err(Error::Shape(format!("branch mask {:?} does not fit latent {:?}", mask_l.shape(), x_t.shape())));
    }
    let mask = if mn == n {
        mask_l.clone()
    } else {
        Tensor::stack(&vec![mask_l.clone(); n])?
    };
    Ok(BranchInput(Tensor::cat_channels(&[x_t, masked_latent, &mask])?))
}

pub fn build_branch_input(x_t: &Tensor, masked_latent: &Tensor, hole: &BinaryMask, l: usize) -> Result<BranchInput> {
    let [_, _, xh, xw] = x_t.shape();
    if (xh, xw) != (l, l) {
        return Err(Error::Geometry(format!("x_t is {xh}x{xw}, expected latent side {l}")));
    }
    assemble_branch_input(x_t, masked_latent, &hole_at_latent(hole, l)?)
}

/// The 25 residuals: 13 for the encoder skips and mid block, then 12 for
/// the decoder blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchResiduals(Vec<Tensor>);

impl BranchResiduals {
    pub fn new(res: Vec<Tensor>) -> Result<Self> {
        if res.len() != NUM_BRANCH_POINTS {
            return Err(Error::Shape(format!(
                "branch residuals need {NUM_BRANCH_POINTS} entries, got {}",
                res.len()
            )));
        }
        Ok(Self(res))
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.0
    }

    pub fn encoder(&self) -> &[Tensor] {
        &self.0[..NUM_INJECTION_POINTS]
    }

    pub fn decoder(&self) -> &[Tensor] {
        &self.0[NUM_INJECTION_POINTS..]
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a.bit_eq(b))
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}

/// Graph-level branch. There is deliberately no text input.
pub fn branch(ctx: &mut Ctx<'_>, bi: Var, ts: &[usize]) -> Result<Vec<Var>> {
    let c = ctx.g.value(bi).shape()[1];
    if c != BRANCH_CHANNELS {
        return Err(Error::Shape(format!("branch input needs {BRANCH_CHANNELS} channels, got {c}")));
    }
    let enc = run_encoder(ctx, INPAINT, bi, ts, None, EncoderHooks::default())?;
    let (dec, _) = run_decoder(ctx, INPAINT, &enc.taps, enc.temb, None, &[])?;
    let mut out = Vec::with_capacity(NUM_BRANCH_POINTS);
    for (i, &tap) in enc.taps.iter().enumerate() {
        out.push(ctx.conv(&format!("inpaint.zero.enc.{i}"), tap, 1, 0)?);
    }
    for (j, &d) in dec.iter().enumerate() {
        out.push(ctx.conv(&format!("inpaint.zero.dec.{j}"), d, 1, 0)?);
    }
    Ok(out)
}

pub fn branch_forward(params: &ParamStore, bi: &BranchInput, ts: &[usize]) -> Result<BranchResiduals> {
    let mut g = Graph::new();
    let x = g.input(bi.0.clone());
    let mut ctx = Ctx::new(&mut g, params, None);
    let res = branch(&mut ctx, x, ts)?;
    BranchResiduals::new(res.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Box blur of the hole with a `(2r+1)²` window, averaging only in-bounds
/// pixels.
pub fn feather(hole: &BinaryMask, radius: usize) -> SoftMask {
    let (h, w) = (hole.height(), hole.width());
    if radius == 0 {
        return hole.to_soft();
    }
    let r = radius as isize;
    let blur_1d = |src: &[f32], len: usize, stride: usize, offset: usize| -> Vec<f32> {
        (0..len)
            .map(|i| {
                let lo = (i as isize - r).max(0) as usize;
                let hi = (i as isize + r).min(len as isize - 1) as usize;
                let s: f32 = (lo..=hi).map(|k| src[offset + k * stride]).sum();
                s / (hi - lo + 1) as f32
            })
            .collect()
    };
    let src: Vec<f32> = hole.values().iter().map(|&v| v as f32).collect();
    let mut rows = vec![0.0f32; h * w];
    for y in 0..h {
        let line = blur_1d(&src, w, 1, y * w);
        rows[y * w..(y + 1) * w].copy_from_slice(&line);
    }
    let mut out = vec![0.0f32; h * w];
    for x in 0..w {
        let col = blur_1d(&rows, h, w, x);
        for y in 0..h {
            out[y * w + x] = col[y];
        }
    }
    SoftMask::new(h, w, out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("averages of {0,1}")
}

/// `m⊙generated + (1−m)⊙original` with `m` the feathered hole. Pixels where
/// `m` is exactly 0 or 1 are copied, not blended.
pub fn paste_back(
    generated: &ImageTensor,
    original: &ImageTensor,
    hole: &BinaryMask,
    feather_px: usize,
) -> Result<ImageTensor> {
    let [n, c, h, w] = generated.tensor().shape();
    if original.tensor().shape() != generated.tensor().shape() || (hole.height(), hole.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "paste_back: generated {:?}, original {:?}, hole {}x{}",
            generated.tensor().shape(),
            original.tensor().shape(),
            hole.height(),
            hole.width()
        )));
    }
    let m = feather(hole, feather_px);
    let mv = m.values();
    let (g, o) = (generated.tensor().data(), original.tensor().data());
    let data: Vec<f32> = (0..n * c * h * w)
        .map(|k| match mv[k % (h * w)] {
            a if a == 0.0 => o[k],
            a if a == 1.0 => g[k],
            a => a * g[k] + (1.0 - a) * o[k],
        })
        .collect();
    ImageTensor::new(Tensor::from_vec([n, c, h, w], data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintConfig {
    pub steps: usize,
    pub sampler: SamplerMode,
    pub seed: u64,
    pub paste_back: bool,
    pub feather_px: usize,
    /// Multiplies the branch residuals before they are added.
    pub branch_scale: f32,
    /// Inject only the 13 encoder/mid branch residuals.
    pub encoder_only: bool,
    /// Classifier-free guidance scale; 1 disables the unconditional pass.
    pub cfg_scale: f32,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            sampler: SamplerMode::Ddim,
            seed: 0,
            paste_back: true,
            feather_px: 2,
            branch_scale: 1.0,
            encoder_only: false,
            cfg_scale: 1.0,
        }
    }
}

pub struct InpaintOutput {
    /// Final image, after paste-back when enabled.
    pub image: ImageTensor,
    /// Clean latent before decoding.
    pub latent: Tensor,
}

/// A batch of inpainting requests sharing one configuration.
pub struct InpaintJob<'a> {
    /// `[N, 3, H, W]`.
    pub images: &'a ImageTensor,
    /// One hole per image.
    pub holes: &'a [BinaryMask],
    /// One prompt per image.
    pub prompts: &'a [TextEmbedding],
    /// Control branch input, shared by the batch.
    pub control: Option<ControlInput<'a>>,
    /// Per-image seeds; item `i` draws all its noise from its own stream.
    pub seeds: &'a [u64],
}

fn check_geometry(ckpt: &ModelCheckpoint, img: &ImageTensor) -> Result<usize> {
    let l = ckpt.config.geometry.latent_size();
    let s = ckpt.config.geometry.image_size();
    if (img.height(), img.width()) != (s, s) {
        return Err(Error::Geometry(format!(
            "checkpoint expects {s}x{s} images ({} geometry), got {}x{}",
            ckpt.config.geometry,
            img.height(),
            img.width()
        )));
    }
    Ok(l)
}

/// Full reverse loop with the branch (if the checkpoint has one) and the
/// optional control branch injected into the frozen base.
pub fn inpaint_batch(ckpt: &ModelCheckpoint, job: &InpaintJob<'_>, cfg: &InpaintConfig) -> Result<InpaintOutput> {
    let n = job.images.batch();
    if job.holes.len() != n || job.prompts.len() != n || job.seeds.len() != n {
        return Err(Error::Invalid(format!(
            "batch of {n} images needs as many holes, prompts and seeds (got {}, {}, {})",
            job.holes.len(),
            job.prompts.len(),
            job.seeds.len()
        )));
    }
    let l = check_geometry(ckpt, job.images)?;
    let params = &ckpt.params;
    let sched = ckpt.config.schedule.build()?;
    let ts = sampling_timesteps(sched.len(), cfg.steps)?;
    let text = TextEmbedding::stack(job.prompts)?;
    let uncond = (cfg.cfg_scale != 1.0).then(|| TextEmbedding::zeros(text.shape()[1]).to_tensor(n));
    let use_branch = params.contains("inpaint.conv_in.weight");

    let branch_inputs = if use_branch {
        let mut masked = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for (i, hole) in job.holes.iter().enumerate() {
            masked.push(make_masked_image_latent(params, &job.images.item(i), hole)?.into_tensor());
            masks.push(hole_at_latent(hole, l)?);
        }
        Some((Tensor::stack(&masked)?, Tensor::stack(&masks)?))
    } else {
        None
    };

    let mut rngs: Vec<ChaCha8Rng> = job.seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let noise: Vec<Tensor> = rngs.iter_mut().map(|r| Tensor::randn([1, LATENT_CHANNELS, l, l], 1.0, r)).collect();
    let mut x = Tensor::stack(&noise)?;

    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied();
        let bres = match &branch_inputs {
            Some((masked, masks)) => {
                let bi = assemble_branch_input(&x, masked, masks)?;
                let mut r = branch_forward(params, &bi, &[t])?.0;
                if cfg.encoder_only {
                    for d in &mut r[NUM_INJECTION_POINTS..] {
                        *d = Tensor::zeros(d.shape());
                    }
                }
                Some(r)
            }
            None => None,
        };
        let eps_for = |text: &Tensor| -> Result<Tensor> {
            let cres = job.control.map(|c| control_residuals(params, c, &x, &[t], text)).transpose()?;
            let injected = Injected {
                control: cres
                    .as_ref()
                    .zip(job.control)
                    .map(|(r, c)| (r.as_slice(), c.options.conditioning_scale)),
                branch: bres.as_deref().map(|r| (r, cfg.branch_scale)),
            };
            Ok(denoiser_forward(params, &x, &[t], text, injected)?.0)
        };
        let mut eps = eps_for(&text)?;
        if let Some(u) = &uncond {
            eps = guide(&eps, &eps_for(u)?, cfg.cfg_scale)?;
        }
        if !eps.is_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at t={t}")));
        }
        let next: Vec<Tensor> = (0..n)
            .map(|i| sample_step(&x.item(i), t, t_prev, &eps.item(i), &sched, cfg.sampler, &mut rngs[i]))
            .collect::<Result<_>>()?;
        x = Tensor::stack(&next)?;
    }

    let decoded = decode_latent(params, &LatentTensor::new(x.clone())?)?;
    let image = if cfg.paste_back {
        let items: Vec<ImageTensor> = (0..n)
            .map(|i| paste_back(&decoded.item(i), &job.images.item(i), &job.holes[i], cfg.feather_px))
            .collect::<Result<_>>()?;
        ImageTensor::stack(&items)?
    } else {
        decoded
    };
    Ok(InpaintOutput { image, latent: x })
}

/// Single-image convenience wrapper around [`inpaint_batch`].
pub fn inpaint_sample(
    ckpt: &ModelCheckpoint,
    img: &ImageTensor,
    hole: &BinaryMask,
    prompt: &TextEmbedding,
    control: Option<ControlInput<'_>>,
    cfg: &InpaintConfig,
) -> Result<InpaintOutput> {
    let job = InpaintJob {
        images: img,
        holes: std::slice::from_ref(hole),
        prompts: std::slice::from_ref(prompt),
        control,
        seeds: &[cfg.seed],
    };
    inpaint_batch(ckpt, &job, cfg)
}
