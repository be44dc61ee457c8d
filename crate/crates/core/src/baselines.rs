//! Training-free inpainting by latent blending. After every reverse step the
//! region outside the mask is overwritten with a freshly re-noised copy of
//! the original latent. Soft mode blends convexly with a grayscale mask.

use maskguide_nn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::autoencoder::{decode_latent, encode_image};
use crate::diffusion::model::{ImageTensor, LatentTensor};
use crate::diffusion::schedule::{add_noise, sample_step, sampling_timesteps, NoiseSchedule, SamplerMode};
use crate::diffusion::unet::{denoiser_forward, Injected};
use crate::diffusion::{ModelCheckpoint, TextEmbedding};
use crate::mask_ops::{downsample_cubic, SoftMask};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Hard,
    Soft,
}

/// Blending setup. `mask` is at latent resolution, 1 where content is
/// generated.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendConfig {
    pub mask: SoftMask,
    /// Fraction of the schedule to re-run; 0 returns the autoencoder round
    /// trip of the input.
    pub denoise_strength: f64,
    pub mode: BlendMode,
    pub steps: usize,
    pub sampler: SamplerMode,
    pub seed: u64,
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.denoise_strength) {
            return Err(Error::Invalid(format!(
                "denoise strength must be in [0, 1], got {}",
                self.denoise_strength
            )));
        }
        if self.mode == BlendMode::Hard && !self.mask.is_binary() {
            return Err(Error::Invalid("hard blending needs a binary mask".into()));
        }
        Ok(())
    }
}

/// Resamples an image-resolution mask to side `l`. Hard mode re-binarises
/// at 0.5 so the blend stays a pure selection.
pub fn latent_mask(mask: &SoftMask, l: usize, mode: BlendMode) -> Result<SoftMask> {
    let m = downsample_cubic(mask, l, l)?;
    Ok(match mode {
        BlendMode::Hard => m.threshold(0.5).to_soft(),
        BlendMode::Soft => m,
    })
}

fn blend(gen: &Tensor, known: &Tensor, mask: &SoftMask) -> Result<Tensor> {
    let [_, _, h, w] = gen.shape();
    if gen.shape() != known.shape() || (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "blend: generated {:?}, known {:?}, mask {}x{}",
            gen.shape(),
            known.shape(),
            mask.height(),
            mask.width()
        )));
    }
    let m = mask.values();
    let (g, k) = (gen.data(), known.data());
    let data = (0..g.len())
        .map(|i| match m[i % (h * w)] {
            a if a == 1.0 => g[i],
            a if a == 0.0 => k[i],
            a => a * g[i] + (1.0 - a) * k[i],
        })
        .collect();
    Ok(Tensor::from_vec(gen.shape(), data)?)
}

/// `mask⊙x_gen + (1−mask)⊙add_noise(x0, eps, t)` with `eps` drawn from
/// `rng`. `t = None` is the clean end of the trajectory: the original latent
/// is used as is and no noise is drawn. Returns the blended latent and the
/// noise that was drawn.
pub fn blended_step<R: Rng + ?Sized>(
    x_gen: &Tensor,
    x0: &Tensor,
    mask: &SoftMask,
    t: Option<usize>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Tensor, Option<Tensor>)> {
    match t {
        Some(t) => {
            let eps = Tensor::randn(x0.shape(), 1.0, rng);
            let known = add_noise(x0, &eps, &[t], sched)?;
            Ok((blend(x_gen, &known, mask)?, Some(eps)))
        }
        None => Ok((blend(x_gen, x0, mask)?, None)),
    }
}

/// One entry per reverse step of [`blended_sample`].
#[derive(Clone, Debug)]
pub struct StepTrace {
    /// Timestep the latent now sits at (`None` once clean).
    pub t: Option<usize>,
    /// Noise used to re-noise the original for this step.
    pub eps: Option<Tensor>,
    /// Latent after blending.
    pub latent: Tensor,
}

pub struct BlendOutput {
    pub image: ImageTensor,
    pub x0: Tensor,
    pub start: Option<(usize, Tensor)>,
    pub trace: Vec<StepTrace>,
}

/// Timesteps visited for a given strength: the regular sampling grid
/// restricted to `t < round(strength·T)`.
pub fn strength_timesteps(train_steps: usize, steps: usize, strength: f64) -> Result<Vec<usize>> {
    let t_start = (strength * train_steps as f64).round() as usize;
    Ok(sampling_timesteps(train_steps, steps)?.into_iter().filter(|&t| t < t_start).collect())
}

pub fn blended_sample(
    ckpt: &ModelCheckpoint,
    img: &ImageTensor,
    prompt: &TextEmbedding,
    cfg: &BlendConfig,
) -> Result<BlendOutput> {
    cfg.validate()?;
    let params = &ckpt.params;
    let sched = ckpt.config.schedule.build()?;
    let x0 = encode_image(params, img)?.into_tensor();
    let l = x0.shape()[2];
    if (cfg.mask.height(), cfg.mask.width()) != (l, l) {
        return Err(Error::Geometry(format!(
            "blend mask is {}x{} but the latent is {l}x{l}",
            cfg.mask.height(),
            cfg.mask.width()
        )));
    }
    let ts = strength_timesteps(sched.len(), cfg.steps, cfg.denoise_strength)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let text = prompt.to_tensor(x0.shape()[0]);
    let mut trace = Vec::with_capacity(ts.len());

    let (mut x, start) = match ts.first() {
        Some(&t0) => {
            let eps = Tensor::randn(x0.shape(), 1.0, &mut rng);
            (add_noise(&x0, &eps, &[t0], &sched)?, Some((t0, eps)))
        }
        None => (x0.clone(), None),
    };
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied();
        let (eps_pred, _) = denoiser_forward(params, &x, &[t], &text, Injected::default())?;
        if !eps_pred.is_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at t={t}")));
        }
        let stepped = sample_step(&x, t, t_prev, &eps_pred, &sched, cfg.sampler, &mut rng)?;
        let (blended, eps) = blended_step(&stepped, &x0, &cfg.mask, t_prev, &sched, &mut rng)?;
        x = blended;
        trace.push(StepTrace { t: t_prev, eps, latent: x.clone() });
    }
    let image = decode_latent(params, &LatentTensor::new(x)?)?;
    Ok(BlendOutput { image, x0, start, trace })
}
