use maskguide_nn::{ParamStore, Tensor};
use rand::Rng;

use super::prompt::TextEmbedding;
use super::schedule::{sample_step, sampling_timesteps, NoiseSchedule, SamplerMode};
use super::unet::{denoiser_forward, Injected};
use crate::{Error, Result};

/// Runs `sample_step` over `timesteps` (descending). `eps_fn` predicts the
/// noise for the current latent; `after` may rewrite each new latent and
/// receives the step it landed on (`None` for the clean sample).
pub fn reverse_loop<R: Rng>(
    x_init: Tensor,
    timesteps: &[usize],
    sched: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut R,
    mut eps_fn: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    mut after: impl FnMut(Tensor, Option<usize>, &mut R) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut x = x_init;
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = timesteps.get(k + 1).copied();
        let eps = eps_fn(&x, t)?;
        if !eps.is_finite() {
            return Err(Error::Numeric(format!("non-finite noise prediction at t={t}")));
        }
        x = sample_step(&x, t, t_prev, &eps, sched, mode, rng)?;
        x = after(x, t_prev, rng)?;
    }
    Ok(x)
}

/// Classifier-free guidance mix. A scale of exactly 1 returns `cond`
/// untouched and callers can skip the unconditional pass entirely.
pub fn guide(cond: &Tensor, uncond: &Tensor, scale: f32) -> Result<Tensor> {
    if scale == 1.0 {
        return Ok(cond.clone());
    }
    Ok(uncond.zip_map(cond, |u, c| u + scale * (c - u))?)
}

/// Plain text-to-image sampling with the base denoiser, returning latents.
pub fn sample_base<R: Rng>(
    params: &ParamStore,
    sched: &NoiseSchedule,
    text: &TextEmbedding,
    shape: [usize; 4],
    steps: usize,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor> {
    let n = shape[0];
    let ts = sampling_timesteps(sched.len(), steps)?;
    let x = Tensor::randn(shape, 1.0, rng);
    let tx = text.to_tensor(n);
    reverse_loop(
        x,
        &ts,
        sched,
        mode,
        rng,
        |x, t| Ok(denoiser_forward(params, x, &[t], &tx, Injected::default())?.0),
        |x, _, _| Ok(x),
    )
}
