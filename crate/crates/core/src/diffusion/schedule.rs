//! Linear-beta noise schedule with DDIM and DDPM reverse updates.

use maskguide_nn::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Invalid(format!("timestep {t} out of range 0..{}", self.len())));
        }
        Ok(())
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Invalid("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule { betas, alphas, alpha_bars })
}

/// Schedule hyperparameters as stored in checkpoints and run configs.
///
/// The default uses 50 training steps with betas from 0.002 to 0.2, which ends
/// at a cumulative signal level of about 0.0044. That is close to common
/// latent diffusion schedules and keeps the first reverse step well
/// conditioned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: 50, beta_start: 0.002, beta_end: 0.2 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }
}

/// `sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`. `t` may hold one entry per batch item
/// or a single entry shared by the batch.
pub fn add_noise(x0: &Tensor, eps: &Tensor, t: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "add_noise: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let n = x0.shape()[0];
    let per = x0.numel() / n.max(1);
    let ts = broadcast_t(t, n)?;
    let mut out = Tensor::zeros(x0.shape());
    for (b, &tb) in ts.iter().enumerate() {
        sched.check_t(tb)?;
        let ab = sched.alpha_bars[tb];
        let (ca, cb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        let r = b * per..(b + 1) * per;
        for ((o, &x), &e) in out.data_mut()[r.clone()].iter_mut().zip(&x0.data()[r.clone()]).zip(&eps.data()[r]) {
            *o = ca * x + cb * e;
        }
    }
    Ok(out)
}

fn broadcast_t(t: &[usize], n: usize) -> Result<Vec<usize>> {
    match t.len() {
        1 => Ok(vec![t[0]; n]),
        len if len == n => Ok(t.to_vec()),
        len => Err(Error::Shape(format!("{len} timesteps for a batch of {n}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    /// Deterministic DDIM (eta = 0).
    Ddim,
    /// Ancestral sampling, i.e. DDIM with eta = 1.
    Ddpm,
}

impl SamplerMode {
    pub fn eta(self) -> f64 {
        match self {
            SamplerMode::Ddim => 0.0,
            SamplerMode::Ddpm => 1.0,
        }
    }
}

/// The `steps` timesteps a sampler visits, in descending order, spread
/// evenly over `0..train_steps`.
pub fn sampling_timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Invalid(format!(
            "sampling steps must be in 1..={train_steps}, got {steps}"
        )));
    }
    if steps == 1 {
        return Ok(vec![train_steps - 1]);
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| ((i * (train_steps - 1)) as f64 / (steps - 1) as f64).round() as usize)
        .collect();
    ts.reverse();
    Ok(ts)
}

/// One reverse update from `t` to `t_prev` (`None` means the clean sample).
///
/// The noise draw for DDPM happens only when the step variance is positive,
/// so the final step never consumes randomness.
pub fn sample_step<R: Rng + ?Sized>(
    x_t: &Tensor,
    t: usize,
    t_prev: Option<usize>,
    eps_pred: &Tensor,
    sched: &NoiseSchedule,
    mode: SamplerMode,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_t(t)?;
    if let Some(tp) = t_prev {
        sched.check_t(tp)?;
        if tp >= t {
            return Err(Error::Invalid(format!("t_prev {tp} must be below t {t}")));
        }
    }
    if x_t.shape() != eps_pred.shape() {
        return Err(Error::Shape(format!(
            "sample_step: x_t {:?} vs eps {:?}",
            x_t.shape(),
            eps_pred.shape()
        )));
    }
    let ab = sched.alpha_bars[t];
    let ab_prev = t_prev.map_or(1.0, |tp| sched.alpha_bars[tp]);
    let sigma = mode.eta() * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
    let c_x0 = ab_prev.sqrt() as f32;
    let c_dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt() as f32;
    let (sa, s1a) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);

    let mut out = Tensor::zeros(x_t.shape());
    for ((o, &x), &e) in out.data_mut().iter_mut().zip(x_t.data()).zip(eps_pred.data()) {
        let x0 = (x - s1a * e) / sa;
        *o = c_x0 * x0 + c_dir * e;
    }
    if sigma > 0.0 {
        let z = Tensor::randn(x_t.shape(), 1.0, rng);
        let s = sigma as f32;
        for (o, &zv) in out.data_mut().iter_mut().zip(z.data()) {
            *o += s * zv;
        }
    }
    Ok(out)
}
