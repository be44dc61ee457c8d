//! Noise-prediction training for each network, with everything outside the
//! selected branch frozen and hash-checked.

use std::collections::BTreeMap;

use maskguide_nn::{clip_grad_norm, Graph, Optimizer, OptimizerKind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::masks::{training_hole, MaskSamplerKind, DEFAULT_INSTANCE_DILATE};
use super::scene::{gen_scene_sized, SceneCorpus, SyntheticScene};
use crate::brushnet::{assemble_branch_input, branch, hole_at_latent, init_inpaint, masked_image, INPAINT};
use crate::controlnet::{control_branch, init_control, make_edge_condition, ControlCondition, CONTROL, DEFAULT_EDGE_THRESHOLD};
use crate::diffusion::autoencoder::{ae_decode, ae_encode, init_autoencoder, AE, LATENT_SCALE};
use crate::diffusion::layers::Ctx;
use crate::diffusion::schedule::add_noise;
use crate::diffusion::unet::{init_base, unet_forward, Injection, BASE};
use crate::diffusion::{embed_prompt, tensor_hash, ImageTensor, ModelCheckpoint, TextEmbedding};
use crate::mask_ops::{BinaryMask, NUM_INJECTION_POINTS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Autoencoder,
    Base,
    Control,
    Inpaint,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Autoencoder => AE,
            Branch::Base => BASE,
            Branch::Control => CONTROL,
            Branch::Inpaint => INPAINT,
        }
    }

}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerSpec {
    Momentum { momentum: f32 },
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub branch: Branch,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub corpus_seed: u64,
    pub mask_sampler: MaskSamplerKind,
    pub instance_dilate_px: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f32,
    /// Probability of training on the empty prompt.
    pub prompt_dropout: f64,
}

impl TrainConfig {
    /// Settings used for the bundled test-geometry models.
    pub fn defaults(branch: Branch) -> Self {
        // Injection branches start from zero convs, which plain momentum SGD
        // barely moves within a few thousand steps.
        let (lr, optimizer) = match branch {
            Branch::Autoencoder => (2e-3, OptimizerSpec::Adam),
            Branch::Base => (0.02, OptimizerSpec::Momentum { momentum: 0.9 }),
            Branch::Control | Branch::Inpaint => (1e-3, OptimizerSpec::Adam),
        };
        Self {
            branch,
            steps: 200,
            batch: 8,
            lr,
            optimizer,
            seed: 0,
            corpus_seed: 0,
            mask_sampler: MaskSamplerKind::Random,
            instance_dilate_px: DEFAULT_INSTANCE_DILATE,
            grad_clip: 1.0,
            prompt_dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::Invalid("steps and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Invalid("grad_clip must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(Error::Invalid("prompt_dropout must be in [0, 1]".into()));
        }
        if let OptimizerSpec::Momentum { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::Invalid("momentum must be in [0, 1)".into()));
            }
        }
        Ok(())
    }

    fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerSpec::Momentum { momentum } => OptimizerKind::Momentum { lr: self.lr, momentum },
            OptimizerSpec::Adam => OptimizerKind::Adam { lr: self.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub losses: Vec<f32>,
    /// Gradient norms before clipping.
    pub grad_norms: Vec<f32>,
    /// Number of tensors verified bit-unchanged.
    pub frozen_tensors: usize,
}

impl TrainLog {
    /// Mean loss over `steps` (clamped to the log).
    pub fn mean_loss(&self, steps: std::ops::Range<usize>) -> f64 {
        let end = steps.end.min(self.losses.len());
        let s = &self.losses[steps.start.min(end)..end];
        s.iter().map(|&v| v as f64).sum::<f64>() / s.len().max(1) as f64
    }
}

fn hashes_outside(params: &ParamStore, prefix: &str) -> BTreeMap<String, String> {
    params
        .iter()
        .filter(|(n, _)| !n.starts_with(prefix))
        .map(|(n, t)| (n.to_string(), tensor_hash(t)))
        .collect()
}

/// Creates the branch if the checkpoint lacks it; errors when its
/// prerequisites are missing.
pub fn ensure_branch<R: Rng>(ckpt: &mut ModelCheckpoint, branch: Branch, rng: &mut R) -> Result<()> {
    let need = |ckpt: &ModelCheckpoint, prefix: &str, what: &str| {
        if ckpt.has_branch(prefix) {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("training the {what} needs a checkpoint that already holds `{prefix}*` weights")))
        }
    };
    let cfg = ckpt.config.clone();
    match branch {
        Branch::Autoencoder => {
            if !ckpt.has_branch(AE) {
                init_autoencoder(&mut ckpt.params, &cfg, rng);
            }
        }
        Branch::Base => {
            need(ckpt, AE, "base denoiser")?;
            if !ckpt.has_branch(BASE) {
                init_base(&mut ckpt.params, &cfg, rng);
            }
        }
        Branch::Control => {
            need(ckpt, AE, "control branch")?;
            need(ckpt, BASE, "control branch")?;
            if !ckpt.has_branch(CONTROL) {
                init_control(&mut ckpt.params, &cfg, rng)?;
            }
        }
        Branch::Inpaint => {
            need(ckpt, AE, "inpaint branch")?;
            need(ckpt, BASE, "inpaint branch")?;
            if !ckpt.has_branch(INPAINT) {
                init_inpaint(&mut ckpt.params, &cfg)?;
            }
        }
    }
    Ok(())
}

/// Scenes for one training step, drawn from the corpus by the training rng.
fn draw_scenes<R: Rng>(rng: &mut R, corpus: &SceneCorpus, n: usize, size: usize) -> Vec<SyntheticScene> {
    (0..n).map(|_| gen_scene_sized(corpus.train_seed(rng.gen::<u64>()), size)).collect()
}

fn stack_images(scenes: &[SyntheticScene]) -> Result<ImageTensor> {
    ImageTensor::stack(&scenes.iter().map(|s| s.image.clone()).collect::<Vec<_>>())
}

/// Scaled latents of an image batch, outside of any training graph.
pub fn encode_batch(params: &ParamStore, images: &ImageTensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(images.tensor().map(|v| 2.0 * v - 1.0));
    let mut ctx = Ctx::new(&mut g, params, None);
    let z = ae_encode(&mut ctx, x, true)?;
    Ok(g.value(z).clone())
}

fn prompts_with_dropout<R: Rng>(rng: &mut R, scenes: &[SyntheticScene], p: f64, dim: usize) -> Result<Tensor> {
    let embs: Vec<TextEmbedding> = scenes
        .iter()
        .map(|s| if rng.gen_bool(p) { TextEmbedding::zeros(dim) } else { embed_prompt(&s.prompt) })
        .collect();
    TextEmbedding::stack(&embs)
}

/// Builds the loss graph for one step. Returns the graph and the loss node.
fn step_graph<R: Rng>(
    params: &ParamStore,
    cfg: &TrainConfig,
    ckpt_cfg: &crate::diffusion::ModelConfig,
    sched: &crate::diffusion::NoiseSchedule,
    scenes: &[SyntheticScene],
    rng: &mut R,
) -> Result<(Graph, Var)> {
    let images = stack_images(scenes)?;
    let n = scenes.len();
    let mut g = Graph::new();
    if cfg.branch == Branch::Autoencoder {
        let x = g.input(images.tensor().map(|v| 2.0 * v - 1.0));
        let mut ctx = Ctx::new(&mut g, params, Some(AE));
        let z = ae_encode(&mut ctx, x, false)?;
        let y = ae_decode(&mut ctx, z, false)?;
        let loss = g.mse(y, x)?;
        return Ok((g, loss));
    }

    let x0 = encode_batch(params, &images)?;
    let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..sched.len())).collect();
    let eps = Tensor::randn(x0.shape(), 1.0, rng);
    let x_t = add_noise(&x0, &eps, &ts, sched)?;
    let text = prompts_with_dropout(rng, scenes, cfg.prompt_dropout, ckpt_cfg.text_dim)?;

    let xv = g.input(x_t.clone());
    let tv = g.input(text);
    let target = g.input(eps);
    let mut inj = Injection::default();
    let mut ctx = Ctx::new(&mut g, params, Some(cfg.branch.prefix()));
    match cfg.branch {
        Branch::Autoencoder | Branch::Base => {}
        Branch::Control => {
            let conds: Vec<ControlCondition> =
                scenes.iter().map(|s| make_edge_condition(&s.image, DEFAULT_EDGE_THRESHOLD)).collect();
            let cv = ctx.input(ControlCondition::stack(&conds)?);
            inj.encoder.push(control_branch(&mut ctx, xv, &ts, tv, cv, None)?);
        }
        Branch::Inpaint => {
            let l = x0.shape()[2];
            let holes: Vec<BinaryMask> = scenes
                .iter()
                .map(|s| training_hole(cfg.mask_sampler, s, rng.gen(), cfg.instance_dilate_px))
                .collect();
            let masked: Vec<ImageTensor> =
                scenes.iter().zip(&holes).map(|(s, h)| masked_image(&s.image, h)).collect::<Result<_>>()?;
            let masked_l = encode_batch(params, &ImageTensor::stack(&masked)?)?;
            let mask_l = Tensor::stack(&holes.iter().map(|h| hole_at_latent(h, l)).collect::<Result<Vec<_>>>()?)?;
            let bi = assemble_branch_input(&x_t, &masked_l, &mask_l)?;
            let biv = ctx.input(bi.tensor().clone());
            let res = branch(&mut ctx, biv, &ts)?;
            inj.encoder.push(res[..NUM_INJECTION_POINTS].to_vec());
            inj.decoder.push(res[NUM_INJECTION_POINTS..].to_vec());
        }
    }
    let out = unet_forward(&mut ctx, BASE, xv, &ts, Some(tv), &inj)?;
    let loss = g.mse(out.eps, target)?;
    Ok((g, loss))
}

/// Trains `cfg.branch` in place. Every tensor outside the branch is hashed
/// before and after and must come back bit-identical.
pub fn train(ckpt: &mut ModelCheckpoint, cfg: &TrainConfig) -> Result<TrainLog> {
    train_with_progress(ckpt, cfg, |_, _| {})
}

pub fn train_with_progress(
    ckpt: &mut ModelCheckpoint,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f32),
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ensure_branch(ckpt, cfg.branch, &mut rng)?;
    let prefix = cfg.branch.prefix();
    let frozen_before = hashes_outside(&ckpt.params, prefix);
    let corpus = SceneCorpus::new(cfg.corpus_seed);
    let size = ckpt.config.geometry.image_size();
    let sched = ckpt.config.schedule.build()?;
    let model_cfg = ckpt.config.clone();
    let mut opt = Optimizer::new(cfg.optimizer_kind());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let scenes = draw_scenes(&mut rng, &corpus, cfg.batch, size);
        let (loss, mut grads) = {
            let (g, loss) = step_graph(&ckpt.params, cfg, &model_cfg, &sched, &scenes, &mut rng)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "{:?} training loss became {value} at step {step} (last finite loss {:?}, last grad norm {:?})",
                    cfg.branch,
                    losses.last(),
                    grad_norms.last()
                )));
            }
            (value, g.backward(loss)?.named(&g))
        };
        let norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("{:?} gradient norm became {norm} at step {step}", cfg.branch)));
        }
        opt.step(&mut ckpt.params, &grads)?;
        losses.push(loss);
        grad_norms.push(norm);
        progress(step, loss);
    }

    if cfg.branch == Branch::Autoencoder {
        calibrate_latent_scale(ckpt, &corpus)?;
    }
    let frozen_after = hashes_outside(&ckpt.params, prefix);
    if frozen_before != frozen_after {
        let changed: Vec<&String> = frozen_before
            .iter()
            .filter(|(k, v)| frozen_after.get(*k) != Some(*v))
            .map(|(k, _)| k)
            .collect();
        return Err(Error::Numeric(format!("frozen tensors changed during training: {changed:?}")));
    }
    Ok(TrainLog { config: cfg.clone(), losses, grad_norms, frozen_tensors: frozen_before.len() })
}

/// Sets the latent scale so encoded training scenes have unit standard
/// deviation.
fn calibrate_latent_scale(ckpt: &mut ModelCheckpoint, corpus: &SceneCorpus) -> Result<()> {
    ckpt.params.insert(LATENT_SCALE, Tensor::full([1, 1, 1, 1], 1.0));
    let size = ckpt.config.geometry.image_size();
    let scenes: Vec<SyntheticScene> =
        (0..32u64).map(|i| gen_scene_sized(corpus.train_seed(u64::MAX / 4 - i), size)).collect();
    let z = encode_batch(&ckpt.params, &stack_images(&scenes)?)?;
    let mean = z.mean();
    let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / z.numel() as f64;
    let std = var.sqrt();
    if !(std.is_finite() && std > 1e-6) {
        return Err(Error::Numeric(format!("autoencoder latents have degenerate std {std}")));
    }
    ckpt.params.insert(LATENT_SCALE, Tensor::full([1, 1, 1, 1], (1.0 / std) as f32));
    Ok(())
}

/// Loss and gradient of a two-parameter model `y = w·x + b` under mean
/// squared error, computed by the same graph machinery the networks use.
pub fn micro_model_gradient(w: f32, b: f32, xs: &[f32], ys: &[f32]) -> Result<(f32, [f32; 2])> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::Invalid("micro model needs equal, non-empty inputs".into()));
    }
    let n = xs.len();
    let mut store = ParamStore::new();
    store.insert("micro.weight", Tensor::full([1, 1, 1, 1], w));
    store.insert("micro.bias", Tensor::full([1, 1, 1, 1], b));
    let mut g = Graph::new();
    let x = g.input(Tensor::from_vec([n, 1, 1, 1], xs.to_vec())?);
    let y = g.input(Tensor::from_vec([n, 1, 1, 1], ys.to_vec())?);
    let mut ctx = Ctx::new(&mut g, &store, Some("micro."));
    let pred = ctx.conv("micro", x, 1, 0)?;
    let loss = g.mse(pred, y)?;
    let grads = g.backward(loss)?.named(&g);
    let get = |name: &str| grads.iter().find(|(n, _)| n == name).map(|(_, t)| t.data()[0]).unwrap_or(0.0);
    Ok((g.value(loss).data()[0], [get("micro.weight"), get("micro.bias")]))
}
