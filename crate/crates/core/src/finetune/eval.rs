//! Held-out over-completion comparison between two inpainting checkpoints,
//! plus the two-arm training recipe that produces them.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::masks::{training_hole, MaskSamplerKind, DEFAULT_INSTANCE_DILATE};
use super::metric::{overcompletion_score, DEFAULT_BAND_PX};
use super::scene::{SceneCorpus, SyntheticScene};
use super::train::{train_with_progress, Branch, TrainConfig, TrainLog};
use crate::brushnet::{inpaint_batch, InpaintConfig, InpaintJob};
use crate::diffusion::{embed_prompt, ImageTensor, ModelCheckpoint, SamplerMode, TextEmbedding};
use crate::mask_ops::BinaryMask;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub scenes: usize,
    pub corpus_seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub band_px: usize,
    pub instance_dilate_px: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            corpus_seed: 0,
            steps: 20,
            batch: 10,
            band_px: DEFAULT_BAND_PX,
            instance_dilate_px: DEFAULT_INSTANCE_DILATE,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub n: usize,
    /// Fingerprint of the evaluated checkpoint.
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub random: MetricReport,
    pub instance: MetricReport,
    /// `random.mean − instance.mean`; positive favours instance training.
    pub mean_diff: f64,
    /// Scenes where the instance-trained model scored strictly lower.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided paired sign test, ties dropped.
    pub p_value: f64,
}

/// `P(X ≥ wins)` for `X ~ Binomial(wins + losses, 1/2)`. Returns 1 when there
/// are no untied pairs.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    if wins == 0 {
        1.0
    } else {
        b.sf(wins as u64 - 1)
    }
}

/// Scores `ckpt` on the held-out scenes: each background is regenerated
/// around the intact object and the escaping foreground is measured.
pub fn evaluate(ckpt: &ModelCheckpoint, label: &str, cfg: &EvalConfig) -> Result<MetricReport> {
    if cfg.scenes == 0 || cfg.batch == 0 {
        return Err(Error::Invalid("evaluation needs at least one scene and a positive batch".into()));
    }
    let size = ckpt.config.geometry.image_size();
    let scenes = SceneCorpus::new(cfg.corpus_seed).held_out(cfg.scenes, size);
    let inpaint = InpaintConfig { steps: cfg.steps, sampler: SamplerMode::Ddim, paste_back: false, ..Default::default() };
    let mut scores = Vec::with_capacity(scenes.len());
    for (chunk_idx, chunk) in scenes.chunks(cfg.batch).enumerate() {
        let images = ImageTensor::stack(&chunk.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
        let holes: Vec<BinaryMask> = chunk
            .iter()
            .map(|s| training_hole(MaskSamplerKind::Instance, s, 0, cfg.instance_dilate_px))
            .collect();
        let prompts: Vec<TextEmbedding> = chunk.iter().map(|s| embed_prompt(&s.prompt)).collect();
        let seeds: Vec<u64> =
            (0..chunk.len()).map(|i| cfg.seed.wrapping_add((chunk_idx * cfg.batch + i) as u64)).collect();
        let job = InpaintJob { images: &images, holes: &holes, prompts: &prompts, control: None, seeds: &seeds };
        let out = inpaint_batch(ckpt, &job, &inpaint)?;
        for (i, scene) in chunk.iter().enumerate() {
            scores.push(overcompletion_score(&out.image.item(i), scene, cfg.band_px)?);
        }
    }
    Ok(report(label, scores, ckpt.fingerprint()))
}

fn report(label: &str, scores: Vec<f64>, fingerprint: String) -> MetricReport {
    let n = scores.len();
    let mean = scores.iter().sum::<f64>() / n.max(1) as f64;
    MetricReport { label: label.to_string(), scores, mean, n, fingerprint }
}

/// Pairs per-scene scores of two reports evaluated on the same scenes.
pub fn compare(random: MetricReport, instance: MetricReport) -> Result<Comparison> {
    if random.n != instance.n {
        return Err(Error::Invalid(format!("reports cover {} and {} scenes", random.n, instance.n)));
    }
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for (r, i) in random.scores.iter().zip(&instance.scores) {
        match i.partial_cmp(r) {
            Some(std::cmp::Ordering::Less) => wins += 1,
            Some(std::cmp::Ordering::Greater) => losses += 1,
            _ => ties += 1,
        }
    }
    let mean_diff = random.mean - instance.mean;
    Ok(Comparison { p_value: sign_test(wins, losses), random, instance, mean_diff, wins, losses, ties })
}

pub fn eval_compare(random: &ModelCheckpoint, instance: &ModelCheckpoint, cfg: &EvalConfig) -> Result<Comparison> {
    compare(evaluate(random, "random", cfg)?, evaluate(instance, "instance", cfg)?)
}

/// Two-arm inpaint fine-tuning. A shared first stage trains on random masks;
/// each arm then continues from that state with its own mask sampler, so both
/// arms see the same number of steps, scenes and noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(stage1_steps: usize, stage2_steps: usize) -> Self {
        Self { stage1_steps, stage2_steps, train: TrainConfig::defaults(Branch::Inpaint) }
    }
}

pub struct ExperimentArms {
    pub random: ModelCheckpoint,
    pub instance: ModelCheckpoint,
    pub stage1: Option<TrainLog>,
    pub random_log: TrainLog,
    pub instance_log: TrainLog,
}

pub fn train_arms(
    base: &ModelCheckpoint,
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&str, usize, f32),
) -> Result<ExperimentArms> {
    let mut shared = base.clone();
    let stage1 = if cfg.stage1_steps > 0 {
        let c = TrainConfig { steps: cfg.stage1_steps, mask_sampler: MaskSamplerKind::Random, ..cfg.train.clone() };
        Some(train_with_progress(&mut shared, &c, |s, l| progress("stage1", s, l))?)
    } else {
        None
    };
    let stage2 = TrainConfig { steps: cfg.stage2_steps, seed: cfg.train.seed.wrapping_add(1), ..cfg.train.clone() };
    let mut random = shared.clone();
    let random_log = train_with_progress(
        &mut random,
        &TrainConfig { mask_sampler: MaskSamplerKind::Random, ..stage2.clone() },
        |s, l| progress("random", s, l),
    )?;
    let mut instance = shared;
    let instance_log = train_with_progress(
        &mut instance,
        &TrainConfig { mask_sampler: MaskSamplerKind::Instance, ..stage2 },
        |s, l| progress("instance", s, l),
    )?;
    Ok(ExperimentArms { random, instance, stage1, random_log, instance_log })
}

/// Convenience for callers that only hold scenes.
pub fn scene_prompts(scenes: &[SyntheticScene]) -> Vec<TextEmbedding> {
    scenes.iter().map(|s| embed_prompt(&s.prompt)).collect()
}
