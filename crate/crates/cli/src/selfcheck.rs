//! Fixture checkpoints and the invariant suites run by `maskguide selfcheck`.

use std::path::Path;

use maskguide::brushnet::{init_inpaint, inpaint_sample, paste_back, InpaintConfig, INPAINT};
use maskguide::controlnet::{
    guided_denoise_step, init_control, make_edge_condition, perturb_zero_convs, ControlInput, GuidanceOptions, CONTROL,
};
use maskguide::diffusion::{
    init_autoencoder, init_base, sample_base, sampling_timesteps, tensor_hash, embed_prompt, Geometry, ModelCheckpoint,
    ModelConfig, SamplerMode, TextEmbedding, LATENT_CHANNELS,
};
use maskguide::finetune::{gen_scene, sample_instance_mask, SyntheticScene};
use maskguide::mask_ops::MaskPyramid;
use maskguide::{Error, Result};
use maskguide_nn::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Standard deviation given to the zero convolutions of fixture branches so
/// their residuals are non-trivial.
pub const FIXTURE_ZERO_STD: f32 = 0.05;

/// Untrained test-geometry checkpoint with every network present and both
/// branches' zero convolutions perturbed.
pub fn build_fixture(seed: u64) -> Result<ModelCheckpoint> {
    let cfg = ModelConfig::compact(Geometry::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    init_autoencoder(&mut params, &cfg, &mut rng);
    init_base(&mut params, &cfg, &mut rng);
    init_control(&mut params, &cfg, &mut rng)?;
    init_inpaint(&mut params, &cfg)?;
    perturb_zero_convs(&mut params, CONTROL, FIXTURE_ZERO_STD, &mut rng);
    perturb_zero_convs(&mut params, INPAINT, FIXTURE_ZERO_STD, &mut rng);
    Ok(ModelCheckpoint::new(cfg, params))
}

/// Sample inputs written next to the fixture checkpoint.
pub const FIXTURE_IMAGE: &str = "scene.png";
pub const FIXTURE_MASK: &str = "product_mask.png";

/// Saves the fixture checkpoint plus a scene image and its product mask.
pub fn make_fixtures(dir: &Path, seed: u64) -> Result<ModelCheckpoint> {
    let ckpt = build_fixture(seed)?;
    ckpt.save(dir)?;
    let scene = gen_scene(seed);
    crate::io::write_image(&dir.join(FIXTURE_IMAGE), &scene.image)?;
    crate::io::write_mask(&dir.join(FIXTURE_MASK), &scene.instance_mask)?;
    Ok(ckpt)
}

/// Copy of `ckpt` without any tensor under `prefix`.
pub fn without_branch(ckpt: &ModelCheckpoint, prefix: &str) -> ModelCheckpoint {
    let mut params = ckpt.params.clone();
    let names: Vec<String> = params.names().filter(|n| n.starts_with(prefix)).map(String::from).collect();
    for n in names {
        params.remove(&n);
    }
    ModelCheckpoint::new(ckpt.config.clone(), params)
}

/// `ckpt` with freshly initialised (all-zero output) control and inpaint
/// branches in place of whatever it held.
pub fn with_fresh_branches(ckpt: &ModelCheckpoint, seed: u64) -> Result<ModelCheckpoint> {
    let mut out = without_branch(&without_branch(ckpt, CONTROL), INPAINT);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_control(&mut out.params, &out.config, &mut rng)?;
    init_inpaint(&mut out.params, &out.config)?;
    Ok(out)
}

/// Reverse loop of the base denoiser with optional control, starting from
/// the same noise that [`sample_base`] draws for `seed`.
pub fn control_sample(
    ckpt: &ModelCheckpoint,
    text: &TextEmbedding,
    control: Option<ControlInput<'_>>,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let sched = ckpt.config.schedule.build()?;
    let l = ckpt.config.geometry.latent_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn([1, LATENT_CHANNELS, l, l], 1.0, &mut rng);
    let ts = sampling_timesteps(sched.len(), steps)?;
    let tx = text.to_tensor(1);
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied();
        x = guided_denoise_step(&x, t, t_prev, &tx, control, &ckpt.params, &sched, SamplerMode::Ddim, &mut rng)?;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Process exit code reported when this suite fails.
    pub code: i32,
}

fn hash_pair(name: &'static str, code: i32, a: &Tensor, b: &Tensor) -> SuiteResult {
    let (ha, hb) = (tensor_hash(a), tensor_hash(b));
    SuiteResult { name, passed: ha == hb, detail: format!("{} vs {}", &ha[..16], &hb[..16]), code }
}

struct Fixture {
    scene: SyntheticScene,
    text: TextEmbedding,
    cond: Tensor,
}

fn fixture_inputs() -> Result<Fixture> {
    let scene = gen_scene(7);
    let cond = make_edge_condition(&scene.image, 0.2).to_tensor();
    let text = embed_prompt(&scene.prompt);
    Ok(Fixture { scene, text, cond })
}

/// Full-sampling identity with an all-one pyramid.
pub fn identity_suite(ckpt: &ModelCheckpoint, steps: usize) -> Result<SuiteResult> {
    let f = fixture_inputs()?;
    let opts = GuidanceOptions::default();
    let ones = MaskPyramid::constant(ckpt.config.geometry.latent_size(), 1.0)?;
    let guided = ControlInput { cond: &f.cond, pyramid: Some(&ones), options: &opts };
    let plain = ControlInput { cond: &f.cond, pyramid: None, options: &opts };
    let a = control_sample(ckpt, &f.text, Some(guided), steps, 1)?;
    let b = control_sample(ckpt, &f.text, Some(plain), steps, 1)?;
    Ok(hash_pair("identity-mask", 10, &a, &b))
}

/// All-zero pyramid against the control branch detached.
pub fn annihilation_suite(ckpt: &ModelCheckpoint, steps: usize) -> Result<SuiteResult> {
    let f = fixture_inputs()?;
    let opts = GuidanceOptions::default();
    let zeros = MaskPyramid::constant(ckpt.config.geometry.latent_size(), 0.0)?;
    let guided = ControlInput { cond: &f.cond, pyramid: Some(&zeros), options: &opts };
    let a = control_sample(ckpt, &f.text, Some(guided), steps, 2)?;
    let b = control_sample(ckpt, &f.text, None, steps, 2)?;
    Ok(hash_pair("annihilation", 11, &a, &b))
}

/// Fresh control and inpaint branches leave base sampling unchanged.
pub fn zero_init_suite(ckpt: &ModelCheckpoint, steps: usize) -> Result<SuiteResult> {
    let fresh = with_fresh_branches(ckpt, 3)?;
    let f = fixture_inputs()?;
    let sched = fresh.config.schedule.build()?;
    let l = fresh.config.geometry.latent_size();
    let seed = 4;
    let base = sample_base(
        &fresh.params,
        &sched,
        &f.text,
        [1, LATENT_CHANNELS, l, l],
        steps,
        SamplerMode::Ddim,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let opts = GuidanceOptions::default();
    let control = ControlInput { cond: &f.cond, pyramid: None, options: &opts };
    let with_control = control_sample(&fresh, &f.text, Some(control), steps, seed)?;
    let hole = sample_instance_mask(&f.scene, 2).not();
    let icfg = InpaintConfig { steps, seed, paste_back: false, ..Default::default() };
    let with_branch = inpaint_sample(&fresh, &f.scene.image, &hole, &f.text, None, &icfg)?.latent;
    let c = hash_pair("zero-init", 12, &base, &with_control);
    let i = hash_pair("zero-init", 12, &base, &with_branch);
    Ok(SuiteResult {
        name: "zero-init",
        passed: c.passed && i.passed,
        detail: format!("control {}, inpaint {}", c.detail, i.detail),
        code: 12,
    })
}

/// Unfeathered paste-back keeps every preserved pixel of the original.
pub fn paste_back_suite(ckpt: &ModelCheckpoint, steps: usize) -> Result<SuiteResult> {
    let f = fixture_inputs()?;
    let hole = sample_instance_mask(&f.scene, 2).not();
    let icfg = InpaintConfig { steps, seed: 5, paste_back: false, ..Default::default() };
    let generated = inpaint_sample(ckpt, &f.scene.image, &hole, &f.text, None, &icfg)?.image;
    let out = paste_back(&generated, &f.scene.image, &hole, 0)?;
    let s = hole.height();
    let mut bad = 0;
    for y in 0..s {
        for x in 0..s {
            if !hole.get(y, x) && out.pixel(y, x).map(f32::to_bits) != f.scene.image.pixel(y, x).map(f32::to_bits) {
                bad += 1;
            }
        }
    }
    Ok(SuiteResult { name: "paste-back", passed: bad == 0, detail: format!("{bad} preserved pixels changed"), code: 13 })
}

/// Loads the checkpoint (integrity errors surface here) and runs all suites.
pub fn selfcheck(dir: &Path, steps: usize) -> Result<Vec<SuiteResult>> {
    let ckpt = ModelCheckpoint::load(dir)?;
    for prefix in [CONTROL, INPAINT] {
        if !ckpt.has_branch(prefix) {
            return Err(Error::Checkpoint(format!("selfcheck needs `{prefix}*` weights in {}", dir.display())));
        }
    }
    Ok(vec![
        identity_suite(&ckpt, steps)?,
        annihilation_suite(&ckpt, steps)?,
        zero_init_suite(&ckpt, steps)?,
        paste_back_suite(&ckpt, steps)?,
    ])
}
