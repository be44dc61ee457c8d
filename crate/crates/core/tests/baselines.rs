use maskguide::baselines::*;
use maskguide::diffusion::*;
use maskguide::mask_ops::{BinaryMask, SoftMask};
use maskguide_nn::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn checkpoint() -> ModelCheckpoint {
    let cfg = ModelConfig::compact(Geometry::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut params = ParamStore::new();
    init_autoencoder(&mut params, &cfg, &mut rng);
    init_base(&mut params, &cfg, &mut rng);
    ModelCheckpoint::new(cfg, params)
}

fn image() -> ImageTensor {
    ImageTensor::from_fn(128, 128, |y, x| [y as f32 / 127.0, x as f32 / 127.0, ((x + y) % 32) as f32 / 31.0]).unwrap()
}

fn sched() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn pair(seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::randn([1, 2, 2, 2], 1.0, &mut rng), Tensor::randn([1, 2, 2, 2], 1.0, &mut rng))
}

#[test]
fn all_one_mask_keeps_the_generated_latent() {
    let (gen, x0) = pair(1);
    let (out, _) = blended_step(&gen, &x0, &SoftMask::filled(2, 2, 1.0).unwrap(), Some(10), &sched(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(out.bit_eq(&gen));
}

#[test]
fn all_zero_mask_is_the_renoised_original() {
    let (gen, x0) = pair(2);
    let s = sched();
    let (out, eps) = blended_step(&gen, &x0, &SoftMask::filled(2, 2, 0.0).unwrap(), Some(10), &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let eps = eps.unwrap();
    assert!(eps.bit_eq(&Tensor::randn([1, 2, 2, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(5))));
    assert!(out.bit_eq(&add_noise(&x0, &eps, &[10], &s).unwrap()));
}

#[test]
fn half_mask_is_the_midpoint() {
    let (gen, x0) = pair(3);
    let s = sched();
    let (out, eps) = blended_step(&gen, &x0, &SoftMask::filled(2, 2, 0.5).unwrap(), Some(30), &s, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let eps = eps.unwrap();
    let ab = s.alpha_bars()[30];
    for i in 0..8 {
        let known = ab.sqrt() * x0.data()[i] as f64 + (1.0 - ab).sqrt() * eps.data()[i] as f64;
        let want = 0.5 * (gen.data()[i] as f64 + known);
        assert!((out.data()[i] as f64 - want).abs() < 1e-6);
    }
}

#[test]
fn clean_end_uses_the_original_without_drawing_noise() {
    let (gen, x0) = pair(4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (out, eps) = blended_step(&gen, &x0, &SoftMask::filled(2, 2, 0.0).unwrap(), None, &sched(), &mut rng).unwrap();
    assert!(eps.is_none());
    assert!(out.bit_eq(&x0));
    assert!(blended_step(&gen, &x0, &SoftMask::filled(3, 3, 0.0).unwrap(), None, &sched(), &mut rng).is_err());
}

proptest! {
    #[test]
    fn blending_is_monotone_in_the_mask(seed in any::<u64>(), a in 0.0f32..=1.0, b in 0.0f32..=1.0) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (gen, x0) = pair(seed);
        let s = sched();
        let run = |m: f32| blended_step(&gen, &x0, &SoftMask::filled(2, 2, m).unwrap(), Some(20), &s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (o_lo, eps) = run(lo);
        let (o_hi, _) = run(hi);
        let known = add_noise(&x0, &eps.unwrap(), &[20], &s).unwrap();
        for i in 0..8 {
            let dir = gen.data()[i] - known.data()[i];
            prop_assert!((o_hi.data()[i] - o_lo.data()[i]) * dir >= -1e-6);
            let (mn, mx) = (gen.data()[i].min(known.data()[i]), gen.data()[i].max(known.data()[i]));
            prop_assert!(o_lo.data()[i] >= mn - 1e-6 && o_lo.data()[i] <= mx + 1e-6);
        }
    }
}

fn left_mask(mode: BlendMode) -> SoftMask {
    latent_mask(&BinaryMask::from_fn(128, 128, |_, x| x < 64).to_soft(), 16, mode).unwrap()
}

fn config(mask: SoftMask, mode: BlendMode, strength: f64) -> BlendConfig {
    BlendConfig { mask, denoise_strength: strength, mode, steps: 6, sampler: SamplerMode::Ddim, seed: 17 }
}

#[test]
fn zero_strength_is_the_autoencoder_round_trip() {
    let ckpt = checkpoint();
    let out = blended_sample(&ckpt, &image(), &embed_prompt("x"), &config(left_mask(BlendMode::Hard), BlendMode::Hard, 0.0)).unwrap();
    assert!(out.trace.is_empty());
    assert!(out.image.tensor().bit_eq(round_trip(&ckpt.params, &image()).unwrap().tensor()));
}

#[test]
fn hard_mask_preserves_the_renoised_original_at_every_step() {
    let ckpt = checkpoint();
    let s = ckpt.config.schedule.build().unwrap();
    let mask = left_mask(BlendMode::Hard);
    assert!(mask.is_binary());
    let out = blended_sample(&ckpt, &image(), &embed_prompt("shelf"), &config(mask.clone(), BlendMode::Hard, 1.0)).unwrap();
    assert_eq!(out.trace.len(), 6);
    for step in &out.trace {
        let known = match (step.t, &step.eps) {
            (Some(t), Some(eps)) => add_noise(&out.x0, eps, &[t], &s).unwrap(),
            (None, None) => out.x0.clone(),
            _ => panic!("noise drawn without a timestep"),
        };
        for c in 0..4 {
            for p in 0..256 {
                if mask.values()[p] == 0.0 {
                    let k = c * 256 + p;
                    assert_eq!(step.latent.data()[k].to_bits(), known.data()[k].to_bits());
                }
            }
        }
    }
    assert_eq!(out.trace.last().unwrap().t, None);
}

#[test]
fn soft_mode_with_a_binary_mask_reproduces_hard_mode() {
    let ckpt = checkpoint();
    let mask = left_mask(BlendMode::Hard);
    let p = embed_prompt("rug");
    let hard = blended_sample(&ckpt, &image(), &p, &config(mask.clone(), BlendMode::Hard, 0.6)).unwrap();
    let soft = blended_sample(&ckpt, &image(), &p, &config(mask, BlendMode::Soft, 0.6)).unwrap();
    assert!(hard.image.tensor().bit_eq(soft.image.tensor()));
    for (a, b) in hard.trace.iter().zip(&soft.trace) {
        assert!(a.latent.bit_eq(&b.latent));
    }
}

#[test]
fn strength_selects_the_starting_step() {
    let ts = strength_timesteps(50, 20, 0.5).unwrap();
    assert!(ts.iter().all(|&t| t < 25));
    assert!(!ts.is_empty());
    assert!(strength_timesteps(50, 20, 0.0).unwrap().is_empty());
    assert_eq!(strength_timesteps(50, 20, 1.0).unwrap(), sampling_timesteps(50, 20).unwrap());
}

#[test]
fn config_validation() {
    let ckpt = checkpoint();
    let soft = left_mask(BlendMode::Soft);
    assert!(!soft.is_binary());
    let p = embed_prompt("");
    assert!(blended_sample(&ckpt, &image(), &p, &config(soft.clone(), BlendMode::Hard, 1.0)).is_err());
    assert!(blended_sample(&ckpt, &image(), &p, &config(soft, BlendMode::Soft, 1.5)).is_err());
    let wrong = SoftMask::filled(8, 8, 1.0).unwrap();
    assert!(blended_sample(&ckpt, &image(), &p, &config(wrong, BlendMode::Soft, 1.0)).is_err());
}
