use maskguide::brushnet::*;
use maskguide::controlnet::{init_control, make_edge_condition, perturb_zero_convs, ControlInput, GuidanceOptions, CONTROL};
use maskguide::diffusion::autoencoder::ENCODER_RECEPTIVE_RADIUS;
use maskguide::diffusion::unet::{decoder_shapes, tap_shapes};
use maskguide::diffusion::*;
use maskguide::mask_ops::{build_mask_pyramid, downsample_cubic, BinaryMask};
use maskguide::Error;
use maskguide_nn::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn checkpoint(perturb: bool) -> ModelCheckpoint {
    let cfg = ModelConfig::compact(Geometry::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut params = ParamStore::new();
    init_autoencoder(&mut params, &cfg, &mut rng);
    init_base(&mut params, &cfg, &mut rng);
    init_control(&mut params, &cfg, &mut rng).unwrap();
    init_inpaint(&mut params, &cfg).unwrap();
    if perturb {
        perturb_zero_convs(&mut params, CONTROL, 0.05, &mut rng);
        perturb_zero_convs(&mut params, INPAINT, 0.05, &mut rng);
    }
    ModelCheckpoint::new(cfg, params)
}

fn image(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b): ([f32; 3], [f32; 3]) = (rng.gen(), rng.gen());
    ImageTensor::from_fn(128, 128, |y, x| if (y / 16 + x / 16) % 2 == 0 { a } else { b }).unwrap()
}

fn left_half() -> BinaryMask {
    BinaryMask::from_fn(128, 128, |_, x| x < 64)
}

#[test]
fn branch_input_has_the_nine_channel_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn([2, 4, 16, 16], 1.0, &mut rng);
    let m = Tensor::randn([2, 4, 16, 16], 1.0, &mut rng);
    let hole = BinaryMask::from_fn(128, 128, |y, x| (y as i64 - 30).pow(2) + (x as i64 - 70).pow(2) < 900);
    let bi = build_branch_input(&x, &m, &hole, 16).unwrap();
    assert_eq!(bi.tensor().shape(), [2, BRANCH_CHANNELS, 16, 16]);
    assert_eq!(BRANCH_CHANNELS, 9);
    let small = downsample_cubic(&hole.to_soft(), 16, 16).unwrap();
    let t = bi.tensor();
    for n in 0..2 {
        for c in 0..9 {
            for p in 0..256 {
                let got = t.data()[((n * 9 + c) * 256) + p];
                let want = match c {
                    0..=3 => x.data()[(n * 4 + c) * 256 + p],
                    4..=7 => m.data()[(n * 4 + c - 4) * 256 + p],
                    _ => small.values()[p],
                };
                assert_eq!(got.to_bits(), want.to_bits(), "item {n} channel {c} pixel {p}");
            }
        }
    }
}

#[test]
fn branch_input_rejects_mismatches() {
    let x = Tensor::zeros([1, 4, 16, 16]);
    let hole = BinaryMask::zeros(128, 128);
    assert!(build_branch_input(&x, &Tensor::zeros([1, 4, 8, 8]), &hole, 16).is_err());
    assert!(build_branch_input(&x, &x, &hole, 8).is_err());
    assert!(build_branch_input(&Tensor::zeros([1, 3, 16, 16]), &Tensor::zeros([1, 3, 16, 16]), &hole, 16).is_err());
    assert!(build_branch_input(&x, &x, &BinaryMask::zeros(8, 8), 16).is_err());
}

#[test]
fn masked_latent_examples() {
    let ckpt = checkpoint(false);
    let img = image(2);
    let none = make_masked_image_latent(&ckpt.params, &img, &BinaryMask::zeros(128, 128)).unwrap();
    assert!(none.tensor().bit_eq(encode_image(&ckpt.params, &img).unwrap().tensor()));

    let all = make_masked_image_latent(&ckpt.params, &img, &BinaryMask::ones(128, 128)).unwrap();
    let grey = ImageTensor::from_fn(128, 128, |_, _| [HOLE_FILL; 3]).unwrap();
    assert!(all.tensor().bit_eq(encode_image(&ckpt.params, &grey).unwrap().tensor()));

    // Latent cells whose receptive field stays right of the hole are unchanged.
    let half = make_masked_image_latent(&ckpt.params, &img, &left_half()).unwrap();
    let first_clean = (64 + ENCODER_RECEPTIVE_RADIUS).div_ceil(DOWNSAMPLE_FACTOR);
    assert!(first_clean < 16);
    let (a, b) = (half.tensor(), none.tensor());
    for c in 0..4 {
        for y in 0..16 {
            for x in first_clean..16 {
                let k = (c * 16 + y) * 16 + x;
                assert_eq!(a.data()[k].to_bits(), b.data()[k].to_bits(), "c{c} ({y},{x})");
            }
        }
    }
    assert!(make_masked_image_latent(&ckpt.params, &img, &BinaryMask::zeros(64, 64)).is_err());
}

fn branch_input(seed: u64) -> BranchInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn([1, 4, 16, 16], 1.0, &mut rng);
    let m = Tensor::randn([1, 4, 16, 16], 1.0, &mut rng);
    build_branch_input(&x, &m, &left_half(), 16).unwrap()
}

#[test]
fn fresh_branch_residuals_are_zero_and_shaped_like_the_base() {
    let ckpt = checkpoint(false);
    let res = branch_forward(&ckpt.params, &branch_input(3), &[20]).unwrap();
    assert_eq!(res.as_slice().len(), 25);
    assert!(res.is_all_zero());
    let enc: Vec<_> = res.encoder().iter().map(|t| t.shape()).collect();
    let dec: Vec<_> = res.decoder().iter().map(|t| t.shape()).collect();
    assert_eq!(enc, tap_shapes(&ckpt.config, 1, 16));
    assert_eq!(dec, decoder_shapes(&ckpt.config, 1, 16));
}

#[test]
fn branch_is_deterministic_and_text_free() {
    let ckpt = checkpoint(true);
    let bi = branch_input(4);
    let a = branch_forward(&ckpt.params, &bi, &[7]).unwrap();
    let b = branch_forward(&ckpt.params, &bi, &[7]).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.is_all_zero());
    let inpaint: Vec<&str> = ckpt.params.names().filter(|n| n.starts_with(INPAINT)).collect();
    assert!(!inpaint.is_empty());
    assert!(inpaint.iter().all(|n| !n.contains("text")), "{inpaint:?}");
    assert!(ckpt.params.names().any(|n| n.starts_with("base.") && n.contains("text")));
}

#[test]
fn branch_rejects_wrong_channel_count() {
    let ckpt = checkpoint(false);
    let mut g = maskguide_nn::Graph::new();
    let x = g.input(Tensor::zeros([1, 8, 16, 16]));
    let mut ctx = maskguide::diffusion::layers::Ctx::new(&mut g, &ckpt.params, None);
    assert!(matches!(branch(&mut ctx, x, &[0]), Err(Error::Shape(_))));
}

#[test]
fn paste_back_without_feather_is_exact() {
    let (gen, orig) = (image(5), image(6));
    let out = paste_back(&gen, &orig, &BinaryMask::ones(128, 128), 0).unwrap();
    assert!(out.tensor().bit_eq(gen.tensor()));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let hole = BinaryMask::new(128, 128, (0..128 * 128).map(|_| rng.gen_bool(0.4) as u8).collect()).unwrap();
    let out = paste_back(&gen, &orig, &hole, 0).unwrap();
    for y in 0..128 {
        for x in 0..128 {
            let want = if hole.get(y, x) { gen.pixel(y, x) } else { orig.pixel(y, x) };
            assert_eq!(out.pixel(y, x).map(f32::to_bits), want.map(f32::to_bits));
        }
    }
}

#[test]
fn feathered_half_plane_matches_box_blur_oracle() {
    let gen = ImageTensor::from_fn(128, 128, |_, _| [1.0; 3]).unwrap();
    let orig = ImageTensor::from_fn(128, 128, |_, _| [0.0; 3]).unwrap();
    let hole = BinaryMask::from_fn(128, 128, |_, x| x >= 64);
    let out = paste_back(&gen, &orig, &hole, 2).unwrap();
    // Along a row the weight is the share of the 5-pixel window inside the
    // hole; columns do not change along y so the vertical pass is a no-op.
    for x in 0..128usize {
        let inside = (x.saturating_sub(2)..=(x + 2).min(127)).filter(|&k| k >= 64).count();
        let window = (x.saturating_sub(2)..=(x + 2).min(127)).count();
        let want = inside as f32 / window as f32;
        for y in [0, 1, 64, 127] {
            assert!((out.pixel(y, x)[0] - want).abs() < 1e-6, "({y},{x})");
        }
    }
    let band = (0..128).filter(|&x| {
        let v = out.pixel(10, x)[0];
        v > 0.0 && v < 1.0
    });
    assert_eq!(band.collect::<Vec<_>>(), vec![62, 63, 64, 65]);
}

#[test]
fn feather_edge_cases() {
    assert!(feather(&BinaryMask::ones(20, 20), 3).values().iter().all(|&v| v == 1.0));
    assert!(feather(&BinaryMask::zeros(20, 20), 3).values().iter().all(|&v| v == 0.0));
    let m = BinaryMask::from_fn(20, 20, |y, x| y > 5 && x < 12);
    assert_eq!(feather(&m, 0), m.to_soft());
    assert!(paste_back(&image(1), &image(2), &BinaryMask::zeros(64, 64), 0).is_err());
}

#[test]
fn empty_hole_with_paste_back_returns_the_input() {
    let ckpt = checkpoint(true);
    let img = image(8);
    let cfg = InpaintConfig { steps: 3, ..Default::default() };
    let out = inpaint_sample(&ckpt, &img, &BinaryMask::zeros(128, 128), &embed_prompt("x"), None, &cfg).unwrap();
    assert!(out.image.tensor().bit_eq(img.tensor()));
}

#[test]
fn inpainting_is_deterministic() {
    let ckpt = checkpoint(true);
    let img = image(9);
    let cfg = InpaintConfig { steps: 3, seed: 12, paste_back: false, ..Default::default() };
    let run = || inpaint_sample(&ckpt, &img, &left_half(), &embed_prompt("vase"), None, &cfg).unwrap().image;
    assert!(run().tensor().bit_eq(run().tensor()));
}

#[test]
fn fresh_branch_matches_base_sampling() {
    let ckpt = checkpoint(false);
    let sched = ckpt.config.schedule.build().unwrap();
    let text = embed_prompt("stool");
    let cfg = InpaintConfig { steps: 5, seed: 13, paste_back: false, ..Default::default() };
    let inpainted = inpaint_sample(&ckpt, &image(10), &left_half(), &text, None, &cfg).unwrap().latent;
    let base = sample_base(&ckpt.params, &sched, &text, [1, 4, 16, 16], 5, SamplerMode::Ddim, &mut ChaCha8Rng::seed_from_u64(13))
        .unwrap();
    assert_eq!(tensor_hash(&inpainted), tensor_hash(&base));
}

#[test]
fn guided_control_inside_inpainting_ignores_condition_outside_the_product() {
    let ckpt = checkpoint(true);
    let img = image(11);
    let product = BinaryMask::from_fn(128, 128, |y, x| y < 40 && x < 40);
    let hole = product.not();
    let pyr = build_mask_pyramid(&product, 16).unwrap();
    let cond = make_edge_condition(&img, 0.1).to_tensor();
    let mut changed = cond.clone();
    for y in 96..128 {
        for x in 96..128 {
            changed.data_mut()[y * 128 + x] = 1.0;
        }
    }
    let opts = GuidanceOptions::default();
    let cfg = InpaintConfig { steps: 3, seed: 3, paste_back: false, ..Default::default() };
    let run = |c: &Tensor, guided: bool| {
        let control = ControlInput { cond: c, pyramid: guided.then_some(&pyr), options: &opts };
        tensor_hash(&inpaint_sample(&ckpt, &img, &hole, &embed_prompt("bag"), Some(control), &cfg).unwrap().latent)
    };
    assert_eq!(run(&cond, true), run(&changed, true));
    assert_ne!(run(&cond, false), run(&changed, false));
    assert_ne!(run(&cond, true), run(&cond, false));
}

#[test]
fn geometry_mismatch_is_reported() {
    let ckpt = checkpoint(false);
    let small = ImageTensor::from_fn(64, 64, |_, _| [0.5; 3]).unwrap();
    let err = inpaint_sample(&ckpt, &small, &BinaryMask::zeros(64, 64), &embed_prompt(""), None, &InpaintConfig::default());
    assert!(matches!(err, Err(Error::Geometry(_))));
}
