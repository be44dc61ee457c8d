use maskguide::controlnet::*;
use maskguide::diffusion::*;
use maskguide::mask_ops::{build_mask_pyramid, BinaryMask, MaskPyramid, INDEX_MAP};
use maskguide::Error;
use maskguide_nn::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(perturb: bool) -> (ModelConfig, ParamStore) {
    let cfg = ModelConfig::compact(Geometry::Test);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut params = ParamStore::new();
    init_base(&mut params, &cfg, &mut rng);
    init_control(&mut params, &cfg, &mut rng).unwrap();
    if perturb {
        perturb_zero_convs(&mut params, CONTROL, 0.05, &mut rng);
    }
    (cfg, params)
}

fn random_image(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::from_vec([1, 3, 128, 128], (0..3 * 128 * 128).map(|_| rng.gen::<f32>()).collect()).unwrap();
    ImageTensor::new(t).unwrap()
}

#[test]
fn constant_image_has_no_edges() {
    let img = ImageTensor::from_fn(128, 128, |_, _| [0.3, 0.6, 0.1]).unwrap();
    assert!(make_edge_condition(&img, 0.0).values().iter().all(|&v| v == 0.0));
}

#[test]
fn vertical_step_gives_a_two_column_line() {
    // A step between columns 63 and 64 has equal Sobel magnitude on both
    // sides, so the normalised response is 1 on exactly those two columns.
    let img = ImageTensor::from_fn(128, 128, |_, x| if x < 64 { [0.0; 3] } else { [1.0; 3] }).unwrap();
    let c = make_edge_condition(&img, DEFAULT_EDGE_THRESHOLD);
    for y in 0..128 {
        for x in 0..128 {
            let v = c.values()[y * 128 + x];
            let want = if x == 63 || x == 64 { 1.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-6, "({y},{x}) = {v}");
        }
    }
}

#[test]
fn edge_condition_stays_in_unit_range() {
    for seed in 0..100 {
        let c = make_edge_condition(&random_image(seed), DEFAULT_EDGE_THRESHOLD);
        assert!(c.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(c.values().iter().any(|&v| v == 1.0));
    }
}

fn inputs(seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::randn([1, 4, 16, 16], 1.0, &mut rng);
    let cond = make_edge_condition(&random_image(seed), 0.1).to_tensor();
    (x, cond, embed_prompt("teapot").to_tensor(1))
}

#[test]
fn fresh_branch_emits_zero_residuals_of_the_right_size() {
    let (_, params) = model(false);
    let (x, cond, text) = inputs(1);
    let res = control_forward(&params, &cond, &x, &[30], &text).unwrap();
    assert!(res.is_all_zero());
    for (i, r) in res.as_slice().iter().enumerate() {
        assert_eq!(r.shape()[2], 16 >> INDEX_MAP[i]);
        assert_eq!(r.shape()[3], 16 >> INDEX_MAP[i]);
    }
}

#[test]
fn control_forward_is_deterministic() {
    let (_, params) = model(true);
    let (x, cond, text) = inputs(2);
    let a = control_forward(&params, &cond, &x, &[10], &text).unwrap();
    let b = control_forward(&params, &cond, &x, &[10], &text).unwrap();
    assert!(a.bit_eq(&b));
    assert!(!a.is_all_zero());
}

#[test]
fn control_forward_rejects_mismatched_condition() {
    let (_, params) = model(false);
    let (x, _, text) = inputs(3);
    let err = control_forward(&params, &Tensor::zeros([1, 1, 64, 64]), &x, &[0], &text);
    assert!(matches!(err, Err(Error::Shape(_))));
}

fn residuals(channels: usize, seed: u64) -> ControlResiduals {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ControlResiduals::new(
        INDEX_MAP.iter().map(|&k| Tensor::randn([1, channels, 16 >> k, 16 >> k], 1.0, &mut rng)).collect(),
    )
    .unwrap()
}

#[test]
fn identity_and_zero_pyramids() {
    let r = residuals(3, 4);
    let ones = apply_mask_guidance(&r, &MaskPyramid::constant(16, 1.0).unwrap()).unwrap();
    assert!(ones.bit_eq(&r));
    let zeros = apply_mask_guidance(&r, &MaskPyramid::constant(16, 0.0).unwrap()).unwrap();
    assert!(zeros.is_all_zero());
}

#[test]
fn half_plane_guidance_matches_elementwise_oracle() {
    let r = residuals(2, 5);
    let mask = BinaryMask::from_fn(128, 128, |_, x| x < 64);
    let pyr = build_mask_pyramid(&mask, 16).unwrap();
    let out = apply_mask_guidance(&r, &pyr).unwrap();
    for i in 0..13 {
        let level = &pyr.levels()[INDEX_MAP[i]];
        let s = level.height();
        let (src, dst) = (&r.as_slice()[i], &out.as_slice()[i]);
        for c in 0..2 {
            for y in 0..s {
                for x in 0..s {
                    let k = (c * s + y) * s + x;
                    let m = level.get(y, x);
                    let want = src.data()[k] * m;
                    assert_eq!(dst.data()[k].to_bits(), want.to_bits());
                    if m == 1.0 {
                        assert_eq!(dst.data()[k], src.data()[k]);
                    }
                    if m == 0.0 {
                        assert_eq!(dst.data()[k], 0.0);
                    }
                }
            }
        }
    }
    // On the 4x4 level the step lands between columns 1 and 2.
    let l2 = &pyr.levels()[2];
    assert_eq!(l2.get(0, 0), 1.0);
    assert_eq!(l2.get(0, 3), 0.0);
    assert!(l2.get(0, 1) > 0.5 && l2.get(0, 1) < 1.0);
}

#[test]
fn size_mismatch_names_the_index() {
    let mut v = residuals(2, 6).into_vec();
    v[8] = Tensor::zeros([1, 2, 3, 3]);
    let err = apply_mask_guidance(&ControlResiduals::new(v).unwrap(), &MaskPyramid::constant(16, 1.0).unwrap());
    match err {
        Err(Error::Shape(msg)) => assert!(msg.contains("residual 8"), "{msg}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    assert!(ControlResiduals::new(vec![Tensor::zeros([1, 1, 16, 16]); 12]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_is_linear_and_leaves_input_alone(seed in any::<u64>(), a in -3.0f32..3.0, b in -3.0f32..3.0) {
        let r1 = residuals(2, seed);
        let r2 = residuals(2, seed ^ 0x9e37);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = BinaryMask::new(128, 128, (0..128 * 128).map(|_| rng.gen_bool(0.5) as u8).collect()).unwrap();
        let pyr = build_mask_pyramid(&mask, 16).unwrap();
        let before = r1.clone();
        let mixed = ControlResiduals::new(
            r1.as_slice().iter().zip(r2.as_slice()).map(|(x, y)| x.zip_map(y, |p, q| a * p + b * q).unwrap()).collect(),
        ).unwrap();
        let lhs = apply_mask_guidance(&mixed, &pyr).unwrap();
        let g1 = apply_mask_guidance(&r1, &pyr).unwrap();
        let g2 = apply_mask_guidance(&r2, &pyr).unwrap();
        prop_assert!(r1.bit_eq(&before));
        for ((l, p), q) in lhs.as_slice().iter().zip(g1.as_slice()).zip(g2.as_slice()) {
            for ((&lv, &pv), &qv) in l.data().iter().zip(p.data()).zip(q.data()) {
                let rv = a * pv + b * qv;
                prop_assert!((lv - rv).abs() <= 1e-5 * (1.0 + rv.abs()));
            }
        }
    }
}

fn run(params: &ParamStore, cfg: &ModelConfig, cond: &Tensor, pyr: Option<&MaskPyramid>, opts: &GuidanceOptions, steps: usize) -> String {
    let sched = cfg.schedule.build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut x = Tensor::randn([1, 4, 16, 16], 1.0, &mut rng);
    let text = embed_prompt("a chair").to_tensor(1);
    let ts = sampling_timesteps(sched.len(), steps).unwrap();
    for (k, &t) in ts.iter().enumerate() {
        let control = ControlInput { cond, pyramid: pyr, options: opts };
        x = guided_denoise_step(&x, t, ts.get(k + 1).copied(), &text, Some(control), params, &sched, SamplerMode::Ddim, &mut rng)
            .unwrap();
    }
    tensor_hash(&x)
}

#[test]
fn guided_sampling_is_reproducible() {
    let (cfg, params) = model(true);
    let (_, cond, _) = inputs(8);
    let pyr = build_mask_pyramid(&BinaryMask::from_fn(128, 128, |y, _| y < 80), 16).unwrap();
    let opts = GuidanceOptions::default();
    assert_eq!(run(&params, &cfg, &cond, Some(&pyr), &opts, 5), run(&params, &cfg, &cond, Some(&pyr), &opts, 5));
}

/// Corner product mask and a condition change confined to pixels whose
/// cell is zero on every pyramid level.
fn locality_setup() -> (MaskPyramid, Tensor, Tensor) {
    let product = BinaryMask::from_fn(128, 128, |y, x| y < 40 && x < 40);
    let pyr = build_mask_pyramid(&product, 16).unwrap();
    let dead = |y: usize, x: usize| {
        pyr.levels().iter().enumerate().all(|(k, l)| l.get(y / (8 << k), x / (8 << k)) == 0.0)
    };
    let (_, cond, _) = inputs(9);
    let mut changed = cond.clone();
    let mut n = 0;
    for y in 0..128 {
        for x in 0..128 {
            if dead(y, x) {
                changed.data_mut()[y * 128 + x] = 1.0 - cond.data()[y * 128 + x];
                n += 1;
            }
        }
    }
    assert!(n > 1000, "only {n} pixels are outside every level");
    (pyr, cond, changed)
}

#[test]
fn condition_changes_outside_the_mask_do_not_reach_the_output() {
    let (cfg, params) = model(true);
    let (pyr, cond, changed) = locality_setup();
    let opts = GuidanceOptions::default();
    assert_eq!(opts.placement, MaskPlacement::Stream);
    assert_eq!(run(&params, &cfg, &cond, Some(&pyr), &opts, 5), run(&params, &cfg, &changed, Some(&pyr), &opts, 5));
    // Unguided, the same change is visible.
    assert_ne!(run(&params, &cfg, &cond, None, &opts, 5), run(&params, &cfg, &changed, None, &opts, 5));
}

#[test]
fn masking_only_the_emitted_residuals_leaks_through_the_receptive_field() {
    let (cfg, params) = model(true);
    let (pyr, cond, changed) = locality_setup();
    let opts = GuidanceOptions { placement: MaskPlacement::OutputOnly, ..Default::default() };
    assert_ne!(run(&params, &cfg, &cond, Some(&pyr), &opts, 5), run(&params, &cfg, &changed, Some(&pyr), &opts, 5));
}

#[test]
fn rebinarized_guidance_uses_hard_levels() {
    let (cfg, params) = model(true);
    let (_, cond, _) = inputs(10);
    let soft = build_mask_pyramid(&BinaryMask::from_fn(128, 128, |_, x| x < 64), 16).unwrap();
    let hard = MaskPyramid::from_levels(soft.levels().iter().map(|l| l.threshold(0.5).to_soft()).collect()).unwrap();
    let opts = GuidanceOptions { rebinarize: Some(0.5), ..Default::default() };
    assert_eq!(
        run(&params, &cfg, &cond, Some(&soft), &opts, 3),
        run(&params, &cfg, &cond, Some(&hard), &GuidanceOptions::default(), 3)
    );
}
