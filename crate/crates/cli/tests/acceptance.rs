//! Acceptance run: one line per criterion, nonzero exit if any fails.
//!
//! The trained checkpoints behind criteria 9 and 10 are cached under the
//! cargo target tmpdir, keyed by a hash of the library sources, so only the
//! first run after a model change pays for training.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskguide::baselines::{blended_sample, latent_mask, BlendConfig, BlendMode};
use maskguide::brushnet::{build_branch_input, paste_back, BRANCH_CHANNELS, INPAINT};
use maskguide::controlnet::{make_edge_condition, ControlInput, GuidanceOptions, CONTROL};
use maskguide::diffusion::checkpoint::sha256_hex;
use maskguide::diffusion::{add_noise, embed_prompt, tensor_hash, Geometry, ModelCheckpoint, ModelConfig, SamplerMode};
use maskguide::finetune::train::micro_model_gradient;
use maskguide::finetune::{self, eval_compare, gen_scene, train_arms, Branch, EvalConfig, ExperimentConfig, TrainConfig, TrainLog};
use maskguide::mask_ops::*;
use maskguide_cli::config::RunConfig;
use maskguide_cli::pipeline;
use maskguide_cli::selfcheck::{self, build_fixture, control_sample, make_fixtures};
use maskguide_nn::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// Criterion 1.

fn se_points(se: &StructuringElement) -> Vec<(isize, isize)> {
    let k = se.size() as isize;
    let mut pts = Vec::new();
    for i in 0..k {
        for j in 0..k {
            if se.shape()[(i * k + j) as usize] == 1 {
                pts.push((i - k / 2, j - k / 2));
            }
        }
    }
    pts
}

type Set = HashSet<(isize, isize)>;

fn set_of(m: &BinaryMask) -> Set {
    let mut s = Set::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y as isize, x as isize));
            }
        }
    }
    s
}

fn set_dilate(a: &Set, b: &[(isize, isize)], n: isize) -> Set {
    let mut out = Set::new();
    for &(y, x) in a {
        for &(dy, dx) in b {
            let p = (y + dy, x + dx);
            if p.0 >= 0 && p.1 >= 0 && p.0 < n && p.1 < n {
                out.insert(p);
            }
        }
    }
    out
}

fn set_erode(a: &Set, b: &[(isize, isize)], n: isize) -> Set {
    let mut out = Set::new();
    for y in 0..n {
        for x in 0..n {
            if b.iter().all(|&(dy, dx)| a.contains(&(y + dy, x + dx))) {
                out.insert((y, x));
            }
        }
    }
    out
}

fn morphology() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let elements = [StructuringElement::square(3).map_err(err)?, StructuringElement::cross(5).map_err(err)?];
    let mut mismatches = 0;
    for _ in 0..1000 {
        let density = rng.gen_range(0.1..0.9);
        let v: Vec<u8> = (0..32 * 32).map(|_| rng.gen_bool(density) as u8).collect();
        let m = BinaryMask::new(32, 32, v).map_err(err)?;
        let a = set_of(&m);
        for se in &elements {
            let b = se_points(se);
            let d = set_dilate(&a, &b, 32);
            let e = set_erode(&a, &b, 32);
            let want = [
                e.clone(),
                d.clone(),
                set_dilate(&e, &b, 32),
                set_erode(&d, &b, 32),
            ];
            let got = [erode(&m, se), dilate(&m, se), open(&m, se), close(&m, se)];
            for (g, w) in got.iter().zip(&want) {
                mismatches += set_of(g).symmetric_difference(w).count();
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(mismatches == 0, format!("{mismatches} pixel mismatches"))?;
    ensure(secs < 30.0, format!("took {secs:.1}s"))?;
    Ok(format!("8000 comparisons, 0 mismatches, {secs:.1}s"))
}

// Criteria 2, 3, 4.

fn suite(r: maskguide::Result<selfcheck::SuiteResult>) -> Outcome {
    let r = r.map_err(err)?;
    if r.passed {
        Ok(r.detail)
    } else {
        Err(r.detail)
    }
}

// Criterion 5.

fn locality(ckpt: &ModelCheckpoint) -> Outcome {
    let scene = gen_scene(17);
    // Kept inside one cell of the coarsest level so most of the frame is zero
    // on all four levels.
    let product = BinaryMask::from_fn(128, 128, |y, x| y < 40 && x < 40);
    let pyr = build_mask_pyramid(&product, 16).map_err(err)?;
    let cond = make_edge_condition(&scene.image, 0.2).to_tensor();
    let mut changed = cond.clone();
    let mut n = 0;
    for y in 0..128 {
        for x in 0..128 {
            if pyr.levels().iter().enumerate().all(|(k, l)| l.get(y / (8 << k), x / (8 << k)) == 0.0) {
                changed.data_mut()[y * 128 + x] = 1.0 - cond.data()[y * 128 + x];
                n += 1;
            }
        }
    }
    ensure(n > 1000, format!("only {n} perturbable pixels"))?;
    let opts = GuidanceOptions::default();
    let text = embed_prompt(&scene.prompt);
    let run = |c: &Tensor, p: Option<&MaskPyramid>| {
        control_sample(ckpt, &text, Some(ControlInput { cond: c, pyramid: p, options: &opts }), 20, 9).map(|t| tensor_hash(&t))
    };
    let (a, b) = (run(&cond, Some(&pyr)).map_err(err)?, run(&changed, Some(&pyr)).map_err(err)?);
    ensure(a == b, format!("guided outputs differ: {} vs {}", &a[..16], &b[..16]))?;
    let (ua, ub) = (run(&cond, None).map_err(err)?, run(&changed, None).map_err(err)?);
    ensure(ua != ub, "the perturbation does not affect even the unguided run")?;
    Ok(format!("{n} pixels perturbed, guided hash {}", &a[..16]))
}

// Criterion 6.

fn nine_channels() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::randn([1, 4, 16, 16], 1.0, &mut rng);
    let m = Tensor::randn([1, 4, 16, 16], 1.0, &mut rng);
    let hole = gen_scene(6).instance_mask.not();
    let bi = build_branch_input(&x, &m, &hole, 16).map_err(err)?;
    let t = bi.tensor();
    ensure(BRANCH_CHANNELS == 9 && t.shape() == [1, 9, 16, 16], format!("shape {:?}", t.shape()))?;
    let small = downsample_cubic(&hole.to_soft(), 16, 16).map_err(err)?;
    for c in 0..9 {
        for p in 0..256 {
            let want = match c {
                0..=3 => x.data()[c * 256 + p],
                4..=7 => m.data()[(c - 4) * 256 + p],
                _ => small.values()[p],
            };
            ensure(t.data()[c * 256 + p].to_bits() == want.to_bits(), format!("channel {c} pixel {p}"))?;
        }
    }
    Ok("4 noisy + 4 masked latent + 1 mask".into())
}

// Criterion 7.

fn preservation(ckpt: &ModelCheckpoint) -> Outcome {
    let scene = gen_scene(21);
    let hole = sample_instance_mask_hole(&scene);
    let mask = latent_mask(&hole.to_soft(), 16, BlendMode::Hard).map_err(err)?;
    let cfg = BlendConfig { mask: mask.clone(), denoise_strength: 1.0, mode: BlendMode::Hard, steps: 20, sampler: SamplerMode::Ddim, seed: 3 };
    let out = blended_sample(ckpt, &scene.image, &embed_prompt(&scene.prompt), &cfg).map_err(err)?;
    let sched = ckpt.config.schedule.build().map_err(err)?;
    for (k, step) in out.trace.iter().enumerate() {
        let known = match (step.t, &step.eps) {
            (Some(t), Some(eps)) => add_noise(&out.x0, eps, &[t], &sched).map_err(err)?,
            (None, None) => out.x0.clone(),
            _ => return Err(format!("step {k}: noise without timestep")),
        };
        for c in 0..4 {
            for p in 0..256 {
                if mask.values()[p] == 0.0 {
                    let i = c * 256 + p;
                    ensure(step.latent.data()[i].to_bits() == known.data()[i].to_bits(), format!("step {k} element {i}"))?;
                }
            }
        }
    }
    let generated = out.image;
    let pasted = paste_back(&generated, &scene.image, &hole, 0).map_err(err)?;
    let mut kept = 0;
    for y in 0..128 {
        for x in 0..128 {
            if !hole.get(y, x) {
                ensure(pasted.pixel(y, x).map(f32::to_bits) == scene.image.pixel(y, x).map(f32::to_bits), format!("pixel ({y},{x})"))?;
                kept += 1;
            }
        }
    }
    Ok(format!("{} steps, {kept} preserved pixels exact", out.trace.len()))
}

fn sample_instance_mask_hole(scene: &finetune::SyntheticScene) -> BinaryMask {
    finetune::sample_instance_mask(scene, 2).not()
}

// Criterion 8.

fn pyramid_geometry() -> Outcome {
    let paper = build_mask_pyramid(&BinaryMask::from_fn(512, 512, |y, x| (x + y) % 7 < 3), 64).map_err(err)?;
    let test = build_mask_pyramid(&gen_scene(8).instance_mask, 16).map_err(err)?;
    let sides = |p: &MaskPyramid| p.levels().iter().map(|l| l.height()).collect::<Vec<_>>();
    ensure(sides(&paper) == [64, 32, 16, 8], format!("paper sides {:?}", sides(&paper)))?;
    ensure(sides(&test) == [16, 8, 4, 2], format!("test sides {:?}", sides(&test)))?;
    for (fill, v) in [(false, 0.0), (true, 1.0)] {
        for (n, l) in [(512, 64), (128, 16)] {
            let p = build_mask_pyramid(&BinaryMask::from_fn(n, n, |_, _| fill), l).map_err(err)?;
            ensure(p.levels().iter().all(|lv| lv.values().iter().all(|&x| x == v)), format!("constant {v} at {n}"))?;
        }
    }
    Ok("64/32/16/8 and 16/8/4/2, constants exact".into())
}

// Criteria 9 and 10 share the trained models.

struct Trained {
    random: ModelCheckpoint,
    instance: ModelCheckpoint,
    stage1: TrainLog,
}

fn source_key() -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("..");
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![root.join("core/src"), root.join("nn/src")];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "rs") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(f.strip_prefix(&root).unwrap().to_string_lossy().as_bytes());
        bytes.extend(std::fs::read(f).unwrap());
    }
    sha256_hex(&bytes)[..16].to_string()
}

const AE_STEPS: usize = 300;
const BASE_STEPS: usize = 1500;
const STAGE_STEPS: usize = 1000;

fn trained() -> maskguide::Result<Trained> {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}", source_key()));
    let log_path = dir.join("stage1.json");
    if log_path.is_file() {
        let stage1 = serde_json::from_slice(&std::fs::read(&log_path).map_err(|e| maskguide::Error::io(&log_path, e))?)?;
        eprintln!("using cached models in {}", dir.display());
        return Ok(Trained {
            random: ModelCheckpoint::load(&dir.join("random"))?,
            instance: ModelCheckpoint::load(&dir.join("instance"))?,
            stage1,
        });
    }
    eprintln!("training models into {} (first run only)", dir.display());
    let mut ckpt = ModelCheckpoint::new(ModelConfig::compact(Geometry::Test), ParamStore::new());
    for (branch, steps) in [(Branch::Autoencoder, AE_STEPS), (Branch::Base, BASE_STEPS)] {
        let cfg = TrainConfig { steps, ..TrainConfig::defaults(branch) };
        finetune::train::train_with_progress(&mut ckpt, &cfg, |s, l| {
            if s % 100 == 0 {
                eprintln!("  {branch:?} {s} {l:.4}");
            }
        })?;
    }
    let arms = train_arms(&ckpt, &ExperimentConfig::new(STAGE_STEPS, STAGE_STEPS), |a, s, l| {
        if s % 100 == 0 {
            eprintln!("  {a} {s} {l:.4}");
        }
    })?;
    let stage1 = arms.stage1.expect("stage 1 requested");
    arms.random.save(&dir.join("random"))?;
    arms.instance.save(&dir.join("instance"))?;
    std::fs::write(&log_path, serde_json::to_vec(&stage1)?).map_err(|e| maskguide::Error::io(&log_path, e))?;
    Ok(Trained { random: arms.random, instance: arms.instance, stage1 })
}

fn gradients(trained: &maskguide::Result<Trained>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let xs: Vec<f32> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ys: Vec<f32> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (w, b) = (rng.gen_range(-1.0..1.0f32), rng.gen_range(-1.0..1.0f32));
        let (_, g) = micro_model_gradient(w, b, &xs, &ys).map_err(err)?;
        let loss = |w: f64, b: f64| xs.iter().zip(&ys).map(|(&x, &y)| (w * x as f64 + b - y as f64).powi(2)).sum::<f64>() / 8.0;
        let h = 1e-4;
        let (w, b) = (w as f64, b as f64);
        let fd = [(loss(w + h, b) - loss(w - h, b)) / (2.0 * h), (loss(w, b + h) - loss(w, b - h)) / (2.0 * h)];
        for (a, f) in g.iter().zip(fd) {
            worst = worst.max((*a as f64 - f).abs() / f.abs().max(1e-3));
        }
    }
    ensure(worst < 1e-3, format!("relative error {worst:.2e}"))?;
    let t = trained.as_ref().map_err(err)?;
    let (early, late) = (t.stage1.mean_loss(0..20), t.stage1.mean_loss(181..201));
    ensure(late < early, format!("loss around step 200 {late:.4} is not below the step-0 average {early:.4}"))?;
    Ok(format!("max relative error {worst:.1e}, inpaint loss {early:.4} -> {late:.4}"))
}

fn directional(trained: &maskguide::Result<Trained>) -> Outcome {
    let t = trained.as_ref().map_err(err)?;
    let cmp = eval_compare(&t.random, &t.instance, &EvalConfig::default()).map_err(err)?;
    let summary = format!(
        "instance {:.4} vs random {:.4} over {} scenes, wins/losses/ties {}/{}/{}, p = {:.4}",
        cmp.instance.mean, cmp.random.mean, cmp.instance.n, cmp.wins, cmp.losses, cmp.ties, cmp.p_value
    );
    ensure(cmp.instance.n >= 100, summary.clone())?;
    ensure(cmp.instance.mean < cmp.random.mean && cmp.p_value < 0.05, summary.clone())?;
    Ok(summary)
}

// Criterion 11.

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let ck = dir.path().join("ckpt");
    let reference = make_fixtures(&ck, 11).map_err(err)?.fingerprint();
    let cfg = RunConfig {
        checkpoint: Some(ck.clone()),
        image: Some(ck.join(selfcheck::FIXTURE_IMAGE)),
        mask: Some(ck.join(selfcheck::FIXTURE_MASK)),
        output: Some(dir.path().join("out.png")),
        prompt: "a marble counter".into(),
        steps: 5,
        control: maskguide_cli::config::ControlConfig {
            mode: maskguide_cli::config::ControlMode::Edge,
            ..Default::default()
        },
        ..Default::default()
    };
    let record = pipeline::generate(&cfg).map_err(err)?;
    let loaded = pipeline::RunRecord::load(&pipeline::record_path(&dir.path().join("out.png"))).map_err(err)?;
    let outcome = pipeline::replay(&loaded, Some(dir.path().join("replay.png"))).map_err(err)?;
    ensure(outcome.matches() && outcome.actual == record.output_sha256, "replayed hash differs")?;

    let mut files: Vec<PathBuf> = std::fs::read_dir(&ck).map_err(err)?.map(|e| e.unwrap().path()).collect();
    files.retain(|p| p.extension().is_some_and(|x| x == "bin" || x == "json"));
    files.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut trials = 0;
    for f in &files {
        let original = std::fs::read(f).map_err(err)?;
        for _ in 0..3 {
            let mut bytes = original.clone();
            let i = rng.gen_range(0..bytes.len());
            bytes[i] ^= 1 << rng.gen_range(0..8);
            std::fs::write(f, &bytes).map_err(err)?;
            // A flip that leaves the manifest meaning the same thing (an
            // exponent `e` becoming `E`, say) may load, but must load the
            // same weights.
            let outcome = match ModelCheckpoint::load(&ck) {
                Err(maskguide::Error::Checkpoint(_)) => true,
                Ok(loaded) => loaded.fingerprint() == reference,
                Err(_) => false,
            };
            std::fs::write(f, &original).map_err(err)?;
            ensure(outcome, format!("corruption of byte {i} in {} went unnoticed", f.display()))?;
            trials += 1;
        }
    }
    ensure(trials > 0, "no checkpoint files found")?;
    Ok(format!("replay hash {}, {trials} corruptions detected", &record.output_sha256[..16]))
}

fn main() {
    let fixture = build_fixture(0).expect("fixture checkpoint");
    let fresh_base = selfcheck::without_branch(&selfcheck::without_branch(&fixture, CONTROL), INPAINT);
    let started = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut record = |n: usize, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {n}: PASS  {d}"),
            Err(d) => println!("criterion {n}: FAIL  {d}"),
        }
        results.push((n, o));
    };
    record(1, morphology());
    record(2, suite(selfcheck::identity_suite(&fixture, 20)));
    record(3, suite(selfcheck::annihilation_suite(&fixture, 20)));
    record(4, suite(selfcheck::zero_init_suite(&fixture, 20)));
    record(5, locality(&fixture));
    record(6, nine_channels());
    record(7, preservation(&fresh_base));
    record(8, pyramid_geometry());
    let models = trained();
    record(9, gradients(&models));
    record(10, directional(&models));
    record(11, reproducibility());
    let failed: Vec<usize> = results.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed.len(), results.len(), started.elapsed().as_secs_f64());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
