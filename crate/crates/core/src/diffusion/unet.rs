//! The toy conditional U-Net and its layout tables.
//!
//! Encoder taps (injection points), with `L` the latent side:
//!
//! | tap | block            | side | width |
//! |-----|------------------|------|-------|
//! | 0   | conv_in          | L    | c0    |
//! | 1-2 | res, res         | L    | c0    |
//! | 3   | down conv        | L    | c1    |
//! | 4-5 | res, res         | L/2  | c1    |
//! | 6   | down conv        | L/2  | c2    |
//! | 7-8 | res, res         | L/4  | c2    |
//! | 9   | down conv        | L/4  | c3    |
//! | 10-11 | res, res       | L/8  | c3    |
//! | 12  | mid res          | L/8  | c3    |
//!
//! A down conv keeps its input resolution; the 2×2 average pool after it
//! moves the stream to the next level. Decoder block `j` consumes skip
//! [`DECODER_SKIP`]`[j]`, so every encoder tap except the mid block feeds
//! exactly one decoder block.

use maskguide_nn::{Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;

use super::layers::{init_res_block, timestep_embedding, Ctx, ResBlockSpec};
use super::model::{ModelConfig, LATENT_CHANNELS};
use crate::mask_ops::{INDEX_MAP, NUM_INJECTION_POINTS};
use crate::{Error, Result};

pub const NUM_DECODER_POINTS: usize = 12;
pub const DECODER_LEVEL: [usize; NUM_DECODER_POINTS] = [3, 3, 2, 2, 2, 1, 1, 1, 0, 0, 0, 0];
pub const DECODER_SKIP: [usize; NUM_DECODER_POINTS] = [11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0];
/// Taps that are down convolutions (followed by a pool).
const DOWN_TAPS: [usize; 3] = [3, 6, 9];

pub const BASE: &str = "base.";

pub fn tap_channels(ch: [usize; 4]) -> [usize; NUM_INJECTION_POINTS] {
    [ch[0], ch[0], ch[0], ch[1], ch[1], ch[1], ch[2], ch[2], ch[2], ch[3], ch[3], ch[3], ch[3]]
}

pub fn decoder_channels(ch: [usize; 4]) -> [usize; NUM_DECODER_POINTS] {
    DECODER_LEVEL.map(|l| ch[l])
}

/// `[N, C, side, side]` shape of each encoder tap for a latent side `l`.
pub fn tap_shapes(cfg: &ModelConfig, n: usize, l: usize) -> Vec<[usize; 4]> {
    let ch = tap_channels(cfg.unet_channels);
    (0..NUM_INJECTION_POINTS).map(|i| [n, ch[i], l >> INDEX_MAP[i], l >> INDEX_MAP[i]]).collect()
}

pub fn decoder_shapes(cfg: &ModelConfig, n: usize, l: usize) -> Vec<[usize; 4]> {
    let ch = decoder_channels(cfg.unet_channels);
    (0..NUM_DECODER_POINTS).map(|j| [n, ch[j], l >> DECODER_LEVEL[j], l >> DECODER_LEVEL[j]]).collect()
}

/// Which parts of the network [`init_unet`] creates.
#[derive(Clone, Copy, Debug)]
pub struct UnetParts {
    pub in_channels: usize,
    pub text: bool,
    pub decoder: bool,
    pub head: bool,
}

pub fn init_unet<R: Rng>(init: &mut Init<'_, R>, prefix: &str, cfg: &ModelConfig, parts: UnetParts) {
    let ch = cfg.unet_channels;
    let td = cfg.time_dim();
    let text_dim = parts.text.then_some(td);
    let res = |c_in, c_out| ResBlockSpec { c_in, c_out, time_dim: Some(td), text_dim, norm: true };
    let n = |s: &str| format!("{prefix}{s}");

    init.conv(&n("time_mlp.0"), ch[0], td, 1, 1.0);
    init.conv(&n("time_mlp.1"), td, td, 1, 1.0);
    if parts.text {
        init.conv(&n("text_proj"), cfg.text_dim, td, 1, 1.0);
    }
    init.conv(&n("conv_in"), parts.in_channels, ch[0], 3, 1.0);
    let taps = tap_channels(ch);
    for i in 1..12 {
        if DOWN_TAPS.contains(&i) {
            init.conv(&n(&format!("enc.{i}")), taps[i - 1], taps[i], 3, 1.0);
        } else {
            init_res_block(init, &n(&format!("enc.{i}")), res(taps[i - 1], taps[i]));
        }
    }
    init_res_block(init, &n("mid"), res(ch[3], ch[3]));
    if !parts.decoder {
        return;
    }
    let dec = decoder_channels(ch);
    let mut h = ch[3];
    for j in 0..NUM_DECODER_POINTS {
        if j > 0 && DECODER_LEVEL[j] != DECODER_LEVEL[j - 1] {
            init.conv(&n(&format!("dec.up.{}", DECODER_LEVEL[j - 1])), h, h, 3, 1.0);
        }
        init_res_block(init, &n(&format!("dec.{j}")), res(h + taps[DECODER_SKIP[j]], dec[j]));
        h = dec[j];
    }
    if parts.head {
        init.norm(&n("out_norm"), ch[0]);
        init.conv(&n("out_conv"), ch[0], LATENT_CHANNELS, 3, 1.0);
    }
}

/// Encoder outputs for one forward pass.
pub struct EncoderRun {
    /// The 13 tap features; tap 12 is the mid-block output.
    pub taps: Vec<Var>,
    pub temb: Var,
    pub text: Option<Var>,
}

/// Extra inputs for the encoder copy inside a branch.
#[derive(Default)]
pub struct EncoderHooks<'v> {
    /// Added to the `conv_in` output before tap 0.
    pub stem_extra: Option<Var>,
    /// One single-channel mask per pyramid level. When present, the stream
    /// is multiplied by the level mask at every tap before it is recorded
    /// and before it feeds the next block.
    pub stream_masks: Option<&'v [Var]>,
}

pub fn run_encoder(
    ctx: &mut Ctx<'_>,
    prefix: &str,
    x: Var,
    ts: &[usize],
    text_raw: Option<Var>,
    hooks: EncoderHooks<'_>,
) -> Result<EncoderRun> {
    let n = |s: &str| format!("{prefix}{s}");
    let c0 = ctx.store().require(&n("time_mlp.0.weight"))?.shape()[1];
    let sin = ctx.input(timestep_embedding(ts, c0));
    let mut temb = ctx.conv(&n("time_mlp.0"), sin, 1, 0)?;
    temb = ctx.g.silu(temb);
    temb = ctx.conv(&n("time_mlp.1"), temb, 1, 0)?;
    let temb = ctx.g.silu(temb);
    let text = match text_raw {
        Some(t) if ctx.has(&n("text_proj.weight")) => {
            let p = ctx.conv(&n("text_proj"), t, 1, 0)?;
            Some(ctx.g.silu(p))
        }
        _ => None,
    };

    let mut taps = Vec::with_capacity(NUM_INJECTION_POINTS);
    let mut h = ctx.conv_same(&n("conv_in"), x)?;
    if let Some(extra) = hooks.stem_extra {
        h = ctx.g.add(h, extra)?;
    }
    for i in 0..NUM_INJECTION_POINTS {
        if i > 0 {
            let name = if i == 12 { n("mid") } else { n(&format!("enc.{i}")) };
            h = if DOWN_TAPS.contains(&i) {
                ctx.conv_same(&name, h)?
            } else {
                ctx.res_block(&name, h, Some(temb), text)?
            };
        }
        if let Some(masks) = hooks.stream_masks {
            h = ctx.g.mul(h, masks[INDEX_MAP[i]])?;
        }
        taps.push(h);
        if DOWN_TAPS.contains(&i) {
            h = ctx.g.avg_pool2x(h)?;
        }
    }
    Ok(EncoderRun { taps, temb, text })
}

/// Runs the decoder blocks. `skips` are the 13 tap values (tap 12 is the
/// decoder input) after any injection. `dec_inject[j]`, when given, is added
/// to the output of block `j`. Returns the 12 block outputs as they were
/// before injection, plus the final stream.
pub fn run_decoder(
    ctx: &mut Ctx<'_>,
    prefix: &str,
    skips: &[Var],
    temb: Var,
    text: Option<Var>,
    dec_inject: &[Vec<Var>],
) -> Result<(Vec<Var>, Var)> {
    let mut h = skips[12];
    let mut outs = Vec::with_capacity(NUM_DECODER_POINTS);
    for j in 0..NUM_DECODER_POINTS {
        if j > 0 && DECODER_LEVEL[j] != DECODER_LEVEL[j - 1] {
            h = ctx.g.upsample2x(h);
            h = ctx.conv_same(&format!("{prefix}dec.up.{}", DECODER_LEVEL[j - 1]), h)?;
        }
        let cat = ctx.g.cat(&[h, skips[DECODER_SKIP[j]]])?;
        h = ctx.res_block(&format!("{prefix}dec.{j}"), cat, Some(temb), text)?;
        outs.push(h);
        for &r in dec_inject.get(j).map(Vec::as_slice).unwrap_or(&[]) {
            h = ctx.g.add(h, r)?;
        }
    }
    Ok((outs, h))
}

/// Residual bundles added inside the base denoiser. Each bundle is applied
/// in list order, so control residuals land before branch residuals when
/// pushed in that order.
#[derive(Default)]
pub struct Injection {
    /// 13-entry bundles for the encoder skips and the mid block.
    pub encoder: Vec<Vec<Var>>,
    /// 12-entry bundles for the decoder blocks.
    pub decoder: Vec<Vec<Var>>,
}

impl Injection {
    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty() && self.decoder.is_empty()
    }

    fn check(&self, g: &Graph, taps: &[Var], dec_shapes: &[[usize; 4]]) -> Result<()> {
        for bundle in &self.encoder {
            check_bundle(g, bundle, &taps.iter().map(|&t| g.value(t).shape()).collect::<Vec<_>>(), "encoder")?;
        }
        for bundle in &self.decoder {
            check_bundle(g, bundle, dec_shapes, "decoder")?;
        }
        Ok(())
    }
}

fn check_bundle(g: &Graph, bundle: &[Var], shapes: &[[usize; 4]], what: &str) -> Result<()> {
    if bundle.len() != shapes.len() {
        return Err(Error::Shape(format!(
            "{what} residuals: expected {} entries, got {}",
            shapes.len(),
            bundle.len()
        )));
    }
    for (i, (&r, want)) in bundle.iter().zip(shapes).enumerate() {
        let got = g.value(r).shape();
        if got != *want {
            return Err(Error::Shape(format!("{what} residual {i}: expected {want:?}, got {got:?}")));
        }
    }
    Ok(())
}

pub struct UnetOutput {
    pub eps: Var,
    /// The encoder taps before any residual was added.
    pub features: Vec<Var>,
}

/// Base denoiser forward with optional residual injection.
pub fn unet_forward(
    ctx: &mut Ctx<'_>,
    prefix: &str,
    x: Var,
    ts: &[usize],
    text_raw: Option<Var>,
    inj: &Injection,
) -> Result<UnetOutput> {
    let enc = run_encoder(ctx, prefix, x, ts, text_raw, EncoderHooks::default())?;
    let [n, _, l, _] = ctx.g.value(x).shape();
    let dec_shapes: Vec<[usize; 4]> = (0..NUM_DECODER_POINTS)
        .map(|j| {
            let c = ctx.store().get(&format!("{prefix}dec.{j}.conv2.weight")).map_or(0, |w| w.shape()[0]);
            [n, c, l >> DECODER_LEVEL[j], l >> DECODER_LEVEL[j]]
        })
        .collect();
    inj.check(ctx.g, &enc.taps, &dec_shapes)?;

    let mut skips = enc.taps.clone();
    for bundle in &inj.encoder {
        for (s, &r) in skips.iter_mut().zip(bundle) {
            *s = ctx.g.add(*s, r)?;
        }
    }
    let dec_inject: Vec<Vec<Var>> =
        (0..NUM_DECODER_POINTS).map(|j| inj.decoder.iter().map(|b| b[j]).collect()).collect();
    let (_, h) = run_decoder(ctx, prefix, &skips, enc.temb, enc.text, &dec_inject)?;
    let mut h = ctx.norm(&format!("{prefix}out_norm"), h)?;
    h = ctx.g.silu(h);
    let eps = ctx.conv_same(&format!("{prefix}out_conv"), h)?;
    Ok(UnetOutput { eps, features: enc.taps })
}

/// Fresh base denoiser parameters under `base.`.
pub fn init_base<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let mut init = Init { store, rng };
    let parts = UnetParts { in_channels: LATENT_CHANNELS, text: true, decoder: true, head: true };
    init_unet(&mut init, BASE, cfg, parts);
}

/// Residual bundles in tensor form, for inference.
#[derive(Clone, Copy, Default)]
pub struct Injected<'a> {
    /// 13 control residuals and their conditioning scale.
    pub control: Option<(&'a [Tensor], f32)>,
    /// 25 branch residuals (13 encoder, 12 decoder) and their scale.
    pub branch: Option<(&'a [Tensor], f32)>,
}

fn scaled_inputs(g: &mut Graph, ts: &[Tensor], scale: f32) -> Vec<Var> {
    ts.iter()
        .map(|t| {
            let v = g.input(t.clone());
            if scale == 1.0 {
                v
            } else {
                g.scale(v, scale)
            }
        })
        .collect()
}

/// Inference forward of the frozen base: returns the noise prediction and
/// the 13 encoder features.
pub fn denoiser_forward(
    params: &ParamStore,
    x_t: &Tensor,
    ts: &[usize],
    text: &Tensor,
    injected: Injected<'_>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mut inj = Injection::default();
    if let Some((res, s)) = injected.control {
        if res.len() != NUM_INJECTION_POINTS {
            return Err(Error::Shape(format!(
                "control residuals: expected {NUM_INJECTION_POINTS} entries, got {}",
                res.len()
            )));
        }
        inj.encoder.push(scaled_inputs(&mut g, res, s));
    }
    if let Some((res, s)) = injected.branch {
        let want = NUM_INJECTION_POINTS + NUM_DECODER_POINTS;
        if res.len() != want {
            return Err(Error::Shape(format!("branch residuals: expected {want} entries, got {}", res.len())));
        }
        let vars = scaled_inputs(&mut g, res, s);
        inj.encoder.push(vars[..NUM_INJECTION_POINTS].to_vec());
        inj.decoder.push(vars[NUM_INJECTION_POINTS..].to_vec());
    }
    let x = g.input(x_t.clone());
    let tx = g.input(text.clone());
    let mut ctx = Ctx::new(&mut g, params, None);
    let out = unet_forward(&mut ctx, BASE, x, ts, Some(tx), &inj)?;
    let eps = g.value(out.eps).clone();
    let features = out.features.iter().map(|&f| g.value(f).clone()).collect();
    Ok((eps, features))
}
