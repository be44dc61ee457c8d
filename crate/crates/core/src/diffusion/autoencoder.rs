//! Small convolutional autoencoder between RGB images and 4-channel latents.
//!
//! The encoder has no normalisation layers, so every latent cell depends only
//! on a bounded pixel neighbourhood ([`ENCODER_RECEPTIVE_RADIUS`]).

use maskguide_nn::{Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;

use super::layers::{init_res_block, Ctx, ResBlockSpec};
use super::model::{ImageTensor, LatentTensor, ModelConfig, DOWNSAMPLE_FACTOR, LATENT_CHANNELS};
use crate::{Error, Result};

pub const AE: &str = "autoencoder.";
pub const LATENT_SCALE: &str = "autoencoder.latent_scale";

/// Pixel radius beyond which an input pixel cannot affect a latent cell:
/// conv_in (1) + three stride-2 convs (1 + 2 + 4) + res block and output
/// conv at stride 8 (3 × 8).
pub const ENCODER_RECEPTIVE_RADIUS: usize = 1 + 1 + 2 + 4 + 3 * 8;

pub fn init_autoencoder<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) {
    let a = cfg.ae_channels;
    let mut init = Init { store, rng };
    let plain = |c| ResBlockSpec { c_in: c, c_out: c, time_dim: None, text_dim: None, norm: false };
    init.conv("autoencoder.enc.conv_in", 3, a[0], 3, 1.0);
    for i in 0..3 {
        init.conv(&format!("autoencoder.enc.down.{i}"), a[i], a[i + 1], 3, 1.0);
    }
    init_res_block(&mut init, "autoencoder.enc.res", plain(a[3]));
    init.conv("autoencoder.enc.out", a[3], LATENT_CHANNELS, 3, 1.0);
    init.conv("autoencoder.dec.conv_in", LATENT_CHANNELS, a[3], 3, 1.0);
    init_res_block(&mut init, "autoencoder.dec.res", plain(a[3]));
    for i in 0..3 {
        init.conv(&format!("autoencoder.dec.up.{i}"), a[3 - i], a[2 - i], 3, 1.0);
    }
    init.conv("autoencoder.dec.out", a[0], 3, 3, 1.0);
    init.tensor(LATENT_SCALE, [1, 1, 1, 1], 1.0);
}

/// Encodes images already mapped to `[-1, 1]`. With `scaled`, the output is
/// multiplied by the stored latent scale.
pub fn ae_encode(ctx: &mut Ctx<'_>, x: Var, scaled: bool) -> Result<Var> {
    let mut h = ctx.conv_same("autoencoder.enc.conv_in", x)?;
    for i in 0..3 {
        h = ctx.g.silu(h);
        h = ctx.conv(&format!("autoencoder.enc.down.{i}"), h, 2, 1)?;
    }
    h = ctx.res_block("autoencoder.enc.res", h, None, None)?;
    h = ctx.g.silu(h);
    let mut z = ctx.conv_same("autoencoder.enc.out", h)?;
    if scaled {
        let s = ctx.param(LATENT_SCALE)?;
        z = ctx.g.mul(z, s)?;
    }
    Ok(z)
}

/// Decodes to `[-1, 1]`-range images (unclamped). `z` is divided by the
/// latent scale first when `scaled` is set.
pub fn ae_decode(ctx: &mut Ctx<'_>, z: Var, scaled: bool) -> Result<Var> {
    let z = if scaled {
        let s = ctx.store().require(LATENT_SCALE)?.data()[0];
        ctx.g.scale(z, 1.0 / s)
    } else {
        z
    };
    let mut h = ctx.conv_same("autoencoder.dec.conv_in", z)?;
    h = ctx.res_block("autoencoder.dec.res", h, None, None)?;
    for i in 0..3 {
        h = ctx.g.silu(h);
        h = ctx.g.upsample2x(h);
        h = ctx.conv_same(&format!("autoencoder.dec.up.{i}"), h)?;
    }
    h = ctx.g.silu(h);
    ctx.conv_same("autoencoder.dec.out", h)
}

pub fn encode_image(params: &ParamStore, img: &ImageTensor) -> Result<LatentTensor> {
    let [_, _, h, w] = img.tensor().shape();
    if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 || h != w {
        return Err(Error::Geometry(format!(
            "encode_image needs a square image with side divisible by {DOWNSAMPLE_FACTOR}, got {h}x{w}"
        )));
    }
    let mut g = Graph::new();
    let x = g.input(img.tensor().map(|v| 2.0 * v - 1.0));
    let mut ctx = Ctx::new(&mut g, params, None);
    let z = ae_encode(&mut ctx, x, true)?;
    LatentTensor::new(g.value(z).clone())
}

pub fn decode_latent(params: &ParamStore, z: &LatentTensor) -> Result<ImageTensor> {
    let mut g = Graph::new();
    let zv = g.input(z.tensor().clone());
    let mut ctx = Ctx::new(&mut g, params, None);
    let y = ae_decode(&mut ctx, zv, true)?;
    ImageTensor::new(g.value(y).map(|v| (v + 1.0) * 0.5))
}

/// `decode(encode(img))`.
pub fn round_trip(params: &ParamStore, img: &ImageTensor) -> Result<ImageTensor> {
    decode_latent(params, &encode_image(params, img)?)
}

/// Peak signal-to-noise ratio in dB for `[0, 1]` images.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("psnr: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mse = a.sub(b)?.sq_norm() / a.numel().max(1) as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
