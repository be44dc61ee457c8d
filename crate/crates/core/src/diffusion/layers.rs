//! Building blocks shared by the denoiser, its branches and the autoencoder.
//!
//! Layer widths are never passed around at forward time; they are read back
//! from the parameter shapes, so a block only needs its name.

use maskguide_nn::{Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;

use crate::Result;

/// Largest group count up to 8 that divides `c`.
pub fn norm_groups(c: usize) -> usize {
    (1..=8.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

/// Forward-pass context: a graph plus the parameters it binds.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: &'a ParamStore,
    trainable: Option<&'a str>,
}

impl<'a> Ctx<'a> {
    /// Parameters whose name starts with `trainable` receive gradients;
    /// everything else is bound frozen.
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, trainable: Option<&'a str>) -> Self {
        Self { g, store, trainable }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let train = self.trainable.is_some_and(|p| name.starts_with(p));
        Ok(self.g.param(self.store, name, train)?)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.input(t)
    }

    pub fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        Ok(self.g.conv2d(x, w, Some(b), stride, pad)?)
    }

    /// Stride-1 convolution with "same" padding.
    pub fn conv_same(&mut self, name: &str, x: Var) -> Result<Var> {
        let k = self.store.require(&format!("{name}.weight"))?.shape()[2];
        self.conv(name, x, 1, k / 2)
    }

    pub fn norm(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let c = self.g.value(x).shape()[1];
        Ok(self.g.group_norm(x, gamma, beta, norm_groups(c))?)
    }

    /// Residual block. `temb` is the already-activated time embedding and
    /// `text` the already-activated text projection, both `[N, D, 1, 1]`.
    /// Blocks initialised without normalisation skip the norm layers.
    pub fn res_block(&mut self, name: &str, x: Var, temb: Option<Var>, text: Option<Var>) -> Result<Var> {
        let normed = self.has(&format!("{name}.norm1.gamma"));
        let mut h = if normed { self.norm(&format!("{name}.norm1"), x)? } else { x };
        h = self.g.silu(h);
        h = self.conv_same(&format!("{name}.conv1"), h)?;
        if let Some(te) = temb {
            let tp = self.conv(&format!("{name}.time"), te, 1, 0)?;
            h = self.g.add(h, tp)?;
        }
        if let Some(tx) = text {
            let gamma = self.conv(&format!("{name}.film_scale"), tx, 1, 0)?;
            let beta = self.conv(&format!("{name}.film_shift"), tx, 1, 0)?;
            let hg = self.g.mul(h, gamma)?;
            h = self.g.add(h, hg)?;
            h = self.g.add(h, beta)?;
        }
        if normed {
            h = self.norm(&format!("{name}.norm2"), h)?;
        }
        h = self.g.silu(h);
        h = self.conv_same(&format!("{name}.conv2"), h)?;
        let skip = if self.has(&format!("{name}.skip.weight")) {
            self.conv(&format!("{name}.skip"), x, 1, 0)?
        } else {
            x
        };
        Ok(self.g.add(skip, h)?)
    }
}

/// Shape options for [`init_res_block`].
#[derive(Clone, Copy, Debug)]
pub struct ResBlockSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub time_dim: Option<usize>,
    pub text_dim: Option<usize>,
    pub norm: bool,
}

pub fn init_res_block<R: Rng>(init: &mut Init<'_, R>, name: &str, spec: ResBlockSpec) {
    let ResBlockSpec { c_in, c_out, time_dim, text_dim, norm } = spec;
    if norm {
        init.norm(&format!("{name}.norm1"), c_in);
        init.norm(&format!("{name}.norm2"), c_out);
    }
    init.conv(&format!("{name}.conv1"), c_in, c_out, 3, 1.0);
    if let Some(td) = time_dim {
        init.conv(&format!("{name}.time"), td, c_out, 1, 1.0);
    }
    if let Some(xd) = text_dim {
        init.conv(&format!("{name}.film_scale"), xd, c_out, 1, 0.5);
        init.conv(&format!("{name}.film_shift"), xd, c_out, 1, 0.5);
    }
    init.conv(&format!("{name}.conv2"), c_out, c_out, 3, 0.5);
    if c_in != c_out {
        init.conv(&format!("{name}.skip"), c_in, c_out, 1, 1.0);
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim, 1, 1]`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let mut row = vec![0.0f32; dim];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            row[i] = a.sin() as f32;
            row[half + i] = a.cos() as f32;
        }
        data.extend(row);
    }
    Tensor::from_vec([ts.len(), dim, 1, 1], data).expect("length matches shape")
}
