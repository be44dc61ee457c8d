//! Forward and backward kernels over raw NCHW buffers.

use crate::tensor::{numel, Shape, Tensor};
use crate::{NnError, Result};

pub const GROUP_NORM_EPS: f32 = 1e-5;

/// `C = A · B` for row-major or strided operands, overwriting `C`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a` and `b` (checked by
    // the callers' shape logic) and `c` holds an `m × n` row-major matrix.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Self> {
        let [n, c_in, h, w] = x;
        let [c_out, wc_in, kh, kw] = weight;
        if wc_in != c_in {
            return Err(NnError::Shape(format!(
                "conv weight {weight:?} expects {wc_in} input channels, input is {x:?}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(NnError::Shape(format!(
                "conv kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {x:?}"
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, c_in, h, w, c_out, kh, kw, stride, pad, oh, ow })
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn out_shape(&self) -> Shape {
        [self.n, self.c_out, self.oh, self.ow]
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` into a `[C·KH·KW, N·OH·OW]` patch matrix.
fn im2col(x: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let cols = g.cols();
    let p = g.oh * g.ow;
    let mut out = vec![0.0f32; g.k() * cols];
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let src = &x[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[b * p + oy * g.ow..][..g.ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(cols_grad: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let cols = g.cols();
    let p = g.oh * g.ow;
    for ci in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for b in 0..g.n {
                    let dst = &mut dx[(b * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[b * p + oy * g.ow..][..g.ow];
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, &s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        b.expect_shape([1, g.c_out, 1, 1])?;
    }
    let p = g.oh * g.ow;
    let mut out = vec![0.0f32; numel(&g.out_shape())];
    if g.is_pointwise() {
        for b in 0..g.n {
            let xb = &x.data()[b * g.c_in * p..][..g.c_in * p];
            let ob = &mut out[b * g.c_out * p..][..g.c_out * p];
            gemm(g.c_out, g.c_in, p, weight.data(), g.c_in as isize, 1, xb, p as isize, 1, ob);
        }
    } else {
        let cols = im2col(x.data(), &g);
        let nc = g.cols();
        let mut mat = vec![0.0f32; g.c_out * nc];
        gemm(g.c_out, g.k(), nc, weight.data(), g.k() as isize, 1, &cols, nc as isize, 1, &mut mat);
        for b in 0..g.n {
            for o in 0..g.c_out {
                out[(b * g.c_out + o) * p..][..p].copy_from_slice(&mat[o * nc + b * p..][..p]);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.n {
            for (o, &bv) in bias.data().iter().enumerate() {
                for v in &mut out[(b * g.c_out + o) * p..][..p] {
                    *v += bv;
                }
            }
        }
    }
    Tensor::from_vec(g.out_shape(), out)
}

pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, pad)?;
    dy.expect_shape(g.out_shape())?;
    let (need_dx, need_dw, need_db) = need;
    let p = g.oh * g.ow;
    let nc = g.cols();
    let k = g.k();

    let db = need_db.then(|| {
        let mut db = vec![0.0f32; g.c_out];
        for b in 0..g.n {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += dy.data()[(b * g.c_out + o) * p..][..p].iter().sum::<f32>();
            }
        }
        Tensor::from_vec([1, g.c_out, 1, 1], db).expect("bias grad shape")
    });

    if g.is_pointwise() {
        let mut dw = need_dw.then(|| vec![0.0f32; g.c_out * g.c_in]);
        let mut dx = need_dx.then(|| vec![0.0f32; x.numel()]);
        let mut scratch = vec![0.0f32; g.c_out * g.c_in];
        for b in 0..g.n {
            let xb = &x.data()[b * g.c_in * p..][..g.c_in * p];
            let dyb = &dy.data()[b * g.c_out * p..][..g.c_out * p];
            if let Some(dw) = dw.as_mut() {
                // dW += dY_b · X_bᵀ
                gemm(g.c_out, p, g.c_in, dyb, p as isize, 1, xb, 1, p as isize, &mut scratch);
                for (a, s) in dw.iter_mut().zip(&scratch) {
                    *a += s;
                }
            }
            if let Some(dx) = dx.as_mut() {
                // dX_b = Wᵀ · dY_b
                let dxb = &mut dx[b * g.c_in * p..][..g.c_in * p];
                gemm(g.c_in, g.c_out, p, weight.data(), 1, g.c_in as isize, dyb, p as isize, 1, dxb);
            }
        }
        return Ok(ConvGrads {
            dx: dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
            dw: dw.map(|d| Tensor::from_vec(weight.shape(), d)).transpose()?,
            db,
        });
    }

    let mut dmat = vec![0.0f32; g.c_out * nc];
    for b in 0..g.n {
        for o in 0..g.c_out {
            dmat[o * nc + b * p..][..p].copy_from_slice(&dy.data()[(b * g.c_out + o) * p..][..p]);
        }
    }
    let dw = if need_dw {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![0.0f32; g.c_out * k];
        gemm(g.c_out, nc, k, &dmat, nc as isize, 1, &cols, 1, nc as isize, &mut dw);
        Some(Tensor::from_vec(weight.shape(), dw)?)
    } else {
        None
    };
    let dx = if need_dx {
        let mut dcols = vec![0.0f32; k * nc];
        gemm(k, g.c_out, nc, weight.data(), 1, k as isize, &dmat, nc as isize, 1, &mut dcols);
        let mut dx = vec![0.0f32; x.numel()];
        col2im(&dcols, &g, &mut dx);
        Some(Tensor::from_vec(x.shape(), dx)?)
    } else {
        None
    };
    Ok(ConvGrads { dx, dw, db })
}

/// Element strides of `b` when broadcast against an output of shape `out`.
fn broadcast_strides(out: Shape, b: Shape) -> Result<[usize; 4]> {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        if b[d] == out[d] {
            strides[d] = if b[d] == 1 { 0 } else { acc };
        } else if b[d] == 1 {
            strides[d] = 0;
        } else {
            return Err(NnError::Shape(format!("cannot broadcast {b:?} to {out:?}")));
        }
        acc *= b[d];
    }
    Ok(strides)
}

fn for_each_broadcast(out: Shape, b: Shape, mut f: impl FnMut(usize, usize)) -> Result<()> {
    let s = broadcast_strides(out, b)?;
    let [n, c, h, w] = out;
    let mut i = 0;
    for in_ in 0..n {
        for ic in 0..c {
            for ih in 0..h {
                let base = in_ * s[0] + ic * s[1] + ih * s[2];
                for iw in 0..w {
                    f(i, base + iw * s[3]);
                    i += 1;
                }
            }
        }
    }
    Ok(())
}

/// `a ⊕ b` where `b` broadcasts against `a` (size-1 axes repeat).
pub fn broadcast_binary(a: &Tensor, b: &Tensor, op: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, op);
    }
    let mut out = vec![0.0f32; a.numel()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(a.shape(), b.shape(), |i, j| out[i] = op(ad[i], bd[j]))?;
    Tensor::from_vec(a.shape(), out)
}

/// Sums `g` (shaped like the broadcast output) down to `target`'s shape.
pub fn reduce_to(g: &Tensor, target: Shape) -> Result<Tensor> {
    if g.shape() == target {
        return Ok(g.clone());
    }
    let mut out = vec![0.0f32; numel(&target)];
    let gd = g.data();
    for_each_broadcast(g.shape(), target, |i, j| out[j] += gd[i])?;
    Tensor::from_vec(target, out)
}

/// Product `g ⊙ other` reduced to `target`, with `other` broadcast against `g`.
pub fn reduce_product_to(g: &Tensor, other: &Tensor, target: Shape) -> Result<Tensor> {
    let prod = broadcast_binary(g, other, |a, b| a * b)?;
    reduce_to(&prod, target)
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |v, g| {
        let s = sigmoid(v);
        g * s * (1.0 + v * (1.0 - s))
    })
}

pub struct GroupNormOut {
    pub y: Tensor,
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<GroupNormOut> {
    let (n, c, h, w) = x.dims();
    if groups == 0 || c % groups != 0 {
        return Err(NnError::Shape(format!("{c} channels do not split into {groups} groups")));
    }
    gamma.expect_shape([1, c, 1, 1])?;
    beta.expect_shape([1, c, 1, 1])?;
    let cg = c / groups;
    let len = cg * h * w;
    let mut y = vec![0.0f32; x.numel()];
    let mut mean = vec![0.0f32; n * groups];
    let mut rstd = vec![0.0f32; n * groups];
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cg) * h * w;
            let xs = &x.data()[off..off + len];
            let m = xs.iter().map(|&v| v as f64).sum::<f64>() / len as f64;
            let var = xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + GROUP_NORM_EPS as f64).sqrt();
            mean[b * groups + gi] = m as f32;
            rstd[b * groups + gi] = r as f32;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                let s = off + ci * h * w;
                for k in s..s + h * w {
                    y[k] = (x.data()[k] - m as f32) * r as f32 * ga + be;
                }
            }
        }
    }
    Ok(GroupNormOut { y: Tensor::from_vec(x.shape(), y)?, mean, rstd })
}

pub struct GroupNormGrads {
    pub dx: Tensor,
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

pub fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f32],
    rstd: &[f32],
    groups: usize,
    dy: &Tensor,
) -> Result<GroupNormGrads> {
    let (n, c, h, w) = x.dims();
    let cg = c / groups;
    let hw = h * w;
    let len = (cg * hw) as f32;
    let mut dx = vec![0.0f32; x.numel()];
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for b in 0..n {
        for gi in 0..groups {
            let (m, r) = (mean[b * groups + gi], rstd[b * groups + gi]);
            let off = (b * c + gi * cg) * hw;
            let mut sum_dxhat = 0.0f32;
            let mut sum_dxhat_xhat = 0.0f32;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gamma.data()[ch];
                for k in off + ci * hw..off + (ci + 1) * hw {
                    let xhat = (x.data()[k] - m) * r;
                    let g = dy.data()[k];
                    dgamma[ch] += g * xhat;
                    dbeta[ch] += g;
                    sum_dxhat += g * ga;
                    sum_dxhat_xhat += g * ga * xhat;
                }
            }
            let (mean_d, mean_dx) = (sum_dxhat / len, sum_dxhat_xhat / len);
            for ci in 0..cg {
                let ga = gamma.data()[gi * cg + ci];
                for k in off + ci * hw..off + (ci + 1) * hw {
                    let xhat = (x.data()[k] - m) * r;
                    dx[k] = r * (dy.data()[k] * ga - mean_d - xhat * mean_dx);
                }
            }
        }
    }
    Ok(GroupNormGrads {
        dx: Tensor::from_vec(x.shape(), dx)?,
        dgamma: Tensor::from_vec([1, c, 1, 1], dgamma)?,
        dbeta: Tensor::from_vec([1, c, 1, 1], dbeta)?,
    })
}

pub fn upsample_nearest2x(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out).expect("upsample shape")
}

pub fn upsample_nearest2x_backward(dy: &Tensor) -> Tensor {
    let (n, c, oh, ow) = dy.dims();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..][..oh * ow];
        let dst = &mut dx[plane * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
            }
        }
    }
    Tensor::from_vec([n, c, h, w], dx).expect("upsample grad shape")
}

pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::Shape(format!("avg_pool2x needs even sides, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, x0) = (2 * oy, 2 * ox);
                dst[oy * ow + ox] = 0.25
                    * (src[y * w + x0] + src[y * w + x0 + 1] + src[(y + 1) * w + x0]
                        + src[(y + 1) * w + x0 + 1]);
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out)
}

pub fn avg_pool2x_backward(dy: &Tensor) -> Tensor {
    let (n, c, oh, ow) = dy.dims();
    let (h, w) = (2 * oh, 2 * ow);
    let mut dx = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = &dy.data()[plane * oh * ow..][..oh * ow];
        let dst = &mut dx[plane * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = 0.25 * src[(y / 2) * ow + x / 2];
            }
        }
    }
    Tensor::from_vec([n, c, h, w], dx).expect("pool grad shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn conv_naive(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let g = ConvGeometry::new(x.shape(), w.shape(), stride, pad).unwrap();
        let mut out = Tensor::zeros(g.out_shape());
        for n in 0..g.n {
            for o in 0..g.c_out {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[o] as f64);
                        for c in 0..g.c_in {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((n * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize];
                                    let wv = w.data()[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                                    acc += (xv * wv) as f64;
                                }
                            }
                        }
                        out.data_mut()[((n * g.c_out + o) * g.oh + oy) * g.ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0), (3, 1, 0)] {
            let x = Tensor::randn([2, 3, 7, 6], 1.0, &mut rng);
            let w = Tensor::randn([4, 3, k, k], 1.0, &mut rng);
            let b = Tensor::randn([1, 4, 1, 1], 1.0, &mut rng);
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = conv_naive(&x, &w, Some(&b), stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-4, "k{k} s{stride} p{pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn broadcast_reduce_roundtrip() {
        let a = Tensor::from_vec([2, 2, 1, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let b = Tensor::from_vec([1, 2, 1, 1], vec![10., 100.]).unwrap();
        let s = broadcast_binary(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(s.data(), &[11., 12., 103., 104., 15., 16., 107., 108.]);
        let r = reduce_to(&a, [1, 2, 1, 1]).unwrap();
        assert_eq!(r.data(), &[1. + 2. + 5. + 6., 3. + 4. + 7. + 8.]);
    }

    #[test]
    fn group_norm_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([2, 4, 3, 3], 3.0, &mut rng).map(|v| v + 2.0);
        let out = group_norm(&x, &Tensor::full([1, 4, 1, 1], 1.0), &Tensor::zeros([1, 4, 1, 1]), 2).unwrap();
        for chunk in out.y.data().chunks(18) {
            let m: f32 = chunk.iter().sum::<f32>() / 18.0;
            let v: f32 = chunk.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / 18.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shaped() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let up = upsample_nearest2x(&x);
        assert_eq!(up.shape(), [1, 1, 4, 4]);
        assert_eq!(avg_pool2x(&up).unwrap(), x);
        assert_eq!(upsample_nearest2x_backward(&up).data(), &[4., 8., 12., 16.]);
    }
}
