//! Dense rank-4 `f32` tensors in NCHW layout.
//!
//! Everything in the toolkit is rank 4: vectors are stored as `[N, D, 1, 1]`,
//! which lets a 1×1 convolution double as a linear layer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::{NnError, Result};

pub type Shape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; numel(&shape)] }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self { shape, data: vec![value; numel(&shape)] }
    }

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(NnError::Shape(format!(
                "{} values cannot fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f32, rng: &mut R) -> Self {
        let data = (0..numel(&shape))
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let [n, c, h, w] = self.shape;
        (n, c, h, w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Same data, different shape with an equal element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if numel(&shape) != self.numel() {
            return Err(NnError::Shape(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_shape(other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_shape(other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_shape(&self, shape: Shape) -> Result<()> {
        if self.shape != shape {
            return Err(NnError::Shape(format!("expected {:?}, got {:?}", shape, self.shape)));
        }
        Ok(())
    }

    /// The `i`-th batch item as a `[1, C, H, W]` tensor.
    pub fn item(&self, i: usize) -> Self {
        let [_, c, h, w] = self.shape;
        let len = c * h * w;
        Self { shape: [1, c, h, w], data: self.data[i * len..(i + 1) * len].to_vec() }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| NnError::Shape("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::numel).sum());
        let mut n = 0;
        for t in items {
            let [tn, tc, th, tw] = t.shape;
            if (tc, th, tw) != (c, h, w) {
                return Err(NnError::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
            n += tn;
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// Channel slice `[start, end)` of every batch item.
    pub fn narrow_channels(&self, start: usize, end: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start > end || end > c {
            return Err(NnError::Shape(format!("channel range {start}..{end} of {c}")));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * hw);
        for b in 0..n {
            data.extend_from_slice(&self.data[(b * c + start) * hw..(b * c + end) * hw]);
        }
        Ok(Self { shape: [n, end - start, h, w], data })
    }

    /// Concatenates along the channel axis.
    pub fn cat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NnError::Shape("cannot concatenate zero tensors".into()))?;
        let [n, _, h, w] = first.shape;
        let mut c_total = 0;
        for p in parts {
            let [pn, pc, ph, pw] = p.shape;
            if (pn, ph, pw) != (n, h, w) {
                return Err(NnError::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            c_total += pc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * c_total * hw);
        for b in 0..n {
            for p in parts {
                let pc = p.shape[1];
                data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
            }
        }
        Ok(Self { shape: [n, c_total, h, w], data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel().max(1) as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(shape: Shape, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != numel(&shape) * 4 {
            return Err(NnError::Shape(format!(
                "{} bytes do not hold an f32 tensor of shape {:?}",
                bytes.len(),
                shape
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Self { shape, data })
    }
}

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cat_then_narrow_recovers_parts() {
        let a = Tensor::from_vec([2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::from_vec([2, 2, 1, 2], (10..18).map(|v| v as f32).collect()).unwrap();
        let c = Tensor::cat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), [2, 3, 1, 2]);
        assert_eq!(c.data(), &[1., 2., 10., 11., 12., 13., 3., 4., 14., 15., 16., 17.]);
        assert_eq!(c.narrow_channels(0, 1).unwrap(), a);
        assert_eq!(c.narrow_channels(1, 3).unwrap(), b);
    }

    #[test]
    fn bit_eq_separates_signed_zero() {
        let a = Tensor::from_vec([1, 1, 1, 1], vec![0.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 1], vec![-0.0]).unwrap();
        assert_eq!(a, b);
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }
}
