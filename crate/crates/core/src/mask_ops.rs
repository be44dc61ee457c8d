//! Binary and soft mask algebra: morphological refinement and cubic
//! resampling into the multi-resolution pyramid used by the control and
//! inpainting branches.
//!
//! Polarity: `1` marks the region a mask selects. A *hole* mask selects the
//! region to generate; a *product* mask selects the subject to preserve.

use maskguide_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of control injection points in the encoder (including mid-block).
pub const NUM_INJECTION_POINTS: usize = 13;

/// Pyramid level consumed by each injection point: 4 at `L`, then 3 each at
/// `L/2`, `L/4`, `L/8`.
pub const INDEX_MAP: [usize; NUM_INJECTION_POINTS] = [0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3];

pub const PYRAMID_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("mask size {height}x{width} must be non-empty")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask values for a {height}x{width} mask",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("binary mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0)
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::filled(height, width, 1)
    }

    fn filled(height: usize, width: usize, v: u8) -> Self {
        assert!(height > 0 && width > 0, "mask size must be non-empty");
        Self { height, width, values: vec![v; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                m.values[y * width + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    /// Out-of-bounds reads are background.
    pub fn get_or_zero(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.height
            && (x as usize) < self.width
            && self.values[y as usize * self.width + x as usize] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.values[y * self.width + x] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count_ones() as f64 / self.values.len() as f64
    }

    pub fn not(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    fn zip(&self, other: &Self, f: impl Fn(u8, u8) -> u8) -> Result<Self> {
        self.expect_same_size(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a & b)
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a | b)
    }

    /// Pixels set in `self` but not in `other`.
    pub fn and_not(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a & (1 - b))
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.values.iter().zip(&other.values).all(|(&a, &b)| a <= b)
    }

    pub fn expect_same_size(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Grayscale mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl SoftMask {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("mask size {height}x{width} must be non-empty")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask values for a {height}x{width} mask",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("soft mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn threshold(&self, at: f32) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| (v >= at) as u8).collect(),
        }
    }

    pub fn complement(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1.0 - v).collect(),
        }
    }

    /// `[1, 1, H, W]` tensor view for broadcasting against feature maps.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([1, 1, self.height, self.width], self.values.clone())
            .expect("mask tensor shape")
    }
}

/// Odd-sized binary kernel with its center set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    size: usize,
    shape: Vec<u8>,
}

impl StructuringElement {
    pub fn new(size: usize, shape: Vec<u8>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::Invalid(format!("structuring element size {size} must be odd")));
        }
        if shape.len() != size * size || shape.iter().any(|&v| v > 1) {
            return Err(Error::Invalid(format!(
                "structuring element needs {} binary entries",
                size * size
            )));
        }
        if shape[(size / 2) * size + size / 2] != 1 {
            return Err(Error::Invalid("structuring element center must be set".into()));
        }
        Ok(Self { size, shape })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, vec![1; size * size])
    }

    pub fn cross(size: usize) -> Result<Self> {
        let c = size / 2;
        Self::new(
            size,
            (0..size * size).map(|i| (i / size == c || i % size == c) as u8).collect(),
        )
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn shape(&self) -> &[u8] {
        &self.shape
    }

    /// `(dy, dx)` offsets of the set entries relative to the center.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let c = (self.size / 2) as isize;
        (0..self.size * self.size)
            .filter(|&i| self.shape[i] == 1)
            .map(|i| ((i / self.size) as isize - c, (i % self.size) as isize - c))
            .collect()
    }
}

/// `out[p] = 1` iff some mask pixel under the reflected element centered at
/// `p` is set.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let offsets = se.offsets();
    let mut out = BinaryMask::zeros(mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let hit = offsets
                .iter()
                .any(|&(dy, dx)| mask.get_or_zero(y as isize - dy, x as isize - dx));
            out.values[y * mask.width + x] = hit as u8;
        }
    }
    out
}

/// `out[p] = 1` iff every element neighbor of `p` is set; pixels outside the
/// frame count as unset, so masks touching the border shrink there.
pub fn erode(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let offsets = se.offsets();
    let mut out = BinaryMask::zeros(mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let all = offsets
                .iter()
                .all(|&(dy, dx)| mask.get_or_zero(y as isize + dy, x as isize + dx));
            out.values[y * mask.width + x] = all as u8;
        }
    }
    out
}

pub fn open(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    dilate(&erode(mask, se), se)
}

pub fn close(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    erode(&dilate(mask, se), se)
}

/// Kernels for the close → open → dilate refinement chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineParams {
    pub se_close: StructuringElement,
    pub se_open: StructuringElement,
    pub se_dilate: StructuringElement,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            se_close: StructuringElement::square(3).expect("3x3"),
            se_open: StructuringElement::square(3).expect("3x3"),
            se_dilate: StructuringElement::square(5).expect("5x5"),
        }
    }
}

impl RefineParams {
    pub fn squares(close: usize, open: usize, dilate: usize) -> Result<Self> {
        Ok(Self {
            se_close: StructuringElement::square(close)?,
            se_open: StructuringElement::square(open)?,
            se_dilate: StructuringElement::square(dilate)?,
        })
    }
}

/// Fills small holes, removes specks, then grows the edge.
pub fn refine_mask(mask: &BinaryMask, params: &RefineParams) -> BinaryMask {
    let closed = close(mask, &params.se_close);
    let opened = open(&closed, &params.se_open);
    dilate(&opened, &params.se_dilate)
}

/// Keys cubic convolution kernel; `a = -0.5` is Catmull-Rom.
pub fn cubic_kernel(x: f64, a: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

pub const CATMULL_ROM_A: f64 = -0.5;

/// Normalized 1-D resampling taps `(first source index, weights)` per output
/// sample. The kernel is stretched by the scale factor when shrinking so the
/// filter also acts as an anti-alias prefilter; taps falling outside the
/// source are dropped and the rest renormalized.
fn resample_taps(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| cubic_kernel((j as f64 + 0.5 - center) / stretch, CATMULL_ROM_A))
                .collect();
            let total: f64 = w.iter().sum();
            for v in &mut w {
                *v /= total;
            }
            (lo, w)
        })
        .collect()
}

/// Separable cubic resampling on a pixel-center grid, clamped to `[0, 1]`.
pub fn downsample_cubic(mask: &SoftMask, target_h: usize, target_w: usize) -> Result<SoftMask> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Invalid(format!("target size {target_h}x{target_w} must be non-zero")));
    }
    if target_h > mask.height || target_w > mask.width {
        return Err(Error::Invalid(format!(
            "cannot downsample {}x{} to larger {target_h}x{target_w}",
            mask.height, mask.width
        )));
    }
    let (h, w) = (mask.height, mask.width);
    let taps_x = resample_taps(w, target_w);
    let taps_y = resample_taps(h, target_h);

    let mut rows = vec![0.0f64; h * target_w];
    for y in 0..h {
        let src = &mask.values[y * w..(y + 1) * w];
        for (ox, (lo, weights)) in taps_x.iter().enumerate() {
            rows[y * target_w + ox] =
                weights.iter().enumerate().map(|(k, wk)| wk * src[lo + k] as f64).sum();
        }
    }
    let mut values = vec![0.0f32; target_h * target_w];
    for (oy, (lo, weights)) in taps_y.iter().enumerate() {
        for ox in 0..target_w {
            let v: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * rows[(lo + k) * target_w + ox])
                .sum();
            values[oy * target_w + ox] = v.clamp(0.0, 1.0) as f32;
        }
    }
    SoftMask::new(target_h, target_w, values)
}

/// A refined mask resampled to each injection resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    levels: Vec<SoftMask>,
    index_map: [usize; NUM_INJECTION_POINTS],
}

impl MaskPyramid {
    pub fn levels(&self) -> &[SoftMask] {
        &self.levels
    }

    pub fn index_map(&self) -> &[usize; NUM_INJECTION_POINTS] {
        &self.index_map
    }

    pub fn base_size(&self) -> usize {
        self.levels[0].height
    }

    /// Level used by injection point `i`.
    pub fn level_for(&self, i: usize) -> &SoftMask {
        &self.levels[self.index_map[i]]
    }

    /// Every level filled with `value`.
    pub fn constant(base_latent_size: usize, value: f32) -> Result<Self> {
        check_base_size(base_latent_size)?;
        let levels = (0..PYRAMID_LEVELS)
            .map(|k| {
                let s = base_latent_size >> k;
                SoftMask::filled(s, s, value)
            })
            .collect::<Result<_>>()?;
        Ok(Self { levels, index_map: INDEX_MAP })
    }

    pub fn from_levels(levels: Vec<SoftMask>) -> Result<Self> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(Error::Invalid(format!("pyramid needs 4 levels, got {}", levels.len())));
        }
        let base = levels[0].height;
        check_base_size(base)?;
        for (k, l) in levels.iter().enumerate() {
            let s = base >> k;
            if l.height != s || l.width != s {
                return Err(Error::Shape(format!(
                    "pyramid level {k} is {}x{}, expected {s}x{s}",
                    l.height, l.width
                )));
            }
        }
        Ok(Self { levels, index_map: INDEX_MAP })
    }

    /// Elementwise product of two pyramids with equal geometry.
    pub fn intersect(&self, other: &MaskPyramid) -> Result<MaskPyramid> {
        let levels = self
            .levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| {
                if (a.height, a.width) != (b.height, b.width) {
                    return Err(Error::Shape("pyramid geometry differs".into()));
                }
                SoftMask::new(
                    a.height,
                    a.width,
                    a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect(),
                )
            })
            .collect::<Result<_>>()?;
        MaskPyramid::from_levels(levels)
    }
}

fn check_base_size(l: usize) -> Result<()> {
    if l == 0 || l % 8 != 0 {
        return Err(Error::Invalid(format!("base latent size {l} must be a positive multiple of 8")));
    }
    Ok(())
}

/// Resamples `mask` to sides `L, L/2, L/4, L/8`, each level directly from the
/// full-resolution mask.
pub fn build_mask_pyramid(mask: &BinaryMask, base_latent_size: usize) -> Result<MaskPyramid> {
    check_base_size(base_latent_size)?;
    let soft = mask.to_soft();
    let levels = (0..PYRAMID_LEVELS)
        .map(|k| {
            let s = base_latent_size >> k;
            downsample_cubic(&soft, s, s)
        })
        .collect::<Result<Vec<_>>>()?;
    MaskPyramid::from_levels(levels)
}
