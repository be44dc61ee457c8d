//! Synthetic "product shots": one saturated shape on a muted, textured
//! background. Every background pixel lies on the RGB segment between the
//! two background colours, which makes foreground classification exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Geometry, ImageTensor};
use crate::mask_ops::BinaryMask;

/// Pixels of frame kept free of the shape on every side.
pub const BORDER_BAND: usize = 4;
pub const MIN_AREA: f64 = 0.10;
pub const MAX_AREA: f64 = 0.40;
/// Minimum RGB distance between the shape colour and the background segment.
pub const COLOR_SEPARATION: f32 = 0.35;

pub const SHAPE_COLORS: [(&str, [f32; 3]); 7] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.15]),
    ("blue", [0.10, 0.20, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.85, 0.10, 0.80]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("orange", [0.95, 0.50, 0.05]),
];

pub const BACKGROUND_COLORS: [(&str, [f32; 3]); 6] = [
    ("gray", [0.50, 0.50, 0.50]),
    ("beige", [0.76, 0.70, 0.60]),
    ("slate", [0.42, 0.47, 0.53]),
    ("sand", [0.70, 0.65, 0.52]),
    ("stone", [0.62, 0.62, 0.58]),
    ("taupe", [0.52, 0.47, 0.42]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Capsule,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Capsule => "capsule",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Texture {
    /// Sinusoidal bands along `angle` with the given period in pixels.
    Stripes { angle: f32, period: f32 },
    /// Linear ramp from `a` to `b` along `angle`.
    Gradient { angle: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundParams {
    pub name: String,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    pub texture: Texture,
}

impl BackgroundParams {
    /// Position along the `a → b` segment at pixel `(y, x)` of an `s × s`
    /// frame.
    pub fn mix_at(&self, y: usize, x: usize, s: usize) -> f32 {
        let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
        match self.texture {
            Texture::Stripes { angle, period } => {
                let u = px * angle.cos() + py * angle.sin();
                0.5 + 0.5 * (std::f32::consts::TAU * u / period).sin()
            }
            Texture::Gradient { angle } => {
                let (c, sn) = (angle.cos(), angle.sin());
                let u = (px - s as f32 / 2.0) * c + (py - s as f32 / 2.0) * sn;
                let half = s as f32 * (c.abs() + sn.abs()) / 2.0;
                (u / (2.0 * half) + 0.5).clamp(0.0, 1.0)
            }
        }
    }

    pub fn color_at(&self, y: usize, x: usize, s: usize) -> [f32; 3] {
        let k = self.mix_at(y, x, s);
        std::array::from_fn(|c| self.color_a[c] + k * (self.color_b[c] - self.color_a[c]))
    }

    /// Euclidean distance from `p` to the `a → b` segment in RGB.
    pub fn distance(&self, p: [f32; 3]) -> f32 {
        segment_distance(p, self.color_a, self.color_b)
    }
}

pub fn rgb_distance(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

pub fn segment_distance(p: [f32; 3], a: [f32; 3], b: [f32; 3]) -> f32 {
    let ab: [f32; 3] = std::array::from_fn(|c| b[c] - a[c]);
    let ap: [f32; 3] = std::array::from_fn(|c| p[c] - a[c]);
    let len2: f32 = ab.iter().map(|v| v * v).sum();
    let k = if len2 > 0.0 {
        (ap.iter().zip(&ab).map(|(u, v)| u * v).sum::<f32>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    rgb_distance(p, std::array::from_fn(|c| a[c] + k * ab[c]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    /// Centre `(y, x)` in pixels.
    pub center: [f32; 2],
    /// Disk: radius. Rectangle: half height, half width. Capsule: radius,
    /// half length of the core segment.
    pub size: [f32; 2],
    /// Capsule orientation in radians.
    pub angle: f32,
}

impl ShapeParams {
    pub fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.center[0], x - self.center[1]);
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.size[0] * self.size[0],
            ShapeKind::Rectangle => dy.abs() <= self.size[0] && dx.abs() <= self.size[1],
            ShapeKind::Capsule => {
                let (r, half) = (self.size[0], self.size[1]);
                let (c, s) = (self.angle.cos(), self.angle.sin());
                let along = (dx * c + dy * s).clamp(-half, half);
                let (qx, qy) = (dx - along * c, dy - along * s);
                qx * qx + qy * qy <= r * r
            }
        }
    }

    pub fn rasterize(&self, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |y, x| self.contains(y as f32 + 0.5, x as f32 + 0.5))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub image: ImageTensor,
    /// Exact support of the shape.
    pub instance_mask: BinaryMask,
    pub shape: ShapeParams,
    pub shape_color: [f32; 3],
    pub shape_color_name: String,
    pub background: BackgroundParams,
    pub prompt: String,
    pub seed: u64,
}

fn jitter<R: Rng>(rng: &mut R, c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn sample_shape<R: Rng>(rng: &mut R, s: usize) -> (ShapeParams, BinaryMask) {
    let frame = (s * s) as f64;
    let band = BORDER_BAND as f32;
    loop {
        let kind = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Capsule][rng.gen_range(0..3)];
        let area = rng.gen_range(0.12..0.38) as f32 * frame as f32;
        let (size, angle, extent) = match kind {
            ShapeKind::Disk => {
                let r = (area / std::f32::consts::PI).sqrt();
                ([r, r], 0.0, [r, r])
            }
            ShapeKind::Rectangle => {
                let aspect: f32 = rng.gen_range(0.5..2.0);
                let h = (area * aspect).sqrt() / 2.0;
                let w = (area / aspect).sqrt() / 2.0;
                ([h, w], 0.0, [h, w])
            }
            ShapeKind::Capsule => {
                let ratio: f32 = rng.gen_range(0.5..2.0);
                // area = 4·r·half + π·r² with half = ratio·r
                let r = (area / (4.0 * ratio + std::f32::consts::PI)).sqrt();
                let half = ratio * r;
                let angle = rng.gen_range(0.0..std::f32::consts::PI);
                let ey = half * angle.sin().abs() + r;
                let ex = half * angle.cos().abs() + r;
                ([r, half], angle, [ey, ex])
            }
        };
        let lo_y = band + extent[0] + 1.0;
        let lo_x = band + extent[1] + 1.0;
        let hi_y = s as f32 - band - extent[0] - 1.0;
        let hi_x = s as f32 - band - extent[1] - 1.0;
        if lo_y >= hi_y || lo_x >= hi_x {
            continue;
        }
        let center = [rng.gen_range(lo_y..hi_y), rng.gen_range(lo_x..hi_x)];
        let shape = ShapeParams { kind, center, size, angle };
        let mask = shape.rasterize(s);
        let cov = mask.coverage();
        let touches = (0..s).any(|i| {
            (0..BORDER_BAND).any(|b| {
                mask.get(b, i) || mask.get(s - 1 - b, i) || mask.get(i, b) || mask.get(i, s - 1 - b)
            })
        });
        if (MIN_AREA..=MAX_AREA).contains(&cov) && !touches {
            return (shape, mask);
        }
    }
}

fn sample_background<R: Rng>(rng: &mut R, s: usize) -> BackgroundParams {
    let ia = rng.gen_range(0..BACKGROUND_COLORS.len());
    let ib = (ia + rng.gen_range(1..BACKGROUND_COLORS.len())) % BACKGROUND_COLORS.len();
    let (name, a) = BACKGROUND_COLORS[ia];
    let color_a = jitter(rng, a, 0.04);
    let color_b = jitter(rng, BACKGROUND_COLORS[ib].1, 0.04);
    let angle = rng.gen_range(0.0..std::f32::consts::PI);
    let texture = if rng.gen_bool(0.5) {
        Texture::Stripes { angle, period: rng.gen_range(s as f32 / 8.0..s as f32 / 2.5) }
    } else {
        Texture::Gradient { angle }
    };
    BackgroundParams { name: name.to_string(), color_a, color_b, texture }
}

pub fn render(shape_mask: &BinaryMask, color: [f32; 3], bg: &BackgroundParams) -> ImageTensor {
    let s = shape_mask.height();
    ImageTensor::from_fn(s, s, |y, x| if shape_mask.get(y, x) { color } else { bg.color_at(y, x, s) })
        .expect("scene side is a multiple of the latent factor")
}

/// Deterministic scene at the test geometry's image size.
pub fn gen_scene(seed: u64) -> SyntheticScene {
    gen_scene_sized(seed, Geometry::Test.image_size())
}

pub fn gen_scene_sized(seed: u64, size: usize) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (shape, instance_mask) = sample_shape(&mut rng, size);
    let background = sample_background(&mut rng, size);
    let (shape_color_name, shape_color) = loop {
        let (name, c) = SHAPE_COLORS[rng.gen_range(0..SHAPE_COLORS.len())];
        let c = jitter(&mut rng, c, 0.05);
        if background.distance(c) >= COLOR_SEPARATION {
            break (name.to_string(), c);
        }
    };
    let image = render(&instance_mask, shape_color, &background);
    let prompt = format!("{shape_color_name} {} on {} background", shape.kind.name(), background.name);
    SyntheticScene { image, instance_mask, shape, shape_color, shape_color_name, background, prompt, seed }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed namespace for one corpus. Training and held-out indices live in
/// disjoint ranges, and the seed map is a bijection, so the two sets of
/// scenes never share a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCorpus {
    pub seed: u64,
}

const HELD_OUT_BASE: u64 = 1 << 62;

impl SceneCorpus {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn seed_for(&self, index: u64) -> u64 {
        splitmix64(self.seed.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }

    /// Seed of training scene `index` (taken modulo `2^62`).
    pub fn train_seed(&self, index: u64) -> u64 {
        self.seed_for(index % HELD_OUT_BASE)
    }

    pub fn held_out_seed(&self, index: u64) -> u64 {
        self.seed_for(HELD_OUT_BASE + index)
    }

    pub fn held_out(&self, n: usize, size: usize) -> Vec<SyntheticScene> {
        (0..n as u64).map(|i| gen_scene_sized(self.held_out_seed(i), size)).collect()
    }
}
