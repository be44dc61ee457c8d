use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scene::SyntheticScene;
use crate::mask_ops::{dilate, BinaryMask, StructuringElement};

pub const RANDOM_MIN_COVERAGE: f64 = 0.10;
pub const RANDOM_MAX_COVERAGE: f64 = 0.60;
pub const DEFAULT_INSTANCE_DILATE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSamplerKind {
    /// Hole = everything outside the slightly dilated object.
    Instance,
    /// Hole = union of random rectangles, ellipses and strokes.
    Random,
}

fn paint_rect<R: Rng>(m: &mut BinaryMask, rng: &mut R) {
    let (h, w) = (m.height(), m.width());
    let rh = rng.gen_range(h / 8..=h / 2);
    let rw = rng.gen_range(w / 8..=w / 2);
    let y0 = rng.gen_range(0..h);
    let x0 = rng.gen_range(0..w);
    for y in y0..(y0 + rh).min(h) {
        for x in x0..(x0 + rw).min(w) {
            m.set(y, x, true);
        }
    }
}

fn paint_ellipse<R: Rng>(m: &mut BinaryMask, rng: &mut R) {
    let (h, w) = (m.height(), m.width());
    let ay = rng.gen_range(h as f32 / 12.0..h as f32 / 3.0);
    let ax = rng.gen_range(w as f32 / 12.0..w as f32 / 3.0);
    let cy = rng.gen_range(0.0..h as f32);
    let cx = rng.gen_range(0.0..w as f32);
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f32 + 0.5 - cy) / ay;
            let dx = (x as f32 + 0.5 - cx) / ax;
            if dy * dy + dx * dx <= 1.0 {
                m.set(y, x, true);
            }
        }
    }
}

fn paint_stroke<R: Rng>(m: &mut BinaryMask, rng: &mut R) {
    let (h, w) = (m.height(), m.width());
    let radius = rng.gen_range(3.0..8.0f32);
    let n = rng.gen_range(2..=4);
    let pts: Vec<(f32, f32)> = (0..n).map(|_| (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32))).collect();
    for y in 0..h {
        for x in 0..w {
            let p = (y as f32 + 0.5, x as f32 + 0.5);
            let hit = pts.windows(2).any(|seg| {
                let (a, b) = (seg[0], seg[1]);
                let ab = (b.0 - a.0, b.1 - a.1);
                let len2 = ab.0 * ab.0 + ab.1 * ab.1;
                let k = if len2 > 0.0 { (((p.0 - a.0) * ab.0 + (p.1 - a.1) * ab.1) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let q = (a.0 + k * ab.0 - p.0, a.1 + k * ab.1 - p.1);
                q.0 * q.0 + q.1 * q.1 <= radius * radius
            });
            if hit {
                m.set(y, x, true);
            }
        }
    }
}

/// Union of 1 to 4 random rectangles, ellipses and thick strokes whose
/// coverage lies in `[0.10, 0.60]`. Draws are retried from the same stream
/// until the coverage fits.
pub fn sample_random_mask(seed: u64, height: usize, width: usize) -> BinaryMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut m = BinaryMask::zeros(height, width);
        for _ in 0..rng.gen_range(1..=4) {
            match rng.gen_range(0..3) {
                0 => paint_rect(&mut m, &mut rng),
                1 => paint_ellipse(&mut m, &mut rng),
                _ => paint_stroke(&mut m, &mut rng),
            }
        }
        if (RANDOM_MIN_COVERAGE..=RANDOM_MAX_COVERAGE).contains(&m.coverage()) {
            return m;
        }
    }
}

/// The scene's instance mask grown by `dilate_px` (Chebyshev radius).
pub fn sample_instance_mask(scene: &SyntheticScene, dilate_px: usize) -> BinaryMask {
    if dilate_px == 0 {
        return scene.instance_mask.clone();
    }
    let se = StructuringElement::square(2 * dilate_px + 1).expect("odd size");
    dilate(&scene.instance_mask, &se)
}

/// Whether `hole` covers part, but not all, of the object: the case where a
/// model is taught to complete a truncated shape.
pub fn truncates(hole: &BinaryMask, instance: &BinaryMask) -> bool {
    let inter = hole.and(instance).map(|m| m.count_ones()).unwrap_or(0);
    inter > 0 && inter < instance.count_ones()
}

/// Training/evaluation hole for a scene: the generated region. Instance
/// sampling regenerates the background around the intact object.
pub fn training_hole(kind: MaskSamplerKind, scene: &SyntheticScene, mask_seed: u64, dilate_px: usize) -> BinaryMask {
    match kind {
        MaskSamplerKind::Instance => sample_instance_mask(scene, dilate_px).not(),
        MaskSamplerKind::Random => {
            let s = scene.instance_mask.height();
            sample_random_mask(mask_seed, s, s)
        }
    }
}
