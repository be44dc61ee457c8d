use super::scene::{rgb_distance, SyntheticScene};
use crate::diffusion::ImageTensor;
use crate::mask_ops::{dilate, BinaryMask, StructuringElement};
use crate::{Error, Result};

pub const DEFAULT_BAND_PX: usize = 2;
/// A pixel farther than this from the shape colour is never foreground.
pub const FOREGROUND_RADIUS: f32 = 0.3;

/// Pixels whose colour is nearer the shape colour than the scene's
/// background segment, and within [`FOREGROUND_RADIUS`] of the shape colour.
pub fn foreground(img: &ImageTensor, scene: &SyntheticScene) -> BinaryMask {
    BinaryMask::from_fn(img.height(), img.width(), |y, x| {
        let p = img.pixel(y, x);
        let d_shape = rgb_distance(p, scene.shape_color);
        d_shape <= FOREGROUND_RADIUS && d_shape < scene.background.distance(p)
    })
}

/// Fraction of predicted foreground that lies outside the instance mask
/// grown by `band_px`: 0 when the object kept its silhouette, 1 when all
/// foreground escaped.
pub fn overcompletion_score(generated: &ImageTensor, scene: &SyntheticScene, band_px: usize) -> Result<f64> {
    let (h, w) = (scene.instance_mask.height(), scene.instance_mask.width());
    if (generated.height(), generated.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "generated image is {}x{}, scene is {h}x{w}",
            generated.height(),
            generated.width()
        )));
    }
    let fg = foreground(generated, scene);
    let allowed = if band_px == 0 {
        scene.instance_mask.clone()
    } else {
        dilate(&scene.instance_mask, &StructuringElement::square(2 * band_px + 1)?)
    };
    let escaped = fg.and_not(&allowed)?.count_ones();
    Ok(escaped as f64 / fg.count_ones().max(1) as f64)
}
