//! PNG reading and writing for images, masks and condition maps.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use maskguide::controlnet::ControlCondition;
use maskguide::diffusion::ImageTensor;
use maskguide::mask_ops::{BinaryMask, SoftMask};
use maskguide::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(Error::Invalid(format!("`{}` does not exist", path.display())));
    }
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    ImageTensor::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0.map(|c| c as f32 / 255.0))
        .map_err(|e| Error::Geometry(format!("`{}`: {e}", path.display())))
}

pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| Rgb(img.pixel(y as usize, x as usize).map(to_u8)));
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Grayscale mask; pixels at or above 128 are set.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask::from_fn(h, w, |y, x| img.get_pixel(x as u32, y as u32).0[0] >= 128))
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<()> {
    let out = GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn write_soft(path: &Path, m: &SoftMask) -> Result<()> {
    let out = GrayImage::from_fn(m.width() as u32, m.height() as u32, |x, y| Luma([to_u8(m.get(y as usize, x as usize))]));
    out.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_condition(path: &Path) -> Result<ControlCondition> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let values = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    ControlCondition::new(h, w, values)
}
