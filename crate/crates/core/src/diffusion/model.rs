use maskguide_nn::Tensor;
use serde::{Deserialize, Serialize};

use super::schedule::ScheduleConfig;
use crate::{Error, Result};

/// Channels of the latent space.
pub const LATENT_CHANNELS: usize = 4;
/// Spatial reduction between image and latent.
pub const DOWNSAMPLE_FACTOR: usize = 8;
/// Default prompt embedding width.
pub const TEXT_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// 512×512 images, 64×64 latents.
    Paper,
    /// 128×128 images, 16×16 latents. Every automated test runs here.
    Test,
}

impl Geometry {
    pub fn image_size(self) -> usize {
        self.latent_size() * DOWNSAMPLE_FACTOR
    }

    pub fn latent_size(self) -> usize {
        match self {
            Geometry::Paper => 64,
            Geometry::Test => 16,
        }
    }

    pub fn from_image_size(size: usize) -> Option<Geometry> {
        [Geometry::Paper, Geometry::Test].into_iter().find(|g| g.image_size() == size)
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Geometry::Paper => "paper",
            Geometry::Test => "test",
        })
    }
}

/// Architecture hyperparameters stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub geometry: Geometry,
    /// Denoiser widths for the four resolution levels.
    pub unet_channels: [usize; 4],
    /// Autoencoder widths at 1, 1/2, 1/4 and 1/8 of the image resolution.
    pub ae_channels: [usize; 4],
    pub text_dim: usize,
    pub schedule: ScheduleConfig,
}

impl ModelConfig {
    pub fn new(geometry: Geometry) -> Self {
        Self {
            geometry,
            unet_channels: [32, 64, 96, 128],
            ae_channels: [8, 16, 32, 64],
            text_dim: TEXT_DIM,
            schedule: ScheduleConfig::default(),
        }
    }

    /// The reduced widths used for the bundled test-geometry models.
    pub fn compact(geometry: Geometry) -> Self {
        Self { unet_channels: [16, 32, 48, 64], ..Self::new(geometry) }
    }

    pub fn time_dim(&self) -> usize {
        4 * self.unet_channels[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet_channels.iter().chain(&self.ae_channels).any(|&c| c == 0) {
            return Err(Error::Invalid("channel widths must be positive".into()));
        }
        if self.unet_channels[0] % 2 != 0 {
            return Err(Error::Invalid("first denoiser width must be even".into()));
        }
        if self.text_dim == 0 {
            return Err(Error::Invalid("text_dim must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// RGB image batch `[N, 3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    /// Clamps into `[0, 1]`; NaN is rejected.
    pub fn new(t: Tensor) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 3 {
            return Err(Error::Shape(format!("image needs 3 channels, got {c}")));
        }
        if h % DOWNSAMPLE_FACTOR != 0 || w % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Geometry(format!(
                "image size {h}x{w} is not a multiple of {DOWNSAMPLE_FACTOR}"
            )));
        }
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("image contains NaN".into()));
        }
        Ok(Self(t.map(|v| v.clamp(0.0, 1.0))))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut t = Tensor::zeros([1, 3, h, w]);
        let d = t.data_mut();
        for y in 0..h {
            for x in 0..w {
                let px = f(y, x);
                for c in 0..3 {
                    d[(c * h + y) * w + x] = px[c];
                }
            }
        }
        Self::new(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn item(&self, i: usize) -> ImageTensor {
        ImageTensor(self.0.item(i))
    }

    pub fn stack(items: &[ImageTensor]) -> Result<Self> {
        let ts: Vec<Tensor> = items.iter().map(|i| i.0.clone()).collect();
        Ok(Self(Tensor::stack(&ts)?))
    }

    /// Pixel `(y, x)` of batch item 0.
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let [_, _, h, w] = self.0.shape();
        let d = self.0.data();
        [d[y * w + x], d[(h + y) * w + x], d[(2 * h + y) * w + x]]
    }
}

/// Latent batch `[N, 4, L, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("latent needs {LATENT_CHANNELS} channels, got {c}")));
        }
        if h != w {
            return Err(Error::Shape(format!("latent must be square, got {h}x{w}")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn side(&self) -> usize {
        self.0.shape()[2]
    }
}
