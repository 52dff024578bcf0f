//! Noise models, grayscale conversion, SNR accounting, texture scoring and
//! the log-magnitude Fourier spectrum used as an alternative network input.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::fft::fft2_real;
use crate::geometry::Image;
use crate::math::variance;

/// Luma weights for RGB to grayscale conversion.
pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Default minimum intensity standard deviation for a patch to be kept.
pub const DEFAULT_TEXTURE_THRESHOLD: f64 = 0.02;

/// Noise applied to a generated patch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    #[default]
    None,
    /// Additive zero-mean Gaussian noise at `snr = var(signal) / var(noise)`.
    Gaussian { snr: f64 },
    /// Fraction `proportion` of pixels set to 1 (salt) and another
    /// `proportion` set to 0 (pepper).
    SaltPepper { proportion: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::None => Ok(()),
            NoiseSpec::Gaussian { snr } if snr > 0.0 && !snr.is_nan() => Ok(()),
            NoiseSpec::Gaussian { snr } => Err(param_err!("gaussian noise needs snr > 0, got {snr}")),
            NoiseSpec::SaltPepper { proportion } if proportion > 0.0 && proportion <= 0.5 => Ok(()),
            NoiseSpec::SaltPepper { proportion } => {
                Err(param_err!("salt-and-pepper proportion must be in (0, 0.5], got {proportion}"))
            }
        }
    }

    /// Applies the noise; `None` returns a copy of the input.
    pub fn apply<R: Rng + ?Sized>(&self, img: &Image, rng: &mut R) -> Result<Image> {
        match *self {
            NoiseSpec::None => Ok(img.clone()),
            NoiseSpec::Gaussian { snr } => add_gaussian_noise(img, snr, rng),
            NoiseSpec::SaltPepper { proportion } => add_salt_pepper(img, proportion, rng),
        }
    }
}

/// Multi-channel image with interleaved channels, used only on the way in.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn to_grayscale(img: &ColorImage) -> Result<Image> {
    if img.channels != 3 {
        return Err(shape_err!("grayscale conversion expects 3 channels, got {}", img.channels));
    }
    if img.data.len() != img.height * img.width * 3 {
        return Err(shape_err!("{} values for a {}x{}x3 image", img.data.len(), img.height, img.width));
    }
    let pixels = img
        .data
        .chunks_exact(3)
        .map(|px| {
            // weights sum to one, so equal channels map to themselves exactly
            if px[0] == px[1] && px[1] == px[2] {
                px[0]
            } else {
                (LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2]).clamp(0.0, 1.0)
            }
        })
        .collect();
    Image::new(img.height, img.width, pixels)
}

/// Adds zero-mean Gaussian noise with variance `var(img) / snr`. Not clipped.
pub fn add_gaussian_noise<R: Rng + ?Sized>(img: &Image, snr: f64, rng: &mut R) -> Result<Image> {
    if !(snr > 0.0) {
        return Err(param_err!("snr must be positive, got {snr}"));
    }
    let var = variance(img.pixels());
    if var <= 0.0 {
        return Err(Error::DegenerateSignal("cannot set an SNR on a zero-variance image".into()));
    }
    let sigma = libm::sqrt(var / snr);
    let normal = Normal::new(0.0, sigma).map_err(|e| param_err!("noise distribution: {e}"))?;
    let pixels = img.pixels().iter().map(|&v| (v as f64 + normal.sample(rng)) as f32).collect();
    Image::new(img.height(), img.width(), pixels)
}

/// Salt-and-pepper corruption on the `[0, 1]` intensity range.
pub fn add_salt_pepper<R: Rng + ?Sized>(img: &Image, proportion: f64, rng: &mut R) -> Result<Image> {
    if !(proportion > 0.0 && proportion <= 0.5) {
        return Err(param_err!("salt-and-pepper proportion must be in (0, 0.5], got {proportion}"));
    }
    let pixels = img
        .pixels()
        .iter()
        .map(|&v| {
            let u: f64 = rng.random();
            if u < proportion {
                1.0
            } else if u < 2.0 * proportion {
                0.0
            } else {
                v
            }
        })
        .collect();
    Image::new(img.height(), img.width(), pixels)
}

/// `var(clean) / var(noisy - clean)`; `+inf` when the images are identical.
pub fn measure_snr(clean: &Image, noisy: &Image) -> Result<f64> {
    clean.ensure_same_dims(noisy)?;
    let residual: Vec<f32> = noisy.pixels().iter().zip(clean.pixels()).map(|(&n, &c)| n - c).collect();
    let noise_var = variance(&residual);
    if noise_var == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(variance(clean.pixels()) / noise_var)
}

/// Intensity standard deviation; patches below a threshold are discarded.
pub fn texture_score(patch: &Image) -> f64 {
    patch.std()
}

/// Centered `ln(1 + |F|)` of the 2-D DFT, before standardization.
///
/// The zero frequency sits at row `h / 2`, column `w / 2`.
pub fn log_magnitude_spectrum(img: &Image) -> Image {
    let (h, w) = img.dims();
    let spectrum = fft2_real(img.pixels(), h, w);
    Image::from_fn(h, w, |r, c| {
        let fr = (r + h - h / 2) % h;
        let fc = (c + w - w / 2) % w;
        libm::log1p(spectrum[fr * w + fc].norm()) as f32
    })
}

/// Log-magnitude spectrum standardized to zero mean and unit variance.
///
/// Invariant to circular shifts of the input.
pub fn log_spectrum(img: &Image) -> Image {
    standardize(&log_magnitude_spectrum(img))
}

/// Zero-mean, unit-variance copy; a constant image maps to zeros.
pub fn standardize(img: &Image) -> Image {
    let mean = img.mean();
    let std = img.std();
    let scale = if std > 0.0 { 1.0 / std } else { 0.0 };
    let pixels = img.pixels().iter().map(|&v| ((v as f64 - mean) * scale) as f32).collect();
    Image::new(img.height(), img.width(), pixels).expect("dimensions unchanged")
}
