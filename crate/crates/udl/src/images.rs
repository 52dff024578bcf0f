//! PNG/JPEG input and 8-bit PNG previews.

use std::fs;
use std::path::{Path, PathBuf};

use udl_core::imaging::{to_grayscale, ColorImage};
use udl_core::Image;

use crate::error::{Error, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Decodes an image file and converts it to grayscale in `[0, 1]`.
pub fn load_grayscale(path: &Path) -> Result<Image> {
    let img_err = |reason: String| Error::Image { path: path.to_path_buf(), reason };
    let decoded = image::open(path).map_err(|e| img_err(e.to_string()))?;
    let rgb = decoded.to_rgb32f();
    let color = ColorImage {
        height: rgb.height() as usize,
        width: rgb.width() as usize,
        channels: 3,
        data: rgb.into_raw(),
    };
    to_grayscale(&color).map_err(|e| img_err(e.to_string()))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if known && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// How float intensities are mapped to 8 bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scaling {
    /// Clamp to `[0, 1]`.
    Clamp,
    /// Stretch `[min, max]` to the full range.
    MinMax,
}

pub fn save_png(path: &Path, img: &Image, scaling: Scaling) -> Result<()> {
    let (lo, hi) = match scaling {
        Scaling::Clamp => (0.0, 1.0),
        Scaling::MinMax => img
            .pixels()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes = img
        .pixels()
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.width() as u32, img.height() as u32, bytes)
        .expect("buffer length matches dims");
    buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}
