//! Translation by phase correlation and the two-stage alignment pipeline.
//!
//! The rotation network gives the angle; the source is rotated back by that
//! angle and the remaining offset is the peak of the inverse transform of the
//! unit-normalized cross-power spectrum.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{Complex, Fft2d};
use crate::geometry::{warp, Image, RigidTransform};
use crate::udl::{predict_rotation, BiasCalibration, RotationEstimator};

/// Spectral magnitudes below this are treated as empty bins.
const MIN_MAGNITUDE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrelationOptions {
    /// Refine the peak with a 3-point parabola along each axis.
    #[serde(default)]
    pub subpixel: bool,
    /// Taper both images with a raised-cosine window before transforming.
    #[serde(default)]
    pub window: bool,
    /// Keep only cross-power bins within this radius, as a fraction of the
    /// Nyquist frequency. Whitening lifts noise-dominated high frequencies
    /// to the same weight as the signal; dropping them keeps the peak.
    #[serde(default)]
    pub lowpass: Option<f64>,
}

impl CorrelationOptions {
    /// Defaults for [`align`]: re-rotated patches are not periodic, and
    /// without a taper the frame edges dominate the whitened spectrum.
    pub const ALIGNMENT: Self = Self { subpixel: false, window: true, lowpass: None };
}

/// Offset of `b` relative to `a` with a confidence proxy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftEstimate {
    pub dx: f64,
    pub dy: f64,
    /// Height of the correlation peak in `[0, 1]`.
    pub peak: f64,
}

/// Integer shift `s` such that `b ≈ a` moved by `s`, i.e.
/// `b(r, c) ≈ a(r - dy, c - dx)`, with `dy ∈ (-h/2, h/2]`, `dx ∈ (-w/2, w/2]`.
pub fn phase_correlation(a: &Image, b: &Image) -> Result<ShiftEstimate> {
    phase_correlation_with(a, b, &CorrelationOptions::default())
}

pub fn phase_correlation_with(a: &Image, b: &Image, opts: &CorrelationOptions) -> Result<ShiftEstimate> {
    a.ensure_same_dims(b)?;
    let (h, w) = a.dims();
    let fft = Fft2d::new(h, w);
    let load = |img: &Image| -> Vec<Complex> {
        if opts.window {
            let mean = img.mean();
            let (wy, wx) = (hann(h), hann(w));
            img.pixels().iter().enumerate().map(|(i, &v)| Complex::new((v as f64 - mean) * wy[i / w] * wx[i % w], 0.0)).collect()
        } else {
            img.pixels().iter().map(|&v| Complex::new(v as f64, 0.0)).collect()
        }
    };
    let mut fa = load(a);
    let mut fb = load(b);
    fft.forward(&mut fa);
    fft.forward(&mut fb);
    let cutoff = opts.lowpass.map(|c| c * c);
    let mut kept = 0usize;
    let mut cross: Vec<Complex> = fb
        .iter()
        .zip(&fa)
        .enumerate()
        .map(|(i, (&x, &y))| {
            if let Some(c2) = cutoff {
                let fy = signed_offset(i / w, h) / (h as f64 / 2.0);
                let fx = signed_offset(i % w, w) / (w as f64 / 2.0);
                if fy * fy + fx * fx > c2 {
                    return Complex::new(0.0, 0.0);
                }
            }
            let z = x * y.conj();
            let m = z.norm();
            if m > MIN_MAGNITUDE {
                kept += 1;
                z / m
            } else {
                Complex::new(0.0, 0.0)
            }
        })
        .collect();
    fft.inverse(&mut cross);
    if kept == 0 {
        return Err(Error::DegenerateSignal("cross-power spectrum is empty".into()));
    }
    // a perfect match peaks at the fraction of bins kept
    let norm = (h * w) as f64 / kept as f64;
    let mut best = 0;
    for (i, z) in cross.iter().enumerate() {
        if z.re > cross[best].re {
            best = i;
        }
    }
    let (py, px) = (best / w, best % w);
    let at = |r: usize, c: usize| cross[r * w + c].re;
    let (mut fy, mut fx) = (0.0, 0.0);
    if opts.subpixel {
        fy = parabola(at((py + h - 1) % h, px), at(py, px), at((py + 1) % h, px));
        fx = parabola(at(py, (px + w - 1) % w), at(py, px), at(py, (px + 1) % w));
    }
    Ok(ShiftEstimate {
        dx: signed_offset(px, w) + fx,
        dy: signed_offset(py, h) + fy,
        peak: (cross[best].re * norm).clamp(0.0, 1.0),
    })
}

/// Index on a circle of length `n` mapped to `(-n/2, n/2]`.
fn signed_offset(i: usize, n: usize) -> f64 {
    if 2 * i > n {
        i as f64 - n as f64
    } else {
        i as f64
    }
}

/// Vertex offset of the parabola through `(-1, l)`, `(0, c)`, `(1, r)`.
fn parabola(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom.abs() < 1e-15 {
        0.0
    } else {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    }
}

fn hann(n: usize) -> Vec<f64> {
    if n < 2 {
        return alloc::vec![1.0; n];
    }
    (0..n).map(|i| 0.5 - 0.5 * libm::cos(2.0 * core::f64::consts::PI * i as f64 / (n - 1) as f64)).collect()
}

/// Rotation from the model, then translation from phase correlation of the
/// re-rotated source against the target.
pub fn align<E: RotationEstimator + ?Sized>(
    model: &E,
    calib: &BiasCalibration,
    source: &Image,
    target: &Image,
) -> Result<RigidTransform> {
    align_with(model, calib, source, target, &CorrelationOptions::ALIGNMENT)
}

pub fn align_with<E: RotationEstimator + ?Sized>(
    model: &E,
    calib: &BiasCalibration,
    source: &Image,
    target: &Image,
    opts: &CorrelationOptions,
) -> Result<RigidTransform> {
    source.ensure_same_dims(target)?;
    let angle = predict_rotation(model, calib, source, target)?;
    translate_after_rotation(angle, source, target, opts)
}

/// Completes a known rotation with the translation found by correlation.
pub fn translate_after_rotation(
    angle: f64,
    source: &Image,
    target: &Image,
    opts: &CorrelationOptions,
) -> Result<RigidTransform> {
    // fill with the mean so the rotated-in corners carry no edge structure
    let rotated = warp(source, &RigidTransform::rotation(angle), source.mean() as f32);
    let s = phase_correlation_with(&rotated, target, opts)?;
    RigidTransform::try_new(angle, s.dx, s.dy)
}

/// Resamples `img` under `t`, zero outside the source.
pub fn apply_alignment(img: &Image, t: &RigidTransform) -> Image {
    warp(img, t, 0.0)
}
