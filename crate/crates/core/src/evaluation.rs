//! Rotation-error statistics and reference-based similarity reports.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datasets::PairSource;
use crate::error::{param_err, Error, Result};
use crate::fourier_align::{align_with, apply_alignment, translate_after_rotation, CorrelationOptions};
use crate::geometry::Image;
use crate::math::wrap_deg;
use crate::udl::{BiasCalibration, RotationEstimator};

/// Periodic distance between two angles in degrees, in `[0, 180]`.
pub fn angle_error(pred: f64, gt: f64) -> f64 {
    let d = (pred - gt).abs() % 360.0;
    d.min(360.0 - d)
}

/// Mean Gaussian-kernel similarity of pixel residuals, in `(0, 1]`.
pub fn correntropy(a: &Image, b: &Image, sigma: f64) -> Result<f64> {
    a.ensure_same_dims(b)?;
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(param_err!("correntropy sigma must be positive, got {sigma}"));
    }
    let k = -0.5 / (sigma * sigma);
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            libm::exp(d * d * k)
        })
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Upper edges of the rotation-error histogram bins, in degrees.
pub const HISTOGRAM_EDGES: [f64; 8] = [1.0, 2.0, 5.0, 10.0, 20.0, 45.0, 90.0, 180.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset_id: String,
    pub count: usize,
    /// Degrees; absent in reference mode where no ground truth exists.
    pub mean_rotation_error: Option<f64>,
    pub median_rotation_error: Option<f64>,
    pub histogram: Vec<HistogramBin>,
    /// Pixels, when translations were estimated against ground truth.
    pub mean_translation_error: Option<f64>,
    pub mean_correntropy: Option<f64>,
    pub config_digest: String,
}

/// Sum that does not depend on the order of `values`.
fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn ordered_mean(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    Some(ordered_sum(&mut values) / n)
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

fn histogram(errors: &[f64]) -> Vec<HistogramBin> {
    let mut lo = 0.0;
    HISTOGRAM_EDGES
        .iter()
        .map(|&hi| {
            let count = errors.iter().filter(|&&e| e >= lo && (e < hi || (hi == 180.0 && e <= hi))).count();
            let bin = HistogramBin { lo, hi, count };
            lo = hi;
            bin
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub dataset_id: String,
    pub config_digest: String,
    /// Also estimate translations and report their error.
    pub full_align: bool,
    pub correlation: CorrelationOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            dataset_id: String::new(),
            config_digest: String::new(),
            full_align: false,
            correlation: CorrelationOptions::ALIGNMENT,
        }
    }
}

/// Rotation (and optionally translation) error over every pair of a
/// dataset with ground truth.
pub fn evaluate_synthetic<E, S>(model: &E, calib: &BiasCalibration, data: &S, opts: &EvalOptions) -> Result<EvaluationReport>
where
    E: RotationEstimator + ?Sized,
    S: PairSource + ?Sized,
{
    const CHUNK: usize = 64;
    let mut rot = Vec::with_capacity(data.len());
    let mut trans = Vec::new();
    let mut start = 0;
    while start < data.len() {
        let end = (start + CHUNK).min(data.len());
        let pairs = (start..end).map(|i| data.pair(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<(&Image, &Image)> = pairs.iter().map(|p| (&p.source, &p.target)).collect();
        let raw = model.raw_angles(&refs)?;
        for (k, (pair, raw)) in pairs.iter().zip(raw).enumerate() {
            let gt = pair.gt.ok_or_else(|| Error::Protocol(alloc::format!("pair {} has no ground truth", start + k)))?;
            let angle = wrap_deg(raw - calib.c);
            rot.push(angle_error(angle, gt.angle()));
            if opts.full_align {
                let t = translate_after_rotation(angle, &pair.source, &pair.target, &opts.correlation)?;
                trans.push(libm::hypot(t.dx - gt.dx, t.dy - gt.dy));
            }
        }
        start = end;
    }
    Ok(EvaluationReport {
        dataset_id: opts.dataset_id.clone(),
        count: rot.len(),
        histogram: histogram(&rot),
        median_rotation_error: median(rot.clone()),
        mean_rotation_error: ordered_mean(rot),
        mean_translation_error: ordered_mean(trans),
        mean_correntropy: None,
        config_digest: opts.config_digest.clone(),
    })
}

/// Aligns every image to `reference`, scores each with correntropy and
/// averages the aligned images pixel by pixel. `sigma` defaults to the
/// intensity standard deviation of the reference.
pub fn evaluate_reference<E: RotationEstimator + ?Sized>(
    model: &E,
    calib: &BiasCalibration,
    images: &[Image],
    reference: &Image,
    sigma: Option<f64>,
    opts: &EvalOptions,
) -> Result<(EvaluationReport, Image)> {
    if images.is_empty() {
        return Err(param_err!("no images to evaluate"));
    }
    let sigma = match sigma {
        Some(s) => s,
        None => {
            let s = reference.std();
            if !(s > 0.0) {
                return Err(Error::DegenerateSignal("reference is constant; pass sigma explicitly".into()));
            }
            s
        }
    };
    let mut scores = Vec::with_capacity(images.len());
    let mut aligned = Vec::with_capacity(images.len());
    for img in images {
        img.ensure_same_dims(reference)?;
        let t = align_with(model, calib, img, reference, &opts.correlation)?;
        let out = apply_alignment(img, &t);
        scores.push(correntropy(&out, reference, sigma)?);
        aligned.push(out);
    }
    let (h, w) = reference.dims();
    let n = aligned.len() as f64;
    let mut column = Vec::with_capacity(aligned.len());
    let mut average = Vec::with_capacity(h * w);
    for i in 0..h * w {
        column.clear();
        column.extend(aligned.iter().map(|a| a.pixels()[i] as f64));
        average.push((ordered_sum(&mut column) / n) as f32);
    }
    let report = EvaluationReport {
        dataset_id: opts.dataset_id.clone(),
        count: images.len(),
        mean_rotation_error: None,
        median_rotation_error: None,
        histogram: Vec::new(),
        mean_translation_error: None,
        mean_correntropy: ordered_mean(scores),
        config_digest: opts.config_digest.clone(),
    };
    Ok((report, Image::new(h, w, average)?))
}

/// Pixel-wise mean of images without alignment.
pub fn average_image(images: &[Image]) -> Result<Image> {
    let first = images.first().ok_or_else(|| param_err!("no images to average"))?;
    let (h, w) = first.dims();
    let mut acc = alloc::vec![0.0f64; h * w];
    for img in images {
        img.ensure_same_dims(first)?;
        acc.iter_mut().zip(img.pixels()).for_each(|(a, &v)| *a += v as f64);
    }
    let n = images.len() as f64;
    Image::new(h, w, acc.into_iter().map(|v| (v / n) as f32).collect())
}
