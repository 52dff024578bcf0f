//! Synthetic alignment pairs and UDL training quadruplets.
//!
//! Natural-image pairs: a patch center is drawn inside a source image, the
//! image is rotated about that center and shifted by an integer offset, and
//! the same window is cut from the original and the transformed image. The
//! recorded ground truth therefore maps the source patch onto the target
//! patch under the crate-wide warp convention.
//!
//! Cryo-EM pairs: the particle of a class-average image is separated from
//! its background, rotated and shifted, and composited onto fresh Gaussian
//! background before noise is added at a target SNR.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::fft::{Complex, Fft2d};
use crate::geometry::{warp, Image, RigidTransform};
use crate::imaging::{add_gaussian_noise, texture_score, NoiseSpec, DEFAULT_TEXTURE_THRESHOLD};
use crate::math::wrap_deg;
use crate::rng::{stream, Domain, StreamRng};

/// Source/target patches with the transform that maps source onto target.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPair {
    pub source: Image,
    pub target: Image,
    /// Ground truth; only synthetic data carries it.
    pub gt: Option<RigidTransform>,
    pub noise: NoiseSpec,
}

impl AlignmentPair {
    pub fn validate(&self) -> Result<()> {
        self.source.ensure_same_dims(&self.target)?;
        let (h, w) = self.source.dims();
        if h % 16 != 0 || w % 16 != 0 {
            return Err(shape_err!("pair dims {h}x{w} are not multiples of 16"));
        }
        Ok(())
    }
}

/// Random-access collection of pairs.
pub trait PairSource {
    fn len(&self) -> usize;

    fn pair(&self, index: usize) -> Result<AlignmentPair>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for [AlignmentPair] {
    fn len(&self) -> usize {
        <[AlignmentPair]>::len(self)
    }

    fn pair(&self, index: usize) -> Result<AlignmentPair> {
        self.get(index).cloned().ok_or(Error::Index { index, len: <[AlignmentPair]>::len(self) })
    }
}

impl PairSource for Vec<AlignmentPair> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn pair(&self, index: usize) -> Result<AlignmentPair> {
        self.as_slice().pair(index)
    }
}

/// Originals, their disturbed copies and the difference pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingQuadruplet {
    pub i1: Image,
    pub i2: Image,
    pub i1d: Image,
    pub i2d: Image,
    pub disturb1: RigidTransform,
    pub disturb2: RigidTransform,
}

impl TrainingQuadruplet {
    pub fn alpha1(&self) -> f64 {
        self.disturb1.angle()
    }

    pub fn alpha2(&self) -> f64 {
        self.disturb2.angle()
    }

    /// `(alpha1 - alpha2) mod 360`.
    pub fn pseudo_label(&self) -> f64 {
        wrap_deg(self.alpha1() - self.alpha2())
    }
}

/// Integer offset with magnitude uniform on `0..=max` and a random sign.
pub fn random_shift<R: Rng + ?Sized>(rng: &mut R, max: u32) -> f64 {
    let magnitude = rng.random_range(0..=max) as f64;
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// Uniform rotation in `[0, 360)` with per-axis integer shifts.
pub fn random_rigid<R: Rng + ?Sized>(rng: &mut R, max_shift: u32) -> RigidTransform {
    let angle = rng.random_range(0.0..360.0);
    let dx = random_shift(rng, max_shift);
    let dy = random_shift(rng, max_shift);
    RigidTransform::new(angle, dx, dy)
}

/// Disturbs both images of `pair` with the given transforms.
pub fn quadruplet_with(pair: &AlignmentPair, disturb1: RigidTransform, disturb2: RigidTransform) -> TrainingQuadruplet {
    TrainingQuadruplet {
        i1d: warp(&pair.source, &disturb1, 0.0),
        i2d: warp(&pair.target, &disturb2, 0.0),
        i1: pair.source.clone(),
        i2: pair.target.clone(),
        disturb1,
        disturb2,
    }
}

/// Fresh random disturbances of both images of `pair`.
pub fn make_quadruplet<R: Rng + ?Sized>(pair: &AlignmentPair, disturb_max_shift: u32, rng: &mut R) -> TrainingQuadruplet {
    let d1 = random_rigid(rng, disturb_max_shift);
    let d2 = random_rigid(rng, disturb_max_shift);
    quadruplet_with(pair, d1, d2)
}

/// Settings for natural-image pair synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairGenConfig {
    pub patch: usize,
    pub max_shift: u32,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_texture_threshold")]
    pub texture_threshold: f64,
    /// When false every pair has zero rotation.
    #[serde(default = "default_true")]
    pub random_rotation: bool,
    /// Draws per sample before giving up on finding a textured patch.
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
}

fn default_texture_threshold() -> f64 {
    DEFAULT_TEXTURE_THRESHOLD
}

fn default_true() -> bool {
    true
}

fn default_attempts() -> usize {
    200
}

impl PairGenConfig {
    pub fn new(patch: usize, max_shift: u32) -> Self {
        Self {
            patch,
            max_shift,
            noise: NoiseSpec::None,
            texture_threshold: DEFAULT_TEXTURE_THRESHOLD,
            random_rotation: true,
            max_attempts: default_attempts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.patch % 16 != 0 {
            return Err(param_err!("patch size {} must be a positive multiple of 16", self.patch));
        }
        if !(self.texture_threshold >= 0.0) {
            return Err(param_err!("texture threshold must be non-negative"));
        }
        if self.max_attempts == 0 {
            return Err(param_err!("max_attempts must be positive"));
        }
        self.noise.validate()
    }

    /// Distance from the patch center that any rotated, shifted patch pixel
    /// can reach back into the source image.
    fn reach(&self) -> f64 {
        let half = (self.patch as f64 - 1.0) / 2.0;
        core::f64::consts::SQRT_2 * (half + self.max_shift as f64) + 1.0
    }

    /// Smallest square source image that fits a patch with full margin.
    pub fn min_source_size(&self) -> usize {
        libm::ceil(2.0 * self.reach()) as usize + 1
    }
}

/// One generated pair and the clean patches it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPair {
    pub pair: AlignmentPair,
    /// Index of the source (or center) image the pair came from.
    pub origin: usize,
    pub clean_source: Image,
    pub clean_target: Image,
}

/// Cuts a source patch and its transformed counterpart around a random
/// center. Returns `None` when the patch fails the texture test.
pub fn synthesize_pair(source: &Image, cfg: &PairGenConfig, rng: &mut StreamRng) -> Result<Option<GeneratedPair>> {
    let reach = cfg.reach();
    let (h, w) = source.dims();
    let p = cfg.patch;
    let local = (p as f64 - 1.0) / 2.0;
    // top-left offsets whose patch center keeps `reach` pixels of margin
    let lo = libm::ceil(reach - local).max(0.0) as usize;
    let hi_r = libm::floor(h as f64 - 1.0 - reach - local);
    let hi_c = libm::floor(w as f64 - 1.0 - reach - local);
    if hi_r < lo as f64 || hi_c < lo as f64 {
        return Err(Error::Generation(format!(
            "source image {h}x{w} is too small for {p}px patches with {}px shifts (needs {}x{})",
            cfg.max_shift,
            cfg.min_source_size(),
            cfg.min_source_size()
        )));
    }
    let row = rng.random_range(lo..=hi_r as usize);
    let col = rng.random_range(lo..=hi_c as usize);
    let angle = if cfg.random_rotation { rng.random_range(0.0..360.0) } else { 0.0 };
    let dx = random_shift(rng, cfg.max_shift);
    let dy = random_shift(rng, cfg.max_shift);
    let gt = RigidTransform::new(angle, dx, dy);

    let clean_source = source.crop(row, col, p, p)?;
    let inv = gt.invert();
    let clean_target = Image::from_fn(p, p, |r, c| {
        let (sx, sy) = inv.apply(c as f64 - local, r as f64 - local);
        source.sample_bilinear(col as f64 + local + sx, row as f64 + local + sy, 0.0)
    });
    if texture_score(&clean_source).min(texture_score(&clean_target)) < cfg.texture_threshold {
        return Ok(None);
    }
    let noisy_source = cfg.noise.apply(&clean_source, rng)?;
    let noisy_target = cfg.noise.apply(&clean_target, rng)?;
    Ok(Some(GeneratedPair {
        pair: AlignmentPair { source: noisy_source, target: noisy_target, gt: Some(gt), noise: cfg.noise },
        origin: 0,
        clean_source,
        clean_target,
    }))
}

/// Checks that `sources` can host patches under `cfg`; the error names the
/// index of the first unusable source.
pub fn check_sources(sources: &[Image], cfg: &PairGenConfig) -> Result<()> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Generation("no source images".into()));
    }
    let need = cfg.min_source_size();
    if let Some(i) = sources.iter().position(|s| s.height() < need || s.width() < need) {
        return Err(Error::Generation(format!(
            "source {i} is {}x{}, smaller than the {need}x{need} needed",
            sources[i].height(),
            sources[i].width()
        )));
    }
    Ok(())
}

/// Sample `index` of a generation run; draws only from stream `(seed, index)`.
pub fn generate_pair(sources: &[Image], cfg: &PairGenConfig, seed: u64, index: usize) -> Result<GeneratedPair> {
    let mut rng = stream(seed, Domain::PairGeneration, index as u64, 0);
    for _ in 0..cfg.max_attempts {
        let origin = rng.random_range(0..sources.len());
        if let Some(mut g) = synthesize_pair(&sources[origin], cfg, &mut rng)? {
            g.origin = origin;
            return Ok(g);
        }
    }
    Err(Error::Generation(format!(
        "sample {index}: no patch above texture threshold {} in {} attempts",
        cfg.texture_threshold, cfg.max_attempts
    )))
}

/// Generates `count` pairs; see [`generate_pair`].
pub fn generate_pairs(sources: &[Image], count: usize, cfg: &PairGenConfig, seed: u64) -> Result<Vec<GeneratedPair>> {
    check_sources(sources, cfg)?;
    (0..count).map(|i| generate_pair(sources, cfg, seed, i)).collect()
}

/// Smooth random texture in `[0, 1]`: a sum of Gaussian blobs with scales
/// between 1.5 and 16 pixels. Its spectrum falls off much faster than a
/// natural image's; see [`fractal_texture`] for one with fine detail.
pub fn synthetic_texture<R: Rng + ?Sized>(height: usize, width: usize, blobs: usize, rng: &mut R) -> Image {
    let mut acc = alloc::vec![0.0f64; height * width];
    for _ in 0..blobs {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        // log-uniform scale between 1.5 and 16 pixels
        let sigma = libm::exp(rng.random_range(libm::log(1.5)..libm::log(16.0)));
        let amp = rng.random_range(-1.0..1.0) * libm::sqrt(sigma);
        let inv = 1.0 / (2.0 * sigma * sigma);
        let rad = (4.0 * sigma) as isize + 1;
        let (r0, r1) = ((cy as isize - rad).max(0), (cy as isize + rad).min(height as isize - 1));
        let (c0, c1) = ((cx as isize - rad).max(0), (cx as isize + rad).min(width as isize - 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let (dx, dy) = (c as f64 - cx, r as f64 - cy);
                let d2 = dx * dx + dy * dy;
                acc[r as usize * width + c as usize] += amp * libm::exp(-d2 * inv);
            }
        }
    }
    let (lo, hi) = acc.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Image::new(height, width, acc.iter().map(|&v| ((v - lo) / span) as f32).collect()).expect("dims")
}

/// Random-phase texture in `[0, 1]` whose Fourier amplitude falls off as
/// `1/f`, the average spectrum of natural photographs.
pub fn fractal_texture<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Image {
    let fft = Fft2d::new(height, width);
    let signed = |i: usize, n: usize| if 2 * i > n { i as f64 - n as f64 } else { i as f64 };
    let mut spectrum: Vec<Complex> = (0..height * width)
        .map(|i| {
            let fy = signed(i / width, height) / height as f64;
            let fx = signed(i % width, width) / width as f64;
            let f = libm::sqrt(fy * fy + fx * fx).max(1.0 / height.max(width) as f64);
            let phase = rng.random_range(0.0..core::f64::consts::TAU);
            Complex::new(libm::cos(phase), libm::sin(phase)) / f
        })
        .collect();
    fft.inverse(&mut spectrum);
    let (lo, hi) = spectrum.iter().fold((f64::MAX, f64::MIN), |(lo, hi), z| (lo.min(z.re), hi.max(z.re)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    Image::new(height, width, spectrum.iter().map(|z| ((z.re - lo) / span) as f32).collect()).expect("dims")
}

/// Particle separated from a class-average image.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleTemplate {
    /// Particle on a flat background at the border mean.
    pub reference: Image,
    /// Soft support of the particle in `[0, 1]`.
    pub mask: Image,
    /// Deviation of the particle from the background mean, masked.
    pub relief: Image,
    pub background_mean: f64,
    pub background_std: f64,
}

const BORDER_RING: usize = 4;
const MASK_EDGE: f64 = 4.0;

/// Fits background statistics on the border ring and masks the particle with
/// a soft disk holding 95% of the absolute deviation from that background.
pub fn extract_particle(center: &Image) -> Result<ParticleTemplate> {
    let (h, w) = center.dims();
    if h <= 4 * BORDER_RING || w <= 4 * BORDER_RING {
        return Err(Error::Generation(format!("center image {h}x{w} is too small")));
    }
    let ring: Vec<f32> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| r < BORDER_RING || c < BORDER_RING || r >= h - BORDER_RING || c >= w - BORDER_RING)
        .map(|(r, c)| center.get(r, c))
        .collect();
    let mean = crate::math::mean(&ring);
    let std = libm::sqrt(crate::math::variance(&ring));
    let (cx, cy) = center.center();
    let max_r = (h.min(w) as f64 / 2.0) - MASK_EDGE;
    let bins = libm::ceil(max_r) as usize + 1;
    let mut mass = alloc::vec![0.0f64; bins];
    for r in 0..h {
        for c in 0..w {
            let d = libm::hypot(c as f64 - cx, r as f64 - cy);
            if d < max_r {
                mass[d as usize] += (center.get(r, c) as f64 - mean).abs();
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::Generation("center image has no particle signal".into()));
    }
    let mut acc = 0.0;
    let mut radius = max_r;
    for (i, m) in mass.iter().enumerate() {
        acc += m;
        if acc >= 0.95 * total {
            radius = (i + 1) as f64;
            break;
        }
    }
    let radius = radius.min(max_r);
    let mask = Image::from_fn(h, w, |r, c| {
        let d = libm::hypot(c as f64 - cx, r as f64 - cy);
        if d <= radius {
            1.0
        } else if d >= radius + MASK_EDGE {
            0.0
        } else {
            let t = (d - radius) / MASK_EDGE * core::f64::consts::FRAC_PI_2;
            (libm::cos(t) * libm::cos(t)) as f32
        }
    });
    let relief = Image::from_fn(h, w, |r, c| ((center.get(r, c) as f64 - mean) * mask.get(r, c) as f64) as f32);
    let reference = Image::from_fn(h, w, |r, c| (mean + relief.get(r, c) as f64) as f32);
    Ok(ParticleTemplate { reference, mask, relief, background_mean: mean, background_std: std })
}

/// Settings for cryo-EM style particle images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CryoGenConfig {
    /// Images generated per center.
    pub count: usize,
    /// Target SNR of the final image; `None` leaves it clean.
    pub snr: Option<f64>,
    pub max_shift: u32,
    #[serde(default = "default_true")]
    pub random_rotation: bool,
}

impl CryoGenConfig {
    pub fn validate(&self) -> Result<()> {
        match self.snr {
            Some(s) if !(s > 0.0) => Err(param_err!("snr must be positive, got {s}")),
            _ => Ok(()),
        }
    }
}

/// Particle placed by `t` on random background drawn from the template's
/// border statistics.
pub fn render_particle<R: Rng + ?Sized>(template: &ParticleTemplate, t: &RigidTransform, rng: &mut R) -> Image {
    let relief = warp(&template.relief, t, 0.0);
    let mask = warp(&template.mask, t, 0.0);
    let normal = Normal::new(0.0, template.background_std.max(0.0)).expect("finite std");
    let (h, w) = relief.dims();
    Image::from_fn(h, w, |r, c| {
        let bg = normal.sample(rng);
        let m = mask.get(r, c) as f64;
        (template.background_mean + relief.get(r, c) as f64 + (1.0 - m) * bg) as f32
    })
}

/// Sample `index` for the center with index `center` and template
/// `template`; draws only from stream `(seed, center, index)`.
pub fn generate_cryo_pair(
    template: &ParticleTemplate,
    cfg: &CryoGenConfig,
    seed: u64,
    center: usize,
    index: usize,
) -> Result<GeneratedPair> {
    let mut rng = stream(seed, Domain::CryoGeneration, center as u64, index as u64);
    let angle = if cfg.random_rotation { rng.random_range(0.0..360.0) } else { 0.0 };
    let dx = random_shift(&mut rng, cfg.max_shift);
    let dy = random_shift(&mut rng, cfg.max_shift);
    let gt = RigidTransform::new(angle, dx, dy);
    let clean = render_particle(template, &gt, &mut rng);
    let (target, noise) = match cfg.snr {
        Some(snr) => (add_gaussian_noise(&clean, snr, &mut rng)?, NoiseSpec::Gaussian { snr }),
        None => (clean.clone(), NoiseSpec::None),
    };
    Ok(GeneratedPair {
        pair: AlignmentPair { source: template.reference.clone(), target, gt: Some(gt), noise },
        origin: center,
        clean_source: template.reference.clone(),
        clean_target: clean,
    })
}

/// Checks a center image and separates its particle.
pub fn prepare_center(center: &Image) -> Result<ParticleTemplate> {
    let (h, w) = center.dims();
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Generation(format!("center is {h}x{w}; dims must be multiples of 16")));
    }
    extract_particle(center)
}

/// Pairs `(reference, transformed particle)`, `cfg.count` per center.
pub fn generate_cryo_pairs(centers: &[Image], cfg: &CryoGenConfig, seed: u64) -> Result<Vec<GeneratedPair>> {
    cfg.validate()?;
    if centers.is_empty() {
        return Err(Error::Generation("no center images".into()));
    }
    let mut out = Vec::with_capacity(centers.len() * cfg.count);
    for (k, center) in centers.iter().enumerate() {
        let template = prepare_center(center).map_err(|e| Error::Generation(format!("center {k}: {e}")))?;
        for i in 0..cfg.count {
            out.push(generate_cryo_pair(&template, cfg, seed, k, i)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::measure_snr;

    fn source(seed: u64, size: usize) -> Image {
        synthetic_texture(size, size, 60, &mut stream(seed, Domain::Test, 0, 0))
    }

    fn interior_mae(a: &Image, b: &Image, margin: usize) -> f64 {
        let (h, w) = a.dims();
        let mut acc = 0.0;
        let mut n = 0;
        for r in margin..h - margin {
            for c in margin..w - margin {
                acc += (a.get(r, c) - b.get(r, c)).abs() as f64;
                n += 1;
            }
        }
        acc / n as f64
    }

    #[test]
    fn pseudo_label_wraps() {
        let pair = AlignmentPair {
            source: Image::zeros(16, 16),
            target: Image::zeros(16, 16),
            gt: None,
            noise: NoiseSpec::None,
        };
        let q = quadruplet_with(&pair, RigidTransform::rotation(350.0), RigidTransform::rotation(20.0));
        assert_eq!(q.pseudo_label(), 330.0);
        let q = quadruplet_with(&pair, RigidTransform::rotation(20.0), RigidTransform::rotation(350.0));
        assert_eq!(q.pseudo_label(), 30.0);
        let q = quadruplet_with(&pair, RigidTransform::rotation(75.0), RigidTransform::rotation(75.0));
        assert_eq!(q.pseudo_label(), 0.0);
    }

    #[test]
    fn quadruplet_leaves_originals_and_bounds_shifts() {
        let gp = generate_pairs(&[source(1, 128)], 1, &PairGenConfig::new(32, 4), 3).unwrap().remove(0);
        let mut rng = stream(4, Domain::Test, 0, 0);
        for _ in 0..50 {
            let q = make_quadruplet(&gp.pair, 3, &mut rng);
            assert_eq!(q.i1, gp.pair.source);
            assert_eq!(q.i2, gp.pair.target);
            for t in [q.disturb1, q.disturb2] {
                assert!(t.dx.abs() <= 3.0 && t.dy.abs() <= 3.0 && t.dx.fract() == 0.0);
            }
            assert_eq!(q.i1d, warp(&q.i1, &q.disturb1, 0.0));
            assert!((0.0..360.0).contains(&q.pseudo_label()));
        }
    }

    #[test]
    fn generated_pairs_are_self_consistent() {
        let sources = [source(2, 160), source(3, 160)];
        let pairs = generate_pairs(&sources, 10, &PairGenConfig::new(64, 10), 7).unwrap();
        assert_eq!(pairs.len(), 10);
        for g in &pairs {
            let gt = g.pair.gt.unwrap();
            assert!(gt.dx.abs() <= 10.0 && gt.dy.abs() <= 10.0);
            let warped = warp(&g.pair.source, &gt, 0.0);
            // the warped source covers the target except where content left the patch
            let margin = 22;
            assert!(interior_mae(&warped, &g.pair.target, margin) < 0.03);
        }
    }

    #[test]
    fn degenerate_config_copies_the_patch() {
        let mut cfg = PairGenConfig::new(32, 0);
        cfg.random_rotation = false;
        for g in generate_pairs(&[source(5, 96)], 5, &cfg, 1).unwrap() {
            assert_eq!(g.pair.source, g.pair.target);
        }
    }

    #[test]
    fn generation_is_seeded_and_rejects_small_sources() {
        let cfg = PairGenConfig::new(32, 4);
        let a = generate_pairs(&[source(6, 96)], 4, &cfg, 11).unwrap();
        let b = generate_pairs(&[source(6, 96)], 4, &cfg, 11).unwrap();
        assert_eq!(a, b);
        let err = generate_pairs(&[source(6, 96), source(7, 40)], 4, &cfg, 11).unwrap_err();
        assert!(matches!(err, Error::Generation(ref m) if m.contains("source 1")));
    }

    #[test]
    fn texture_threshold_rejects_flat_sources() {
        let mut cfg = PairGenConfig::new(32, 2);
        cfg.max_attempts = 5;
        let flat = Image::filled(96, 96, 0.4);
        assert!(generate_pairs(&[flat.clone()], 1, &cfg, 1).is_err());
        // a textured source next to a flat one: every kept pair is textured
        cfg.max_attempts = 60;
        let pairs = generate_pairs(&[flat, source(8, 96)], 20, &cfg, 1).unwrap();
        assert!(pairs.iter().all(|g| g.origin == 1 && texture_score(&g.clean_source) >= cfg.texture_threshold));
    }

    fn particle_center(size: usize) -> Image {
        let c = (size as f64 - 1.0) / 2.0;
        let mut rng = stream(12, Domain::Test, 0, 0);
        let normal = Normal::new(0.0, 0.02).unwrap();
        Image::from_fn(size, size, |r, col| {
            let (x, y) = (col as f64 - c, r as f64 - c);
            // asymmetric particle: an elongated body plus a side lobe
            let body = libm::exp(-(x * x / 300.0 + y * y / 80.0));
            let lobe = 0.6 * libm::exp(-((x - 12.0).powi(2) + (y + 8.0).powi(2)) / 30.0);
            (0.3 + 0.5 * (body + lobe) + normal.sample(&mut rng)) as f32
        })
    }

    #[test]
    fn particle_extraction_finds_support() {
        let t = extract_particle(&particle_center(64)).unwrap();
        assert!((t.background_mean - 0.3).abs() < 0.02);
        assert_eq!(t.mask.get(32, 32), 1.0);
        assert_eq!(t.mask.get(0, 0), 0.0);
        assert!(extract_particle(&Image::filled(64, 64, 0.5)).is_err());
    }

    #[test]
    fn cryo_snr_and_reference_placement() {
        let center = particle_center(128);
        let cfg = CryoGenConfig { count: 3, snr: Some(0.1), max_shift: 10, random_rotation: true };
        for g in generate_cryo_pairs(&[center.clone()], &cfg, 5).unwrap() {
            let snr = measure_snr(&g.clean_target, &g.pair.target).unwrap();
            assert!((0.09..=0.11).contains(&snr), "{snr}");
        }
        let still = CryoGenConfig { count: 2, snr: None, max_shift: 0, random_rotation: false };
        let t = extract_particle(&center).unwrap();
        for g in generate_cryo_pairs(&[center.clone()], &still, 5).unwrap() {
            for (i, (&a, &b)) in g.pair.target.pixels().iter().zip(g.pair.source.pixels()).enumerate() {
                if t.mask.pixels()[i] == 1.0 {
                    assert_eq!(a, b);
                }
            }
        }
        let again = generate_cryo_pairs(&[center.clone()], &cfg, 5).unwrap();
        assert_eq!(again, generate_cryo_pairs(&[center], &cfg, 5).unwrap());
    }

    #[test]
    fn fractal_texture_has_a_one_over_f_spectrum() {
        let img = fractal_texture(64, 64, &mut stream(8, Domain::Test, 0, 0));
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(img, fractal_texture(64, 64, &mut stream(8, Domain::Test, 0, 0)));
        // mean amplitude on rings at 4 and 16 cycles differs by about 4x
        let spec = crate::fft::fft2_real(img.pixels(), 64, 64);
        let ring = |k: f64| {
            let (mut sum, mut n) = (0.0, 0);
            for (i, z) in spec.iter().enumerate() {
                let s = |v: usize| if v > 32 { v as f64 - 64.0 } else { v as f64 };
                let f = (s(i / 64).powi(2) + s(i % 64).powi(2)).sqrt();
                if (f - k).abs() < 0.5 {
                    sum += z.norm();
                    n += 1;
                }
            }
            sum / n as f64
        };
        let ratio = ring(4.0) / ring(16.0);
        assert!((3.0..5.5).contains(&ratio), "{ratio}");
    }
}
