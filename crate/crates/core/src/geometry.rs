//! Rigid transforms, their 3×3 matrix form, and image warping.
//!
//! A transform `(angle, dx, dy)` has the matrix
//!
//! ```text
//! [  cos a   sin a   dx ]
//! [ -sin a   cos a   dy ]
//! [    0       0      1 ]
//! ```
//!
//! acting on pixel coordinates measured from the image center, with `x`
//! along columns and `y` along rows. It maps a source pixel to its position
//! in the target, so composing two warps multiplies their matrices.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::math::{sin_cos_deg, wrap_deg};

pub type Matrix3 = [[f64; 3]; 3];

pub const IDENTITY3: Matrix3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// In-plane rotation (degrees) followed by a translation (pixels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    angle: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: Self = Self { angle: 0.0, dx: 0.0, dy: 0.0 };

    /// Builds a transform, normalizing the angle into `[0, 360)`.
    ///
    /// Panics on non-finite input; use [`RigidTransform::try_new`] for
    /// untrusted values.
    pub fn new(angle_deg: f64, dx: f64, dy: f64) -> Self {
        Self::try_new(angle_deg, dx, dy).expect("rigid transform components must be finite")
    }

    pub fn try_new(angle_deg: f64, dx: f64, dy: f64) -> Result<Self> {
        if !(angle_deg.is_finite() && dx.is_finite() && dy.is_finite()) {
            return Err(param_err!("non-finite transform ({angle_deg}, {dx}, {dy})"));
        }
        Ok(Self { angle: wrap_deg(angle_deg), dx, dy })
    }

    pub fn rotation(angle_deg: f64) -> Self {
        Self::new(angle_deg, 0.0, 0.0)
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self::new(0.0, dx, dy)
    }

    /// Rotation angle in degrees, always in `[0, 360)`.
    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn to_matrix(&self) -> Matrix3 {
        let (s, c) = sin_cos_deg(self.angle);
        [[c, s, self.dx], [-s, c, self.dy], [0.0, 0.0, 1.0]]
    }

    /// Transform equal to applying `other` first, then `self`.
    ///
    /// `compose(a, b).to_matrix() == a.to_matrix() · b.to_matrix()`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let (s, c) = sin_cos_deg(self.angle);
        let (x, y) = (other.dx, other.dy);
        RigidTransform {
            angle: wrap_deg(self.angle + other.angle),
            dx: c * x + s * y + self.dx,
            dy: -s * x + c * y + self.dy,
        }
    }

    pub fn invert(&self) -> RigidTransform {
        // R^-1 = R^T; t' = -R^T t
        let (s, c) = sin_cos_deg(self.angle);
        RigidTransform {
            angle: wrap_deg(-self.angle),
            dx: -(c * self.dx - s * self.dy),
            dy: -(s * self.dx + c * self.dy),
        }
    }

    /// Maps a center-relative point through the transform.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = sin_cos_deg(self.angle);
        (c * x + s * y + self.dx, -s * x + c * y + self.dy)
    }
}

pub fn matmul3(a: &Matrix3, b: &Matrix3) -> Matrix3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Frobenius norm of `a - b`.
pub fn frobenius_distance(a: &Matrix3, b: &Matrix3) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            acc += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
        }
    }
    libm::sqrt(acc)
}

/// Single-channel image with `f32` intensities stored row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(shape_err!("image dimensions must be positive, got {height}x{width}"));
        }
        if pixels.len() != height * width {
            return Err(shape_err!("{} pixels for a {height}x{width} image", pixels.len()));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self { height, width, pixels: vec![value; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut pixels = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                pixels.push(f(r, c));
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.width + col] = value;
    }

    /// Center of the pixel grid as `(x, y)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0)
    }

    pub fn ensure_same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(shape_err!(
                "image dimensions differ: {}x{} vs {}x{}",
                self.height,
                self.width,
                other.height,
                other.width
            ));
        }
        Ok(())
    }

    /// Bilinear sample at column `x`, row `y`; `fill` outside the grid.
    ///
    /// Integer coordinates return the stored value exactly.
    pub fn sample_bilinear(&self, x: f64, y: f64, fill: f32) -> f32 {
        let (w, h) = (self.width as f64, self.height as f64);
        if !(x > -1.0 && y > -1.0 && x < w && y < h) {
            return fill;
        }
        let x0 = libm::floor(x);
        let y0 = libm::floor(y);
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let at = |r: isize, c: isize| -> f32 {
            if r < 0 || c < 0 || r >= self.height as isize || c >= self.width as isize {
                fill
            } else {
                self.pixels[r as usize * self.width + c as usize]
            }
        };
        let top = if fx == 0.0 { at(y0, x0) } else { at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx };
        if fy == 0.0 {
            return top;
        }
        let bottom = if fx == 0.0 { at(y0 + 1, x0) } else { at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx };
        top * (1.0 - fy) + bottom * fy
    }

    /// Crops the `height × width` window whose top-left pixel is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Image> {
        if row + height > self.height || col + width > self.width || height == 0 || width == 0 {
            return Err(shape_err!(
                "crop {height}x{width} at ({row}, {col}) exceeds {}x{} image",
                self.height,
                self.width
            ));
        }
        Ok(Image::from_fn(height, width, |r, c| self.get(row + r, col + c)))
    }

    /// Circular shift: output `(r, c)` takes input `(r - dy, c - dx)` modulo the grid.
    pub fn circular_shift(&self, dx: isize, dy: isize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        Image::from_fn(self.height, self.width, |r, c| {
            let sr = (r as isize - dy).rem_euclid(h) as usize;
            let sc = (c as isize - dx).rem_euclid(w) as usize;
            self.get(sr, sc)
        })
    }

    pub fn mean(&self) -> f64 {
        crate::math::mean(&self.pixels)
    }

    /// Population standard deviation of the intensities.
    pub fn std(&self) -> f64 {
        libm::sqrt(crate::math::variance(&self.pixels))
    }
}

/// Warps `img` by `t` about the image center with bilinear interpolation.
///
/// Each output pixel pulls from the inverse-mapped source location; pixels
/// whose source falls outside the grid take `fill`.
pub fn warp(img: &Image, t: &RigidTransform, fill: f32) -> Image {
    let inv = t.invert();
    let (cx, cy) = img.center();
    Image::from_fn(img.height, img.width, |r, c| {
        let (sx, sy) = inv.apply(c as f64 - cx, r as f64 - cy);
        img.sample_bilinear(sx + cx, sy + cy, fill)
    })
}
