//! Discrete Fourier transforms for 1-D and 2-D complex data.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform;
//! every other length goes through Bluestein's chirp-z algorithm on a
//! padded power-of-two transform. Forward transforms are unnormalized and
//! inverse transforms divide by the element count.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

pub use num_complex::Complex64 as Complex;

/// Precomputed plan for one transform length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Radix2(Radix2Plan),
    Bluestein { inner: Radix2Plan, chirp: Vec<Complex>, kernel_fft: Vec<Complex> },
}

#[derive(Debug, Clone)]
struct Radix2Plan {
    len: usize,
    twiddles: Vec<Complex>,
}

impl Radix2Plan {
    fn new(len: usize) -> Self {
        debug_assert!(len.is_power_of_two());
        let twiddles = (0..len / 2)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / len as f64;
                Complex::new(libm::cos(a), libm::sin(a))
            })
            .collect();
        Self { len, twiddles }
    }

    /// Unnormalized in-place transform; `inverse` conjugates the twiddles.
    fn run(&self, data: &mut [Complex], inverse: bool) {
        let n = self.len;
        if n <= 1 {
            return;
        }
        let bits = n.trailing_zeros();
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                data.swap(i, j);
            }
        }
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let step = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = data[start + k];
                    let b = data[start + k + half] * w;
                    data[start + k] = a + b;
                    data[start + k + half] = a - b;
                }
            }
            size *= 2;
        }
    }
}

impl FftPlan {
    pub fn new(len: usize) -> Self {
        assert!(len > 0, "transform length must be positive");
        if len.is_power_of_two() {
            return Self { len, kind: PlanKind::Radix2(Radix2Plan::new(len)) };
        }
        let m = (2 * len - 1).next_power_of_two();
        let inner = Radix2Plan::new(m);
        // chirp w_k = exp(-i pi k^2 / n); k^2 reduced mod 2n keeps the phase accurate
        let chirp: Vec<Complex> = (0..len)
            .map(|k| {
                let k2 = (k as u128 * k as u128 % (2 * len as u128)) as f64;
                let a = -PI * k2 / len as f64;
                Complex::new(libm::cos(a), libm::sin(a))
            })
            .collect();
        let mut kernel = vec![Complex::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for k in 1..len {
            kernel[k] = chirp[k].conj();
            kernel[m - k] = chirp[k].conj();
        }
        inner.run(&mut kernel, false);
        Self { len, kind: PlanKind::Bluestein { inner, chirp, kernel_fft: kernel } }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Unnormalized transform of `data` (length must equal the plan length).
    pub fn process(&self, data: &mut [Complex], inverse: bool) {
        assert_eq!(data.len(), self.len, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Radix2(plan) => plan.run(data, inverse),
            PlanKind::Bluestein { inner, chirp, kernel_fft } => {
                // inverse DFT(x) = conj(DFT(conj(x)))
                if inverse {
                    data.iter_mut().for_each(|v| *v = v.conj());
                }
                let m = inner.len;
                let mut work = vec![Complex::new(0.0, 0.0); m];
                for k in 0..self.len {
                    work[k] = data[k] * chirp[k];
                }
                inner.run(&mut work, false);
                for (w, kf) in work.iter_mut().zip(kernel_fft) {
                    *w *= kf;
                }
                inner.run(&mut work, true);
                let scale = 1.0 / m as f64;
                for k in 0..self.len {
                    data[k] = work[k] * chirp[k] * scale;
                }
                if inverse {
                    data.iter_mut().for_each(|v| *v = v.conj());
                }
            }
        }
    }
}

/// 2-D transform plans for an `h × w` row-major grid.
#[derive(Debug, Clone)]
pub struct Fft2d {
    height: usize,
    width: usize,
    rows: FftPlan,
    cols: FftPlan,
}

impl Fft2d {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, rows: FftPlan::new(width), cols: FftPlan::new(height) }
    }

    pub fn forward(&self, data: &mut [Complex]) {
        self.run(data, false);
    }

    /// Inverse transform including the `1 / (h w)` normalization.
    pub fn inverse(&self, data: &mut [Complex]) {
        self.run(data, true);
        let scale = 1.0 / (self.height * self.width) as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(&self, data: &mut [Complex], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(data.len(), h * w, "buffer length does not match grid");
        for row in data.chunks_exact_mut(w) {
            self.rows.process(row, inverse);
        }
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            self.cols.process(&mut column, inverse);
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
    }
}

/// Forward 2-D transform of a real grid.
pub fn fft2_real(values: &[f32], height: usize, width: usize) -> Vec<Complex> {
    let mut data: Vec<Complex> = values.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    Fft2d::new(height, width).forward(&mut data);
    data
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex], inverse: bool) -> Vec<Complex> {
        let n = x.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let a = sign * 2.0 * PI * (j * k % n) as f64 / n as f64;
                        v * Complex::new(libm::cos(a), libm::sin(a))
                    })
                    .sum()
            })
            .collect()
    }

    fn signal(n: usize) -> Vec<Complex> {
        (0..n).map(|i| Complex::new(libm::sin(i as f64 * 0.7) + 0.1 * i as f64, libm::cos(i as f64 * 1.3))).collect()
    }

    #[test]
    fn matches_naive_dft_for_assorted_lengths() {
        for &n in &[1usize, 2, 3, 5, 8, 12, 16, 48, 80, 97, 128] {
            for inverse in [false, true] {
                let x = signal(n);
                let mut y = x.clone();
                FftPlan::new(n).process(&mut y, inverse);
                let want = naive_dft(&x, inverse);
                for (a, b) in y.iter().zip(&want) {
                    assert!((a - b).norm() < 1e-8 * (1.0 + b.norm()), "n={n} inverse={inverse}");
                }
            }
        }
    }

    #[test]
    fn two_dimensional_round_trip() {
        let (h, w) = (12, 16);
        let x: Vec<Complex> = (0..h * w).map(|i| Complex::new((i % 7) as f64, (i % 5) as f64)).collect();
        let plan = Fft2d::new(h, w);
        let mut y = x.clone();
        plan.forward(&mut y);
        plan.inverse(&mut y);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn constant_grid_has_only_dc() {
        let spec = fft2_real(&[0.5; 64], 8, 8);
        assert!((spec[0].re - 32.0).abs() < 1e-12);
        assert!(spec[1..].iter().all(|v| v.norm() < 1e-12));
    }
}
