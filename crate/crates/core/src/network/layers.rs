//! Layer primitives with explicit forward caches and backward passes.

use alloc::vec;
use alloc::vec::Vec;

use super::params::{Gradients, ModelParameters, ParamId};
use super::tensor::Tensor;
use crate::math::Real;

/// Small constant added to batch variances.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running statistics.
pub const BN_MOMENTUM: f64 = 0.1;
/// Added to descriptor norms before unit normalization in feature matching.
pub const MATCH_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are reported back.
    Train,
    /// Running statistics; the output of one item does not depend on the batch.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..(ci * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, &s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution with a 1×1 or 3×3 kernel and no bias
/// (every convolution here feeds a batch norm).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv2d {
    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn forward<T: Real>(&self, p: &ModelParameters<T>, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.cin, "conv input channels");
        let hw = h * w;
        let kk = self.patch_len();
        let weight = p.get(self.weight);
        let mut out = Tensor::zeros([n, self.cout, h, w]);
        let mut cols = if self.kernel == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
        for i in 0..n {
            let src: &[T] = if self.kernel == 3 {
                im2col(x.item(i), c, h, w, &mut cols);
                &cols
            } else {
                x.item(i)
            };
            T::gemm(self.cout, kk, hw, weight, false, src, false, T::zero(), out.item_mut(i));
        }
        out
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        g: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        let hw = h * w;
        let kk = self.patch_len();
        let weight = p.get(self.weight);
        let mut dx = if need_dx { Some(Tensor::zeros(x.shape())) } else { None };
        let mut cols = if self.kernel == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
        let mut dcols = if self.kernel == 3 && need_dx { vec![T::zero(); kk * hw] } else { Vec::new() };
        for i in 0..n {
            let src: &[T] = if self.kernel == 3 {
                im2col(x.item(i), c, h, w, &mut cols);
                &cols
            } else {
                x.item(i)
            };
            T::gemm(self.cout, hw, kk, dy.item(i), false, src, true, T::one(), g.get_mut(self.weight));
            if let Some(dx) = dx.as_mut() {
                if self.kernel == 3 {
                    T::gemm(kk, self.cout, hw, weight, true, dy.item(i), false, T::zero(), &mut dcols);
                    col2im(&dcols, c, h, w, dx.item_mut(i));
                } else {
                    T::gemm(kk, self.cout, hw, weight, true, dy.item(i), false, T::zero(), dx.item_mut(i));
                }
            }
        }
        dx
    }
}

/// Per-channel batch normalization with affine parameters.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Batch statistics observed in a training forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

impl BatchNorm {
    pub fn forward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        x: &Tensor<T>,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> (Tensor<T>, BnCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "batch norm channels");
        let hw = h * w;
        let count = n * hw;
        let eps = T::from_f64(BN_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for i in 0..n {
                        s += x.item(i)[ch * hw..(ch + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for i in 0..n {
                        ss += x.item(i)[ch * hw..(ch + 1) * hw]
                            .iter()
                            .map(|v| (v.as_f64() - m) * (v.as_f64() - m))
                            .sum::<f64>();
                    }
                    mean[ch] = T::from_f64(m);
                    var[ch] = T::from_f64(ss / count as f64);
                }
                let unbiased = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                updates.push(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * T::from_f64(unbiased)).collect(),
                });
                (mean, var)
            }
            Mode::Eval => (p.get(self.running_mean).to_vec(), p.get(self.running_var).to_vec()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = p.get(self.gamma);
        let beta = p.get(self.beta);
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            let xi = x.item(i);
            let xh = xhat.item_mut(i);
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                for j in ch * hw..(ch + 1) * hw {
                    xh[j] = (xi[j] - m) * s;
                }
            }
            let xh = xhat.item(i);
            let yi = y.item_mut(i);
            for ch in 0..c {
                let (gm, bt) = (gamma[ch], beta[ch]);
                for j in ch * hw..(ch + 1) * hw {
                    yi[j] = gm * xh[j] + bt;
                }
            }
        }
        (y, BnCache { xhat, inv_std, batch_stats: mode == Mode::Train })
    }

    pub fn backward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        g: &mut Gradients<T>,
    ) -> Tensor<T> {
        let [n, c, h, w] = dy.shape();
        let hw = h * w;
        let count = T::from_f64((n * hw) as f64);
        let gamma = p.get(self.gamma);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..n {
            let (d, xh) = (dy.item(i), cache.xhat.item(i));
            for ch in 0..c {
                let mut a = T::zero();
                let mut b = T::zero();
                for j in ch * hw..(ch + 1) * hw {
                    a += d[j];
                    b += d[j] * xh[j];
                }
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += b;
            }
        }
        for ch in 0..c {
            g.get_mut(self.beta)[ch] += sum_dy[ch];
            g.get_mut(self.gamma)[ch] += sum_dy_xhat[ch];
        }
        let mut dx = Tensor::zeros(dy.shape());
        for i in 0..n {
            let (d, xh) = (dy.item(i), cache.xhat.item(i));
            let out = dx.item_mut(i);
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch];
                if cache.batch_stats {
                    let mdy = sum_dy[ch] / count;
                    let mdx = sum_dy_xhat[ch] / count;
                    for j in ch * hw..(ch + 1) * hw {
                        out[j] = k * (d[j] - mdy - xh[j] * mdx);
                    }
                } else {
                    for j in ch * hw..(ch + 1) * hw {
                        out[j] = k * d[j];
                    }
                }
            }
        }
        dx
    }
}

/// Applies `act` in place.
pub fn activate<T: Real>(x: &mut Tensor<T>, act: Activation) {
    match act {
        Activation::Relu => x.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero())),
        Activation::Sigmoid => x.data_mut().iter_mut().for_each(|v| *v = T::one() / (T::one() + (-*v).exp())),
        Activation::Identity => {}
    }
}

/// Multiplies `dy` in place by the activation derivative expressed through its output.
pub fn activate_backward<T: Real>(out: &Tensor<T>, dy: &mut Tensor<T>, act: Activation) {
    match act {
        Activation::Relu => dy.data_mut().iter_mut().zip(out.data()).for_each(|(d, &o)| {
            if o <= T::zero() {
                *d = T::zero();
            }
        }),
        Activation::Sigmoid => dy.data_mut().iter_mut().zip(out.data()).for_each(|(d, &o)| *d *= o * (T::one() - o)),
        Activation::Identity => {}
    }
}

/// Convolution, batch norm and activation.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: Activation,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

impl<T> ConvBlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl ConvBlock {
    pub fn forward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        x: Tensor<T>,
        mode: Mode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> ConvBlockCache<T> {
        let z = self.conv.forward(p, &x);
        let (mut y, bn) = self.bn.forward(p, &z, mode, updates);
        activate(&mut y, self.act);
        ConvBlockCache { input: x, bn, output: y }
    }

    pub fn backward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        cache: &ConvBlockCache<T>,
        mut dy: Tensor<T>,
        g: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        activate_backward(&cache.output, &mut dy, self.act);
        let dz = self.bn.backward(p, &cache.bn, &dy, g);
        self.conv.backward(p, &cache.input, &dz, g, need_dx)
    }
}

/// 2×2 max pooling with stride 2.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        let xi = x.item(i);
        let oi = out.item_mut(i);
        for ch in 0..c {
            let plane = &xi[ch * h * w..(ch + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let base = 2 * y * w + 2 * xx;
                    let mut best = base;
                    for cand in [base + 1, base + w, base + w + 1] {
                        if plane[cand] > plane[best] {
                            best = cand;
                        }
                    }
                    oi[ch * oh * ow + y * ow + xx] = plane[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Real>(input_shape: [usize; 4], arg: &[u32], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(input_shape);
    let mut k = 0;
    for i in 0..n {
        let di = dy.item(i).to_vec();
        let xi = dx.item_mut(i);
        for ch in 0..c {
            for j in 0..oh * ow {
                xi[ch * h * w + arg[k] as usize] += di[ch * oh * ow + j];
                k += 1;
            }
        }
    }
    dx
}

/// Fully connected layer on `[n, d, 1, 1]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward<T: Real>(&self, p: &ModelParameters<T>, x: &Tensor<T>) -> Tensor<T> {
        let n = x.batch();
        assert_eq!(x.item_len(), self.din, "linear input width");
        let mut out = Tensor::zeros([n, self.dout, 1, 1]);
        let bias = p.get(self.bias);
        for i in 0..n {
            out.item_mut(i).copy_from_slice(bias);
        }
        T::gemm(n, self.din, self.dout, x.data(), false, p.get(self.weight), true, T::one(), out.data_mut());
        out
    }

    pub fn backward<T: Real>(&self, p: &ModelParameters<T>, x: &Tensor<T>, dy: &Tensor<T>, g: &mut Gradients<T>) -> Tensor<T> {
        let n = x.batch();
        T::gemm(self.dout, n, self.din, dy.data(), true, x.data(), false, T::one(), g.get_mut(self.weight));
        let gb = g.get_mut(self.bias);
        for i in 0..n {
            gb.iter_mut().zip(dy.item(i)).for_each(|(b, &d)| *b += d);
        }
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(n, self.dout, self.din, dy.data(), false, p.get(self.weight), false, T::zero(), dx.data_mut());
        dx
    }
}

/// Cache for the correlation layer: unit descriptors and their raw norms.
#[derive(Debug, Clone)]
pub struct MatchCache<T> {
    u1: Tensor<T>,
    u2: Tensor<T>,
    n1: Vec<T>,
    n2: Vec<T>,
}

/// Unit-normalizes each spatial descriptor along the channel axis.
fn unit_descriptors<T: Real>(f: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let [n, c, h, w] = f.shape();
    let hw = h * w;
    let eps = T::from_f64(MATCH_EPS);
    let mut u = Tensor::zeros(f.shape());
    let mut norms = vec![T::zero(); n * hw];
    for i in 0..n {
        let fi = f.item(i);
        let ui = u.item_mut(i);
        for pos in 0..hw {
            let mut ss = T::zero();
            for ch in 0..c {
                ss += fi[ch * hw + pos] * fi[ch * hw + pos];
            }
            let norm = ss.sqrt();
            norms[i * hw + pos] = norm;
            let inv = T::one() / (norm + eps);
            for ch in 0..c {
                ui[ch * hw + pos] = fi[ch * hw + pos] * inv;
            }
        }
    }
    (u, norms)
}

/// Normalized cross-correlation of every descriptor pair.
///
/// Output shape `[n, h·w, h, w]` with
/// `out[(i·w + j), y, x] = <unit(f1[:, y, x]), unit(f2[:, i, j])>`.
pub fn match_features<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> (Tensor<T>, MatchCache<T>) {
    assert_eq!(f1.shape(), f2.shape(), "matched features must share a shape");
    let [n, c, h, w] = f1.shape();
    let hw = h * w;
    let (u1, n1) = unit_descriptors(f1);
    let (u2, n2) = unit_descriptors(f2);
    let mut out = Tensor::zeros([n, hw, h, w]);
    for i in 0..n {
        // (hw_ij × c) · (c × hw_yx)
        T::gemm(hw, c, hw, u2.item(i), true, u1.item(i), false, T::zero(), out.item_mut(i));
    }
    (out, MatchCache { u1, u2, n1, n2 })
}

fn unit_backward<T: Real>(u: &Tensor<T>, norms: &[T], du: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = u.shape();
    let hw = h * w;
    let eps = T::from_f64(MATCH_EPS);
    let mut df = Tensor::zeros(u.shape());
    for i in 0..n {
        let (ui, dui) = (u.item(i), du.item(i));
        let out = df.item_mut(i);
        for pos in 0..hw {
            let norm = norms[i * hw + pos];
            let d = norm + eps;
            // u = f / d; with f = u d: df = du / d - u (u . du) / norm
            let mut dot = T::zero();
            for ch in 0..c {
                dot += ui[ch * hw + pos] * dui[ch * hw + pos];
            }
            let radial = if norm > T::zero() { dot / norm } else { T::zero() };
            for ch in 0..c {
                out[ch * hw + pos] = dui[ch * hw + pos] / d - ui[ch * hw + pos] * radial;
            }
        }
    }
    df
}

pub fn match_features_backward<T: Real>(cache: &MatchCache<T>, dout: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = cache.u1.shape();
    let hw = h * w;
    let mut du1 = Tensor::zeros(cache.u1.shape());
    let mut du2 = Tensor::zeros(cache.u2.shape());
    for i in 0..n {
        // out = U2^T U1  =>  dU1 = U2 dOut,  dU2 = U1 dOut^T
        T::gemm(c, hw, hw, cache.u2.item(i), false, dout.item(i), false, T::zero(), du1.item_mut(i));
        T::gemm(c, hw, hw, cache.u1.item(i), false, dout.item(i), true, T::zero(), du2.item_mut(i));
    }
    (unit_backward(&cache.u1, &cache.n1, &du1), unit_backward(&cache.u2, &cache.n2, &du2))
}
