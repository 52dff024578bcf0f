//! Rotation-regression network.
//!
//! Pipeline per image pair: a mask module (four conv blocks, sigmoid at the
//! end) gates the input, four residual blocks with 2× max pooling extract a
//! feature volume at 1/16 resolution, a correlation layer compares every
//! descriptor of one image with every descriptor of the other in both
//! directions, two conv blocks refine each correlation volume, and three
//! fully connected layers regress the rotation angle in degrees.
//!
//! Both branches read the same [`ModelParameters`] entries; they are run as
//! one stacked batch so there is a single copy of every shared weight.

mod layers;
mod params;
mod tensor;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layers::{match_features_backward, Activation, BnUpdate, Mode, BN_MOMENTUM, MATCH_EPS};
use layers::{
    activate_backward, match_features as match_with_cache, max_pool2, max_pool2_backward, BatchNorm, Conv2d,
    ConvBlock, ConvBlockCache, Linear, MatchCache,
};
pub use params::{Gradients, ModelParameters, ParamId, Parameter};
pub use tensor::Tensor;

use crate::error::{param_err, shape_err, Result};
use crate::geometry::Image;
use crate::imaging::log_spectrum;
use crate::math::Real;
use crate::rng::{stream, Domain};

/// Representation fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputRepr {
    /// Pixel intensities as stored.
    #[default]
    Spatial,
    /// Standardized centered log-magnitude Fourier spectrum.
    Spectrum,
}

impl InputRepr {
    pub fn prepare(&self, img: &Image) -> Image {
        match self {
            InputRepr::Spatial => img.clone(),
            InputRepr::Spectrum => log_spectrum(img),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output widths of the four mask conv blocks; the last must be 1.
    pub mask_channels: [usize; 4],
    /// Output widths of the four residual blocks.
    pub extractor_channels: [usize; 4],
    /// Output widths of the two conv blocks after feature matching.
    pub post_match_channels: [usize; 2],
    /// Widths of the two hidden fully connected layers.
    pub fc_hidden: [usize; 2],
    #[serde(default)]
    pub input_repr: InputRepr,
    /// Fixed gain applied to the last fully connected output.
    #[serde(default = "default_output_scale")]
    pub output_scale: f64,
}

fn default_output_scale() -> f64 {
    1.0
}

impl NetworkConfig {
    /// Full-size architecture: 256 final feature channels, 2000-wide regressor.
    pub fn standard(height: usize, width: usize) -> Self {
        Self {
            input_height: height,
            input_width: width,
            mask_channels: [16, 16, 16, 1],
            extractor_channels: [32, 64, 128, 256],
            post_match_channels: [128, 64],
            fc_hidden: [2000, 2000],
            input_repr: InputRepr::Spatial,
            output_scale: 1.0,
        }
    }

    /// Reduced-width variant for desk-scale training.
    pub fn reduced(height: usize, width: usize) -> Self {
        Self {
            input_height: height,
            input_width: width,
            mask_channels: [4, 4, 4, 1],
            extractor_channels: [8, 16, 32, 64],
            post_match_channels: [32, 32],
            fc_hidden: [256, 256],
            input_repr: InputRepr::Spatial,
            // a narrow head grows its output range too slowly under Adam;
            // without the gain UDL training sits at chance for ~1k steps
            output_scale: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.input_height, self.input_width);
        if h < 32 || w < 32 || h % 16 != 0 || w % 16 != 0 {
            return Err(param_err!("input dims {h}x{w} must be multiples of 16 and at least 32"));
        }
        if self.mask_channels[3] != 1 {
            return Err(param_err!("the last mask block must output one channel"));
        }
        let widths = self
            .mask_channels
            .iter()
            .chain(&self.extractor_channels)
            .chain(&self.post_match_channels)
            .chain(&self.fc_hidden);
        if widths.into_iter().any(|&c| c == 0) {
            return Err(param_err!("layer widths must be positive"));
        }
        if !(self.output_scale.is_finite() && self.output_scale > 0.0) {
            return Err(param_err!("output_scale must be positive"));
        }
        Ok(())
    }

    /// Spatial size of the feature volume.
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.input_height / 16, self.input_width / 16)
    }

    pub fn feature_channels(&self) -> usize {
        self.extractor_channels[3]
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Scaled { fan_in: usize },
    Const(f64),
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    trainable: bool,
}

#[derive(Default)]
struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init, trainable: bool) -> ParamId {
        self.specs.push(ParamSpec { name, shape, init, trainable });
        ParamId(self.specs.len() - 1)
    }

    fn conv_block(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, act: Activation) -> ConvBlock {
        let weight =
            self.add(format!("{name}.conv.weight"), vec![cout, cin, kernel, kernel], Init::He { fan_in: cin * kernel * kernel }, true);
        let gamma = self.add(format!("{name}.bn.gamma"), vec![cout], Init::Const(1.0), true);
        let beta = self.add(format!("{name}.bn.beta"), vec![cout], Init::Const(0.0), true);
        let running_mean = self.add(format!("{name}.bn.running_mean"), vec![cout], Init::Const(0.0), false);
        let running_var = self.add(format!("{name}.bn.running_var"), vec![cout], Init::Const(1.0), false);
        ConvBlock {
            conv: Conv2d { weight, cin, cout, kernel },
            bn: BatchNorm { gamma, beta, running_mean, running_var, channels: cout },
            act,
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, init: Init, bias: f64) -> Linear {
        let weight = self.add(format!("{name}.weight"), vec![dout, din], init, true);
        let bias = self.add(format!("{name}.bias"), vec![dout], Init::Const(bias), true);
        Linear { weight, bias, din, dout }
    }
}

/// Bottleneck residual block followed by 2× max pooling.
#[derive(Debug, Clone)]
struct ResidualBlock {
    reduce: ConvBlock,
    spatial: ConvBlock,
    expand: ConvBlock,
    shortcut: ConvBlock,
}

#[derive(Debug, Clone)]
struct ResidualCache<T> {
    reduce: ConvBlockCache<T>,
    spatial: ConvBlockCache<T>,
    expand: ConvBlockCache<T>,
    shortcut: ConvBlockCache<T>,
    merged: Tensor<T>,
    pool_arg: Vec<u32>,
    output: Tensor<T>,
}

impl ResidualBlock {
    fn forward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        x: Tensor<T>,
        mode: Mode,
        up: &mut Vec<BnUpdate<T>>,
    ) -> ResidualCache<T> {
        let shortcut = self.shortcut.forward(p, x.clone(), mode, up);
        let reduce = self.reduce.forward(p, x, mode, up);
        let spatial = self.spatial.forward(p, reduce.output().clone(), mode, up);
        let expand = self.expand.forward(p, spatial.output().clone(), mode, up);
        let mut merged = expand.output().clone();
        merged.data_mut().iter_mut().zip(shortcut.output().data()).for_each(|(m, &s)| *m = (*m + s).max(T::zero()));
        let (output, pool_arg) = max_pool2(&merged);
        ResidualCache { reduce, spatial, expand, shortcut, merged, pool_arg, output }
    }

    fn backward<T: Real>(&self, p: &ModelParameters<T>, c: &ResidualCache<T>, dy: &Tensor<T>, g: &mut Gradients<T>) -> Tensor<T> {
        let mut dmerged = max_pool2_backward(c.merged.shape(), &c.pool_arg, dy);
        activate_backward(&c.merged, &mut dmerged, Activation::Relu);
        let dspatial = self.expand.backward(p, &c.expand, dmerged.clone(), g, true).expect("dx requested");
        let dreduce = self.spatial.backward(p, &c.spatial, dspatial, g, true).expect("dx requested");
        let mut dx = self.reduce.backward(p, &c.reduce, dreduce, g, true).expect("dx requested");
        let ds = self.shortcut.backward(p, &c.shortcut, dmerged, g, true).expect("dx requested");
        dx.data_mut().iter_mut().zip(ds.data()).for_each(|(a, &b)| *a += b);
        dx
    }
}

/// Cached activations of one forward pass over a batch of pairs.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pairs: usize,
    images: Tensor<T>,
    mask: Vec<ConvBlockCache<T>>,
    residual: Vec<ResidualCache<T>>,
    match12: MatchCache<T>,
    match21: MatchCache<T>,
    post: Vec<ConvBlockCache<T>>,
    fc_inputs: Vec<Tensor<T>>,
    /// Batch-norm statistics observed in training mode.
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// The siamese rotation regressor. Holds the layer wiring; weights live in
/// a separate [`ModelParameters`].
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    mask: Vec<ConvBlock>,
    residual: Vec<ResidualBlock>,
    post: Vec<ConvBlock>,
    fc: Vec<Linear>,
}

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::default();
        let mut mask = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.mask_channels.iter().enumerate() {
            let act = if i == 3 { Activation::Sigmoid } else { Activation::Relu };
            mask.push(layout.conv_block(&format!("mask.{i}"), cin, c, 3, act));
            cin = c;
        }
        let mut residual = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.extractor_channels.iter().enumerate() {
            let name = format!("extract.{i}");
            residual.push(ResidualBlock {
                reduce: layout.conv_block(&format!("{name}.reduce"), cin, c, 1, Activation::Relu),
                spatial: layout.conv_block(&format!("{name}.spatial"), c, c, 3, Activation::Relu),
                expand: layout.conv_block(&format!("{name}.expand"), c, c, 1, Activation::Identity),
                shortcut: layout.conv_block(&format!("{name}.shortcut"), cin, c, 1, Activation::Identity),
            });
            cin = c;
        }
        let (fh, fw) = config.feature_dims();
        let mut post = Vec::new();
        let mut cin = fh * fw;
        for (i, &c) in config.post_match_channels.iter().enumerate() {
            post.push(layout.conv_block(&format!("post.{i}"), cin, c, 3, Activation::Relu));
            cin = c;
        }
        let flat = 2 * cin * fh * fw;
        let [h1, h2] = config.fc_hidden;
        let fc = vec![
            layout.linear("fc.0", flat, h1, Init::He { fan_in: flat }, 0.0),
            layout.linear("fc.1", h1, h2, Init::He { fan_in: h1 }, 0.0),
            // start mid-range so the range penalty is inactive at initialization
            layout.linear("fc.2", h2, 1, Init::Scaled { fan_in: h2 }, 180.0 / config.output_scale),
        ];
        Ok(Self { config, specs: layout.specs, mask, residual, post, fc })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Freshly initialized weights (He-normal convolutions and hidden layers).
    pub fn init_parameters<T: Real>(&self, seed: u64) -> ModelParameters<T> {
        let mut params = ModelParameters::new();
        for (i, spec) in self.specs.iter().enumerate() {
            let len: usize = spec.shape.iter().product();
            let mut rng = stream(seed, Domain::Init, i as u64, 0);
            let values: Vec<T> = match spec.init {
                Init::Const(v) => vec![T::from_f64(v); len],
                Init::He { fan_in } | Init::Scaled { fan_in } => {
                    let gain = if matches!(spec.init, Init::He { .. }) { 2.0 } else { 1.0 };
                    let normal = Normal::new(0.0, libm::sqrt(gain / fan_in as f64)).expect("finite std");
                    (0..len).map(|_| T::from_f64(normal.sample(&mut rng))).collect()
                }
            };
            params.push(spec.name.clone(), spec.shape.clone(), values, spec.trainable);
        }
        params
    }

    /// Checks that `params` has exactly this network's layout.
    pub fn check_parameters<T: Real>(&self, params: &ModelParameters<T>) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(shape_err!("expected {} parameter tensors, got {}", self.specs.len(), params.len()));
        }
        for (spec, p) in self.specs.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.shape {
                return Err(shape_err!("parameter {} {:?} does not match {} {:?}", p.name, p.shape, spec.name, spec.shape));
            }
        }
        Ok(())
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        let want = [shape[0], 1, self.config.input_height, self.config.input_width];
        if shape != want || shape[0] == 0 {
            return Err(shape_err!("network expects [n, 1, {}, {}] input, got {:?}", want[2], want[3], shape));
        }
        Ok(())
    }

    /// Converts images to a batch tensor after applying the input representation.
    pub fn prepare_batch<T: Real>(&self, images: &[&Image]) -> Result<Tensor<T>> {
        let prepared: Vec<Image> = images.iter().map(|img| self.config.input_repr.prepare(img)).collect();
        let t = Tensor::from_images(prepared.iter())?;
        self.check_input(t.shape())?;
        Ok(t)
    }

    fn mask_forward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        images: &Tensor<T>,
        mode: Mode,
        up: &mut Vec<BnUpdate<T>>,
    ) -> Vec<ConvBlockCache<T>> {
        let mut caches: Vec<ConvBlockCache<T>> = Vec::with_capacity(4);
        for block in &self.mask {
            let input = caches.last().map_or_else(|| images.clone(), |c| c.output().clone());
            caches.push(block.forward(p, input, mode, up));
        }
        caches
    }

    fn extractor_forward<T: Real>(
        &self,
        p: &ModelParameters<T>,
        masked: Tensor<T>,
        mode: Mode,
        up: &mut Vec<BnUpdate<T>>,
    ) -> Vec<ResidualCache<T>> {
        let mut caches: Vec<ResidualCache<T>> = Vec::with_capacity(4);
        let mut x = masked;
        for block in &self.residual {
            let c = block.forward(p, x, mode, up);
            x = c.output.clone();
            caches.push(c);
        }
        caches
    }

    /// Soft mask in `[0, 1]` with the input's dimensions (inference mode).
    pub fn predict_mask<T: Real>(&self, p: &ModelParameters<T>, img: &Image) -> Result<Image> {
        let x = self.prepare_batch::<T>(&[img])?;
        let caches = self.mask_forward(p, &x, Mode::Eval, &mut Vec::new());
        let out = caches.last().expect("four mask blocks").output();
        Image::new(img.height(), img.width(), out.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Feature volume `[n, c, h/16, w/16]` of already-masked inputs (inference mode).
    pub fn extract_features<T: Real>(&self, p: &ModelParameters<T>, masked: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(masked.shape())?;
        let caches = self.extractor_forward(p, masked.clone(), Mode::Eval, &mut Vec::new());
        Ok(caches.last().expect("four residual blocks").output.clone())
    }

    /// Raw angle outputs (degrees, unconstrained) for a batch of pairs.
    pub fn forward_batch<T: Real>(
        &self,
        p: &ModelParameters<T>,
        first: &Tensor<T>,
        second: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Vec<T>, ForwardTrace<T>)> {
        self.check_input(first.shape())?;
        self.check_input(second.shape())?;
        if first.batch() != second.batch() {
            return Err(shape_err!("{} first images vs {} second images", first.batch(), second.batch()));
        }
        let n = first.batch();
        let mut up = Vec::new();
        let images = Tensor::concat(&[first, second])?;
        let mask = self.mask_forward(p, &images, mode, &mut up);
        let mut masked = mask.last().expect("mask blocks").output().clone();
        masked.data_mut().iter_mut().zip(images.data()).for_each(|(m, &x)| *m *= x);
        let residual = self.extractor_forward(p, masked, mode, &mut up);
        let features = &residual.last().expect("residual blocks").output;
        let f1 = features.slice_batch(0, n);
        let f2 = features.slice_batch(n, 2 * n);
        let (c12, match12) = match_with_cache(&f1, &f2);
        let (c21, match21) = match_with_cache(&f2, &f1);
        let mut post: Vec<ConvBlockCache<T>> = Vec::with_capacity(2);
        let mut x = Tensor::concat(&[&c12, &c21])?;
        for block in &self.post {
            let c = block.forward(p, x, mode, &mut up);
            x = c.output().clone();
            post.push(c);
        }
        let per = x.item_len();
        let mut flat = Tensor::zeros([n, 2 * per, 1, 1]);
        for i in 0..n {
            let dst = flat.item_mut(i);
            dst[..per].copy_from_slice(x.item(i));
            dst[per..].copy_from_slice(x.item(n + i));
        }
        let mut fc_inputs = Vec::with_capacity(3);
        let mut h = flat;
        for (k, layer) in self.fc.iter().enumerate() {
            let mut out = layer.forward(p, &h);
            if k < 2 {
                out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            fc_inputs.push(h);
            h = out;
        }
        let scale = T::from_f64(self.config.output_scale);
        let outputs = h.data().iter().map(|&v| v * scale).collect();
        Ok((outputs, ForwardTrace { pairs: n, images, mask, residual, match12, match21, post, fc_inputs, bn_updates: up }))
    }

    /// Accumulates parameter gradients given `d loss / d output` per pair.
    pub fn backward<T: Real>(&self, p: &ModelParameters<T>, trace: &ForwardTrace<T>, d_outputs: &[T], g: &mut Gradients<T>) {
        let n = trace.pairs;
        assert_eq!(d_outputs.len(), n, "one output gradient per pair");
        let scale = T::from_f64(self.config.output_scale);
        let mut dh = Tensor::from_vec([n, 1, 1, 1], d_outputs.iter().map(|&d| d * scale).collect()).expect("shape");
        for k in (0..3).rev() {
            let input = &trace.fc_inputs[k];
            let mut dx = self.fc[k].backward(p, input, &dh, g);
            if k > 0 {
                // input of layer k is the ReLU output of layer k - 1
                activate_backward(input, &mut dx, Activation::Relu);
            }
            dh = dx;
        }
        let post_out = trace.post.last().expect("post blocks").output();
        let per = post_out.item_len();
        let mut dpost = Tensor::zeros(post_out.shape());
        for i in 0..n {
            let src = dh.item(i);
            dpost.item_mut(i).copy_from_slice(&src[..per]);
            dpost.item_mut(n + i).copy_from_slice(&src[per..]);
        }
        for (block, cache) in self.post.iter().zip(&trace.post).rev() {
            dpost = block.backward(p, cache, dpost, g, true).expect("dx requested");
        }
        let dc12 = dpost.slice_batch(0, n);
        let dc21 = dpost.slice_batch(n, 2 * n);
        let (mut df1, mut df2) = match_features_backward(&trace.match12, &dc12);
        let (df2b, df1b) = match_features_backward(&trace.match21, &dc21);
        df1.data_mut().iter_mut().zip(df1b.data()).for_each(|(a, &b)| *a += b);
        df2.data_mut().iter_mut().zip(df2b.data()).for_each(|(a, &b)| *a += b);
        let mut dx = Tensor::concat(&[&df1, &df2]).expect("feature shapes agree");
        for (block, cache) in self.residual.iter().zip(&trace.residual).rev() {
            dx = block.backward(p, cache, &dx, g);
        }
        // masked = mask * image
        dx.data_mut().iter_mut().zip(trace.images.data()).for_each(|(d, &x)| *d *= x);
        let mut dmask = Some(dx);
        for (i, (block, cache)) in self.mask.iter().zip(&trace.mask).enumerate().rev() {
            dmask = block.backward(p, cache, dmask.expect("gradient flows"), g, i > 0);
        }
    }

    /// Raw output for a single pair in inference mode.
    pub fn forward<T: Real>(&self, p: &ModelParameters<T>, first: &Image, second: &Image) -> Result<f64> {
        let a = self.prepare_batch::<T>(&[first])?;
        let b = self.prepare_batch::<T>(&[second])?;
        let (out, _) = self.forward_batch(p, &a, &b, Mode::Eval)?;
        Ok(out[0].as_f64())
    }
}

/// Blends training-mode batch statistics into the running buffers.
pub fn apply_bn_updates<T: Real>(params: &mut ModelParameters<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in params.get_mut(u.running_mean).iter_mut().zip(&u.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in params.get_mut(u.running_var).iter_mut().zip(&u.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// Correlation volume between two feature tensors of equal shape.
pub fn match_features<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
    if f1.shape() != f2.shape() {
        return Err(shape_err!("feature shapes differ: {:?} vs {:?}", f1.shape(), f2.shape()));
    }
    Ok(match_with_cache(f1, f2).0)
}
