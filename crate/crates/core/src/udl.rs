//! Unsupervised difference learning.
//!
//! The network never sees a ground-truth angle. Each training step takes a
//! pair `(I1, I2)`, rotates (and shifts) the two images independently by
//! `alpha1` and `alpha2`, and asks that the change in the network output
//! equals the change in true relative rotation, `alpha1 - alpha2`. A
//! network satisfying this for every pair outputs the true angle plus a
//! constant, which a single labeled pair removes afterwards.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{make_quadruplet, AlignmentPair, PairSource};
use crate::error::{param_err, Error, Result};
use crate::geometry::Image;
use crate::math::{atan2_deg, sin_cos_deg, wrap, wrap_deg, Real};
use crate::network::{apply_bn_updates, Gradients, Mode, ModelParameters, Network, Tensor};
use crate::rng::{stream, Domain};

/// Distance between two angles in `[0, r)` on a circle of period `r`.
///
/// Besides the direct difference, the candidate shifted by one period
/// toward the other half of the range is considered; the smaller absolute
/// value wins. Equals `min(|a - b|, r - |a - b|)` bit for bit.
pub fn periodic_loss(a: f64, b: f64, r: f64) -> f64 {
    periodic_residual(a, b, r).abs()
}

/// Signed residual picked by [`periodic_loss`]; its sign is the derivative
/// of the loss with respect to `a`.
fn periodic_residual(a: f64, b: f64, r: f64) -> f64 {
    let d = a - b;
    let wrapped = if a >= r / 2.0 { d - r } else { d + r };
    if wrapped.abs() < d.abs() {
        wrapped
    } else {
        d
    }
}

/// Zero on `[0, r]`, linear outside.
pub fn range_penalty(a: f64, r: f64) -> f64 {
    (-a).max(0.0) + (a - r).max(0.0)
}

fn range_penalty_grad(a: f64, r: f64) -> f64 {
    if a < 0.0 {
        -1.0
    } else if a > r {
        1.0
    } else {
        0.0
    }
}

/// Penalty applied to the circular residual.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseLoss {
    #[default]
    L1,
    /// Quadratic below `beta` degrees, linear above.
    SmoothL1 { beta: f64 },
}

impl BaseLoss {
    /// Value and derivative with respect to the residual.
    fn eval(&self, x: f64) -> (f64, f64) {
        match *self {
            BaseLoss::L1 => (x.abs(), sign(x)),
            BaseLoss::SmoothL1 { beta } if x.abs() < beta => (0.5 * x * x / beta, x / beta),
            BaseLoss::SmoothL1 { beta } => (x.abs() - 0.5 * beta, sign(x)),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss on a pair of raw outputs: `p` for the original images, `p_d` for the
/// disturbed ones.
pub fn udl_loss(p: f64, p_d: f64, alpha1: f64, alpha2: f64, r: f64) -> f64 {
    udl_loss_grad(p, p_d, alpha1, alpha2, r, BaseLoss::L1).0
}

/// `(loss, d loss/d p, d loss/d p_d)`.
pub fn udl_loss_grad(p: f64, p_d: f64, alpha1: f64, alpha2: f64, r: f64, base: BaseLoss) -> (f64, f64, f64) {
    let diff = wrap(p - p_d, r);
    let label = wrap(alpha1 - alpha2, r);
    let (l, dl) = base.eval(periodic_residual(diff, label, r));
    let loss = l + range_penalty(p, r) + range_penalty(p_d, r);
    (loss, dl + range_penalty_grad(p, r), -dl + range_penalty_grad(p_d, r))
}

/// Loss of a raw output against a known angle.
pub fn supervised_loss(p: f64, gt_angle: f64, r: f64) -> f64 {
    supervised_loss_grad(p, gt_angle, r, BaseLoss::L1).0
}

/// `(loss, d loss/d p)`.
pub fn supervised_loss_grad(p: f64, gt_angle: f64, r: f64, base: BaseLoss) -> (f64, f64) {
    let (l, dl) = base.eval(periodic_residual(wrap(p, r), gt_angle, r));
    (l + range_penalty(p, r), dl + range_penalty_grad(p, r))
}

/// Which objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Udl,
    Supervised,
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate every `lr_decay_every` steps.
    pub lr_decay: f64,
    pub lr_decay_every: u64,
    pub iterations: u64,
    /// Period of the angle, in degrees.
    pub period: f64,
    pub mode: TrainMode,
    pub disturb_max_shift: u32,
    pub base_loss: BaseLoss,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: 0.8,
            lr_decay_every: 12_000,
            iterations: 60_000,
            period: 360.0,
            mode: TrainMode::Udl,
            disturb_max_shift: 10,
            base_loss: BaseLoss::L1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.period > 0.0) {
            return Err(param_err!("period must be positive"));
        }
        if self.batch_size == 0 {
            return Err(param_err!("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(param_err!("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(param_err!("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.lr_decay > 0.0) || self.lr_decay_every == 0 {
            return Err(param_err!("eps, lr_decay and lr_decay_every must be positive"));
        }
        if let BaseLoss::SmoothL1 { beta } = self.base_loss {
            if !(beta > 0.0) {
                return Err(param_err!("smooth-L1 beta must be positive"));
            }
        }
        Ok(())
    }

    /// Step size in effect at `iteration` (0-based).
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.learning_rate * libm::pow(self.lr_decay, (iteration / self.lr_decay_every) as f64)
    }
}

/// Adam moment estimates for every trainable tensor.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Gradients<T>,
    v: Gradients<T>,
    steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ModelParameters<T>) -> Self {
        Self { m: params.zero_gradients(), v: params.zero_gradients(), steps: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParameters<T>, grads: &Gradients<T>, cfg: &TrainConfig, lr: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        let c1 = 1.0 - libm::pow(cfg.beta1, t);
        let c2 = 1.0 - libm::pow(cfg.beta2, t);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = T::from_f64(lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(cfg.eps);
        for (k, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let id = crate::network::ParamId(k);
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                p.values[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based count of completed steps.
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Mini-batch optimizer state for one run.
#[derive(Debug)]
pub struct Trainer<'a> {
    network: &'a Network,
    config: TrainConfig,
    params: ModelParameters<f32>,
    grads: Gradients<f32>,
    adam: Adam<f32>,
    iteration: u64,
}

impl<'a> Trainer<'a> {
    /// Starts from `init` (warm start) or fresh weights seeded by the config.
    /// `start_iteration` continues the schedule of a resumed run.
    pub fn new(
        network: &'a Network,
        config: TrainConfig,
        init: Option<ModelParameters<f32>>,
        start_iteration: u64,
    ) -> Result<Self> {
        config.validate()?;
        let params = match init {
            Some(p) => {
                network.check_parameters(&p)?;
                p
            }
            None => network.init_parameters(config.seed),
        };
        Ok(Self {
            network,
            grads: params.zero_gradients(),
            adam: Adam::new(&params),
            params,
            config,
            iteration: start_iteration,
        })
    }

    pub fn params(&self) -> &ModelParameters<f32> {
        &self.params
    }

    pub fn into_params(self) -> ModelParameters<f32> {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed steps, including those of the run this one resumed.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Runs one optimization step on a batch drawn from `data`.
    pub fn step<S: PairSource + ?Sized>(&mut self, data: &S) -> Result<StepRecord> {
        if data.is_empty() {
            return Err(Error::Protocol("training set is empty".into()));
        }
        let cfg = &self.config;
        let it = self.iteration;
        let mut pick = stream(cfg.seed, Domain::Batch, it, 0);
        let batch: Vec<AlignmentPair> = (0..cfg.batch_size)
            .map(|_| data.pair(pick.random_range(0..data.len())))
            .collect::<Result<_>>()?;
        let b = batch.len();
        let mut labels = Vec::with_capacity(b);
        let (first, second): (Vec<Image>, Vec<Image>) = match cfg.mode {
            TrainMode::Udl => {
                let quads: Vec<_> = batch
                    .iter()
                    .enumerate()
                    .map(|(slot, pair)| {
                        let mut rng = stream(cfg.seed, Domain::Disturbance, it, slot as u64);
                        make_quadruplet(pair, cfg.disturb_max_shift, &mut rng)
                    })
                    .collect();
                labels.extend(quads.iter().map(|q| (q.alpha1(), q.alpha2())));
                // originals and disturbed copies go through one stacked pass
                let first = quads.iter().map(|q| q.i1.clone()).chain(quads.iter().map(|q| q.i1d.clone())).collect();
                let second = quads.iter().map(|q| q.i2.clone()).chain(quads.iter().map(|q| q.i2d.clone())).collect();
                (first, second)
            }
            TrainMode::Supervised => {
                for pair in &batch {
                    let gt = pair.gt.ok_or_else(|| Error::Protocol("supervised training needs ground truth".into()))?;
                    labels.push((gt.angle(), 0.0));
                }
                batch.into_iter().map(|p| (p.source, p.target)).unzip()
            }
        };
        let a: Tensor<f32> = self.network.prepare_batch(&first.iter().collect::<Vec<_>>())?;
        let c: Tensor<f32> = self.network.prepare_batch(&second.iter().collect::<Vec<_>>())?;
        let (out, trace) = self.network.forward_batch(&self.params, &a, &c, Mode::Train)?;

        let r = cfg.period;
        let mut total = 0.0;
        let mut d_out = alloc::vec![0.0f32; out.len()];
        let scale = 1.0 / b as f64;
        for (i, &(l1, l2)) in labels.iter().enumerate() {
            match cfg.mode {
                TrainMode::Udl => {
                    let (l, dp, dpd) = udl_loss_grad(out[i] as f64, out[b + i] as f64, l1, l2, r, cfg.base_loss);
                    total += l;
                    d_out[i] = (dp * scale) as f32;
                    d_out[b + i] = (dpd * scale) as f32;
                }
                TrainMode::Supervised => {
                    let (l, dp) = supervised_loss_grad(out[i] as f64, l1, r, cfg.base_loss);
                    total += l;
                    d_out[i] = (dp * scale) as f32;
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it + 1, loss });
        }
        self.grads.fill_zero();
        self.network.backward(&self.params, &trace, &d_out, &mut self.grads);
        if let Some(bad) = self.grads.iter().flatten().find(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: it + 1, loss: *bad as f64 });
        }
        let lr = cfg.lr_at(it);
        self.adam.step(&mut self.params, &self.grads, cfg, lr);
        apply_bn_updates(&mut self.params, &trace.bn_updates);
        self.iteration += 1;
        Ok(StepRecord { iteration: self.iteration, loss, lr })
    }
}

/// Runs `config.iterations` steps and reports each one to `on_step`.
pub fn train<S: PairSource + ?Sized>(
    network: &Network,
    data: &S,
    config: &TrainConfig,
    init: Option<ModelParameters<f32>>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(ModelParameters<f32>, Vec<StepRecord>)> {
    let mut trainer = Trainer::new(network, config.clone(), init, 0)?;
    let mut log = Vec::with_capacity(config.iterations as usize);
    for _ in 0..config.iterations {
        let rec = trainer.step(data)?;
        on_step(&rec);
        log.push(rec);
    }
    Ok((trainer.into_params(), log))
}

/// Anything that maps an image pair to a raw angle in degrees.
pub trait RotationEstimator {
    fn raw_angle(&self, first: &Image, second: &Image) -> Result<f64>;

    fn raw_angles(&self, pairs: &[(&Image, &Image)]) -> Result<Vec<f64>> {
        pairs.iter().map(|(a, b)| self.raw_angle(a, b)).collect()
    }
}

/// A network with trained weights, run in inference mode.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub params: ModelParameters<f32>,
}

impl TrainedModel {
    pub fn new(network: Network, params: ModelParameters<f32>) -> Result<Self> {
        network.check_parameters(&params)?;
        Ok(Self { network, params })
    }
}

const EVAL_CHUNK: usize = 32;

impl RotationEstimator for TrainedModel {
    fn raw_angle(&self, first: &Image, second: &Image) -> Result<f64> {
        self.network.forward(&self.params, first, second)
    }

    fn raw_angles(&self, pairs: &[(&Image, &Image)]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(EVAL_CHUNK) {
            let a: Vec<&Image> = chunk.iter().map(|p| p.0).collect();
            let b: Vec<&Image> = chunk.iter().map(|p| p.1).collect();
            let ta: Tensor<f32> = self.network.prepare_batch(&a)?;
            let tb: Tensor<f32> = self.network.prepare_batch(&b)?;
            let (y, _) = self.network.forward_batch(&self.params, &ta, &tb, Mode::Eval)?;
            out.extend(y.iter().map(|v| *v as f64));
        }
        Ok(out)
    }
}

/// Constant offset between raw outputs and true angles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasCalibration {
    /// Degrees in `[0, 360)`.
    pub c: f64,
    pub n_pairs: usize,
    /// Circular standard deviation of the per-pair offsets, in degrees.
    pub spread: f64,
}

/// Circular mean and circular standard deviation of angles in degrees.
pub fn circular_stats(angles: &[f64]) -> Option<(f64, f64)> {
    let first = *angles.first()?;
    if angles.iter().all(|&a| wrap_deg(a) == wrap_deg(first)) {
        return Some((wrap_deg(first), 0.0));
    }
    let (s, c) = angles.iter().fold((0.0, 0.0), |(s, c), &a| {
        let (sa, ca) = sin_cos_deg(a);
        (s + sa, c + ca)
    });
    let n = angles.len() as f64;
    let resultant = (libm::hypot(s, c) / n).min(1.0);
    let spread = if resultant > 0.0 { libm::sqrt(-2.0 * libm::log(resultant)).to_degrees() } else { f64::INFINITY };
    Some((atan2_deg(s, c), spread))
}

/// Offset `c` such that `raw - c` is the true angle, from labeled pairs.
pub fn calibrate_bias<E: RotationEstimator + ?Sized>(model: &E, labeled: &[AlignmentPair]) -> Result<BiasCalibration> {
    if labeled.is_empty() {
        return Err(param_err!("calibration needs at least one labeled pair"));
    }
    let gts = labeled
        .iter()
        .map(|p| p.gt.map(|t| t.angle()).ok_or_else(|| Error::Protocol("calibration pair has no ground truth".into())))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<(&Image, &Image)> = labeled.iter().map(|p| (&p.source, &p.target)).collect();
    let raw = model.raw_angles(&refs)?;
    let offsets: Vec<f64> = raw.iter().zip(&gts).map(|(r, g)| wrap_deg(r - g)).collect();
    let (c, spread) = circular_stats(&offsets).expect("non-empty");
    Ok(BiasCalibration { c, n_pairs: labeled.len(), spread })
}

/// Rotation from `first` to `second` in `[0, 360)`.
pub fn predict_rotation<E: RotationEstimator + ?Sized>(
    model: &E,
    calib: &BiasCalibration,
    first: &Image,
    second: &Image,
) -> Result<f64> {
    Ok(wrap_deg(model.raw_angle(first, second)? - calib.c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_pairs, quadruplet_with, synthetic_texture, PairGenConfig};
    use crate::evaluation::angle_error;
    use crate::geometry::RigidTransform;
    use crate::network::NetworkConfig;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    /// Brute force over the three period shifts of `a`.
    fn wrap_oracle(a: f64, b: f64, r: f64) -> f64 {
        [-1.0, 0.0, 1.0].iter().map(|k| (a + k * r - b).abs()).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn periodic_loss_examples() {
        assert_eq!(periodic_loss(10.0, 10.0, 360.0), 0.0);
        assert_eq!(periodic_loss(359.0, 1.0, 360.0), wrap_oracle(359.0, 1.0, 360.0));
        assert_eq!(periodic_loss(359.0, 1.0, 360.0), 2.0);
        assert_eq!(periodic_loss(180.0, 0.0, 360.0), 180.0);
    }

    #[test]
    fn periodic_loss_is_the_circular_distance() {
        let mut rng = stream(1, Domain::Test, 0, 0);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(0.0..360.0);
            let b: f64 = rng.random_range(0.0..360.0);
            let d = (a - b).abs();
            assert_eq!(periodic_loss(a, b, 360.0), d.min(360.0 - d));
            assert_eq!(periodic_loss(a, b, 360.0), periodic_loss(b, a, 360.0));
        }
    }

    #[test]
    fn range_penalty_examples() {
        assert_eq!(range_penalty(180.0, 360.0), 0.0);
        assert_eq!(range_penalty(-5.0, 360.0), 5.0);
        assert_eq!(range_penalty(365.0, 360.0), 5.0);
        assert_eq!(range_penalty(0.0, 360.0), 0.0);
        assert_eq!(range_penalty(360.0, 360.0), 0.0);
    }

    #[test]
    fn udl_loss_examples() {
        assert_eq!(udl_loss(40.0, 40.0, 70.0, 70.0, 360.0), 0.0);
        // (400 - 30) mod 360 = 10 matches the label; only the penalty on 400 remains
        assert_eq!(udl_loss(400.0, 30.0, 25.0, 15.0, 360.0), 40.0);
    }

    #[test]
    fn supervised_loss_examples() {
        assert_eq!(supervised_loss(123.0, 123.0, 360.0), 0.0);
        assert_eq!(supervised_loss(360.0, 0.0, 360.0), 0.0);
        assert_eq!(supervised_loss(350.0, 10.0, 360.0), 20.0);
        assert_eq!(supervised_loss(-10.0, 350.0, 360.0), 10.0);
    }

    /// Raw output of a model that knows the true rotation, offset by `c`.
    fn oracle_output(gt: f64, c: f64) -> f64 {
        wrap_deg(gt + c)
    }

    #[test]
    fn oracle_outputs_have_zero_loss() {
        let mut rng = stream(2, Domain::Test, 0, 0);
        for _ in 0..1000 {
            let gt: f64 = rng.random_range(0.0..360.0);
            let c: f64 = rng.random_range(0.0..360.0);
            let a1: f64 = rng.random_range(0.0..360.0);
            let a2: f64 = rng.random_range(0.0..360.0);
            // relative rotation of the disturbed pair: gt + alpha2 - alpha1
            let p = oracle_output(gt, c);
            let pd = oracle_output(gt + a2 - a1, c);
            assert!(udl_loss(p, pd, a1, a2, 360.0) < 1e-9);
        }
    }

    #[test]
    fn udl_gradient_matches_central_differences() {
        let mut rng = stream(3, Domain::Test, 0, 0);
        let mut checked = 0;
        while checked < 100 {
            let p: f64 = rng.random_range(-60.0..420.0);
            let pd: f64 = rng.random_range(-60.0..420.0);
            let a1: f64 = rng.random_range(0.0..360.0);
            let a2: f64 = rng.random_range(0.0..360.0);
            let label = wrap_deg(a1 - a2);
            let diff = wrap_deg(p - pd);
            let h = 1e-6;
            // skip the non-smooth set: range edges, wrap seams and loss kinks
            let near = |x: f64, k: f64| (x - k).abs() < 1e-3;
            if near(p, 0.0) || near(p, 360.0) || near(pd, 0.0) || near(pd, 360.0) {
                continue;
            }
            if near(diff, 0.0) || near(diff, 360.0) || near(diff, label) || near((diff - label).abs(), 180.0) {
                continue;
            }
            for base in [BaseLoss::L1, BaseLoss::SmoothL1 { beta: 5.0 }] {
                let (_, gp, gpd) = udl_loss_grad(p, pd, a1, a2, 360.0, base);
                let f = |p: f64, pd: f64| udl_loss_grad(p, pd, a1, a2, 360.0, base).0;
                let np = (f(p + h, pd) - f(p - h, pd)) / (2.0 * h);
                let npd = (f(p, pd + h) - f(p, pd - h)) / (2.0 * h);
                for (an, nu) in [(gp, np), (gpd, npd)] {
                    assert!((an - nu).abs() <= 1e-4 * an.abs().max(nu.abs()).max(1e-12), "{an} vs {nu}");
                }
            }
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn bias_shift_leaves_loss_unchanged(gt in 0.0..360.0f64, c in 0.0..360.0f64, shift in 0.0..360.0f64,
                                            a1 in 0.0..360.0f64, a2 in 0.0..360.0f64) {
            let base = udl_loss(oracle_output(gt, c), oracle_output(gt + a2 - a1, c), a1, a2, 360.0);
            let moved = udl_loss(oracle_output(gt, c + shift), oracle_output(gt + a2 - a1, c + shift), a1, a2, 360.0);
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn predict_rotation_stays_in_range(raw in -1e4..1e4f64, c in 0.0..360.0f64) {
            let calib = BiasCalibration { c, n_pairs: 1, spread: 0.0 };
            let got = predict_rotation(&Constant(raw), &calib, &Image::zeros(1, 1), &Image::zeros(1, 1)).unwrap();
            prop_assert!((0.0..360.0).contains(&got));
        }

        #[test]
        fn periodic_loss_symmetric(a in 0.0..360.0f64, b in 0.0..360.0f64) {
            prop_assert_eq!(periodic_loss(a, b, 360.0), periodic_loss(b, a, 360.0));
        }
    }

    struct Constant(f64);

    impl RotationEstimator for Constant {
        fn raw_angle(&self, _: &Image, _: &Image) -> Result<f64> {
            Ok(self.0)
        }
    }

    /// Knows the ground truth of each pair by looking it up by target pixels.
    struct BiasedOracle {
        pairs: Vec<AlignmentPair>,
        bias: f64,
    }

    impl RotationEstimator for BiasedOracle {
        fn raw_angle(&self, _: &Image, second: &Image) -> Result<f64> {
            let p = self.pairs.iter().find(|p| &p.target == second).expect("known pair");
            Ok(wrap_deg(p.gt.unwrap().angle() + self.bias))
        }
    }

    fn labeled(angles: &[f64]) -> Vec<AlignmentPair> {
        angles
            .iter()
            .enumerate()
            .map(|(i, &a)| AlignmentPair {
                source: Image::zeros(16, 16),
                target: Image::filled(16, 16, i as f32),
                gt: Some(RigidTransform::rotation(a)),
                noise: Default::default(),
            })
            .collect()
    }

    #[test]
    fn calibration_recovers_the_bias() {
        let pairs = labeled(&[10.0, 200.0, 355.0]);
        let oracle = BiasedOracle { pairs: pairs.clone(), bias: 25.0 };
        let one = calibrate_bias(&oracle, &pairs[..1]).unwrap();
        assert_eq!(one.c, 25.0);
        let all = calibrate_bias(&oracle, &pairs).unwrap();
        assert!(angle_error(all.c, 25.0) < 1e-9);
        assert_eq!(all.spread, 0.0);
        assert_eq!(all.n_pairs, 3);
        assert!(calibrate_bias(&oracle, &[]).is_err());
        let mut unlabeled = pairs[..1].to_vec();
        unlabeled[0].gt = None;
        assert!(matches!(calibrate_bias(&oracle, &unlabeled), Err(Error::Protocol(_))));
    }

    #[test]
    fn circular_mean_handles_wraparound() {
        let (c, spread) = circular_stats(&[359.0, 1.0]).unwrap();
        assert!(angle_error(c, 0.0) < 1e-9, "{c}");
        assert!(spread > 0.9 && spread < 1.1);
    }

    #[test]
    fn predict_rotation_examples() {
        let calib = BiasCalibration { c: 30.0, n_pairs: 1, spread: 0.0 };
        let img = Image::zeros(1, 1);
        assert_eq!(predict_rotation(&Constant(10.0), &calib, &img, &img).unwrap(), 340.0);
        assert_eq!(predict_rotation(&Constant(30.0), &calib, &img, &img).unwrap(), 0.0);
        assert_eq!(predict_rotation(&Constant(75.0), &calib, &img, &img).unwrap(), 45.0);
    }

    #[test]
    fn lr_schedule_decays_stepwise() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 5e-4);
        assert_eq!(cfg.lr_at(11_999), 5e-4);
        assert!((cfg.lr_at(12_000) - 4e-4).abs() < 1e-15);
        assert!((cfg.lr_at(24_000) - 3.2e-4).abs() < 1e-15);
    }

    #[test]
    fn quadruplet_labels_are_consistent_with_disturbances() {
        let pair = labeled(&[0.0]).remove(0);
        let q = quadruplet_with(&pair, RigidTransform::rotation(350.0), RigidTransform::rotation(20.0));
        assert_eq!(udl_loss(100.0, wrap_deg(100.0 - 330.0), q.alpha1(), q.alpha2(), 360.0), 0.0);
    }

    fn toy_setup(count: usize) -> (Network, Vec<AlignmentPair>) {
        let mut cfg = NetworkConfig::reduced(32, 32);
        cfg.fc_hidden = [32, 32];
        let sources: Vec<Image> =
            (0..4).map(|s| synthetic_texture(80, 80, 80, &mut stream(s, Domain::Test, 7, 0))).collect();
        let pairs = generate_pairs(&sources, count, &PairGenConfig::new(32, 3), 5).unwrap();
        (Network::new(cfg).unwrap(), pairs.into_iter().map(|g| g.pair).collect())
    }

    fn small_train_config(mode: TrainMode) -> TrainConfig {
        TrainConfig { batch_size: 4, iterations: 6, mode, disturb_max_shift: 2, seed: 9, ..TrainConfig::default() }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let (net, data) = toy_setup(12);
        for mode in [TrainMode::Udl, TrainMode::Supervised] {
            let cfg = small_train_config(mode);
            let (p1, log1) = train(&net, &data, &cfg, None, |_| {}).unwrap();
            let (p2, log2) = train(&net, &data, &cfg, None, |_| {}).unwrap();
            assert_eq!(log1, log2);
            assert_eq!(p1, p2);
            assert!(log1.iter().all(|r| r.loss.is_finite() && r.lr == 5e-4));
            assert_eq!(log1.last().unwrap().iteration, 6);
        }
    }

    #[test]
    fn warm_start_reproduces_checkpoint_outputs() {
        let (net, data) = toy_setup(4);
        let (params, _) = train(&net, &data, &small_train_config(TrainMode::Udl), None, |_| {}).unwrap();
        let trainer = Trainer::new(&net, small_train_config(TrainMode::Udl), Some(params.clone()), 6).unwrap();
        assert_eq!(trainer.iteration(), 6);
        let model = TrainedModel::new(net.clone(), params).unwrap();
        let warm = TrainedModel::new(net.clone(), trainer.params().clone()).unwrap();
        for p in &data {
            assert_eq!(model.raw_angle(&p.source, &p.target).unwrap(), warm.raw_angle(&p.source, &p.target).unwrap());
        }
    }

    #[test]
    fn batched_inference_matches_single_pairs() {
        let (net, data) = toy_setup(5);
        let model = TrainedModel::new(net.clone(), net.init_parameters(3)).unwrap();
        let refs: Vec<(&Image, &Image)> = data.iter().map(|p| (&p.source, &p.target)).collect();
        let batched = model.raw_angles(&refs).unwrap();
        for (p, b) in data.iter().zip(batched) {
            assert!((model.raw_angle(&p.source, &p.target).unwrap() - b).abs() < 1e-3);
        }
    }

    #[test]
    fn supervised_mode_requires_ground_truth() {
        let (net, mut data) = toy_setup(3);
        data.iter_mut().for_each(|p| p.gt = None);
        let err = train(&net, &data, &small_train_config(TrainMode::Supervised), None, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (net, data) = toy_setup(3);
        let mut params = net.init_parameters::<f32>(1);
        let id = params.find("fc.2.bias").unwrap();
        params.get_mut(id)[0] = f32::NAN;
        let err = train(&net, &data, &small_train_config(TrainMode::Udl), Some(params), |_| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 1, .. }));
    }

    #[test]
    fn invalid_train_config_is_rejected() {
        for cfg in [
            TrainConfig { period: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
