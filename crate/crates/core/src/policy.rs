//! Neural policy mean `mu(x; w)`: a one-hidden-layer perceptron with tanh
//! hidden units and a sigmoid output scaled to the control range, trained by
//! precision-weighted regression onto guiding-controller means.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilqr::LinearGaussianController;

pub const CHECKPOINT_SCHEMA: &str = "coldspray-policy/v1";

/// Maps a flattened simulator state `(d, p, h, alpha)` to network inputs
/// `(d / height_scale, (p - position_offset) / position_scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub n_cells: usize,
    pub height_scale: f64,
    pub position_offset: f64,
    pub position_scale: f64,
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        self.n_cells + 1
    }

    pub fn features(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.n_cells;
        let mut f = DVector::zeros(n + 1);
        for i in 0..n {
            f[i] = x[i] / self.height_scale;
        }
        f[n] = (x[n] - self.position_offset) / self.position_scale;
        f
    }

    /// `d features / d state`, a `(n_cells + 1) x (n_cells + 3)` matrix.
    pub fn jacobian(&self, state_dim: usize) -> DMatrix<f64> {
        let n = self.n_cells;
        let mut j = DMatrix::zeros(n + 1, state_dim);
        for i in 0..n {
            j[(i, i)] = 1.0 / self.height_scale;
        }
        j[(n, n)] = 1.0 / self.position_scale;
        j
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    /// Hidden layer, `n_hidden x n_in`.
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// Output layer, `n_out x n_hidden`.
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub u_min: f64,
    pub u_max: f64,
}

/// Gradient with the same shapes as [`MlpWeights`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

struct ForwardCache {
    hidden: DVector<f64>,
    sig: DVector<f64>,
    out: DVector<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl MlpWeights {
    /// Uniform initialization in `+-1/sqrt(fan_in)` per layer.
    pub fn init(n_in: usize, n_hidden: usize, n_out: usize, u_min: f64, u_max: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r1 = 1.0 / (n_in as f64).sqrt();
        let r2 = 1.0 / (n_hidden as f64).sqrt();
        let w1 = DMatrix::from_fn(n_hidden, n_in, |_, _| rng.random_range(-r1..r1));
        let b1 = DVector::from_fn(n_hidden, |_, _| rng.random_range(-r1..r1));
        let w2 = DMatrix::from_fn(n_out, n_hidden, |_, _| rng.random_range(-r2..r2));
        let b2 = DVector::from_fn(n_out, |_, _| rng.random_range(-r2..r2));
        Self {
            w1,
            b1,
            w2,
            b2,
            u_min,
            u_max,
        }
    }

    pub fn zeros(n_in: usize, n_hidden: usize, n_out: usize, u_min: f64, u_max: f64) -> Self {
        Self {
            w1: DMatrix::zeros(n_hidden, n_in),
            b1: DVector::zeros(n_hidden),
            w2: DMatrix::zeros(n_out, n_hidden),
            b2: DVector::zeros(n_out),
            u_min,
            u_max,
        }
    }

    pub fn n_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn n_hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w2.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut it = flat.iter().copied();
        for x in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *x = it.next().expect("length checked");
        }
    }

    fn forward_cached(&self, features: &DVector<f64>) -> Result<ForwardCache> {
        if features.len() != self.n_in() {
            return Err(Error::DimensionMismatch {
                expected: self.n_in(),
                found: features.len(),
            });
        }
        let hidden = (&self.w1 * features + &self.b1).map(f64::tanh);
        let sig = (&self.w2 * &hidden + &self.b2).map(sigmoid);
        let range = self.u_max - self.u_min;
        let out = sig.map(|s| self.u_min + range * s);
        Ok(ForwardCache { hidden, sig, out })
    }
}

impl MlpGradient {
    fn zeros_like(w: &MlpWeights) -> Self {
        Self {
            w1: DMatrix::zeros(w.w1.nrows(), w.w1.ncols()),
            b1: DVector::zeros(w.b1.len()),
            w2: DMatrix::zeros(w.w2.nrows(), w.w2.ncols()),
            b2: DVector::zeros(w.b2.len()),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.w1.iter());
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.extend(self.b2.iter());
        v
    }
}

/// Policy mean for already-mapped `features`.
pub fn forward(weights: &MlpWeights, features: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(weights.forward_cached(features)?.out)
}

/// One supervised sample for the distillation objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: DVector<f64>,
    /// Guide mean `mu_q(x)`.
    pub target: DVector<f64>,
    /// Guide precision `Sigma_q^-1`.
    pub precision: DMatrix<f64>,
    pub nu: f64,
    pub lambda: DVector<f64>,
}

/// `(1 / 2N) * sum [nu (mu_q - mu)' P (mu_q - mu) + 2 lambda' mu]` and its
/// gradient by backpropagation. `normalizer` is `N`, the number of sampled
/// trajectories per guide.
pub fn loss_and_grad(
    weights: &MlpWeights,
    batch: &[TrainingSample],
    normalizer: f64,
) -> Result<(f64, MlpGradient)> {
    let mut grad = MlpGradient::zeros_like(weights);
    let mut loss = 0.0;
    let range = weights.u_max - weights.u_min;
    for s in batch {
        let cache = weights.forward_cached(&s.features)?;
        let diff = &s.target - &cache.out;
        let pd = &s.precision * &diff;
        loss += s.nu * diff.dot(&pd) + 2.0 * s.lambda.dot(&cache.out);
        // d loss / d mu, already divided by 2N
        let g_out = (&s.lambda - pd * s.nu) / normalizer;
        let delta2 = g_out.zip_map(&cache.sig, |g, sg| g * range * sg * (1.0 - sg));
        grad.w2 += &delta2 * cache.hidden.transpose();
        grad.b2 += &delta2;
        let back = weights.w2.transpose() * &delta2;
        let delta1 = back.zip_map(&cache.hidden, |b, h| b * (1.0 - h * h));
        grad.w1 += &delta1 * s.features.transpose();
        grad.b1 += &delta1;
    }
    Ok((loss / (2.0 * normalizer), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs: 200,
            batch_size: 32,
            seed: 7,
            hidden: 10,
            u_min: 0.0,
            u_max: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.u_min < self.u_max) || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "training needs learning_rate > 0, batch_size > 0 and u_min < u_max".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Full-dataset loss after each epoch.
    pub epoch_losses: Vec<f64>,
    /// Step size after the last halving.
    #[serde(default)]
    pub final_step_size: f64,
}

/// Mean of `nu * tr(P) / n_out` over the dataset times `len / normalizer`,
/// the average curvature of the loss in the network output. The step size is
/// divided by it so that `learning_rate` does not depend on the precision
/// scale or on the number of samples per trajectory.
pub fn loss_scale(samples: &[TrainingSample], normalizer: f64) -> f64 {
    if samples.is_empty() || !(normalizer > 0.0) {
        return 1.0;
    }
    let s: f64 = samples
        .iter()
        .map(|s| s.nu * s.precision.trace() / s.precision.nrows() as f64)
        .sum::<f64>()
        / normalizer;
    if s.is_finite() && s > 0.0 {
        s
    } else {
        1.0
    }
}

const DIVERGENCE_RATIO: f64 = 2.0;

/// Minibatch gradient descent with momentum. An epoch whose full-dataset
/// loss exceeds the best so far by more than `DIVERGENCE_RATIO - 1` times its
/// magnitude is undone, the momentum cleared and the step size halved.
/// Returns the weights with the lowest full-dataset loss seen (the initial
/// weights included).
pub fn train(
    weights: &MlpWeights,
    dataset: &[TrainingSample],
    normalizer: f64,
    config: &TrainConfig,
) -> Result<(MlpWeights, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training dataset is empty".into()));
    }
    let (initial_loss, _) = loss_and_grad(weights, dataset, normalizer)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut report = TrainReport {
        initial_loss,
        final_loss: initial_loss,
        epoch_losses: Vec::with_capacity(config.epochs),
        final_step_size: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = config.learning_rate / loss_scale(dataset, normalizer);
    let mut current = weights.clone();
    let mut best = weights.clone();
    let mut params = current.to_flat();
    let mut velocity = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let total = dataset.len() as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainingSample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let batch_norm = normalizer * batch.len() as f64 / total;
            let (_, g) = loss_and_grad(&current, &batch, batch_norm)?;
            for ((p, v), gi) in params.iter_mut().zip(velocity.iter_mut()).zip(g.to_flat()) {
                *v = config.momentum * *v - step * gi;
                *p += *v;
            }
            current.set_flat(&params);
        }
        let (loss, _) = loss_and_grad(&current, dataset, normalizer)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
        }
        report.epoch_losses.push(loss);
        if loss < report.final_loss {
            report.final_loss = loss;
            best = current.clone();
        } else if loss - report.final_loss > (DIVERGENCE_RATIO - 1.0) * report.final_loss.abs() {
            current = best.clone();
            params = current.to_flat();
            velocity.iter_mut().for_each(|v| *v = 0.0);
            step *= 0.5;
        }
    }
    report.final_step_size = step;
    Ok((best, report))
}

/// `[ (1/MT) sum_i sum_t Sigma_{i,t}^-1 ]^-1` over every guide and step.
pub fn policy_covariance(guides: &[LinearGaussianController]) -> Result<DMatrix<f64>> {
    let covs: Vec<&DMatrix<f64>> = guides.iter().flat_map(|g| g.covariances.iter()).collect();
    mean_precision_inverse(&covs)
}

pub(crate) fn mean_precision_inverse(covs: &[&DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = covs.first().ok_or(Error::SingularPrecision)?;
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for c in covs {
        acc += spd_inverse(c).ok_or(Error::SingularPrecision)?;
    }
    acc /= covs.len() as f64;
    spd_inverse(&acc).ok_or(Error::SingularPrecision)
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    Some((&inv + inv.transpose()) * 0.5)
}

/// Neural mean plus the state-independent covariance `Sigma_pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub weights: MlpWeights,
    pub sigma_pi: DMatrix<f64>,
    pub features: FeatureMap,
}

impl PolicyParams {
    pub fn mean(&self, state: &DVector<f64>) -> Result<DVector<f64>> {
        forward(&self.weights, &self.features.features(state))
    }

    /// Log of the Gaussian density `N(u; mu(x), Sigma_pi)`.
    pub fn log_density(&self, u: &DVector<f64>, state: &DVector<f64>) -> Result<f64> {
        let mean = self.mean(state)?;
        gaussian_log_density(u, &mean, &self.sigma_pi)
    }

    /// `d mu / d state` by central differences over the network inputs.
    pub fn mean_jacobian(&self, state: &DVector<f64>) -> Result<DMatrix<f64>> {
        let f = self.features.features(state);
        let jf = crate::model::fd_jacobian(&f, |fp| forward(&self.weights, fp))?;
        Ok(jf * self.features.jacobian(state.len()))
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let text = serde_json::to_string_pretty(&PolicyCheckpoint::from(self))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: PolicyCheckpoint = serde_json::from_str(&text)?;
        ck.try_into()
    }
}

pub fn gaussian_log_density(u: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    if u.len() != mean.len() || cov.nrows() != u.len() {
        return Err(Error::DimensionMismatch {
            expected: cov.nrows(),
            found: u.len(),
        });
    }
    let chol = cov.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let r = u - mean;
    let sol = chol.solve(&r);
    let log_det: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let k = u.len() as f64;
    Ok(-0.5 * (r.dot(&sol) + log_det + k * (2.0 * std::f64::consts::PI).ln()))
}

/// On-disk policy format: row-major flat arrays plus everything needed to
/// rebuild the feature map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub schema: String,
    pub layer_dims: [usize; 3],
    pub u_min: f64,
    pub u_max: f64,
    pub feature_map: FeatureMap,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub sigma_pi: Vec<Vec<f64>>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().iter().copied().collect()
}

impl From<&PolicyParams> for PolicyCheckpoint {
    fn from(p: &PolicyParams) -> Self {
        let w = &p.weights;
        Self {
            schema: CHECKPOINT_SCHEMA.to_string(),
            layer_dims: [w.n_in(), w.n_hidden(), w.n_out()],
            u_min: w.u_min,
            u_max: w.u_max,
            feature_map: p.features,
            w1: row_major(&w.w1),
            b1: w.b1.iter().copied().collect(),
            w2: row_major(&w.w2),
            b2: w.b2.iter().copied().collect(),
            sigma_pi: p
                .sigma_pi
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

impl TryFrom<PolicyCheckpoint> for PolicyParams {
    type Error = Error;

    fn try_from(ck: PolicyCheckpoint) -> Result<Self> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(Error::IncompatibleCheckpoint(format!("unknown schema {}", ck.schema)));
        }
        let [n_in, n_hidden, n_out] = ck.layer_dims;
        let bad = |what: &str| Error::IncompatibleCheckpoint(format!("{what} has the wrong length"));
        if ck.w1.len() != n_in * n_hidden {
            return Err(bad("w1"));
        }
        if ck.b1.len() != n_hidden {
            return Err(bad("b1"));
        }
        if ck.w2.len() != n_hidden * n_out {
            return Err(bad("w2"));
        }
        if ck.b2.len() != n_out {
            return Err(bad("b2"));
        }
        if ck.sigma_pi.len() != n_out || ck.sigma_pi.iter().any(|r| r.len() != n_out) {
            return Err(bad("sigma_pi"));
        }
        if ck.feature_map.input_dim() != n_in {
            return Err(Error::IncompatibleCheckpoint(format!(
                "feature map yields {} inputs but the network takes {n_in}",
                ck.feature_map.input_dim()
            )));
        }
        Ok(Self {
            weights: MlpWeights {
                w1: DMatrix::from_row_slice(n_hidden, n_in, &ck.w1),
                b1: DVector::from_vec(ck.b1),
                w2: DMatrix::from_row_slice(n_out, n_hidden, &ck.w2),
                b2: DVector::from_vec(ck.b2),
                u_min: ck.u_min,
                u_max: ck.u_max,
            },
            sigma_pi: DMatrix::from_fn(n_out, n_out, |r, c| ck.sigma_pi[r][c]),
            features: ck.feature_map,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n_in: usize, n_out: usize, seed: u64) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = DMatrix::from_fn(n_out, n_out, |_, _| rng.random_range(-1.0..1.0));
        TrainingSample {
            features: DVector::from_fn(n_in, |_, _| rng.random_range(-1.0..1.0)),
            target: DVector::from_fn(n_out, |_, _| rng.random_range(0.5..4.5)),
            precision: &l * l.transpose() + DMatrix::identity(n_out, n_out),
            nu: rng.random_range(0.1..2.0),
            lambda: DVector::from_fn(n_out, |_, _| rng.random_range(-0.5..0.5)),
        }
    }

    #[test]
    fn zero_weights_give_mid_range() {
        let w = MlpWeights::zeros(4, 3, 1, 0.0, 5.0);
        let out = forward(&w, &DVector::from_vec(vec![1.0, -2.0, 3.0, 0.5])).unwrap();
        assert_eq!(out[0], 2.5);
    }

    #[test]
    fn output_bounded_for_huge_weights() {
        let mut w = MlpWeights::init(6, 10, 1, 0.0, 5.0, 3);
        w.w1 *= 1e3;
        w.w2 *= 1e3;
        for k in 0..20 {
            let f = DVector::from_fn(6, |i, _| ((i + k) as f64).sin() * 10.0);
            let y = forward(&w, &f).unwrap()[0];
            assert!((0.0..=5.0).contains(&y));
        }
    }

    #[test]
    fn forward_rejects_wrong_length() {
        let w = MlpWeights::zeros(4, 3, 1, 0.0, 5.0);
        assert!(matches!(
            forward(&w, &DVector::zeros(3)),
            Err(Error::DimensionMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn loss_zero_when_policy_matches_targets() {
        let w = MlpWeights::init(5, 3, 1, 0.0, 5.0, 11);
        let mut batch: Vec<TrainingSample> = (0..4).map(|k| sample(5, 1, k)).collect();
        for s in batch.iter_mut() {
            s.target = forward(&w, &s.features).unwrap();
            s.lambda.fill(0.0);
        }
        let (loss, g) = loss_and_grad(&w, &batch, 2.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lambda_adds_linear_gradient_term() {
        let w = MlpWeights::init(5, 3, 1, 0.0, 5.0, 5);
        let batch: Vec<TrainingSample> = (0..6).map(|k| sample(5, 1, 100 + k)).collect();
        let no_lambda: Vec<TrainingSample> = batch
            .iter()
            .cloned()
            .map(|mut s| {
                s.lambda.fill(0.0);
                s
            })
            .collect();
        let n = 3.0;
        let (_, g) = loss_and_grad(&w, &batch, n).unwrap();
        let (_, g0) = loss_and_grad(&w, &no_lambda, n).unwrap();
        // (1/N) sum lambda' d mu / d w via finite differences of the mean
        let flat = w.to_flat();
        let mut expected = vec![0.0; flat.len()];
        for k in 0..flat.len() {
            let h = 1e-6;
            let mut wp = w.clone();
            let mut fp = flat.clone();
            fp[k] += h;
            wp.set_flat(&fp);
            let mut wm = w.clone();
            let mut fm = flat.clone();
            fm[k] -= h;
            wm.set_flat(&fm);
            for s in &batch {
                let dp = forward(&wp, &s.features).unwrap();
                let dm = forward(&wm, &s.features).unwrap();
                expected[k] += s.lambda.dot(&((dp - dm) / (2.0 * h))) / n;
            }
        }
        for ((a, b), e) in g.to_flat().iter().zip(g0.to_flat()).zip(expected) {
            assert!((a - b - e).abs() < 1e-8, "{} vs {}", a - b, e);
        }
    }

    #[test]
    fn training_is_deterministic_and_fits_single_sample() {
        let w = MlpWeights::init(3, 4, 1, 0.0, 5.0, 1);
        let s = TrainingSample {
            features: DVector::from_vec(vec![0.2, -0.4, 0.9]),
            target: DVector::from_element(1, 3.7),
            precision: DMatrix::identity(1, 1),
            nu: 1.0,
            lambda: DVector::zeros(1),
        };
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 2000,
            batch_size: 1,
            ..Default::default()
        };
        let (a, ra) = train(&w, std::slice::from_ref(&s), 1.0, &cfg).unwrap();
        let (b, _) = train(&w, std::slice::from_ref(&s), 1.0, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(ra.final_loss <= ra.initial_loss);
        let y = forward(&a, &s.features).unwrap()[0];
        assert!((y - 3.7).abs() < 1e-3, "fitted {y}");
    }

    #[test]
    fn zero_epochs_leave_weights_unchanged() {
        let w = MlpWeights::init(3, 4, 1, 0.0, 5.0, 2);
        let data = vec![sample(3, 1, 9)];
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, rep) = train(&w, &data, 1.0, &cfg).unwrap();
        assert_eq!(out, w);
        assert!(rep.epoch_losses.is_empty());
    }

    #[test]
    fn covariance_of_identities_is_identity() {
        let covs = [DMatrix::identity(2, 2), DMatrix::identity(2, 2)];
        let refs: Vec<&DMatrix<f64>> = covs.iter().collect();
        let s = mean_precision_inverse(&refs).unwrap();
        assert!((s - DMatrix::identity(2, 2)).norm() < 1e-15);
    }

    #[test]
    fn covariance_harmonic_mean_example() {
        let covs = [DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0 / 3.0)];
        let refs: Vec<&DMatrix<f64>> = covs.iter().collect();
        let s = mean_precision_inverse(&refs).unwrap();
        assert!((s[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_density_matches_closed_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let u = DVector::from_vec(vec![0.4, -1.0]);
        let m = DVector::from_vec(vec![0.1, 0.2]);
        let det: f64 = 2.0 * 1.0 - 0.09;
        let inv = DMatrix::from_row_slice(2, 2, &[1.0, -0.3, -0.3, 2.0]) / det;
        let r = &u - &m;
        let expected = -0.5 * (r.dot(&(inv * &r)) + det.ln() + 2.0 * (2.0 * std::f64::consts::PI).ln());
        assert!((gaussian_log_density(&u, &m, &cov).unwrap() - expected).abs() < 1e-13);
        assert!(matches!(
            gaussian_log_density(&u, &m, &DMatrix::zeros(2, 2)),
            Err(Error::SingularCovariance)
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_schema_check() {
        let p = PolicyParams {
            weights: MlpWeights::init(4, 3, 1, 0.0, 5.0, 8),
            sigma_pi: DMatrix::from_element(1, 1, 0.7),
            features: FeatureMap {
                n_cells: 3,
                height_scale: 3.0,
                position_offset: -10.0,
                position_scale: 120.0,
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path).unwrap(), p);

        let mut ck = PolicyCheckpoint::from(&p);
        ck.schema = "other".into();
        assert!(matches!(
            PolicyParams::try_from(ck),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }
}
