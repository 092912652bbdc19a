//! Masked noise-conditioned score models.
//!
//! A score model maps `(x̃ ⊙ m, m, level)` to an estimate of
//! `∇ log q_σ(x̃_m)`, the score of the Gaussian-smoothed marginal over the
//! observed dimensions. Outputs are zeroed off the mask.

use super::{NoiseSchedule, PoMsmaError};
use crate::data_env::{Dataset, ObservationMask, SyntheticTaskSpec};
use crate::nn::{Activation, Adam, BatchTape, Mlp};
use crate::rng::{self, Rng};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

/// Distribution over observation masks used for training and calibration.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskDistribution {
    /// `|m|` uniform on `0..=d`, then a uniform subset of that size.
    UniformCardinality,
    /// Uniform subset of exactly this size.
    Cardinality(usize),
    Fixed(ObservationMask),
}

impl MaskDistribution {
    pub fn sample(&self, dim: usize, rng: &mut Rng) -> ObservationMask {
        match self {
            MaskDistribution::UniformCardinality => {
                let k = rng.gen_range(0..=dim);
                random_subset(dim, k, rng)
            }
            MaskDistribution::Cardinality(k) => random_subset(dim, (*k).min(dim), rng),
            MaskDistribution::Fixed(m) => m.clone(),
        }
    }
}

fn random_subset(dim: usize, k: usize, rng: &mut Rng) -> ObservationMask {
    let mut bits = vec![false; dim];
    for i in sample_indices(rng, dim, k) {
        bits[i] = true;
    }
    ObservationMask::from_bits(bits)
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { mean: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let dim = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let scale = var.iter().map(|&v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Standardizer { mean, scale }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn forward(&self, i: usize, v: f64) -> f64 {
        (v - self.mean[i]) / self.scale[i]
    }
}

pub trait ScoreFunction {
    fn dim(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;

    /// Score at `level` in data coordinates, zero on unobserved dimensions.
    /// Only observed entries of `values` are read.
    fn score(&self, values: &[f64], mask: &ObservationMask, level: usize) -> Vec<f64>;

    /// Scores at every level for one input (`levels x d`).
    fn score_all_levels(&self, values: &[f64], mask: &ObservationMask) -> Vec<Vec<f64>> {
        (0..self.schedule().levels()).map(|l| self.score(values, mask, l)).collect()
    }
}

/// Masked score vector and its L2 norm over the observed dimensions.
pub fn masked_score<S: ScoreFunction + ?Sized>(
    model: &S,
    values: &[f64],
    mask: &ObservationMask,
    level: usize,
) -> (Vec<f64>, f64) {
    let s = model.score(values, mask, level);
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    (s, norm)
}

/// `(s_1, …, s_L)`: score norms at every level, evaluated at the input itself.
pub fn summary_statistics<S: ScoreFunction + ?Sized>(model: &S, values: &[f64], mask: &ObservationMask) -> Vec<f64> {
    model
        .score_all_levels(values, mask)
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Exact score of a single Gaussian's smoothed observed marginal.
///
/// Level `l` smooths dimension `j` with standard deviation `σ_l · scale_j`,
/// which matches a model trained on data standardized by `scale`.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianScore {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    scale: Vec<f64>,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianScore {
    pub fn new(spec: &SyntheticTaskSpec, schedule: NoiseSchedule, scale: Vec<f64>) -> Result<Self, PoMsmaError> {
        if spec.classes() != 1 {
            return Err(PoMsmaError::NotGaussian(spec.classes()));
        }
        if scale.len() != spec.dim() {
            return Err(PoMsmaError::Shape("scale length must equal d".into()));
        }
        Ok(AnalyticGaussianScore { mean: spec.mean(0).clone(), cov: spec.covariance(0).clone(), scale, schedule })
    }

    fn score_with_noise(&self, values: &[f64], mask: &ObservationMask, noise: impl Fn(usize) -> f64) -> Vec<f64> {
        let o = mask.observed();
        let mut out = vec![0.0; self.mean.len()];
        if o.is_empty() {
            return out;
        }
        let k = o.len();
        let s = DMatrix::from_fn(k, k, |a, b| {
            let v = self.cov[(o[a], o[b])];
            if a == b {
                v + noise(o[a]).powi(2)
            } else {
                v
            }
        });
        let delta = DVector::from_fn(k, |a, _| values[o[a]] - self.mean[o[a]]);
        let chol = nalgebra::Cholesky::new(s).expect("smoothed covariance is positive definite");
        let g = chol.solve(&delta);
        for (a, &i) in o.iter().enumerate() {
            out[i] = -g[a];
        }
        out
    }
}

impl ScoreFunction for AnalyticGaussianScore {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn score(&self, values: &[f64], mask: &ObservationMask, level: usize) -> Vec<f64> {
        let sigma = self.schedule.sigma(level);
        self.score_with_noise(values, mask, |j| sigma * self.scale[j])
    }
}

/// `-(Σ_mm + σ² I)^{-1} (x̃_m - μ_m)` on the observed dimensions, 0 elsewhere.
pub fn analytic_gaussian_score(
    spec: &SyntheticTaskSpec,
    values: &[f64],
    mask: &ObservationMask,
    sigma: f64,
) -> Result<Vec<f64>, PoMsmaError> {
    let oracle = AnalyticGaussianScore::new(spec, NoiseSchedule::from_sigmas(vec![sigma])?, vec![1.0; spec.dim()])?;
    Ok(oracle.score(values, mask, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    /// Base samples per step; each contributes an antithetic pair.
    pub batch: usize,
    pub lr: f64,
    /// Learning rate decays linearly to `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
    /// Decay of the parameter moving average used as the final model; 0 disables.
    pub ema: f64,
    pub seed: u64,
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        ScoreTrainConfig {
            hidden: vec![128, 128],
            activation: Activation::Silu,
            steps: 6000,
            batch: 64,
            lr: 2e-3,
            final_lr_fraction: 0.02,
            ema: 0.999,
            seed: 0,
        }
    }
}

/// Feed-forward score network over `[x̃ ⊙ m, m, onehot(level)]` in standardized units.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScoreModel {
    net: Mlp,
    schedule: NoiseSchedule,
    standardizer: Standardizer,
}

/// Outcome of score-model training.
#[derive(Debug, Clone)]
pub struct ScoreTrainReport {
    pub final_loss: f64,
    /// Exponential moving average of the per-step loss, sampled every 100 steps.
    pub smoothed_loss: Vec<f64>,
}

impl MlpScoreModel {
    pub fn new(
        dim: usize,
        schedule: NoiseSchedule,
        standardizer: Standardizer,
        hidden: &[usize],
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let mut sizes = vec![2 * dim + schedule.levels()];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let mut net = Mlp::new(&sizes, activation, true, rng);
        net.scale_output_layer(0.1);
        MlpScoreModel { net, schedule, standardizer }
    }

    pub fn from_parts(net: Mlp, schedule: NoiseSchedule, standardizer: Standardizer) -> Result<Self, PoMsmaError> {
        let d = standardizer.dim();
        if net.input_dim() != 2 * d + schedule.levels() || net.output_dim() != d {
            return Err(PoMsmaError::Shape("network shape does not match dimension and schedule".into()));
        }
        Ok(MlpScoreModel { net, schedule, standardizer })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub(super) fn schedule_ref(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Write the network input for a standardized (already noised) row.
    fn encode_into(&self, z: &[f64], mask: &ObservationMask, level: usize, row: &mut [f64]) {
        let d = self.dim();
        row.iter_mut().for_each(|v| *v = 0.0);
        for i in mask.observed() {
            row[i] = z[i];
            row[d + i] = 1.0;
        }
        row[2 * d + level] = 1.0;
    }

    /// Fit by denoising score matching under `masks`.
    pub fn train(
        data: &Dataset,
        schedule: NoiseSchedule,
        masks: &MaskDistribution,
        cfg: &ScoreTrainConfig,
    ) -> Result<(Self, ScoreTrainReport), PoMsmaError> {
        if data.is_empty() {
            return Err(PoMsmaError::EmptyData);
        }
        let d = data.dim();
        let rows: Vec<Vec<f64>> = data.rows().iter().map(|r| r.x.clone()).collect();
        let standardizer = Standardizer::fit(&rows);
        let std_rows: Vec<Vec<f64>> =
            rows.iter().map(|r| r.iter().enumerate().map(|(i, &v)| standardizer.forward(i, v)).collect()).collect();
        let mut init_rng = rng::stream(cfg.seed, "score/init", 0);
        let mut model = MlpScoreModel::new(d, schedule, standardizer, &cfg.hidden, cfg.activation, &mut init_rng);
        let mut rng = rng::stream(cfg.seed, "score/train", 0);
        let mut adam = Adam::new(model.net.num_params(), cfg.lr).with_clip(10.0);
        let levels = model.schedule.levels();
        let width = 2 * d + levels;
        let n = 2 * cfg.batch;
        let mut input = DMatrix::zeros(n, width);
        let mut noise = DMatrix::zeros(n, d);
        let mut sig = vec![0.0; n];
        let mut sample_masks = Vec::with_capacity(n);
        let mut tape = BatchTape::default();
        let mut grad = vec![0.0; model.net.num_params()];
        let mut smooth = f64::NAN;
        let mut report = ScoreTrainReport { final_loss: f64::NAN, smoothed_loss: Vec::new() };
        let mut row = vec![0.0; width];
        let mut zt = vec![0.0; d];
        let mut averaged = model.net.params().to_vec();
        for step in 0..cfg.steps {
            sample_masks.clear();
            for b in 0..cfg.batch {
                let x = &std_rows[rng.gen_range(0..std_rows.len())];
                let m = masks.sample(d, &mut rng);
                let level = rng.gen_range(0..levels);
                let sigma = model.schedule.sigma(level);
                let eps: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                for (k, sign) in [(2 * b, 1.0), (2 * b + 1, -1.0)] {
                    for i in 0..d {
                        let e = sign * eps[i];
                        noise[(k, i)] = e;
                        zt[i] = x[i] + sigma * e;
                    }
                    model.encode_into(&zt, &m, level, &mut row);
                    for c in 0..width {
                        input[(k, c)] = row[c];
                    }
                    sig[k] = sigma;
                    sample_masks.push(m.clone());
                }
            }
            model.net.forward_batch(&input, &mut tape);
            let out = tape.output();
            // The reported loss is ½‖(σ s + ε) ⊙ m‖². The gradient uses the
            // weight (1 + σ²)² instead of σ²: on unit-scale data the smoothed
            // score has magnitude ~1/(1 + σ²), so this balances relative error
            // across levels, where σ² would starve the small ones.
            let mut d_out = DMatrix::zeros(n, d);
            let mut loss = 0.0;
            for k in 0..n {
                let w = (1.0 + sig[k] * sig[k]).powi(2);
                for i in sample_masks[k].observed() {
                    let r = out[(k, i)] + noise[(k, i)] / sig[k];
                    loss += 0.5 * sig[k] * sig[k] * r * r;
                    d_out[(k, i)] = w * r / n as f64;
                }
            }
            loss /= n as f64;
            if !loss.is_finite() {
                return Err(PoMsmaError::Diverged { step, loss });
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            model.net.backward_batch(&tape, &d_out, &mut grad);
            let frac = step as f64 / cfg.steps.max(1) as f64;
            adam.lr = cfg.lr * (1.0 - frac * (1.0 - cfg.final_lr_fraction));
            adam.step(model.net.params_mut(), &grad);
            // bias-free warm start: plain average until 1/(1-decay) steps
            let decay = cfg.ema.min(step as f64 / (step as f64 + 1.0));
            for (a, &p) in averaged.iter_mut().zip(model.net.params()) {
                *a = decay * *a + (1.0 - decay) * p;
            }
            smooth = if smooth.is_nan() { loss } else { 0.99 * smooth + 0.01 * loss };
            if step % 100 == 99 {
                report.smoothed_loss.push(smooth);
            }
            report.final_loss = smooth;
        }
        if cfg.ema > 0.0 {
            model.net.params_mut().copy_from_slice(&averaged);
        }
        log::info!("score model trained for {} steps, smoothed loss {:.5}", cfg.steps, report.final_loss);
        Ok((model, report))
    }

    /// Scores for many inputs at one level; rows of the result are data-coordinate scores.
    pub fn score_rows(&self, values: &[Vec<f64>], masks: &[ObservationMask], level: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let width = 2 * d + self.schedule.levels();
        let mut input = DMatrix::zeros(values.len(), width);
        let mut row = vec![0.0; width];
        let mut z = vec![0.0; d];
        for (k, (v, m)) in values.iter().zip(masks).enumerate() {
            for i in 0..d {
                z[i] = if m.is_observed(i) { self.standardizer.forward(i, v[i]) } else { 0.0 };
            }
            self.encode_into(&z, m, level, &mut row);
            for c in 0..width {
                input[(k, c)] = row[c];
            }
        }
        let out = self.net.forward_rows(&input);
        self.decode(&out, masks)
    }

    fn decode(&self, out: &DMatrix<f64>, masks: &[ObservationMask]) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..out.nrows())
            .map(|k| {
                (0..d)
                    .map(|i| if masks[k].is_observed(i) { out[(k, i)] / self.standardizer.scale[i] } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Summary statistics for many inputs, one network pass per level.
    pub fn summary_statistics_rows(&self, values: &[Vec<f64>], masks: &[ObservationMask]) -> Vec<Vec<f64>> {
        let levels = self.schedule.levels();
        let mut stats = vec![vec![0.0; levels]; values.len()];
        for l in 0..levels {
            for (k, s) in self.score_rows(values, masks, l).iter().enumerate() {
                stats[k][l] = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
        }
        stats
    }
}

impl ScoreFunction for MlpScoreModel {
    fn dim(&self) -> usize {
        self.standardizer.dim()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn score(&self, values: &[f64], mask: &ObservationMask, level: usize) -> Vec<f64> {
        self.score_rows(&[values.to_vec()], std::slice::from_ref(mask), level).remove(0)
    }

    fn score_all_levels(&self, values: &[f64], mask: &ObservationMask) -> Vec<Vec<f64>> {
        let d = self.dim();
        let levels = self.schedule.levels();
        let width = 2 * d + levels;
        let z: Vec<f64> =
            (0..d).map(|i| if mask.is_observed(i) { self.standardizer.forward(i, values[i]) } else { 0.0 }).collect();
        let mut input = DMatrix::zeros(levels, width);
        let mut row = vec![0.0; width];
        for l in 0..levels {
            self.encode_into(&z, mask, l, &mut row);
            for c in 0..width {
                input[(l, c)] = row[c];
            }
        }
        let out = self.net.forward_rows(&input);
        self.decode(&out, &vec![mask.clone(); levels])
    }
}
