//! Mask-conditioned autoregressive Gaussian density over summary statistics.

use super::{PoMsmaError, Standardizer};
use crate::data_env::ObservationMask;
use crate::math::LN_2PI;
use crate::nn::{Activation, Adam, BatchTape, Mlp};
use crate::rng;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;

pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct DoseTrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DoseTrainConfig {
    fn default() -> Self {
        DoseTrainConfig { hidden: vec![64, 64], epochs: 40, batch: 256, lr: 3e-3, seed: 0 }
    }
}

/// `p(s_1..s_L | m) = Π_i N(s_i; μ_i(s_<i, m), v_i(s_<i, m))`.
///
/// The conditioner is a MADE network over standardized statistics with the
/// mask bits and `|m|/d` as context visible to every output. Dimensions that
/// are constant in the training data are modeled as floor-variance Gaussians
/// at that constant.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseModel {
    net: Mlp,
    levels: usize,
    dim: usize,
    norm: Standardizer,
    /// Per level: `Some(value)` when the training statistic was constant.
    degenerate: Vec<Option<f64>>,
}

fn made_masks(levels: usize, context: usize, hidden: &[usize]) -> Vec<Vec<f64>> {
    let input_deg: Vec<usize> = (0..levels).map(|i| i + 1).chain(std::iter::repeat(0).take(context)).collect();
    let mut prev = input_deg;
    let mut masks = Vec::new();
    for &h in hidden {
        let deg: Vec<usize> = (0..h).map(|k| k % levels).collect();
        let fi = prev.len();
        let mut m = vec![0.0; fi * h];
        for j in 0..h {
            for i in 0..fi {
                if prev[i] <= deg[j] {
                    m[j * fi + i] = 1.0;
                }
            }
        }
        masks.push(m);
        prev = deg;
    }
    let out_deg: Vec<usize> = (0..2 * levels).map(|o| o % levels + 1).collect();
    let fi = prev.len();
    let mut m = vec![0.0; fi * 2 * levels];
    for j in 0..2 * levels {
        for i in 0..fi {
            if prev[i] < out_deg[j] {
                m[j * fi + i] = 1.0;
            }
        }
    }
    masks.push(m);
    masks
}

impl DoseModel {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn normalizer(&self) -> &Standardizer {
        &self.norm
    }

    pub fn degenerate(&self) -> &[Option<f64>] {
        &self.degenerate
    }

    pub fn from_parts(
        net: Mlp,
        dim: usize,
        norm: Standardizer,
        degenerate: Vec<Option<f64>>,
    ) -> Result<Self, PoMsmaError> {
        let levels = norm.dim();
        if net.input_dim() != levels + dim + 1 || net.output_dim() != 2 * levels || degenerate.len() != levels {
            return Err(PoMsmaError::Shape("density model shapes are inconsistent".into()));
        }
        let hidden = net.sizes()[1..net.sizes().len() - 1].to_vec();
        let mut net = net;
        net.set_masks(made_masks(levels, dim + 1, &hidden));
        Ok(DoseModel { net, levels, dim, norm, degenerate })
    }

    fn encode(&self, stats: &[f64], mask: &ObservationMask, row: &mut [f64]) {
        for i in 0..self.levels {
            row[i] = self.norm.forward(i, stats[i]);
        }
        for (j, &b) in mask.bits().iter().enumerate() {
            row[self.levels + j] = if b { 1.0 } else { 0.0 };
        }
        row[self.levels + self.dim] = mask.count() as f64 / self.dim as f64;
    }

    /// Fit by maximum likelihood on `(statistics, mask)` pairs.
    pub fn train(stats: &[Vec<f64>], masks: &[ObservationMask], cfg: &DoseTrainConfig) -> Result<Self, PoMsmaError> {
        if stats.is_empty() || stats.len() != masks.len() {
            return Err(PoMsmaError::EmptyData);
        }
        let levels = stats[0].len();
        let dim = masks[0].dim();
        let norm = Standardizer::fit(stats);
        let mut degenerate = vec![None; levels];
        for l in 0..levels {
            let first = stats[0][l];
            if stats.iter().all(|s| (s[l] - first).abs() <= 1e-12 * first.abs().max(1.0)) {
                log::warn!("summary statistic {l} is constant ({first}); using variance floor {VARIANCE_FLOOR}");
                degenerate[l] = Some(first);
            }
        }
        let mut sizes = vec![levels + dim + 1];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(2 * levels);
        let mut init = rng::stream(cfg.seed, "dose/init", 0);
        let mut net = Mlp::new(&sizes, Activation::Tanh, false, &mut init);
        net.scale_output_layer(0.1);
        net.set_masks(made_masks(levels, dim + 1, &cfg.hidden));
        let mut model = DoseModel { net, levels, dim, norm, degenerate };

        let width = levels + dim + 1;
        let encoded: Vec<Vec<f64>> = stats
            .iter()
            .zip(masks)
            .map(|(s, m)| {
                let mut row = vec![0.0; width];
                model.encode(s, m, &mut row);
                row
            })
            .collect();
        let mut order: Vec<usize> = (0..stats.len()).collect();
        let mut rng = rng::stream(cfg.seed, "dose/train", 0);
        let mut adam = Adam::new(model.net.num_params(), cfg.lr).with_clip(10.0);
        let batches_per_epoch = stats.len().div_ceil(cfg.batch);
        let total = (cfg.epochs * batches_per_epoch).max(1);
        let mut tape = BatchTape::default();
        let mut grad = vec![0.0; model.net.num_params()];
        let mut t = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_nll = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let n = chunk.len();
                let x = DMatrix::from_fn(n, width, |r, c| encoded[chunk[r]][c]);
                model.net.forward_batch(&x, &mut tape);
                let out = tape.output();
                let mut d_out = DMatrix::zeros(n, 2 * levels);
                let mut nll = 0.0;
                for r in 0..n {
                    for i in 0..levels {
                        if model.degenerate[i].is_some() {
                            continue;
                        }
                        let u = x[(r, i)];
                        let mu = out[(r, i)];
                        let a = out[(r, levels + i)].clamp(-30.0, 30.0);
                        let ea = a.exp();
                        let v = ea + VARIANCE_FLOOR;
                        let diff = u - mu;
                        nll += 0.5 * (LN_2PI + v.ln() + diff * diff / v);
                        d_out[(r, i)] = -diff / v / n as f64;
                        d_out[(r, levels + i)] = 0.5 * (1.0 / v - diff * diff / (v * v)) * ea / n as f64;
                    }
                }
                if !nll.is_finite() {
                    return Err(PoMsmaError::Diverged { step: t, loss: nll });
                }
                epoch_nll += nll;
                grad.iter_mut().for_each(|g| *g = 0.0);
                model.net.backward_batch(&tape, &d_out, &mut grad);
                adam.lr = cfg.lr * (1.0 - 0.95 * t as f64 / total as f64);
                adam.step(model.net.params_mut(), &grad);
                t += 1;
            }
            log::debug!("dose epoch {epoch}: mean nll {:.4}", epoch_nll / stats.len() as f64);
        }
        Ok(model)
    }

    /// Conditional means and variances in statistic units, one pass.
    fn conditionals(&self, stats: &[f64], mask: &ObservationMask) -> (Vec<f64>, Vec<f64>) {
        let mut row = vec![0.0; self.levels + self.dim + 1];
        self.encode(stats, mask, &mut row);
        let out = self.net.forward(&row);
        let mut mean = vec![0.0; self.levels];
        let mut var = vec![0.0; self.levels];
        for i in 0..self.levels {
            if let Some(c) = self.degenerate[i] {
                mean[i] = c;
                var[i] = VARIANCE_FLOOR;
            } else {
                let sc = self.norm.scale[i];
                mean[i] = self.norm.mean[i] + sc * out[i];
                var[i] = sc * sc * (out[self.levels + i].clamp(-30.0, 30.0).exp() + VARIANCE_FLOOR);
            }
        }
        (mean, var)
    }

    /// Per-level conditional log-densities `log p(s_i | s_<i, m)`.
    pub fn log_prob_terms(&self, stats: &[f64], mask: &ObservationMask) -> Vec<f64> {
        let (mean, var) = self.conditionals(stats, mask);
        (0..self.levels)
            .map(|i| {
                let d = stats[i] - mean[i];
                -0.5 * (LN_2PI + var[i].ln() + d * d / var[i])
            })
            .collect()
    }

    pub fn log_prob(&self, stats: &[f64], mask: &ObservationMask) -> f64 {
        self.log_prob_terms(stats, mask).iter().sum()
    }

    /// Conditional mean and variance of level `i` given `s_<i` (later entries ignored).
    pub fn conditional(&self, stats: &[f64], mask: &ObservationMask, i: usize) -> (f64, f64) {
        let (m, v) = self.conditionals(stats, mask);
        (m[i], v[i])
    }

    /// Statistics obtained by setting each level to its conditional mean in turn.
    pub fn mode_path(&self, mask: &ObservationMask) -> Vec<f64> {
        let mut s = vec![0.0; self.levels];
        for i in 0..self.levels {
            s[i] = self.conditional(&s, mask, i).0;
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn made_masks_are_autoregressive() {
        let m = made_masks(3, 2, &[7]);
        // first hidden: unit j (degree j % 3) sees stat i iff i + 1 <= j % 3
        for j in 0..7 {
            for i in 0..3 {
                assert_eq!(m[0][j * 5 + i] == 1.0, i + 1 <= j % 3);
            }
            assert_eq!(m[0][j * 5 + 3], 1.0);
        }
        // output for level 0 sees only degree-0 hidden units
        for j in 0..7 {
            assert_eq!(m[1][j] == 1.0, j % 3 == 0);
        }
    }
}
