//! Exact Gaussian-mixture surrogate for the arbitrary conditionals
//! `p(x_u, y | x_o)`.
//!
//! Every class is a full-covariance Gaussian, so marginals and conditionals
//! over any observed subset are closed form. The only Monte Carlo step is the
//! expectation over a candidate's value in the expected information gain.

use super::{AuxiliaryInfo, DynamicsError, PosteriorModel};
use crate::data_env::{ObservationMask, PartialState, Prediction, SyntheticTaskSpec, TaskKind};
use crate::math::{self, LN_2PI};
use crate::rng::Rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone)]
struct Component {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Immutable; safe to share across threads.
#[derive(Debug, Clone)]
pub struct GaussianMixtureOracle {
    dim: usize,
    components: Vec<Component>,
    log_priors: Vec<f64>,
    samples: usize,
}

/// Class posterior and per-class Gaussian conditionals of `x_u` given `x_o`.
#[derive(Debug, Clone)]
pub struct Conditioned {
    pub observed: Vec<usize>,
    pub unobserved: Vec<usize>,
    pub posterior: Vec<f64>,
    pub log_posterior: Vec<f64>,
    /// Per class, conditional mean over `unobserved` (same order).
    pub means: Vec<DVector<f64>>,
    /// Per class, conditional covariance over `unobserved`.
    pub covs: Vec<DMatrix<f64>>,
}

impl Conditioned {
    pub fn entropy(&self) -> f64 {
        math::entropy(&self.posterior)
    }

    fn position(&self, j: usize) -> Option<usize> {
        self.unobserved.iter().position(|&u| u == j)
    }
}

const VAR_FLOOR: f64 = 1e-12;

impl GaussianMixtureOracle {
    /// Default Monte Carlo sample count for agent side information.
    pub const DEFAULT_SAMPLES: usize = 256;

    pub fn from_spec(spec: &SyntheticTaskSpec, samples: usize) -> Self {
        let components = (0..spec.classes())
            .map(|c| Component { mean: spec.mean(c).clone(), cov: spec.covariance(c).clone() })
            .collect();
        let log_priors = spec.priors().iter().map(|p| p.ln()).collect();
        GaussianMixtureOracle { dim: spec.dim(), components, log_priors, samples: samples.max(1) }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn with_samples(&self, samples: usize) -> Self {
        let mut o = self.clone();
        o.samples = samples.max(1);
        o
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.components.len()
    }

    fn check(&self, values: &[f64], mask: &ObservationMask) -> Result<(), DynamicsError> {
        if values.len() != self.dim || mask.dim() != self.dim {
            return Err(DynamicsError::Shape(format!(
                "expected length {} values and mask, got {} and {}",
                self.dim,
                values.len(),
                mask.dim()
            )));
        }
        if mask.observed().iter().any(|&i| !values[i].is_finite()) {
            return Err(DynamicsError::NonFinite);
        }
        Ok(())
    }

    /// Posterior over classes and Gaussian conditionals of the unobserved block.
    pub fn condition(&self, values: &[f64], mask: &ObservationMask) -> Result<Conditioned, DynamicsError> {
        self.check(values, mask)?;
        let o = mask.observed();
        let u = mask.unobserved();
        let (no, nu) = (o.len(), u.len());
        let mut log_post = self.log_priors.clone();
        let mut means = Vec::with_capacity(self.classes());
        let mut covs = Vec::with_capacity(self.classes());
        for (c, comp) in self.components.iter().enumerate() {
            let s_uu = DMatrix::from_fn(nu, nu, |a, b| comp.cov[(u[a], u[b])]);
            let mu_u = DVector::from_fn(nu, |a, _| comp.mean[u[a]]);
            if no == 0 {
                means.push(mu_u);
                covs.push(s_uu);
                continue;
            }
            let s_oo = DMatrix::from_fn(no, no, |a, b| comp.cov[(o[a], o[b])]);
            let s_ou = DMatrix::from_fn(no, nu, |a, b| comp.cov[(o[a], u[b])]);
            let delta = DVector::from_fn(no, |a, _| values[o[a]] - comp.mean[o[a]]);
            let chol = nalgebra::Cholesky::new(s_oo).ok_or(DynamicsError::Singular)?;
            let alpha = chol.solve(&delta);
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            log_post[c] += -0.5 * (no as f64 * LN_2PI + log_det + delta.dot(&alpha));
            if nu > 0 {
                let gain = chol.solve(&s_ou); // Σ_oo^{-1} Σ_ou
                means.push(mu_u + s_ou.transpose() * &alpha);
                covs.push(s_uu - s_ou.transpose() * gain);
            } else {
                means.push(DVector::zeros(0));
                covs.push(DMatrix::zeros(0, 0));
            }
        }
        math::log_normalize(&mut log_post);
        let posterior = log_post.iter().map(|v| v.exp()).collect();
        Ok(Conditioned { observed: o, unobserved: u, posterior, log_posterior: log_post, means, covs })
    }

    /// `p(y | x_o)`; the prior when nothing is observed.
    pub fn posterior(&self, values: &[f64], mask: &ObservationMask) -> Result<Vec<f64>, DynamicsError> {
        Ok(self.condition(values, mask)?.posterior)
    }

    /// `H(y | x_o)` in nats.
    pub fn conditional_entropy(&self, values: &[f64], mask: &ObservationMask) -> Result<f64, DynamicsError> {
        Ok(self.condition(values, mask)?.entropy())
    }

    fn candidate_moments(cond: &Conditioned, j: usize) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
        let p = cond.position(j).ok_or(DynamicsError::AlreadyObserved(j))?;
        let m = cond.means.iter().map(|v| v[p]).collect();
        let v = cond.covs.iter().map(|s| s[(p, p)].max(VAR_FLOOR)).collect();
        Ok((m, v))
    }

    /// Draw `x_j ~ p(x_j | x_o)` and return the updated log-posterior for each draw.
    fn for_each_draw(
        cond: &Conditioned,
        m: &[f64],
        v: &[f64],
        draws: usize,
        rng: &mut Rng,
        mut f: impl FnMut(&[f64]),
    ) {
        let k = cond.posterior.len();
        let sd: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
        let base: Vec<f64> = (0..k).map(|c| cond.log_posterior[c] - 0.5 * v[c].ln()).collect();
        let mut lw = vec![0.0; k];
        for _ in 0..draws {
            let r: f64 = rng.gen();
            let mut acc = 0.0;
            let mut c = k - 1;
            for (i, &p) in cond.posterior.iter().enumerate() {
                acc += p;
                if r < acc {
                    c = i;
                    break;
                }
            }
            let z: f64 = StandardNormal.sample(rng);
            let x = m[c] + sd[c] * z;
            for i in 0..k {
                let d = x - m[i];
                lw[i] = base[i] - 0.5 * d * d / v[i];
            }
            math::log_normalize(&mut lw);
            f(&lw);
        }
    }

    fn mc_info_gain(&self, cond: &Conditioned, j: usize, rng: &mut Rng) -> Result<f64, DynamicsError> {
        let (m, v) = Self::candidate_moments(cond, j)?;
        let h0 = cond.entropy();
        if h0 < 1e-12 {
            return Ok(0.0);
        }
        let mut acc = 0.0;
        Self::for_each_draw(cond, &m, &v, self.samples, rng, |lw| {
            acc -= lw.iter().map(|&l| if l > -745.0 { l.exp() * l } else { 0.0 }).sum::<f64>();
        });
        Ok(h0 - acc / self.samples as f64)
    }

    fn mc_greedy(&self, cond: &Conditioned, j: usize, rng: &mut Rng) -> Result<f64, DynamicsError> {
        let (m, v) = Self::candidate_moments(cond, j)?;
        if cond.entropy() < 1e-12 {
            return Ok(0.0);
        }
        let lp = &cond.log_posterior;
        let mut acc = 0.0;
        Self::for_each_draw(cond, &m, &v, self.samples, rng, |lw| {
            acc += lw
                .iter()
                .zip(lp)
                .map(|(&a, &b)| if a > -745.0 { a.exp() * (a - b) } else { 0.0 })
                .sum::<f64>();
        });
        Ok(acc / self.samples as f64)
    }

    /// `U_j = H(y|x_o) - E_{p(x_j|x_o)} H(y|x_o,x_j)` by `samples` draws.
    pub fn expected_info_gain(
        &self,
        values: &[f64],
        mask: &ObservationMask,
        j: usize,
        rng: &mut Rng,
    ) -> Result<f64, DynamicsError> {
        let cond = self.condition(values, mask)?;
        self.mc_info_gain(&cond, j, rng)
    }

    /// EDDI utility `E_{p(x_j|x_o)} KL[p(y|x_o,x_j) || p(y|x_o)]`.
    pub fn greedy_utility(
        &self,
        values: &[f64],
        mask: &ObservationMask,
        j: usize,
        rng: &mut Rng,
    ) -> Result<f64, DynamicsError> {
        let cond = self.condition(values, mask)?;
        self.mc_greedy(&cond, j, rng)
    }

    /// Greedy utilities for every feature (0 on observed positions).
    pub fn greedy_utilities(
        &self,
        values: &[f64],
        mask: &ObservationMask,
        rng: &mut Rng,
    ) -> Result<Vec<f64>, DynamicsError> {
        let cond = self.condition(values, mask)?;
        let mut out = vec![0.0; self.dim];
        for &j in &cond.unobserved {
            out[j] = self.mc_greedy(&cond, j, rng)?;
        }
        Ok(out)
    }

    /// Realized information gain `H(y|x_o) - H(y|x_o, x_i)` of one acquisition.
    pub fn intermediate_reward(
        &self,
        before: &PartialState,
        after: &PartialState,
        acquired: usize,
    ) -> Result<f64, DynamicsError> {
        check_transition(before, after, acquired)?;
        let h0 = self.conditional_entropy(before.values(), before.mask())?;
        let h1 = self.conditional_entropy(after.values(), after.mask())?;
        Ok(h0 - h1)
    }

    /// Mixture moments of `p(x_u | x_o)`, in ascending order of `u`.
    pub fn impute(&self, values: &[f64], mask: &ObservationMask) -> Result<(Vec<f64>, Vec<f64>), DynamicsError> {
        let cond = self.condition(values, mask)?;
        Ok(mixture_moments(&cond))
    }

    /// `log p(x_u | x_o)` for a complete vector `x`, with `u` the unobserved set of `mask`.
    pub fn log_density_unobserved(&self, x: &[f64], mask: &ObservationMask) -> Result<f64, DynamicsError> {
        if x.len() != self.dim {
            return Err(DynamicsError::Shape("instance length must equal d".into()));
        }
        let values = mask.apply(x);
        let cond = self.condition(&values, mask)?;
        let nu = cond.unobserved.len();
        if nu == 0 {
            return Ok(0.0);
        }
        let xu = DVector::from_fn(nu, |a, _| x[cond.unobserved[a]]);
        let mut terms = Vec::with_capacity(self.classes());
        for c in 0..self.classes() {
            let chol = nalgebra::Cholesky::new(cond.covs[c].clone()).ok_or(DynamicsError::Singular)?;
            let delta = &xu - &cond.means[c];
            let q = delta.dot(&chol.solve(&delta));
            let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            terms.push(cond.log_posterior[c] - 0.5 * (nu as f64 * LN_2PI + log_det + q));
        }
        Ok(math::logsumexp(&terms))
    }

    /// Per-dimension log-likelihood improvement from acquiring `i` (reconstruction task):
    /// `log p(x_{u\i} | x_o, x_i)/(|u|-1) - log p(x_u | x_o)/|u|`, the first term
    /// taken as 0 when `i` was the last unobserved feature.
    pub fn air_intermediate_reward(
        &self,
        x: &[f64],
        mask_before: &ObservationMask,
        acquired: usize,
    ) -> Result<f64, DynamicsError> {
        if mask_before.is_observed(acquired) {
            return Err(DynamicsError::AlreadyObserved(acquired));
        }
        let nu = mask_before.dim() - mask_before.count();
        let before = self.log_density_unobserved(x, mask_before)? / nu as f64;
        let after_mask = mask_before.with(acquired).map_err(|e| DynamicsError::Shape(e.to_string()))?;
        let after = if nu > 1 {
            self.log_density_unobserved(x, &after_mask)? / (nu - 1) as f64
        } else {
            0.0
        };
        Ok(after - before)
    }

    /// Side information for the agent.
    pub fn query(&self, values: &[f64], mask: &ObservationMask, rng: &mut Rng) -> Result<AuxiliaryInfo, DynamicsError> {
        let cond = self.condition(values, mask)?;
        let mut utilities = vec![0.0; self.dim];
        for &j in &cond.unobserved {
            utilities[j] = self.mc_info_gain(&cond, j, rng)?;
        }
        let (m, v) = mixture_moments(&cond);
        let mut imputed_mean = vec![0.0; self.dim];
        let mut imputed_var = vec![0.0; self.dim];
        for (a, &j) in cond.unobserved.iter().enumerate() {
            imputed_mean[j] = m[a];
            imputed_var[j] = v[a];
        }
        let prediction = math::argmax(&cond.posterior);
        Ok(AuxiliaryInfo { posterior: cond.posterior, prediction, utilities, imputed_mean, imputed_var })
    }

    /// Bayes-rule class prediction, or the imputed means for reconstruction.
    pub fn predict(&self, values: &[f64], mask: &ObservationMask, task: TaskKind) -> Result<Prediction, DynamicsError> {
        let cond = self.condition(values, mask)?;
        Ok(match task {
            TaskKind::Classification => {
                let label = math::argmax(&cond.posterior);
                Prediction::Class { label, probs: cond.posterior }
            }
            TaskKind::Reconstruction => {
                let (m, _) = mixture_moments(&cond);
                let mut out = mask.apply(values);
                for (a, &j) in cond.unobserved.iter().enumerate() {
                    out[j] = m[a];
                }
                Prediction::Reconstruction(out)
            }
        })
    }
}

/// Mixture mean and law-of-total-variance variance of each unobserved coordinate.
fn mixture_moments(cond: &Conditioned) -> (Vec<f64>, Vec<f64>) {
    let nu = cond.unobserved.len();
    let mut mean = vec![0.0; nu];
    let mut second = vec![0.0; nu];
    for (c, &p) in cond.posterior.iter().enumerate() {
        for a in 0..nu {
            let mu = cond.means[c][a];
            mean[a] += p * mu;
            second[a] += p * (cond.covs[c][(a, a)] + mu * mu);
        }
    }
    let var = mean.iter().zip(&second).map(|(m, s)| (s - m * m).max(0.0)).collect();
    (mean, var)
}

pub(super) fn check_transition(before: &PartialState, after: &PartialState, i: usize) -> Result<(), DynamicsError> {
    let ok = before.dim() == after.dim()
        && i < before.dim()
        && !before.mask().is_observed(i)
        && after.mask().is_observed(i)
        && after.mask().count() == before.mask().count() + 1
        && (0..before.dim())
            .filter(|&k| k != i)
            .all(|k| before.mask().is_observed(k) == after.mask().is_observed(k)
                && (!before.mask().is_observed(k) || before.values()[k] == after.values()[k]));
    if ok {
        Ok(())
    } else {
        Err(DynamicsError::StateMismatch(i))
    }
}

impl PosteriorModel for GaussianMixtureOracle {
    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn log_posterior(&self, values: &[f64], mask: &ObservationMask) -> Result<Vec<f64>, DynamicsError> {
        Ok(self.condition(values, mask)?.log_posterior)
    }
}
