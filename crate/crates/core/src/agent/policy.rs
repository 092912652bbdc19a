use super::AgentError;
use crate::data_env::{ObservationMask, PartialState};
use crate::dynamics::AuxiliaryInfo;
use crate::grouping::ActionGrouping;
use crate::math;
use crate::nn::{Activation, Mlp};
use crate::rng::Rng;
use rand::Rng as _;

/// Sample from the distributions or take the two-stage argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalAction {
    pub group: usize,
    pub member: usize,
    pub feature: usize,
    /// `log p(k|s) + log p(n|k,s)`
    pub log_prob: f64,
    pub value: f64,
}

/// Masked log-softmax; unavailable entries get `-inf`.
pub fn masked_log_softmax(logits: &[f64], available: &[bool]) -> Result<Vec<f64>, AgentError> {
    let open: Vec<f64> = logits.iter().zip(available).filter(|(_, &a)| a).map(|(&l, _)| l).collect();
    if open.is_empty() {
        return Err(AgentError::NoValidAction);
    }
    let z = math::logsumexp(&open);
    Ok(logits.iter().zip(available).map(|(&l, &a)| if a { l - z } else { f64::NEG_INFINITY }).collect())
}

/// Both stages of the factorized distribution for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    /// `log p(k|s)`, length K.
    pub group: Vec<f64>,
    /// `log p(n|k,s)` per group, length N each; padded slots are `-inf`.
    pub members: Vec<Vec<f64>>,
}

impl ActionDistribution {
    /// Build from raw logits (`K` group logits then `K × N` member logits).
    pub fn new(logits: &[f64], grouping: &ActionGrouping, mask: &ObservationMask) -> Result<Self, AgentError> {
        let (k, n) = (grouping.num_groups(), grouping.group_size());
        if logits.len() != k + k * n {
            return Err(AgentError::Shape(format!("expected {} logits, got {}", k + k * n, logits.len())));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(AgentError::NonFiniteLogits);
        }
        let (open_groups, open_members) = grouping.availability(mask);
        let group = masked_log_softmax(&logits[..k], &open_groups)?;
        let mut members = Vec::with_capacity(k);
        for g in 0..k {
            let mut avail = open_members[g].clone();
            avail.resize(n, false);
            let slice = &logits[k + g * n..k + (g + 1) * n];
            members.push(if open_groups[g] { masked_log_softmax(slice, &avail)? } else { vec![f64::NEG_INFINITY; n] });
        }
        Ok(ActionDistribution { group, members })
    }

    pub fn log_prob(&self, group: usize, member: usize) -> f64 {
        self.group[group] + self.members[group][member]
    }

    /// Joint entropy `H(k) + Σ_k p_k H(n|k)`.
    pub fn entropy(&self) -> f64 {
        let h = |lp: &[f64]| -> f64 { -lp.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<f64>() };
        let mut total = h(&self.group);
        for (g, lp) in self.group.iter().enumerate() {
            if lp.is_finite() {
                total += lp.exp() * h(&self.members[g]);
            }
        }
        total
    }

    /// Gradient of `coef_lp · log p(k*, n*) + coef_h · H` with respect to the raw logits.
    pub fn logit_gradient(&self, action: (usize, usize), coef_lp: f64, coef_h: f64, out: &mut [f64]) {
        let k = self.group.len();
        let n = self.members.first().map_or(0, Vec::len);
        let (ka, na) = action;
        out.iter_mut().for_each(|v| *v = 0.0);
        let p: Vec<f64> = self.group.iter().map(|l| l.exp()).collect();
        let h_member: Vec<f64> = self
            .members
            .iter()
            .map(|lp| -lp.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<f64>())
            .collect();
        let h_group = -self.group.iter().zip(&p).filter(|(l, _)| l.is_finite()).map(|(l, q)| q * l).sum::<f64>();
        let mean_hm: f64 = p.iter().zip(&h_member).map(|(a, b)| a * b).sum();
        for g in 0..k {
            if !self.group[g].is_finite() {
                continue;
            }
            let ind = if g == ka { 1.0 } else { 0.0 };
            out[g] = coef_lp * (ind - p[g])
                + coef_h * (-p[g] * (self.group[g] + h_group) + p[g] * (h_member[g] - mean_hm));
            for j in 0..n {
                let lq = self.members[g][j];
                if !lq.is_finite() {
                    continue;
                }
                let q = lq.exp();
                let mut v = coef_h * p[g] * (-q * (lq + h_member[g]));
                if g == ka {
                    v += coef_lp * ((if j == na { 1.0 } else { 0.0 }) - q);
                }
                out[k + g * n + j] = v;
            }
        }
    }

    fn pick(lp: &[f64], mode: ActMode, rng: &mut Rng) -> usize {
        match mode {
            ActMode::Deterministic => {
                let mut best = None;
                for (i, &l) in lp.iter().enumerate() {
                    if l.is_finite() && best.map_or(true, |b: usize| l > lp[b]) {
                        best = Some(i);
                    }
                }
                best.expect("at least one open entry")
            }
            ActMode::Stochastic => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut last = 0;
                for (i, &l) in lp.iter().enumerate() {
                    if l.is_finite() {
                        acc += l.exp();
                        last = i;
                        if u < acc {
                            return i;
                        }
                    }
                }
                last
            }
        }
    }

    /// Draw `(k, n)`: the group first, then a member of it.
    pub fn sample(&self, mode: ActMode, rng: &mut Rng) -> (usize, usize) {
        let k = Self::pick(&self.group, mode, rng);
        let n = Self::pick(&self.members[k], mode, rng);
        (k, n)
    }
}

/// Fixed-length input: mask, masked values, posterior, utilities, imputed
/// means and variances (zeros at observed positions).
pub fn policy_features(state: &PartialState, aux: &AuxiliaryInfo) -> Vec<f64> {
    let d = state.dim();
    let mut f = Vec::with_capacity(5 * d + aux.posterior.len());
    f.extend(state.mask().indicator());
    f.extend_from_slice(state.values());
    f.extend_from_slice(&aux.posterior);
    f.extend_from_slice(&aux.utilities);
    f.extend_from_slice(&aux.imputed_mean);
    f.extend_from_slice(&aux.imputed_var);
    f
}

pub fn feature_width(dim: usize, classes: usize) -> usize {
    5 * dim + classes
}

/// Separate actor and critic networks over the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    pub(super) actor: Mlp,
    pub(super) critic: Mlp,
    pub(super) grouping: ActionGrouping,
    pub(super) classes: usize,
}

impl PolicyNetwork {
    pub fn new(grouping: ActionGrouping, classes: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let width = feature_width(grouping.dim(), classes);
        let (k, n) = (grouping.num_groups(), grouping.group_size());
        let sizes = |out: usize| {
            let mut s = vec![width];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let mut actor = Mlp::new(&sizes(k + k * n), Activation::Tanh, false, rng);
        // near-uniform initial policy
        actor.scale_output_layer(0.01);
        let critic = Mlp::new(&sizes(1), Activation::Tanh, false, rng);
        PolicyNetwork { actor, critic, grouping, classes }
    }

    pub fn from_parts(actor: Mlp, critic: Mlp, grouping: ActionGrouping, classes: usize) -> Result<Self, AgentError> {
        let width = feature_width(grouping.dim(), classes);
        let (k, n) = (grouping.num_groups(), grouping.group_size());
        if actor.input_dim() != width || critic.input_dim() != width {
            return Err(AgentError::Shape(format!("networks must take {width} inputs")));
        }
        if actor.output_dim() != k + k * n || critic.output_dim() != 1 {
            return Err(AgentError::Shape("actor or critic output width".into()));
        }
        Ok(PolicyNetwork { actor, critic, grouping, classes })
    }

    pub fn grouping(&self) -> &ActionGrouping {
        &self.grouping
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn actor_mut(&mut self) -> &mut Mlp {
        &mut self.actor
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        self.actor.forward(features)
    }

    pub fn value(&self, features: &[f64]) -> f64 {
        self.critic.forward(features)[0]
    }

    pub fn distribution(&self, features: &[f64], mask: &ObservationMask) -> Result<ActionDistribution, AgentError> {
        ActionDistribution::new(&self.logits(features), &self.grouping, mask)
    }

    /// Choose an acquisition for `state`.
    pub fn act(
        &self,
        state: &PartialState,
        aux: &AuxiliaryInfo,
        mode: ActMode,
        rng: &mut Rng,
    ) -> Result<HierarchicalAction, AgentError> {
        let x = policy_features(state, aux);
        let dist = self.distribution(&x, state.mask())?;
        let (group, member) = dist.sample(mode, rng);
        let feature = self.grouping.decode(group, member).map_err(|e| AgentError::Shape(e.to_string()))?;
        if state.mask().is_observed(feature) {
            return Err(AgentError::NoValidAction);
        }
        Ok(HierarchicalAction { group, member, feature, log_prob: dist.log_prob(group, member), value: self.value(&x) })
    }
}
