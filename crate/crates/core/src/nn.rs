//! Small dense networks with hand-written backward passes.
//!
//! Parameters live in one flat buffer so optimizers and checkpoints can treat
//! every network the same way. Weights are stored row-major per layer
//! (`w[out_row * fan_in + in_col]`) followed by the layer bias.

use crate::rng::Rng;
use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Silu,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative given pre-activation `z` and post-activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "silu" => Some(Activation::Silu),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerOffsets {
    weight: usize,
    bias: usize,
}

/// Multi-layer perceptron with linear output layer.
///
/// Optional connectivity masks zero individual weights permanently (used for
/// autoregressive conditioners); an optional linear skip maps the input
/// straight to the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<LayerOffsets>,
    skip: Option<usize>,
    masks: Option<Vec<Vec<f64>>>,
    params: Vec<f64>,
}

/// Intermediate values recorded by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    /// Input to every layer (index 0 is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

impl Mlp {
    /// New network with LeCun-normal weights and zero biases.
    pub fn new(sizes: &[usize], activation: Activation, skip: bool, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut n = 0;
        for w in sizes.windows(2) {
            let weight = n;
            n += w[0] * w[1];
            let bias = n;
            n += w[1];
            layers.push(LayerOffsets { weight, bias });
        }
        let skip_off = if skip {
            let off = n;
            n += sizes[0] * sizes[sizes.len() - 1];
            Some(off)
        } else {
            None
        };
        let mut params = vec![0.0; n];
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            let off = layers[l].weight;
            for p in &mut params[off..off + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *p = z * std;
            }
        }
        Mlp {
            sizes: sizes.to_vec(),
            activation,
            layers,
            skip: skip_off,
            masks: None,
            params,
        }
    }

    /// Rebuild a network around an existing parameter vector.
    pub fn from_params(
        sizes: &[usize],
        activation: Activation,
        skip: bool,
        params: Vec<f64>,
    ) -> Result<Self, String> {
        let mut rng = crate::rng::stream(0, "mlp-shape", 0);
        let mut net = Mlp::new(sizes, activation, skip, &mut rng);
        if params.len() != net.params.len() {
            return Err(format!(
                "parameter count {} does not match layer shapes (expected {})",
                params.len(),
                net.params.len()
            ));
        }
        net.params = params;
        Ok(net)
    }

    /// Install per-layer connectivity masks (`1.0` keeps, `0.0` removes).
    pub fn set_masks(&mut self, masks: Vec<Vec<f64>>) {
        assert_eq!(masks.len(), self.layers.len());
        for (l, m) in masks.iter().enumerate() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            assert_eq!(m.len(), fi * fo);
            let off = self.layers[l].weight;
            for (p, &k) in self.params[off..off + fi * fo].iter_mut().zip(m) {
                *p *= k;
            }
        }
        self.masks = Some(masks);
    }

    pub fn masks(&self) -> Option<&[Vec<f64>]> {
        self.masks.as_deref()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_skip(&self) -> bool {
        self.skip.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Scale the output layer weights (useful to start near a zero output).
    pub fn scale_output_layer(&mut self, factor: f64) {
        let l = self.layers.len() - 1;
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layers[l].weight;
        for p in &mut self.params[off..off + fi * fo] {
            *p *= factor;
        }
    }

    fn dense(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let LayerOffsets { weight, bias } = self.layers[l];
        let w = &self.params[weight..weight + fi * fo];
        let b = &self.params[bias..bias + fo];
        out.clear();
        out.extend_from_slice(b);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &w[j * fi..(j + 1) * fi];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *o += acc;
        }
    }

    fn add_skip(&self, x: &[f64], out: &mut [f64]) {
        if let Some(off) = self.skip {
            let fi = self.sizes[0];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &self.params[off + j * fi..off + (j + 1) * fi];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                *o += acc;
            }
        }
    }

    /// Inference-only forward pass.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let n_layers = self.layers.len();
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..n_layers {
            self.dense(l, &cur, &mut next);
            if l + 1 < n_layers {
                for v in next.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        self.add_skip(x, &mut cur);
        cur
    }

    /// Forward pass recording what the backward pass needs.
    pub fn forward_tape(&self, x: &[f64], tape: &mut Tape) {
        let n_layers = self.layers.len();
        tape.inputs.resize(n_layers, Vec::new());
        tape.pre.resize(n_layers.saturating_sub(1), Vec::new());
        tape.inputs[0].clear();
        tape.inputs[0].extend_from_slice(x);
        let mut z = Vec::new();
        for l in 0..n_layers {
            let (head, tail) = tape.inputs.split_at_mut(l + 1);
            self.dense(l, &head[l], &mut z);
            if l + 1 < n_layers {
                tape.pre[l].clear();
                tape.pre[l].extend_from_slice(&z);
                let a = &mut tail[0];
                a.clear();
                a.extend(z.iter().map(|&v| self.activation.apply(v)));
            } else {
                tape.output.clear();
                tape.output.extend_from_slice(&z);
            }
        }
        let out = std::mem::take(&mut tape.output);
        let mut out = out;
        self.add_skip(x, &mut out);
        tape.output = out;
    }

    /// Accumulate `d loss / d params` into `grad` given `d loss / d output`.
    /// Optionally writes `d loss / d input` into `d_input`.
    pub fn backward(&self, tape: &Tape, d_out: &[f64], grad: &mut [f64], d_input: Option<&mut [f64]>) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.layers.len();
        let mut delta = d_out.to_vec();
        let mut d_in_total: Option<Vec<f64>> = d_input.as_ref().map(|_| vec![0.0; self.sizes[0]]);

        if let Some(off) = self.skip {
            let fi = self.sizes[0];
            let x = &tape.inputs[0];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let g = &mut grad[off + j * fi..off + (j + 1) * fi];
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += dj * xi;
                }
                if let Some(di) = d_in_total.as_mut() {
                    let row = &self.params[off + j * fi..off + (j + 1) * fi];
                    for (d, w) in di.iter_mut().zip(row) {
                        *d += dj * w;
                    }
                }
            }
        }

        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let LayerOffsets { weight, bias } = self.layers[l];
            let a = &tape.inputs[l];
            {
                let gw = &mut grad[weight..weight + fi * fo];
                for (j, &dj) in delta.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    let row = &mut gw[j * fi..(j + 1) * fi];
                    for (g, ai) in row.iter_mut().zip(a) {
                        *g += dj * ai;
                    }
                }
                if let Some(masks) = &self.masks {
                    for (g, &k) in gw.iter_mut().zip(&masks[l]) {
                        *g *= k;
                    }
                }
            }
            for (g, &dj) in grad[bias..bias + fo].iter_mut().zip(&delta) {
                *g += dj;
            }
            if l == 0 && d_in_total.is_none() {
                break;
            }
            let w = &self.params[weight..weight + fi * fo];
            let mut prev = vec![0.0; fi];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = &w[j * fi..(j + 1) * fi];
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += dj * wi;
                }
            }
            if l == 0 {
                if let Some(di) = d_in_total.as_mut() {
                    for (d, p) in di.iter_mut().zip(&prev) {
                        *d += p;
                    }
                }
                break;
            }
            let pre = &tape.pre[l - 1];
            let post = &tape.inputs[l];
            for i in 0..fi {
                prev[i] *= self.activation.derivative(pre[i], post[i]);
            }
            delta = prev;
        }
        if let (Some(dst), Some(src)) = (d_input, d_in_total) {
            dst.copy_from_slice(&src);
        }
    }
}

/// Batched forward record; rows are samples.
#[derive(Debug, Clone, Default)]
pub struct BatchTape {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl BatchTape {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

impl Mlp {
    /// `W^T` of layer `l` as a `fan_in x fan_out` view (row-major `W` read column-major).
    fn weight_t(&self, l: usize) -> DMatrixView<'_, f64> {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let off = self.layers[l].weight;
        DMatrixView::from_slice(&self.params[off..off + fi * fo], fi, fo)
    }

    fn skip_t(&self) -> Option<DMatrixView<'_, f64>> {
        let (fi, fo) = (self.sizes[0], self.output_dim());
        self.skip.map(|off| DMatrixView::from_slice(&self.params[off..off + fi * fo], fi, fo))
    }

    fn affine_batch(&self, l: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let fo = self.sizes[l + 1];
        let b = &self.params[self.layers[l].bias..self.layers[l].bias + fo];
        let mut z = x * self.weight_t(l);
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(b[j]);
        }
        z
    }

    /// Forward pass over a batch (`n x input_dim`), recording for [`Mlp::backward_batch`].
    pub fn forward_batch(&self, x: &DMatrix<f64>, tape: &mut BatchTape) {
        let n_layers = self.layers.len();
        tape.inputs.clear();
        tape.pre.clear();
        tape.inputs.push(x.clone());
        for l in 0..n_layers {
            let z = self.affine_batch(l, &tape.inputs[l]);
            if l + 1 < n_layers {
                let act = self.activation;
                let a = z.map(|v| act.apply(v));
                tape.pre.push(z);
                tape.inputs.push(a);
            } else {
                tape.output = z;
            }
        }
        if let Some(s) = self.skip_t() {
            tape.output += x * s;
        }
    }

    /// Inference-only batched forward pass.
    pub fn forward_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut tape = BatchTape::default();
        self.forward_batch(x, &mut tape);
        tape.output
    }

    /// Accumulate parameter gradients for a batch given `d loss / d output` (`n x output_dim`).
    pub fn backward_batch(&self, tape: &BatchTape, d_out: &DMatrix<f64>, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.layers.len();
        if let Some(off) = self.skip {
            let (fi, fo) = (self.sizes[0], self.output_dim());
            let mut g = DMatrixViewMut::from_slice(&mut grad[off..off + fi * fo], fi, fo);
            g.gemm_tr(1.0, &tape.inputs[0], d_out, 1.0);
        }
        let mut delta = d_out.clone();
        for l in (0..n_layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let LayerOffsets { weight, bias } = self.layers[l];
            {
                let mut g = DMatrixViewMut::from_slice(&mut grad[weight..weight + fi * fo], fi, fo);
                g.gemm_tr(1.0, &tape.inputs[l], &delta, 1.0);
            }
            if let Some(masks) = &self.masks {
                for (g, &k) in grad[weight..weight + fi * fo].iter_mut().zip(&masks[l]) {
                    *g *= k;
                }
            }
            for (j, col) in delta.column_iter().enumerate() {
                grad[bias + j] += col.sum();
            }
            if l == 0 {
                break;
            }
            let mut prev = &delta * self.weight_t(l).transpose();
            let act = self.activation;
            prev.zip_zip_apply(&tape.pre[l - 1], &tape.inputs[l], |d, z, a| *d *= act.derivative(z, a));
            delta = prev;
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn with_clip(mut self, max_norm: f64) -> Self {
        self.max_grad_norm = Some(max_norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one descent step. Returns the (pre-clip) gradient norm.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        debug_assert_eq!(params.len(), grad.len());
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.max_grad_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_difference_check(net: &mut Mlp, x: &[f64]) {
        // loss = 0.5 * ||out||^2
        let mut tape = Tape::default();
        net.forward_tape(x, &mut tape);
        let out = tape.output().to_vec();
        let mut grad = vec![0.0; net.num_params()];
        let mut d_in = vec![0.0; x.len()];
        net.backward(&tape, &out, &mut grad, Some(&mut d_in));
        let loss = |n: &Mlp, xx: &[f64]| 0.5 * n.forward(xx).iter().map(|v| v * v).sum::<f64>();
        let h = 1e-6;
        for k in (0..net.num_params()).step_by(7) {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let lp = loss(net, x);
            net.params_mut()[k] = orig - h;
            let lm = loss(net, x);
            net.params_mut()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-5 * (1.0 + fd.abs()), "param {k}: fd {fd} vs {}", grad[k]);
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (loss(net, &xp) - loss(net, &xm)) / (2.0 * h);
            assert!((fd - d_in[i]).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = crate::rng::stream(1, "nn-test", 0);
        for act in [Activation::Tanh, Activation::Silu] {
            for skip in [false, true] {
                let mut net = Mlp::new(&[5, 7, 6, 3], act, skip, &mut rng);
                finite_difference_check(&mut net, &[0.3, -1.2, 0.5, 2.0, -0.1]);
            }
        }
    }

    #[test]
    fn batched_pass_matches_per_sample() {
        let mut rng = crate::rng::stream(3, "nn-test", 0);
        let mut net = Mlp::new(&[4, 6, 5, 3], Activation::Silu, true, &mut rng);
        let mask: Vec<f64> = (0..24).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect();
        net.set_masks(vec![mask, vec![1.0; 30], vec![1.0; 15]]);
        let rows = [[0.1, -0.4, 1.3, 0.2], [-1.0, 0.5, 0.0, 0.7]];
        let x = DMatrix::from_fn(2, 4, |r, c| rows[r][c]);
        let d = DMatrix::from_fn(2, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.0));
        let mut bt = BatchTape::default();
        net.forward_batch(&x, &mut bt);
        let mut gb = vec![0.0; net.num_params()];
        net.backward_batch(&bt, &d, &mut gb);
        let mut gs = vec![0.0; net.num_params()];
        let mut tape = Tape::default();
        for r in 0..2 {
            net.forward_tape(&rows[r], &mut tape);
            for c in 0..3 {
                assert!((tape.output()[c] - bt.output()[(r, c)]).abs() < 1e-12);
            }
            let dr: Vec<f64> = (0..3).map(|c| d[(r, c)]).collect();
            net.backward(&tape, &dr, &mut gs, None);
        }
        for (a, b) in gb.iter().zip(&gs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn masked_weights_stay_zero_under_adam() {
        let mut rng = crate::rng::stream(2, "nn-test", 0);
        let mut net = Mlp::new(&[2, 3, 1], Activation::Tanh, false, &mut rng);
        let masks = vec![vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]];
        net.set_masks(masks);
        let mut adam = Adam::new(net.num_params(), 0.1);
        let mut tape = Tape::default();
        for _ in 0..10 {
            net.forward_tape(&[1.0, -1.0], &mut tape);
            let mut g = vec![0.0; net.num_params()];
            net.backward(&tape, &[1.0], &mut g, None);
            let mut p = net.params().to_vec();
            adam.step(&mut p, &g);
            net.params_mut().copy_from_slice(&p);
        }
        assert_eq!(net.params()[1], 0.0);
        assert_eq!(net.params()[4], 0.0);
        // second layer weight index 2 sits after 6 weights + 3 biases
        assert_eq!(net.params()[9 + 2], 0.0);
    }
}
