//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! One `Mlp` type backs every network in the toolkit: predictors, the car
//! and geographic encoders, and the adversaries. A network with no hidden
//! layer and a sigmoid/exp head is exactly a logistic/Poisson GLM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};
use crate::persist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Tanh,
    /// Subgradient at 0 is taken as 0.
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
    /// Nonnegative rates (frequency models).
    Exp,
}

impl HiddenActivation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => z.tanh(),
            HiddenActivation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value `a` and input `z`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => 1.0 - a * a,
            HiddenActivation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl OutputActivation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            OutputActivation::Identity => z,
            OutputActivation::Sigmoid => sigmoid(z),
            OutputActivation::Exp => z.exp(),
        }
    }

    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            OutputActivation::Identity => 1.0,
            OutputActivation::Sigmoid => a * (1.0 - a),
            OutputActivation::Exp => a,
        }
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    hidden_activation: HiddenActivation,
    output_activation: OutputActivation,
    /// Bumped on every parameter update; forward caches record it.
    #[serde(skip)]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
            && self.layers == other.layers
            && self.hidden_activation == other.hidden_activation
            && self.output_activation == other.output_activation
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    layer_dims: Vec<usize>,
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn output_preactivation(&self) -> &Matrix {
        self.pre.last().expect("network has at least one layer")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            weights: net.layers.iter().map(|l| Matrix::zeros(l.weights.rows(), l.weights.cols())).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            w.scale(factor);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Gradients, factor: f64) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            for (a, b) in w.data_mut().iter_mut().zip(o.data()) {
                *a += factor * b;
            }
        }
        for (w, o) in self.biases.iter_mut().zip(&other.biases) {
            for (a, b) in w.iter_mut().zip(o) {
                *a += factor * b;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    fn same_shape(&self, other: &Gradients) -> bool {
        self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.rows() == b.rows() && a.cols() == b.cols())
            && self.biases.iter().zip(&other.biases).all(|(a, b)| a.len() == b.len())
    }
}

/// Parameter gradients plus the gradient with respect to the network input.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub grads: Gradients,
    pub input_grad: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub step_count: u64,
    first_moment: Option<Gradients>,
    second_moment: Option<Gradients>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Self {
        Self::with_kind(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::with_kind(
            OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            learning_rate,
        )
    }

    pub fn with_kind(kind: OptimizerKind, learning_rate: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Optimizer {
            kind,
            learning_rate,
            step_count: 0,
            first_moment: None,
            second_moment: None,
        }
    }

    /// Turns a raw gradient into the parameter delta to add.
    fn step(&mut self, grads: &Gradients, direction: Direction) -> Gradients {
        let sign = match direction {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        };
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                let mut d = grads.clone();
                d.scale(sign * lr);
                d
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let m = self.first_moment.get_or_insert_with(|| zeros_like_grads(grads));
                let v = self.second_moment.get_or_insert_with(|| zeros_like_grads(grads));
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let mut delta = zeros_like_grads(grads);
                let triples = m
                    .weights
                    .iter_mut()
                    .zip(v.weights.iter_mut())
                    .zip(grads.weights.iter().zip(delta.weights.iter_mut()))
                    .map(|((m, v), (g, d))| (m.data_mut(), v.data_mut(), g.data(), d.data_mut()));
                let bias_triples = m
                    .biases
                    .iter_mut()
                    .zip(v.biases.iter_mut())
                    .zip(grads.biases.iter().zip(delta.biases.iter_mut()))
                    .map(|((m, v), (g, d))| (m.as_mut_slice(), v.as_mut_slice(), g.as_slice(), d.as_mut_slice()));
                for (m, v, g, d) in triples.chain(bias_triples) {
                    for i in 0..g.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        d[i] = sign * lr * mhat / (vhat.sqrt() + epsilon);
                    }
                }
                delta
            }
        }
    }
}

fn zeros_like_grads(g: &Gradients) -> Gradients {
    Gradients {
        weights: g.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
        biases: g.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
    }
}

impl Mlp {
    /// Xavier-uniform weights, zero biases.
    pub fn new(
        layer_dims: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut net = Self::zeros(layer_dims, hidden_activation, output_activation)?;
        for layer in &mut net.layers {
            let (fan_in, fan_out) = (layer.weights.rows(), layer.weights.cols());
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weights.data_mut() {
                *w = rng.uniform_range(-limit, limit);
            }
        }
        Ok(net)
    }

    pub fn zeros(
        layer_dims: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer dims {layer_dims:?}")));
        }
        let layers = layer_dims
            .windows(2)
            .map(|w| Layer {
                weights: Matrix::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            layers,
            hidden_activation,
            output_activation,
            generation: 0,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn hidden_activation(&self) -> HiddenActivation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> OutputActivation {
        self.output_activation
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dims("Mlp::set_params_flat", self.num_params(), params.len()));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.data().len();
            l.weights.data_mut().copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::dims("Mlp::forward", self.input_dim(), x.cols()));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul(&layer.weights)?;
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let mut a = z.clone();
            if li == last {
                a.data_mut().iter_mut().for_each(|v| *v = self.output_activation.apply(*v));
            } else {
                a.data_mut().iter_mut().for_each(|v| *v = self.hidden_activation.apply(*v));
            }
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        let cache = ForwardCache {
            generation: self.generation,
            layer_dims: self.layer_dims.clone(),
            inputs,
            pre,
            output: current.clone(),
        };
        Ok((current, cache))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.layer_dims != self.layer_dims {
            return Err(Error::StaleCache(format!(
                "cache dims {:?} vs network {:?}",
                cache.layer_dims, self.layer_dims
            )));
        }
        if cache.generation != self.generation {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        Ok(())
    }

    /// Elementwise derivative of the output activation at the cached output.
    pub fn output_derivative(&self, cache: &ForwardCache) -> Matrix {
        let mut d = cache.output.clone();
        let act = self.output_activation;
        d.data_mut().iter_mut().for_each(|v| *v = act.derivative(*v));
        d
    }

    /// Backpropagates `upstream = dL/d(output)`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Backprop> {
        self.check_cache(cache)?;
        if upstream.rows() != cache.output.rows() || upstream.cols() != cache.output.cols() {
            return Err(Error::dims(
                "Mlp::backward",
                format!("{}x{}", cache.output.rows(), cache.output.cols()),
                format!("{}x{}", upstream.rows(), upstream.cols()),
            ));
        }
        let mut delta = upstream.clone();
        let act = self.output_activation;
        for (d, a) in delta.data_mut().iter_mut().zip(cache.output.data()) {
            *d *= act.derivative(*a);
        }
        self.backward_unchecked(cache, delta)
    }

    /// Backpropagates `dL/d(output pre-activation)`; used where the loss is
    /// better expressed on the logit / log-rate scale.
    pub fn backward_preactivation(&self, cache: &ForwardCache, grad_pre: &Matrix) -> Result<Backprop> {
        self.check_cache(cache)?;
        let out = cache.output_preactivation();
        if grad_pre.rows() != out.rows() || grad_pre.cols() != out.cols() {
            return Err(Error::dims(
                "Mlp::backward_preactivation",
                format!("{}x{}", out.rows(), out.cols()),
                format!("{}x{}", grad_pre.rows(), grad_pre.cols()),
            ));
        }
        self.backward_unchecked(cache, grad_pre.clone())
    }

    fn backward_unchecked(&self, cache: &ForwardCache, mut delta: Matrix) -> Result<Backprop> {
        let n_layers = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        for li in (0..n_layers).rev() {
            let input = &cache.inputs[li];
            let layer = &self.layers[li];
            let (fan_in, fan_out) = (layer.weights.rows(), layer.weights.cols());
            let gw = grads.weights[li].data_mut();
            let gb = &mut grads.biases[li];
            for r in 0..input.rows() {
                let a = input.row(r);
                let d = delta.row(r);
                for (i, &ai) in a.iter().enumerate() {
                    if ai == 0.0 {
                        continue;
                    }
                    let row = &mut gw[i * fan_out..(i + 1) * fan_out];
                    for (g, &dj) in row.iter_mut().zip(d) {
                        *g += ai * dj;
                    }
                }
                for (g, &dj) in gb.iter_mut().zip(d) {
                    *g += dj;
                }
            }
            // delta_prev = delta · Wᵀ
            let w = layer.weights.data();
            let mut prev = Matrix::zeros(input.rows(), fan_in);
            for r in 0..input.rows() {
                let d = delta.row(r);
                let p = prev.row_mut(r);
                for (i, pi) in p.iter_mut().enumerate() {
                    let wrow = &w[i * fan_out..(i + 1) * fan_out];
                    *pi = wrow.iter().zip(d).map(|(a, b)| a * b).sum();
                }
            }
            if li > 0 {
                let z = &cache.pre[li - 1];
                let a = &cache.inputs[li];
                let act = self.hidden_activation;
                for ((p, &zv), &av) in prev.data_mut().iter_mut().zip(z.data()).zip(a.data()) {
                    *p *= act.derivative(zv, av);
                }
            }
            delta = prev;
        }
        Ok(Backprop {
            grads,
            input_grad: delta,
        })
    }

    pub fn apply_update(&mut self, grads: &Gradients, opt: &mut Optimizer, direction: Direction) -> Result<()> {
        let template = Gradients::zeros_like(self);
        if !template.same_shape(grads) {
            return Err(Error::dims("Mlp::apply_update", "gradients congruent with the network", "mismatched shapes"));
        }
        for (li, (w, b)) in grads.weights.iter().zip(&grads.biases).enumerate() {
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: li });
            }
        }
        let delta = opt.step(grads, direction);
        for (layer, (dw, db)) in self.layers.iter_mut().zip(delta.weights.iter().zip(&delta.biases)) {
            for (w, d) in layer.weights.data_mut().iter_mut().zip(dw.data()) {
                *w += d;
            }
            for (b, d) in layer.bias.iter_mut().zip(db) {
                *b += d;
            }
        }
        self.generation += 1;
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.layer_dims.len() != self.layers.len() + 1 {
            return Err(Error::Format("layer count does not match layer_dims".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.rows() != self.layer_dims[i]
                || l.weights.cols() != self.layer_dims[i + 1]
                || l.bias.len() != self.layer_dims[i + 1]
            {
                return Err(Error::Format(format!("layer {i} does not chain with layer_dims")));
            }
            if !l.weights.is_finite() || l.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json("mlp", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Mlp = persist::from_json("mlp", text)?;
        net.validate()?;
        Ok(net)
    }
}

/// Max relative error between backprop gradients and central differences.
///
/// `loss_fn(outputs, targets)` returns the loss and `dL/d(outputs)`.
pub fn gradient_check<F>(net: &Mlp, loss_fn: F, x: &Matrix, y: &Matrix, epsilon: f64) -> Result<f64>
where
    F: Fn(&Matrix, &Matrix) -> (f64, Matrix),
{
    if !(epsilon > 1e-8 && epsilon < 1e-3) {
        return Err(Error::invalid("gradient_check epsilon must lie in (1e-8, 1e-3)"));
    }
    let (out, cache) = net.forward(x)?;
    let (_, upstream) = loss_fn(&out, y);
    let analytic = net.backward(&cache, &upstream)?.grads.flat();

    let base = net.params_flat();
    let mut probe = net.clone();
    let mut params = base.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        params[i] = base[i] + epsilon;
        probe.set_params_flat(&params)?;
        let plus = loss_fn(&probe.predict(x)?, y).0;
        params[i] = base[i] - epsilon;
        probe.set_params_flat(&params)?;
        let minus = loss_fn(&probe.predict(x)?, y).0;
        params[i] = base[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
