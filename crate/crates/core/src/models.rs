//! Predictors, task losses and performance metrics.
//!
//! * [`Glm`] fitted by iteratively reweighted least squares;
//! * [`JointNet`], the differentiable stack `h(X_p, γ(X_g), c(X_c))` that
//!   covers plain MLPs (no encoders), GLM heads (no hidden layer) and the
//!   autoencoder pricing model;
//! * [`train_joint`], the one minibatch loop every gradient-trained model
//!   goes through, with a [`TrainingHook`] for fairness penalties;
//! * deviance, EDR, Gini, accuracy and MSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Direction, ForwardCache, Gradients, HiddenActivation, Mlp, Optimizer, OutputActivation};
use crate::numkit::{self, derive_seed, Matrix, Rng};
use crate::persist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Claim / no-claim; log-loss.
    Binary,
    /// Claim counts with exposure; Poisson deviance.
    Frequency,
    /// Nonnegative amounts; squared error.
    Severity,
}

impl Task {
    pub fn family(self) -> Family {
        match self {
            Task::Binary => Family::BernoulliLogit,
            Task::Frequency => Family::PoissonLog,
            Task::Severity => Family::GaussianIdentity,
        }
    }

    pub fn output_activation(self) -> OutputActivation {
        match self {
            Task::Binary => OutputActivation::Sigmoid,
            Task::Frequency => OutputActivation::Exp,
            Task::Severity => OutputActivation::Identity,
        }
    }

    pub fn check_targets(self, y: &[f64]) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(format!("{self:?} targets must be {msg}")));
        match self {
            Task::Binary if y.iter().any(|&v| v != 0.0 && v != 1.0) => bad("0 or 1"),
            Task::Frequency if y.iter().any(|&v| !(v >= 0.0) || v.fract() != 0.0) => bad("nonnegative integers"),
            Task::Severity if y.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) => bad("nonnegative reals"),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Task::Binary),
            "frequency" => Ok(Task::Frequency),
            "severity" => Ok(Task::Severity),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub exposure_used: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    BernoulliLogit,
    PoissonLog,
    GaussianIdentity,
}

impl Family {
    fn link(self, mu: f64) -> f64 {
        match self {
            Family::BernoulliLogit => (mu / (1.0 - mu)).ln(),
            Family::PoissonLog => mu.ln(),
            Family::GaussianIdentity => mu,
        }
    }

    fn inverse_link(self, eta: f64) -> f64 {
        match self {
            Family::BernoulliLogit => crate::mlp::sigmoid(eta),
            Family::PoissonLog => eta.exp(),
            Family::GaussianIdentity => eta,
        }
    }

    /// `dμ/dη`, which for these canonical links is also the IRLS weight
    /// (gaussian aside, whose weight is 1).
    fn mu_eta(self, mu: f64) -> f64 {
        match self {
            Family::BernoulliLogit => mu * (1.0 - mu),
            Family::PoissonLog => mu,
            Family::GaussianIdentity => 1.0,
        }
    }

    fn task(self) -> Task {
        match self {
            Family::BernoulliLogit => Task::Binary,
            Family::PoissonLog => Task::Frequency,
            Family::GaussianIdentity => Task::Severity,
        }
    }
}

pub const IRLS_MAX_ITERATIONS: usize = 100;
pub const IRLS_TOLERANCE: f64 = 1e-9;
/// A logit coefficient beyond this magnitude signals (quasi-)separation.
pub const SEPARATION_THRESHOLD: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Glm {
    /// Intercept first, then one coefficient per feature.
    pub coefficients: Vec<f64>,
    pub family: Family,
    pub fitted: bool,
    pub separation_warning: bool,
    pub iterations: usize,
    pub deviance_trace: Vec<f64>,
}

fn with_intercept(x: &Matrix) -> Matrix {
    let mut d = Matrix::zeros(x.rows(), x.cols() + 1);
    for r in 0..x.rows() {
        let row = d.row_mut(r);
        row[0] = 1.0;
        row[1..].copy_from_slice(x.row(r));
    }
    d
}

fn check_offset(offset: Option<&[f64]>, n: usize) -> Result<()> {
    match offset {
        Some(o) if o.len() != n => Err(Error::dims("offset", n, o.len())),
        Some(o) if o.iter().any(|v| !v.is_finite()) => Err(Error::NonFinite("offset".into())),
        _ => Ok(()),
    }
}

/// Fits a GLM with intercept by IRLS.
///
/// Stops when the relative deviance change drops below [`IRLS_TOLERANCE`].
/// A logit fit stops early with `separation_warning` set once a coefficient
/// exceeds [`SEPARATION_THRESHOLD`] while fitted probabilities are numerically
/// 0 or 1; a converged fit raises the flag on either condition.
pub fn glm_fit(x: &Matrix, y: &[f64], family: Family, offset: Option<&[f64]>) -> Result<Glm> {
    let n = x.rows();
    if y.len() != n {
        return Err(Error::dims("glm_fit", n, y.len()));
    }
    if n == 0 {
        return Err(Error::invalid("glm_fit on an empty design"));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("glm_fit design".into()));
    }
    check_offset(offset, n)?;
    match family {
        Family::BernoulliLogit if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) => {
            return Err(Error::invalid("bernoulli targets must lie in [0, 1]"))
        }
        Family::PoissonLog if y.iter().any(|&v| !(v >= 0.0)) => {
            return Err(Error::invalid("poisson targets must be nonnegative"))
        }
        _ => {}
    }
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);
    let design = with_intercept(x);
    let p = design.cols();
    let y_mean = numkit::mean(y);

    let mut mu: Vec<f64> = y
        .iter()
        .map(|&v| match family {
            Family::BernoulliLogit => (v + 0.5) / 2.0,
            Family::PoissonLog => v + 0.1 * y_mean.max(0.1),
            Family::GaussianIdentity => v,
        })
        .collect();
    let mut eta: Vec<f64> = mu.iter().map(|&m| family.link(m)).collect();
    let mut beta = vec![0.0; p];
    let mut trace = Vec::new();
    let mut previous = f64::INFINITY;
    let mut separation = false;

    for iteration in 1..=IRLS_MAX_ITERATIONS {
        let mut xtwx = Matrix::zeros(p, p);
        let mut xtwz = vec![0.0; p];
        for i in 0..n {
            let d = family.mu_eta(mu[i]).max(1e-12);
            let w = match family {
                Family::GaussianIdentity => 1.0,
                _ => d,
            };
            let z = eta[i] - off(i) + (y[i] - mu[i]) / d;
            let row = design.row(i);
            for a in 0..p {
                let wa = w * row[a];
                xtwz[a] += wa * z;
                let target = xtwx.row_mut(a);
                for b in a..p {
                    target[b] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                let v = xtwx.get(b, a);
                xtwx.set(a, b, v);
            }
        }
        beta = numkit::solve_spd(&xtwx, &xtwz)?;
        for i in 0..n {
            eta[i] = design.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + off(i);
            mu[i] = family.inverse_link(eta[i]);
            if family == Family::BernoulliLogit {
                mu[i] = mu[i].clamp(1e-15, 1.0 - 1e-15);
            }
        }
        let dev = deviance(family.task(), y, &mu)?;
        trace.push(dev);
        if !dev.is_finite() {
            return Err(Error::NoConvergence {
                iterations: iteration,
                trace,
            });
        }
        let large = family == Family::BernoulliLogit && beta.iter().any(|b| b.abs() > SEPARATION_THRESHOLD);
        let saturated = family == Family::BernoulliLogit && mu.iter().any(|&m| !(1e-10..=1.0 - 1e-10).contains(&m));
        // Large coefficients alone can be a legitimate scale; divergence also saturates probabilities.
        if large && saturated {
            separation = true;
            break;
        }
        if (previous - dev).abs() / (dev.abs() + 0.1) < IRLS_TOLERANCE {
            separation = large || saturated;
            break;
        }
        if iteration == IRLS_MAX_ITERATIONS {
            return Err(Error::NoConvergence {
                iterations: iteration,
                trace,
            });
        }
        previous = dev;
    }
    Ok(Glm {
        coefficients: beta,
        family,
        fitted: true,
        separation_warning: separation,
        iterations: trace.len(),
        deviance_trace: trace,
    })
}

impl Glm {
    pub fn feature_dim(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn linear_predictor(&self, x: &Matrix, offset: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.cols() != self.feature_dim() {
            return Err(Error::dims("Glm::predict", self.feature_dim(), x.cols()));
        }
        check_offset(offset, x.rows())?;
        Ok((0..x.rows())
            .map(|i| {
                self.coefficients[0]
                    + x.row(i).iter().zip(&self.coefficients[1..]).map(|(a, b)| a * b).sum::<f64>()
                    + offset.map_or(0.0, |o| o[i])
            })
            .collect())
    }

    /// Mean response; rates for the Poisson family when no offset is given.
    pub fn predict(&self, x: &Matrix, offset: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self
            .linear_predictor(x, offset)?
            .into_iter()
            .map(|e| self.family.inverse_link(e))
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json("glm", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        persist::from_json("glm", text)
    }
}

fn check_pred(task: Task, y: &[f64], pred: &[f64]) -> Result<()> {
    if y.len() != pred.len() {
        return Err(Error::dims("deviance", y.len(), pred.len()));
    }
    let ok = match task {
        Task::Binary => pred.iter().all(|&p| p > 0.0 && p < 1.0),
        Task::Frequency => pred.iter().all(|&p| p > 0.0 && p.is_finite()),
        Task::Severity => pred.iter().all(|p| p.is_finite()),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("predictions out of range for the {task:?} task")))
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Total deviance: −2·log-likelihood (binary), 2·Σ Poisson unit deviances
/// (frequency, `pred` = expected counts), sum of squared errors (severity).
pub fn deviance(task: Task, y: &[f64], pred: &[f64]) -> Result<f64> {
    check_pred(task, y, pred)?;
    let total = match task {
        Task::Binary => -2.0 * y.iter().zip(pred).map(|(&t, &p)| xlogy(t, p) + xlogy(1.0 - t, 1.0 - p)).sum::<f64>(),
        Task::Frequency => 2.0 * y.iter().zip(pred).map(|(&t, &m)| xlogy(t, t / m) - (t - m)).sum::<f64>(),
        Task::Severity => y.iter().zip(pred).map(|(&t, &m)| (t - m) * (t - m)).sum::<f64>(),
    };
    Ok(total.max(0.0))
}

/// Intercept-only prediction: the (exposure-weighted) mean response.
pub fn null_prediction(task: Task, y: &[f64], exposure: Option<&[f64]>) -> Vec<f64> {
    match (task, exposure) {
        (Task::Frequency, Some(e)) => {
            let rate = y.iter().sum::<f64>() / e.iter().sum::<f64>();
            e.iter().map(|v| rate * v).collect()
        }
        _ => vec![numkit::mean(y); y.len()],
    }
}

/// Expected deviance ratio `1 − D/D₀` against the intercept-only model.
///
/// `pred` is on the response scale (expected counts for frequency).
pub fn edr(task: Task, y: &[f64], pred: &[f64], exposure: Option<&[f64]>) -> Result<f64> {
    let null = null_prediction(task, y, exposure);
    let d0 = deviance(task, y, &null)?;
    if d0 == 0.0 {
        return Err(Error::Undefined("EDR: the null deviance is zero".into()));
    }
    Ok(1.0 - deviance(task, y, pred)? / d0)
}

/// Lorenz-curve Gini: rows ordered by decreasing prediction, x-axis the
/// cumulative share of exposure (or count), y-axis the cumulative share of
/// the response. Tied predictions form one linear segment.
pub fn gini(y: &[f64], pred: &[f64], exposure: Option<&[f64]>) -> Result<f64> {
    if y.len() != pred.len() {
        return Err(Error::dims("gini", y.len(), pred.len()));
    }
    if let Some(e) = exposure {
        if e.len() != y.len() {
            return Err(Error::dims("gini exposure", y.len(), e.len()));
        }
    }
    let total_y: f64 = y.iter().sum();
    if !(total_y > 0.0) {
        return Err(Error::Undefined("Gini needs a positive response total".into()));
    }
    let weight = |i: usize| exposure.map_or(1.0, |e| e[i]);
    let total_w: f64 = (0..y.len()).map(weight).sum();
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));

    let mut area = 0.0;
    let (mut cum_w, mut cum_y) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gw, mut gy) = (0.0, 0.0);
        while j < order.len() && pred[order[j]] == pred[order[i]] {
            gw += weight(order[j]);
            gy += y[order[j]];
            j += 1;
        }
        let (next_w, next_y) = (cum_w + gw, cum_y + gy);
        area += (next_w - cum_w) / total_w * (cum_y + next_y) / (2.0 * total_y);
        cum_w = next_w;
        cum_y = next_y;
        i = j;
    }
    Ok(2.0 * area - 1.0)
}

/// Gini divided by the Gini of the oracle ordering by `y`.
pub fn normalized_gini(y: &[f64], pred: &[f64], exposure: Option<&[f64]>) -> Result<f64> {
    let oracle = gini(y, y, exposure)?;
    if oracle == 0.0 {
        return Err(Error::Undefined("normalized Gini: the response is constant".into()));
    }
    Ok(gini(y, pred, exposure)? / oracle)
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Labels scores: `1` when `score ≥ threshold`.
pub fn threshold_labels(scores: &[f64], threshold: f64) -> Vec<f64> {
    scores.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect()
}

pub fn accuracy(y: &[f64], scores: &[f64], threshold: f64) -> Result<f64> {
    if y.len() != scores.len() {
        return Err(Error::dims("accuracy", y.len(), scores.len()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("accuracy threshold must lie in (0, 1)"));
    }
    if y.is_empty() {
        return Err(Error::invalid("accuracy of an empty sample"));
    }
    let labels = threshold_labels(scores, threshold);
    let correct = y.iter().zip(&labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / y.len() as f64)
}

pub fn mse(y: &[f64], pred: &[f64]) -> Result<f64> {
    if y.len() != pred.len() {
        return Err(Error::dims("mse", y.len(), pred.len()));
    }
    if y.is_empty() {
        return Err(Error::invalid("mse of an empty sample"));
    }
    Ok(y.iter().zip(pred).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Mean task loss of one batch and its gradient with respect to the output
/// pre-activation (logit, log-rate or identity).
///
/// Log-loss for binary, mean Poisson deviance of `exposure·exp(z)` for
/// frequency, mean squared error for severity.
pub fn task_loss_preactivation(task: Task, y: &[f64], pre: &[f64], exposure: Option<&[f64]>) -> (f64, Vec<f64>) {
    let n = y.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(y.len());
    for (i, (&t, &z)) in y.iter().zip(pre).enumerate() {
        match task {
            Task::Binary => {
                // log(1 + e^z) − t·z, evaluated stably
                let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                loss += softplus - t * z;
                grad.push((crate::mlp::sigmoid(z) - t) / n);
            }
            Task::Frequency => {
                let mu = exposure.map_or(1.0, |e| e[i]) * z.exp();
                loss += 2.0 * (xlogy(t, t / mu) - (t - mu));
                grad.push(2.0 * (mu - t) / n);
            }
            Task::Severity => {
                loss += (z - t) * (z - t);
                grad.push(2.0 * (z - t) / n);
            }
        }
    }
    (loss / n, grad)
}

/// Train-fitted affine standardization of feature columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl ColumnScaler {
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.cols() == 0 {
            return Ok(ColumnScaler {
                means: Vec::new(),
                stds: Vec::new(),
            });
        }
        let s = numkit::standardize_columns(x)?;
        Ok(ColumnScaler {
            means: s.means,
            stds: s.stds,
        })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.means.len() {
            return Err(Error::dims("ColumnScaler::transform", self.means.len(), x.cols()));
        }
        let mut out = x.clone();
        let c = x.cols();
        for r in 0..x.rows() {
            for (j, v) in out.row_mut(r).iter_mut().enumerate().take(c) {
                *v = (*v - self.means[j]) / self.stds[j];
            }
        }
        Ok(out)
    }
}

/// Feature blocks fed to a [`JointNet`]; a block may have zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct JointInputs {
    pub policy: Matrix,
    pub geo: Matrix,
    pub car: Matrix,
}

impl JointInputs {
    pub fn policy_only(policy: Matrix) -> Self {
        let n = policy.rows();
        JointInputs {
            policy,
            geo: Matrix::zeros(n, 0),
            car: Matrix::zeros(n, 0),
        }
    }

    pub fn rows(&self) -> usize {
        self.policy.rows()
    }

    pub fn select_rows(&self, idx: &[usize]) -> JointInputs {
        JointInputs {
            policy: self.policy.select_rows(idx),
            geo: self.geo.select_rows(idx),
            car: self.car.select_rows(idx),
        }
    }

    fn check(&self) -> Result<()> {
        let n = self.policy.rows();
        if self.geo.rows() != n || self.car.rows() != n {
            return Err(Error::dims("JointInputs", n, format!("{} / {}", self.geo.rows(), self.car.rows())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            hidden: vec![8],
            latent_dim: 1,
        }
    }
}

/// `h([X_p, γ(X_g), c(X_c)])`; an absent encoder drops its block entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointNet {
    pub predictor: Mlp,
    pub geo_encoder: Option<Mlp>,
    pub car_encoder: Option<Mlp>,
}

#[derive(Debug, Clone)]
pub struct JointForward {
    pub output: Matrix,
    predictor_cache: ForwardCache,
    geo: Option<(Matrix, ForwardCache)>,
    car: Option<(Matrix, ForwardCache)>,
}

impl JointForward {
    pub fn output_preactivation(&self) -> &Matrix {
        self.predictor_cache.output_preactivation()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGradients {
    pub predictor: Gradients,
    pub geo: Option<Gradients>,
    pub car: Option<Gradients>,
}

impl JointGradients {
    pub fn flat(&self) -> Vec<f64> {
        let mut out = self.predictor.flat();
        for g in self.geo.iter().chain(&self.car) {
            out.extend(g.flat());
        }
        out
    }
}

pub struct JointOptimizer {
    predictor: Optimizer,
    geo: Optimizer,
    car: Optimizer,
}

impl JointOptimizer {
    pub fn adam(learning_rate: f64) -> Self {
        JointOptimizer {
            predictor: Optimizer::adam(learning_rate),
            geo: Optimizer::adam(learning_rate),
            car: Optimizer::adam(learning_rate),
        }
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        for opt in [&mut self.predictor, &mut self.geo, &mut self.car] {
            opt.learning_rate = learning_rate;
        }
    }
}

fn encoder(input: usize, spec: &EncoderSpec, rng: &mut Rng) -> Result<Option<Mlp>> {
    if spec.latent_dim == 0 || input == 0 {
        return Ok(None);
    }
    let mut dims = vec![input];
    dims.extend_from_slice(&spec.hidden);
    dims.push(spec.latent_dim);
    Mlp::new(&dims, HiddenActivation::Tanh, OutputActivation::Identity, rng).map(Some)
}

impl JointNet {
    pub fn new(
        policy_dim: usize,
        geo_dim: usize,
        car_dim: usize,
        geo_spec: &EncoderSpec,
        car_spec: &EncoderSpec,
        predictor_hidden: &[usize],
        task: Task,
        rng: &mut Rng,
    ) -> Result<Self> {
        let geo_encoder = encoder(geo_dim, geo_spec, rng)?;
        let car_encoder = encoder(car_dim, car_spec, rng)?;
        let latent = geo_encoder.as_ref().map_or(0, Mlp::output_dim) + car_encoder.as_ref().map_or(0, Mlp::output_dim);
        let mut dims = vec![policy_dim + latent];
        dims.extend_from_slice(predictor_hidden);
        dims.push(1);
        let predictor = Mlp::new(&dims, HiddenActivation::Tanh, task.output_activation(), rng)?;
        Ok(JointNet {
            predictor,
            geo_encoder,
            car_encoder,
        })
    }

    /// A predictor over the policy block only.
    pub fn plain(policy_dim: usize, hidden: &[usize], task: Task, rng: &mut Rng) -> Result<Self> {
        let off = EncoderSpec {
            hidden: Vec::new(),
            latent_dim: 0,
        };
        Self::new(policy_dim, 0, 0, &off, &off, hidden, task, rng)
    }

    pub fn num_params(&self) -> usize {
        self.predictor.num_params()
            + self.geo_encoder.as_ref().map_or(0, Mlp::num_params)
            + self.car_encoder.as_ref().map_or(0, Mlp::num_params)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = self.predictor.params_flat();
        for e in self.geo_encoder.iter().chain(&self.car_encoder) {
            out.extend(e.params_flat());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dims("JointNet::set_params_flat", self.num_params(), params.len()));
        }
        let mut offset = self.predictor.num_params();
        self.predictor.set_params_flat(&params[..offset])?;
        for e in self.geo_encoder.iter_mut().chain(self.car_encoder.iter_mut()) {
            let k = e.num_params();
            e.set_params_flat(&params[offset..offset + k])?;
            offset += k;
        }
        Ok(())
    }

    fn encode(net: &Option<Mlp>, x: &Matrix) -> Result<Option<(Matrix, ForwardCache)>> {
        net.as_ref().map(|e| e.forward(x)).transpose()
    }

    pub fn forward(&self, inputs: &JointInputs) -> Result<JointForward> {
        inputs.check()?;
        let geo = Self::encode(&self.geo_encoder, &inputs.geo)?;
        let car = Self::encode(&self.car_encoder, &inputs.car)?;
        let mut blocks = vec![&inputs.policy];
        blocks.extend(geo.iter().map(|(m, _)| m));
        blocks.extend(car.iter().map(|(m, _)| m));
        let design = Matrix::hcat(&blocks)?;
        let (output, predictor_cache) = self.predictor.forward(&design)?;
        Ok(JointForward {
            output,
            predictor_cache,
            geo,
            car,
        })
    }

    pub fn predict(&self, inputs: &JointInputs) -> Result<Vec<f64>> {
        Ok(self.forward(inputs)?.output.into_data())
    }

    /// Latent components `(C, G)`; empty matrices when an encoder is absent.
    pub fn components(&self, inputs: &JointInputs) -> Result<(Matrix, Matrix)> {
        let n = inputs.rows();
        let c = match &self.car_encoder {
            Some(e) => e.predict(&inputs.car)?,
            None => Matrix::zeros(n, 0),
        };
        let g = match &self.geo_encoder {
            Some(e) => e.predict(&inputs.geo)?,
            None => Matrix::zeros(n, 0),
        };
        Ok((c, g))
    }

    /// Backpropagates a gradient on the output pre-activation through the
    /// predictor and into both encoders.
    pub fn backward_preactivation(&self, fwd: &JointForward, grad_pre: &Matrix) -> Result<JointGradients> {
        let bp = self.predictor.backward_preactivation(&fwd.predictor_cache, grad_pre)?;
        let mut col = self.predictor.input_dim()
            - fwd.geo.as_ref().map_or(0, |(m, _)| m.cols())
            - fwd.car.as_ref().map_or(0, |(m, _)| m.cols());
        let mut through = |net: &Option<Mlp>, part: &Option<(Matrix, ForwardCache)>| -> Result<Option<Gradients>> {
            match (net, part) {
                (Some(e), Some((m, cache))) => {
                    let idx: Vec<usize> = (col..col + m.cols()).collect();
                    col += m.cols();
                    Ok(Some(e.backward(cache, &bp.input_grad.select_cols(&idx))?.grads))
                }
                _ => Ok(None),
            }
        };
        let geo = through(&self.geo_encoder, &fwd.geo)?;
        let car = through(&self.car_encoder, &fwd.car)?;
        Ok(JointGradients {
            predictor: bp.grads,
            geo,
            car,
        })
    }

    pub fn apply_update(&mut self, grads: &JointGradients, opt: &mut JointOptimizer) -> Result<()> {
        self.predictor.apply_update(&grads.predictor, &mut opt.predictor, Direction::Descent)?;
        if let (Some(e), Some(g)) = (self.geo_encoder.as_mut(), grads.geo.as_ref()) {
            e.apply_update(g, &mut opt.geo, Direction::Descent)?;
        }
        if let (Some(e), Some(g)) = (self.car_encoder.as_mut(), grads.car.as_ref()) {
            e.apply_update(g, &mut opt.car, Direction::Descent)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the first epoch.
    pub learning_rate: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: DEFAULT_LR_DECAY,
            seed: 0,
        }
    }
}

pub const DEFAULT_LR_DECAY: f64 = 0.9;

impl TrainConfig {
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Task loss on the full training set after the epoch.
    pub task_loss: f64,
    /// Mean weighted penalty over the epoch's batches.
    pub penalty: f64,
    pub hgr_estimate: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl TrainingTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,task_loss,penalty,hgr_estimate,lr\n");
        for e in &self.epochs {
            let hgr = e.hgr_estimate.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.task_loss, e.penalty, hgr, e.learning_rate));
        }
        out
    }
}

/// Penalty contribution of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyOutput {
    /// Weighted penalty value, for the trace.
    pub value: f64,
    /// Weighted `d penalty / d Ŷ` for every forwarded row; `None` leaves the
    /// predictor update untouched.
    pub grad: Option<Matrix>,
}

/// Extension point of [`train_joint`], implemented by the fairness penalties.
pub trait TrainingHook {
    /// Extra rows forwarded with the batch that enter only the penalty.
    fn extra_rows(&mut self, _batch: &[usize]) -> Vec<usize> {
        Vec::new()
    }

    /// Updates any adversary on the batch, then evaluates the penalty.
    /// `rows` indexes the training data; `pred` holds the matching outputs.
    fn on_batch(&mut self, rows: &[usize], pred: &Matrix) -> Result<PenaltyOutput>;

    /// Dependence estimate reported in the trace at the end of an epoch.
    fn epoch_estimate(&mut self) -> Option<f64> {
        None
    }

    fn take_warnings(&mut self) -> Vec<String> {
        Vec::new()
    }
}

/// Plain task training.
pub struct NoPenalty;

impl TrainingHook for NoPenalty {
    fn on_batch(&mut self, _rows: &[usize], _pred: &Matrix) -> Result<PenaltyOutput> {
        Ok(PenaltyOutput { value: 0.0, grad: None })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainTargets<'a> {
    pub task: Task,
    pub y: &'a [f64],
    pub exposure: Option<&'a [f64]>,
}

/// Epoch-wise shuffled minibatches of at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Parameter gradient of `task loss + penalty` on one forwarded batch.
///
/// `task_grad` is the task-loss gradient on the pre-activation of the first
/// `task_grad.len()` rows; the remaining rows enter only through
/// `penalty_grad`, the penalty gradient with respect to the outputs.
pub fn batch_gradient(
    net: &JointNet,
    fwd: &JointForward,
    task_grad: &[f64],
    penalty_grad: Option<&Matrix>,
) -> Result<JointGradients> {
    let rows = fwd.output.rows();
    if task_grad.len() > rows {
        return Err(Error::dims("batch_gradient task rows", rows, task_grad.len()));
    }
    let mut grad_pre = vec![0.0; rows];
    grad_pre[..task_grad.len()].copy_from_slice(task_grad);
    if let Some(g) = penalty_grad {
        if g.rows() != rows || g.cols() != 1 {
            return Err(Error::dims("penalty gradient", rows, g.rows()));
        }
        let act = net.predictor.output_activation();
        for ((gp, &dp), &out) in grad_pre.iter_mut().zip(g.data()).zip(fwd.output.data()) {
            *gp += dp * act.derivative(out);
        }
    }
    net.backward_preactivation(fwd, &Matrix::new(rows, 1, grad_pre)?)
}

/// The shared minibatch loop: per batch, forward, let the hook train its
/// adversary and return a penalty gradient, then take one descent step on
/// `task loss + penalty`.
///
/// Batch order comes from stream 1 of `cfg.seed`, so runs differing only in
/// the hook see identical batches. A hook returning no gradient leaves the
/// update bit-identical to [`NoPenalty`].
pub fn train_joint(
    net: &mut JointNet,
    inputs: &JointInputs,
    targets: TrainTargets<'_>,
    cfg: &TrainConfig,
    hook: &mut dyn TrainingHook,
) -> Result<TrainingTrace> {
    let n = inputs.rows();
    if targets.y.len() != n {
        return Err(Error::dims("train_joint targets", n, targets.y.len()));
    }
    if let Some(e) = targets.exposure {
        if e.len() != n {
            return Err(Error::dims("train_joint exposure", n, e.len()));
        }
    }
    if n < 2 || cfg.epochs == 0 || cfg.batch_size < 2 {
        return Err(Error::invalid("train_joint needs ≥ 2 rows, ≥ 1 epoch and batch_size ≥ 2"));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) || !(cfg.lr_decay > 0.0 && cfg.lr_decay <= 1.0) {
        return Err(Error::invalid("learning rate must be positive and lr_decay must lie in (0, 1]"));
    }
    if targets.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("train_joint targets".into()));
    }
    let mut opt = JointOptimizer::adam(cfg.learning_rate);
    let mut batch_rng = Rng::new(derive_seed(cfg.seed, 1));
    let mut trace = TrainingTrace::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        opt.set_learning_rate(lr);
        let (mut penalty_sum, mut batches_seen) = (0.0, 0usize);
        for batch in epoch_batches(n, cfg.batch_size, &mut batch_rng) {
            let extra = hook.extra_rows(&batch);
            let rows: Vec<usize> = batch.iter().chain(&extra).copied().collect();
            let fwd = net.forward(&inputs.select_rows(&rows))?;
            let m = batch.len();
            let y: Vec<f64> = batch.iter().map(|&i| targets.y[i]).collect();
            let exposure: Option<Vec<f64>> = targets.exposure.map(|e| batch.iter().map(|&i| e[i]).collect());
            let pre = fwd.output_preactivation().data();
            let (loss, task_grad) = task_loss_preactivation(targets.task, &y, &pre[..m], exposure.as_deref());
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            let penalty = hook.on_batch(&rows, &fwd.output)?;
            let grads = batch_gradient(net, &fwd, &task_grad, penalty.grad.as_ref())?;
            net.apply_update(&grads, &mut opt)?;

            penalty_sum += penalty.value;
            batches_seen += 1;
        }
        let full = net.forward(inputs)?;
        let (task_loss, _) =
            task_loss_preactivation(targets.task, targets.y, full.output_preactivation().data(), targets.exposure);
        if !task_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        trace.epochs.push(EpochRecord {
            epoch,
            task_loss,
            penalty: penalty_sum / batches_seen as f64,
            hgr_estimate: hook.epoch_estimate(),
            learning_rate: lr,
        });
        trace.warnings.extend(hook.take_warnings());
    }
    Ok(trace)
}

/// A plain gradient-trained network with its own feature scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpRegressor {
    pub task: Task,
    pub scaler: ColumnScaler,
    pub net: JointNet,
}

impl MlpRegressor {
    pub fn fit(
        x: &Matrix,
        targets: TrainTargets<'_>,
        hidden: &[usize],
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainingTrace)> {
        targets.task.check_targets(targets.y)?;
        Self::fit_unchecked(x, targets, hidden, cfg)
    }

    /// As [`MlpRegressor::fit`] without the target-support check, for
    /// squared-error regression on signed targets such as residuals.
    pub fn fit_unchecked(
        x: &Matrix,
        targets: TrainTargets<'_>,
        hidden: &[usize],
        cfg: &TrainConfig,
    ) -> Result<(Self, TrainingTrace)> {
        let scaler = ColumnScaler::fit(x)?;
        let inputs = JointInputs::policy_only(scaler.transform(x)?);
        let mut rng = Rng::new(derive_seed(cfg.seed, 0));
        let mut net = JointNet::plain(x.cols(), hidden, targets.task, &mut rng)?;
        let trace = train_joint(&mut net, &inputs, targets, cfg, &mut NoPenalty)?;
        Ok((
            MlpRegressor {
                task: targets.task,
                scaler,
                net,
            },
            trace,
        ))
    }

    /// Probabilities, rates or amounts, per task.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        self.net.predict(&JointInputs::policy_only(self.scaler.transform(x)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn intercept_only_poisson_predicts_mean() {
        let x = Matrix::zeros(4, 0);
        let glm = glm_fit(&x, &[0.0, 1.0, 2.0, 1.0], Family::PoissonLog, None).unwrap();
        for p in glm.predict(&x, None).unwrap() {
            assert!((p - 1.0).abs() < 1e-10);
        }
        assert!(glm.coefficients[0].abs() < 1e-10);
    }

    #[test]
    fn separable_logit_sets_warning() {
        let x = design(&[vec![-2.0], vec![-1.0], vec![1.0], vec![2.0]]);
        let glm = glm_fit(&x, &[0.0, 0.0, 1.0, 1.0], Family::BernoulliLogit, None).unwrap();
        assert!(glm.separation_warning);
    }

    #[test]
    fn poisson_recovers_simulated_coefficients() {
        let mut rng = Rng::new(3);
        let n = 20000;
        let truth = [-0.5, 0.3, -0.2];
        let mut rows = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut offset = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b) = (rng.normal(), rng.normal());
            let e: f64 = rng.uniform_range(0.5, 1.0);
            let mu = e * (truth[0] + truth[1] * a + truth[2] * b).exp();
            y.push(rng.poisson(mu) as f64);
            rows.push(vec![a, b]);
            offset.push(e.ln());
        }
        let x = design(&rows);
        let glm = glm_fit(&x, &y, Family::PoissonLog, Some(&offset)).unwrap();
        // standard errors from the Fisher information at the estimate
        let mu = glm.predict(&x, Some(&offset)).unwrap();
        let d = with_intercept(&x);
        let mut info = Matrix::zeros(3, 3);
        for i in 0..n {
            for a in 0..3 {
                for b in 0..3 {
                    let v = info.get(a, b) + mu[i] * d.get(i, a) * d.get(i, b);
                    info.set(a, b, v);
                }
            }
        }
        for k in 0..3 {
            let mut unit = vec![0.0; 3];
            unit[k] = 1.0;
            let se = numkit::solve_spd(&info, &unit).unwrap()[k].sqrt();
            assert!((glm.coefficients[k] - truth[k]).abs() < 3.0 * se, "coef {k}");
        }
    }

    #[test]
    fn balance_property_holds() {
        let mut rng = Rng::new(4);
        let n = 3000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.uniform()]).collect();
        let x = design(&rows);
        let yb: Vec<f64> = rows.iter().map(|r| if rng.uniform() < crate::mlp::sigmoid(r[0]) { 1.0 } else { 0.0 }).collect();
        let yp: Vec<f64> = rows.iter().map(|r| rng.poisson((0.3 * r[0]).exp()) as f64).collect();
        for (family, y) in [(Family::BernoulliLogit, &yb), (Family::PoissonLog, &yp)] {
            let glm = glm_fit(&x, y, family, None).unwrap();
            let total: f64 = glm.predict(&x, None).unwrap().iter().sum();
            let observed: f64 = y.iter().sum();
            assert!((total - observed).abs() <= 1e-6 * observed, "{family:?}");
        }
    }

    #[test]
    fn gaussian_glm_is_least_squares() {
        let x = design(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let glm = glm_fit(&x, &[1.0, 3.0, 5.0, 7.0], Family::GaussianIdentity, None).unwrap();
        assert!((glm.coefficients[0] - 1.0).abs() < 1e-9);
        assert!((glm.coefficients[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn glm_deviance_not_above_null() {
        let mut rng = Rng::new(5);
        let rows: Vec<Vec<f64>> = (0..500).map(|_| vec![rng.normal()]).collect();
        let y: Vec<f64> = rows.iter().map(|r| rng.poisson((0.5 * r[0]).exp()) as f64).collect();
        let x = design(&rows);
        let glm = glm_fit(&x, &y, Family::PoissonLog, None).unwrap();
        let fitted = deviance(Task::Frequency, &y, &glm.predict(&x, None).unwrap()).unwrap();
        let null = deviance(Task::Frequency, &y, &null_prediction(Task::Frequency, &y, None)).unwrap();
        assert!(fitted <= null);
    }

    #[test]
    fn deviance_examples() {
        assert_eq!(deviance(Task::Frequency, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let d = deviance(Task::Binary, &[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((d - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((d - 2.7726).abs() < 1e-4);
        assert!(deviance(Task::Binary, &[1.0], &[1.0]).is_err());
        assert!(deviance(Task::Frequency, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn deviance_is_nonnegative() {
        let mut rng = Rng::new(6);
        for _ in 0..1000 {
            let y: Vec<f64> = (0..5).map(|_| rng.poisson(1.0) as f64).collect();
            let p: Vec<f64> = (0..5).map(|_| rng.uniform_range(0.01, 3.0)).collect();
            assert!(deviance(Task::Frequency, &y, &p).unwrap() >= 0.0);
            let yb: Vec<f64> = (0..5).map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
            let pb: Vec<f64> = (0..5).map(|_| rng.uniform_range(0.01, 0.99)).collect();
            assert!(deviance(Task::Binary, &yb, &pb).unwrap() >= 0.0);
        }
    }

    #[test]
    fn edr_examples() {
        let y = [0.0, 1.0, 2.0, 3.0];
        let null = null_prediction(Task::Frequency, &y, None);
        assert_eq!(edr(Task::Frequency, &y, &null, None).unwrap(), 0.0);
        let y2 = [1.0, 2.0, 3.0];
        assert_eq!(edr(Task::Frequency, &y2, &y2, None).unwrap(), 1.0);
        assert!(edr(Task::Frequency, &y2, &[5.0, 5.0, 5.0], None).unwrap() < 0.0);
        assert!(edr(Task::Frequency, &[2.0, 2.0], &[2.0, 2.0], None).is_err());
    }

    fn pairwise_gini(y: &[f64], p: &[f64]) -> f64 {
        let n = y.len() as f64;
        let total: f64 = y.iter().sum();
        let mut s = 0.0;
        for i in 0..y.len() {
            for j in 0..y.len() {
                s += y[i] * (p[i] - p[j]).signum() * if p[i] == p[j] { 0.0 } else { 1.0 };
            }
        }
        s / (n * total)
    }

    #[test]
    fn gini_matches_pairwise_oracle() {
        let mut rng = Rng::new(7);
        let y: Vec<f64> = (0..300).map(|_| rng.poisson(0.7) as f64).collect();
        // coarse scores force ties
        let p: Vec<f64> = (0..300).map(|_| (rng.uniform() * 20.0).floor()).collect();
        assert!((gini(&y, &p, None).unwrap() - pairwise_gini(&y, &p)).abs() < 1e-10);
    }

    #[test]
    fn gini_examples() {
        let y = [0.0, 1.0, 3.0, 2.0, 5.0];
        assert!(gini(&y, &[1.0; 5], None).unwrap().abs() < 1e-15);
        assert!((normalized_gini(&y, &y, None).unwrap() - 1.0).abs() < 1e-15);
        assert!(gini(&[0.0, 0.0], &[1.0, 2.0], None).is_err());
        let p = [0.1, 0.5, 0.2, 0.9, 0.3];
        let cubed: Vec<f64> = p.iter().map(|v| v * v * v + 1.0).collect();
        assert_eq!(gini(&y, &p, None).unwrap(), gini(&y, &cubed, None).unwrap());
    }

    #[test]
    fn gini_with_unit_exposure_equals_unweighted() {
        let y = [0.0, 1.0, 3.0, 2.0];
        let p = [0.4, 0.1, 0.9, 0.3];
        assert_eq!(gini(&y, &p, None).unwrap(), gini(&y, &p, Some(&[1.0; 4])).unwrap());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1.0, 0.0], &[0.9, 0.1], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[1.0, 0.0], &[0.1, 0.9], 0.5).unwrap(), 0.0);
        assert!((accuracy(&[1.0, 0.0, 1.0], &[0.9, 0.4, 0.2], 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[1.0], &[0.5], 1.0).is_err());
    }

    #[test]
    fn task_loss_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let z: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let cases = [
            (Task::Binary, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0], None),
            (Task::Frequency, vec![0.0, 1.0, 3.0, 0.0, 2.0, 1.0], Some(vec![0.5, 1.0, 0.7, 0.9, 1.0, 0.6])),
            (Task::Severity, vec![0.3, 1.2, 0.0, 2.0, 0.5, 0.1], None),
        ];
        for (task, y, e) in cases {
            let (_, g) = task_loss_preactivation(task, &y, &z, e.as_deref());
            for i in 0..z.len() {
                let mut zp = z.clone();
                zp[i] += 1e-6;
                let mut zm = z.clone();
                zm[i] -= 1e-6;
                let num = (task_loss_preactivation(task, &y, &zp, e.as_deref()).0
                    - task_loss_preactivation(task, &y, &zm, e.as_deref()).0)
                    / 2e-6;
                assert!((num - g[i]).abs() < 1e-7, "{task:?} {i}");
            }
        }
    }

    #[test]
    fn binary_task_loss_is_half_deviance() {
        let y = [1.0, 0.0, 1.0];
        let z = [0.3, -1.2, 2.0];
        let p: Vec<f64> = z.iter().map(|&v| crate::mlp::sigmoid(v)).collect();
        let (loss, _) = task_loss_preactivation(Task::Binary, &y, &z, None);
        assert!((loss - deviance(Task::Binary, &y, &p).unwrap() / 6.0).abs() < 1e-12);
    }

    #[test]
    fn joint_net_gradient_reaches_encoders() {
        let mut rng = Rng::new(9);
        let spec = EncoderSpec::default();
        let net = JointNet::new(2, 3, 2, &spec, &spec, &[5], Task::Binary, &mut rng).unwrap();
        let n = 12;
        let mk = |c: usize, rng: &mut Rng| Matrix::new(n, c, (0..n * c).map(|_| rng.normal()).collect()).unwrap();
        let inputs = JointInputs {
            policy: mk(2, &mut rng),
            geo: mk(3, &mut rng),
            car: mk(2, &mut rng),
        };
        let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let loss = |net: &JointNet| {
            let fwd = net.forward(&inputs).unwrap();
            task_loss_preactivation(Task::Binary, &y, fwd.output_preactivation().data(), None).0
        };
        let fwd = net.forward(&inputs).unwrap();
        let (_, g) = task_loss_preactivation(Task::Binary, &y, fwd.output_preactivation().data(), None);
        let analytic = net.backward_preactivation(&fwd, &Matrix::new(n, 1, g).unwrap()).unwrap().flat();
        let base = net.params_flat();
        let mut probe = net.clone();
        for (i, &a) in analytic.iter().enumerate() {
            let mut p = base.clone();
            p[i] += 1e-5;
            probe.set_params_flat(&p).unwrap();
            let plus = loss(&probe);
            p[i] -= 2e-5;
            probe.set_params_flat(&p).unwrap();
            let minus = loss(&probe);
            let num = (plus - minus) / 2e-5;
            assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-8) < 1e-4, "param {i}");
        }
    }

    #[test]
    fn mlp_regressor_learns_logistic_signal() {
        let mut rng = Rng::new(10);
        let n = 4000;
        let x = Matrix::new(n, 1, (0..n).map(|_| rng.normal()).collect()).unwrap();
        let y: Vec<f64> = x.data().iter().map(|&v| if rng.uniform() < crate::mlp::sigmoid(3.0 * v) { 1.0 } else { 0.0 }).collect();
        let targets = TrainTargets {
            task: Task::Binary,
            y: &y,
            exposure: None,
        };
        let cfg = TrainConfig {
            epochs: 10,
            ..Default::default()
        };
        let (model, trace) = MlpRegressor::fit(&x, targets, &[8], &cfg).unwrap();
        assert!(trace.epochs.last().unwrap().task_loss < trace.epochs[0].task_loss);
        let acc = accuracy(&y, &model.predict(&x).unwrap(), 0.5).unwrap();
        assert!(acc > 0.75, "{acc}");
    }

    #[test]
    fn scaler_uses_train_statistics() {
        let train = Matrix::from_rows(&[vec![1.0], vec![3.0]]).unwrap();
        let s = ColumnScaler::fit(&train).unwrap();
        let out = s.transform(&Matrix::from_rows(&[vec![5.0]]).unwrap()).unwrap();
        assert_eq!(out.get(0, 0), 3.0);
    }

    #[test]
    fn glm_json_round_trip() {
        let x = design(&[vec![0.0], vec![1.0], vec![2.0]]);
        let glm = glm_fit(&x, &[0.0, 1.0, 1.0], Family::PoissonLog, None).unwrap();
        assert_eq!(Glm::from_json(&glm.to_json().unwrap()).unwrap(), glm);
    }
}
