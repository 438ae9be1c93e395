//! Fairness-penalized training.
//!
//! A [`FairPenalty`] plugs into [`train_joint`] as its hook. Per batch it
//! first trains its adversaries on the detached predictions, then returns
//! `λ·penalty` and its gradient with respect to the predictions, computed
//! through the frozen adversaries. Demographic parity uses one group
//! containing every row; equalized odds uses one group per outcome class
//! weighted `λ_y/(K+1)`, so a single-class run is exactly a parity run.

use serde::{Deserialize, Serialize};

use crate::dependence::{standardized_correlation, HgrAdversaryPair};
use crate::error::{Error, Result};
use crate::fairmetrics::{class_domain, is_binary, outcome_classes, ClassTag};
use crate::mlp::{Direction, HiddenActivation, Mlp, Optimizer, OutputActivation};
use crate::models::{
    batch_gradient, task_loss_preactivation, train_joint, JointInputs, JointNet, PenaltyOutput, TrainConfig,
    TrainTargets, TrainingHook, TrainingTrace,
};
use crate::numkit::{self, derive_seed, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    /// `max_k |pearson(Ŷ, S_k)|`.
    Corr,
    /// Negative loss of an adversary predicting `S` from `Ŷ`.
    Simple,
    /// Neural HGR between `Ŷ` and `S`, as the magnitude of the adversary
    /// pair's standardized correlation.
    Hgr,
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corr" => Ok(PenaltyKind::Corr),
            "simple" => Ok(PenaltyKind::Simple),
            "hgr" => Ok(PenaltyKind::Hgr),
            other => Err(Error::invalid(format!("unknown penalty `{other}` (expected corr, simple or hgr)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Demographic parity.
    Dp,
    /// Equalized odds.
    Eo,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(Objective::Dp),
            "eo" => Ok(Objective::Eo),
            other => Err(Error::invalid(format!("unknown objective `{other}` (expected dp or eo)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairTrainConfig {
    pub penalty: PenaltyKind,
    pub objective: Objective,
    pub lambda: f64,
    /// Per-class weights for equalized odds, in class order; `None` uses
    /// `lambda` for every class.
    pub class_lambdas: Option<Vec<f64>>,
    pub adversary_steps: usize,
    pub adversary_lr: f64,
    pub adversary_hidden: Vec<usize>,
    /// Equalized-odds batches are topped up so each class has this many rows.
    pub min_class_rows: usize,
    pub train: TrainConfig,
}

impl Default for FairTrainConfig {
    fn default() -> Self {
        FairTrainConfig {
            penalty: PenaltyKind::Hgr,
            objective: Objective::Dp,
            lambda: 0.0,
            class_lambdas: None,
            adversary_steps: 5,
            adversary_lr: 1e-2,
            adversary_hidden: vec![16, 16],
            min_class_rows: 16,
            train: TrainConfig::default(),
        }
    }
}

impl FairTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda) || !self.class_lambdas.iter().flatten().all(|&v| ok(v)) {
            return Err(Error::invalid("penalty weights must be finite and nonnegative"));
        }
        if self.adversary_steps == 0 || !(self.adversary_lr > 0.0) {
            return Err(Error::invalid("adversaries need ≥ 1 step and a positive learning rate"));
        }
        if self.min_class_rows < 2 {
            return Err(Error::invalid("min_class_rows must be at least 2"));
        }
        Ok(())
    }
}

/// Consecutive constant-output batches before an adversary is reported collapsed.
pub const COLLAPSE_BATCHES: usize = 20;

struct Group {
    label: String,
    weight: f64,
    members: Vec<usize>,
    pair: Option<HgrAdversaryPair>,
    collapse_streak: usize,
    collapse_reported: bool,
    skipped: usize,
}

/// Adversary predicting `S` from `Ŷ` (and `Y` for equalized odds).
#[derive(Debug, Clone)]
pub struct SimpleAdversary {
    pub net: Mlp,
    opt: Optimizer,
    binary: bool,
}

impl SimpleAdversary {
    /// Sigmoid head with log-loss when every sensitive column is binary,
    /// identity head with squared error otherwise.
    pub fn new(input_dim: usize, s: &Matrix, hidden: &[usize], lr: f64, rng: &mut Rng) -> Result<Self> {
        let binary = is_binary(s.data());
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(s.cols());
        let head = if binary { OutputActivation::Sigmoid } else { OutputActivation::Identity };
        Ok(SimpleAdversary {
            net: Mlp::new(&dims, HiddenActivation::Tanh, head, rng)?,
            opt: Optimizer::adam(lr),
            binary,
        })
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    /// One descent step on the adversary loss.
    pub fn step(&mut self, input: &Matrix, s: &Matrix) -> Result<f64> {
        let (_, cache) = self.net.forward(input)?;
        let (loss, grad_pre) = adversary_loss(self.binary, cache.output_preactivation(), s)?;
        let bp = self.net.backward_preactivation(&cache, &grad_pre)?;
        self.net.apply_update(&bp.grads, &mut self.opt, Direction::Descent)?;
        Ok(loss)
    }
}

/// Mean adversary loss over rows and sensitive columns, and its gradient on
/// the pre-activation.
fn adversary_loss(binary: bool, pre: &Matrix, s: &Matrix) -> Result<(f64, Matrix)> {
    if pre.rows() != s.rows() || pre.cols() != s.cols() {
        return Err(Error::dims("adversary loss", s.rows(), pre.rows()));
    }
    let count = pre.data().len() as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = pre
        .data()
        .iter()
        .zip(s.data())
        .map(|(&z, &t)| {
            if binary {
                // softplus(z) − t·z
                loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
                (crate::mlp::sigmoid(z) - t) / count
            } else {
                loss += (z - t) * (z - t);
                2.0 * (z - t) / count
            }
        })
        .collect();
    Ok((loss / count, Matrix::new(pre.rows(), pre.cols(), grad)?))
}

/// Gradient-reversal penalty `−L_S(f(input), S)` through a frozen adversary.
///
/// Column 0 of `input` holds the predictions; further columns are
/// conditioning inputs. Returns the penalty and its gradient with respect
/// to every input column.
pub fn gradient_reversal_penalty(input: &Matrix, s: &Matrix, adversary: &SimpleAdversary) -> Result<(f64, Matrix)> {
    let (_, cache) = adversary.net.forward(input)?;
    let (loss, grad_pre) = adversary_loss(adversary.binary, cache.output_preactivation(), s)?;
    let bp = adversary.net.backward_preactivation(&cache, &grad_pre)?;
    let mut grad = bp.input_grad;
    grad.scale(-1.0);
    Ok((-loss, grad))
}

/// Training hook holding the adversaries of one fair run.
pub struct FairPenalty {
    kind: PenaltyKind,
    s: Matrix,
    groups: Vec<Group>,
    group_of: Vec<usize>,
    /// Extra adversary input for equalized odds with the simple adversary.
    conditioning: Option<Vec<f64>>,
    simple: Option<SimpleAdversary>,
    simple_weight: f64,
    simple_streak: usize,
    simple_reported: bool,
    adversary_steps: usize,
    min_group_rows: usize,
    topup_rng: Rng,
    dependence_sum: f64,
    dependence_batches: usize,
    warnings: Vec<String>,
}

impl FairPenalty {
    /// Demographic parity: one group with weight `cfg.lambda`.
    pub fn demographic_parity(s: &Matrix, cfg: &FairTrainConfig) -> Result<Self> {
        let n = s.rows();
        Self::build(s, vec![("all".to_string(), cfg.lambda, (0..n).collect())], vec![0; n], None, cfg)
    }

    /// Equalized odds over the outcome classes of `classes`.
    pub fn equalized_odds(s: &Matrix, classes: &[ClassTag], cfg: &FairTrainConfig) -> Result<Self> {
        if classes.len() != s.rows() {
            return Err(Error::dims("equalized-odds classes", s.rows(), classes.len()));
        }
        let domain = class_domain(classes);
        let lambdas = match &cfg.class_lambdas {
            Some(l) if l.len() != domain.len() => {
                return Err(Error::dims("class_lambdas", domain.len(), l.len()));
            }
            Some(l) => l.clone(),
            None => vec![cfg.lambda; domain.len()],
        };
        let k_plus_1 = domain.len() as f64;
        let group_of: Vec<usize> = classes.iter().map(|c| domain.binary_search(c).expect("class in domain")).collect();
        let groups = domain
            .iter()
            .zip(&lambdas)
            .enumerate()
            .map(|(g, (tag, &lambda))| {
                let members = (0..classes.len()).filter(|&i| group_of[i] == g).collect();
                (format!("Y={tag}"), lambda / k_plus_1, members)
            })
            .collect();
        // The class enters the simple adversary only when there is more than one.
        let conditioning = (domain.len() > 1).then(|| classes.iter().map(|c| f64::from(c.value)).collect());
        Self::build(s, groups, group_of, conditioning, cfg)
    }

    fn build(
        s: &Matrix,
        groups: Vec<(String, f64, Vec<usize>)>,
        group_of: Vec<usize>,
        conditioning: Option<Vec<f64>>,
        cfg: &FairTrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if s.cols() == 0 || !s.is_finite() {
            return Err(Error::invalid("fair training needs finite sensitive columns"));
        }
        let adversary_rng = Rng::new(derive_seed(cfg.train.seed, 2));
        let mut warnings = Vec::new();
        let mut built = Vec::with_capacity(groups.len());
        for (g, (label, weight, members)) in groups.into_iter().enumerate() {
            if members.len() < 2 {
                warnings.push(format!("class {label} has {} rows; its penalty is skipped", members.len()));
            }
            let pair = match cfg.penalty {
                PenaltyKind::Hgr => Some(HgrAdversaryPair::new(
                    1,
                    s.cols(),
                    &cfg.adversary_hidden,
                    cfg.adversary_lr,
                    cfg.adversary_steps,
                    &mut adversary_rng.child(g as u64),
                )?),
                _ => None,
            };
            built.push(Group {
                label,
                weight,
                members,
                pair,
                collapse_streak: 0,
                collapse_reported: false,
                skipped: 0,
            });
        }
        let simple_weight = built.iter().map(|g| g.weight).sum();
        let simple = match cfg.penalty {
            PenaltyKind::Simple => {
                let dim = 1 + usize::from(conditioning.is_some());
                let mut rng = adversary_rng.child(u64::MAX);
                Some(SimpleAdversary::new(dim, s, &cfg.adversary_hidden, cfg.adversary_lr, &mut rng)?)
            }
            _ => None,
        };
        Ok(FairPenalty {
            kind: cfg.penalty,
            s: s.clone(),
            groups: built,
            group_of,
            conditioning,
            simple,
            simple_weight,
            simple_streak: 0,
            simple_reported: false,
            adversary_steps: cfg.adversary_steps,
            min_group_rows: cfg.min_class_rows,
            topup_rng: Rng::new(derive_seed(cfg.train.seed, 3)),
            dependence_sum: 0.0,
            dependence_batches: 0,
            warnings,
        })
    }

    pub fn kind(&self) -> PenaltyKind {
        self.kind
    }

    pub fn simple_adversary(&self) -> Option<&SimpleAdversary> {
        self.simple.as_ref()
    }

    pub fn hgr_pairs(&self) -> impl Iterator<Item = &HgrAdversaryPair> {
        self.groups.iter().filter_map(|g| g.pair.as_ref())
    }

    fn positions_by_group(&self, rows: &[usize]) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.groups.len()];
        for (p, &r) in rows.iter().enumerate() {
            out[self.group_of[r]].push(p);
        }
        out
    }

    fn simple_input(&self, rows: &[usize], pred: &Matrix) -> Result<Matrix> {
        match &self.conditioning {
            None => Ok(pred.clone()),
            Some(y) => Matrix::from_columns(&[pred.column(0), rows.iter().map(|&r| y[r]).collect()]),
        }
    }

    fn note_collapse(streak: &mut usize, reported: &mut bool, constant: bool, label: &str, warnings: &mut Vec<String>) {
        *streak = if constant { *streak + 1 } else { 0 };
        if *streak >= COLLAPSE_BATCHES && !*reported {
            *reported = true;
            warnings.push(format!("adversary for {label} produced constant output for {COLLAPSE_BATCHES} consecutive batches"));
        }
    }

    /// Trains the adversaries on the batch, predictions held fixed.
    pub fn train_adversaries(&mut self, rows: &[usize], pred: &Matrix) -> Result<()> {
        match self.kind {
            PenaltyKind::Corr => {}
            PenaltyKind::Simple => {
                let input = self.simple_input(rows, pred)?;
                let s = self.s.select_rows(rows);
                let adv = self.simple.as_mut().expect("simple adversary");
                for _ in 0..self.adversary_steps {
                    adv.step(&input, &s)?;
                }
                let out = adv.net.predict(&input)?;
                let constant = (0..out.cols()).all(|c| is_constant(&out.column(c)));
                Self::note_collapse(&mut self.simple_streak, &mut self.simple_reported, constant, "S", &mut self.warnings);
            }
            PenaltyKind::Hgr => {
                let positions = self.positions_by_group(rows);
                for (group, pos) in self.groups.iter_mut().zip(positions) {
                    if pos.len() < 2 {
                        continue;
                    }
                    let u = pred.select_rows(&pos);
                    let v = self.s.select_rows(&pos.iter().map(|&p| rows[p]).collect::<Vec<_>>());
                    let pair = group.pair.as_mut().expect("hgr pair");
                    pair.update(&u, &v)?;
                    let constant =
                        is_constant(pair.f_net.predict(&u)?.data()) || is_constant(pair.g_net.predict(&v)?.data());
                    Self::note_collapse(
                        &mut group.collapse_streak,
                        &mut group.collapse_reported,
                        constant,
                        &group.label,
                        &mut self.warnings,
                    );
                }
            }
        }
        Ok(())
    }

    /// Weighted penalty and its gradient with respect to `pred`, adversaries
    /// frozen. Also returns the unweighted mean dependence over groups.
    pub fn evaluate(&self, rows: &[usize], pred: &Matrix) -> Result<(PenaltyOutput, Option<f64>)> {
        if pred.rows() != rows.len() || pred.cols() != 1 {
            return Err(Error::dims("fair penalty predictions", rows.len(), pred.rows()));
        }
        let mut grad = vec![0.0; rows.len()];
        let mut value = 0.0;
        let mut active = false;
        if self.kind == PenaltyKind::Simple {
            let input = self.simple_input(rows, pred)?;
            let s = self.s.select_rows(rows);
            let (penalty, g) = gradient_reversal_penalty(&input, &s, self.simple.as_ref().expect("simple adversary"))?;
            value = self.simple_weight * penalty;
            if self.simple_weight > 0.0 {
                active = true;
                for (out, gi) in grad.iter_mut().zip(g.column(0)) {
                    *out = self.simple_weight * gi;
                }
            }
            let output = PenaltyOutput {
                value,
                grad: if active { Some(Matrix::new(rows.len(), 1, grad)?) } else { None },
            };
            return Ok((output, None));
        }
        let positions = self.positions_by_group(rows);
        let (mut dependence, mut counted) = (0.0, 0usize);
        for (group, pos) in self.groups.iter().zip(positions) {
            if pos.len() < 2 {
                continue;
            }
            let u = pred.select_rows(&pos);
            let v = self.s.select_rows(&pos.iter().map(|&p| rows[p]).collect::<Vec<_>>());
            let (dep, dep_grad) = match self.kind {
                PenaltyKind::Hgr => {
                    // |J|: a lagging adversary must not reward anti-correlation.
                    let (j, g) = group.pair.as_ref().expect("hgr pair").objective_input_grad(&u, &v)?;
                    let sign = if j < 0.0 { -1.0 } else { 1.0 };
                    (j.abs(), g.into_data().into_iter().map(|x| sign * x).collect())
                }
                _ => abs_corr_max(u.data(), &v),
            };
            dependence += dep;
            counted += 1;
            value += group.weight * dep;
            if group.weight > 0.0 {
                active = true;
                for (&p, g) in pos.iter().zip(dep_grad) {
                    grad[p] += group.weight * g;
                }
            }
        }
        let output = PenaltyOutput {
            value,
            grad: if active { Some(Matrix::new(rows.len(), 1, grad)?) } else { None },
        };
        Ok((output, (counted > 0).then(|| dependence / counted as f64)))
    }
}

fn is_constant(v: &[f64]) -> bool {
    let m = numkit::mean(v);
    !(numkit::std_dev(v) > 1e-12 * m.abs().max(1.0))
}

/// `max_k |pearson(u, S_k)|` and its gradient with respect to `u`.
fn abs_corr_max(u: &[f64], s: &Matrix) -> (f64, Vec<f64>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for k in 0..s.cols() {
        let (r, gu, _) = standardized_correlation(u, &s.column(k));
        if r.abs() > best.0 {
            let sign = if r < 0.0 { -1.0 } else { 1.0 };
            best = (r.abs(), gu.into_iter().map(|g| sign * g).collect());
        }
    }
    best
}

impl TrainingHook for FairPenalty {
    fn extra_rows(&mut self, batch: &[usize]) -> Vec<usize> {
        if self.groups.len() < 2 {
            return Vec::new();
        }
        let mut counts = vec![0usize; self.groups.len()];
        for &r in batch {
            counts[self.group_of[r]] += 1;
        }
        let mut extra = Vec::new();
        for (group, &count) in self.groups.iter().zip(&counts) {
            if group.members.len() < 2 {
                continue;
            }
            for _ in count..self.min_group_rows {
                extra.push(group.members[self.topup_rng.below(group.members.len())]);
            }
        }
        extra
    }

    fn on_batch(&mut self, rows: &[usize], pred: &Matrix) -> Result<PenaltyOutput> {
        self.train_adversaries(rows, pred)?;
        let positions = self.positions_by_group(rows);
        for (group, pos) in self.groups.iter_mut().zip(&positions) {
            if pos.len() < 2 && group.members.len() >= 2 {
                group.skipped += 1;
            }
        }
        let (output, dependence) = self.evaluate(rows, pred)?;
        if let Some(d) = dependence {
            self.dependence_sum += d;
            self.dependence_batches += 1;
        }
        Ok(output)
    }

    fn epoch_estimate(&mut self) -> Option<f64> {
        let out = (self.dependence_batches > 0).then(|| self.dependence_sum / self.dependence_batches as f64);
        self.dependence_sum = 0.0;
        self.dependence_batches = 0;
        out
    }

    fn take_warnings(&mut self) -> Vec<String> {
        for group in &mut self.groups {
            if group.skipped > 0 {
                self.warnings.push(format!("class {} penalty skipped in {} batches with < 2 rows", group.label, group.skipped));
                group.skipped = 0;
            }
        }
        std::mem::take(&mut self.warnings)
    }
}

/// Data for fair training; `s` is never part of `inputs`.
#[derive(Debug, Clone, Copy)]
pub struct FairData<'a> {
    pub inputs: &'a JointInputs,
    pub targets: TrainTargets<'a>,
    pub s: &'a Matrix,
}

impl FairData<'_> {
    fn check(&self) -> Result<()> {
        if self.s.rows() != self.inputs.rows() {
            return Err(Error::dims("sensitive rows", self.inputs.rows(), self.s.rows()));
        }
        self.targets.task.check_targets(self.targets.y)
    }
}

/// Demographic-parity training of `net`.
pub fn train_dp(net: &mut JointNet, data: FairData<'_>, cfg: &FairTrainConfig) -> Result<TrainingTrace> {
    data.check()?;
    let mut hook = FairPenalty::demographic_parity(data.s, cfg)?;
    train_joint(net, data.inputs, data.targets, &cfg.train, &mut hook)
}

/// Equalized-odds training of `net` over the task's outcome classes.
pub fn train_eo(net: &mut JointNet, data: FairData<'_>, cfg: &FairTrainConfig) -> Result<TrainingTrace> {
    data.check()?;
    let classes = outcome_classes(data.targets.task, data.targets.y)?;
    let mut hook = FairPenalty::equalized_odds(data.s, &classes, cfg)?;
    train_joint(net, data.inputs, data.targets, &cfg.train, &mut hook)
}

/// Dispatches on `cfg.objective`.
pub fn train_fair(net: &mut JointNet, data: FairData<'_>, cfg: &FairTrainConfig) -> Result<TrainingTrace> {
    match cfg.objective {
        Objective::Dp => train_dp(net, data, cfg),
        Objective::Eo => train_eo(net, data, cfg),
    }
}

/// Value of `task loss + penalty` on `rows` and its flat parameter
/// gradient, with every adversary frozen.
pub fn fair_objective(net: &JointNet, data: FairData<'_>, penalty: &FairPenalty, rows: &[usize]) -> Result<(f64, Vec<f64>)> {
    data.check()?;
    let fwd = net.forward(&data.inputs.select_rows(rows))?;
    let y: Vec<f64> = rows.iter().map(|&i| data.targets.y[i]).collect();
    let exposure: Option<Vec<f64>> = data.targets.exposure.map(|e| rows.iter().map(|&i| e[i]).collect());
    let (loss, task_grad) =
        task_loss_preactivation(data.targets.task, &y, fwd.output_preactivation().data(), exposure.as_deref());
    let (pen, _) = penalty.evaluate(rows, &fwd.output)?;
    let grads = batch_gradient(net, &fwd, &task_grad, pen.grad.as_ref())?;
    Ok((loss + pen.value, grads.flat()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{EncoderSpec, NoPenalty, Task};

    fn toy(n: usize, seed: u64) -> (JointInputs, Vec<f64>, Matrix) {
        let mut rng = Rng::new(seed);
        let mut p = Vec::new();
        let mut g = Vec::new();
        let mut c = Vec::new();
        let mut y = Vec::new();
        let mut s = Vec::new();
        for _ in 0..n {
            let si = f64::from(rng.bernoulli(0.5));
            let a = rng.normal();
            let x = rng.normal();
            p.push(vec![x]);
            g.push(vec![rng.normal(), rng.normal()]);
            c.push(vec![si + 0.5 * a, a]);
            y.push(f64::from(x + a + 0.3 * rng.normal() > 0.0));
            s.push(si);
        }
        let inputs = JointInputs {
            policy: Matrix::from_rows(&p).unwrap(),
            geo: Matrix::from_rows(&g).unwrap(),
            car: Matrix::from_rows(&c).unwrap(),
        };
        (inputs, y, Matrix::column_vector(&s))
    }

    fn net(seed: u64) -> JointNet {
        let mut rng = Rng::new(seed);
        JointNet::new(1, 2, 2, &EncoderSpec::default(), &EncoderSpec::default(), &[8], Task::Binary, &mut rng).unwrap()
    }

    fn cfg(kind: PenaltyKind, lambda: f64) -> FairTrainConfig {
        FairTrainConfig {
            penalty: kind,
            lambda,
            train: TrainConfig {
                epochs: 3,
                batch_size: 64,
                learning_rate: 1e-2,
                seed: 11,
                ..TrainConfig::default()
            },
            ..FairTrainConfig::default()
        }
    }

    fn targets(y: &[f64]) -> TrainTargets<'_> {
        TrainTargets {
            task: Task::Binary,
            y,
            exposure: None,
        }
    }

    #[test]
    fn zero_lambda_matches_plain_training_bitwise() {
        let (inputs, y, s) = toy(300, 1);
        let mut plain = net(5);
        train_joint(&mut plain, &inputs, targets(&y), &cfg(PenaltyKind::Hgr, 0.0).train, &mut NoPenalty).unwrap();
        for kind in [PenaltyKind::Corr, PenaltyKind::Simple, PenaltyKind::Hgr] {
            for objective in [Objective::Dp, Objective::Eo] {
                let mut fair = net(5);
                let mut c = cfg(kind, 0.0);
                c.objective = objective;
                let data = FairData { inputs: &inputs, targets: targets(&y), s: &s };
                train_fair(&mut fair, data, &c).unwrap();
                let same = fair.params_flat().iter().zip(plain.params_flat()).all(|(a, b)| a.to_bits() == b.to_bits());
                assert!(same, "{kind:?} {objective:?}");
            }
        }
    }

    #[test]
    fn single_class_eo_equals_dp() {
        let (inputs, _, s) = toy(200, 2);
        let ones = vec![1.0; 200];
        let mut c = cfg(PenaltyKind::Hgr, 1.5);
        for kind in [PenaltyKind::Corr, PenaltyKind::Simple, PenaltyKind::Hgr] {
            c.penalty = kind;
            let data = FairData { inputs: &inputs, targets: targets(&ones), s: &s };
            let mut a = net(3);
            let mut b = net(3);
            let ta = train_dp(&mut a, data, &c).unwrap();
            let tb = train_eo(&mut b, data, &c).unwrap();
            assert_eq!(a.params_flat(), b.params_flat(), "{kind:?}");
            assert_eq!(ta, tb);
        }
    }

    fn fd_check(kind: PenaltyKind, objective: Objective) -> f64 {
        let (inputs, y, s) = toy(50, 3);
        let mut c = cfg(kind, 0.7);
        c.objective = objective;
        let network = net(9);
        let rows: Vec<usize> = (0..50).collect();
        let mut penalty = match objective {
            Objective::Dp => FairPenalty::demographic_parity(&s, &c).unwrap(),
            Objective::Eo => FairPenalty::equalized_odds(&s, &outcome_classes(Task::Binary, &y).unwrap(), &c).unwrap(),
        };
        let pred = network.forward(&inputs.select_rows(&rows)).unwrap().output;
        penalty.train_adversaries(&rows, &pred).unwrap();
        let data = FairData { inputs: &inputs, targets: targets(&y), s: &s };
        let (_, analytic) = fair_objective(&network, data, &penalty, &rows).unwrap();
        let theta = network.params_flat();
        let eps = 1e-6;
        let mut numeric = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut probe = network.clone();
            let mut t = theta.clone();
            t[i] += eps;
            probe.set_params_flat(&t).unwrap();
            let up = fair_objective(&probe, data, &penalty, &rows).unwrap().0;
            t[i] -= 2.0 * eps;
            probe.set_params_flat(&t).unwrap();
            let down = fair_objective(&probe, data, &penalty, &rows).unwrap().0;
            numeric.push((up - down) / (2.0 * eps));
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().chain(&numeric).map(|v| v * v).sum::<f64>().sqrt();
        diff / scale.max(1e-12)
    }

    #[test]
    fn fair_objective_gradient_matches_finite_differences() {
        for kind in [PenaltyKind::Corr, PenaltyKind::Simple, PenaltyKind::Hgr] {
            for objective in [Objective::Dp, Objective::Eo] {
                let rel = fd_check(kind, objective);
                assert!(rel < 1e-3, "{kind:?} {objective:?}: {rel}");
            }
        }
    }

    #[test]
    fn chance_adversary_penalty_is_minus_ln2() {
        let s = Matrix::column_vector(&[0.0, 1.0, 0.0, 1.0]);
        let mut rng = Rng::new(1);
        let mut adv = SimpleAdversary::new(1, &s, &[4], 1e-2, &mut rng).unwrap();
        for layer in adv.net.layers_mut() {
            layer.weights = Matrix::zeros(layer.weights.rows(), layer.weights.cols());
            layer.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let pred = Matrix::column_vector(&[0.1, 0.4, 0.7, 0.9]);
        let (value, grad) = gradient_reversal_penalty(&pred, &s, &adv).unwrap();
        assert!((value + std::f64::consts::LN_2).abs() < 1e-12);
        assert!(grad.data().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn gradient_reversal_matches_finite_differences() {
        let s = Matrix::column_vector(&[0.0, 1.0, 1.0, 0.0, 1.0]);
        let mut rng = Rng::new(4);
        let adv = SimpleAdversary::new(1, &s, &[6], 1e-2, &mut rng).unwrap();
        let pred = vec![0.2, 0.5, 0.5, 0.5, 0.8];
        let (_, grad) = gradient_reversal_penalty(&Matrix::column_vector(&pred), &s, &adv).unwrap();
        for i in 0..pred.len() {
            let mut p = pred.clone();
            p[i] += 1e-6;
            let up = gradient_reversal_penalty(&Matrix::column_vector(&p), &s, &adv).unwrap().0;
            p[i] -= 2e-6;
            let down = gradient_reversal_penalty(&Matrix::column_vector(&p), &s, &adv).unwrap().0;
            assert!(((up - down) / 2e-6 - grad.get(i, 0)).abs() < 1e-8);
        }
    }

    #[test]
    fn doubling_lambda_doubles_penalty_gradient() {
        let (inputs, _, s) = toy(80, 6);
        let rows: Vec<usize> = (0..80).collect();
        let pred = net(1).forward(&inputs).unwrap().output;
        for kind in [PenaltyKind::Corr, PenaltyKind::Simple, PenaltyKind::Hgr] {
            let one = FairPenalty::demographic_parity(&s, &cfg(kind, 1.0)).unwrap();
            let two = FairPenalty::demographic_parity(&s, &cfg(kind, 2.0)).unwrap();
            let (a, _) = one.evaluate(&rows, &pred).unwrap();
            let (b, _) = two.evaluate(&rows, &pred).unwrap();
            assert_eq!(b.value, 2.0 * a.value);
            let ga = a.grad.unwrap();
            for (x, y) in ga.data().iter().zip(b.grad.unwrap().data()) {
                assert_eq!(*y, 2.0 * x);
            }
        }
    }

    #[test]
    fn eo_batches_are_topped_up_per_class() {
        let (_, _, s) = toy(400, 7);
        let mut classes = vec![ClassTag::exact(0); 400];
        for c in classes.iter_mut().take(10) {
            *c = ClassTag::exact(1);
        }
        let mut hook = FairPenalty::equalized_odds(&s, &classes, &cfg(PenaltyKind::Hgr, 1.0)).unwrap();
        let batch: Vec<usize> = (100..164).collect();
        let extra = hook.extra_rows(&batch);
        assert_eq!(extra.len(), 16);
        assert!(extra.iter().all(|&r| r < 10));
    }

    #[test]
    fn hgr_penalty_reduces_dependence() {
        // Labels depend on S, so the unpenalized model is S-dependent.
        let mut rng = Rng::new(8);
        let (inputs, _, s) = toy(2000, 8);
        let y: Vec<f64> = (0..2000)
            .map(|i| {
                let (x, a) = (inputs.policy.get(i, 0), inputs.car.get(i, 1));
                f64::from(x + a + s.get(i, 0) + 0.3 * rng.normal() > 0.5)
            })
            .collect();
        let mut c = cfg(PenaltyKind::Hgr, 0.0);
        c.train = TrainConfig {
            epochs: 15,
            batch_size: 256,
            learning_rate: 5e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let data = FairData { inputs: &inputs, targets: targets(&y), s: &s };
        let mut base = net(2);
        train_dp(&mut base, data, &c).unwrap();
        c.lambda = 1.0;
        let mut fair = net(2);
        let trace = train_dp(&mut fair, data, &c).unwrap();
        assert!(trace.epochs.iter().all(|e| e.hgr_estimate.is_some()));
        let s0 = s.column(0);
        let dep = |m: &JointNet| crate::fairmetrics::fair_quant(&m.predict(&inputs).unwrap(), &s0, 10).unwrap();
        assert!(dep(&fair) < 0.5 * dep(&base), "{} vs {}", dep(&fair), dep(&base));
    }

    #[test]
    fn config_rejects_bad_weights() {
        let mut c = FairTrainConfig::default();
        c.lambda = f64::NAN;
        assert!(c.validate().is_err());
        c.lambda = 1.0;
        c.class_lambdas = Some(vec![1.0, -1.0]);
        assert!(c.validate().is_err());
        assert_eq!("hgr".parse::<PenaltyKind>().unwrap(), PenaltyKind::Hgr);
        assert!("mine".parse::<PenaltyKind>().is_err());
    }
}
