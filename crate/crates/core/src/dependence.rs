//! Maximal-correlation (HGR) estimators.
//!
//! Three estimators share the [`HgrEstimate`] result type:
//!
//! * [`hgr_nn`] trains two small networks `f(U)`, `g(V)` to maximize the
//!   mean product of their batch-standardized outputs;
//! * [`hgr_witsenhausen`] bins both variables into equal-frequency cells and
//!   returns the second singular value of the normalized joint table;
//! * [`rdc`] takes the top canonical correlation between random sine
//!   features of the empirical copulas.
//!
//! [`hgr_conditional`] applies any of them within each class of a label.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Direction, HiddenActivation, Mlp, Optimizer, OutputActivation};
use crate::numkit::{self, derive_seed, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Neural,
    Witsenhausen,
    Rdc,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HgrDiagnostics {
    /// Optimizer steps per restart (neural).
    pub iterations: Option<usize>,
    pub restarts: Option<usize>,
    /// Occupied bins after tie compression, `(u, v)` (Witsenhausen).
    pub bins: Option<(usize, usize)>,
    pub projections: Option<usize>,
    /// Objective on the full sample before the first update of the kept restart.
    pub initial_objective: Option<f64>,
    /// Value before clamping to `[0, 1]`.
    pub raw_value: f64,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgrEstimate {
    /// Always in `[0, 1]`.
    pub value: f64,
    pub estimator: EstimatorKind,
    pub diagnostics: HgrDiagnostics,
}

impl HgrEstimate {
    fn clamped(raw: f64, estimator: EstimatorKind, mut diagnostics: HgrDiagnostics) -> Self {
        let value = raw.abs().clamp(0.0, 1.0);
        diagnostics.raw_value = raw;
        diagnostics.clamped = raw.abs() > 1.0;
        HgrEstimate {
            value,
            estimator,
            diagnostics,
        }
    }
}

/// Correlation of batch-standardized scores and its gradient.
///
/// Returns `J = mean(â·b̂)` with `â`, `b̂` the population-standardized inputs,
/// and `dJ/da`, `dJ/db`. A constant side standardizes to zeros; its gradient
/// is taken as if its std were 1 so a collapsed network can recover.
pub fn standardized_correlation(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = a.len() as f64;
    let (za, _, sa) = numkit::standardize(a);
    let (zb, _, sb) = numkit::standardize(b);
    let j = za.iter().zip(&zb).map(|(x, y)| x * y).sum::<f64>() / n;
    // dJ/da_i = (b̂_i − â_i·J) / (n·σ_a)
    let ga = za.iter().zip(&zb).map(|(x, y)| (y - x * j) / (n * sa)).collect();
    let gb = zb.iter().zip(&za).map(|(y, x)| (x - y * j) / (n * sb)).collect();
    (j, ga, gb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgrNnConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    /// Adam ascent steps per restart.
    pub steps: usize,
    /// Full batch when `n` does not exceed this, minibatches of this size otherwise.
    pub batch_size: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for HgrNnConfig {
    fn default() -> Self {
        HgrNnConfig {
            hidden: vec![16, 16],
            learning_rate: 5e-3,
            steps: 400,
            batch_size: 1000,
            restarts: 3,
            seed: 0,
        }
    }
}

pub const HGR_NN_MIN_SAMPLES: usize = 50;

/// The two networks whose standardized-output product estimates HGR.
#[derive(Debug, Clone)]
pub struct HgrAdversaryPair {
    pub f_net: Mlp,
    pub g_net: Mlp,
    pub steps_per_update: usize,
    f_opt: Optimizer,
    g_opt: Optimizer,
}

impl HgrAdversaryPair {
    pub fn new(
        u_dim: usize,
        v_dim: usize,
        hidden: &[usize],
        learning_rate: f64,
        steps_per_update: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dims = |input: usize| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d.push(1);
            d
        };
        Ok(HgrAdversaryPair {
            f_net: Mlp::new(&dims(u_dim), HiddenActivation::Tanh, OutputActivation::Identity, rng)?,
            g_net: Mlp::new(&dims(v_dim), HiddenActivation::Tanh, OutputActivation::Identity, rng)?,
            steps_per_update,
            f_opt: Optimizer::adam(learning_rate),
            g_opt: Optimizer::adam(learning_rate),
        })
    }

    fn check(u: &Matrix, v: &Matrix) -> Result<()> {
        if u.rows() != v.rows() {
            return Err(Error::dims("HgrAdversaryPair", u.rows(), v.rows()));
        }
        if u.rows() < 2 {
            return Err(Error::invalid("HGR objective needs at least two rows"));
        }
        Ok(())
    }

    pub fn objective(&self, u: &Matrix, v: &Matrix) -> Result<f64> {
        Self::check(u, v)?;
        let fu = self.f_net.predict(u)?;
        let gv = self.g_net.predict(v)?;
        Ok(standardized_correlation(fu.data(), gv.data()).0)
    }

    /// One joint ascent step on both networks; returns the objective before it.
    pub fn ascent_step(&mut self, u: &Matrix, v: &Matrix) -> Result<f64> {
        Self::check(u, v)?;
        let (fu, fc) = self.f_net.forward(u)?;
        let (gv, gc) = self.g_net.forward(v)?;
        let (j, df, dg) = standardized_correlation(fu.data(), gv.data());
        let n = u.rows();
        let bf = self.f_net.backward(&fc, &Matrix::new(n, 1, df)?)?;
        let bg = self.g_net.backward(&gc, &Matrix::new(n, 1, dg)?)?;
        self.f_net.apply_update(&bf.grads, &mut self.f_opt, Direction::Ascent)?;
        self.g_net.apply_update(&bg.grads, &mut self.g_opt, Direction::Ascent)?;
        Ok(j)
    }

    /// Runs `steps_per_update` ascent steps; returns the last pre-step objective.
    pub fn update(&mut self, u: &Matrix, v: &Matrix) -> Result<f64> {
        let mut j = 0.0;
        for _ in 0..self.steps_per_update {
            j = self.ascent_step(u, v)?;
        }
        Ok(j)
    }

    /// Objective and its gradient with respect to `u`, networks held fixed.
    pub fn objective_input_grad(&self, u: &Matrix, v: &Matrix) -> Result<(f64, Matrix)> {
        Self::check(u, v)?;
        let (fu, fc) = self.f_net.forward(u)?;
        let gv = self.g_net.predict(v)?;
        let (j, df, _) = standardized_correlation(fu.data(), gv.data());
        let bf = self.f_net.backward(&fc, &Matrix::new(u.rows(), 1, df)?)?;
        Ok((j, bf.input_grad))
    }
}

fn check_pair(u: &Matrix, v: &Matrix, min_n: usize) -> Result<()> {
    if u.rows() != v.rows() {
        return Err(Error::dims("hgr", u.rows(), v.rows()));
    }
    if u.rows() < min_n {
        return Err(Error::invalid(format!("HGR estimate needs at least {min_n} rows, got {}", u.rows())));
    }
    if !u.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite("HGR input features".into()));
    }
    Ok(())
}

/// Neural HGR estimate: best full-sample objective over seeded restarts.
pub fn hgr_nn(u: &Matrix, v: &Matrix, cfg: &HgrNnConfig) -> Result<HgrEstimate> {
    check_pair(u, v, HGR_NN_MIN_SAMPLES)?;
    if cfg.restarts == 0 || cfg.steps == 0 || cfg.batch_size < 2 {
        return Err(Error::invalid("hgr_nn needs restarts ≥ 1, steps ≥ 1 and batch_size ≥ 2"));
    }
    let us = numkit::standardize_columns(u)?.standardized;
    let vs = numkit::standardize_columns(v)?.standardized;
    let n = u.rows();

    let mut best: Option<(f64, f64)> = None;
    for restart in 0..cfg.restarts {
        let mut rng = Rng::new(derive_seed(cfg.seed, restart as u64));
        let mut pair = HgrAdversaryPair::new(u.cols(), v.cols(), &cfg.hidden, cfg.learning_rate, 1, &mut rng)?;
        let initial = pair.objective(&us, &vs)?;
        if n <= cfg.batch_size {
            for _ in 0..cfg.steps {
                pair.ascent_step(&us, &vs)?;
            }
        } else {
            let mut order = rng.permutation(n);
            let mut cursor = 0;
            for _ in 0..cfg.steps {
                if cursor + cfg.batch_size > n {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                let idx = &order[cursor..cursor + cfg.batch_size];
                cursor += cfg.batch_size;
                pair.ascent_step(&us.select_rows(idx), &vs.select_rows(idx))?;
            }
        }
        let last = pair.objective(&us, &vs)?;
        if best.is_none_or(|(b, _)| last > b) {
            best = Some((last, initial));
        }
    }
    let (value, initial) = best.expect("at least one restart");
    Ok(HgrEstimate::clamped(
        value,
        EstimatorKind::Neural,
        HgrDiagnostics {
            iterations: Some(cfg.steps),
            restarts: Some(cfg.restarts),
            initial_objective: Some(initial),
            ..Default::default()
        },
    ))
}

/// Equal-frequency bin index per observation; ties share a bin and empty
/// bins are compressed out. Returns the indices and the occupied bin count.
fn equal_frequency_bins(x: &[f64], bins: usize) -> (Vec<usize>, usize) {
    let n = x.len() as f64;
    let raw: Vec<usize> = numkit::average_ranks(x)
        .into_iter()
        .map(|r| (((r - 0.5) * bins as f64 / n).floor() as usize).min(bins - 1))
        .collect();
    let mut used = vec![false; bins];
    raw.iter().for_each(|&b| used[b] = true);
    let mut remap = vec![0; bins];
    let mut next = 0;
    for b in 0..bins {
        if used[b] {
            remap[b] = next;
            next += 1;
        }
    }
    (raw.into_iter().map(|b| remap[b]).collect(), next)
}

pub const WITSENHAUSEN_SMOOTHING: f64 = 0.5;

pub fn witsenhausen_min_samples(bins: usize) -> usize {
    10 * bins * bins
}

/// Discretized HGR: second singular value of `p(i,j)/√(p(i)·p(j))`.
pub fn hgr_witsenhausen(u: &[f64], v: &[f64], bins: usize) -> Result<HgrEstimate> {
    if u.len() != v.len() {
        return Err(Error::dims("hgr_witsenhausen", u.len(), v.len()));
    }
    if bins < 2 {
        return Err(Error::invalid("hgr_witsenhausen needs at least 2 bins"));
    }
    let min_n = witsenhausen_min_samples(bins);
    if u.len() < min_n {
        return Err(Error::invalid(format!(
            "hgr_witsenhausen with {bins} bins needs at least {min_n} rows, got {}",
            u.len()
        )));
    }
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hgr_witsenhausen input".into()));
    }
    let (bu, nu) = equal_frequency_bins(u, bins);
    let (bv, nv) = equal_frequency_bins(v, bins);
    let diagnostics = HgrDiagnostics {
        bins: Some((nu, nv)),
        ..Default::default()
    };
    if nu < 2 || nv < 2 {
        // a constant variable carries no dependence
        return Ok(HgrEstimate::clamped(0.0, EstimatorKind::Witsenhausen, diagnostics));
    }

    let mut joint = Matrix::zeros(nu, nv);
    for (&i, &j) in bu.iter().zip(&bv) {
        let c = joint.get(i, j);
        joint.set(i, j, c + 1.0);
    }
    let total = u.len() as f64 + WITSENHAUSEN_SMOOTHING * (nu * nv) as f64;
    joint
        .data_mut()
        .iter_mut()
        .for_each(|c| *c = (*c + WITSENHAUSEN_SMOOTHING) / total);
    let pu: Vec<f64> = (0..nu).map(|i| joint.row(i).iter().sum()).collect();
    let pv: Vec<f64> = (0..nv).map(|j| joint.column(j).iter().sum()).collect();
    for i in 0..nu {
        for j in 0..nv {
            let q = joint.get(i, j) / (pu[i] * pv[j]).sqrt();
            joint.set(i, j, q);
        }
    }
    let svd = numkit::svd_small(&joint)?;
    let second = svd.singular_values.get(1).copied().unwrap_or(0.0);
    Ok(HgrEstimate::clamped(second, EstimatorKind::Witsenhausen, diagnostics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdcConfig {
    pub projections: usize,
    /// Std of the random projection weights.
    pub scale: f64,
    pub seed: u64,
}

impl Default for RdcConfig {
    fn default() -> Self {
        RdcConfig {
            projections: 20,
            scale: 1.0 / 6.0,
            seed: 0,
        }
    }
}

pub const RDC_MIN_SAMPLES: usize = 20;
const RDC_RIDGE: f64 = 1e-8;

/// Copula transform, constant column, random affine projection, sine.
fn copula_features(x: &Matrix, k: usize, scale: f64, rng: &mut Rng) -> Matrix {
    let n = x.rows();
    let d = x.cols() + 1;
    let mut copula = Matrix::zeros(n, d);
    for c in 0..x.cols() {
        for (r, v) in numkit::rank_transform(&x.column(c)).into_iter().enumerate() {
            copula.set(r, c, v);
        }
    }
    for r in 0..n {
        copula.set(r, d - 1, 1.0);
    }
    let w = Matrix::new(d, k, (0..d * k).map(|_| scale * rng.normal()).collect()).expect("sized");
    let mut proj = copula.matmul(&w).expect("chained dims");
    proj.data_mut().iter_mut().for_each(|v| *v = v.sin());
    proj
}

fn centered(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for c in 0..x.cols() {
        let m = numkit::mean(&x.column(c));
        for r in 0..x.rows() {
            let v = out.get(r, c) - m;
            out.set(r, c, v);
        }
    }
    out
}

/// `aᵀb / n`, plus `ridge·I` when requested.
fn covariance(a: &Matrix, b: &Matrix, ridge: f64) -> Matrix {
    let mut c = a.transpose().matmul(b).expect("equal row counts");
    c.scale(1.0 / a.rows() as f64);
    if ridge > 0.0 {
        for i in 0..c.rows().min(c.cols()) {
            let v = c.get(i, i) + ridge;
            c.set(i, i, v);
        }
    }
    c
}

/// Largest canonical correlation between the column spaces of `x` and `y`.
pub fn top_canonical_correlation(x: &Matrix, y: &Matrix, ridge: f64) -> Result<f64> {
    let xc = centered(x);
    let yc = centered(y);
    let lx = numkit::cholesky(&covariance(&xc, &xc, ridge))?;
    let ly = numkit::cholesky(&covariance(&yc, &yc, ridge))?;
    let cxy = covariance(&xc, &yc, 0.0);
    // a = Lx⁻¹·Cxy, column by column
    let mut a = Matrix::zeros(cxy.rows(), cxy.cols());
    for c in 0..cxy.cols() {
        for (r, v) in numkit::forward_substitute(&lx, &cxy.column(c)).into_iter().enumerate() {
            a.set(r, c, v);
        }
    }
    // m = a·Ly⁻ᵀ = (Ly⁻¹·aᵀ)ᵀ
    let mut m = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let solved = numkit::forward_substitute(&ly, a.row(r));
        m.row_mut(r).copy_from_slice(&solved);
    }
    Ok(numkit::svd_small(&m)?.singular_values.first().copied().unwrap_or(0.0))
}

/// Randomized dependence coefficient on matrix blocks (one column per variable).
pub fn rdc_matrix(u: &Matrix, v: &Matrix, cfg: &RdcConfig) -> Result<HgrEstimate> {
    check_pair(u, v, RDC_MIN_SAMPLES)?;
    if cfg.projections == 0 {
        return Err(Error::invalid("rdc needs at least one projection"));
    }
    let mut rng = Rng::new(cfg.seed);
    let fu = copula_features(u, cfg.projections, cfg.scale, &mut rng);
    let fv = copula_features(v, cfg.projections, cfg.scale, &mut rng);
    let value = top_canonical_correlation(&fu, &fv, RDC_RIDGE)?;
    Ok(HgrEstimate::clamped(
        value,
        EstimatorKind::Rdc,
        HgrDiagnostics {
            projections: Some(cfg.projections),
            ..Default::default()
        },
    ))
}

pub fn rdc(u: &[f64], v: &[f64], cfg: &RdcConfig) -> Result<HgrEstimate> {
    rdc_matrix(&Matrix::column_vector(u), &Matrix::column_vector(v), cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HgrEstimator {
    Neural(HgrNnConfig),
    Witsenhausen { bins: usize },
    Rdc(RdcConfig),
}

impl HgrEstimator {
    pub fn min_samples(&self) -> usize {
        match self {
            HgrEstimator::Neural(_) => HGR_NN_MIN_SAMPLES,
            HgrEstimator::Witsenhausen { bins } => witsenhausen_min_samples(*bins),
            HgrEstimator::Rdc(_) => RDC_MIN_SAMPLES,
        }
    }

    pub fn kind(&self) -> EstimatorKind {
        match self {
            HgrEstimator::Neural(_) => EstimatorKind::Neural,
            HgrEstimator::Witsenhausen { .. } => EstimatorKind::Witsenhausen,
            HgrEstimator::Rdc(_) => EstimatorKind::Rdc,
        }
    }

    /// The Witsenhausen oracle is scalar-only; the others accept blocks.
    pub fn estimate(&self, u: &Matrix, v: &Matrix) -> Result<HgrEstimate> {
        match self {
            HgrEstimator::Neural(cfg) => hgr_nn(u, v, cfg),
            HgrEstimator::Witsenhausen { bins } => {
                if u.cols() != 1 || v.cols() != 1 {
                    return Err(Error::invalid("the Witsenhausen estimator takes scalar variables"));
                }
                hgr_witsenhausen(u.data(), v.data(), *bins)
            }
            HgrEstimator::Rdc(cfg) => rdc_matrix(u, v, cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEstimate<T> {
    pub label: T,
    pub n: usize,
    /// `None` when the class is below the estimator's minimum size.
    pub estimate: Option<HgrEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalHgr<T> {
    pub per_class: Vec<ClassEstimate<T>>,
    /// Unweighted mean over the classes that were estimated.
    pub mean: f64,
}

impl<T> ConditionalHgr<T> {
    pub fn excluded(&self) -> impl Iterator<Item = &ClassEstimate<T>> {
        self.per_class.iter().filter(|c| c.estimate.is_none())
    }
}

/// HGR within each class of `labels`, in label order.
pub fn hgr_conditional<T: Ord + Clone + Debug>(
    u: &Matrix,
    v: &Matrix,
    labels: &[T],
    estimator: &HgrEstimator,
) -> Result<ConditionalHgr<T>> {
    if u.rows() != v.rows() || u.rows() != labels.len() {
        return Err(Error::dims("hgr_conditional", u.rows(), format!("{} / {}", v.rows(), labels.len())));
    }
    let mut groups: BTreeMap<&T, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let min_n = estimator.min_samples();
    let mut per_class = Vec::with_capacity(groups.len());
    for (label, idx) in groups {
        let estimate = if idx.len() >= min_n {
            Some(estimator.estimate(&u.select_rows(&idx), &v.select_rows(&idx))?)
        } else {
            None
        };
        per_class.push(ClassEstimate {
            label: label.clone(),
            n: idx.len(),
            estimate,
        });
    }
    let values: Vec<f64> = per_class.iter().filter_map(|c| c.estimate.as_ref().map(|e| e.value)).collect();
    if values.is_empty() {
        return Err(Error::EmptyGroup(format!(
            "no class reaches the estimator minimum of {min_n} rows"
        )));
    }
    Ok(ConditionalHgr {
        per_class,
        mean: numkit::mean(&values),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_pair(n: usize, r: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let v = u.iter().map(|&x| r * x + (1.0 - r * r).sqrt() * rng.normal()).collect();
        (u, v)
    }

    fn col(x: &[f64]) -> Matrix {
        Matrix::column_vector(x)
    }

    #[test]
    fn standardized_correlation_gradient_matches_finite_differences() {
        let mut rng = Rng::new(1);
        let a: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let (_, ga, gb) = standardized_correlation(&a, &b);
        let eps = 1e-6;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += eps;
            let mut am = a.clone();
            am[i] -= eps;
            let num = (standardized_correlation(&ap, &b).0 - standardized_correlation(&am, &b).0) / (2.0 * eps);
            assert!((num - ga[i]).abs() < 1e-7, "a[{i}]: {num} vs {}", ga[i]);
            let mut bp = b.clone();
            bp[i] += eps;
            let mut bm = b.clone();
            bm[i] -= eps;
            let num = (standardized_correlation(&a, &bp).0 - standardized_correlation(&a, &bm).0) / (2.0 * eps);
            assert!((num - gb[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn standardized_correlation_equals_pearson() {
        let (u, v) = gaussian_pair(500, 0.4, 2);
        let j = standardized_correlation(&u, &v).0;
        assert!((j - numkit::pearson(&u, &v).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn witsenhausen_independent_is_small() {
        let mut rng = Rng::new(3);
        let u: Vec<f64> = (0..20000).map(|_| rng.uniform()).collect();
        let v: Vec<f64> = (0..20000).map(|_| rng.uniform()).collect();
        assert!(hgr_witsenhausen(&u, &v, 10).unwrap().value <= 0.1);
    }

    #[test]
    fn witsenhausen_identity_is_near_one() {
        let mut rng = Rng::new(4);
        let u: Vec<f64> = (0..20000).map(|_| rng.normal()).collect();
        assert!(hgr_witsenhausen(&u, &u, 10).unwrap().value >= 0.98);
    }

    #[test]
    fn witsenhausen_gaussian_half() {
        let (u, v) = gaussian_pair(50000, 0.5, 5);
        let est = hgr_witsenhausen(&u, &v, 16).unwrap();
        assert!((0.42..=0.58).contains(&est.value), "{}", est.value);
    }

    #[test]
    fn witsenhausen_is_invariant_under_monotone_maps() {
        let (u, v) = gaussian_pair(5000, 0.6, 6);
        let ev: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        let a = hgr_witsenhausen(&u, &v, 8).unwrap().value;
        let b = hgr_witsenhausen(&u, &ev, 8).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn witsenhausen_rejects_small_samples_and_constant_is_zero() {
        let u = vec![0.0; 1000];
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert!(hgr_witsenhausen(&v[..100], &v[..100], 10).is_err());
        assert_eq!(hgr_witsenhausen(&u, &v, 10).unwrap().value, 0.0);
    }

    #[test]
    fn binning_is_equal_frequency_and_tie_aware() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (b, k) = equal_frequency_bins(&x, 4);
        assert_eq!(k, 4);
        for bin in 0..4 {
            assert_eq!(b.iter().filter(|&&v| v == bin).count(), 25);
        }
        let ties = vec![1.0, 1.0, 1.0, 1.0, 2.0, 3.0];
        let (b, k) = equal_frequency_bins(&ties, 3);
        assert!(b[..4].iter().all(|&v| v == b[0]));
        assert!(k <= 3);
    }

    #[test]
    fn rdc_monotone_relation_is_near_one() {
        let mut rng = Rng::new(7);
        let u: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        let v: Vec<f64> = u.iter().map(|x| x.powi(3) + 2.0).collect();
        assert!(rdc(&u, &v, &RdcConfig::default()).unwrap().value >= 0.95);
    }

    #[test]
    fn rdc_independent_is_small() {
        let (u, v) = gaussian_pair(2000, 0.0, 8);
        let cfg = RdcConfig {
            projections: 10,
            ..Default::default()
        };
        assert!(rdc(&u, &v, &cfg).unwrap().value <= 0.2);
    }

    #[test]
    fn rdc_is_exactly_rank_invariant() {
        let (u, v) = gaussian_pair(500, 0.5, 9);
        let ev: Vec<f64> = v.iter().map(|x| (2.0 * x).exp()).collect();
        let cfg = RdcConfig::default();
        assert_eq!(rdc(&u, &v, &cfg).unwrap().value, rdc(&u, &ev, &cfg).unwrap().value);
    }

    #[test]
    fn rdc_agrees_with_witsenhausen_on_cosine() {
        let mut rng = Rng::new(10);
        let u: Vec<f64> = (0..20000).map(|_| rng.normal()).collect();
        let v: Vec<f64> = u.iter().map(|x| x.cos()).collect();
        let w = hgr_witsenhausen(&u, &v, 10).unwrap().value;
        let r = rdc(&u, &v, &RdcConfig::default()).unwrap().value;
        assert!((w - r).abs() <= 0.1, "witsenhausen {w} rdc {r}");
    }

    #[test]
    fn canonical_correlation_of_linear_blocks() {
        let (u, v) = gaussian_pair(3000, 0.7, 11);
        let r = numkit::pearson(&u, &v).unwrap();
        let cc = top_canonical_correlation(&col(&u), &col(&v), 0.0).unwrap();
        assert!((cc - r.abs()).abs() < 1e-9);
    }

    #[test]
    fn neural_independent_is_small() {
        let (u, v) = gaussian_pair(5000, 0.0, 12);
        let cfg = HgrNnConfig {
            restarts: 1,
            steps: 200,
            ..Default::default()
        };
        assert!(hgr_nn(&col(&u), &col(&v), &cfg).unwrap().value <= 0.15);
    }

    #[test]
    fn neural_gaussian_and_cosine() {
        let cfg = HgrNnConfig {
            restarts: 1,
            ..Default::default()
        };
        let (u, v) = gaussian_pair(5000, 0.9, 13);
        let est = hgr_nn(&col(&u), &col(&v), &cfg).unwrap();
        assert!((0.85..=0.95).contains(&est.value), "{}", est.value);
        assert!(est.value >= est.diagnostics.initial_objective.unwrap());

        let mut rng = Rng::new(14);
        let u: Vec<f64> = (0..5000).map(|_| rng.normal()).collect();
        let v: Vec<f64> = u.iter().map(|x| x.cos()).collect();
        assert!(hgr_nn(&col(&u), &col(&v), &cfg).unwrap().value >= 0.9);
    }

    #[test]
    fn neural_rejects_small_samples() {
        let u = Matrix::zeros(10, 1);
        assert!(hgr_nn(&u, &u, &HgrNnConfig::default()).is_err());
    }

    #[test]
    fn conditional_separates_within_class_independence() {
        let mut rng = Rng::new(15);
        let n = 6000;
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let u: Vec<f64> = labels.iter().map(|&l| 3.0 * l as f64 + rng.normal()).collect();
        let v: Vec<f64> = labels.iter().map(|&l| 3.0 * l as f64 + rng.normal()).collect();
        let est = HgrEstimator::Witsenhausen { bins: 8 };
        let cond = hgr_conditional(&col(&u), &col(&v), &labels, &est).unwrap();
        for c in &cond.per_class {
            assert!(c.estimate.as_ref().unwrap().value <= 0.15);
        }
        assert!(est.estimate(&col(&u), &col(&v)).unwrap().value >= 0.4);
    }

    #[test]
    fn conditional_single_class_reduces_and_small_class_is_flagged() {
        let (u, v) = gaussian_pair(1000, 0.5, 16);
        let est = HgrEstimator::Rdc(RdcConfig::default());
        let one = hgr_conditional(&col(&u), &col(&v), &vec!["a"; 1000], &est).unwrap();
        assert_eq!(one.mean, est.estimate(&col(&u), &col(&v)).unwrap().value);

        let mut labels = vec![0u8; 1000];
        labels[..10].iter_mut().for_each(|l| *l = 1);
        let cond = hgr_conditional(&col(&u), &col(&v), &labels, &est).unwrap();
        let excluded: Vec<_> = cond.excluded().collect();
        assert_eq!(excluded.len(), 1);
        assert_eq!(excluded[0].label, 1);
        assert_eq!(cond.mean, cond.per_class[0].estimate.as_ref().unwrap().value);
    }

    #[test]
    fn estimates_are_clamped() {
        let e = HgrEstimate::clamped(1.0000001, EstimatorKind::Rdc, HgrDiagnostics::default());
        assert_eq!(e.value, 1.0);
        assert!(e.diagnostics.clamped);
    }
}
