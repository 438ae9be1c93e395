//! Pricing architectures.
//!
//! The two-stage model fits a base model on policy features, models its
//! residuals from the geographic and car blocks, smooths the geographic
//! component over neighbors, bins both components into quantile levels and
//! fits a final predictor on `(X_p, C, G)`. The autoencoder model trains the
//! car and geographic encoders jointly with the predictor. Neither model
//! reads the sensitive columns; those only enter fair training as the
//! adversaries' targets.

use serde::{Deserialize, Serialize};

use crate::data::Portfolio;
use crate::dependence::{HgrEstimator, HgrNnConfig};
use crate::error::{Error, Result};
use crate::fairmetrics::{FairnessReport, ReportConfig, REPORT_COLUMNS};
use crate::fairtrain::{train_fair, FairData, FairTrainConfig};
use crate::models::{
    accuracy, edr, glm_fit, mse, normalized_gini, ColumnScaler, EncoderSpec, Glm, JointInputs, JointNet, MlpRegressor, Task, TrainConfig, TrainTargets,
    TrainingTrace,
};
use crate::numkit::{derive_seed, Matrix, Rng};
use crate::persist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Glm,
    Mlp,
}

/// A fitted stage of the two-stage pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ComponentModel {
    Glm { glm: Glm },
    Mlp { mlp: MlpRegressor },
}

impl ComponentModel {
    /// Fits on the task scale; exposure enters as a log offset or loss weight.
    fn fit_task(
        kind: ComponentKind,
        x: &Matrix,
        targets: TrainTargets<'_>,
        hidden: &[usize],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        Ok(match kind {
            ComponentKind::Glm => {
                let offset: Option<Vec<f64>> = targets.exposure.map(|e| e.iter().map(|v| v.ln()).collect());
                ComponentModel::Glm {
                    glm: glm_fit(x, targets.y, targets.task.family(), offset.as_deref())?,
                }
            }
            ComponentKind::Mlp => ComponentModel::Mlp {
                mlp: MlpRegressor::fit(x, targets, hidden, cfg)?.0,
            },
        })
    }

    /// Squared-error regression on signed targets.
    fn fit_regression(kind: ComponentKind, x: &Matrix, y: &[f64], hidden: &[usize], cfg: &TrainConfig) -> Result<Self> {
        Ok(match kind {
            ComponentKind::Glm => ComponentModel::Glm {
                glm: glm_fit(x, y, Task::Severity.family(), None)?,
            },
            ComponentKind::Mlp => {
                let targets = TrainTargets {
                    task: Task::Severity,
                    y,
                    exposure: None,
                };
                ComponentModel::Mlp {
                    mlp: MlpRegressor::fit_unchecked(x, targets, hidden, cfg)?.0,
                }
            }
        })
    }

    /// Probabilities, rates per unit exposure, or amounts.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        match self {
            ComponentModel::Glm { glm } => glm.predict(x, None),
            ComponentModel::Mlp { mlp } => mlp.predict(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualKind {
    /// `y − ŷ`.
    Additive,
    /// `y / (exposure·ŷ)`.
    Ratio,
}

impl ResidualKind {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Frequency => ResidualKind::Ratio,
            Task::Binary | Task::Severity => ResidualKind::Additive,
        }
    }
}

/// Floor on the expected count in ratio residuals.
pub const RATIO_GUARD: f64 = 1e-8;

/// Residuals of the base model against the observed targets.
pub fn residuals(kind: ResidualKind, y: &[f64], base: &[f64], exposure: Option<&[f64]>) -> Result<Vec<f64>> {
    if y.len() != base.len() {
        return Err(Error::dims("residuals", y.len(), base.len()));
    }
    Ok(match kind {
        ResidualKind::Additive => y.iter().zip(base).map(|(a, b)| a - b).collect(),
        ResidualKind::Ratio => (0..y.len())
            .map(|i| y[i] / (exposure.map_or(1.0, |e| e[i]) * base[i]).max(RATIO_GUARD))
            .collect(),
    })
}

/// k-nearest-neighbor averaging over a fixed reference set.
///
/// A query's value is the mean over its `k` nearest reference points in
/// standardized coordinates, ties broken by reference index. A reference
/// point is its own nearest neighbor, so `k = 1` reproduces the reference
/// values at reference points with unique coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnSmoother {
    pub k: usize,
    pub scaler: ColumnScaler,
    pub reference: Matrix,
    pub values: Vec<f64>,
}

impl KnnSmoother {
    pub fn fit(coords: &Matrix, values: &[f64], k: usize) -> Result<Self> {
        if coords.rows() != values.len() {
            return Err(Error::dims("KnnSmoother", coords.rows(), values.len()));
        }
        if coords.cols() == 0 {
            return Err(Error::invalid("neighbor smoothing needs at least one coordinate column"));
        }
        if k == 0 || k > values.len() {
            return Err(Error::invalid(format!("k = {k} must lie in 1..={}", values.len())));
        }
        let scaler = ColumnScaler::fit(coords)?;
        Ok(KnnSmoother {
            k,
            reference: scaler.transform(coords)?,
            scaler,
            values: values.to_vec(),
        })
    }

    pub fn smooth(&self, coords: &Matrix) -> Result<Vec<f64>> {
        let q = self.scaler.transform(coords)?;
        if q.cols() == 1 {
            return Ok(self.smooth_sorted(q.data()));
        }
        let n = self.reference.rows();
        let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
        (0..q.rows())
            .map(|r| {
                let point = q.row(r);
                dist.clear();
                dist.extend((0..n).map(|i| {
                    let d: f64 = self.reference.row(i).iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, i)
                }));
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if self.k < n {
                    dist.select_nth_unstable_by(self.k - 1, cmp);
                }
                Ok(dist[..self.k].iter().map(|&(_, i)| self.values[i]).sum::<f64>() / self.k as f64)
            })
            .collect()
    }

    /// One coordinate: walk outward from the query in sorted order, keeping
    /// every candidate tied with the k-th distance, so the (distance, index)
    /// order matches the general path exactly.
    fn smooth_sorted(&self, queries: &[f64]) -> Vec<f64> {
        let mut sorted: Vec<(f64, usize)> = self.reference.data().iter().copied().zip(0..).collect();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut found: Vec<(f64, usize)> = Vec::with_capacity(self.k + 8);
        queries
            .iter()
            .map(|&x| {
                found.clear();
                let dist = |i: usize| (sorted[i].0 - x) * (sorted[i].0 - x);
                let (mut lo, mut hi) = {
                    let p = sorted.partition_point(|e| e.0 < x);
                    (p, p)
                };
                loop {
                    let left = (lo > 0).then(|| dist(lo - 1));
                    let right = (hi < sorted.len()).then(|| dist(hi));
                    let (d, take_left) = match (left, right) {
                        (Some(l), Some(r)) => (l.min(r), l <= r),
                        (Some(l), None) => (l, true),
                        (None, Some(r)) => (r, false),
                        (None, None) => break,
                    };
                    if found.len() >= self.k && d > found[found.len() - 1].0 {
                        break;
                    }
                    if take_left {
                        lo -= 1;
                        found.push((d, sorted[lo].1));
                    } else {
                        found.push((d, sorted[hi].1));
                        hi += 1;
                    }
                }
                found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                found[..self.k].iter().map(|&(_, i)| self.values[i]).sum::<f64>() / self.k as f64
            })
            .collect()
    }
}

/// Equal-frequency binning; each bin is represented by its training mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileBinner {
    /// Largest training value of each bin, ascending.
    pub upper_edges: Vec<f64>,
    pub levels: Vec<f64>,
}

impl QuantileBinner {
    /// Bin sizes differ by at most one; the first `n mod bins` bins take the extra row.
    pub fn fit(values: &[f64], bins: usize) -> Result<Self> {
        let n = values.len();
        if bins == 0 || bins > n {
            return Err(Error::invalid(format!("quantile_bins = {bins} must lie in 1..={n}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("quantile binning input".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (base, extra) = (n / bins, n % bins);
        let mut start = 0;
        let mut upper_edges = Vec::with_capacity(bins);
        let mut levels = Vec::with_capacity(bins);
        for b in 0..bins {
            let size = base + usize::from(b < extra);
            let chunk = &sorted[start..start + size];
            upper_edges.push(chunk[size - 1]);
            levels.push(chunk.iter().sum::<f64>() / size as f64);
            start += size;
        }
        Ok(QuantileBinner { upper_edges, levels })
    }

    pub fn bin(&self, v: f64) -> usize {
        self.upper_edges.partition_point(|&e| e < v).min(self.levels.len() - 1)
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.levels[self.bin(v)]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub base: ComponentKind,
    pub components: ComponentKind,
    pub component_hidden: Vec<usize>,
    pub component_train: TrainConfig,
    /// `None` picks additive residuals, or ratio residuals for frequency.
    pub residual: Option<ResidualKind>,
    pub knn_k: usize,
    pub quantile_bins: usize,
    /// Hidden layers of the final predictor; empty gives a GLM head.
    pub final_hidden: Vec<usize>,
    pub fair: FairTrainConfig,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        TwoStageConfig {
            base: ComponentKind::Glm,
            components: ComponentKind::Mlp,
            component_hidden: vec![16],
            component_train: TrainConfig::default(),
            residual: None,
            knn_k: 30,
            quantile_bins: 10,
            final_hidden: vec![32, 32],
            fair: FairTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageModel {
    pub task: Task,
    pub residual: ResidualKind,
    pub base: ComponentModel,
    pub geo_residual: ComponentModel,
    pub car_residual: ComponentModel,
    pub geo_coords: Vec<usize>,
    pub geo_smoother: KnnSmoother,
    pub geo_binner: QuantileBinner,
    pub car_binner: QuantileBinner,
    pub final_scaler: ColumnScaler,
    pub final_net: JointNet,
}

fn check_blocks(p: &Portfolio) -> Result<()> {
    p.validate()?;
    for (name, m) in [("policy", &p.x_p), ("geographic", &p.x_g), ("car", &p.x_c)] {
        if m.cols() == 0 {
            return Err(Error::invalid(format!("the {name} block is empty")));
        }
    }
    Ok(())
}

fn targets(p: &Portfolio) -> TrainTargets<'_> {
    TrainTargets {
        task: p.task,
        y: &p.y,
        exposure: p.exposure.as_deref(),
    }
}

/// Fits every stage; the final predictor is trained with `cfg.fair`.
pub fn fit_two_stage(portfolio: &Portfolio, cfg: &TwoStageConfig) -> Result<(TwoStageModel, TrainingTrace)> {
    check_blocks(portfolio)?;
    let n = portfolio.rows();
    if cfg.knn_k == 0 || cfg.knn_k > n {
        return Err(Error::invalid(format!("knn_k = {} must lie in 1..={n}", cfg.knn_k)));
    }
    let task = portfolio.task;
    let seed = cfg.fair.train.seed;
    let stage_cfg = |stream: u64| TrainConfig {
        seed: derive_seed(seed, stream),
        ..cfg.component_train.clone()
    };
    let base = ComponentModel::fit_task(cfg.base, &portfolio.x_p, targets(portfolio), &cfg.component_hidden, &stage_cfg(10))?;
    let residual = cfg.residual.unwrap_or(ResidualKind::default_for(task));
    let r = residuals(residual, &portfolio.y, &base.predict(&portfolio.x_p)?, portfolio.exposure.as_deref())?;
    let geo_residual =
        ComponentModel::fit_regression(cfg.components, &portfolio.x_g, &r, &cfg.component_hidden, &stage_cfg(11))?;
    let car_residual =
        ComponentModel::fit_regression(cfg.components, &portfolio.x_c, &r, &cfg.component_hidden, &stage_cfg(12))?;

    let coords = portfolio.x_g.select_cols(&portfolio.geo_coords);
    let geo_smoother = KnnSmoother::fit(&coords, &geo_residual.predict(&portfolio.x_g)?, cfg.knn_k)?;
    let geo_raw = geo_smoother.smooth(&coords)?;
    let car_raw = car_residual.predict(&portfolio.x_c)?;
    let geo_binner = QuantileBinner::fit(&geo_raw, cfg.quantile_bins)?;
    let car_binner = QuantileBinner::fit(&car_raw, cfg.quantile_bins)?;

    let mut model = TwoStageModel {
        task,
        residual,
        base,
        geo_residual,
        car_residual,
        geo_coords: portfolio.geo_coords.clone(),
        geo_smoother,
        geo_binner,
        car_binner,
        final_scaler: ColumnScaler {
            means: Vec::new(),
            stds: Vec::new(),
        },
        // Replaced by `refit_final` below.
        final_net: JointNet::plain(portfolio.x_p.cols() + 2, &[], task, &mut Rng::new(0))?,
    };
    let trace = model.refit_final(portfolio, &cfg.final_hidden, &cfg.fair)?;
    Ok((model, trace))
}

impl TwoStageModel {
    /// Binned components `(C, G)`, each `n × 1`.
    pub fn components(&self, portfolio: &Portfolio) -> Result<(Matrix, Matrix)> {
        let car = self.car_binner.apply(&self.car_residual.predict(&portfolio.x_c)?);
        let coords = portfolio.x_g.select_cols(&self.geo_coords);
        // The smoother replaces the raw geo prediction by its neighbor mean.
        let geo = self.geo_binner.apply(&self.geo_smoother.smooth(&coords)?);
        Ok((Matrix::column_vector(&car), Matrix::column_vector(&geo)))
    }

    fn final_design(&self, portfolio: &Portfolio) -> Result<Matrix> {
        let (c, g) = self.components(portfolio)?;
        Matrix::hcat(&[&portfolio.x_p, &c, &g])
    }

    /// Refits only the final predictor; the base and component models are
    /// left untouched.
    pub fn refit_final(&mut self, portfolio: &Portfolio, hidden: &[usize], fair: &FairTrainConfig) -> Result<TrainingTrace> {
        check_blocks(portfolio)?;
        let design = self.final_design(portfolio)?;
        let scaler = ColumnScaler::fit(&design)?;
        let inputs = JointInputs::policy_only(scaler.transform(&design)?);
        let mut net = JointNet::plain(design.cols(), hidden, self.task, &mut Rng::new(derive_seed(fair.train.seed, 0)))?;
        let data = FairData {
            inputs: &inputs,
            targets: targets(portfolio),
            s: &portfolio.s,
        };
        let trace = train_fair(&mut net, data, fair)?;
        self.final_scaler = scaler;
        self.final_net = net;
        Ok(trace)
    }

    pub fn predict(&self, portfolio: &Portfolio) -> Result<Vec<f64>> {
        let design = self.final_design(portfolio)?;
        self.final_net.predict(&JointInputs::policy_only(self.final_scaler.transform(&design)?))
    }

    /// Base-model predictions on the policy block alone.
    pub fn predict_base(&self, portfolio: &Portfolio) -> Result<Vec<f64>> {
        self.base.predict(&portfolio.x_p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub geo_encoder: EncoderSpec,
    pub car_encoder: EncoderSpec,
    pub predictor_hidden: Vec<usize>,
    /// Optional post-hoc neighbor smoothing of `G` with this `k`.
    pub geo_smoothing_k: Option<usize>,
    pub fair: FairTrainConfig,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            geo_encoder: EncoderSpec::default(),
            car_encoder: EncoderSpec::default(),
            predictor_hidden: vec![32, 32],
            geo_smoothing_k: None,
            fair: FairTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub task: Task,
    pub policy_scaler: ColumnScaler,
    pub geo_scaler: ColumnScaler,
    pub car_scaler: ColumnScaler,
    pub net: JointNet,
    pub geo_coords: Vec<usize>,
    /// Smoother of each latent `G` dimension.
    pub geo_smoothers: Vec<KnnSmoother>,
}

/// Trains encoders and predictor jointly under `cfg.fair`.
pub fn fit_autoencoder(portfolio: &Portfolio, cfg: &AutoencoderConfig) -> Result<(AutoencoderModel, TrainingTrace)> {
    portfolio.validate()?;
    if portfolio.x_p.cols() == 0 && portfolio.x_g.cols() == 0 && portfolio.x_c.cols() == 0 {
        return Err(Error::invalid("every feature block is empty"));
    }
    let policy_scaler = ColumnScaler::fit(&portfolio.x_p)?;
    let geo_scaler = ColumnScaler::fit(&portfolio.x_g)?;
    let car_scaler = ColumnScaler::fit(&portfolio.x_c)?;
    let inputs = JointInputs {
        policy: policy_scaler.transform(&portfolio.x_p)?,
        geo: geo_scaler.transform(&portfolio.x_g)?,
        car: car_scaler.transform(&portfolio.x_c)?,
    };
    let mut rng = Rng::new(derive_seed(cfg.fair.train.seed, 0));
    let mut net = JointNet::new(
        portfolio.x_p.cols(),
        portfolio.x_g.cols(),
        portfolio.x_c.cols(),
        &cfg.geo_encoder,
        &cfg.car_encoder,
        &cfg.predictor_hidden,
        portfolio.task,
        &mut rng,
    )?;
    let data = FairData {
        inputs: &inputs,
        targets: targets(portfolio),
        s: &portfolio.s,
    };
    let trace = train_fair(&mut net, data, &cfg.fair)?;
    let mut model = AutoencoderModel {
        task: portfolio.task,
        policy_scaler,
        geo_scaler,
        car_scaler,
        net,
        geo_coords: portfolio.geo_coords.clone(),
        geo_smoothers: Vec::new(),
    };
    if let Some(k) = cfg.geo_smoothing_k {
        let (_, g) = model.net.components(&inputs)?;
        let coords = portfolio.x_g.select_cols(&portfolio.geo_coords);
        model.geo_smoothers = (0..g.cols())
            .map(|d| KnnSmoother::fit(&coords, &g.column(d), k))
            .collect::<Result<_>>()?;
    }
    Ok((model, trace))
}

impl AutoencoderModel {
    fn inputs(&self, portfolio: &Portfolio) -> Result<JointInputs> {
        Ok(JointInputs {
            policy: self.policy_scaler.transform(&portfolio.x_p)?,
            geo: self.geo_scaler.transform(&portfolio.x_g)?,
            car: self.car_scaler.transform(&portfolio.x_c)?,
        })
    }

    /// Latent `(C, G)`, with `G` smoothed when smoothing is configured.
    pub fn components(&self, portfolio: &Portfolio) -> Result<(Matrix, Matrix)> {
        let (c, g) = self.net.components(&self.inputs(portfolio)?)?;
        if self.geo_smoothers.is_empty() {
            return Ok((c, g));
        }
        let coords = portfolio.x_g.select_cols(&self.geo_coords);
        let cols = self.geo_smoothers.iter().map(|s| s.smooth(&coords)).collect::<Result<Vec<_>>>()?;
        Ok((c, Matrix::from_columns(&cols)?))
    }

    pub fn predict(&self, portfolio: &Portfolio) -> Result<Vec<f64>> {
        let inputs = self.inputs(portfolio)?;
        if self.geo_smoothers.is_empty() {
            return self.net.predict(&inputs);
        }
        let (c, g) = self.components(portfolio)?;
        let design = Matrix::hcat(&[&inputs.policy, &g, &c])?;
        Ok(self.net.predictor.predict(&design)?.into_data())
    }
}

/// Either fitted architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum PricingModel {
    TwoStage(TwoStageModel),
    Autoencoder(AutoencoderModel),
}

impl PricingModel {
    pub fn task(&self) -> Task {
        match self {
            PricingModel::TwoStage(m) => m.task,
            PricingModel::Autoencoder(m) => m.task,
        }
    }

    /// Probabilities for binary, rates per unit exposure for frequency.
    pub fn predict(&self, portfolio: &Portfolio) -> Result<Vec<f64>> {
        match self {
            PricingModel::TwoStage(m) => m.predict(portfolio),
            PricingModel::Autoencoder(m) => m.predict(portfolio),
        }
    }

    pub fn extract_components(&self, portfolio: &Portfolio) -> Result<(Matrix, Matrix)> {
        match self {
            PricingModel::TwoStage(m) => m.components(portfolio),
            PricingModel::Autoencoder(m) => m.components(portfolio),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json("pricing_model", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        persist::from_json("pricing_model", text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    /// Binary task only.
    pub accuracy: Option<f64>,
    /// Against expected counts for frequency.
    pub mse: f64,
    pub gini: Option<f64>,
    pub edr: Option<f64>,
}

/// Dependence diagnostics of the latent components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentDependence {
    pub car_sensitive: Option<f64>,
    pub prediction_car: Option<f64>,
    pub prediction_geo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationConfig {
    pub report: ReportConfig,
    /// `None` skips the component diagnostics.
    pub components: Option<HgrEstimator>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            report: ReportConfig::default(),
            components: Some(HgrEstimator::Neural(HgrNnConfig::default())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub performance: Performance,
    pub fairness: FairnessReport,
    pub components: ComponentDependence,
}

pub const PERFORMANCE_COLUMNS: [&str; 4] = ["accuracy", "mse", "gini", "edr"];
pub const COMPONENT_COLUMNS: [&str; 3] = ["hgr_car_sensitive", "hgr_prediction_car", "hgr_prediction_geo"];

/// Scores `model` on `portfolio`.
pub fn evaluate(model: &PricingModel, portfolio: &Portfolio, cfg: &EvaluationConfig) -> Result<Evaluation> {
    let task = model.task();
    let scores = model.predict(portfolio)?;
    let exposure = portfolio.exposure.as_deref();
    let expected: Vec<f64> = match (task, exposure) {
        (Task::Frequency, Some(e)) => scores.iter().zip(e).map(|(r, e)| r * e).collect(),
        _ => scores.clone(),
    };
    let y = &portfolio.y;
    let performance = Performance {
        accuracy: match task {
            Task::Binary => Some(accuracy(y, &scores, cfg.report.threshold)?),
            _ => None,
        },
        mse: mse(y, &expected)?,
        gini: normalized_gini(y, &scores, exposure).ok(),
        edr: edr(task, y, &expected, exposure).ok(),
    };
    let fairness = FairnessReport::compute(task, &scores, y, &portfolio.s, &cfg.report)?;
    let mut components = ComponentDependence::default();
    if let Some(estimator) = &cfg.components {
        let (c, g) = model.extract_components(portfolio)?;
        let pred = Matrix::column_vector(&scores);
        let value = |u: &Matrix, v: &Matrix| -> Result<Option<f64>> {
            if u.cols() == 0 || v.cols() == 0 || u.rows() < estimator.min_samples() {
                return Ok(None);
            }
            Ok(Some(estimator.estimate(u, v)?.value))
        };
        components = ComponentDependence {
            car_sensitive: value(&c, &portfolio.s)?,
            prediction_car: value(&pred, &c)?,
            prediction_geo: value(&pred, &g)?,
        };
    }
    Ok(Evaluation {
        performance,
        fairness,
        components,
    })
}

impl Evaluation {
    pub fn csv_header() -> String {
        PERFORMANCE_COLUMNS
            .iter()
            .chain(&REPORT_COLUMNS)
            .chain(&COMPONENT_COLUMNS)
            .copied()
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Absent values are empty cells.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let p = &self.performance;
        let c = &self.components;
        [
            opt(p.accuracy),
            p.mse.to_string(),
            opt(p.gini),
            opt(p.edr),
            self.fairness.csv_row(),
            opt(c.car_sensitive),
            opt(c.prediction_car),
            opt(c.prediction_geo),
        ]
        .join(",")
    }

    /// Same cells with every value empty, for failed runs.
    pub fn empty_csv_row() -> String {
        vec![""; PERFORMANCE_COLUMNS.len() + REPORT_COLUMNS.len() + COMPONENT_COLUMNS.len()].join(",")
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json("evaluation", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        persist::from_json("evaluation", text)
    }
}
