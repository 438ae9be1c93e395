//! Fairness measurements over model predictions.
//!
//! Binary-outcome metrics (p-rule, disparate impact, disparate mistreatment)
//! work on thresholded labels and a binary sensitive attribute. FairQuant and
//! the HGR metrics work on raw scores and any sensitive attribute.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dependence::{self, ConditionalHgr, HgrEstimator, HgrNnConfig, RdcConfig};
use crate::error::{Error, Result};
use crate::models::{self, Task};
use crate::numkit::{self, Matrix};
use crate::persist;

/// Outcome class used for conditioning; the top class of a capped count
/// grouping is open-ended (`2+`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClassTag {
    pub value: u32,
    pub open_ended: bool,
}

impl ClassTag {
    pub fn exact(value: u32) -> Self {
        ClassTag {
            value,
            open_ended: false,
        }
    }
}

impl fmt::Display for ClassTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.open_ended {
            write!(f, "{}+", self.value)
        } else {
            write!(f, "{}", self.value)
        }
    }
}

pub const DEFAULT_COUNT_CAP: u32 = 2;

/// Collapses counts to `{0, 1, …, cap−1, cap+}`.
pub fn group_counts(y: &[f64], cap: u32) -> Result<Vec<ClassTag>> {
    if cap == 0 {
        return Err(Error::invalid("group_counts cap must be at least 1"));
    }
    y.iter()
        .map(|&v| {
            if !(v >= 0.0) || v.fract() != 0.0 {
                return Err(Error::invalid(format!("group_counts needs nonnegative integer counts, got {v}")));
            }
            Ok(if v >= cap as f64 {
                ClassTag {
                    value: cap,
                    open_ended: true,
                }
            } else {
                ClassTag::exact(v as u32)
            })
        })
        .collect()
}

/// Sorted distinct classes.
pub fn class_domain(classes: &[ClassTag]) -> Vec<ClassTag> {
    let mut d = classes.to_vec();
    d.sort();
    d.dedup();
    d
}

fn check_binary(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|&x| x == 0.0 || x == 1.0) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be binary (0/1)")))
    }
}

/// Whether every value is 0 or 1.
pub fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0 || x == 1.0)
}

/// Positive rates `(P(Ŷ=1|S=1), P(Ŷ=1|S=0))`.
pub fn group_positive_rates(labels: &[f64], s: &[f64]) -> Result<(f64, f64)> {
    if labels.len() != s.len() {
        return Err(Error::dims("group_positive_rates", labels.len(), s.len()));
    }
    check_binary("predicted labels", labels)?;
    check_binary("sensitive attribute", s)?;
    let mut pos = [0.0; 2];
    let mut count = [0usize; 2];
    for (&l, &g) in labels.iter().zip(s) {
        let g = g as usize;
        pos[g] += l;
        count[g] += 1;
    }
    for (g, &c) in count.iter().enumerate() {
        if c == 0 {
            return Err(Error::EmptyGroup(format!("S={g}")));
        }
    }
    Ok((pos[1] / count[1] as f64, pos[0] / count[0] as f64))
}

fn ratio_rule(a: f64, b: f64) -> f64 {
    match (a == 0.0, b == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (a / b).min(b / a),
    }
}

/// `min(P₁/P₀, P₀/P₁)`; 1 when both rates are 0, 0 when exactly one is.
pub fn p_rule(labels: &[f64], s: &[f64]) -> Result<f64> {
    let (p1, p0) = group_positive_rates(labels, s)?;
    Ok(ratio_rule(p1, p0))
}

/// `|P₁ − P₀|` from the same rates as [`p_rule`].
pub fn disparate_impact(labels: &[f64], s: &[f64]) -> Result<f64> {
    let (p1, p0) = group_positive_rates(labels, s)?;
    Ok((p1 - p0).abs())
}

/// `(D_FPR, D_FNR)`: group gaps in false-positive and false-negative rates.
pub fn disparate_mistreatment(labels: &[f64], y: &[f64], s: &[f64]) -> Result<(f64, f64)> {
    if labels.len() != y.len() || labels.len() != s.len() {
        return Err(Error::dims("disparate_mistreatment", labels.len(), format!("{} / {}", y.len(), s.len())));
    }
    check_binary("predicted labels", labels)?;
    check_binary("outcome", y)?;
    check_binary("sensitive attribute", s)?;
    // cell[y][s] = (count, predicted positives)
    let mut cell = [[(0usize, 0.0f64); 2]; 2];
    for ((&l, &t), &g) in labels.iter().zip(y).zip(s) {
        let c = &mut cell[t as usize][g as usize];
        c.0 += 1;
        c.1 += l;
    }
    for (t, row) in cell.iter().enumerate() {
        for (g, c) in row.iter().enumerate() {
            if c.0 == 0 {
                return Err(Error::EmptyGroup(format!("Y={t}, S={g}")));
            }
        }
    }
    let rate = |t: usize, g: usize| cell[t][g].1 / cell[t][g].0 as f64;
    let d_fpr = (rate(0, 1) - rate(0, 0)).abs();
    // FNR = 1 − TPR, so the gap equals the TPR gap
    let d_fnr = ((1.0 - rate(1, 1)) - (1.0 - rate(1, 0))).abs();
    Ok((d_fpr, d_fnr))
}

pub const DEFAULT_QUANTILES: usize = 50;

/// Sizes of `k` contiguous groups over `n` rows, remainder to the first groups.
fn group_sizes(n: usize, k: usize) -> impl Iterator<Item = usize> {
    (0..k).map(move |i| n / k + usize::from(i < n % k))
}

/// Mean absolute deviation from `reference` of prediction means over `k`
/// contiguous groups of `rows` sorted by `s` (stable on ties).
fn quantile_deviation(pred: &[f64], s: &[f64], rows: &[usize], k: usize, reference: f64) -> f64 {
    let mut order = rows.to_vec();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    let mut start = 0;
    let mut total = 0.0;
    for size in group_sizes(order.len(), k) {
        let group = &order[start..start + size];
        let m = group.iter().map(|&i| pred[i]).sum::<f64>() / size as f64;
        total += (m - reference).abs();
        start += size;
    }
    total / k as f64
}

/// FairQuant: split rows into `k` quantile groups of `s` and average
/// `|m_k − m|` over groups, with `m` the overall mean prediction.
pub fn fair_quant(pred: &[f64], s: &[f64], k: usize) -> Result<f64> {
    if pred.len() != s.len() {
        return Err(Error::dims("fair_quant", pred.len(), s.len()));
    }
    if k < 2 {
        return Err(Error::invalid("fair_quant needs at least 2 quantiles"));
    }
    if pred.len() < k {
        return Err(Error::invalid(format!("fair_quant needs n ≥ K ({} < {k})", pred.len())));
    }
    let rows: Vec<usize> = (0..pred.len()).collect();
    Ok(quantile_deviation(pred, s, &rows, k, numkit::mean(pred)))
}

fn class_rows(classes: &[ClassTag]) -> BTreeMap<ClassTag, Vec<usize>> {
    let mut map: BTreeMap<ClassTag, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        map.entry(c).or_default().push(i);
    }
    map
}

/// Per-class FairQuant terms `(1/K)·Σ_i |m_{i,y} − m|` against the full-set mean.
pub fn fair_quant_eo_per_class(pred: &[f64], s: &[f64], classes: &[ClassTag], k: usize) -> Result<Vec<(ClassTag, f64)>> {
    if pred.len() != s.len() || pred.len() != classes.len() {
        return Err(Error::dims("fair_quant_eo", pred.len(), format!("{} / {}", s.len(), classes.len())));
    }
    if k < 2 {
        return Err(Error::invalid("fair_quant_eo needs at least 2 quantiles"));
    }
    let groups = class_rows(classes);
    let small: Vec<String> = groups
        .iter()
        .filter(|(_, rows)| rows.len() < k)
        .map(|(c, rows)| format!("{c} (n={})", rows.len()))
        .collect();
    if !small.is_empty() {
        return Err(Error::EmptyGroup(format!("classes smaller than K={k}: {}", small.join(", "))));
    }
    let m = numkit::mean(pred);
    Ok(groups
        .into_iter()
        .map(|(c, rows)| (c, quantile_deviation(pred, s, &rows, k, m)))
        .collect())
}

/// Mean over classes of [`fair_quant_eo_per_class`].
pub fn fair_quant_eo(pred: &[f64], s: &[f64], classes: &[ClassTag], k: usize) -> Result<f64> {
    let per = fair_quant_eo_per_class(pred, s, classes, k)?;
    Ok(per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64)
}

/// Mean over outcome classes of HGR(Ŷ, S) within each class.
pub fn hgr_eo(pred: &[f64], s: &Matrix, classes: &[ClassTag], estimator: &HgrEstimator) -> Result<ConditionalHgr<ClassTag>> {
    dependence::hgr_conditional(&Matrix::column_vector(pred), s, classes, estimator)
}

/// Outcome classes used for equalized-odds metrics.
pub fn outcome_classes(task: Task, y: &[f64]) -> Result<Vec<ClassTag>> {
    match task {
        Task::Binary => group_counts(y, 1),
        Task::Frequency => group_counts(y, DEFAULT_COUNT_CAP),
        Task::Severity => Err(Error::invalid("equalized-odds classes are defined for binary and frequency tasks")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub threshold: f64,
    pub quantiles: usize,
    /// `None` skips the neural estimates.
    pub hgr_nn: Option<HgrNnConfig>,
    pub rdc: RdcConfig,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            threshold: models::DEFAULT_THRESHOLD,
            quantiles: DEFAULT_QUANTILES,
            hgr_nn: Some(HgrNnConfig::default()),
            rdc: RdcConfig::default(),
        }
    }
}

/// Every fairness metric for one model on one split.
///
/// Label metrics are present only for binary `S` (and, for D_FPR/D_FNR, a
/// binary outcome). FairQuant uses the first sensitive column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub p_rule: Option<f64>,
    pub disparate_impact: Option<f64>,
    pub d_fpr: Option<f64>,
    pub d_fnr: Option<f64>,
    pub fair_quant: f64,
    pub fair_quant_eo: Option<f64>,
    pub hgr_nn: Option<f64>,
    pub hgr_rdc: f64,
    pub hgr_eo: Option<f64>,
    pub quantile_count: usize,
    pub class_domain: Vec<String>,
}

/// Fixed CSV column order of [`FairnessReport::csv_row`].
pub const REPORT_COLUMNS: [&str; 11] = [
    "p_rule",
    "disparate_impact",
    "d_fpr",
    "d_fnr",
    "fair_quant",
    "fair_quant_eo",
    "hgr_nn",
    "hgr_rdc",
    "hgr_eo",
    "quantile_count",
    "class_domain",
];

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl FairnessReport {
    /// `scores` are probabilities or rates; `y` the observed outcome.
    pub fn compute(task: Task, scores: &[f64], y: &[f64], s: &Matrix, cfg: &ReportConfig) -> Result<Self> {
        let n = scores.len();
        if y.len() != n || s.rows() != n {
            return Err(Error::dims("FairnessReport", n, format!("{} / {}", y.len(), s.rows())));
        }
        if s.cols() == 0 {
            return Err(Error::invalid("at least one sensitive column is required"));
        }
        let s0 = s.column(0);
        let binary_s = s.cols() == 1 && is_binary(&s0);
        let labels = models::threshold_labels(scores, cfg.threshold);
        let (mut p, mut di, mut fpr, mut fnr) = (None, None, None, None);
        if binary_s {
            let (p1, p0) = group_positive_rates(&labels, &s0)?;
            p = Some(ratio_rule(p1, p0));
            di = Some((p1 - p0).abs());
            if task == Task::Binary {
                let (a, b) = disparate_mistreatment(&labels, y, &s0)?;
                fpr = Some(a);
                fnr = Some(b);
            }
        }
        let classes = outcome_classes(task, y).ok();
        let fq_eo = match &classes {
            // A class too small for the quantile grid leaves the cell empty.
            Some(c) => match fair_quant_eo(scores, &s0, c, cfg.quantiles) {
                Ok(v) => Some(v),
                Err(Error::EmptyGroup(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        let pred = Matrix::column_vector(scores);
        // Samples below the neural estimator's minimum leave the cells empty.
        let nn = cfg.hgr_nn.as_ref().filter(|_| n >= dependence::HGR_NN_MIN_SAMPLES);
        let hgr_nn = match nn {
            Some(c) => Some(dependence::hgr_nn(&pred, s, c)?.value),
            None => None,
        };
        let hgr_eo = match (&classes, nn) {
            (Some(c), Some(nn)) => match hgr_eo(scores, s, c, &HgrEstimator::Neural(nn.clone())) {
                Ok(v) => Some(v.mean),
                Err(Error::EmptyGroup(_)) => None,
                Err(e) => return Err(e),
            },
            _ => None,
        };
        Ok(FairnessReport {
            p_rule: p,
            disparate_impact: di,
            d_fpr: fpr,
            d_fnr: fnr,
            fair_quant: fair_quant(scores, &s0, cfg.quantiles)?,
            fair_quant_eo: fq_eo,
            hgr_nn,
            hgr_rdc: dependence::rdc_matrix(&pred, s, &cfg.rdc)?.value,
            hgr_eo,
            quantile_count: cfg.quantiles,
            class_domain: classes
                .map(|c| class_domain(&c).iter().map(ToString::to_string).collect())
                .unwrap_or_default(),
        })
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    /// One CSV row; absent values are empty cells, classes joined by `|`.
    pub fn csv_row(&self) -> String {
        [
            fmt_opt(self.p_rule),
            fmt_opt(self.disparate_impact),
            fmt_opt(self.d_fpr),
            fmt_opt(self.d_fnr),
            self.fair_quant.to_string(),
            fmt_opt(self.fair_quant_eo),
            fmt_opt(self.hgr_nn),
            self.hgr_rdc.to_string(),
            fmt_opt(self.hgr_eo),
            self.quantile_count.to_string(),
            self.class_domain.join("|"),
        ]
        .join(",")
    }

    pub fn to_json(&self) -> Result<String> {
        persist::to_json("fairness_report", self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        persist::from_json("fairness_report", text)
    }
}
