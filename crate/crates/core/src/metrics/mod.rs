//! Slide-level evaluation: weighted F1, rank AUC, ROC points, percentile
//! bootstrap intervals and per-subtype accuracy.
//!
//! Bootstrap iteration `i` draws from `ChaCha8Rng::seed_from_u64(seed)`
//! switched to stream `i`; each resample index is
//! `rng.random_range(0..n)`. A resample that lacks a class while the metric
//! needs both is discarded and redrawn from the same stream.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wsi::{Grade, Subtype};

/// Redraws allowed per bootstrap iteration before giving up.
const MAX_REDRAWS: u32 = 10_000;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no scored slides")]
    Empty,
    #[error("{0} needs both Low and High slides")]
    SingleClass(&'static str),
    #[error("bootstrap iterations must be >= 1")]
    NoIterations,
    #[error("confidence level {0} outside (0, 1)")]
    InvalidLevel(f64),
    #[error("slide `{slide_id}`: probability {prob} outside [0, 1]")]
    InvalidProbability { slide_id: String, prob: f64 },
    #[error("bootstrap iteration {0} could not draw both classes")]
    RedrawLimit(u64),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path, source: std::io::Error) -> MetricsError {
    MetricsError::Io { path: path.to_path_buf(), source }
}

/// One slide prediction; also the predictions JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSlide {
    pub slide_id: String,
    pub subtype: Subtype,
    pub true_grade: Grade,
    pub prob_high: f64,
}

impl ScoredSlide {
    /// High iff `prob_high >= threshold`.
    pub fn predicted(&self, threshold: f64) -> Grade {
        if self.prob_high >= threshold {
            Grade::High
        } else {
            Grade::Low
        }
    }
}

pub fn validate(scored: &[ScoredSlide]) -> Result<(), MetricsError> {
    if scored.is_empty() {
        return Err(MetricsError::Empty);
    }
    for s in scored {
        if !(0.0..=1.0).contains(&s.prob_high) {
            return Err(MetricsError::InvalidProbability { slide_id: s.slide_id.clone(), prob: s.prob_high });
        }
    }
    Ok(())
}

/// Confusion counts with High as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(truth: &[Grade], pred: &[Grade]) -> Self {
        let mut c = Confusion::default();
        for (t, p) in truth.iter().zip(pred) {
            match (t, p) {
                (Grade::High, Grade::High) => c.tp += 1,
                (Grade::High, Grade::Low) => c.fn_ += 1,
                (Grade::Low, Grade::High) => c.fp += 1,
                (Grade::Low, Grade::Low) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }

    /// Support-weighted mean of the Low and High F1 scores; a class with no
    /// predicted or no true members scores 0.
    pub fn weighted_f1(&self) -> f64 {
        fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
            let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        }
        let n = self.total() as f64;
        let high = f1(self.tp, self.fp, self.fn_);
        let low = f1(self.tn, self.fn_, self.fp);
        ((self.tp + self.fn_) as f64 * high + (self.tn + self.fp) as f64 * low) / n
    }
}

pub fn confusion(scored: &[ScoredSlide], threshold: f64) -> Confusion {
    let truth: Vec<Grade> = scored.iter().map(|s| s.true_grade).collect();
    let pred: Vec<Grade> = scored.iter().map(|s| s.predicted(threshold)).collect();
    Confusion::from_labels(&truth, &pred)
}

pub fn weighted_f1(scored: &[ScoredSlide], threshold: f64) -> Result<f64, MetricsError> {
    validate(scored)?;
    Ok(confusion(scored, threshold).weighted_f1())
}

pub fn weighted_f1_from_labels(truth: &[Grade], pred: &[Grade]) -> Result<f64, MetricsError> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(MetricsError::Empty);
    }
    Ok(Confusion::from_labels(truth, pred).weighted_f1())
}

/// Mann-Whitney AUC from midranks: the fraction of (positive, negative)
/// pairs where the positive scores higher, ties counting one half.
pub fn auc_from_scores(positive: &[bool], scores: &[f64]) -> Result<f64, MetricsError> {
    let n = scores.len();
    if n == 0 || positive.len() != n {
        return Err(MetricsError::Empty);
    }
    let np = positive.iter().filter(|&&p| p).count();
    let nn = n - np;
    if np == 0 || nn == 0 {
        return Err(MetricsError::SingleClass("auc"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral: a tie group at sorted
    // positions i..j has ranks i+1..=j, doubled midrank i + 1 + j.
    let mut rank2: u128 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let pos = order[i..j].iter().filter(|&&k| positive[k]).count() as u128;
        rank2 += pos * (i + 1 + j) as u128;
        i = j;
    }
    let (np, nn) = (np as u128, nn as u128);
    let u2 = rank2 - np * (np + 1);
    Ok(u2 as f64 / (2 * np * nn) as f64)
}

pub fn auc(scored: &[ScoredSlide]) -> Result<f64, MetricsError> {
    validate(scored)?;
    let positive: Vec<bool> = scored.iter().map(|s| s.true_grade == Grade::High).collect();
    let scores: Vec<f64> = scored.iter().map(|s| s.prob_high).collect();
    auc_from_scores(&positive, &scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called High; the first point uses +inf.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the points.
    pub fn area(&self) -> f64 {
        self.points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricsError> {
        let mut text = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            text.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        fs::write(path, text).map_err(|e| io_err(path, e))
    }
}

/// One point per distinct score, swept from high to low, starting at (0,0).
pub fn roc_points(scored: &[ScoredSlide]) -> Result<RocCurve, MetricsError> {
    validate(scored)?;
    let np = scored.iter().filter(|s| s.true_grade == Grade::High).count();
    let nn = scored.len() - np;
    if np == 0 || nn == 0 {
        return Err(MetricsError::SingleClass("roc_points"));
    }
    let mut order: Vec<&ScoredSlide> = scored.iter().collect();
    order.sort_by(|a, b| b.prob_high.total_cmp(&a.prob_high));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = order[i].prob_high;
        while i < order.len() && order[i].prob_high == t {
            if order[i].true_grade == Grade::High {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / nn as f64, tpr: tp as f64 / np as f64, threshold: t });
    }
    Ok(RocCurve { points })
}

/// Statistic evaluated on each bootstrap resample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    WeightedF1,
    Auc,
}

impl Metric {
    fn needs_both_classes(self) -> bool {
        matches!(self, Metric::Auc)
    }

    pub fn evaluate(self, scored: &[ScoredSlide], threshold: f64) -> Result<f64, MetricsError> {
        match self {
            Metric::WeightedF1 => weighted_f1(scored, threshold),
            Metric::Auc => auc(scored),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub iterations: u64,
    /// Resamples discarded for lacking a class.
    pub redrawn: u64,
}

/// Accepted resample for `iteration` and the number of rejected draws
/// before it.
pub fn bootstrap_indices(
    n: usize,
    seed: u64,
    iteration: u64,
    accept: impl Fn(&[usize]) -> bool,
) -> Result<(Vec<usize>, u32), MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    let mut idx = vec![0usize; n];
    for redraws in 0..=MAX_REDRAWS {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        if accept(&idx) {
            return Ok((idx, redraws));
        }
    }
    Err(MetricsError::RedrawLimit(iteration))
}

/// Linear-interpolation percentile of sorted `xs` at quantile `q`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Metric values over `iterations` resamples, in iteration order.
pub fn bootstrap_distribution(
    scored: &[ScoredSlide],
    metric: Metric,
    threshold: f64,
    iterations: u64,
    seed: u64,
) -> Result<(Vec<f64>, u64), MetricsError> {
    validate(scored)?;
    if iterations < 1 {
        return Err(MetricsError::NoIterations);
    }
    metric.evaluate(scored, threshold)?;
    let n = scored.len();
    let results: Vec<Result<(f64, u32), MetricsError>> = (0..iterations)
        .into_par_iter()
        .map(|it| {
            let accept = |idx: &[usize]| {
                !metric.needs_both_classes() || {
                    let high = idx.iter().filter(|&&i| scored[i].true_grade == Grade::High).count();
                    high > 0 && high < idx.len()
                }
            };
            let (idx, redraws) = bootstrap_indices(n, seed, it, accept)?;
            let sample: Vec<ScoredSlide> = idx.iter().map(|&i| scored[i].clone()).collect();
            Ok((metric.evaluate(&sample, threshold)?, redraws))
        })
        .collect();
    let mut values = Vec::with_capacity(iterations as usize);
    let mut redrawn = 0u64;
    for r in results {
        let (v, k) = r?;
        values.push(v);
        redrawn += k as u64;
    }
    Ok((values, redrawn))
}

/// Percentile bootstrap interval at confidence `level` (0.95 for 2.5/97.5).
pub fn bootstrap_ci(
    scored: &[ScoredSlide],
    metric: Metric,
    threshold: f64,
    iterations: u64,
    level: f64,
    seed: u64,
) -> Result<BootstrapCi, MetricsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(MetricsError::InvalidLevel(level));
    }
    let (mut values, redrawn) = bootstrap_distribution(scored, metric, threshold, iterations, seed)?;
    values.sort_by(f64::total_cmp);
    // (1 - 0.95) / 2 is 0.025000000000000022 in f64; snap to the nominal quantile
    let snap = |q: f64| (q * 1e12).round() / 1e12;
    Ok(BootstrapCi {
        lower: percentile(&values, snap((1.0 - level) / 2.0)),
        upper: percentile(&values, snap((1.0 + level) / 2.0)),
        level,
        iterations,
        redrawn,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtypeAccuracyRow {
    pub subtype: Subtype,
    pub correct: usize,
    pub total: usize,
    /// `None` when the subtype is absent.
    pub accuracy: Option<f64>,
}

impl fmt::Display for SubtypeAccuracyRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.accuracy {
            Some(a) => write!(f, "{a:.2} ({}/{:>3})", self.correct, self.total),
            None => f.write_str("NA"),
        }
    }
}

/// Fraction of slides per subtype whose predicted grade matches the truth.
pub fn subtype_accuracy(scored: &[ScoredSlide], threshold: f64) -> Vec<SubtypeAccuracyRow> {
    Subtype::ALL
        .iter()
        .map(|&subtype| {
            let rows: Vec<&ScoredSlide> = scored.iter().filter(|s| s.subtype == subtype).collect();
            let correct = rows.iter().filter(|s| s.predicted(threshold) == s.true_grade).count();
            let total = rows.len();
            SubtypeAccuracyRow {
                subtype,
                correct,
                total,
                accuracy: (total > 0).then(|| correct as f64 / total as f64),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCi {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

impl fmt::Display for PointCi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ({:.2}-{:.2})", self.point, self.lower, self.upper)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub seed: u64,
    pub iterations: u64,
    pub level: f64,
    pub threshold: f64,
    pub f1: PointCi,
    pub auc: PointCi,
    pub auc_redrawn: u64,
    pub confusion: Confusion,
    pub subtypes: Vec<SubtypeAccuracyRow>,
}

impl MetricReport {
    /// Two-line F1/AUC summary followed by one line per subtype.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}{}\n{:<16}{}\n", "F1 score", self.f1, "AUC", self.auc);
        for row in &self.subtypes {
            s.push_str(&format!("{:<16}{}\n", row.subtype.name(), row));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iterations: u64,
    pub level: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { iterations: 10_000, level: 0.95, threshold: 0.5, seed: 0 }
    }
}

pub fn evaluate(scored: &[ScoredSlide], opts: &EvalOptions) -> Result<MetricReport, MetricsError> {
    validate(scored)?;
    let f1 = weighted_f1(scored, opts.threshold)?;
    let auc_point = auc(scored)?;
    let f1_ci = bootstrap_ci(scored, Metric::WeightedF1, opts.threshold, opts.iterations, opts.level, opts.seed)?;
    let auc_ci = bootstrap_ci(scored, Metric::Auc, opts.threshold, opts.iterations, opts.level, opts.seed)?;
    Ok(MetricReport {
        n: scored.len(),
        seed: opts.seed,
        iterations: opts.iterations,
        level: opts.level,
        threshold: opts.threshold,
        f1: PointCi { point: f1, lower: f1_ci.lower, upper: f1_ci.upper },
        auc: PointCi { point: auc_point, lower: auc_ci.lower, upper: auc_ci.upper },
        auc_redrawn: auc_ci.redrawn,
        confusion: confusion(scored, opts.threshold),
        subtypes: subtype_accuracy(scored, opts.threshold),
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<ScoredSlide>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| MetricsError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, scored: &[ScoredSlide]) -> Result<(), MetricsError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for s in scored {
        writeln!(f, "{}", serde_json::to_string(s).expect("prediction serializes")).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}
