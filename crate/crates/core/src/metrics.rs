//! Regression and ranking metrics over sparse relevance rows.
//!
//! A prediction for one row is a score list `(column, score)`; columns not in
//! the list score 0. Cut-off denominators use `min(k, L)` where `L` is the
//! row dimension, so a list shorter than `k` is padded with zero scores.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::data::{Orientation, PredictionFile, RelevanceDataset};
use crate::error::{Error, Result};
use crate::sparse::{rank_order, top_k_entries, SparseVector};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::invalid("k must be at least 1"))
    } else {
        Ok(())
    }
}

fn denom(k: usize, dim: usize) -> f64 {
    k.min(dim).max(1) as f64
}

/// Non-zero absolute errors `|ŷ_l − y_l|` over the union of both supports.
pub fn abs_errors(y: &SparseVector, yhat: &[(u32, f64)]) -> Vec<f64> {
    let mut pred: Vec<(u32, f64)> = yhat.to_vec();
    pred.sort_unstable_by_key(|e| e.0);
    let (yi, yv) = (y.indices(), y.values());
    let (mut p, mut q) = (0, 0);
    let mut out = Vec::with_capacity(yi.len() + pred.len());
    while p < yi.len() || q < pred.len() {
        let a = yi.get(p).copied().unwrap_or(u32::MAX);
        let b = pred.get(q).map_or(u32::MAX, |e| e.0);
        let e = if a < b {
            p += 1;
            yv[p - 1]
        } else if b < a {
            q += 1;
            pred[q - 1].1
        } else {
            p += 1;
            q += 1;
            yv[p - 1] - pred[q - 1].1
        };
        if e != 0.0 {
            out.push(e.abs());
        }
    }
    out
}

/// The `k` largest values of `errors`, by partial selection.
fn largest(mut errors: Vec<f64>, k: usize) -> Vec<f64> {
    if errors.len() > k {
        errors.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        errors.truncate(k);
    }
    errors
}

/// Mean of the `k` largest absolute errors.
pub fn xmad_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<f64> {
    check_k(k)?;
    let top = largest(abs_errors(y, yhat), k);
    Ok(top.iter().sum::<f64>() / denom(k, y.dim()))
}

/// Root mean square of the `k` largest absolute errors.
pub fn xrmse_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<f64> {
    check_k(k)?;
    let top = largest(abs_errors(y, yhat), k);
    Ok((top.iter().map(|e| e * e).sum::<f64>() / denom(k, y.dim())).sqrt())
}

/// Sum of absolute errors over all labels.
pub fn mad(y: &SparseVector, yhat: &[(u32, f64)]) -> f64 {
    abs_errors(y, yhat).iter().sum()
}

/// `sqrt(Σ_l e_l² / L)`.
pub fn rmse(y: &SparseVector, yhat: &[(u32, f64)]) -> f64 {
    let sq: f64 = abs_errors(y, yhat).iter().map(|e| e * e).sum();
    (sq / y.dim().max(1) as f64).sqrt()
}

/// Mean true relevance of the `k` top-scored columns.
pub fn wp_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<f64> {
    check_k(k)?;
    let gain: f64 = top_k_entries(yhat, k).iter().map(|&(l, _)| y.get(l)).sum();
    Ok(gain / denom(k, y.dim()))
}

/// WP@k of the ideal ranking.
pub fn ideal_wp_at_k(y: &SparseVector, k: usize) -> Result<f64> {
    check_k(k)?;
    let top: f64 = largest(y.values().to_vec(), k).iter().sum();
    Ok(top / denom(k, y.dim()))
}

/// Ideal WP@k minus achieved WP@k; never negative for non-negative `y`.
pub fn wp_regret_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<f64> {
    Ok(ideal_wp_at_k(y, k)? - wp_at_k(y, yhat, k)?)
}

/// Mean absolute error over the `k` top-scored columns.
pub fn regression_error_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<f64> {
    check_k(k)?;
    let sum: f64 = top_k_entries(yhat, k)
        .iter()
        .map(|&(l, s)| (s - y.get(l)).abs())
        .sum();
    Ok(sum / denom(k, y.dim()))
}

/// Label propensities `p_l = 1 / (1 + C·e^{−A·ln(N_l + B)})` with
/// `C = (ln N − 1)·(B + 1)^A`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropensityModel {
    pub a: f64,
    pub b: f64,
    pub num_points: usize,
    propensities: Vec<f64>,
}

impl PropensityModel {
    pub const DEFAULT_A: f64 = 0.55;
    pub const DEFAULT_B: f64 = 1.5;

    pub fn new(label_counts: &[usize], num_points: usize, a: f64, b: f64) -> Result<Self> {
        if num_points == 0 {
            return Err(Error::invalid("propensities need at least one training point"));
        }
        let c = ((num_points as f64).ln() - 1.0) * (b + 1.0).powf(a);
        let propensities = label_counts
            .iter()
            .map(|&n| {
                let p = 1.0 / (1.0 + c * (-a * (n as f64 + b).ln()).exp());
                p.clamp(f64::MIN_POSITIVE, 1.0)
            })
            .collect();
        Ok(PropensityModel {
            a,
            b,
            num_points,
            propensities,
        })
    }

    pub fn from_dataset(train: &RelevanceDataset, a: f64, b: f64) -> Result<Self> {
        Self::new(&train.label_counts(), train.num_points(), a, b)
    }

    /// Propensity of `label`; 1 for labels the model has never seen.
    pub fn get(&self, label: u32) -> f64 {
        self.propensities.get(label as usize).copied().unwrap_or(1.0)
    }

    pub fn len(&self) -> usize {
        self.propensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.propensities.is_empty()
    }
}

/// Achieved and ideal propensity-weighted gains at `k` for one point:
/// `Σ_{l∈S(ŷ,k)} y_l/p_l` and the best possible such sum.
pub fn psp_gains(
    y: &SparseVector,
    yhat: &[(u32, f64)],
    k: usize,
    p: &PropensityModel,
) -> Result<(f64, f64)> {
    check_k(k)?;
    let achieved = top_k_entries(yhat, k)
        .iter()
        .map(|&(l, _)| y.get(l) / p.get(l))
        .sum();
    let weighted: Vec<f64> = y.iter().map(|(l, v)| v / p.get(l)).collect();
    let ideal = largest(weighted, k).iter().sum();
    Ok((achieved, ideal))
}

/// Propensity-scored precision of one point, as a fraction of its ideal.
pub fn psp_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize, p: &PropensityModel) -> Result<f64> {
    let (a, i) = psp_gains(y, yhat, k, p)?;
    Ok(if i > 0.0 { a / i } else { 0.0 })
}

fn dcg(gains: impl Iterator<Item = f64>) -> f64 {
    gains
        .enumerate()
        .map(|(r, g)| g / ((r + 2) as f64).log2())
        .sum()
}

/// nDCG@k; `None` when the point has no relevant label.
pub fn ndcg_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<Option<f64>> {
    check_k(k)?;
    let mut ideal = largest(y.values().to_vec(), k);
    ideal.sort_unstable_by(|a, b| b.total_cmp(a));
    let idcg = dcg(ideal.into_iter());
    if idcg <= 0.0 {
        return Ok(None);
    }
    let got = dcg(top_k_entries(yhat, k).iter().map(|&(l, _)| y.get(l)));
    Ok(Some(got / idcg))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauValue {
    pub value: f64,
    /// False when fewer than two items were compared; `value` is then 0.
    pub defined: bool,
}

/// Kendall's tau over `S(y, k) ∪ S(ŷ, k)`, where `S(y, k)` takes the top-`k`
/// relevant labels. Pairs tied in either order count as neither concordant
/// nor discordant.
pub fn tau_at_k(y: &SparseVector, yhat: &[(u32, f64)], k: usize) -> Result<TauValue> {
    check_k(k)?;
    let truth: Vec<(u32, f64)> = y.iter().filter(|e| e.1 > 0.0).collect();
    let mut items: Vec<u32> = top_k_entries(&truth, k).iter().map(|e| e.0).collect();
    items.extend(top_k_entries(yhat, k).iter().map(|e| e.0));
    items.sort_unstable();
    items.dedup();
    let n = items.len();
    if n < 2 {
        return Ok(TauValue {
            value: 0.0,
            defined: false,
        });
    }
    let scores: HashMap<u32, f64> = yhat.iter().copied().collect();
    let pairs: Vec<(f64, f64)> = items
        .iter()
        .map(|l| (y.get(*l), scores.get(l).copied().unwrap_or(0.0)))
        .collect();
    let mut net = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let a = (pairs[i].0 - pairs[j].0).partial_cmp(&0.0);
            let b = (pairs[i].1 - pairs[j].1).partial_cmp(&0.0);
            use std::cmp::Ordering::*;
            match (a, b) {
                (Some(Greater), Some(Greater)) | (Some(Less), Some(Less)) => net += 1,
                (Some(Greater), Some(Less)) | (Some(Less), Some(Greater)) => net -= 1,
                _ => {}
            }
        }
    }
    Ok(TauValue {
        value: net as f64 / (n * (n - 1) / 2) as f64,
        defined: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Micro-averaged precision/recall under a global score threshold.
///
/// At threshold `t` every prediction with score `≥ t` is kept; precision is
/// the mean true relevance of the kept entries and recall their share of the
/// total true relevance. Thresholds keeping nothing yield no point. With no
/// explicit thresholds every distinct predicted score is used, giving points
/// in increasing recall.
pub fn auprc_curve(
    truth: &[SparseVector],
    preds: &PredictionFile,
    thresholds: Option<&[f64]>,
) -> Result<Vec<PrPoint>> {
    if truth.len() != preds.num_rows {
        return Err(Error::DimensionMismatch {
            left: truth.len(),
            right: preds.num_rows,
        });
    }
    let total: f64 = truth.iter().map(|r| r.values().iter().sum::<f64>()).sum();
    let mut entries: Vec<(f64, f64)> = preds
        .rows
        .iter()
        .zip(truth)
        .flat_map(|(row, y)| row.iter().map(move |&(l, s)| (s, y.get(l))))
        .collect();
    entries.sort_unstable_by(|a, b| b.0.total_cmp(&a.0));

    let mut prefix = Vec::with_capacity(entries.len() + 1);
    prefix.push(0.0);
    for e in &entries {
        prefix.push(prefix.last().unwrap() + e.1);
    }
    let point_at = |t: f64| -> Option<PrPoint> {
        let kept = entries.partition_point(|e| e.0 >= t);
        (kept > 0).then(|| PrPoint {
            threshold: t,
            precision: prefix[kept] / kept as f64,
            recall: if total > 0.0 { prefix[kept] / total } else { 0.0 },
        })
    };
    let curve = match thresholds {
        Some(ts) => ts.iter().filter_map(|&t| point_at(t)).collect(),
        None => {
            let mut ts: Vec<f64> = entries.iter().map(|e| e.0).collect();
            ts.dedup();
            ts.into_iter().filter_map(point_at).collect()
        }
    };
    Ok(curve)
}

/// Area under a precision/recall curve by the trapezoid rule over recall,
/// anchored at recall 0 with the first point's precision.
pub fn auprc(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(&(_, first)) = pts.first() else {
        return 0.0;
    };
    let mut area = 0.0;
    let mut prev = (0.0, first);
    for p in pts {
        area += (p.0 - prev.0) * (p.1 + prev.1) / 2.0;
        prev = p;
    }
    area
}

/// Replaces every score with a tiny value that keeps each row's ranking but
/// carries no cross-row calibration: the entry at rank `r` of an `n`-entry row
/// scores `epsilon·(n − r)/n`.
pub fn zero_corruption(preds: &PredictionFile, epsilon: f64) -> PredictionFile {
    let rows = preds
        .rows
        .iter()
        .map(|row| {
            let mut sorted = row.clone();
            sorted.sort_unstable_by(rank_order);
            let n = sorted.len() as f64;
            sorted
                .iter()
                .enumerate()
                .map(|(r, &(l, _))| (l, epsilon * (n - r as f64) / n))
                .collect()
        })
        .collect();
    PredictionFile::new(preds.num_cols, rows)
}

/// Relevance rows of the transposed problem: one row per label over `num_points` columns.
pub fn transpose_relevances(rows: &[SparseVector], num_labels: usize) -> Vec<SparseVector> {
    let mut cols: Vec<Vec<(u32, f64)>> = vec![Vec::new(); num_labels];
    for (i, row) in rows.iter().enumerate() {
        for (l, v) in row.iter() {
            cols[l as usize].push((i as u32, v));
        }
    }
    cols.into_iter()
        .map(|c| SparseVector::from_pairs(rows.len(), c).expect("indices are increasing"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Metric {
    Xmad,
    Xrmse,
    Mad,
    Rmse,
    Wp,
    WpRegret,
    Psp,
    Ndcg,
    Tau,
    Auprc,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::Xmad,
        Metric::Xrmse,
        Metric::Mad,
        Metric::Rmse,
        Metric::Wp,
        Metric::WpRegret,
        Metric::Psp,
        Metric::Ndcg,
        Metric::Tau,
        Metric::Auprc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Xmad => "XMAD",
            Metric::Xrmse => "XRMSE",
            Metric::Mad => "MAD",
            Metric::Rmse => "RMSE",
            Metric::Wp => "WP",
            Metric::WpRegret => "WP-regret",
            Metric::Psp => "PSP",
            Metric::Ndcg => "nDCG",
            Metric::Tau => "Tau",
            Metric::Auprc => "AUPRC",
        }
    }

    /// Reported as a percentage.
    pub fn is_percent(self) -> bool {
        matches!(self, Metric::Wp | Metric::Psp | Metric::Ndcg | Metric::Tau)
    }

    /// Whether the cut-off `k` affects the value.
    pub fn uses_k(self) -> bool {
        !matches!(self, Metric::Mad | Metric::Rmse | Metric::Auprc)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Metric::ALL
            .into_iter()
            .find(|m| {
                m.name()
                    .chars()
                    .filter(|c| c.is_ascii_alphanumeric())
                    .collect::<String>()
                    .eq_ignore_ascii_case(&key)
            })
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub metric: Metric,
    pub k: usize,
    pub orientation: Orientation,
    pub value: f64,
}

impl MetricValue {
    pub fn label(&self) -> String {
        if self.metric.uses_k() {
            format!("{}-{}@{}", self.metric, self.orientation.suffix(), self.k)
        } else {
            format!("{}-{}", self.metric, self.orientation.suffix())
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub values: Vec<MetricValue>,
    /// Free-form remarks, e.g. how many rows had an undefined Tau.
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, metric: Metric, k: usize) -> Option<f64> {
        self.values
            .iter()
            .find(|v| v.metric == metric && (v.k == k || !metric.uses_k()))
            .map(|v| v.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,orientation,value\n");
        for v in &self.values {
            out.push_str(&format!("{},{},{},{:.6}\n", v.metric, v.k, v.orientation, v.value));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let labels: Vec<String> = self.values.iter().map(MetricValue::label).collect();
        let width = labels.iter().map(String::len).max().unwrap_or(0).max(6);
        let mut out = format!("{:<width$}  {:>12}\n", "metric", "value");
        for (label, v) in labels.iter().zip(&self.values) {
            let unit = if v.metric.is_percent() { " %" } else { "" };
            out.push_str(&format!("{label:<width$}  {:>12.4}{unit}\n", v.value));
        }
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        out
    }
}

/// Truth and predictions aligned row by row in one orientation.
pub struct Evaluation<'a> {
    rows: Vec<SparseVector>,
    preds: &'a PredictionFile,
    orientation: Orientation,
    propensity: Option<&'a PropensityModel>,
}

impl<'a> Evaluation<'a> {
    /// `test_relevances` are the per-point truth rows over `num_labels`
    /// labels; they are transposed for a labelwise prediction file.
    pub fn new(
        test_relevances: &[SparseVector],
        num_labels: usize,
        preds: &'a PredictionFile,
        orientation: Orientation,
        propensity: Option<&'a PropensityModel>,
    ) -> Result<Self> {
        let (rows, cols) = match orientation {
            Orientation::Pointwise => (test_relevances.len(), num_labels),
            Orientation::Labelwise => (num_labels, test_relevances.len()),
        };
        if preds.num_rows != rows || preds.rows.len() != rows {
            return Err(Error::DimensionMismatch {
                left: preds.num_rows,
                right: rows,
            });
        }
        if preds.num_cols != cols {
            return Err(Error::DimensionMismatch {
                left: preds.num_cols,
                right: cols,
            });
        }
        if let Some(p) = propensity {
            if p.len() != num_labels {
                return Err(Error::DimensionMismatch {
                    left: p.len(),
                    right: num_labels,
                });
            }
        }
        let rows = match orientation {
            Orientation::Pointwise => test_relevances.to_vec(),
            Orientation::Labelwise => transpose_relevances(test_relevances, num_labels),
        };
        Ok(Evaluation {
            rows,
            preds,
            orientation,
            propensity,
        })
    }

    pub fn rows(&self) -> &[SparseVector] {
        &self.rows
    }

    fn pairs(&self) -> impl Iterator<Item = (usize, &SparseVector, &[(u32, f64)])> {
        self.rows
            .iter()
            .zip(&self.preds.rows)
            .enumerate()
            .map(|(i, (y, p))| (i, y, p.as_slice()))
    }

    /// Rows entering an average: all rows pointwise, rows with a positive
    /// entry labelwise.
    fn counted(&self, y: &SparseVector) -> bool {
        self.orientation == Orientation::Pointwise || y.values().iter().any(|&v| v > 0.0)
    }

    fn mean(&self, f: impl Fn(&SparseVector, &[(u32, f64)]) -> Result<f64>) -> Result<f64> {
        let (mut sum, mut n) = (0.0, 0usize);
        for (_, y, p) in self.pairs() {
            if self.counted(y) {
                sum += f(y, p)?;
                n += 1;
            }
        }
        Ok(if n == 0 { 0.0 } else { sum / n as f64 })
    }

    /// One metric at one cut-off; percentages are scaled by 100.
    pub fn compute(&self, metric: Metric, k: usize, notes: &mut Vec<String>) -> Result<f64> {
        check_k(k)?;
        let v = match metric {
            Metric::Xmad => self.mean(|y, p| xmad_at_k(y, p, k))?,
            Metric::Xrmse => self.mean(|y, p| xrmse_at_k(y, p, k))?,
            Metric::Mad => self.mean(|y, p| Ok(mad(y, p)))?,
            Metric::Rmse => self.mean(|y, p| Ok(rmse(y, p)))?,
            Metric::Wp => self.mean(|y, p| wp_at_k(y, p, k))?,
            Metric::WpRegret => self.mean(|y, p| wp_regret_at_k(y, p, k))?,
            Metric::Psp => self.psp(k)?,
            Metric::Ndcg => {
                let (mut sum, mut n) = (0.0, 0usize);
                for (_, y, p) in self.pairs() {
                    if let Some(v) = ndcg_at_k(y, p, k)? {
                        sum += v;
                        n += 1;
                    }
                }
                if n == 0 { 0.0 } else { sum / n as f64 }
            }
            Metric::Tau => {
                let mut undefined = 0;
                let v = self.mean(|y, p| Ok(tau_at_k(y, p, k)?.value))?;
                for (_, y, p) in self.pairs() {
                    if self.counted(y) && !tau_at_k(y, p, k)?.defined {
                        undefined += 1;
                    }
                }
                if undefined > 0 {
                    notes.push(format!(
                        "Tau-{}@{k}: {undefined} rows compared fewer than two items and scored 0",
                        self.orientation.suffix()
                    ));
                }
                v
            }
            Metric::Auprc => auprc(&auprc_curve(&self.rows, self.preds, None)?),
        };
        Ok(if metric.is_percent() { 100.0 * v } else { v })
    }

    fn psp(&self, k: usize) -> Result<f64> {
        let prop = self.propensity.ok_or_else(|| {
            Error::invalid("PSP needs label propensities, which are estimated from training-set label counts")
        })?;
        match self.orientation {
            Orientation::Pointwise => {
                let (mut got, mut best) = (0.0, 0.0);
                for (_, y, p) in self.pairs() {
                    let (a, i) = psp_gains(y, p, k, prop)?;
                    got += a;
                    best += i;
                }
                Ok(if best > 0.0 { got / best } else { 0.0 })
            }
            // Within a label's row every entry shares one propensity, which
            // cancels in the per-row ratio.
            Orientation::Labelwise => self.mean(|y, p| {
                let ideal = ideal_wp_at_k(y, k)?;
                Ok(if ideal > 0.0 { wp_at_k(y, p, k)? / ideal } else { 0.0 })
            }),
        }
    }

    /// Rows violating `0 ≤ WP-regret@k ≤ 2·XMAD@2k`, with the number checked.
    pub fn lemma1_violations(&self, k: usize) -> Result<(usize, usize)> {
        let (mut checked, mut bad) = (0, 0);
        for (_, y, p) in self.pairs() {
            checked += 1;
            let r = wp_regret_at_k(y, p, k)?;
            let bound = 2.0 * xmad_at_k(y, p, 2 * k)?;
            if r < -1e-12 || r > bound + 1e-12 {
                bad += 1;
            }
        }
        Ok((checked, bad))
    }

    pub fn report(&self, metrics: &[Metric], ks: &[usize]) -> Result<MetricReport> {
        let mut report = MetricReport::default();
        for &metric in metrics {
            let cutoffs: &[usize] = if metric.uses_k() { ks } else { &ks[..ks.len().min(1)] };
            for &k in cutoffs {
                let value = self.compute(metric, k, &mut report.notes)?;
                report.values.push(MetricValue {
                    metric,
                    k,
                    orientation: self.orientation,
                    value,
                });
            }
        }
        Ok(report)
    }
}
