//! Evaluation statistics: ROC/AUROC, operating-point thresholds, subgroup
//! error rates, and the KS/ECE/Brier calibration errors with their
//! per-subgroup deviation summaries.
//!
//! Everything here is a pure function over a [`LabeledConfidences`] batch.
//! The same container carries either calibrated confidences or raw decision
//! scores; only the calibration errors (KS, ECE, Brier) insist on `[0, 1]`
//! inputs, the ROC family works on any finite values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SubgroupKey;
use crate::error::{Error, Result};

/// Default bin count for the expected calibration error.
pub const DEFAULT_ECE_BINS: usize = 15;

/// A batch of per-pair values with genuine/imposter labels and (optionally)
/// subgroup keys.
#[derive(Debug, Clone)]
pub struct LabeledConfidences {
    pub values: Vec<f64>,
    pub labels: Vec<bool>,
    /// Either empty (no subgroup information) or aligned with `values`.
    pub subgroups: Vec<SubgroupKey>,
}

impl LabeledConfidences {
    pub fn new(values: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        Self::with_subgroups(values, labels, Vec::new())
    }

    pub fn with_subgroups(
        values: Vec<f64>,
        labels: Vec<bool>,
        subgroups: Vec<SubgroupKey>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Metric("empty value batch".into()));
        }
        if values.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} values vs {} labels",
                values.len(),
                labels.len()
            )));
        }
        if !subgroups.is_empty() && subgroups.len() != values.len() {
            return Err(Error::Metric(format!(
                "{} values vs {} subgroup keys",
                values.len(),
                subgroups.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Metric(format!("non-finite value {v} in batch")));
        }
        Ok(LabeledConfidences {
            values,
            labels,
            subgroups,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Distinct named subgroups present, in sorted order. Intergroup pairs
    /// carry no name and do not appear.
    pub fn named_subgroups(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .subgroups
            .iter()
            .filter_map(|k| k.name().map(str::to_string))
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// The sub-batch belonging to one named subgroup, or `None` when that
    /// subgroup has no pairs here.
    pub fn subset_named(&self, name: &str) -> Option<LabeledConfidences> {
        if self.subgroups.is_empty() {
            return None;
        }
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.subgroups[i].name() == Some(name))
            .collect();
        if idx.is_empty() {
            return None;
        }
        Some(LabeledConfidences {
            values: idx.iter().map(|&i| self.values[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            subgroups: idx.iter().map(|&i| self.subgroups[i].clone()).collect(),
        })
    }

    fn class_values(&self, genuine: bool) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.labels)
            .filter(|(_, &y)| y == genuine)
            .map(|(&v, _)| v)
            .collect()
    }

    fn require_unit_interval(&self, what: &str) -> Result<()> {
        if let Some(v) = self.values.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Metric(format!(
                "{what} requires confidences in [0,1], got {v}"
            )));
        }
        Ok(())
    }
}

/// Which error rate [`subgroup_rates`] reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateKind {
    Fpr,
    Fnr,
}

/// Mean, average/maximum absolute deviation, and population standard
/// deviation of a per-subgroup statistic about its mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationSummary {
    pub mean: f64,
    pub aad: f64,
    pub mad: f64,
    pub std: f64,
}

/// Area under the ROC curve via midranks (Mann–Whitney): the fraction of
/// (genuine, imposter) pairs ranked correctly, ties counting one half.
pub fn auroc(data: &LabeledConfidences) -> Result<f64> {
    let n = data.len();
    let n_pos = data.labels.iter().filter(|&&y| y).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("auroc requires both classes".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| data.values[i].total_cmp(&data.values[j]));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && data.values[order[j]] == data.values[order[i]] {
            j += 1;
        }
        // Tied run occupies ranks i+1..=j; everyone gets the average.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if data.labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Smallest observed value `t` whose empirical false positive rate
/// (fraction of imposters `≥ t`) is at or below `target_fpr`; `+∞` when no
/// observed value qualifies (the accept-none operating point).
pub fn threshold_at_fpr(data: &LabeledConfidences, target_fpr: f64) -> Result<f64> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::Structural(format!(
            "target FPR {target_fpr} outside (0,1)"
        )));
    }
    let mut imp = data.class_values(false);
    if imp.is_empty() {
        return Err(Error::Metric(
            "threshold_at_fpr requires at least one imposter".into(),
        ));
    }
    imp.sort_by(f64::total_cmp);
    let n_imp = imp.len() as f64;

    let mut candidates = data.values.clone();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    for &t in &candidates {
        let ge = imp.len() - imp.partition_point(|&v| v < t);
        if ge as f64 / n_imp <= target_fpr {
            return Ok(t);
        }
    }
    Ok(f64::INFINITY)
}

/// Empirical TPR at the [`threshold_at_fpr`] operating point; 0 at the `+∞`
/// sentinel (nothing is accepted).
pub fn tpr_at_fpr(data: &LabeledConfidences, target_fpr: f64) -> Result<f64> {
    let gen = data.class_values(true);
    if gen.is_empty() {
        return Err(Error::Metric(
            "tpr_at_fpr requires at least one genuine pair".into(),
        ));
    }
    let t = threshold_at_fpr(data, target_fpr)?;
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok(gen.iter().filter(|&&v| v >= t).count() as f64 / gen.len() as f64)
}

/// Per-subgroup FPR or FNR at a shared threshold. Only named subgroups
/// appear; a subgroup with no relevant-class pairs is absent from the map
/// rather than reported as zero.
pub fn subgroup_rates(
    data: &LabeledConfidences,
    threshold: f64,
    kind: RateKind,
) -> BTreeMap<String, f64> {
    let mut tallies: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for i in 0..data.subgroups.len() {
        let Some(g) = data.subgroups[i].name() else {
            continue;
        };
        let relevant = match kind {
            RateKind::Fpr => !data.labels[i],
            RateKind::Fnr => data.labels[i],
        };
        if !relevant {
            continue;
        }
        let hit = match kind {
            RateKind::Fpr => data.values[i] >= threshold,
            RateKind::Fnr => data.values[i] < threshold,
        };
        let e = tallies.entry(g).or_insert((0, 0));
        e.0 += 1;
        if hit {
            e.1 += 1;
        }
    }
    tallies
        .into_iter()
        .map(|(g, (n, h))| (g.to_string(), h as f64 / n as f64))
        .collect()
}

/// KS calibration error: sort ascending by confidence (stable), accumulate
/// label mass and confidence mass, return the largest absolute gap.
pub fn ks_error(data: &LabeledConfidences) -> Result<f64> {
    data.require_unit_interval("ks_error")?;
    let n = data.len() as f64;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&i, &j| data.values[i].total_cmp(&data.values[j]));

    let mut h = 0.0;
    let mut h_tilde = 0.0;
    let mut max_gap = 0.0f64;
    for &i in &order {
        if data.labels[i] {
            h += 1.0 / n;
        }
        h_tilde += data.values[i] / n;
        max_gap = max_gap.max((h - h_tilde).abs());
    }
    Ok(max_gap)
}

/// Expected calibration error over `bins` equal-width confidence bins;
/// empty bins contribute nothing.
pub fn ece(data: &LabeledConfidences, bins: usize) -> Result<f64> {
    if bins < 1 {
        return Err(Error::Structural("ece: bin count must be >= 1".into()));
    }
    data.require_unit_interval("ece")?;
    let mut count = vec![0u64; bins];
    let mut conf_sum = vec![0.0f64; bins];
    let mut pos = vec![0u64; bins];
    for (&c, &y) in data.values.iter().zip(&data.labels) {
        let b = ((c * bins as f64).floor() as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += c;
        if y {
            pos[b] += 1;
        }
    }
    let n = data.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let acc = pos[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n) * (acc - conf).abs();
    }
    Ok(total)
}

/// Brier score in the label form: mean of `(y − c)²`.
pub fn brier(data: &LabeledConfidences) -> Result<f64> {
    data.require_unit_interval("brier")?;
    let n = data.len() as f64;
    let sum: f64 = data
        .values
        .iter()
        .zip(&data.labels)
        .map(|(&c, &y)| {
            let yf = if y { 1.0 } else { 0.0 };
            (yf - c) * (yf - c)
        })
        .sum();
    Ok(sum / n)
}

/// Brier score in the prediction-correctness form: `y` is replaced by the
/// indicator that thresholding `c` at `threshold` decides correctly.
pub fn brier_correctness(data: &LabeledConfidences, threshold: f64) -> Result<f64> {
    data.require_unit_interval("brier")?;
    let n = data.len() as f64;
    let sum: f64 = data
        .values
        .iter()
        .zip(&data.labels)
        .map(|(&c, &y)| {
            let correct = if (c >= threshold) == y { 1.0 } else { 0.0 };
            (correct - c) * (correct - c)
        })
        .sum();
    Ok(sum / n)
}

/// Deviation summary of a per-subgroup statistic about its mean.
pub fn deviation_summary(values: &[f64]) -> Result<DeviationSummary> {
    if values.is_empty() {
        return Err(Error::Metric("deviation_summary of an empty set".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut aad = 0.0;
    let mut mad = 0.0f64;
    let mut var = 0.0;
    for &v in values {
        let d = (v - mean).abs();
        aad += d / n;
        mad = mad.max(d);
        var += d * d / n;
    }
    Ok(DeviationSummary {
        mean,
        aad,
        mad,
        std: var.sqrt(),
    })
}

/// Mean and sample standard deviation (`n−1` denominator; zero when fewer
/// than two values) — the cross-fold aggregation used in reports.
pub fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}
