//! Leave-one-out cross-validation driver.
//!
//! For every fold f the harness fits each requested method on the remaining
//! folds, derives decision thresholds for each target FPR from the
//! calibration folds' outputs (never from fold f), evaluates fold f, and
//! finally aggregates per-fold metrics into cross-fold means with sample
//! standard deviations. Nothing fitted ever sees a test pair: models refuse
//! evaluation on their own calibration folds except through the dedicated
//! threshold-setting path.
//!
//! Cluster-based methods get a small retry ladder on fit failure (reseed,
//! then halve K); a fold that still fails is skipped for that method and
//! recorded in the report's error list.

use std::collections::{BTreeMap, BTreeSet};

use crate::calib::Calibrator;
use crate::data::{Dataset, SubgroupKey};
use crate::error::{Error, Result};
use crate::methods::{fit_method, FitOptions, MethodKind, MethodModel};
use crate::metrics::{
    auroc, brier, deviation_summary, ece, ks_error, mean_and_sample_std, subgroup_rates,
    threshold_at_fpr, LabeledConfidences, RateKind, DEFAULT_ECE_BINS,
};
use crate::report::{Aggregate, CurvePoint, FoldReport, MethodReport, MetricsReport, RunSummary};

/// Number of thresholds in the emitted FPR curve.
pub const CURVE_POINTS: usize = 201;

/// Everything a cross-validation run needs beyond the dataset.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub methods: Vec<MethodKind>,
    pub calibrator: Calibrator,
    /// K for the cluster-based methods.
    pub clusters: usize,
    pub target_fprs: Vec<f64>,
    pub attributes: Vec<String>,
    /// Expected fold count; must match the dataset.
    pub folds: usize,
    pub seed: u64,
    /// Fit a beta map on fsn/gst calibration outputs so their KS/ECE/Brier
    /// can be reported alongside the probability methods.
    pub post_calibrate_scores: bool,
}

impl RunConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        if self.target_fprs.is_empty() {
            return Err(Error::Config("at least one target FPR is required".into()));
        }
        for &t in &self.target_fprs {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!(
                    "target FPR {t} outside the open interval (0,1)"
                )));
            }
        }
        if self.folds < 2 {
            return Err(Error::Config(
                "cross-validation needs at least 2 folds".into(),
            ));
        }
        if ds.fold_count != self.folds {
            return Err(Error::Config(format!(
                "dataset has {} folds but the run is configured for {}",
                ds.fold_count, self.folds
            )));
        }
        let clustered = self
            .methods
            .iter()
            .any(|m| matches!(m, MethodKind::Faircal | MethodKind::Fsn));
        if clustered && self.clusters == 0 {
            return Err(Error::Config("cluster count must be >= 1".into()));
        }
        for m in &self.methods {
            if m.needs_attributes() && self.attributes.is_empty() {
                return Err(Error::Config(format!(
                    "{m} requires sensitive attributes (--attributes)"
                )));
            }
        }
        ds.resolve_attributes(&self.attributes)?;
        Ok(())
    }

    /// Target FPRs in evaluation order: ascending, deduplicated. The
    /// smallest one anchors fsn/gst and the single-model metric families.
    fn sorted_fprs(&self) -> Vec<f64> {
        let mut fprs = self.target_fprs.clone();
        fprs.sort_by(f64::total_cmp);
        fprs.dedup();
        fprs
    }
}

/// Runs the full protocol and assembles the report.
pub fn run_cross_validation(ds: &Dataset, cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate(ds)?;
    let attr_indices = ds.resolve_attributes(&cfg.attributes)?;
    let fprs = cfg.sorted_fprs();

    let mut methods = BTreeMap::new();
    for &kind in &cfg.methods {
        let mut mrep = MethodReport::default();
        if kind.produces_scores() && fprs.len() > 1 {
            // The score-normalisation methods are threshold-specific, so a
            // multi-FPR run pays one fit per target.
            mrep.warnings.push(format!(
                "{kind} is refit once per target FPR ({} fits per fold)",
                fprs.len()
            ));
        }
        let mut pool_values: Vec<f64> = Vec::new();
        let mut pool_labels: Vec<bool> = Vec::new();
        let mut pool_groups: Vec<SubgroupKey> = Vec::new();
        for fold in 0..cfg.folds {
            match run_fold(ds, cfg, kind, fold, &fprs, &attr_indices) {
                Ok(out) => {
                    mrep.warnings.extend(out.warnings);
                    mrep.folds.push(out.report);
                    pool_values.extend(out.values);
                    pool_labels.extend(out.labels);
                    pool_groups.extend(out.groups);
                }
                Err(e @ (Error::Fit(_) | Error::Convergence { .. })) => {
                    mrep.errors.push(format!("fold {fold}: {e}"));
                }
                Err(e) => return Err(e),
            }
        }
        aggregate_folds(&mut mrep);
        mrep.fpr_curve = build_curve(&pool_values, &pool_labels, &pool_groups);
        methods.insert(kind.to_string(), mrep);
    }

    Ok(MetricsReport {
        config: RunSummary {
            methods: cfg.methods.iter().map(|m| m.to_string()).collect(),
            calibrator: cfg.calibrator.to_string(),
            clusters: cfg.clusters,
            target_fprs: fprs,
            attributes: cfg.attributes.clone(),
            folds: cfg.folds,
            seed: cfg.seed,
            post_calibrate_scores: cfg.post_calibrate_scores,
        },
        methods,
    })
}

struct FoldOutcome {
    report: FoldReport,
    warnings: Vec<String>,
    /// Native test outputs pooled into the method's FPR curve.
    values: Vec<f64>,
    labels: Vec<bool>,
    groups: Vec<SubgroupKey>,
}

fn record(
    metrics: &mut BTreeMap<String, f64>,
    warnings: &mut Vec<String>,
    fold: usize,
    key: String,
    v: f64,
) {
    if v.is_finite() {
        metrics.insert(key, v);
    } else {
        warnings.push(format!("fold {fold}: {key} is not finite; cell omitted"));
    }
}

fn run_fold(
    ds: &Dataset,
    cfg: &RunConfig,
    kind: MethodKind,
    fold: usize,
    fprs: &[f64],
    attr_indices: &[usize],
) -> Result<FoldOutcome> {
    let eval: BTreeSet<usize> = std::iter::once(fold).collect();
    let cal: BTreeSet<usize> = (0..cfg.folds).filter(|&f| f != fold).collect();
    let mut warnings = Vec::new();
    let mut metrics: BTreeMap<String, f64> = BTreeMap::new();

    let (models, retries, clusters_used) = fit_fold_models(kind, ds, &cal, cfg, fprs)?;
    let primary = &models[0];

    let test_idx = ds.pairs_in_folds(&eval);
    let test_labels: Vec<bool> = test_idx.iter().map(|&i| ds.pairs[i].label).collect();
    let test_groups: Vec<SubgroupKey> = if attr_indices.is_empty() {
        Vec::new()
    } else {
        test_idx
            .iter()
            .map(|&i| ds.subgroup_key(&ds.pairs[i], attr_indices))
            .collect()
    };
    let cal_idx = ds.pairs_in_folds(&cal);
    let cal_labels: Vec<bool> = cal_idx.iter().map(|&i| ds.pairs[i].label).collect();

    let primary_test = primary.confidences_for(ds, &eval, &cfg.attributes)?;
    let primary_cal = primary.calibration_outputs(ds, &cfg.attributes)?;
    if primary_test.fallbacks > 0 {
        warnings.push(format!(
            "fold {fold}: {} pairs from subgroups unseen at fit time",
            primary_test.fallbacks
        ));
    }

    // Accuracy on the method's native outputs.
    let native = LabeledConfidences::with_subgroups(
        primary_test.values.clone(),
        test_labels.clone(),
        test_groups.clone(),
    )?;
    match auroc(&native) {
        Ok(v) => record(&mut metrics, &mut warnings, fold, "auroc".into(), v),
        Err(e) => warnings.push(format!("fold {fold}: auroc unavailable: {e}")),
    }

    // Native per-target outputs; the score methods carry one model per
    // target, everything else reuses the primary outputs.
    let mut test_by_target: Vec<Vec<f64>> = Vec::new();
    let mut cal_by_target: Vec<Vec<f64>> = Vec::new();
    if kind.produces_scores() {
        for (i, m) in models.iter().enumerate() {
            if i == 0 {
                test_by_target.push(primary_test.values.clone());
                cal_by_target.push(primary_cal.values.clone());
            } else {
                test_by_target.push(m.confidences_for(ds, &eval, &cfg.attributes)?.values);
                cal_by_target.push(m.calibration_outputs(ds, &cfg.attributes)?.values);
            }
        }
    }

    for (i, &tau) in fprs.iter().enumerate() {
        let (test_vals, cal_vals): (&[f64], &[f64]) = if kind.produces_scores() {
            (&test_by_target[i], &cal_by_target[i])
        } else {
            (&primary_test.values, &primary_cal.values)
        };
        let cal_data = LabeledConfidences::new(cal_vals.to_vec(), cal_labels.clone())?;
        let t = threshold_at_fpr(&cal_data, tau)?;
        if t.is_finite() {
            record(
                &mut metrics,
                &mut warnings,
                fold,
                format!("threshold@{tau}"),
                t,
            );
        } else {
            warnings.push(format!(
                "fold {fold}: no calibration threshold reaches FPR {tau}"
            ));
        }

        let genuine_total = test_labels.iter().filter(|&&y| y).count();
        if genuine_total > 0 {
            let hits = test_vals
                .iter()
                .zip(&test_labels)
                .filter(|&(v, &y)| y && *v >= t)
                .count();
            record(
                &mut metrics,
                &mut warnings,
                fold,
                format!("tpr@{tau}"),
                hits as f64 / genuine_total as f64,
            );
        } else {
            warnings.push(format!("fold {fold}: no genuine pairs; tpr@{tau} absent"));
        }

        let test_data = LabeledConfidences::with_subgroups(
            test_vals.to_vec(),
            test_labels.clone(),
            test_groups.clone(),
        )?;
        for (rate_kind, prefix) in [(RateKind::Fpr, "fpr"), (RateKind::Fnr, "fnr")] {
            let rates = subgroup_rates(&test_data, t, rate_kind);
            for g in test_data.named_subgroups() {
                if !rates.contains_key(&g) {
                    warnings.push(format!(
                        "fold {fold}: subgroup {g} has no pairs of the relevant class; \
                         {prefix}@{tau} cell absent"
                    ));
                }
            }
            for (g, r) in &rates {
                record(
                    &mut metrics,
                    &mut warnings,
                    fold,
                    format!("{prefix}@{tau}:{g}"),
                    *r,
                );
            }
            if !rates.is_empty() {
                let vals: Vec<f64> = rates.values().copied().collect();
                let dev = deviation_summary(&vals)?;
                for (name, v) in [
                    ("mean", dev.mean),
                    ("aad", dev.aad),
                    ("mad", dev.mad),
                    ("std", dev.std),
                ] {
                    record(
                        &mut metrics,
                        &mut warnings,
                        fold,
                        format!("{prefix}_dev_{name}@{tau}"),
                        v,
                    );
                }
            }
        }
    }

    // Calibration-error family on probability outputs. The score methods
    // only join when a post-hoc beta map is requested.
    let prob_values: Option<Vec<f64>> = if !kind.produces_scores() {
        Some(primary_test.values.clone())
    } else if cfg.post_calibrate_scores {
        match Calibrator::Beta.fit(&primary_cal.values, &cal_labels) {
            Ok(map) => Some(primary_test.values.iter().map(|&s| map.apply(s)).collect()),
            Err(e) => {
                warnings.push(format!("fold {fold}: post-calibration failed: {e}"));
                None
            }
        }
    } else {
        None
    };
    if let Some(values) = prob_values {
        let data =
            LabeledConfidences::with_subgroups(values, test_labels.clone(), test_groups.clone())?;
        record(
            &mut metrics,
            &mut warnings,
            fold,
            "ks".into(),
            ks_error(&data)?,
        );
        record(
            &mut metrics,
            &mut warnings,
            fold,
            "ece".into(),
            ece(&data, DEFAULT_ECE_BINS)?,
        );
        record(
            &mut metrics,
            &mut warnings,
            fold,
            "brier".into(),
            brier(&data)?,
        );
        let mut sub_ks = Vec::new();
        for g in data.named_subgroups() {
            let sub = data.subset_named(&g).expect("name came from the data");
            let k = ks_error(&sub)?;
            sub_ks.push(k);
            record(&mut metrics, &mut warnings, fold, format!("ks:{g}"), k);
            record(
                &mut metrics,
                &mut warnings,
                fold,
                format!("ece:{g}"),
                ece(&sub, DEFAULT_ECE_BINS)?,
            );
            record(
                &mut metrics,
                &mut warnings,
                fold,
                format!("brier:{g}"),
                brier(&sub)?,
            );
        }
        if !sub_ks.is_empty() {
            record(
                &mut metrics,
                &mut warnings,
                fold,
                "ks_subgroup_mean".into(),
                sub_ks.iter().sum::<f64>() / sub_ks.len() as f64,
            );
            let dev = deviation_summary(&sub_ks)?;
            for (name, v) in [
                ("mean", dev.mean),
                ("aad", dev.aad),
                ("mad", dev.mad),
                ("std", dev.std),
            ] {
                record(
                    &mut metrics,
                    &mut warnings,
                    fold,
                    format!("ks_dev_{name}"),
                    v,
                );
            }
        }
    }

    Ok(FoldOutcome {
        report: FoldReport {
            fold,
            clusters_used,
            retries,
            fallbacks: primary_test.fallbacks,
            metrics,
        },
        warnings,
        values: primary_test.values,
        labels: test_labels,
        groups: test_groups,
    })
}

/// Fits the fold's model set: one model for most methods, one per target
/// FPR for fsn/gst. Cluster methods retry on fit failure with a reseed and
/// then a halved K.
fn fit_fold_models(
    kind: MethodKind,
    ds: &Dataset,
    cal: &BTreeSet<usize>,
    cfg: &RunConfig,
    fprs: &[f64],
) -> Result<(Vec<MethodModel>, usize, Option<usize>)> {
    let retryable = matches!(kind, MethodKind::Faircal | MethodKind::Fsn);
    let half = (cfg.clusters / 2).max(1);
    let reseed = cfg.seed.wrapping_add(0x9E37_79B9);
    let attempts: Vec<(u64, usize)> = if retryable {
        vec![
            (cfg.seed, cfg.clusters),
            (reseed, cfg.clusters),
            (cfg.seed, half),
            (reseed, half),
        ]
    } else {
        vec![(cfg.seed, cfg.clusters)]
    };

    let mut last_err = None;
    for (attempt, &(seed, k)) in attempts.iter().enumerate() {
        let fit_one = |reference: Option<f64>| {
            fit_method(
                kind,
                ds,
                cal,
                &FitOptions {
                    clusters: k,
                    calibrator: cfg.calibrator,
                    reference_fpr: reference,
                    attributes: cfg.attributes.clone(),
                    seed,
                },
            )
        };
        let result: Result<Vec<MethodModel>> = if kind.produces_scores() {
            fprs.iter().map(|&r| fit_one(Some(r))).collect()
        } else {
            fit_one(None).map(|m| vec![m])
        };
        match result {
            Ok(models) => {
                let clusters_used = models[0].cluster_model().map(|cm| cm.k());
                return Ok((models, attempt, clusters_used));
            }
            Err(e @ (Error::Fit(_) | Error::Convergence { .. }))
                if attempt + 1 < attempts.len() =>
            {
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("attempt loop records an error before falling through"))
}

fn aggregate_folds(mrep: &mut MethodReport) {
    let mut keys: BTreeSet<String> = BTreeSet::new();
    for f in &mrep.folds {
        keys.extend(f.metrics.keys().cloned());
    }
    for key in keys {
        let vals: Vec<f64> = mrep
            .folds
            .iter()
            .filter_map(|f| f.metrics.get(&key).copied())
            .collect();
        let (mean, std) = mean_and_sample_std(&vals);
        mrep.aggregate.insert(
            key,
            Aggregate {
                mean,
                std,
                folds: vals.len(),
            },
        );
    }
}

/// FPR against 201 quantile thresholds of the pooled test outputs, per
/// subgroup and pooled (`__all__`).
fn build_curve(values: &[f64], labels: &[bool], groups: &[SubgroupKey]) -> Vec<CurvePoint> {
    if values.is_empty() {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut by_key: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, &v) in values.iter().enumerate() {
        if labels[i] {
            continue;
        }
        by_key.entry("__all__".to_string()).or_default().push(v);
        if let Some(SubgroupKey::Named(g)) = groups.get(i) {
            by_key.entry(g.clone()).or_default().push(v);
        }
    }
    for v in by_key.values_mut() {
        v.sort_by(f64::total_cmp);
    }

    let n = sorted.len();
    let mut points = Vec::with_capacity(CURVE_POINTS);
    for i in 0..CURVE_POINTS {
        let t = sorted[i * (n - 1) / (CURVE_POINTS - 1)];
        let mut fpr = BTreeMap::new();
        for (key, imposters) in &by_key {
            let below = imposters.partition_point(|&v| v < t);
            fpr.insert(
                key.clone(),
                (imposters.len() - below) as f64 / imposters.len() as f64,
            );
        }
        points.push(CurvePoint { threshold: t, fpr });
    }
    points
}
