//! The binding release checks: calibrator fits against exhaustive oracles,
//! metrics against brute force, method reduction identities, end-to-end bias
//! reduction on the bundled benchmark, robustness to the cluster count, the
//! FSN per-cluster FPR property, and byte-level determinism of everything
//! written to disk.
//!
//! Every check runs one at a time on a single rayon worker, so the elapsed
//! times asserted here are honest single-threaded measurements. Run with
//! `--nocapture` to see the PASS lines with the measured margins.

use std::collections::BTreeSet;
use std::sync::{Mutex, MutexGuard, Once, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use faircal_core::calib::{fit_beta, fit_binning, fit_isotonic, CalibrationMap, Calibrator};
use faircal_core::data::Dataset;
use faircal_core::exec;
use faircal_core::harness::{run_cross_validation, RunConfig};
use faircal_core::methods::{
    build_calibration_sets, fit_method, FitOptions, MethodKind, MethodModel,
};
use faircal_core::metrics::{
    auroc, brier, ece, ks_error, threshold_at_fpr, LabeledConfidences, DEFAULT_ECE_BINS,
};
use faircal_core::report::MetricsReport;
use faircal_core::synth::{generate, SubgroupSpec, SynthSpec};

// ─── shared scaffolding ─────────────────────────────────────────────────────

/// Serialises the checks and pins the worker pool to one thread before any
/// parallel code runs, so per-check timing is meaningful.
fn serial() -> MutexGuard<'static, ()> {
    static SEQ: Mutex<()> = Mutex::new(());
    static INIT: Once = Once::new();
    INIT.call_once(|| {
        exec::configure_threads(1);
    });
    SEQ.lock().unwrap_or_else(|e| e.into_inner())
}

/// The benchmark: four subgroups on the pinned noise ladder, everything else
/// at generator defaults (100 identities × 8 images per subgroup, d = 64,
/// 5 folds, seed 42).
fn benchmark_spec() -> SynthSpec {
    SynthSpec {
        subgroups: vec![
            SubgroupSpec::new("a", 0.08),
            SubgroupSpec::new("b", 0.14),
            SubgroupSpec::new("c", 0.20),
            SubgroupSpec::new("d", 0.30),
        ],
        ..SynthSpec::default()
    }
}

struct BenchmarkRun {
    elapsed: Duration,
    report: MetricsReport,
    ds: Dataset,
}

/// Generates the benchmark and cross-validates baseline + FairCal once; the
/// bias-reduction and accuracy checks share the result.
fn benchmark() -> &'static BenchmarkRun {
    static RUN: OnceLock<BenchmarkRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let ds = generate(&benchmark_spec()).expect("benchmark dataset");
        let cfg = RunConfig {
            methods: vec![MethodKind::Baseline, MethodKind::Faircal],
            calibrator: Calibrator::Beta,
            clusters: 100,
            target_fprs: vec![0.01],
            attributes: vec!["subgroup".to_string()],
            folds: 5,
            seed: 42,
            post_calibrate_scores: false,
        };
        let report = run_cross_validation(&ds, &cfg).expect("benchmark run");
        BenchmarkRun {
            elapsed: start.elapsed(),
            report,
            ds,
        }
    })
}

/// Cross-fold mean of one aggregated metric.
fn agg_mean(report: &MetricsReport, method: &str, key: &str) -> f64 {
    report
        .methods
        .get(method)
        .unwrap_or_else(|| panic!("method {method} missing from report"))
        .aggregate
        .get(key)
        .unwrap_or_else(|| panic!("{method} has no `{key}` aggregate"))
        .mean
}

/// A small 2-fold, two-subgroup dataset for identity and format checks.
fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        subgroups: vec![
            SubgroupSpec {
                identities: 20,
                images_per_identity: 6,
                ..SubgroupSpec::new("lo", 0.10)
            },
            SubgroupSpec {
                identities: 20,
                images_per_identity: 6,
                ..SubgroupSpec::new("hi", 0.30)
            },
        ],
        dim: 16,
        genuine_pairs_per_id: 6,
        imposter_pairs_per_id: 6,
        folds: 2,
        seed,
        ..SynthSpec::default()
    }
}

// ─── 1. calibrator oracles ──────────────────────────────────────────────────

/// Least-squares isotonic fit by exhaustive search over a monotone value
/// lattice: dynamic programming over distinct scores × lattice values, with
/// a prefix-minimum carrying the best cost of any lower assignment.
fn lattice_isotonic(scores: &[f64], labels: &[bool], steps: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut vals: Vec<f64> = Vec::new();
    let mut sum: Vec<f64> = Vec::new();
    let mut cnt: Vec<f64> = Vec::new();
    for &i in &order {
        let y = if labels[i] { 1.0 } else { 0.0 };
        if vals.last() == Some(&scores[i]) {
            *sum.last_mut().unwrap() += y;
            *cnt.last_mut().unwrap() += 1.0;
        } else {
            vals.push(scores[i]);
            sum.push(y);
            cnt.push(1.0);
        }
    }
    let groups = vals.len();
    let lattice: Vec<f64> = (0..steps).map(|t| t as f64 / (steps - 1) as f64).collect();

    // best[t]: cheapest assignment of the groups so far with the last one at
    // lattice[t]; choice[j][t] backtracks the previous group's index.
    let mut best = vec![0.0f64; steps];
    let mut choice: Vec<Vec<usize>> = Vec::with_capacity(groups);
    for j in 0..groups {
        let mut prefix = vec![0.0f64; steps];
        let mut arg = vec![0usize; steps];
        let (mut m, mut a) = (f64::INFINITY, 0usize);
        for (t, &b) in best.iter().enumerate() {
            if b < m {
                m = b;
                a = t;
            }
            prefix[t] = m;
            arg[t] = a;
        }
        let next: Vec<f64> = lattice
            .iter()
            .enumerate()
            .map(|(t, &v)| prefix[t] + cnt[j] * v * v - 2.0 * sum[j] * v)
            .collect();
        choice.push(arg);
        best = next;
    }
    let mut t_star = 0;
    let mut m = f64::INFINITY;
    for (t, &b) in best.iter().enumerate() {
        if b < m {
            m = b;
            t_star = t;
        }
    }
    let mut assigned = vec![0.0f64; groups];
    let mut t = t_star;
    for j in (0..groups).rev() {
        assigned[j] = lattice[t];
        t = choice[j][t];
    }
    scores
        .iter()
        .map(|&s| assigned[vals.partition_point(|&v| v < s)])
        .collect()
}

/// Mean log-loss of the beta map `σ(θ₁ ln s − θ₂ ln(1−s) + θ₃)` on scores
/// already inside (0, 1).
fn beta_loss(feats: &[(f64, f64)], labels: &[bool], t: [f64; 3]) -> f64 {
    let mut acc = 0.0;
    for (&(a, b), &y) in feats.iter().zip(labels) {
        let z = t[0] * a + t[1] * b + t[2];
        let softplus = if z > 0.0 {
            z + (-z).exp().ln_1p()
        } else {
            z.exp().ln_1p()
        };
        acc += softplus - if y { z } else { 0.0 };
    }
    acc / labels.len() as f64
}

/// Coarse-to-fine grid minimisation of the beta log-loss over θ₁,θ₂ ≥ 0 and
/// a free intercept. Nine points per axis, halving the bracket each level —
/// the bracket always spans two grid steps around the running argmin, which
/// is safe for this convex loss.
fn grid_beta(scores: &[f64], labels: &[bool]) -> ([f64; 3], f64) {
    let feats: Vec<(f64, f64)> = scores.iter().map(|&s| (s.ln(), -(1.0 - s).ln())).collect();
    let lo = [0.0, 0.0, -16.0];
    let hi = [16.0, 16.0, 16.0];
    let mut center = [8.0, 8.0, 0.0];
    let mut half = [8.0, 8.0, 16.0];
    let mut best = (f64::INFINITY, center);
    for _ in 0..14 {
        let axis = |a: usize| -> Vec<f64> {
            (0..9)
                .map(|i| (center[a] - half[a] + i as f64 * half[a] / 4.0).clamp(lo[a], hi[a]))
                .collect()
        };
        let (xs, ys, zs) = (axis(0), axis(1), axis(2));
        best = (f64::INFINITY, center);
        for &x in &xs {
            for &y in &ys {
                for &z in &zs {
                    let l = beta_loss(&feats, labels, [x, y, z]);
                    if l < best.0 {
                        best = (l, [x, y, z]);
                    }
                }
            }
        }
        center = best.1;
        for h in &mut half {
            *h /= 2.0;
        }
    }
    (best.1, best.0)
}

#[test]
fn calibrator_fits_match_exhaustive_oracles() {
    let _guard = serial();
    let start = Instant::now();

    // Isotonic vs the value-lattice optimum on 200 small instances.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for case in 0..200 {
        let n = rng.random_range(1..=8);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..12) as f64 / 12.0 * 1.6 - 0.8)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let fitted = fit_isotonic(&scores, &labels).unwrap();
        let oracle = lattice_isotonic(&scores, &labels, 2001);
        for (i, &want) in oracle.iter().enumerate() {
            let got = fitted.apply(scores[i]);
            assert!(
                (got - want).abs() <= 1e-3,
                "isotonic case {case}, point {i}: fitted {got} vs lattice {want}\n\
                 scores {scores:?}\nlabels {labels:?}"
            );
        }
    }

    // Beta vs the grid-searched minimiser on 20 fifty-point instances.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for case in 0..20 {
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.02..0.98)).collect();
        let mut labels: Vec<bool> = scores
            .iter()
            .map(|&s| rng.random_bool(s.clamp(0.05, 0.95)))
            .collect();
        if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
            labels[0] = !labels[0];
        }
        let fitted = fit_beta(&scores, &labels).unwrap();
        let CalibrationMap::Beta { t1, t2, t3 } = fitted else {
            panic!("expected a beta map");
        };
        let (theta, grid_loss) = grid_beta(&scores, &labels);
        for (got, want) in [(t1, theta[0]), (t2, theta[1]), (t3, theta[2])] {
            assert!(
                (got - want).abs() <= 0.05,
                "beta case {case}: θ {got} vs grid {want}"
            );
        }
        let feats: Vec<(f64, f64)> = scores.iter().map(|&s| (s.ln(), -(1.0 - s).ln())).collect();
        let fit_loss = beta_loss(&feats, &labels, [t1, t2, t3]);
        assert!(
            (fit_loss - grid_loss).abs() <= 1e-4,
            "beta case {case}: loss {fit_loss} vs grid {grid_loss}"
        );
    }

    // Binning vs an exhaustive per-bin recount, exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..100 {
        let bins = rng.random_range(1..=8);
        let n = rng.random_range(bins..=60);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..40) as f64 / 20.0 - 1.0)
            .collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let fitted = fit_binning(&scores, &labels, bins).unwrap();
        let CalibrationMap::Binning {
            ref edges,
            ref confidences,
        } = fitted
        else {
            panic!("expected a binning map");
        };
        assert_eq!(edges.len(), bins - 1, "case {case}");
        assert_eq!(confidences.len(), bins, "case {case}");
        for (b, &conf) in confidences.iter().enumerate() {
            let (mut pos, mut tot) = (0u64, 0u64);
            for (&s, &y) in scores.iter().zip(&labels) {
                if edges.partition_point(|&e| e <= s) == b {
                    tot += 1;
                    if y {
                        pos += 1;
                    }
                }
            }
            let want = if tot == 0 {
                0.0
            } else {
                pos as f64 / tot as f64
            };
            assert_eq!(conf, want, "case {case}, bin {b}");
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(
        secs < 30.0,
        "calibrator oracles took {secs:.1}s (budget 30s)"
    );
    println!("PASS calibrator oracles: isotonic 200, beta 20, binning 100 cases in {secs:.1}s");
}

// ─── 2. metric oracles ──────────────────────────────────────────────────────

#[test]
fn metrics_match_brute_force_oracles() {
    let _guard = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    for case in 0..500 {
        let n = rng.random_range(2..=20);
        // A coarse value lattice forces plenty of ties.
        let mut values: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..10) as f64 / 10.0)
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        values.truncate(n);
        let data = LabeledConfidences::new(values.clone(), labels.clone()).unwrap();

        // AUROC: the Mann–Whitney pair count, bit for bit.
        let n_pos = labels.iter().filter(|&&y| y).count();
        let n_neg = n - n_pos;
        let mut won = 0.0f64;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            for j in 0..n {
                if labels[j] {
                    continue;
                }
                if values[i] > values[j] {
                    won += 1.0;
                } else if values[i] == values[j] {
                    won += 0.5;
                }
            }
        }
        let brute = won / (n_pos as f64 * n_neg as f64);
        assert_eq!(auroc(&data).unwrap(), brute, "auroc case {case}");

        // KS: prefix gaps in stable confidence order.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let (mut h, mut h_tilde, mut gap) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &order {
            if labels[i] {
                h += 1.0 / n as f64;
            }
            h_tilde += values[i] / n as f64;
            gap = gap.max((h - h_tilde).abs());
        }
        assert!(
            (ks_error(&data).unwrap() - gap).abs() <= 1e-12,
            "ks case {case}"
        );

        // ECE: equal-width bins, empty bins skipped.
        for bins in [7, DEFAULT_ECE_BINS] {
            let mut count = vec![0u64; bins];
            let mut conf = vec![0.0f64; bins];
            let mut pos = vec![0u64; bins];
            for (&c, &y) in values.iter().zip(&labels) {
                let b = ((c * bins as f64).floor() as usize).min(bins - 1);
                count[b] += 1;
                conf[b] += c;
                if y {
                    pos[b] += 1;
                }
            }
            let mut want = 0.0;
            for b in 0..bins {
                if count[b] > 0 {
                    let acc = pos[b] as f64 / count[b] as f64;
                    let avg = conf[b] / count[b] as f64;
                    want += count[b] as f64 / n as f64 * (acc - avg).abs();
                }
            }
            assert!(
                (ece(&data, bins).unwrap() - want).abs() <= 1e-12,
                "ece case {case}, {bins} bins"
            );
        }

        // Brier: mean squared label error.
        let want: f64 = values
            .iter()
            .zip(&labels)
            .map(|(&c, &y)| {
                let yf = if y { 1.0 } else { 0.0 };
                (yf - c) * (yf - c)
            })
            .sum::<f64>()
            / n as f64;
        assert!(
            (brier(&data).unwrap() - want).abs() <= 1e-12,
            "brier case {case}"
        );

        // Threshold tightness: the returned value is the smallest observed
        // one meeting the target, or +∞ when none does.
        let imposters: Vec<f64> = (0..n).filter(|&i| !labels[i]).map(|i| values[i]).collect();
        let fpr_at =
            |t: f64| imposters.iter().filter(|&&v| v >= t).count() as f64 / imposters.len() as f64;
        let mut observed = values.clone();
        observed.sort_by(f64::total_cmp);
        observed.dedup();
        for target in [0.01, 0.1, 0.25, 0.5, 0.9] {
            let t = threshold_at_fpr(&data, target).unwrap();
            if t.is_finite() {
                assert!(observed.contains(&t), "case {case}: {t} not observed");
                assert!(fpr_at(t) <= target, "case {case}: loose threshold");
                for &v in observed.iter().filter(|&&v| v < t) {
                    assert!(
                        fpr_at(v) > target,
                        "case {case}: {v} < {t} also meets target {target}"
                    );
                }
            } else {
                for &v in &observed {
                    assert!(
                        fpr_at(v) > target,
                        "case {case}: sentinel returned but {v} meets target {target}"
                    );
                }
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "metric oracles took {secs:.1}s (budget 10s)");
    println!("PASS metric oracles: 500 brute-force instances in {secs:.1}s");
}

// ─── 3. reduction identities ────────────────────────────────────────────────

#[test]
fn reduction_identities_collapse_to_baseline() {
    let _guard = serial();
    let start = Instant::now();

    let two = generate(&small_spec(11)).unwrap();
    let one = generate(&SynthSpec {
        subgroups: vec![SubgroupSpec {
            identities: 24,
            images_per_identity: 6,
            ..SubgroupSpec::new("only", 0.15)
        }],
        dim: 16,
        genuine_pairs_per_id: 6,
        imposter_pairs_per_id: 6,
        folds: 2,
        seed: 12,
        ..SynthSpec::default()
    })
    .unwrap();

    for calibrator in [Calibrator::Beta, Calibrator::Binning, Calibrator::Isotonic] {
        for fold in 0..2usize {
            let eval: BTreeSet<usize> = [fold].into();
            let cal: BTreeSet<usize> = [1 - fold].into();
            let opts = |clusters: usize, attributes: Vec<String>| FitOptions {
                clusters,
                calibrator,
                reference_fpr: None,
                attributes,
                seed: 42,
            };

            // FairCal with a single cluster is the baseline.
            let baseline = fit_method(MethodKind::Baseline, &two, &cal, &opts(1, vec![])).unwrap();
            let faircal = fit_method(MethodKind::Faircal, &two, &cal, &opts(1, vec![])).unwrap();
            let b = baseline.confidences_for(&two, &eval, &[]).unwrap();
            let f = faircal.confidences_for(&two, &eval, &[]).unwrap();
            assert_eq!(b.values.len(), f.values.len());
            for (i, (&x, &y)) in b.values.iter().zip(&f.values).enumerate() {
                assert!(
                    (x - y).abs() <= 1e-12,
                    "{calibrator} fold {fold}, pair {i}: faircal(K=1) {y} vs baseline {x}"
                );
            }

            // The oracle over one subgroup is the baseline.
            let attrs = vec!["subgroup".to_string()];
            let baseline = fit_method(MethodKind::Baseline, &one, &cal, &opts(1, vec![])).unwrap();
            let oracle =
                fit_method(MethodKind::Oracle, &one, &cal, &opts(1, attrs.clone())).unwrap();
            let b = baseline.confidences_for(&one, &eval, &[]).unwrap();
            let o = oracle.confidences_for(&one, &eval, &attrs).unwrap();
            assert_eq!(o.fallbacks, 0);
            for (i, (&x, &y)) in b.values.iter().zip(&o.values).enumerate() {
                assert!(
                    (x - y).abs() <= 1e-12,
                    "{calibrator} fold {fold}, pair {i}: oracle {y} vs baseline {x}"
                );
            }
        }
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(
        secs < 5.0,
        "reduction identities took {secs:.1}s (budget 5s)"
    );
    println!("PASS reduction identities: faircal(K=1) and single-subgroup oracle ≡ baseline in {secs:.1}s");
}

// ─── 4. end-to-end bias reduction ───────────────────────────────────────────

#[test]
fn faircal_reduces_subgroup_fpr_spread_and_ks() {
    let _guard = serial();
    let run = benchmark();

    for method in ["baseline", "faircal"] {
        for key in ["fpr_dev_std@0.01", "ks_subgroup_mean"] {
            let agg = &run.report.methods[method].aggregate[key];
            assert_eq!(agg.folds, 5, "{method} `{key}` missing folds");
        }
        assert!(
            run.report.methods[method].errors.is_empty(),
            "{method} recorded errors"
        );
    }

    let std_ratio = agg_mean(&run.report, "faircal", "fpr_dev_std@0.01")
        / agg_mean(&run.report, "baseline", "fpr_dev_std@0.01");
    let ks_ratio = agg_mean(&run.report, "faircal", "ks_subgroup_mean")
        / agg_mean(&run.report, "baseline", "ks_subgroup_mean");
    assert!(
        std_ratio <= 0.5,
        "subgroup-FPR STD ratio {std_ratio:.3} exceeds 0.5"
    );
    assert!(
        ks_ratio <= 0.7,
        "subgroup-KS ratio {ks_ratio:.3} exceeds 0.7"
    );

    let secs = run.elapsed.as_secs_f64();
    assert!(secs < 180.0, "benchmark run took {secs:.1}s (budget 180s)");
    println!(
        "PASS bias reduction: FPR-STD ratio {std_ratio:.3} (≤0.5), KS ratio {ks_ratio:.3} (≤0.7), {secs:.1}s"
    );
}

// ─── 5. accuracy non-degradation ────────────────────────────────────────────

#[test]
fn faircal_preserves_accuracy_and_ranks() {
    let _guard = serial();
    let run = benchmark();

    let base = agg_mean(&run.report, "baseline", "auroc");
    let fair = agg_mean(&run.report, "faircal", "auroc");
    assert!(
        fair >= base - 0.002,
        "faircal AUROC {fair:.4} more than 0.2pp below baseline {base:.4}"
    );

    // Calibration is monotone, so per fold the baseline's AUROC must equal
    // the raw cosine-score AUROC.
    for fold_report in &run.report.methods["baseline"].folds {
        let eval: BTreeSet<usize> = [fold_report.fold].into();
        let idx = run.ds.pairs_in_folds(&eval);
        let values: Vec<f64> = idx
            .iter()
            .map(|&i| run.ds.pair_score(&run.ds.pairs[i]))
            .collect();
        let labels: Vec<bool> = idx.iter().map(|&i| run.ds.pairs[i].label).collect();
        let raw = auroc(&LabeledConfidences::new(values, labels).unwrap()).unwrap();
        let calibrated = fold_report.metrics["auroc"];
        assert!(
            (raw - calibrated).abs() <= 1e-12,
            "fold {}: calibrated AUROC {calibrated} vs raw {raw}",
            fold_report.fold
        );
    }

    println!(
        "PASS accuracy: faircal AUROC {fair:.4} vs baseline {base:.4}; ranks preserved on all 5 folds"
    );
}

// ─── 6. robustness to the cluster count ─────────────────────────────────────

#[test]
fn subgroup_ks_is_flat_across_cluster_counts() {
    let _guard = serial();
    let ds = &benchmark().ds;
    let start = Instant::now();

    let mut lines = Vec::new();
    for calibrator in [Calibrator::Beta, Calibrator::Binning, Calibrator::Isotonic] {
        let sweep: Vec<(usize, f64)> = [25usize, 50, 100, 150]
            .iter()
            .map(|&k| {
                let cfg = RunConfig {
                    methods: vec![MethodKind::Faircal],
                    calibrator,
                    clusters: k,
                    target_fprs: vec![0.01],
                    attributes: vec!["subgroup".to_string()],
                    folds: 5,
                    seed: 42,
                    post_calibrate_scores: false,
                };
                let report = run_cross_validation(ds, &cfg).unwrap();
                (k, agg_mean(&report, "faircal", "ks_subgroup_mean"))
            })
            .collect();
        let reference = sweep.iter().find(|(k, _)| *k == 100).unwrap().1;
        for &(k, ks) in &sweep {
            assert!(
                ks <= 2.0 * reference && ks >= reference / 2.0,
                "{calibrator} K={k}: KS {ks:.4} outside 2x of K=100's {reference:.4}"
            );
        }
        lines.push(format!(
            "{calibrator} {:?}",
            sweep
                .iter()
                .map(|&(k, v)| format!("K{k}={v:.4}"))
                .collect::<Vec<_>>()
        ));
    }

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 600.0, "cluster sweep took {secs:.1}s (budget 600s)");
    println!(
        "PASS cluster-count robustness in {secs:.1}s: {}",
        lines.join("; ")
    );
}

// ─── 7. FSN per-cluster FPR property ────────────────────────────────────────

#[test]
fn fsn_equalizes_cluster_fpr_within_one_quantile_step() {
    let _guard = serial();
    let ds = &benchmark().ds;
    let reference = 0.05;

    for fold in 0..5usize {
        let cal: BTreeSet<usize> = (0..5).filter(|&f| f != fold).collect();
        let opts = FitOptions {
            clusters: 10,
            calibrator: Calibrator::Beta,
            reference_fpr: Some(reference),
            attributes: vec![],
            seed: 42,
        };
        let model = fit_method(MethodKind::Fsn, ds, &cal, &opts).unwrap();
        let t_ref = model
            .ref_threshold()
            .expect("fsn stores a reference threshold");
        let sets = build_calibration_sets(ds, &cal, model.cluster_model().unwrap()).unwrap();
        assert_eq!(model.shifts().len(), sets.len());

        for (k, set) in sets.iter().enumerate() {
            // Undo the stored shift and snap to the observed score that the
            // per-cluster threshold was taken from, so the count below is
            // free of float-addition rounding.
            let approx = t_ref - model.shifts()[k].1;
            let t_k = set
                .scores
                .iter()
                .copied()
                .min_by(|a, b| (a - approx).abs().total_cmp(&(b - approx).abs()))
                .unwrap();
            assert!(
                (t_k - approx).abs() <= 1e-9,
                "fold {fold}, cluster {k}: shift does not point at an observed score"
            );
            let imposters: Vec<f64> = set
                .scores
                .iter()
                .zip(&set.labels)
                .filter(|(_, &y)| !y)
                .map(|(&s, _)| s)
                .collect();
            let n_imp = imposters.len() as f64;
            let fpr = imposters.iter().filter(|&&s| s >= t_k).count() as f64 / n_imp;
            assert!(
                fpr <= reference + 1e-12,
                "fold {fold}, cluster {k}: FPR {fpr:.5} overshoots {reference}"
            );
            // One quantile step means the next lower observed threshold
            // already overshoots; duplicate imposter pairs can make that
            // step a multiple of 1/n, so measure it instead of assuming.
            let below = set
                .scores
                .iter()
                .copied()
                .filter(|&s| s < t_k)
                .fold(f64::NEG_INFINITY, f64::max);
            if below.is_finite() {
                let fpr_below = imposters.iter().filter(|&&s| s >= below).count() as f64 / n_imp;
                assert!(
                    fpr_below > reference,
                    "fold {fold}, cluster {k}: threshold not tight ({below} also meets {reference})"
                );
                let step = fpr_below - fpr;
                assert!(
                    reference - fpr <= step + 1e-12,
                    "fold {fold}, cluster {k}: FPR {fpr:.5} more than one step ({step:.5}) below {reference}"
                );
            }
        }
    }

    println!("PASS fsn property: cluster FPR within one quantile step of {reference} for 10 clusters x 5 folds");
}

// ─── 8. determinism and file formats ────────────────────────────────────────

#[test]
fn reports_and_files_are_byte_deterministic() {
    let _guard = serial();
    let spec = small_spec(9);
    let cfg = RunConfig {
        methods: vec![
            MethodKind::Baseline,
            MethodKind::Faircal,
            MethodKind::Oracle,
            MethodKind::Fsn,
            MethodKind::Gst,
        ],
        calibrator: Calibrator::Beta,
        clusters: 5,
        target_fprs: vec![0.1, 0.2],
        attributes: vec!["subgroup".to_string()],
        folds: 2,
        seed: 42,
        post_calibrate_scores: true,
    };

    // Two runs from config alone must agree byte for byte.
    let first = {
        let ds = generate(&spec).unwrap();
        run_cross_validation(&ds, &cfg)
            .unwrap()
            .to_json_string()
            .unwrap()
    };
    let second = {
        let ds = generate(&spec).unwrap();
        run_cross_validation(&ds, &cfg)
            .unwrap()
            .to_json_string()
            .unwrap()
    };
    assert_eq!(
        first.as_bytes(),
        second.as_bytes(),
        "report bytes differ between runs"
    );

    // Data files survive a load/rewrite cycle bit-exactly.
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&spec).unwrap();
    let pairs_a = dir.path().join("pairs_a.csv");
    let emb_a = dir.path().join("emb_a.fce");
    ds.write_pairs(&pairs_a).unwrap();
    ds.write_embeddings_binary(&emb_a).unwrap();
    let loaded = Dataset::load(&pairs_a, &emb_a).unwrap();
    let pairs_b = dir.path().join("pairs_b.csv");
    let emb_b = dir.path().join("emb_b.fce");
    loaded.write_pairs(&pairs_b).unwrap();
    loaded.write_embeddings_binary(&emb_b).unwrap();
    assert_eq!(
        std::fs::read(&pairs_a).unwrap(),
        std::fs::read(&pairs_b).unwrap(),
        "pair manifest round-trip changed bytes"
    );
    assert_eq!(
        std::fs::read(&emb_a).unwrap(),
        std::fs::read(&emb_b).unwrap(),
        "embedding file round-trip changed bytes"
    );

    // Model files too, for each table layout: maps only, clusters + maps,
    // and shifts + thresholds.
    let cal: BTreeSet<usize> = [0].into();
    let eval: BTreeSet<usize> = [1].into();
    let attrs = vec!["subgroup".to_string()];
    let models = [
        (
            "faircal",
            fit_method(
                MethodKind::Faircal,
                &ds,
                &cal,
                &FitOptions {
                    clusters: 5,
                    calibrator: Calibrator::Beta,
                    reference_fpr: None,
                    attributes: vec![],
                    seed: 42,
                },
            )
            .unwrap(),
        ),
        (
            "oracle",
            fit_method(
                MethodKind::Oracle,
                &ds,
                &cal,
                &FitOptions {
                    clusters: 1,
                    calibrator: Calibrator::Isotonic,
                    reference_fpr: None,
                    attributes: attrs.clone(),
                    seed: 42,
                },
            )
            .unwrap(),
        ),
        (
            "fsn",
            fit_method(
                MethodKind::Fsn,
                &ds,
                &cal,
                &FitOptions {
                    clusters: 5,
                    calibrator: Calibrator::Beta,
                    reference_fpr: Some(0.1),
                    attributes: vec![],
                    seed: 42,
                },
            )
            .unwrap(),
        ),
    ];
    for (name, model) in &models {
        let path_a = dir.path().join(format!("{name}_a.fcm"));
        let path_b = dir.path().join(format!("{name}_b.fcm"));
        model.write(&path_a).unwrap();
        let loaded = MethodModel::read(&path_a).unwrap();
        loaded.write(&path_b).unwrap();
        assert_eq!(
            std::fs::read(&path_a).unwrap(),
            std::fs::read(&path_b).unwrap(),
            "{name} model round-trip changed bytes"
        );
        let eval_attrs: &[String] = if model.kind().needs_attributes() {
            &attrs
        } else {
            &[]
        };
        let orig = model.confidences_for(&ds, &eval, eval_attrs).unwrap();
        let back = loaded.confidences_for(&ds, &eval, eval_attrs).unwrap();
        assert_eq!(
            orig.values, back.values,
            "{name} outputs changed after reload"
        );
    }

    println!("PASS determinism: identical report bytes, lossless pair/embedding/model round-trips");
}
