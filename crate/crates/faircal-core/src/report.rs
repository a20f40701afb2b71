//! Report assembly and emission.
//!
//! A run produces one [`MetricsReport`]: per method, the per-fold metric
//! values, their cross-fold aggregates (mean, sample std, contributing fold
//! count), a pooled FPR-vs-threshold curve for plotting, and any errors or
//! warnings collected along the way. All maps are ordered, so serialising
//! the same report twice yields identical bytes.
//!
//! Metric keys are flat strings: `auroc`, `tpr@0.01`, `threshold@0.01`,
//! `ks`, `ks:asian`, `ks_subgroup_mean`, `fpr@0.01:asian`,
//! `fpr_dev_std@0.01`, `ece`, `brier:asian`, and so on — a `:` suffix names
//! a subgroup, an `@` names a target FPR.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Echo of the configuration that produced a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub methods: Vec<String>,
    pub calibrator: String,
    pub clusters: usize,
    pub target_fprs: Vec<f64>,
    pub attributes: Vec<String>,
    pub folds: usize,
    pub seed: u64,
    pub post_calibrate_scores: bool,
}

/// Cross-fold mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    /// How many folds contributed a finite value.
    pub folds: usize,
}

/// One fold's outcomes for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    /// Cluster count actually used (after any retry halving); absent for
    /// methods without clusters.
    pub clusters_used: Option<usize>,
    /// Fit attempts beyond the first.
    pub retries: usize,
    /// Pairs that hit an unseen-subgroup fallback.
    pub fallbacks: usize,
    /// Only finite values are recorded; a missing key means the cell could
    /// not be computed for this fold.
    pub metrics: BTreeMap<String, f64>,
}

/// One threshold of the pooled FPR curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// FPR per subgroup plus the pooled rate under `__all__`.
    pub fpr: BTreeMap<String, f64>,
}

/// Everything recorded about one method across the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MethodReport {
    pub folds: Vec<FoldReport>,
    pub aggregate: BTreeMap<String, Aggregate>,
    pub fpr_curve: Vec<CurvePoint>,
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

/// The complete result of a cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: RunSummary,
    pub methods: BTreeMap<String, MethodReport>,
}

/// The table names understood by the CSV emitters. The `ks` table carries
/// the whole calibration-error family (KS, ECE, Brier).
pub const TABLE_NAMES: &[&str] = &["accuracy", "ks", "fpr-dev", "fnr-dev", "fpr-curve"];

impl MetricsReport {
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Structural(format!("report serialisation failed: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = self.to_json_string()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Structural(format!("{}: not a valid report: {e}", path.display())))
    }

    /// Renders every table, each preceded by a `# table: <name>` marker.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        for (i, name) in TABLE_NAMES.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&self.table(name).expect("built-in table name"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv_string().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    /// Renders a single named table as CSV.
    pub fn table(&self, name: &str) -> Result<String> {
        if name == "fpr-curve" {
            return Ok(self.curve_table());
        }
        let belongs: fn(&str) -> bool = match name {
            "accuracy" => |k| k == "auroc" || k.starts_with("tpr@") || k.starts_with("threshold@"),
            "ks" => |k| {
                k == "ks"
                    || k.starts_with("ks:")
                    || k.starts_with("ks_")
                    || k == "ece"
                    || k.starts_with("ece:")
                    || k == "brier"
                    || k.starts_with("brier:")
            },
            "fpr-dev" => |k| k.starts_with("fpr@") || k.starts_with("fpr_dev_"),
            "fnr-dev" => |k| k.starts_with("fnr@") || k.starts_with("fnr_dev_"),
            other => {
                return Err(Error::Config(format!(
                    "unknown table `{other}` (expected one of {})",
                    TABLE_NAMES.join(", ")
                )))
            }
        };
        let mut rows = String::new();
        rows.push_str(&format!("# table: {name}\n"));
        rows.push_str("metric,method,subgroup,mean,std\n");
        // All matching keys across methods, in sorted order.
        let mut keys: Vec<&str> = self
            .methods
            .values()
            .flat_map(|m| m.aggregate.keys())
            .map(|k| k.as_str())
            .filter(|k| belongs(k))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        for key in keys {
            let (metric, subgroup) = match key.split_once(':') {
                Some((m, g)) => (m, g),
                None => (key, ""),
            };
            for (method, rep) in &self.methods {
                if let Some(agg) = rep.aggregate.get(key) {
                    rows.push_str(&format!(
                        "{metric},{method},{subgroup},{},{}\n",
                        agg.mean, agg.std
                    ));
                }
            }
        }
        Ok(rows)
    }

    fn curve_table(&self) -> String {
        let mut rows = String::new();
        rows.push_str("# table: fpr-curve\n");
        rows.push_str("method,threshold,subgroup,fpr\n");
        for (method, rep) in &self.methods {
            for point in &rep.fpr_curve {
                for (subgroup, fpr) in &point.fpr {
                    rows.push_str(&format!("{method},{},{subgroup},{fpr}\n", point.threshold));
                }
            }
        }
        rows
    }
}
