//! The five comparable verification methods: baseline calibration, FairCal,
//! the attribute-aware Oracle, FSN score normalisation, and group-specific
//! thresholds (GST).
//!
//! Every method fits on calibration folds and then maps a test pair to a
//! single statistic: a confidence in `[0, 1]` for baseline/FairCal/Oracle, a
//! normalised score for FSN/GST. Fitted models carry the folds they were
//! fitted on and refuse to evaluate pairs from those folds.
//!
//! # Model file (`FCMM`)
//!
//! | field          | encoding                                             |
//! |----------------|------------------------------------------------------|
//! | magic          | `FCMM` (4 bytes)                                     |
//! | kind           | u8: 0 baseline, 1 faircal, 2 oracle, 3 fsn, 4 gst    |
//! | cluster model  | u8 presence flag, then the `FCM1` body when present  |
//! | maps           | u32 count, then records of u16 LE key length, key (UTF-8), calibration-map blob, u64 LE set size |
//! | shifts         | u32 count, then records of u16 LE key length, key, f64 LE value |
//! | thresholds     | same record shape as shifts; `__ref__` is written first |
//! | reference_fpr  | f64 LE, NaN when absent                              |
//!
//! Cluster-keyed tables use the decimal cluster index in index order;
//! subgroup-keyed tables are sorted by name. The reserved keys are
//! `__global__` (the baseline map), `__fallback__` (the oracle's map for
//! subgroups unseen at fit time, always last) and `__ref__` (the global
//! threshold).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::calib::{CalibrationMap, Calibrator};
use crate::data::{Dataset, SubgroupKey};
use crate::error::{Error, Result};
use crate::exec;
use crate::kmeans::{fit_kmeans, ClusterModel};
use crate::metrics::{threshold_at_fpr, LabeledConfidences};

/// Magic prefix of the serialised method model.
pub const METHOD_MAGIC: &[u8; 4] = b"FCMM";
/// Map key of the baseline's single calibration map.
pub const GLOBAL_KEY: &str = "__global__";
/// Map key of the oracle's unseen-subgroup fallback map.
pub const FALLBACK_KEY: &str = "__fallback__";
/// Threshold key of the global reference threshold.
pub const REF_THRESHOLD_KEY: &str = "__ref__";

/// Which verification method a model implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MethodKind {
    Baseline,
    Faircal,
    Oracle,
    Fsn,
    Gst,
}

impl MethodKind {
    /// `true` for methods whose natural output is a shifted score rather
    /// than a probability (fsn, gst).
    pub fn produces_scores(self) -> bool {
        matches!(self, MethodKind::Fsn | MethodKind::Gst)
    }

    /// `true` for methods that need sensitive-attribute annotations.
    pub fn needs_attributes(self) -> bool {
        matches!(self, MethodKind::Oracle | MethodKind::Gst)
    }

    fn tag(self) -> u8 {
        match self {
            MethodKind::Baseline => 0,
            MethodKind::Faircal => 1,
            MethodKind::Oracle => 2,
            MethodKind::Fsn => 3,
            MethodKind::Gst => 4,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => MethodKind::Baseline,
            1 => MethodKind::Faircal,
            2 => MethodKind::Oracle,
            3 => MethodKind::Fsn,
            4 => MethodKind::Gst,
            _ => return None,
        })
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(MethodKind::Baseline),
            "faircal" => Ok(MethodKind::Faircal),
            "oracle" => Ok(MethodKind::Oracle),
            "fsn" => Ok(MethodKind::Fsn),
            "gst" => Ok(MethodKind::Gst),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected baseline, faircal, oracle, fsn or gst)"
            ))),
        }
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MethodKind::Baseline => "baseline",
            MethodKind::Faircal => "faircal",
            MethodKind::Oracle => "oracle",
            MethodKind::Fsn => "fsn",
            MethodKind::Gst => "gst",
        })
    }
}

/// Everything `fit_method` needs beyond the data.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// K for the cluster-based methods.
    pub clusters: usize,
    pub calibrator: Calibrator,
    /// Target FPR anchoring fsn/gst thresholds; ignored by the others.
    pub reference_fpr: Option<f64>,
    /// Sensitive attributes for oracle/gst; ignored by the others.
    pub attributes: Vec<String>,
    pub seed: u64,
}

/// One cluster's calibration set.
#[derive(Debug, Clone, Default)]
pub struct CalSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Per-pair outputs of a fitted method on an evaluation fold.
#[derive(Debug, Clone)]
pub struct Confidences {
    /// Aligned with the fold's pair list (dataset order).
    pub values: Vec<f64>,
    /// How many pairs hit the unseen-subgroup fallback (oracle/gst only).
    pub fallbacks: usize,
}

/// A fitted verification method.
#[derive(Debug, Clone)]
pub struct MethodModel {
    kind: MethodKind,
    clusters: Option<ClusterModel>,
    /// `(key, map, calibration-set size)` in serialisation order.
    maps: Vec<(String, CalibrationMap, u64)>,
    /// fsn per-cluster score shifts, cluster order.
    shifts: Vec<(String, f64)>,
    /// fsn/gst thresholds; `__ref__` first.
    thresholds: Vec<(String, f64)>,
    reference_fpr: Option<f64>,
    /// Folds seen at fit time; empty for models loaded from disk.
    fit_folds: BTreeSet<usize>,
    map_lookup: HashMap<String, usize>,
    threshold_lookup: HashMap<String, f64>,
}

impl MethodModel {
    pub fn kind(&self) -> MethodKind {
        self.kind
    }

    pub fn cluster_model(&self) -> Option<&ClusterModel> {
        self.clusters.as_ref()
    }

    pub fn maps(&self) -> &[(String, CalibrationMap, u64)] {
        &self.maps
    }

    pub fn shifts(&self) -> &[(String, f64)] {
        &self.shifts
    }

    pub fn thresholds(&self) -> &[(String, f64)] {
        &self.thresholds
    }

    pub fn reference_fpr(&self) -> Option<f64> {
        self.reference_fpr
    }

    /// The global reference threshold (fsn/gst).
    pub fn ref_threshold(&self) -> Option<f64> {
        self.threshold_lookup.get(REF_THRESHOLD_KEY).copied()
    }

    fn reindex(&mut self) {
        self.map_lookup = self
            .maps
            .iter()
            .enumerate()
            .map(|(i, (k, _, _))| (k.clone(), i))
            .collect();
        self.threshold_lookup = self
            .thresholds
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect();
    }

    /// Evaluates the method on every pair whose fold is in `eval_folds`.
    /// `attributes` selects the sensitive attributes for oracle/gst (the
    /// model file does not store them); pass the same list used at fit time.
    pub fn confidences_for(
        &self,
        ds: &Dataset,
        eval_folds: &BTreeSet<usize>,
        attributes: &[String],
    ) -> Result<Confidences> {
        let overlap: Vec<usize> = self.fit_folds.intersection(eval_folds).copied().collect();
        if !overlap.is_empty() {
            return Err(Error::Protocol(format!(
                "evaluation folds {overlap:?} were used to fit this {} model",
                self.kind
            )));
        }
        self.evaluate_on(ds, eval_folds, attributes)
    }

    /// Evaluates the method on its own calibration folds — the leakage-safe
    /// way to derive decision thresholds, since no test-fold pair is
    /// involved. Only available on freshly fitted models (loaded ones do
    /// not record their folds).
    pub fn calibration_outputs(&self, ds: &Dataset, attributes: &[String]) -> Result<Confidences> {
        if self.fit_folds.is_empty() {
            return Err(Error::Protocol(
                "model does not record its calibration folds (was it loaded from disk?)".into(),
            ));
        }
        let folds = self.fit_folds.clone();
        self.evaluate_on(ds, &folds, attributes)
    }

    fn evaluate_on(
        &self,
        ds: &Dataset,
        eval_folds: &BTreeSet<usize>,
        attributes: &[String],
    ) -> Result<Confidences> {
        let attr_indices = if self.kind.needs_attributes() {
            ds.resolve_attributes(attributes)?
        } else {
            Vec::new()
        };
        let pair_indices = ds.pairs_in_folds(eval_folds);
        if pair_indices.is_empty() {
            return Err(Error::Config(format!(
                "no pairs in evaluation folds {eval_folds:?}"
            )));
        }
        let out = exec::map(&pair_indices, |&i| {
            self.pair_statistic(ds, i, &attr_indices)
        });
        let mut values = Vec::with_capacity(out.len());
        let mut fallbacks = 0;
        for (v, fb) in out {
            values.push(v);
            if fb {
                fallbacks += 1;
            }
        }
        Ok(Confidences { values, fallbacks })
    }

    /// The statistic for one pair plus whether the unseen-subgroup fallback
    /// fired.
    fn pair_statistic(&self, ds: &Dataset, pair_idx: usize, attr_indices: &[usize]) -> (f64, bool) {
        let pair = &ds.pairs[pair_idx];
        let s = ds.pair_score(pair);
        match self.kind {
            MethodKind::Baseline => (self.maps[0].1.apply(s), false),
            MethodKind::Faircal => {
                let cm = self.clusters.as_ref().expect("faircal carries clusters");
                let (e1, e2) = ds.pair_embeddings(pair);
                let c1 = cm.assign(ds.embedding(e1));
                let c2 = cm.assign(ds.embedding(e2));
                if c1 == c2 {
                    (self.maps[c1].1.apply(s), false)
                } else {
                    let mu1 = self.maps[c1].1.apply(s);
                    let mu2 = self.maps[c2].1.apply(s);
                    (
                        weighted_confidence(mu1, self.maps[c1].2, mu2, self.maps[c2].2),
                        false,
                    )
                }
            }
            MethodKind::Oracle => match ds.subgroup_key(pair, attr_indices) {
                SubgroupKey::Intergroup => (0.0, false),
                SubgroupKey::Named(g) => match self.map_lookup.get(&g) {
                    Some(&i) => (self.maps[i].1.apply(s), false),
                    None => {
                        let fb = self.map_lookup[FALLBACK_KEY];
                        (self.maps[fb].1.apply(s), true)
                    }
                },
            },
            MethodKind::Fsn => {
                let cm = self.clusters.as_ref().expect("fsn carries clusters");
                let (e1, e2) = ds.pair_embeddings(pair);
                let c1 = cm.assign(ds.embedding(e1));
                let c2 = cm.assign(ds.embedding(e2));
                let shift = if c1 == c2 {
                    self.shifts[c1].1
                } else {
                    (self.shifts[c1].1 + self.shifts[c2].1) / 2.0
                };
                (s + shift, false)
            }
            MethodKind::Gst => match ds.subgroup_key(pair, attr_indices) {
                // Intergroup pairs keep the global threshold: zero shift.
                SubgroupKey::Intergroup => (s, false),
                SubgroupKey::Named(g) => match self.threshold_lookup.get(&g) {
                    Some(&t_g) => {
                        let t_ref = self.threshold_lookup[REF_THRESHOLD_KEY];
                        (s - t_g + t_ref, false)
                    }
                    None => (s, true),
                },
            },
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut inner = || -> std::io::Result<()> {
            w.write_all(METHOD_MAGIC)?;
            w.write_u8(self.kind.tag())?;
            match &self.clusters {
                Some(cm) => {
                    w.write_u8(1)?;
                    cm.write_to(&mut w)?;
                }
                None => w.write_u8(0)?,
            }
            w.write_u32::<LittleEndian>(self.maps.len() as u32)?;
            for (key, map, size) in &self.maps {
                write_key(&mut w, key)?;
                map.write_to(&mut w)?;
                w.write_u64::<LittleEndian>(*size)?;
            }
            write_real_table(&mut w, &self.shifts)?;
            write_real_table(&mut w, &self.thresholds)?;
            w.write_f64::<LittleEndian>(self.reference_fpr.unwrap_or(f64::NAN))?;
            w.flush()
        };
        inner().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let io_err = |e: std::io::Error| Error::io(path, e);
        let bad = |msg: String| Error::Structural(format!("{}: {msg}", path.display()));

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != METHOD_MAGIC {
            return Err(bad("not a method model (bad magic)".into()));
        }
        let kind = MethodKind::from_tag(r.read_u8().map_err(io_err)?)
            .ok_or_else(|| bad("unknown method kind tag".into()))?;
        let clusters = match r.read_u8().map_err(io_err)? {
            0 => None,
            1 => Some(ClusterModel::read_from(&mut r, path)?),
            other => return Err(bad(format!("bad cluster presence flag {other}"))),
        };
        let map_count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut maps = Vec::with_capacity(map_count);
        for _ in 0..map_count {
            let key = read_key(&mut r, path)?;
            let map = CalibrationMap::read_from(&mut r, path)?;
            let size = r.read_u64::<LittleEndian>().map_err(io_err)?;
            if size == 0 {
                return Err(bad(format!("calibration set `{key}` has size 0")));
            }
            maps.push((key, map, size));
        }
        let shifts = read_real_table(&mut r, path)?;
        let thresholds = read_real_table(&mut r, path)?;
        let ref_raw = r.read_f64::<LittleEndian>().map_err(io_err)?;
        let reference_fpr = if ref_raw.is_nan() {
            None
        } else {
            Some(ref_raw)
        };

        let mut probe = [0u8; 1];
        if r.read(&mut probe).map_err(io_err)? != 0 {
            return Err(bad("trailing bytes after model".into()));
        }

        let mut model = MethodModel {
            kind,
            clusters,
            maps,
            shifts,
            thresholds,
            reference_fpr,
            fit_folds: BTreeSet::new(),
            map_lookup: HashMap::new(),
            threshold_lookup: HashMap::new(),
        };
        model.validate_shape().map_err(bad)?;
        model.reindex();
        Ok(model)
    }

    /// Kind-specific structural checks shared by the reader.
    fn validate_shape(&self) -> std::result::Result<(), String> {
        let cluster_order = |table: &[(String, _)]| -> std::result::Result<(), String> {
            for (i, (k, _)) in table.iter().enumerate() {
                if k != &i.to_string() {
                    return Err(format!("expected cluster key `{i}`, found `{k}`"));
                }
            }
            Ok(())
        };
        match self.kind {
            MethodKind::Baseline => {
                if self.maps.len() != 1 || self.maps[0].0 != GLOBAL_KEY {
                    return Err("baseline must carry exactly the `__global__` map".into());
                }
            }
            MethodKind::Faircal => {
                let cm = self
                    .clusters
                    .as_ref()
                    .ok_or("faircal requires a cluster model")?;
                if self.maps.len() != cm.k() {
                    return Err(format!(
                        "faircal carries {} maps for {} clusters",
                        self.maps.len(),
                        cm.k()
                    ));
                }
                for (i, (k, _, _)) in self.maps.iter().enumerate() {
                    if k != &i.to_string() {
                        return Err(format!("expected cluster key `{i}`, found `{k}`"));
                    }
                }
            }
            MethodKind::Oracle => {
                match self.maps.last() {
                    Some((k, _, _)) if k == FALLBACK_KEY => {}
                    _ => return Err("oracle must end with the `__fallback__` map".into()),
                }
                if self.maps.len() < 2 {
                    return Err("oracle needs at least one subgroup map".into());
                }
            }
            MethodKind::Fsn => {
                let cm = self
                    .clusters
                    .as_ref()
                    .ok_or("fsn requires a cluster model")?;
                if self.shifts.len() != cm.k() {
                    return Err(format!(
                        "fsn carries {} shifts for {} clusters",
                        self.shifts.len(),
                        cm.k()
                    ));
                }
                cluster_order(&self.shifts)?;
                if self.thresholds.first().map(|(k, _)| k.as_str()) != Some(REF_THRESHOLD_KEY) {
                    return Err("fsn thresholds must start with `__ref__`".into());
                }
                if self.reference_fpr.is_none() {
                    return Err("fsn requires a reference FPR".into());
                }
            }
            MethodKind::Gst => {
                if self.thresholds.first().map(|(k, _)| k.as_str()) != Some(REF_THRESHOLD_KEY) {
                    return Err("gst thresholds must start with `__ref__`".into());
                }
                if self.thresholds.len() < 2 {
                    return Err("gst needs at least one subgroup threshold".into());
                }
                if self.reference_fpr.is_none() {
                    return Err("gst requires a reference FPR".into());
                }
            }
        }
        Ok(())
    }
}

/// FairCal's cross-cluster weighted average: θ·μ₁ + (1−θ)·μ₂ with θ the
/// first cluster's share of the two calibration-set sizes.
pub(crate) fn weighted_confidence(mu1: f64, n1: u64, mu2: f64, n2: u64) -> f64 {
    let theta = n1 as f64 / (n1 + n2) as f64;
    theta * mu1 + (1.0 - theta) * mu2
}

fn write_key<W: Write>(w: &mut W, key: &str) -> std::io::Result<()> {
    let bytes = key.as_bytes();
    debug_assert!(bytes.len() <= u16::MAX as usize);
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)
}

fn read_key<R: Read>(r: &mut R, path: &Path) -> Result<String> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    let len = r.read_u16::<LittleEndian>().map_err(io_err)? as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes).map_err(io_err)?;
    String::from_utf8(bytes)
        .map_err(|_| Error::Structural(format!("{}: table key is not valid UTF-8", path.display())))
}

fn write_real_table<W: Write>(w: &mut W, table: &[(String, f64)]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(table.len() as u32)?;
    for (key, v) in table {
        write_key(w, key)?;
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_real_table<R: Read>(r: &mut R, path: &Path) -> Result<Vec<(String, f64)>> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    let count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let key = read_key(r, path)?;
        let v = r.read_f64::<LittleEndian>().map_err(io_err)?;
        table.push((key, v));
    }
    Ok(table)
}

/// Builds the K per-cluster calibration sets: every calibration pair
/// contributes its score and label to the set of each cluster containing
/// either of its images, so a cross-cluster pair appears in exactly two
/// sets.
pub fn build_calibration_sets(
    ds: &Dataset,
    cal_folds: &BTreeSet<usize>,
    cm: &ClusterModel,
) -> Result<Vec<CalSet>> {
    let pair_indices = ds.pairs_in_folds(cal_folds);
    if pair_indices.is_empty() {
        return Err(Error::Config(format!(
            "no pairs in calibration folds {cal_folds:?}"
        )));
    }
    let mut sets = vec![CalSet::default(); cm.k()];
    for &i in &pair_indices {
        let pair = &ds.pairs[i];
        let s = ds.pair_score(pair);
        let (e1, e2) = ds.pair_embeddings(pair);
        let c1 = cm.assign(ds.embedding(e1));
        let c2 = cm.assign(ds.embedding(e2));
        sets[c1].scores.push(s);
        sets[c1].labels.push(pair.label);
        if c2 != c1 {
            sets[c2].scores.push(s);
            sets[c2].labels.push(pair.label);
        }
    }
    if let Some(empty) = sets.iter().position(|s| s.scores.is_empty()) {
        return Err(Error::Fit(format!(
            "cluster {empty} received no calibration pairs"
        )));
    }
    Ok(sets)
}

/// Fits a method on the calibration folds.
pub fn fit_method(
    kind: MethodKind,
    ds: &Dataset,
    cal_folds: &BTreeSet<usize>,
    opts: &FitOptions,
) -> Result<MethodModel> {
    if cal_folds.is_empty() {
        return Err(Error::Config("no calibration folds".into()));
    }
    if let Some(&f) = cal_folds.iter().find(|&&f| f >= ds.fold_count) {
        return Err(Error::Config(format!(
            "calibration fold {f} out of range (dataset has {} folds)",
            ds.fold_count
        )));
    }
    if kind.needs_attributes() && opts.attributes.is_empty() {
        return Err(Error::Config(format!(
            "{kind} requires sensitive attributes (--attributes)"
        )));
    }
    if matches!(kind, MethodKind::Fsn | MethodKind::Gst) {
        match opts.reference_fpr {
            Some(r) if r > 0.0 && r < 1.0 => {}
            _ => {
                return Err(Error::Config(format!(
                    "{kind} requires a reference FPR in (0,1)"
                )))
            }
        }
    }

    let cal_pairs = ds.pairs_in_folds(cal_folds);
    if cal_pairs.is_empty() {
        return Err(Error::Config(format!(
            "no pairs in calibration folds {cal_folds:?}"
        )));
    }

    let mut model = match kind {
        MethodKind::Baseline => fit_baseline(ds, &cal_pairs, opts)?,
        MethodKind::Faircal => fit_faircal(ds, cal_folds, opts)?,
        MethodKind::Oracle => fit_oracle(ds, &cal_pairs, opts)?,
        MethodKind::Fsn => fit_fsn(ds, cal_folds, opts)?,
        MethodKind::Gst => fit_gst(ds, &cal_pairs, opts)?,
    };
    model.fit_folds = cal_folds.clone();
    model.reindex();
    Ok(model)
}

fn empty_model(kind: MethodKind) -> MethodModel {
    MethodModel {
        kind,
        clusters: None,
        maps: Vec::new(),
        shifts: Vec::new(),
        thresholds: Vec::new(),
        reference_fpr: None,
        fit_folds: BTreeSet::new(),
        map_lookup: HashMap::new(),
        threshold_lookup: HashMap::new(),
    }
}

/// Rejects calibration sets too small or single-class to support a map or
/// threshold fit.
fn check_set(name: &str, labels: &[bool]) -> Result<()> {
    if labels.len() < 2 {
        return Err(Error::Fit(format!(
            "calibration set {name} has {} pairs (need at least 2)",
            labels.len()
        )));
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::Fit(format!(
            "calibration set {name} contains a single class"
        )));
    }
    Ok(())
}

/// Wraps any fit-stage failure with the name of the offending set.
fn name_set_error(name: &str, e: Error) -> Error {
    match e {
        Error::Io { .. } => e,
        other => Error::Fit(format!("calibration set {name}: {other}")),
    }
}

fn cal_scores(ds: &Dataset, pair_indices: &[usize]) -> (Vec<f64>, Vec<bool>) {
    let scores = pair_indices
        .iter()
        .map(|&i| ds.pair_score(&ds.pairs[i]))
        .collect();
    let labels = pair_indices.iter().map(|&i| ds.pairs[i].label).collect();
    (scores, labels)
}

fn fit_baseline(ds: &Dataset, cal_pairs: &[usize], opts: &FitOptions) -> Result<MethodModel> {
    let (scores, labels) = cal_scores(ds, cal_pairs);
    check_set(GLOBAL_KEY, &labels)?;
    let map = opts
        .calibrator
        .fit(&scores, &labels)
        .map_err(|e| name_set_error(GLOBAL_KEY, e))?;
    let mut m = empty_model(MethodKind::Baseline);
    m.maps = vec![(GLOBAL_KEY.to_string(), map, labels.len() as u64)];
    Ok(m)
}

/// Embeddings referenced by any pair of the calibration folds, deduplicated
/// in index order.
fn calibration_images(ds: &Dataset, cal_folds: &BTreeSet<usize>) -> (Vec<usize>, Vec<f64>) {
    let mut idx: BTreeSet<usize> = BTreeSet::new();
    for p in ds.pairs.iter().filter(|p| cal_folds.contains(&p.fold)) {
        let (e1, e2) = ds.pair_embeddings(p);
        idx.insert(e1);
        idx.insert(e2);
    }
    let idx: Vec<usize> = idx.into_iter().collect();
    let mut points = Vec::with_capacity(idx.len() * ds.dim());
    for &i in &idx {
        points.extend_from_slice(ds.embedding(i));
    }
    (idx, points)
}

fn fit_clusters(
    ds: &Dataset,
    cal_folds: &BTreeSet<usize>,
    opts: &FitOptions,
) -> Result<ClusterModel> {
    if opts.clusters == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    let (_, points) = calibration_images(ds, cal_folds);
    fit_kmeans(&points, ds.dim(), opts.clusters, opts.seed)
}

fn fit_faircal(
    ds: &Dataset,
    cal_folds: &BTreeSet<usize>,
    opts: &FitOptions,
) -> Result<MethodModel> {
    let cm = fit_clusters(ds, cal_folds, opts)?;
    let sets = build_calibration_sets(ds, cal_folds, &cm)?;
    for (k, set) in sets.iter().enumerate() {
        check_set(&format!("cluster {k}"), &set.labels)?;
    }
    // Per-cluster fits are independent; order is restored by exec::map_range.
    let fits = exec::map_range(sets.len(), |k| {
        opts.calibrator.fit(&sets[k].scores, &sets[k].labels)
    });
    let mut maps = Vec::with_capacity(sets.len());
    for (k, fit) in fits.into_iter().enumerate() {
        let map = fit.map_err(|e| name_set_error(&format!("cluster {k}"), e))?;
        maps.push((k.to_string(), map, sets[k].scores.len() as u64));
    }
    let mut m = empty_model(MethodKind::Faircal);
    m.clusters = Some(cm);
    m.maps = maps;
    Ok(m)
}

/// Splits the calibration pairs by named subgroup; intergroup pairs are
/// excluded (they belong to no subgroup set).
fn subgroup_sets(
    ds: &Dataset,
    cal_pairs: &[usize],
    attr_indices: &[usize],
) -> BTreeMap<String, CalSet> {
    let mut sets: BTreeMap<String, CalSet> = BTreeMap::new();
    for &i in cal_pairs {
        let pair = &ds.pairs[i];
        if let SubgroupKey::Named(g) = ds.subgroup_key(pair, attr_indices) {
            let set = sets.entry(g).or_default();
            set.scores.push(ds.pair_score(pair));
            set.labels.push(pair.label);
        }
    }
    sets
}

fn fit_oracle(ds: &Dataset, cal_pairs: &[usize], opts: &FitOptions) -> Result<MethodModel> {
    let attr_indices = ds.resolve_attributes(&opts.attributes)?;
    let sets = subgroup_sets(ds, cal_pairs, &attr_indices);
    if sets.is_empty() {
        return Err(Error::Fit(
            "oracle: no intra-subgroup calibration pairs".into(),
        ));
    }
    let mut maps = Vec::with_capacity(sets.len() + 1);
    for (g, set) in &sets {
        let name = format!("subgroup {g}");
        check_set(&name, &set.labels)?;
        let map = opts
            .calibrator
            .fit(&set.scores, &set.labels)
            .map_err(|e| name_set_error(&name, e))?;
        maps.push((g.clone(), map, set.scores.len() as u64));
    }
    // Fallback for subgroups unseen at fit time: a baseline map over every
    // calibration pair, intergroup included.
    let (scores, labels) = cal_scores(ds, cal_pairs);
    check_set(FALLBACK_KEY, &labels)?;
    let fallback = opts
        .calibrator
        .fit(&scores, &labels)
        .map_err(|e| name_set_error(FALLBACK_KEY, e))?;
    maps.push((FALLBACK_KEY.to_string(), fallback, labels.len() as u64));

    let mut m = empty_model(MethodKind::Oracle);
    m.maps = maps;
    Ok(m)
}

fn finite_threshold(name: &str, t: f64, target: f64) -> Result<f64> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Fit(format!(
            "calibration set {name} cannot reach FPR {target} at any observed score"
        )))
    }
}

fn fit_fsn(ds: &Dataset, cal_folds: &BTreeSet<usize>, opts: &FitOptions) -> Result<MethodModel> {
    let reference = opts.reference_fpr.unwrap();
    let cm = fit_clusters(ds, cal_folds, opts)?;
    let sets = build_calibration_sets(ds, cal_folds, &cm)?;
    for (k, set) in sets.iter().enumerate() {
        check_set(&format!("cluster {k}"), &set.labels)?;
    }
    let cal_pairs = ds.pairs_in_folds(cal_folds);
    let (scores, labels) = cal_scores(ds, &cal_pairs);
    let global = LabeledConfidences::new(scores, labels)?;
    let t_ref = finite_threshold(GLOBAL_KEY, threshold_at_fpr(&global, reference)?, reference)?;

    let mut shifts = Vec::with_capacity(sets.len());
    let mut thresholds = vec![(REF_THRESHOLD_KEY.to_string(), t_ref)];
    for (k, set) in sets.iter().enumerate() {
        let name = format!("cluster {k}");
        let batch = LabeledConfidences::new(set.scores.clone(), set.labels.clone())
            .map_err(|e| name_set_error(&name, e))?;
        let t_k = finite_threshold(
            &name,
            threshold_at_fpr(&batch, reference).map_err(|e| name_set_error(&name, e))?,
            reference,
        )?;
        shifts.push((k.to_string(), t_ref - t_k));
        thresholds.push((k.to_string(), t_k));
    }

    let mut m = empty_model(MethodKind::Fsn);
    m.clusters = Some(cm);
    m.shifts = shifts;
    m.thresholds = thresholds;
    m.reference_fpr = Some(reference);
    Ok(m)
}

fn fit_gst(ds: &Dataset, cal_pairs: &[usize], opts: &FitOptions) -> Result<MethodModel> {
    let reference = opts.reference_fpr.unwrap();
    let attr_indices = ds.resolve_attributes(&opts.attributes)?;
    let sets = subgroup_sets(ds, cal_pairs, &attr_indices);
    if sets.is_empty() {
        return Err(Error::Fit(
            "gst: no intra-subgroup calibration pairs".into(),
        ));
    }
    let (scores, labels) = cal_scores(ds, cal_pairs);
    let global = LabeledConfidences::new(scores, labels)?;
    let t_ref = finite_threshold(GLOBAL_KEY, threshold_at_fpr(&global, reference)?, reference)?;

    let mut thresholds = vec![(REF_THRESHOLD_KEY.to_string(), t_ref)];
    for (g, set) in &sets {
        let name = format!("subgroup {g}");
        check_set(&name, &set.labels)?;
        let batch = LabeledConfidences::new(set.scores.clone(), set.labels.clone())
            .map_err(|e| name_set_error(&name, e))?;
        let t_g = finite_threshold(
            &name,
            threshold_at_fpr(&batch, reference).map_err(|e| name_set_error(&name, e))?,
            reference,
        )?;
        thresholds.push((g.clone(), t_g));
    }

    let mut m = empty_model(MethodKind::Gst);
    m.thresholds = thresholds;
    m.reference_fpr = Some(reference);
    Ok(m)
}
