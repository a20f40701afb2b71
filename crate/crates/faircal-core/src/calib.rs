//! Post-hoc monotone calibration maps: beta calibration, equal-mass
//! histogram binning, and isotonic regression.
//!
//! All maps share one contract: `fit` consumes calibration scores with
//! genuine/imposter labels, `apply` sends any raw score to a confidence in
//! `[0, 1]`. Beta calibration works in rescaled score space `s' =
//! clamp((s+1)/2, ε, 1−ε)` because its log features need `(0, 1)` inputs;
//! binning and isotonic operate on raw scores directly (both are invariant
//! to monotone rescaling, so nothing is lost).
//!
//! Serialised form (embedded inside method-model files): one kind tag byte
//! — 0 identity, 1 beta, 2 binning, 3 isotonic — followed by the kind's
//! parameter arrays, each a u32 LE length prefix then f64 LE values.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Distance kept from the ends of `(0, 1)` when rescaling scores, so the
/// beta features `ln s'` and `ln(1−s')` stay finite.
pub const RESCALE_EPS: f64 = 1e-6;

/// Newton stops once the gradient infinity-norm falls below this.
const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON_ITER: usize = 200;
/// Ridge added to the Hessian diagonal; keeps the solve well-posed when a
/// feature's curvature collapses.
const RIDGE: f64 = 1e-12;

/// Maps a cosine similarity in `[-1, 1]` to `(0, 1)`.
pub fn rescale_score(s: f64) -> f64 {
    ((s + 1.0) / 2.0).clamp(RESCALE_EPS, 1.0 - RESCALE_EPS)
}

/// Default equal-mass bin count for a calibration set of `n` pairs: 10 for
/// small sets, 25 once the set reaches 10⁵ pairs.
pub fn default_bins(n: usize) -> usize {
    if n < 100_000 {
        10
    } else {
        25
    }
}

/// Which calibration family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Calibrator {
    Beta,
    Binning,
    Isotonic,
}

impl Calibrator {
    /// Fits a map of this family on raw scores. Beta rescales internally;
    /// binning picks `min(default_bins(n), n)` bins.
    pub fn fit(self, scores: &[f64], labels: &[bool]) -> Result<CalibrationMap> {
        match self {
            Calibrator::Beta => {
                let sp: Vec<f64> = scores.iter().map(|&s| rescale_score(s)).collect();
                fit_beta(&sp, labels)
            }
            Calibrator::Binning => {
                let m = default_bins(scores.len()).min(scores.len());
                fit_binning(scores, labels, m)
            }
            Calibrator::Isotonic => fit_isotonic(scores, labels),
        }
    }
}

impl FromStr for Calibrator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Calibrator::Beta),
            "binning" => Ok(Calibrator::Binning),
            "isotonic" => Ok(Calibrator::Isotonic),
            other => Err(Error::Config(format!(
                "unknown calibrator `{other}` (expected beta, binning or isotonic)"
            ))),
        }
    }
}

impl std::fmt::Display for Calibrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Calibrator::Beta => "beta",
            Calibrator::Binning => "binning",
            Calibrator::Isotonic => "isotonic",
        })
    }
}

/// A fitted score→confidence map.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationMap {
    /// Returns the rescaled score unchanged.
    Identity,
    /// `σ(θ₁ ln s' − θ₂ ln(1−s') + θ₃)` on the rescaled score.
    Beta { t1: f64, t2: f64, t3: f64 },
    /// Equal-mass histogram: `edges` are ascending interior boundaries
    /// (ties to the right), `confidences` has one entry per bin.
    Binning {
        edges: Vec<f64>,
        confidences: Vec<f64>,
    },
    /// Piecewise-constant left-continuous steps: `apply(s)` is the value of
    /// the first breakpoint `≥ s`, or the last value beyond the end.
    Isotonic {
        breakpoints: Vec<f64>,
        values: Vec<f64>,
    },
}

impl CalibrationMap {
    /// Evaluates the map on a raw score.
    pub fn apply(&self, s: f64) -> f64 {
        match self {
            CalibrationMap::Identity => rescale_score(s),
            CalibrationMap::Beta { t1, t2, t3 } => {
                let sp = rescale_score(s);
                sigmoid(t1 * sp.ln() - t2 * (-sp).ln_1p() + t3)
            }
            CalibrationMap::Binning { edges, confidences } => {
                let bin = edges.partition_point(|&e| e <= s);
                confidences[bin]
            }
            CalibrationMap::Isotonic {
                breakpoints,
                values,
            } => {
                let i = breakpoints.partition_point(|&b| b < s);
                if i == values.len() {
                    values[values.len() - 1]
                } else {
                    values[i]
                }
            }
        }
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        match self {
            CalibrationMap::Identity => w.write_u8(0),
            CalibrationMap::Beta { t1, t2, t3 } => {
                w.write_u8(1)?;
                write_array(w, &[*t1, *t2, *t3])
            }
            CalibrationMap::Binning { edges, confidences } => {
                w.write_u8(2)?;
                write_array(w, edges)?;
                write_array(w, confidences)
            }
            CalibrationMap::Isotonic {
                breakpoints,
                values,
            } => {
                w.write_u8(3)?;
                write_array(w, breakpoints)?;
                write_array(w, values)
            }
        }
    }

    pub(crate) fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let io_err = |e: std::io::Error| Error::io(path, e);
        let bad = |msg: &str| Error::Structural(format!("{}: {msg}", path.display()));
        let tag = r.read_u8().map_err(io_err)?;
        let map = match tag {
            0 => CalibrationMap::Identity,
            1 => {
                let t = read_array(r, path)?;
                if t.len() != 3 {
                    return Err(bad("beta map must carry exactly 3 parameters"));
                }
                CalibrationMap::Beta {
                    t1: t[0],
                    t2: t[1],
                    t3: t[2],
                }
            }
            2 => {
                let edges = read_array(r, path)?;
                let confidences = read_array(r, path)?;
                if confidences.len() != edges.len() + 1 {
                    return Err(bad("binning map needs one more confidence than edges"));
                }
                CalibrationMap::Binning { edges, confidences }
            }
            3 => {
                let breakpoints = read_array(r, path)?;
                let values = read_array(r, path)?;
                if breakpoints.len() != values.len() || values.is_empty() {
                    return Err(bad(
                        "isotonic map needs equally many breakpoints and values",
                    ));
                }
                CalibrationMap::Isotonic {
                    breakpoints,
                    values,
                }
            }
            other => return Err(bad(&format!("unknown calibration-map tag {other}"))),
        };
        Ok(map)
    }
}

fn write_array<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(vals.len() as u32)?;
    for &v in vals {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R, path: &Path) -> Result<Vec<f64>> {
    let io_err = |e: std::io::Error| Error::io(path, e);
    let len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut vals = Vec::with_capacity(len);
    for _ in 0..len {
        let v = r.read_f64::<LittleEndian>().map_err(io_err)?;
        if v.is_nan() {
            return Err(Error::Structural(format!(
                "{}: NaN parameter in calibration map",
                path.display()
            )));
        }
        vals.push(v);
    }
    Ok(vals)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

// ─── beta calibration ───────────────────────────────────────────────────────

/// Fits beta calibration on rescaled scores `s' ∈ (0, 1)`.
///
/// Logistic regression on features `(ln s', −ln(1−s'))` with intercept,
/// minimised by damped Newton on the mean log-loss. Negative slope
/// coefficients are handled by refitting with the offending features
/// removed, repeated until no active slope is negative — at worst an
/// intercept-only constant map — which keeps the map non-decreasing.
pub fn fit_beta(scores: &[f64], labels: &[bool]) -> Result<CalibrationMap> {
    if scores.len() != labels.len() {
        return Err(Error::Fit(format!(
            "beta calibration: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.len() < 2 {
        return Err(Error::Fit(
            "beta calibration needs at least 2 points".into(),
        ));
    }
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::Fit(
            "beta calibration requires both classes in the calibration set".into(),
        ));
    }
    for &s in scores {
        if !(s > 0.0 && s < 1.0) || !s.is_finite() {
            return Err(Error::Fit(format!(
                "beta calibration: score {s} outside (0,1); rescale first"
            )));
        }
    }

    let rows: Vec<[f64; 3]> = scores
        .iter()
        .map(|&s| [s.ln(), -(-s).ln_1p(), 1.0])
        .collect();
    let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

    // Dropping one slope can push the other negative on the refit (the two
    // features are strongly correlated), so cascade until every remaining
    // slope is non-negative. Each pass deactivates at least one feature.
    let mut active = [true, true];
    let mut theta = newton_logistic(&rows, &y, active)?;
    while theta[0] < 0.0 || theta[1] < 0.0 {
        active[0] &= theta[0] >= 0.0;
        active[1] &= theta[1] >= 0.0;
        theta = newton_logistic(&rows, &y, active)?;
    }
    Ok(CalibrationMap::Beta {
        t1: theta[0],
        t2: theta[1],
        t3: theta[2],
    })
}

/// Damped Newton minimisation of the mean logistic loss over the features
/// enabled in `active` (the intercept is always active). Inactive
/// coefficients stay exactly zero.
fn newton_logistic(rows: &[[f64; 3]], y: &[f64], active: [bool; 2]) -> Result<[f64; 3]> {
    let idx: Vec<usize> = (0..3).filter(|&j| j == 2 || active[j]).collect();
    let dim = idx.len();
    let n_inv = 1.0 / rows.len() as f64;

    let loss_at = |t: &[f64; 3]| -> f64 {
        let mut acc = 0.0;
        for (x, &yi) in rows.iter().zip(y) {
            let z = t[0] * x[0] + t[1] * x[1] + t[2];
            acc += softplus(z) - yi * z;
        }
        acc * n_inv
    };

    let mut theta = [0.0f64; 3];
    let mut cur = loss_at(&theta);
    for _ in 0..MAX_NEWTON_ITER {
        let mut g = vec![0.0f64; dim];
        let mut h = vec![vec![0.0f64; dim]; dim];
        for (x, &yi) in rows.iter().zip(y) {
            let z = theta[0] * x[0] + theta[1] * x[1] + theta[2];
            let p = sigmoid(z);
            let r = p - yi;
            let w = p * (1.0 - p);
            for (a, &ja) in idx.iter().enumerate() {
                g[a] += r * x[ja];
                for (b, &jb) in idx.iter().enumerate() {
                    h[a][b] += w * x[ja] * x[jb];
                }
            }
        }
        for a in 0..dim {
            g[a] *= n_inv;
            for v in &mut h[a] {
                *v *= n_inv;
            }
            h[a][a] += RIDGE;
        }
        let grad_norm = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if grad_norm < GRAD_TOL {
            return Ok(theta);
        }

        let delta = solve_linear(h, g)?;
        // Step-halving line search; accepting equal loss matters near the
        // optimum where decreases fall below f64 resolution before the
        // gradient reaches tolerance.
        let mut alpha = 1.0;
        let mut stepped = false;
        for _ in 0..60 {
            let mut cand = theta;
            for (a, &j) in idx.iter().enumerate() {
                cand[j] = theta[j] - alpha * delta[a];
            }
            let l = loss_at(&cand);
            if l <= cur {
                theta = cand;
                cur = l;
                stepped = true;
                break;
            }
            alpha *= 0.5;
        }
        if !stepped {
            break;
        }
    }
    // Re-check after the loop: the last accepted step may have landed inside
    // tolerance.
    let mut g = [0.0f64; 3];
    for (x, &yi) in rows.iter().zip(y) {
        let z = theta[0] * x[0] + theta[1] * x[1] + theta[2];
        let r = sigmoid(z) - yi;
        for &j in &idx {
            g[j] += r * x[j];
        }
    }
    let grad_norm = idx.iter().fold(0.0f64, |m, &j| m.max((g[j] * n_inv).abs()));
    if grad_norm < GRAD_TOL {
        Ok(theta)
    } else {
        Err(Error::Convergence {
            what: "beta calibration".into(),
            grad_norm,
        })
    }
}

/// Gaussian elimination with partial pivoting for the tiny (≤3×3) Newton
/// systems.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-300 {
            return Err(Error::Fit(
                "beta calibration: singular Newton system".into(),
            ));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        // The pivot row itself is not modified below, so a snapshot is safe.
        let pivot_row = a[col].clone();
        for row in col + 1..n {
            let f = a[row][col] / pivot_row[col];
            for (v, &p) in a[row].iter_mut().zip(&pivot_row).skip(col) {
                *v -= f * p;
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Ok(x)
}

// ─── histogram binning ──────────────────────────────────────────────────────

/// Fits an `m`-bin equal-mass histogram map on raw scores.
///
/// Interior edges sit at the empirical quantiles `sorted[⌊j·n/m⌋]`; a score
/// equal to an edge belongs to the bin above it (ties to the right). Each
/// bin's confidence is its positive fraction; a bin left empty by duplicate
/// edges gets confidence 0 and is unreachable through `apply`.
pub fn fit_binning(scores: &[f64], labels: &[bool], m: usize) -> Result<CalibrationMap> {
    if m < 1 {
        return Err(Error::Structural("binning: bin count must be >= 1".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Fit(format!(
            "binning: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.len() < m {
        return Err(Error::Fit(format!(
            "binning: {} scores cannot fill {m} bins",
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Fit("binning: NaN score".into()));
    }

    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let edges: Vec<f64> = (1..m).map(|j| sorted[j * n / m]).collect();

    let mut pos = vec![0u64; m];
    let mut tot = vec![0u64; m];
    for (&s, &y) in scores.iter().zip(labels) {
        let bin = edges.partition_point(|&e| e <= s);
        tot[bin] += 1;
        if y {
            pos[bin] += 1;
        }
    }
    let confidences = (0..m)
        .map(|b| {
            if tot[b] == 0 {
                0.0
            } else {
                pos[b] as f64 / tot[b] as f64
            }
        })
        .collect();
    Ok(CalibrationMap::Binning { edges, confidences })
}

// ─── isotonic regression ────────────────────────────────────────────────────

/// Fits isotonic regression by pool-adjacent-violators.
///
/// Tied scores are pooled into one weighted point before merging, so the
/// result is a well-defined function of the score. Block means are the
/// least-squares solution over non-decreasing maps.
pub fn fit_isotonic(scores: &[f64], labels: &[bool]) -> Result<CalibrationMap> {
    if scores.is_empty() {
        return Err(Error::Fit("isotonic: empty input".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Fit(format!(
            "isotonic: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Fit("isotonic: NaN score".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    // Pool tied scores into complete weighted points first; merging as the
    // members trickle in would let a partial tie's rate trigger a spurious
    // violation against the block to its left.
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    for &i in &order {
        let y = if labels[i] { 1.0 } else { 0.0 };
        match groups.last_mut() {
            Some(g) if g.2 == scores[i] => {
                g.0 += y;
                g.1 += 1.0;
            }
            _ => groups.push((y, 1.0, scores[i])),
        }
    }

    // (positive mass, weight, rightmost score) per block.
    let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
    for g in groups {
        blocks.push(g);
        while blocks.len() >= 2 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.0 / prev.1 > last.0 / last.1 {
                blocks.pop();
                let b = blocks.last_mut().unwrap();
                b.0 += last.0;
                b.1 += last.1;
                b.2 = last.2;
            } else {
                break;
            }
        }
    }

    let breakpoints = blocks.iter().map(|b| b.2).collect();
    let values = blocks.iter().map(|b| (b.0 / b.1).clamp(0.0, 1.0)).collect();
    Ok(CalibrationMap::Isotonic {
        breakpoints,
        values,
    })
}
