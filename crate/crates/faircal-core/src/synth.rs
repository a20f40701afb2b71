//! Seeded generator of synthetic biased verification datasets.
//!
//! Each subgroup occupies a cone around a random direction on the unit
//! sphere; identities scatter around that direction with `center_spread`,
//! and images scatter around their identity with `intra_noise`. Normalizing
//! back to the sphere attenuates a subgroup's cosine scores by a factor
//! that grows with its noise, so subgroups with unequal noise see their
//! whole score distributions sit at unequal levels — the mechanism that
//! produces unequal subgroup FPRs at a shared threshold, which the
//! calibration methods are asked to reduce.
//!
//! By default `center_spread` equals `intra_noise`, keeping each subgroup's
//! geometry self-similar: score distributions then differ mainly by that
//! level shift rather than by shape, mirroring how real verification score
//! distributions separate by demographic group. An explicit spread breaks
//! the coupling.
//!
//! Generation is single-threaded over one seeded ChaCha stream, so a spec
//! plus seed pins the dataset down to the byte.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, PairRecord};
use crate::error::{Error, Result};

/// One subgroup of the synthetic population.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgroupSpec {
    pub name: String,
    pub identities: usize,
    pub images_per_identity: usize,
    /// Scatter of identity centers around the subgroup direction.
    pub center_spread: f64,
    /// Scatter of images around their identity center — the bias knob.
    pub intra_noise: f64,
}

impl SubgroupSpec {
    /// Defaults: 100 identities of 8 images, centers scattered as widely as
    /// the images (`center_spread = intra_noise`).
    pub fn new(name: impl Into<String>, intra_noise: f64) -> Self {
        SubgroupSpec {
            name: name.into(),
            identities: 100,
            images_per_identity: 8,
            center_spread: intra_noise,
            intra_noise,
        }
    }
}

impl FromStr for SubgroupSpec {
    type Err = Error;

    /// Parses `name:noise[:identities[:images[:spread]]]`.
    fn from_str(s: &str) -> Result<Self> {
        let complain = || {
            Error::Config(format!(
                "invalid subgroup `{s}` (expected name:noise[:identities[:images[:spread]]])"
            ))
        };
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 2 || parts.len() > 5 || parts[0].is_empty() {
            return Err(complain());
        }
        let noise: f64 = parts[1].parse().map_err(|_| complain())?;
        let mut sub = SubgroupSpec::new(parts[0], noise);
        if let Some(p) = parts.get(2) {
            sub.identities = p.parse().map_err(|_| complain())?;
        }
        if let Some(p) = parts.get(3) {
            sub.images_per_identity = p.parse().map_err(|_| complain())?;
        }
        if let Some(p) = parts.get(4) {
            sub.center_spread = p.parse().map_err(|_| complain())?;
        }
        Ok(sub)
    }
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub subgroups: Vec<SubgroupSpec>,
    pub dim: usize,
    pub genuine_pairs_per_id: usize,
    pub imposter_pairs_per_id: usize,
    pub folds: usize,
    pub seed: u64,
    /// Also draw cross-subgroup imposter pairs (BFW-style). Without it all
    /// imposters stay within their subgroup (RFW-style).
    pub inter_pairs: bool,
    /// Name of the sensitive-attribute column in the emitted manifest.
    pub attribute: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            subgroups: Vec::new(),
            dim: 64,
            genuine_pairs_per_id: 12,
            // 1:4 imbalance keeps per-subgroup imposter counts high enough
            // for stable FPR estimates at the 1% operating point.
            imposter_pairs_per_id: 48,
            folds: 5,
            seed: 42,
            inter_pairs: false,
            attribute: "subgroup".to_string(),
        }
    }
}

impl SynthSpec {
    /// Loads a spec from a `key = value` text file. Blank lines and `#`
    /// comments are skipped; `subgroup` may repeat.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let mut spec = SynthSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: (lineno + 1) as u64,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected `key = value`".to_string()))?;
            let (key, value) = (key.trim(), value.trim());
            let int = |what: &str| {
                value
                    .parse::<usize>()
                    .map_err(|_| parse_err(format!("{what} must be a non-negative integer")))
            };
            match key {
                "dim" => spec.dim = int("dim")?,
                "folds" => spec.folds = int("folds")?,
                "genuine_pairs_per_id" => spec.genuine_pairs_per_id = int(key)?,
                "imposter_pairs_per_id" => spec.imposter_pairs_per_id = int(key)?,
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| parse_err("seed must be an integer".to_string()))?
                }
                "attribute" => spec.attribute = value.to_string(),
                "inter_pairs" => {
                    spec.inter_pairs = value
                        .parse()
                        .map_err(|_| parse_err("inter_pairs must be true or false".to_string()))?
                }
                "subgroup" => spec
                    .subgroups
                    .push(value.parse().map_err(|e: Error| parse_err(e.to_string()))?),
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Structural(msg));
        if self.subgroups.is_empty() {
            return bad("spec needs at least one subgroup".into());
        }
        if self.dim < 2 {
            return bad("dim must be >= 2".into());
        }
        if self.folds < 1 {
            return bad("folds must be >= 1".into());
        }
        if self.genuine_pairs_per_id == 0 && self.imposter_pairs_per_id == 0 {
            return bad("at least one pair per identity is required".into());
        }
        if self.inter_pairs && self.subgroups.len() < 2 {
            return bad("inter_pairs needs at least two subgroups".into());
        }
        let mut seen = std::collections::HashSet::new();
        for sub in &self.subgroups {
            let name = &sub.name;
            if name.is_empty() || !seen.insert(name.clone()) {
                return bad(format!(
                    "subgroup names must be nonempty and distinct (`{name}`)"
                ));
            }
            if sub.intra_noise <= 0.0 || !sub.intra_noise.is_finite() {
                return bad(format!("subgroup {name}: intra_noise must be > 0"));
            }
            if sub.center_spread < 0.0 || !sub.center_spread.is_finite() {
                return bad(format!("subgroup {name}: center_spread must be >= 0"));
            }
            if sub.identities < 2 {
                return bad(format!("subgroup {name}: at least 2 identities required"));
            }
            if sub.identities < self.folds {
                return bad(format!(
                    "subgroup {name}: {} identities cannot cover {} folds",
                    sub.identities, self.folds
                ));
            }
            if sub.images_per_identity < 1 {
                return bad(format!("subgroup {name}: images_per_identity must be >= 1"));
            }
            if self.genuine_pairs_per_id > 0 && sub.images_per_identity < 2 {
                return bad(format!(
                    "subgroup {name}: genuine pairs need at least 2 images per identity"
                ));
            }
            if self.imposter_pairs_per_id > 0 && sub.identities / self.folds < 2 {
                return bad(format!(
                    "subgroup {name}: imposter pairs need at least 2 identities per fold \
                     ({} identities over {} folds)",
                    sub.identities, self.folds
                ));
            }
        }
        Ok(())
    }
}

/// Draws a standard-normal vector and projects it onto the unit sphere.
fn unit_normal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Scales `v` to unit norm; `false` when the norm is numerically zero.
fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// A perturbed copy of `center`, renormalized.
fn scatter(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = center
            .iter()
            .map(|&c| c + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if normalize(&mut v) {
            return v;
        }
    }
}

/// Generates the dataset described by `spec`. Identity k of each subgroup is
/// assigned to fold `k mod folds`, so all of an identity's pairs share one
/// fold and no identity leaks across folds.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut ids: Vec<String> = Vec::new();
    let mut vectors: Vec<f64> = Vec::new();
    // Per identity: subgroup index, fold, and global image indices.
    let mut id_sub: Vec<usize> = Vec::new();
    let mut id_fold: Vec<usize> = Vec::new();
    let mut id_imgs: Vec<Vec<usize>> = Vec::new();

    for (gi, sub) in spec.subgroups.iter().enumerate() {
        let direction = unit_normal(&mut rng, spec.dim);
        for k in 0..sub.identities {
            let center = scatter(&mut rng, &direction, sub.center_spread);
            let mut imgs = Vec::with_capacity(sub.images_per_identity);
            for img in 0..sub.images_per_identity {
                let e = scatter(&mut rng, &center, sub.intra_noise);
                imgs.push(ids.len());
                ids.push(format!("{}_{k:03}_{img}", sub.name));
                vectors.extend_from_slice(&e);
            }
            id_sub.push(gi);
            id_fold.push(k % spec.folds);
            id_imgs.push(imgs);
        }
    }

    let mut by_sub_fold: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    let mut by_fold: Vec<Vec<usize>> = vec![Vec::new(); spec.folds];
    for i in 0..id_fold.len() {
        by_sub_fold
            .entry((id_sub[i], id_fold[i]))
            .or_default()
            .push(i);
        by_fold[id_fold[i]].push(i);
    }

    let mut pairs: Vec<PairRecord> = Vec::new();
    let mut push_pair =
        |a: usize, b: usize, label: bool, fold: usize, g1: usize, g2: usize, ids: &[String]| {
            pairs.push(PairRecord::new(
                ids[a].clone(),
                ids[b].clone(),
                label,
                fold,
                vec![(
                    spec.subgroups[g1].name.clone(),
                    spec.subgroups[g2].name.clone(),
                )],
            ));
        };

    for i in 0..id_fold.len() {
        let (g, f) = (id_sub[i], id_fold[i]);
        let imgs = &id_imgs[i];
        for _ in 0..spec.genuine_pairs_per_id {
            let a = rng.random_range(0..imgs.len());
            let mut b = rng.random_range(0..imgs.len() - 1);
            if b >= a {
                b += 1;
            }
            push_pair(imgs[a], imgs[b], true, f, g, g, &ids);
        }
        if spec.imposter_pairs_per_id > 0 {
            let peers: Vec<usize> = by_sub_fold[&(g, f)]
                .iter()
                .copied()
                .filter(|&j| j != i)
                .collect();
            for _ in 0..spec.imposter_pairs_per_id {
                let j = peers[rng.random_range(0..peers.len())];
                let a = imgs[rng.random_range(0..imgs.len())];
                let b = id_imgs[j][rng.random_range(0..id_imgs[j].len())];
                push_pair(a, b, false, f, g, id_sub[j], &ids);
            }
            if spec.inter_pairs {
                let strangers: Vec<usize> = by_fold[f]
                    .iter()
                    .copied()
                    .filter(|&j| id_sub[j] != g)
                    .collect();
                if strangers.is_empty() {
                    return Err(Error::Structural(format!(
                        "no cross-subgroup partners in fold {f} for subgroup {}",
                        spec.subgroups[g].name
                    )));
                }
                for _ in 0..spec.imposter_pairs_per_id {
                    let j = strangers[rng.random_range(0..strangers.len())];
                    let a = imgs[rng.random_range(0..imgs.len())];
                    let b = id_imgs[j][rng.random_range(0..id_imgs[j].len())];
                    push_pair(a, b, false, f, g, id_sub[j], &ids);
                }
            }
        }
    }

    Dataset::new(ids, vectors, spec.dim, vec![spec.attribute.clone()], pairs)
}
