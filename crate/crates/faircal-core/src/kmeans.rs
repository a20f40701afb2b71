//! Seeded k-means over embedding vectors.
//!
//! Lloyd's algorithm with k-means++ initialisation. Runs are deterministic
//! for a given seed: the initialisation draws from a counter-based RNG,
//! point assignment is an order-preserving map (parallel under the
//! `parallel` feature), and centroid accumulation is always sequential so
//! floating-point summation order — and therefore the result — is identical
//! with and without threads.
//!
//! Fitted models serialise to a small binary format:
//!
//! | field      | encoding                       |
//! |------------|--------------------------------|
//! | magic      | `FCM1` (4 bytes)               |
//! | k          | u32 little-endian              |
//! | dim        | u32 little-endian              |
//! | centroids  | k × dim × f64 little-endian    |
//! | sizes      | k × u64 little-endian          |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec;

/// Magic prefix of the serialised cluster model.
pub const CLUSTER_MAGIC: &[u8; 4] = b"FCM1";

/// Maximum Lloyd iterations before giving up on convergence.
const MAX_ITER: usize = 300;
/// Convergence threshold on the largest centroid displacement.
const SHIFT_TOL: f64 = 1e-6;

/// A fitted k-means model.
#[derive(Debug, Clone)]
pub struct ClusterModel {
    k: usize,
    dim: usize,
    /// Row-major `k × dim`.
    centroids: Vec<f64>,
    /// Points per cluster in the training data.
    sizes: Vec<u64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn sizes(&self) -> &[u64] {
        &self.sizes
    }

    /// Index of the nearest centroid by squared Euclidean distance; ties go
    /// to the lowest index.
    pub fn assign(&self, point: &[f64]) -> usize {
        debug_assert_eq!(point.len(), self.dim);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k {
            let d = sq_dist(point, self.centroid(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    /// Assigns every row of `points` (row-major, `n × dim`).
    pub fn assign_all(&self, points: &[f64]) -> Vec<usize> {
        let n = points.len() / self.dim;
        exec::map_range(n, |i| {
            self.assign(&points[i * self.dim..(i + 1) * self.dim])
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut inner = || -> std::io::Result<()> {
            w.write_all(CLUSTER_MAGIC)?;
            w.write_u32::<LittleEndian>(self.k as u32)?;
            w.write_u32::<LittleEndian>(self.dim as u32)?;
            for &v in &self.centroids {
                w.write_f64::<LittleEndian>(v)?;
            }
            for &s in &self.sizes {
                w.write_u64::<LittleEndian>(s)?;
            }
            w.flush()
        };
        inner().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != CLUSTER_MAGIC {
            return Err(Error::Structural(format!(
                "{}: not a cluster model (bad magic)",
                path.display()
            )));
        }
        Self::read_from(&mut r, path)
    }

    /// Reads the body (after the magic) from an open stream. Used by the
    /// method-model format, which embeds cluster models.
    pub(crate) fn read_from<R: Read>(r: &mut R, path: &Path) -> Result<Self> {
        let io_err = |e: std::io::Error| Error::io(path, e);
        let k = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let dim = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        if k == 0 || dim == 0 {
            return Err(Error::Structural(format!(
                "{}: cluster model with k={k}, dim={dim}",
                path.display()
            )));
        }
        let mut centroids = Vec::with_capacity(k * dim);
        for _ in 0..k * dim {
            centroids.push(r.read_f64::<LittleEndian>().map_err(io_err)?);
        }
        let mut sizes = Vec::with_capacity(k);
        for _ in 0..k {
            sizes.push(r.read_u64::<LittleEndian>().map_err(io_err)?);
        }
        Ok(ClusterModel {
            k,
            dim,
            centroids,
            sizes,
        })
    }

    /// Writes the body (after the magic) to an open stream.
    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_u32::<LittleEndian>(self.k as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for &v in &self.centroids {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &s in &self.sizes {
            w.write_u64::<LittleEndian>(s)?;
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fits k-means to `points` (row-major, `n × dim`).
///
/// Fails if `k` exceeds the number of distinct rows — Lloyd's algorithm
/// cannot produce `k` non-empty clusters from fewer distinct points.
pub fn fit_kmeans(points: &[f64], dim: usize, k: usize, seed: u64) -> Result<ClusterModel> {
    fit_kmeans_traced(points, dim, k, seed).map(|(m, _)| m)
}

/// As [`fit_kmeans`], additionally returning the within-cluster
/// sum-of-squares after each Lloyd iteration (used by tests to check the
/// objective never increases).
pub(crate) fn fit_kmeans_traced(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
) -> Result<(ClusterModel, Vec<f64>)> {
    if dim == 0 {
        return Err(Error::Fit("k-means: dimension must be >= 1".into()));
    }
    if !points.len().is_multiple_of(dim) {
        return Err(Error::Fit(format!(
            "k-means: {} values do not divide into rows of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 {
        return Err(Error::Fit("k-means: k must be >= 1".into()));
    }
    let distinct = count_distinct_rows(points, dim, n);
    if k > distinct {
        return Err(Error::Fit(format!(
            "k-means: k={k} exceeds the {distinct} distinct points available"
        )));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(points, dim, n, k, &mut rng);

    let mut assignment: Vec<usize>;
    let mut trace = Vec::new();
    for _ in 0..MAX_ITER {
        let model = ClusterModel {
            k,
            dim,
            centroids: centroids.clone(),
            sizes: vec![],
        };
        assignment = model.assign_all(points);
        repair_empty_clusters(points, dim, n, &mut centroids, &mut assignment);

        // Sequential accumulation keeps summation order fixed regardless of
        // thread count.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0u64; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut max_shift_sq = 0.0f64;
        for c in 0..k {
            // Repair guarantees every cluster is non-empty here.
            let inv = 1.0 / counts[c] as f64;
            let mut shift_sq = 0.0;
            for d in 0..dim {
                let new = sums[c * dim + d] * inv;
                let delta = new - centroids[c * dim + d];
                shift_sq += delta * delta;
                centroids[c * dim + d] = new;
            }
            max_shift_sq = max_shift_sq.max(shift_sq);
        }

        let model = ClusterModel {
            k,
            dim,
            centroids: centroids.clone(),
            sizes: vec![],
        };
        let objective: f64 = (0..n)
            .map(|i| sq_dist(row(i), model.centroid(model.assign(row(i)))))
            .sum();
        trace.push(objective);

        if max_shift_sq.sqrt() <= SHIFT_TOL {
            break;
        }
    }

    // Final assignment against the converged centroids fixes the sizes.
    let mut model = ClusterModel {
        k,
        dim,
        centroids,
        sizes: vec![0; k],
    };
    for &c in &model.assign_all(points) {
        model.sizes[c] += 1;
    }
    if model.sizes.contains(&0) {
        // Guarded against by the distinct-row check plus repair, but a clear
        // error beats a silent degenerate model.
        return Err(Error::Fit("k-means: produced an empty cluster".into()));
    }
    Ok((model, trace))
}

/// k-means++ seeding: first centre uniform, subsequent centres drawn with
/// probability proportional to squared distance from the nearest chosen
/// centre (cumulative-sum walk over a single uniform draw).
fn init_plus_plus(
    points: &[f64],
    dim: usize,
    n: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));

    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining mass on already-chosen points (possible only when
            // k equals the distinct-point count): fall back to a uniform draw;
            // duplicates are resolved by the empty-cluster repair.
            rng.random_range(0..n)
        };
        let c_start = centroids.len();
        centroids.extend_from_slice(row(next));
        let c = &centroids[c_start..c_start + dim];
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = sq_dist(row(i), c);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Reassigns one point to each empty cluster: the point farthest from its
/// current centroid, never emptying a singleton cluster. Bounded by `k`
/// passes.
fn repair_empty_clusters(
    points: &[f64],
    dim: usize,
    n: usize,
    centroids: &mut [f64],
    assignment: &mut [usize],
) {
    let k = centroids.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    for _ in 0..k {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let empty = match counts.iter().position(|&c| c == 0) {
            Some(e) => e,
            None => return,
        };
        // Farthest point whose donor cluster keeps at least one member;
        // ties resolve to the lowest point index via strict `>`.
        let mut donor = usize::MAX;
        let mut worst = -1.0f64;
        for i in 0..n {
            if counts[assignment[i]] <= 1 {
                continue;
            }
            let d = sq_dist(
                row(i),
                &centroids[assignment[i] * dim..(assignment[i] + 1) * dim],
            );
            if d > worst {
                worst = d;
                donor = i;
            }
        }
        if donor == usize::MAX {
            return; // nothing can move; caller surfaces the degenerate fit
        }
        assignment[donor] = empty;
        centroids[empty * dim..(empty + 1) * dim].copy_from_slice(row(donor));
    }
}

fn count_distinct_rows(points: &[f64], dim: usize, n: usize) -> usize {
    use std::collections::HashSet;
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(n);
    for i in 0..n {
        let bits: Vec<u64> = points[i * dim..(i + 1) * dim]
            .iter()
            .map(|v| v.to_bits())
            .collect();
        seen.insert(bits);
    }
    seen.len()
}
