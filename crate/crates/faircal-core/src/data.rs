//! Pair manifests, embedding stores and the in-memory [`Dataset`].
//!
//! # Pair manifest (CSV, UTF-8)
//!
//! One verification pair per row, with a mandatory header:
//!
//! ```text
//! id1,id2,label,fold[,attr:<name>1,attr:<name>2]...
//! ```
//!
//! `label` is the literal `0` (imposter) or `1` (genuine); `fold` is a
//! non-negative integer. Sensitive attributes are optional and come in column
//! pairs carrying the value for each image of the pair, e.g.
//! `attr:ethnicity1,attr:ethnicity2`. Pairs that reference an id missing from
//! the embedding store are dropped at load time and counted in
//! [`Dataset::dropped_pairs`].
//!
//! # Embedding store
//!
//! Binary format (detected by its magic prefix):
//!
//! | field            | encoding                          |
//! |------------------|-----------------------------------|
//! | magic            | `FCE1` (4 bytes)                  |
//! | dimension `d`    | u32 little-endian                 |
//! | count `n`        | u64 little-endian                 |
//! | record × n       | u16 LE id byte length, id (UTF-8), d × f32 LE |
//!
//! Text alternative: headerless CSV rows of `id` followed by `d` numeric
//! columns. Either way, vectors are held as `f64` in memory; binary files
//! round-trip bit-exactly because `f32 -> f64 -> f32` is lossless.

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

/// Magic prefix of the binary embedding format.
pub const EMBEDDING_MAGIC: &[u8; 4] = b"FCE1";

/// A single verification pair from a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub id1: String,
    pub id2: String,
    /// `true` for genuine pairs (manifest label `1`).
    pub label: bool,
    pub fold: usize,
    /// Attribute values `(image1, image2)`, aligned with
    /// [`Dataset::attribute_names`].
    pub attrs: Vec<(String, String)>,
    /// Embedding indices resolved against the store at load time.
    pub(crate) e1: usize,
    pub(crate) e2: usize,
}

impl PairRecord {
    pub fn new(
        id1: impl Into<String>,
        id2: impl Into<String>,
        label: bool,
        fold: usize,
        attrs: Vec<(String, String)>,
    ) -> Self {
        PairRecord {
            id1: id1.into(),
            id2: id2.into(),
            label,
            fold,
            attrs,
            e1: usize::MAX,
            e2: usize::MAX,
        }
    }
}

/// Subgroup of a pair under a chosen set of attributes.
///
/// A pair is `Named` when every selected attribute agrees between its two
/// images (the name joins the values with `_`, e.g. `asian_F`), and
/// `Intergroup` otherwise. Intergroup pairs take part in global metrics and
/// calibration fitting but are excluded from per-subgroup statistics.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubgroupKey {
    Named(String),
    Intergroup,
}

impl SubgroupKey {
    /// The subgroup name, or `None` for intergroup pairs.
    pub fn name(&self) -> Option<&str> {
        match self {
            SubgroupKey::Named(n) => Some(n),
            SubgroupKey::Intergroup => None,
        }
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubgroupKey::Named(n) => f.write_str(n),
            SubgroupKey::Intergroup => f.write_str("INTERGROUP"),
        }
    }
}

/// Embeddings plus the pair manifest that references them.
#[derive(Debug, Clone)]
pub struct Dataset {
    dim: usize,
    ids: Vec<String>,
    /// Row-major `ids.len() × dim`.
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
    pub attribute_names: Vec<String>,
    pub pairs: Vec<PairRecord>,
    /// Number of folds; fold indices are exactly `0..fold_count` and every
    /// fold contains at least one pair.
    pub fold_count: usize,
    /// Pairs discarded at load because an embedding id was missing.
    pub dropped_pairs: usize,
}

impl Dataset {
    /// Assembles and validates a dataset from parts. Pairs referencing unknown
    /// ids are dropped (and counted); everything else that is malformed is an
    /// error.
    pub fn new(
        ids: Vec<String>,
        vectors: Vec<f64>,
        dim: usize,
        attribute_names: Vec<String>,
        pairs: Vec<PairRecord>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Structural("embedding dimension must be >= 1".into()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::Structural(format!(
                "expected {} × {} = {} embedding values, got {}",
                ids.len(),
                dim,
                ids.len() * dim,
                vectors.len()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if id.is_empty() {
                return Err(Error::Structural(format!("embedding #{i} has an empty id")));
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Structural(format!("duplicate embedding id `{id}`")));
            }
            let v = &vectors[i * dim..(i + 1) * dim];
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Structural(format!(
                    "embedding `{id}` contains a non-finite value"
                )));
            }
            if v.iter().map(|x| x * x).sum::<f64>() == 0.0 {
                return Err(Error::Structural(format!("embedding `{id}` has zero norm")));
            }
        }

        let total = pairs.len();
        let mut kept = Vec::with_capacity(total);
        for mut p in pairs {
            if p.attrs.len() != attribute_names.len() {
                return Err(Error::Structural(format!(
                    "pair ({}, {}) carries {} attribute values, manifest declares {}",
                    p.id1,
                    p.id2,
                    p.attrs.len(),
                    attribute_names.len()
                )));
            }
            match (index.get(&p.id1), index.get(&p.id2)) {
                (Some(&a), Some(&b)) => {
                    p.e1 = a;
                    p.e2 = b;
                    kept.push(p);
                }
                _ => continue, // dropped, counted below
            }
        }
        let dropped_pairs = total - kept.len();
        if kept.is_empty() {
            return Err(Error::Structural("no usable pairs after resolution".into()));
        }

        let max_fold = kept.iter().map(|p| p.fold).max().unwrap();
        let mut seen = vec![false; max_fold + 1];
        for p in &kept {
            seen[p.fold] = true;
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(Error::Structural(format!(
                "fold indices are not contiguous: fold {gap} has no pairs (max fold {max_fold})"
            )));
        }

        Ok(Dataset {
            dim,
            ids,
            vectors,
            index,
            attribute_names,
            pairs: kept,
            fold_count: max_fold + 1,
            dropped_pairs,
        })
    }

    /// Loads a manifest and an embedding store (binary or text, detected by
    /// content) into a dataset.
    pub fn load(pairs_path: &Path, embeddings_path: &Path) -> Result<Self> {
        let (ids, vectors, dim) = read_embeddings(embeddings_path)?;
        let (attribute_names, pairs) = read_pairs(pairs_path)?;
        Dataset::new(ids, vectors, dim, attribute_names, pairs)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding_count(&self) -> usize {
        self.ids.len()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn embedding_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Cosine similarity of a pair's two embeddings.
    pub fn pair_score(&self, pair: &PairRecord) -> f64 {
        // Dimensions and norms were validated at construction.
        cosine_similarity(self.embedding(pair.e1), self.embedding(pair.e2)).unwrap()
    }

    /// Embedding indices `(e1, e2)` of a pair.
    pub fn pair_embeddings(&self, pair: &PairRecord) -> (usize, usize) {
        (pair.e1, pair.e2)
    }

    /// Resolves attribute names to indices into `PairRecord::attrs`.
    pub fn resolve_attributes(&self, names: &[String]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| {
                self.attribute_names
                    .iter()
                    .position(|a| a == n)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "unknown attribute `{n}` (manifest has: {})",
                            if self.attribute_names.is_empty() {
                                "none".to_string()
                            } else {
                                self.attribute_names.join(", ")
                            }
                        ))
                    })
            })
            .collect()
    }

    /// Subgroup of a pair under the selected attributes (`attr_indices` from
    /// [`Dataset::resolve_attributes`]). With no attributes selected every
    /// pair falls into the single unnamed subgroup.
    pub fn subgroup_key(&self, pair: &PairRecord, attr_indices: &[usize]) -> SubgroupKey {
        let mut parts = Vec::with_capacity(attr_indices.len());
        for &i in attr_indices {
            let (a, b) = &pair.attrs[i];
            if a != b {
                return SubgroupKey::Intergroup;
            }
            parts.push(a.as_str());
        }
        SubgroupKey::Named(parts.join("_"))
    }

    /// Scales every embedding to unit Euclidean norm (the `--normalize` CLI
    /// option). Cosine scores are unaffected; k-means geometry is not.
    pub fn normalize_embeddings(&mut self) {
        for i in 0..self.ids.len() {
            let row = &mut self.vectors[i * self.dim..(i + 1) * self.dim];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Zero norms were rejected at construction.
            for x in row {
                *x /= norm;
            }
        }
    }

    /// Indices of pairs whose fold is in `folds`.
    pub fn pairs_in_folds(&self, folds: &BTreeSet<usize>) -> Vec<usize> {
        self.pairs
            .iter()
            .enumerate()
            .filter(|(_, p)| folds.contains(&p.fold))
            .map(|(i, _)| i)
            .collect()
    }

    /// Writes the pair manifest in the CSV format documented at module level.
    pub fn write_pairs(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut header = vec![
            "id1".to_string(),
            "id2".to_string(),
            "label".to_string(),
            "fold".to_string(),
        ];
        for name in &self.attribute_names {
            header.push(format!("attr:{name}1"));
            header.push(format!("attr:{name}2"));
        }
        w.write_record(&header).map_err(|e| csv_error(path, e))?;
        for p in &self.pairs {
            let mut row = vec![
                p.id1.clone(),
                p.id2.clone(),
                if p.label { "1".into() } else { "0".into() },
                p.fold.to_string(),
            ];
            for (a, b) in &p.attrs {
                row.push(a.clone());
                row.push(b.clone());
            }
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Writes the binary embedding store (`FCE1`). Values are truncated to
    /// f32, matching the on-disk precision.
    pub fn write_embeddings_binary(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut inner = || -> std::io::Result<()> {
            w.write_all(EMBEDDING_MAGIC)?;
            w.write_u32::<LittleEndian>(self.dim as u32)?;
            w.write_u64::<LittleEndian>(self.ids.len() as u64)?;
            for (i, id) in self.ids.iter().enumerate() {
                let bytes = id.as_bytes();
                if bytes.len() > u16::MAX as usize {
                    return Err(std::io::Error::new(
                        ErrorKind::InvalidInput,
                        format!("id `{id}` exceeds {} bytes", u16::MAX),
                    ));
                }
                w.write_u16::<LittleEndian>(bytes.len() as u16)?;
                w.write_all(bytes)?;
                for &v in self.embedding(i) {
                    w.write_f32::<LittleEndian>(v as f32)?;
                }
            }
            w.flush()
        };
        inner().map_err(|e| Error::io(path, e))
    }

    /// Writes the headerless text embedding store.
    pub fn write_embeddings_text(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let mut inner = || -> std::io::Result<()> {
            for (i, id) in self.ids.iter().enumerate() {
                write!(w, "{id}")?;
                for &v in self.embedding(i) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
            w.flush()
        };
        inner().map_err(|e| Error::io(path, e))
    }
}

/// Cosine similarity between two vectors, clamped to `[-1, 1]` against
/// floating-point drift.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Structural(format!(
            "cosine: dimension mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Structural("cosine: zero-norm vector".into()));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = match e.position() {
        Some(p) => p.line(),
        None => 0,
    };
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        }
    }
}

/// Parses a pair manifest. Returns the attribute names declared by the header
/// and the (unresolved) pair records.
pub fn read_pairs(path: &Path) -> Result<(Vec<String>, Vec<PairRecord>)> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let fixed = ["id1", "id2", "label", "fold"];
    if headers.len() < 4 || (0..4).any(|i| &headers[i] != fixed[i]) {
        return Err(parse_err(
            1,
            format!(
                "header must start with `id1,id2,label,fold`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut attribute_names = Vec::new();
    let extra: Vec<&str> = headers.iter().skip(4).collect();
    if !extra.len().is_multiple_of(2) {
        return Err(parse_err(1, "attribute columns must come in pairs".into()));
    }
    for chunk in extra.chunks(2) {
        let name1 = chunk[0]
            .strip_prefix("attr:")
            .and_then(|s| s.strip_suffix('1'));
        let name2 = chunk[1]
            .strip_prefix("attr:")
            .and_then(|s| s.strip_suffix('2'));
        match (name1, name2) {
            (Some(n1), Some(n2)) if n1 == n2 && !n1.is_empty() => {
                attribute_names.push(n1.to_string());
            }
            _ => {
                return Err(parse_err(
                    1,
                    format!(
                        "expected attribute column pair `attr:<name>1,attr:<name>2`, got `{},{}`",
                        chunk[0], chunk[1]
                    ),
                ));
            }
        }
    }

    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 4 + 2 * attribute_names.len() {
            return Err(parse_err(
                line,
                format!(
                    "expected {} columns, got {}",
                    4 + 2 * attribute_names.len(),
                    rec.len()
                ),
            ));
        }
        let label = match &rec[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(parse_err(
                    line,
                    format!("label must be 0 or 1, got `{other}`"),
                ))
            }
        };
        let fold: usize = rec[3].parse().map_err(|_| {
            parse_err(
                line,
                format!("fold must be a non-negative integer, got `{}`", &rec[3]),
            )
        })?;
        let attrs = (0..attribute_names.len())
            .map(|i| (rec[4 + 2 * i].to_string(), rec[5 + 2 * i].to_string()))
            .collect();
        pairs.push(PairRecord::new(
            rec[0].to_string(),
            rec[1].to_string(),
            label,
            fold,
            attrs,
        ));
    }
    if pairs.is_empty() {
        return Err(Error::Structural(format!(
            "{}: manifest contains no pairs",
            path.display()
        )));
    }
    Ok((attribute_names, pairs))
}

/// Reads an embedding store, detecting binary vs text by the magic prefix.
/// Returns `(ids, row-major vectors, dim)`.
pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut magic = [0u8; 4];
    let n = read_up_to(&mut r, &mut magic).map_err(|e| Error::io(path, e))?;
    if n == 4 && &magic == EMBEDDING_MAGIC {
        read_embeddings_binary(path, r)
    } else {
        // Not binary: reopen and parse as CSV from the top.
        drop(r);
        read_embeddings_text(path)
    }
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

fn read_embeddings_binary(
    path: &Path,
    mut r: BufReader<File>,
) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let structural = |msg: String| Error::Structural(format!("{}: {msg}", path.display()));
    let mut inner = || -> std::result::Result<(Vec<String>, Vec<f64>, usize), Error> {
        let io_err = |e: std::io::Error| Error::io(path, e);
        let dim = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let count = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        if dim == 0 {
            return Err(structural("embedding dimension must be >= 1".into()));
        }
        let mut ids = Vec::with_capacity(count);
        let mut vectors = Vec::with_capacity(count.saturating_mul(dim));
        for i in 0..count {
            let id_len = r.read_u16::<LittleEndian>().map_err(io_err)? as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes).map_err(io_err)?;
            let id = String::from_utf8(id_bytes)
                .map_err(|_| structural(format!("record #{i}: id is not valid UTF-8")))?;
            ids.push(id);
            for _ in 0..dim {
                vectors.push(r.read_f32::<LittleEndian>().map_err(io_err)? as f64);
            }
        }
        let mut probe = [0u8; 1];
        if read_up_to(&mut r, &mut probe).map_err(io_err)? != 0 {
            return Err(structural(format!(
                "trailing bytes after {count} declared records"
            )));
        }
        Ok((ids, vectors, dim))
    };
    inner().map_err(|e| match e {
        // A short read means the file lied about its record count.
        Error::Io { source, .. } if source.kind() == ErrorKind::UnexpectedEof => {
            structural("truncated file".into())
        }
        other => other,
    })
}

fn read_embeddings_text(path: &Path) -> Result<(Vec<String>, Vec<f64>, usize)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    let mut dim = 0usize;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if rec.len() < 2 {
            return Err(parse_err("expected an id and at least one value".into()));
        }
        if ids.is_empty() {
            dim = rec.len() - 1;
        } else if rec.len() - 1 != dim {
            return Err(parse_err(format!(
                "expected {dim} values, got {}",
                rec.len() - 1
            )));
        }
        ids.push(rec[0].to_string());
        for j in 1..rec.len() {
            let v: f64 = rec[j].trim().parse().map_err(|_| {
                parse_err(format!("column {}: `{}` is not a number", j + 1, &rec[j]))
            })?;
            vectors.push(v);
        }
    }
    if ids.is_empty() {
        return Err(Error::Structural(format!(
            "{}: embedding store is empty",
            path.display()
        )));
    }
    Ok((ids, vectors, dim))
}

/// Groups pair indices by subgroup key. Intergroup pairs land under
/// [`SubgroupKey::Intergroup`].
pub fn group_pairs_by_subgroup<'a, I>(
    ds: &Dataset,
    pair_indices: I,
    attr_indices: &[usize],
) -> BTreeMap<SubgroupKey, Vec<usize>>
where
    I: IntoIterator<Item = &'a usize>,
{
    let mut groups: BTreeMap<SubgroupKey, Vec<usize>> = BTreeMap::new();
    for &i in pair_indices {
        let key = ds.subgroup_key(&ds.pairs[i], attr_indices);
        match groups.entry(key) {
            Entry::Occupied(mut e) => e.get_mut().push(i),
            Entry::Vacant(e) => {
                e.insert(vec![i]);
            }
        }
    }
    groups
}
