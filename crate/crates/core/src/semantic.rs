//! Frozen semantic vectors per item and per sequence prefix, their file
//! formats, and the learnable projection into the collaborative space.
//!
//! Vectors are data, never parameters: they enter graphs as constants. The
//! text format (`SEMB v1`) round-trips f64 exactly via shortest-decimal
//! printing; a binary variant stores raw little-endian f64.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::dataio::Catalog;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

const SEMB_MAGIC: &[u8; 4] = b"SEMB";
const SEMB_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("{path}:{line}: duplicate item {id:?}")]
    DuplicateItem { path: String, line: usize, id: String },
    #[error("{path}:{line}: unknown item {id:?} (not in catalog)")]
    UnknownItem { path: String, line: usize, id: String },
    #[error("{path}:{line}: expected dimension {expected}, found {found}")]
    DimMismatch { path: String, line: usize, expected: usize, found: usize },
    #[error("semantic table missing vector for catalog item {id:?}")]
    MissingItem { id: String },
    #[error("{path}: not a binary semantic file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported semantic file version {version}")]
    BadVersion { path: String, version: u8 },
    #[error("no prefix vector for user {user:?} at position {t}")]
    MissingPrefix { user: String, t: usize },
}

/// Frozen per-item vectors bound to catalog indices.
#[derive(Clone, Debug)]
pub struct SemanticTable<F: Scalar> {
    dim: usize,
    rows: Vec<(String, Vec<F>)>,
    by_item: HashMap<usize, usize>,
}

impl<F: Scalar> SemanticTable<F> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, item_index: usize) -> Option<&[F]> {
        self.by_item.get(&item_index).map(|&r| self.rows[r].1.as_slice())
    }

    /// Rows in file/construction order.
    pub fn rows(&self) -> impl Iterator<Item = (&str, &[F])> {
        self.rows.iter().map(|(id, v)| (id.as_str(), v.as_slice()))
    }

    /// Every catalog item must have a vector before training may start.
    pub fn ensure_covers(&self, catalog: &Catalog) -> Result<(), SemanticError> {
        for idx in 1..=catalog.n_items() {
            if !self.by_item.contains_key(&idx) {
                return Err(SemanticError::MissingItem { id: catalog.item_id(idx).to_string() });
            }
        }
        Ok(())
    }

    /// Builds a table from rows produced in memory (no backing file); row
    /// positions stand in for line numbers in error messages.
    pub fn from_memory(
        rows: Vec<(String, Vec<F>)>,
        dim: usize,
        catalog: &Catalog,
    ) -> Result<Self, SemanticError> {
        Self::from_rows(rows, dim, catalog, "<memory>", 1)
    }

    fn from_rows(
        rows: Vec<(String, Vec<F>)>,
        dim: usize,
        catalog: &Catalog,
        path: &str,
        first_row_line: usize,
    ) -> Result<Self, SemanticError> {
        let mut by_item = HashMap::with_capacity(rows.len());
        let mut seen = HashSet::new();
        for (i, (id, v)) in rows.iter().enumerate() {
            let line = first_row_line + i;
            if v.len() != dim {
                return Err(SemanticError::DimMismatch {
                    path: path.to_string(),
                    line,
                    expected: dim,
                    found: v.len(),
                });
            }
            if !seen.insert(id.clone()) {
                return Err(SemanticError::DuplicateItem {
                    path: path.to_string(),
                    line,
                    id: id.clone(),
                });
            }
            let idx = catalog.item_index(id).ok_or_else(|| SemanticError::UnknownItem {
                path: path.to_string(),
                line,
                id: id.clone(),
            })?;
            by_item.insert(idx, i);
        }
        Ok(SemanticTable { dim, rows, by_item })
    }
}

/// Writes rows as `SEMB v1 <count> <D>` followed by one line per item.
/// Floats print in shortest round-trip form, so write-then-load is identity.
pub fn write_semb_text<F: Scalar>(
    path: &Path,
    dim: usize,
    rows: &[(String, Vec<F>)],
) -> Result<(), SemanticError> {
    let pstr = path.display().to_string();
    let io_err = |source| SemanticError::Io { path: pstr.clone(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut emit = |s: String| w.write_all(s.as_bytes()).map_err(io_err);
    emit(format!("SEMB v1 {} {}\n", rows.len(), dim))?;
    for (id, v) in rows {
        assert_eq!(v.len(), dim, "row {id:?} has {} dims, table declares {dim}", v.len());
        let mut line = String::with_capacity(dim * 12 + id.len());
        line.push_str(id);
        for x in v {
            line.push(' ');
            line.push_str(&format!("{x}"));
        }
        line.push('\n');
        emit(line)?;
    }
    Ok(())
}

/// Reads a text `SEMB v1` file into raw (id, vector) rows.
pub fn read_semb_text<F: Scalar>(path: &Path) -> Result<(usize, Vec<(String, Vec<F>)>), SemanticError> {
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|source| SemanticError::Io { path: pstr.clone(), source })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let malformed = |line: usize, reason: String| SemanticError::Malformed {
        path: pstr.clone(),
        line,
        reason,
    };

    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(source))) => return Err(SemanticError::Io { path: pstr, source }),
        None => return Err(malformed(1, "empty file".into())),
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "SEMB" || head[1] != "v1" {
        return Err(malformed(1, format!("bad header {header:?}")));
    }
    let count: usize = head[2].parse().map_err(|_| malformed(1, format!("bad count in {header:?}")))?;
    let dim: usize = head[3].parse().map_err(|_| malformed(1, format!("bad dim in {header:?}")))?;

    let mut rows = Vec::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|source| SemanticError::Io { path: pstr.clone(), source })?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let id = parts.next().unwrap_or("").to_string();
        if id.is_empty() {
            return Err(malformed(lineno, "missing item id".into()));
        }
        let mut v = Vec::with_capacity(dim);
        for p in parts {
            let x: f64 = p
                .parse()
                .map_err(|_| malformed(lineno, format!("bad float {p:?}")))?;
            v.push(F::from_f64_lit(x));
        }
        if v.len() != dim {
            return Err(SemanticError::DimMismatch {
                path: pstr.clone(),
                line: lineno,
                expected: dim,
                found: v.len(),
            });
        }
        rows.push((id, v));
    }
    if rows.len() != count {
        return Err(malformed(1, format!("header declares {count} rows, file has {}", rows.len())));
    }
    Ok((dim, rows))
}

/// Binary variant: magic `SEMB`, version byte, u32 count, u32 dim, then per
/// item a u16-length-prefixed id and dim little-endian f64 values.
pub fn write_semb_binary<F: Scalar>(
    path: &Path,
    dim: usize,
    rows: &[(String, Vec<F>)],
) -> Result<(), SemanticError> {
    let pstr = path.display().to_string();
    let io_err = |source| SemanticError::Io { path: pstr.clone(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(io_err);
    emit(SEMB_MAGIC)?;
    emit(&[SEMB_VERSION])?;
    emit(&(rows.len() as u32).to_le_bytes())?;
    emit(&(dim as u32).to_le_bytes())?;
    for (id, v) in rows {
        assert_eq!(v.len(), dim, "row {id:?} has {} dims, table declares {dim}", v.len());
        emit(&(id.len() as u16).to_le_bytes())?;
        emit(id.as_bytes())?;
        for x in v {
            emit(&x.to_f64_lit().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_semb_binary<F: Scalar>(
    path: &Path,
) -> Result<(usize, Vec<(String, Vec<F>)>), SemanticError> {
    let pstr = path.display().to_string();
    let io_err = |source| SemanticError::Io { path: pstr.clone(), source };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != SEMB_MAGIC {
        return Err(SemanticError::BadMagic { path: pstr });
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver).map_err(io_err)?;
    if ver[0] != SEMB_VERSION {
        return Err(SemanticError::BadVersion { path: pstr, version: ver[0] });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io_err)?;
    let count = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4).map_err(io_err)?;
    let dim = u32::from_le_bytes(b4) as usize;
    let mut rows = Vec::with_capacity(count);
    for i in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(io_err)?;
        let idlen = u16::from_le_bytes(b2) as usize;
        let mut idbuf = vec![0u8; idlen];
        r.read_exact(&mut idbuf).map_err(io_err)?;
        let id = String::from_utf8(idbuf).map_err(|_| SemanticError::Malformed {
            path: pstr.clone(),
            line: i + 1,
            reason: "item id is not UTF-8".into(),
        })?;
        let mut v = Vec::with_capacity(dim);
        let mut b8 = [0u8; 8];
        for _ in 0..dim {
            r.read_exact(&mut b8).map_err(io_err)?;
            v.push(F::from_f64_lit(f64::from_le_bytes(b8)));
        }
        rows.push((id, v));
    }
    Ok((dim, rows))
}

/// Loads a semantic table (text or binary, sniffed by magic) and binds it to
/// the catalog.
pub fn load_semantic_table<F: Scalar>(
    path: &Path,
    catalog: &Catalog,
) -> Result<SemanticTable<F>, SemanticError> {
    let pstr = path.display().to_string();
    let mut head = [0u8; 5];
    {
        let mut f = File::open(path).map_err(|source| SemanticError::Io { path: pstr.clone(), source })?;
        let n = f.read(&mut head).map_err(|source| SemanticError::Io { path: pstr.clone(), source })?;
        if n < 5 {
            return Err(SemanticError::Malformed { path: pstr, line: 1, reason: "file too short".into() });
        }
    }
    let (dim, rows) = if &head[..4] == SEMB_MAGIC && head[4] == SEMB_VERSION {
        read_semb_binary(path)?
    } else {
        read_semb_text(path)?
    };
    SemanticTable::from_rows(rows, dim, catalog, &pstr, 2)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic unit vector per item id: the id's hash seeds a private rng
/// stream, so the result is independent of catalog size and iteration order.
pub fn pseudo_embed<F: Scalar>(catalog: &Catalog, dim: usize, seed: u64) -> SemanticTable<F> {
    assert!(dim >= 2, "pseudo_embed: dimension must be at least 2");
    let mut rows = Vec::with_capacity(catalog.n_items());
    let mut by_item = HashMap::with_capacity(catalog.n_items());
    for idx in 1..=catalog.n_items() {
        let id = catalog.item_id(idx);
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(id.as_bytes()) ^ seed);
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        by_item.insert(idx, rows.len());
        rows.push((id.to_string(), v.into_iter().map(F::from_f64_lit).collect()));
    }
    SemanticTable { dim, rows, by_item }
}

/// Exact per-(user, t) prefix vectors loaded from an `SPFX v1` file.
#[derive(Clone, Debug)]
pub struct PrefixTable<F: Scalar> {
    dim: usize,
    by_key: HashMap<(String, usize), Vec<F>>,
}

impl<F: Scalar> PrefixTable<F> {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, user: &str, t: usize) -> Option<&[F]> {
        self.by_key.get(&(user.to_string(), t)).map(Vec::as_slice)
    }
}

/// Reads `SPFX v1 <count> <D>` with rows `<user_id> <t> <floats...>`.
pub fn load_prefix_table<F: Scalar>(path: &Path) -> Result<PrefixTable<F>, SemanticError> {
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|source| SemanticError::Io { path: pstr.clone(), source })?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let malformed = |line: usize, reason: String| SemanticError::Malformed {
        path: pstr.clone(),
        line,
        reason,
    };
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(source))) => return Err(SemanticError::Io { path: pstr, source }),
        None => return Err(malformed(1, "empty file".into())),
    };
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 4 || head[0] != "SPFX" || head[1] != "v1" {
        return Err(malformed(1, format!("bad header {header:?}")));
    }
    let count: usize = head[2].parse().map_err(|_| malformed(1, format!("bad count in {header:?}")))?;
    let dim: usize = head[3].parse().map_err(|_| malformed(1, format!("bad dim in {header:?}")))?;
    let mut by_key = HashMap::with_capacity(count);
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|source| SemanticError::Io { path: pstr.clone(), source })?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let user = parts.next().unwrap_or("").to_string();
        let t: usize = parts
            .next()
            .unwrap_or("")
            .parse()
            .map_err(|_| malformed(lineno, "bad position".into()))?;
        let v: Vec<F> = parts
            .map(|p| p.parse::<f64>().map(F::from_f64_lit))
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(lineno, "bad float".into()))?;
        if v.len() != dim {
            return Err(SemanticError::DimMismatch {
                path: pstr.clone(),
                line: lineno,
                expected: dim,
                found: v.len(),
            });
        }
        by_key.insert((user, t), v);
    }
    Ok(PrefixTable { dim, by_key })
}

/// Source of per-prefix semantic vectors l_t (and, applied to the full
/// sequence, the long-term vector e1).
pub enum PrefixProvider<F: Scalar> {
    /// Externally computed vectors keyed by (user id, prefix length).
    ExactFile(PrefixTable<F>),
    /// Arithmetic mean of the items' semantic vectors over the prefix.
    MeanPool,
    /// Mean over a private pseudo-random table; exercises the pipeline with
    /// no semantic signal at all.
    PseudoRandom(SemanticTable<F>),
}

impl<F: Scalar> PrefixProvider<F> {
    pub fn pseudo_random(catalog: &Catalog, dim: usize, seed: u64) -> Self {
        PrefixProvider::PseudoRandom(pseudo_embed(catalog, dim, seed))
    }

    /// Vector dimension this provider emits given the item table in use.
    pub fn dim(&self, table: &SemanticTable<F>) -> usize {
        match self {
            PrefixProvider::ExactFile(t) => t.dim(),
            PrefixProvider::MeanPool => table.dim(),
            PrefixProvider::PseudoRandom(t) => t.dim(),
        }
    }
}

/// Semantic vector for a prefix of a user's history. `prefix_items` are
/// catalog indices; exact mode keys on (user id, prefix length).
pub fn prefix_embedding<F: Scalar>(
    provider: &PrefixProvider<F>,
    user_id: &str,
    prefix_items: &[usize],
    table: &SemanticTable<F>,
) -> Result<Vec<F>, SemanticError> {
    assert!(!prefix_items.is_empty(), "prefix_embedding: empty prefix");
    match provider {
        PrefixProvider::ExactFile(t) => t
            .get(user_id, prefix_items.len())
            .map(<[F]>::to_vec)
            .ok_or_else(|| SemanticError::MissingPrefix {
                user: user_id.to_string(),
                t: prefix_items.len(),
            }),
        PrefixProvider::MeanPool => Ok(mean_pool(prefix_items, table)),
        PrefixProvider::PseudoRandom(t) => Ok(mean_pool(prefix_items, t)),
    }
}

fn mean_pool<F: Scalar>(items: &[usize], table: &SemanticTable<F>) -> Vec<F> {
    let mut acc = vec![F::zero(); table.dim()];
    for &it in items {
        let v = table
            .get(it)
            .unwrap_or_else(|| panic!("semantic table has no vector for item index {it}"));
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = F::from_f64_lit(items.len() as f64);
    for a in &mut acc {
        *a /= n;
    }
    acc
}

/// Affine projection of frozen semantic rows into the collaborative space.
/// `x` is [rows, D]; `w` is [D, d_h]; `b` has d_h elements. Gradients flow
/// into `w` and `b` only — `x` is a constant by construction.
pub fn project<F: Scalar>(g: &mut Graph<F>, x: Var, w: Var, b: Var) -> Var {
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}
