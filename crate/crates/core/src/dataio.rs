//! Interaction ingestion, k-core filtering, sequence building, and
//! leave-one-out splitting, plus the cached split manifest format.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

/// One raw event from an interaction log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    /// `user_id<TAB>item_id<TAB>timestamp`
    Tsv,
    /// `user<TAB>item<TAB>rating<TAB>timestamp`; the rating is discarded
    /// (implicit feedback).
    MovieLens,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow { path: String, line: usize, reason: String },
    #[error("{path}:{line}: unexpected manifest record {found:?}")]
    BadManifest { path: String, line: usize, found: String },
}

/// Dense index mapping. User indices start at 0; item indices start at 1,
/// with 0 permanently reserved for padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Catalog {
    users: Vec<String>,
    items: Vec<String>,
    user_by_id: HashMap<String, usize>,
    item_by_id: HashMap<String, usize>,
}

impl Catalog {
    /// Builds indices over the given ids, sorted lexicographically so the
    /// assignment is independent of input order.
    pub fn build(mut user_ids: Vec<String>, mut item_ids: Vec<String>) -> Catalog {
        user_ids.sort();
        user_ids.dedup();
        item_ids.sort();
        item_ids.dedup();
        Self::from_sorted(user_ids, item_ids)
    }

    fn from_sorted(users: Vec<String>, items: Vec<String>) -> Catalog {
        let user_by_id = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let item_by_id = items.iter().enumerate().map(|(i, v)| (v.clone(), i + 1)).collect();
        Catalog { users, items, user_by_id, item_by_id }
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Count of real items; valid item indices are 1..=n_items.
    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_by_id.get(id).copied()
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.item_by_id.get(id).copied()
    }

    pub fn user_id(&self, index: usize) -> &str {
        &self.users[index]
    }

    pub fn item_id(&self, index: usize) -> &str {
        assert!(index >= 1, "item index 0 is the padding slot");
        &self.items[index - 1]
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(String::as_str)
    }
}

/// A user's full chronological history in dense indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
    pub timestamps: Vec<i64>,
}

/// Leave-one-out assignment for one user. `train` is stored untruncated;
/// prefix truncation to `max_len` applies to the evaluation prefixes here and
/// to training windows at the consumer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitUser {
    pub user: usize,
    pub train: Vec<usize>,
    pub valid_prefix: Vec<usize>,
    pub valid_target: usize,
    pub test_prefix: Vec<usize>,
    pub test_target: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct PreprocessConfig {
    pub k_core: usize,
    pub max_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { k_core: 5, max_len: 32 }
    }
}

/// Corpus-level statistics in the shape conventionally tabulated for
/// recommendation datasets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_actions: usize,
    pub avg_len: f64,
    pub sparsity: f64,
}

pub fn dataset_stats(catalog: &Catalog, seqs: &[UserSequence]) -> DatasetStats {
    let n_actions: usize = seqs.iter().map(|s| s.items.len()).sum();
    let (m, n) = (catalog.n_users(), catalog.n_items());
    DatasetStats {
        n_users: m,
        n_items: n,
        n_actions,
        avg_len: if m == 0 { 0.0 } else { n_actions as f64 / m as f64 },
        sparsity: if m * n == 0 { 0.0 } else { 1.0 - n_actions as f64 / (m as f64 * n as f64) },
    }
}

pub fn load_interactions(path: &Path, format: LogFormat) -> Result<Vec<Interaction>, DataError> {
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io { path: pstr.clone(), source })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io { path: pstr.clone(), source })?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        let (user, item, ts) = match format {
            LogFormat::Tsv if fields.len() == 3 => (fields[0], fields[1], fields[2]),
            LogFormat::MovieLens if fields.len() == 4 => (fields[0], fields[1], fields[3]),
            _ => {
                return Err(DataError::MalformedRow {
                    path: pstr,
                    line: lineno,
                    reason: format!(
                        "expected {} tab-separated fields, found {}",
                        if format == LogFormat::Tsv { 3 } else { 4 },
                        fields.len()
                    ),
                })
            }
        };
        if user.is_empty() || item.is_empty() {
            return Err(DataError::MalformedRow {
                path: pstr,
                line: lineno,
                reason: "empty user or item id".into(),
            });
        }
        let timestamp: i64 = ts.parse().map_err(|_| DataError::MalformedRow {
            path: pstr.clone(),
            line: lineno,
            reason: format!("bad timestamp {ts:?}"),
        })?;
        if timestamp < 0 {
            return Err(DataError::MalformedRow {
                path: pstr,
                line: lineno,
                reason: format!("negative timestamp {timestamp}"),
            });
        }
        out.push(Interaction {
            user_id: user.to_string(),
            item_id: item.to_string(),
            timestamp,
        });
    }
    Ok(out)
}

/// Iteratively removes users and items with fewer than `k` events until the
/// surviving subset is stable. The fixpoint is unique, so iteration order
/// does not matter; event order is preserved.
pub fn k_core_filter(events: &[Interaction], k: usize) -> Vec<Interaction> {
    let mut current: Vec<Interaction> = events.to_vec();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for e in &current {
            *user_counts.entry(e.user_id.as_str()).or_insert(0) += 1;
            *item_counts.entry(e.item_id.as_str()).or_insert(0) += 1;
        }
        let next: Vec<Interaction> = current
            .iter()
            .filter(|e| user_counts[e.user_id.as_str()] >= k && item_counts[e.item_id.as_str()] >= k)
            .cloned()
            .collect();
        if next.len() == current.len() {
            return next;
        }
        current = next;
    }
}

/// Groups events per user, sorts chronologically (stable on ties so the file
/// order decides), drops users left with fewer than 3 events, and indexes the
/// survivors.
pub fn build_sequences(
    events: &[Interaction],
    _cfg: &PreprocessConfig,
) -> (Catalog, Vec<UserSequence>) {
    let mut per_user: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for e in events {
        per_user.entry(e.user_id.as_str()).or_default().push(e);
    }
    let mut surviving: Vec<(&str, Vec<&Interaction>)> = per_user
        .into_iter()
        .filter(|(_, evs)| evs.len() >= 3)
        .collect();
    surviving.sort_by_key(|(uid, _)| *uid);
    for (_, evs) in &mut surviving {
        evs.sort_by_key(|e| e.timestamp); // stable: ties keep input order
    }

    let user_ids: Vec<String> = surviving.iter().map(|(u, _)| u.to_string()).collect();
    let item_ids: Vec<String> = surviving
        .iter()
        .flat_map(|(_, evs)| evs.iter().map(|e| e.item_id.clone()))
        .collect();
    let catalog = Catalog::build(user_ids, item_ids);

    let mut seqs = Vec::with_capacity(surviving.len());
    for (uid, evs) in &surviving {
        let user = catalog.user_index(uid).expect("surviving user indexed");
        let items = evs.iter().map(|e| catalog.item_index(&e.item_id).expect("indexed")).collect();
        let timestamps = evs.iter().map(|e| e.timestamp).collect();
        seqs.push(UserSequence { user, items, timestamps });
    }
    seqs.sort_by_key(|s| s.user);
    (catalog, seqs)
}

/// The `max_len` most recent entries (all of them when shorter).
pub fn newest(items: &[usize], max_len: usize) -> Vec<usize> {
    let start = items.len().saturating_sub(max_len);
    items[start..].to_vec()
}

/// Last item becomes the test target, second-to-last the validation target;
/// evaluation prefixes keep the `max_len` most recent items before the target.
pub fn leave_one_out_split(seqs: &[UserSequence], cfg: &PreprocessConfig) -> Vec<SplitUser> {
    let mut out = Vec::with_capacity(seqs.len());
    for s in seqs {
        let len = s.items.len();
        if len < 3 {
            log::warn!("user {} has only {} events; excluded from the split", s.user, len);
            continue;
        }
        let test_target = s.items[len - 1];
        let valid_target = s.items[len - 2];
        out.push(SplitUser {
            user: s.user,
            train: s.items[..len - 2].to_vec(),
            valid_prefix: newest(&s.items[..len - 2], cfg.max_len),
            valid_target,
            test_prefix: newest(&s.items[..len - 1], cfg.max_len),
            test_target,
        });
    }
    out
}

/// Cached preprocessing result: catalog, per-user splits, and the max_len the
/// prefixes were truncated with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub catalog: Catalog,
    pub users: Vec<SplitUser>,
    pub max_len: usize,
}

/// Writes the manifest in a fixed order so identical inputs produce
/// byte-identical files.
pub fn write_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<(), DataError> {
    let pstr = path.display().to_string();
    let as_io = |source: io::Error| DataError::Io { path: pstr.clone(), source };
    let mut w = BufWriter::new(File::create(path).map_err(as_io)?);
    let cat = &manifest.catalog;
    let write = |w: &mut BufWriter<File>, s: String| w.write_all(s.as_bytes()).map_err(as_io);
    write(
        &mut w,
        format!("SPLIT v1 {} {} {}\n", cat.n_users(), cat.n_items(), manifest.max_len),
    )?;
    for i in 0..cat.n_users() {
        write(&mut w, format!("user {} {}\n", i, cat.user_id(i)))?;
    }
    for i in 1..=cat.n_items() {
        write(&mut w, format!("item {} {}\n", i, cat.item_id(i)))?;
    }
    for u in &manifest.users {
        write(&mut w, format!("train {} {}\n", u.user, join(&u.train)))?;
        write(
            &mut w,
            format!("valid {} {} {}\n", u.user, u.valid_target, join(&u.valid_prefix)),
        )?;
        write(&mut w, format!("test {} {} {}\n", u.user, u.test_target, join(&u.test_prefix)))?;
    }
    w.flush().map_err(as_io)?;
    Ok(())
}

fn join(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn load_split_manifest(path: &Path) -> Result<SplitManifest, DataError> {
    let pstr = path.display().to_string();
    let file = File::open(path).map_err(|source| DataError::Io { path: pstr.clone(), source })?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let bad = |line: usize, found: &str| DataError::BadManifest {
        path: pstr.clone(),
        line,
        found: found.to_string(),
    };

    let (_, header) = lines
        .next()
        .ok_or_else(|| bad(1, "empty file"))?
        .1
        .map_err(|source| DataError::Io { path: pstr.clone(), source })
        .map(|h| (0usize, h))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 5 || head[0] != "SPLIT" || head[1] != "v1" {
        return Err(bad(1, &header));
    }
    let n_users: usize = head[2].parse().map_err(|_| bad(1, &header))?;
    let n_items: usize = head[3].parse().map_err(|_| bad(1, &header))?;
    let max_len: usize = head[4].parse().map_err(|_| bad(1, &header))?;

    let mut users = vec![String::new(); n_users];
    let mut items = vec![String::new(); n_items];
    let mut split_users: Vec<SplitUser> = Vec::new();
    let mut partial: HashMap<usize, (Option<Vec<usize>>, Option<(usize, Vec<usize>)>, Option<(usize, Vec<usize>)>)> =
        HashMap::new();
    let mut order: Vec<usize> = Vec::new();

    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|source| DataError::Io { path: pstr.clone(), source })?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let kind = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let parse_idx = |s: &str| s.parse::<usize>().map_err(|_| bad(lineno, &line));
        match kind {
            "user" if rest.len() == 2 => {
                let idx = parse_idx(rest[0])?;
                if idx >= n_users {
                    return Err(bad(lineno, &line));
                }
                users[idx] = rest[1].to_string();
            }
            "item" if rest.len() == 2 => {
                let idx = parse_idx(rest[0])?;
                if idx == 0 || idx > n_items {
                    return Err(bad(lineno, &line));
                }
                items[idx - 1] = rest[1].to_string();
            }
            "train" if !rest.is_empty() => {
                let idx = parse_idx(rest[0])?;
                let seq = rest[1..].iter().map(|s| parse_idx(s)).collect::<Result<_, _>>()?;
                partial.entry(idx).or_default().0 = Some(seq);
                if !order.contains(&idx) {
                    order.push(idx);
                }
            }
            "valid" | "test" if rest.len() >= 2 => {
                let idx = parse_idx(rest[0])?;
                let target = parse_idx(rest[1])?;
                let prefix: Vec<usize> =
                    rest[2..].iter().map(|s| parse_idx(s)).collect::<Result<_, _>>()?;
                let slot = partial.entry(idx).or_default();
                if kind == "valid" {
                    slot.1 = Some((target, prefix));
                } else {
                    slot.2 = Some((target, prefix));
                }
                if !order.contains(&idx) {
                    order.push(idx);
                }
            }
            _ => return Err(bad(lineno, &line)),
        }
    }

    for idx in order {
        let (train, valid, test) = partial.remove(&idx).expect("recorded");
        let (train, valid, test) = match (train, valid, test) {
            (Some(t), Some(v), Some(e)) => (t, v, e),
            _ => return Err(bad(0, &format!("incomplete split records for user {idx}"))),
        };
        split_users.push(SplitUser {
            user: idx,
            train,
            valid_prefix: valid.1,
            valid_target: valid.0,
            test_prefix: test.1,
            test_target: test.0,
        });
    }

    Ok(SplitManifest {
        catalog: Catalog::from_sorted(users, items),
        users: split_users,
        max_len,
    })
}
