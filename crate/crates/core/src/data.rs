//! Interaction ingestion, indexing, splitting and false-negative simulation.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::{ItemIdx, UserIdx};

/// One line of a raw interaction log, before implicit conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub rating: Option<f64>,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputFormat {
    /// Tab- or comma-separated `user item [rating [timestamp]]`.
    Delimited,
    /// MovieLens `user::item::rating::timestamp`.
    MovielensDoubleColon,
}

/// Indexed implicit-feedback dataset with optional validation/test splits.
///
/// Before a split is applied every interaction lives in `train_pairs` and
/// `test` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub train_pairs: Vec<(UserIdx, ItemIdx)>,
    /// Parallel to `train_pairs`; present only when every record carried one.
    pub train_timestamps: Option<Vec<i64>>,
    /// Sorted training positives per user (`R_u`).
    pub positives: Vec<Vec<ItemIdx>>,
    pub validation: Option<Vec<Option<ItemIdx>>>,
    /// Sorted held-out items per user (`G_u`); empty for users not evaluated.
    pub test: Vec<Vec<ItemIdx>>,
}

/// Held-out positives that are treated as unobserved during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseNegativeSet {
    pub per_user: Vec<Vec<ItemIdx>>,
    pub sigma: f64,
    /// The `sigma` sub-sample of `per_user`, available to noise injection.
    pub active_per_user: Vec<Vec<ItemIdx>>,
}

impl FalseNegativeSet {
    pub fn empty(num_users: usize) -> Self {
        FalseNegativeSet {
            per_user: vec![Vec::new(); num_users],
            sigma: 0.0,
            active_per_user: vec![Vec::new(); num_users],
        }
    }

    pub fn contains(&self, u: UserIdx, item: ItemIdx) -> bool {
        self.per_user[u as usize].binary_search(&item).is_ok()
    }

    pub fn total(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn total_active(&self) -> usize {
        self.active_per_user.iter().map(Vec::len).sum()
    }
}

impl InteractionDataset {
    pub fn is_positive(&self, u: UserIdx, item: ItemIdx) -> bool {
        self.positives[u as usize].binary_search(&item).is_ok()
    }

    /// Users with at least one held-out test item.
    pub fn test_users(&self) -> impl Iterator<Item = UserIdx> + '_ {
        self.test
            .iter()
            .enumerate()
            .filter(|(_, g)| !g.is_empty())
            .map(|(u, _)| u as UserIdx)
    }

    pub fn num_test_pairs(&self) -> usize {
        self.test.iter().map(Vec::len).sum()
    }

    pub fn num_validation(&self) -> usize {
        self.validation
            .as_ref()
            .map_or(0, |v| v.iter().filter(|x| x.is_some()).count())
    }

    /// Training interaction count per item.
    pub fn item_popularity(&self) -> Vec<u32> {
        let mut pop = vec![0u32; self.num_items];
        for &(_, i) in &self.train_pairs {
            pop[i as usize] += 1;
        }
        pop
    }

    fn rebuild_positives(&mut self) {
        let mut positives = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.train_pairs {
            positives[u as usize].push(i);
        }
        for p in &mut positives {
            p.sort_unstable();
        }
        self.positives = positives;
    }

    /// Builds a dataset directly from index pairs (tests, synthetic data,
    /// snapshots). Duplicate pairs are collapsed.
    pub fn from_pairs(
        num_users: usize,
        num_items: usize,
        train: &[(UserIdx, ItemIdx)],
        validation: Option<Vec<Option<ItemIdx>>>,
        test: Vec<Vec<ItemIdx>>,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::with_capacity(train.len());
        let mut train_pairs = Vec::with_capacity(train.len());
        for &(u, i) in train {
            if u as usize >= num_users || i as usize >= num_items {
                return Err(Error::Config(format!(
                    "pair ({u}, {i}) outside {num_users} users x {num_items} items"
                )));
            }
            if seen.insert((u, i)) {
                train_pairs.push((u, i));
            }
        }
        let mut test = if test.is_empty() {
            vec![Vec::new(); num_users]
        } else {
            test
        };
        if test.len() != num_users {
            return Err(Error::Config("test split length differs from user count".into()));
        }
        for g in &mut test {
            g.sort_unstable();
            g.dedup();
        }
        let mut ds = InteractionDataset {
            num_users,
            num_items,
            user_ids: (0..num_users).map(|u| u.to_string()).collect(),
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
            train_pairs,
            train_timestamps: None,
            positives: Vec::new(),
            validation,
            test,
        };
        ds.rebuild_positives();
        for (u, g) in ds.test.iter().enumerate() {
            if g.iter().any(|&i| ds.is_positive(u as UserIdx, i)) {
                return Err(Error::Config(format!(
                    "user {u}: test items overlap training positives"
                )));
            }
        }
        Ok(ds)
    }
}

/// Reads an interaction file, keeping records rated at or above
/// `positive_threshold` when one is given.
pub fn ingest(
    path: &Path,
    format: InputFormat,
    positive_threshold: Option<f64>,
) -> Result<Vec<RawInteraction>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(BufReader::new(file), format, positive_threshold)
}

/// Line parser behind [`ingest`]. Blank lines and `#` comments are skipped.
pub fn parse_records<R: BufRead>(
    reader: R,
    format: InputFormat,
    positive_threshold: Option<f64>,
) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    let mut delimiter: Option<char> = None;
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = match format {
            InputFormat::MovielensDoubleColon => trimmed.split("::").collect(),
            InputFormat::Delimited => {
                let d = *delimiter.get_or_insert_with(|| {
                    if trimmed.contains('\t') {
                        '\t'
                    } else {
                        ','
                    }
                });
                trimmed.split(d).map(str::trim).collect()
            }
        };
        let record = parse_fields(&fields).map_err(|message| Error::Parse {
            line: lineno,
            message,
        })?;
        if let Some(threshold) = positive_threshold {
            let rating = record.rating.ok_or_else(|| Error::Parse {
                line: lineno,
                message: "positive threshold set but record has no rating".into(),
            })?;
            if rating < threshold {
                continue;
            }
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset("no records survived ingestion".into()));
    }
    Ok(out)
}

fn parse_fields(fields: &[&str]) -> std::result::Result<RawInteraction, String> {
    if fields.len() < 2 || fields.len() > 4 {
        return Err(format!("expected 2 to 4 fields, found {}", fields.len()));
    }
    let user_id = fields[0].trim();
    let item_id = fields[1].trim();
    if user_id.is_empty() || item_id.is_empty() {
        return Err("empty user or item id".into());
    }
    let rating = match fields.get(2) {
        Some(s) => Some(
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad rating {s:?}: {e}"))?,
        ),
        None => None,
    };
    let timestamp = match fields.get(3) {
        Some(s) => {
            let s = s.trim();
            // Some exports write timestamps as floats ("881250949.0").
            let ts = s
                .parse::<i64>()
                .or_else(|_| s.parse::<f64>().map(|f| f as i64))
                .map_err(|e| format!("bad timestamp {s:?}: {e}"))?;
            Some(ts)
        }
        None => None,
    };
    Ok(RawInteraction {
        user_id: user_id.to_string(),
        item_id: item_id.to_string(),
        rating,
        timestamp,
    })
}

/// Drops users with fewer than `min_user_records` records and assigns
/// contiguous indices in first-appearance order. The result is unsplit.
pub fn build_index(records: &[RawInteraction], min_user_records: usize) -> Result<InteractionDataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset("no records to index".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in records {
        *counts.entry(r.user_id.as_str()).or_default() += 1;
    }

    let mut user_index: HashMap<&str, UserIdx> = HashMap::new();
    let mut item_index: HashMap<&str, ItemIdx> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    let mut stamps = Vec::new();
    let mut all_stamped = true;

    for r in records {
        if counts[r.user_id.as_str()] < min_user_records {
            continue;
        }
        let u = *user_index.entry(r.user_id.as_str()).or_insert_with(|| {
            user_ids.push(r.user_id.clone());
            (user_ids.len() - 1) as UserIdx
        });
        let i = *item_index.entry(r.item_id.as_str()).or_insert_with(|| {
            item_ids.push(r.item_id.clone());
            (item_ids.len() - 1) as ItemIdx
        });
        if !seen.insert((u, i)) {
            continue;
        }
        pairs.push((u, i));
        match r.timestamp {
            Some(t) => stamps.push(t),
            None => all_stamped = false,
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "every user has fewer than {min_user_records} records"
        )));
    }
    let num_users = user_ids.len();
    let mut ds = InteractionDataset {
        num_users,
        num_items: item_ids.len(),
        user_ids,
        item_ids,
        train_pairs: pairs,
        train_timestamps: all_stamped.then_some(stamps),
        positives: Vec::new(),
        validation: None,
        test: vec![Vec::new(); num_users],
    };
    ds.rebuild_positives();
    Ok(ds)
}

fn per_user_records(ds: &InteractionDataset) -> Vec<Vec<usize>> {
    let mut by_user = vec![Vec::new(); ds.num_users];
    for (idx, &(u, _)) in ds.train_pairs.iter().enumerate() {
        by_user[u as usize].push(idx);
    }
    by_user
}

/// Per-user random hold-out. Each user keeps at least one training item.
pub fn split_random(ds: &InteractionDataset, test_fraction: f64, seed: u64) -> Result<InteractionDataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(ds.train_pairs.len());
    let mut train_ts = ds.train_timestamps.as_ref().map(|_| Vec::new());
    let mut test = vec![Vec::new(); ds.num_users];
    for (u, mut records) in per_user_records(ds).into_iter().enumerate() {
        if records.is_empty() {
            continue;
        }
        records.shuffle(&mut rng);
        let n = records.len();
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);
        let (held, kept) = records.split_at(n_test);
        test[u] = held.iter().map(|&r| ds.train_pairs[r].1).collect();
        test[u].sort_unstable();
        let mut kept = kept.to_vec();
        kept.sort_unstable();
        for r in kept {
            train.push(ds.train_pairs[r]);
            if let (Some(out), Some(ts)) = (train_ts.as_mut(), ds.train_timestamps.as_ref()) {
                out.push(ts[r]);
            }
        }
    }
    let mut out = InteractionDataset {
        train_pairs: train,
        train_timestamps: train_ts,
        validation: None,
        test,
        ..ds.clone()
    };
    out.rebuild_positives();
    Ok(out)
}

/// Latest record per user to test, second latest to validation. Timestamp
/// ties are broken by ascending item index. Users with fewer than three
/// records stay entirely in training and are not evaluated.
pub fn split_leave_one_out(ds: &InteractionDataset) -> Result<InteractionDataset> {
    let stamps = ds
        .train_timestamps
        .as_ref()
        .ok_or_else(|| Error::Config("leave-one-out split needs timestamps on every record".into()))?;
    let mut train = Vec::with_capacity(ds.train_pairs.len());
    let mut train_ts = Vec::with_capacity(ds.train_pairs.len());
    let mut validation = vec![None; ds.num_users];
    let mut test = vec![Vec::new(); ds.num_users];
    for (u, mut records) in per_user_records(ds).into_iter().enumerate() {
        records.sort_by_key(|&r| (stamps[r], ds.train_pairs[r].1));
        let n = records.len();
        let n_train = if n >= 3 {
            test[u] = vec![ds.train_pairs[records[n - 1]].1];
            validation[u] = Some(ds.train_pairs[records[n - 2]].1);
            n - 2
        } else {
            n
        };
        for &r in &records[..n_train] {
            train.push(ds.train_pairs[r]);
            train_ts.push(stamps[r]);
        }
    }
    let mut out = InteractionDataset {
        train_pairs: train,
        train_timestamps: Some(train_ts),
        validation: Some(validation),
        test,
        ..ds.clone()
    };
    out.rebuild_positives();
    Ok(out)
}

fn subsample(items: &[ItemIdx], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<ItemIdx> {
    let k = (items.len() as f64 * fraction).round() as usize;
    let mut picked: Vec<ItemIdx> = items.choose_multiple(rng, k.min(items.len())).copied().collect();
    picked.sort_unstable();
    picked
}

/// Flips a `flip_fraction` share of each user's test items into false
/// negatives, then draws the `sigma` share of those that noise injection may
/// use.
pub fn build_false_negative_set(
    ds: &InteractionDataset,
    flip_fraction: f64,
    sigma: f64,
    seed: u64,
) -> Result<FalseNegativeSet> {
    for (name, v) in [("flip_fraction", flip_fraction), ("sigma", sigma)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0f1e_2d3c_4b5a_6978);
    let per_user: Vec<Vec<ItemIdx>> = ds
        .test
        .iter()
        .map(|g| subsample(g, flip_fraction, &mut rng))
        .collect();
    let active_per_user = per_user
        .iter()
        .map(|f| subsample(f, sigma, &mut rng))
        .collect();
    Ok(FalseNegativeSet {
        per_user,
        sigma,
        active_per_user,
    })
}

/// Latent-factor toy data: each user interacts with the items it scores
/// highest under a hidden low-rank model plus noise. Used by tests and demos.
pub fn synthetic(
    num_users: usize,
    num_items: usize,
    items_per_user: usize,
    rank: usize,
    seed: u64,
) -> InteractionDataset {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let users = draw(num_users * rank);
    let items = draw(num_items * rank);
    // Popular items get a bias so the popularity sampler has something to see.
    let bias: Vec<f64> = (0..num_items).map(|i| -1.5 * (i as f64 / num_items as f64)).collect();
    let mut pairs = Vec::with_capacity(num_users * items_per_user);
    let k = items_per_user.min(num_items.saturating_sub(1)).max(1);
    for u in 0..num_users {
        let p = &users[u * rank..(u + 1) * rank];
        let mut scored: Vec<(f64, ItemIdx)> = (0..num_items)
            .map(|i| {
                let q = &items[i * rank..(i + 1) * rank];
                let noise: f64 = rng.random::<f64>() - 0.5;
                (crate::math::dot(p, q) + bias[i] + noise, i as ItemIdx)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        pairs.extend(scored[..k].iter().map(|&(_, i)| (u as UserIdx, i)));
    }
    let mut ds = InteractionDataset::from_pairs(num_users, num_items, &pairs, None, Vec::new())
        .expect("synthetic pairs are in range");
    // Every synthetic record gets a distinct increasing timestamp so
    // leave-one-out splitting also works on it.
    ds.train_timestamps = Some((0..ds.train_pairs.len() as i64).collect());
    ds
}

/// `meta.json` of a dataset snapshot directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub num_users: usize,
    pub num_items: usize,
    pub seed: u64,
    pub source_hash: String,
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn write_pairs(path: &Path, rows: impl Iterator<Item = (UserIdx, ItemIdx)>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "user_index\titem_index").map_err(|e| Error::io(path, e))?;
    for (u, i) in rows {
        writeln!(w, "{u}\t{i}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_pairs(path: &Path) -> Result<Vec<(UserIdx, ItemIdx)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if n == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let mut next = || -> Result<u32> {
            parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: n + 1,
                    message: format!("{}: expected two integer columns", path.display()),
                })
        };
        out.push((next()?, next()?));
    }
    Ok(out)
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `meta.json` into `dir`.
pub fn write_snapshot(ds: &InteractionDataset, dir: &Path, meta: &SnapshotMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_pairs(&dir.join("train.tsv"), ds.train_pairs.iter().copied())?;
    let valid = ds.validation.iter().flat_map(|v| {
        v.iter()
            .enumerate()
            .filter_map(|(u, i)| i.map(|i| (u as UserIdx, i)))
    });
    write_pairs(&dir.join("valid.tsv"), valid)?;
    let test = ds
        .test
        .iter()
        .enumerate()
        .flat_map(|(u, g)| g.iter().map(move |&i| (u as UserIdx, i)));
    write_pairs(&dir.join("test.tsv"), test)?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
}

/// Loads a snapshot written by [`write_snapshot`].
pub fn read_snapshot(dir: &Path) -> Result<(InteractionDataset, SnapshotMeta)> {
    let meta_path: PathBuf = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: SnapshotMeta = serde_json::from_str(&text)?;
    let train = read_pairs(&dir.join("train.tsv"))?;
    let valid = read_pairs(&dir.join("valid.tsv"))?;
    let test_pairs = read_pairs(&dir.join("test.tsv"))?;
    let check = |&(u, i): &(UserIdx, ItemIdx)| {
        if u as usize >= meta.num_users || i as usize >= meta.num_items {
            Err(Error::Config(format!("snapshot pair ({u}, {i}) out of range")))
        } else {
            Ok(())
        }
    };
    valid.iter().try_for_each(check)?;
    test_pairs.iter().try_for_each(check)?;
    let validation = if valid.is_empty() {
        None
    } else {
        let mut v = vec![None; meta.num_users];
        for (u, i) in valid {
            v[u as usize] = Some(i);
        }
        Some(v)
    };
    let mut test = vec![Vec::new(); meta.num_users];
    for (u, i) in test_pairs {
        test[u as usize].push(i);
    }
    let ds = InteractionDataset::from_pairs(meta.num_users, meta.num_items, &train, validation, test)?;
    Ok((ds, meta))
}
