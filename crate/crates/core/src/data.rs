//! Interaction-log ingestion, minimum-count filtering, leave-one-out splits.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Header line of a dataset snapshot file.
pub const DATA_MAGIC: &str = "MRGS-DATA-v1";

/// Minimum sequence length that yields a train prefix plus both targets.
pub const MIN_SPLIT_LEN: usize = 3;

/// One parsed input record before indexing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

/// An indexed interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: u64,
}

/// Column separator of the input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    /// Any run of spaces or tabs.
    Whitespace,
    Tab,
    Comma,
    /// `::`, as in the MovieLens-1M ratings file.
    DoubleColon,
}

impl Delimiter {
    fn split<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Delimiter::Whitespace => line.split_whitespace().collect(),
            Delimiter::Tab => line.split('\t').collect(),
            Delimiter::Comma => line.split(',').collect(),
            Delimiter::DoubleColon => line.split("::").collect(),
        }
    }
}

/// Which columns hold user, item and timestamp.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputFormat {
    pub delimiter: Delimiter,
    pub user_col: usize,
    pub item_col: usize,
    pub timestamp_col: usize,
    #[serde(default)]
    pub skip_header: bool,
}

impl Default for InputFormat {
    fn default() -> Self {
        InputFormat {
            delimiter: Delimiter::Tab,
            user_col: 0,
            item_col: 1,
            timestamp_col: 2,
            skip_header: false,
        }
    }
}

impl InputFormat {
    pub fn whitespace() -> Self {
        InputFormat {
            delimiter: Delimiter::Whitespace,
            ..Default::default()
        }
    }

    /// Amazon review ratings CSV: `user,item,rating,timestamp`.
    pub fn amazon_ratings_csv() -> Self {
        InputFormat {
            delimiter: Delimiter::Comma,
            user_col: 0,
            item_col: 1,
            timestamp_col: 3,
            skip_header: false,
        }
    }

    /// MovieLens-1M `ratings.dat`: `user::movie::rating::timestamp`.
    pub fn movielens_dat() -> Self {
        InputFormat {
            delimiter: Delimiter::DoubleColon,
            user_col: 0,
            item_col: 1,
            timestamp_col: 3,
            skip_header: false,
        }
    }

    /// Named presets: `tsv`, `whitespace`, `amazon-csv`, `ml-1m`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tsv" => Some(InputFormat::default()),
            "whitespace" => Some(InputFormat::whitespace()),
            "amazon-csv" => Some(InputFormat::amazon_ratings_csv()),
            "ml-1m" => Some(InputFormat::movielens_dat()),
            _ => None,
        }
    }

    fn parse_line(&self, line: &str) -> std::result::Result<RawInteraction, String> {
        let fields = self.delimiter.split(line);
        let needed = self.user_col.max(self.item_col).max(self.timestamp_col) + 1;
        if fields.len() < needed {
            return Err(format!("expected at least {needed} fields, found {}", fields.len()));
        }
        let user = fields[self.user_col].trim();
        let item = fields[self.item_col].trim();
        if user.is_empty() || item.is_empty() {
            return Err("empty user or item token".into());
        }
        let ts_field = fields[self.timestamp_col].trim();
        let timestamp = ts_field
            .parse::<u64>()
            .map_err(|_| format!("timestamp {ts_field:?} is not a non-negative integer"))?;
        Ok(RawInteraction {
            user: user.to_string(),
            item: item.to_string(),
            timestamp,
        })
    }
}

/// Indexed interaction log. User ids cover `[0, M)` and item ids `[0, N)`,
/// both assigned in order of first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionLog {
    records: Vec<Interaction>,
    user_tokens: Vec<String>,
    item_tokens: Vec<String>,
}

impl InteractionLog {
    /// Indexes raw records, preserving their order.
    pub fn from_raw(raw: &[RawInteraction]) -> Self {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        let mut user_tokens = Vec::new();
        let mut item_tokens = Vec::new();
        let mut records = Vec::with_capacity(raw.len());
        for r in raw {
            let user = *users.entry(r.user.as_str()).or_insert_with(|| {
                user_tokens.push(r.user.clone());
                user_tokens.len() - 1
            });
            let item = *items.entry(r.item.as_str()).or_insert_with(|| {
                item_tokens.push(r.item.clone());
                item_tokens.len() - 1
            });
            records.push(Interaction {
                user,
                item,
                timestamp: r.timestamp,
            });
        }
        InteractionLog {
            records,
            user_tokens,
            item_tokens,
        }
    }

    pub fn n_users(&self) -> usize {
        self.user_tokens.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_tokens.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn user_tokens(&self) -> &[String] {
        &self.user_tokens
    }

    pub fn item_tokens(&self) -> &[String] {
        &self.item_tokens
    }

    pub fn user_id(&self, token: &str) -> Option<usize> {
        self.user_tokens.iter().position(|t| t == token)
    }

    pub fn item_id(&self, token: &str) -> Option<usize> {
        self.item_tokens.iter().position(|t| t == token)
    }

    /// Back to token form, in record order.
    pub fn to_raw(&self) -> Vec<RawInteraction> {
        self.records
            .iter()
            .map(|r| RawInteraction {
                user: self.user_tokens[r.user].clone(),
                item: self.item_tokens[r.item].clone(),
                timestamp: r.timestamp,
            })
            .collect()
    }

    /// Keeps the records selected by `keep` and re-compacts both id spaces.
    fn retain(&self, keep: impl Fn(&Interaction) -> bool) -> InteractionLog {
        let mut user_map = vec![usize::MAX; self.n_users()];
        let mut item_map = vec![usize::MAX; self.n_items()];
        let mut user_tokens = Vec::new();
        let mut item_tokens = Vec::new();
        let mut records = Vec::new();
        for r in self.records.iter().filter(|r| keep(r)) {
            if user_map[r.user] == usize::MAX {
                user_map[r.user] = user_tokens.len();
                user_tokens.push(self.user_tokens[r.user].clone());
            }
            if item_map[r.item] == usize::MAX {
                item_map[r.item] = item_tokens.len();
                item_tokens.push(self.item_tokens[r.item].clone());
            }
            records.push(Interaction {
                user: user_map[r.user],
                item: item_map[r.item],
                timestamp: r.timestamp,
            });
        }
        InteractionLog {
            records,
            user_tokens,
            item_tokens,
        }
    }

    fn counts(&self) -> (Vec<usize>, Vec<usize>) {
        let mut users = vec![0; self.n_users()];
        let mut items = vec![0; self.n_items()];
        for r in &self.records {
            users[r.user] += 1;
            items[r.item] += 1;
        }
        (users, items)
    }
}

/// Reads a delimited interaction file.
pub fn load_interactions(path: impl AsRef<Path>, format: &InputFormat) -> Result<InteractionLog> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if idx == 0 && format.skip_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec = format.parse_line(&line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        })?;
        raw.push(rec);
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no interactions", path.display())));
    }
    Ok(InteractionLog::from_raw(&raw))
}

/// How the minimum-count filter is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterMode {
    /// Repeat until no user or item falls below the threshold (k-core).
    Fixpoint,
    /// One simultaneous pass using counts of the unfiltered log.
    SinglePass,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixpoint" => Ok(FilterMode::Fixpoint),
            "single-pass" => Ok(FilterMode::SinglePass),
            other => Err(Error::Config(format!("unknown filter mode {other:?}"))),
        }
    }
}

/// Drops users and items with fewer than `threshold` interactions.
pub fn min_count_filter(log: &InteractionLog, threshold: usize, mode: FilterMode) -> Result<InteractionLog> {
    if threshold == 0 {
        return Err(Error::Config("min-count threshold must be at least 1".into()));
    }
    let mut current = log.clone();
    loop {
        let (users, items) = current.counts();
        let stable = users.iter().chain(&items).all(|&c| c >= threshold);
        if stable {
            break;
        }
        current = current.retain(|r| users[r.user] >= threshold && items[r.item] >= threshold);
        if mode == FilterMode::SinglePass || current.is_empty() {
            break;
        }
    }
    if current.is_empty() {
        return Err(Error::EmptyAfterFilter { threshold });
    }
    Ok(current)
}

/// Removes users whose sequences are shorter than `min_len`. Returns the new
/// log and how many users were dropped.
pub fn drop_short_users(log: &InteractionLog, min_len: usize) -> Result<(InteractionLog, usize)> {
    let (users, _) = log.counts();
    let dropped = users.iter().filter(|&&c| c < min_len).count();
    if dropped == 0 {
        return Ok((log.clone(), 0));
    }
    let kept = log.retain(|r| users[r.user] >= min_len);
    if kept.is_empty() {
        return Err(Error::Data(format!("no user has at least {min_len} interactions")));
    }
    Ok((kept, dropped))
}

/// Leave-one-out split of one user's chronological sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: usize,
}

impl UserSplit {
    /// `train ∥ validation ∥ test`.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut s = self.train.clone();
        s.push(self.validation);
        s.push(self.test);
        s
    }

    /// Model input when scoring the validation target.
    pub fn validation_input(&self) -> &[usize] {
        &self.train
    }

    /// Model input when scoring the test target: the train prefix plus the validation item.
    pub fn test_input(&self) -> Vec<usize> {
        let mut s = self.train.clone();
        s.push(self.validation);
        s
    }
}

/// Per-user splits, indexed by user id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub users: Vec<UserSplit>,
}

impl SplitDataset {
    /// Builds a dataset from already chronological full sequences (used by
    /// generators and tests). Every sequence needs at least three items.
    pub fn from_sequences(n_items: usize, sequences: &[Vec<usize>]) -> Result<Self> {
        let mut users = Vec::with_capacity(sequences.len());
        for (u, seq) in sequences.iter().enumerate() {
            if seq.len() < MIN_SPLIT_LEN {
                return Err(Error::SequenceTooShort { user: u, len: seq.len() });
            }
            if let Some(&bad) = seq.iter().find(|&&i| i >= n_items) {
                return Err(Error::Index {
                    what: "item id",
                    index: bad,
                    size: n_items,
                });
            }
            let n = seq.len();
            users.push(UserSplit {
                train: seq[..n - 2].to_vec(),
                validation: seq[n - 2],
                test: seq[n - 1],
            });
        }
        Ok(SplitDataset {
            n_users: sequences.len(),
            n_items,
            users,
        })
    }

    pub fn n_train_interactions(&self) -> usize {
        self.users.iter().map(|u| u.train.len()).sum()
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("split dataset serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Sorts each user's interactions by timestamp (stable on record order) and
/// splits off the last two as test and validation targets.
pub fn chronological_split(log: &InteractionLog) -> Result<SplitDataset> {
    let mut per_user: Vec<Vec<(u64, usize)>> = vec![Vec::new(); log.n_users()];
    for r in log.records() {
        per_user[r.user].push((r.timestamp, r.item));
    }
    let mut sequences = Vec::with_capacity(per_user.len());
    for (u, events) in per_user.iter_mut().enumerate() {
        if events.len() < MIN_SPLIT_LEN {
            return Err(Error::SequenceTooShort {
                user: u,
                len: events.len(),
            });
        }
        events.sort_by_key(|&(ts, _)| ts);
        sequences.push(events.iter().map(|&(_, i)| i).collect::<Vec<_>>());
    }
    SplitDataset::from_sequences(log.n_items(), &sequences)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub avg_length: f64,
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} avg_length={:.3}",
            self.n_users, self.n_items, self.n_interactions, self.avg_length
        )
    }
}

pub fn compute_stats(log: &InteractionLog) -> Result<DatasetStats> {
    if log.is_empty() {
        return Err(Error::EmptyInput("statistics of an empty log".into()));
    }
    Ok(DatasetStats {
        n_users: log.n_users(),
        n_items: log.n_items(),
        n_interactions: log.len(),
        avg_length: log.len() as f64 / log.n_users() as f64,
    })
}

/// Everything the prepare step writes: index maps, splits, statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSnapshot {
    pub filter_mode: FilterMode,
    pub min_count: usize,
    pub dropped_short_users: usize,
    pub stats: DatasetStats,
    pub user_tokens: Vec<String>,
    pub item_tokens: Vec<String>,
    pub split: SplitDataset,
}

impl DatasetSnapshot {
    pub fn fingerprint(&self) -> String {
        self.split.fingerprint()
    }

    /// Magic header line followed by one JSON document.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{DATA_MAGIC}\n").into_bytes();
        out.extend(serde_json::to_vec(self).expect("snapshot serializes"));
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: 1,
            msg: e.to_string(),
        })?;
        let (magic, body) = text.split_once('\n').unwrap_or((text, ""));
        if magic != DATA_MAGIC {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: 1,
                msg: format!("expected header {DATA_MAGIC:?}, found {magic:?}"),
            });
        }
        serde_json::from_str(body).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.line() + 1,
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Filter, drop users too short to split, split, and summarize.
pub fn prepare(log: &InteractionLog, min_count: usize, mode: FilterMode) -> Result<DatasetSnapshot> {
    let filtered = min_count_filter(log, min_count, mode)?;
    let (kept, dropped) = drop_short_users(&filtered, MIN_SPLIT_LEN)?;
    if dropped > 0 {
        info!("dropped {dropped} users with fewer than {MIN_SPLIT_LEN} interactions");
    }
    let stats = compute_stats(&kept)?;
    let split = chronological_split(&kept)?;
    Ok(DatasetSnapshot {
        filter_mode: mode,
        min_count,
        dropped_short_users: dropped,
        stats,
        user_tokens: kept.user_tokens().to_vec(),
        item_tokens: kept.item_tokens().to_vec(),
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn raw(triples: &[(&str, &str, u64)]) -> Vec<RawInteraction> {
        triples
            .iter()
            .map(|&(u, i, t)| RawInteraction {
                user: u.into(),
                item: i.into(),
                timestamp: t,
            })
            .collect()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_lines() {
        let f = write_tmp("u1 i1 10\nu1 i2 20\nu2 i1 15\n");
        let log = load_interactions(f.path(), &InputFormat::whitespace()).unwrap();
        assert_eq!((log.n_users(), log.n_items(), log.len()), (2, 2, 3));
        assert_eq!(log.records()[2], Interaction { user: 1, item: 0, timestamp: 15 });
    }

    #[test]
    fn missing_timestamp_reports_line() {
        let f = write_tmp("u1 i1 10\nu1 i1\n");
        match load_interactions(f.path(), &InputFormat::whitespace()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_timestamp_is_a_parse_error() {
        let f = write_tmp("u1\ti1\t-5\n");
        assert!(matches!(
            load_interactions(f.path(), &InputFormat::default()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_file_is_empty_input() {
        let f = write_tmp("\n\n");
        assert!(matches!(
            load_interactions(f.path(), &InputFormat::default()),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn presets_parse_their_formats() {
        let f = write_tmp("A1,B7,5.0,1300000000\n");
        let log = load_interactions(f.path(), &InputFormat::amazon_ratings_csv()).unwrap();
        assert_eq!(log.records()[0].timestamp, 1_300_000_000);
        let f = write_tmp("1::1193::5::978300760\n");
        let log = load_interactions(f.path(), &InputFormat::movielens_dat()).unwrap();
        assert_eq!(log.item_tokens(), &["1193".to_string()]);
    }

    #[test]
    fn filter_drops_user_below_threshold() {
        let mut rows = Vec::new();
        for t in 0..4 {
            rows.push(("short", "x", t));
        }
        for t in 0..5 {
            for u in ["a", "b", "c", "d", "e"] {
                rows.push((u, ["x", "y", "z", "w", "v"][t as usize], t));
            }
        }
        let log = InteractionLog::from_raw(&raw(&rows));
        let out = min_count_filter(&log, 5, FilterMode::Fixpoint).unwrap();
        assert!(out.user_id("short").is_none());
        assert_eq!(out.n_users(), 5);
    }

    #[test]
    fn filter_to_nothing_errors() {
        let log = InteractionLog::from_raw(&raw(&[("u", "i", 1)]));
        assert!(matches!(
            min_count_filter(&log, 2, FilterMode::Fixpoint),
            Err(Error::EmptyAfterFilter { threshold: 2 })
        ));
    }

    #[test]
    fn single_pass_can_leave_violations_fixpoint_cannot() {
        // Dropping u1 pushes item c below 2, which then drops u3.
        let log = InteractionLog::from_raw(&raw(&[
            ("u0", "a", 1),
            ("u0", "b", 2),
            ("u2", "a", 3),
            ("u2", "b", 4),
            ("u1", "c", 5),
            ("u3", "c", 6),
            ("u3", "a", 7),
        ]));
        let single = min_count_filter(&log, 2, FilterMode::SinglePass).unwrap();
        let fix = min_count_filter(&log, 2, FilterMode::Fixpoint).unwrap();
        assert_eq!(single.len(), 6);
        assert_eq!(fix.len(), 4);
        let (_, single_items) = single.counts();
        assert!(single_items.iter().any(|&c| c < 2));
        let (uc, ic) = fix.counts();
        assert!(uc.iter().chain(&ic).all(|&c| c >= 2));
    }

    #[test]
    fn split_of_three() {
        let log = InteractionLog::from_raw(&raw(&[("u", "i3", 30), ("u", "i1", 10), ("u", "i2", 20)]));
        let s = chronological_split(&log).unwrap();
        let (i1, i2, i3) = (log.item_id("i1").unwrap(), log.item_id("i2").unwrap(), log.item_id("i3").unwrap());
        assert_eq!(
            s.users[0],
            UserSplit {
                train: vec![i1],
                validation: i2,
                test: i3
            }
        );
    }

    #[test]
    fn split_ties_keep_record_order() {
        let log = InteractionLog::from_raw(&raw(&[("u", "b", 5), ("u", "a", 5), ("u", "c", 5), ("u", "d", 1)]));
        let s = chronological_split(&log).unwrap();
        let id = |t: &str| log.item_id(t).unwrap();
        assert_eq!(s.users[0].full_sequence(), vec![id("d"), id("b"), id("a"), id("c")]);
    }

    #[test]
    fn split_rejects_short_users() {
        let log = InteractionLog::from_raw(&raw(&[("u", "a", 1), ("u", "b", 2)]));
        assert!(matches!(
            chronological_split(&log),
            Err(Error::SequenceTooShort { user: 0, len: 2 })
        ));
    }

    #[test]
    fn stats_of_single_interaction() {
        let log = InteractionLog::from_raw(&raw(&[("u", "i", 1)]));
        let s = compute_stats(&log).unwrap();
        assert_eq!((s.n_users, s.n_items, s.n_interactions, s.avg_length), (1, 1, 1, 1.0));
    }

    #[test]
    fn snapshot_round_trips_and_checks_magic() {
        let log = InteractionLog::from_raw(&raw(&[("u", "a", 1), ("u", "b", 2), ("u", "c", 3)]));
        let snap = prepare(&log, 1, FilterMode::Fixpoint).unwrap();
        let bytes = snap.to_bytes();
        assert!(bytes.starts_with(b"MRGS-DATA-v1\n"));
        assert_eq!(DatasetSnapshot::from_bytes(&bytes, Path::new("x")).unwrap(), snap);
        assert!(DatasetSnapshot::from_bytes(b"NOPE\n{}", Path::new("x")).is_err());
    }

    #[test]
    fn prepare_drops_users_too_short_to_split() {
        let log = InteractionLog::from_raw(&raw(&[
            ("u", "a", 1),
            ("u", "b", 2),
            ("u", "c", 3),
            ("v", "a", 1),
        ]));
        let snap = prepare(&log, 1, FilterMode::Fixpoint).unwrap();
        assert_eq!(snap.dropped_short_users, 1);
        assert_eq!(snap.split.n_users, 1);
    }
}
