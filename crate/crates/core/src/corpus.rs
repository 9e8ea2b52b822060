//! Interaction-log ingestion, leave-one-out splitting, fixed-length windows,
//! and negative sampling.
//!
//! File formats:
//! - interactions: one sequence per line, `<user> TAB <item> (SPACE <item>)*`,
//!   items chronological, raw ids;
//! - attributes: one item per line, `<item> TAB <attr> (SPACE <attr>)*`.
//!
//! Ingestion remaps raw ids to contiguous internal ids starting at 1;
//! id 0 is reserved for padding so embedding row 0 can stay zero.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Internal item identifier; 0 is the padding id.
pub type ItemId = u32;
/// Internal attribute identifier; 0 is reserved.
pub type AttrId = u32;

pub const PAD: ItemId = 0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}:{line}: duplicate user '{user}'")]
    DuplicateUser {
        path: String,
        line: usize,
        user: String,
    },
    #[error("sequence for user '{user}' has {len} items; need at least 3 to split")]
    TooShort { user: String, len: usize },
    #[error("cannot sample a negative: exclusion covers all {universe} items")]
    ExhaustedUniverse { universe: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One user's chronologically ordered items (internal ids).
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionSequence {
    pub user: String,
    pub items: Vec<ItemId>,
}

/// Item -> deduplicated, ascending attribute set. Every item known to the
/// dataset has an entry, possibly empty.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttributeCatalog {
    sets: Vec<Vec<AttrId>>,
    n_attrs: u32,
}

impl AttributeCatalog {
    pub fn from_sets(mut sets: Vec<Vec<AttrId>>, n_attrs: u32) -> Self {
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        Self { sets, n_attrs }
    }

    pub fn attrs_of(&self, item: ItemId) -> &[AttrId] {
        debug_assert!(item != PAD);
        self.sets
            .get(item as usize - 1)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    pub fn n_items(&self) -> u32 {
        self.sets.len() as u32
    }

    pub fn n_attrs(&self) -> u32 {
        self.n_attrs
    }
}

/// Raw-to-internal id correspondence; index `i` holds the raw id remapped
/// to internal id `i + 1`. Persisted alongside checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMaps {
    pub items: Vec<u64>,
    pub attrs: Vec<u64>,
}

impl IdMaps {
    pub fn n_items(&self) -> u32 {
        self.items.len() as u32
    }

    pub fn n_attrs(&self) -> u32 {
        self.attrs.len() as u32
    }

    pub fn raw_item(&self, internal: ItemId) -> Option<u64> {
        self.items.get(internal as usize - 1).copied()
    }

    pub fn intern_item(&self, raw: u64) -> Option<ItemId> {
        self.items.iter().position(|&r| r == raw).map(|i| i as u32 + 1)
    }
}

/// A fully ingested corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<InteractionSequence>,
    pub catalog: AttributeCatalog,
    pub ids: IdMaps,
}

impl Dataset {
    pub fn n_items(&self) -> u32 {
        self.ids.n_items()
    }

    pub fn n_attrs(&self) -> u32 {
        self.ids.n_attrs()
    }
}

fn parse_id(path: &str, line_no: usize, token: &str) -> Result<u64, CorpusError> {
    token.parse::<u64>().map_err(|_| CorpusError::Parse {
        path: path.to_string(),
        line: line_no,
        msg: format!("invalid id '{token}'"),
    })
}

/// Loads interactions and the attribute catalog, remapping raw ids to
/// contiguous internal ids in first-appearance order. Attribute entries for
/// items that never occur in any sequence are ignored.
pub fn load_interactions(
    path: impl AsRef<Path>,
    attr_path: impl AsRef<Path>,
) -> Result<Dataset, CorpusError> {
    let path_s = path.as_ref().display().to_string();
    let attr_s = attr_path.as_ref().display().to_string();

    let mut item_map: HashMap<u64, ItemId> = HashMap::new();
    let mut item_raw: Vec<u64> = Vec::new();
    let mut seen_users: HashMap<String, usize> = HashMap::new();
    let mut sequences = Vec::new();

    let reader = BufReader::new(File::open(path.as_ref())?);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let (user, rest) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
            path: path_s.clone(),
            line: line_no,
            msg: "expected '<user> TAB <items>'".into(),
        })?;
        let user = user.to_string();
        if seen_users.insert(user.clone(), line_no).is_some() {
            return Err(CorpusError::DuplicateUser {
                path: path_s.clone(),
                line: line_no,
                user,
            });
        }
        let mut items = Vec::new();
        for tok in rest.split(' ').filter(|t| !t.is_empty()) {
            let raw = parse_id(&path_s, line_no, tok)?;
            let next_id = item_raw.len() as u32 + 1;
            let id = *item_map.entry(raw).or_insert_with(|| {
                item_raw.push(raw);
                next_id
            });
            items.push(id);
        }
        if items.is_empty() {
            return Err(CorpusError::Parse {
                path: path_s.clone(),
                line: line_no,
                msg: "sequence has no items".into(),
            });
        }
        sequences.push(InteractionSequence { user, items });
    }

    let mut attr_map: HashMap<u64, AttrId> = HashMap::new();
    let mut attr_raw: Vec<u64> = Vec::new();
    let mut sets: Vec<Vec<AttrId>> = vec![Vec::new(); item_raw.len()];

    let reader = BufReader::new(File::open(attr_path.as_ref())?);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let (item_tok, rest) = line.split_once('\t').ok_or_else(|| CorpusError::Parse {
            path: attr_s.clone(),
            line: line_no,
            msg: "expected '<item> TAB <attrs>'".into(),
        })?;
        let raw_item = parse_id(&attr_s, line_no, item_tok)?;
        let Some(&item) = item_map.get(&raw_item) else {
            continue; // item never interacted with
        };
        for tok in rest.split(' ').filter(|t| !t.is_empty()) {
            let raw = parse_id(&attr_s, line_no, tok)?;
            let next_id = attr_raw.len() as u32 + 1;
            let id = *attr_map.entry(raw).or_insert_with(|| {
                attr_raw.push(raw);
                next_id
            });
            sets[item as usize - 1].push(id);
        }
    }

    let n_attrs = attr_raw.len() as u32;
    Ok(Dataset {
        sequences,
        catalog: AttributeCatalog::from_sets(sets, n_attrs),
        ids: IdMaps {
            items: item_raw,
            attrs: attr_raw,
        },
    })
}

/// One sequence's leave-one-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitEntry {
    pub user: String,
    /// Items 1..n-2, the only segment statistics and training may touch.
    pub prefix: Vec<ItemId>,
    pub valid: ItemId,
    pub test: ItemId,
    /// Ascending, deduplicated items of the whole sequence, for exclusion.
    pub all_items: Vec<ItemId>,
}

impl SplitEntry {
    pub fn contains(&self, item: ItemId) -> bool {
        self.all_items.binary_search(&item).is_ok()
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    pub entries: Vec<SplitEntry>,
}

impl DatasetSplit {
    pub fn train_prefixes(&self) -> TrainPrefixes<'_> {
        TrainPrefixes {
            lists: self.entries.iter().map(|e| e.prefix.as_slice()).collect(),
        }
    }
}

/// Training prefixes only — the input type of statistics mining, so
/// validation and test items cannot leak in by construction.
pub struct TrainPrefixes<'a> {
    lists: Vec<&'a [ItemId]>,
}

impl<'a> TrainPrefixes<'a> {
    /// For tests and oracles that build prefix lists directly.
    pub fn from_lists(lists: Vec<&'a [ItemId]>) -> Self {
        Self { lists }
    }

    pub fn lists(&self) -> &[&'a [ItemId]] {
        &self.lists
    }
}

/// Splits one sequence; errors if it is too short to supply
/// train + validation + test.
pub fn split_sequence(seq: &InteractionSequence) -> Result<SplitEntry, CorpusError> {
    let n = seq.items.len();
    if n < 3 {
        return Err(CorpusError::TooShort {
            user: seq.user.clone(),
            len: n,
        });
    }
    let mut all_items = seq.items.clone();
    all_items.sort_unstable();
    all_items.dedup();
    Ok(SplitEntry {
        user: seq.user.clone(),
        prefix: seq.items[..n - 2].to_vec(),
        valid: seq.items[n - 2],
        test: seq.items[n - 1],
        all_items,
    })
}

/// Split outcome: sequences shorter than 3 are dropped and reported by user.
#[derive(Debug, Default)]
pub struct SplitReport {
    pub split: DatasetSplit,
    pub rejected: Vec<String>,
}

pub fn leave_one_out_split(seqs: &[InteractionSequence]) -> SplitReport {
    let mut report = SplitReport::default();
    for seq in seqs {
        match split_sequence(seq) {
            Ok(entry) => report.split.entries.push(entry),
            Err(_) => report.rejected.push(seq.user.clone()),
        }
    }
    report
}

/// Fixed-length window over a sequence, real items right-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedWindow {
    /// Index into the split this window was built from, when applicable.
    pub seq_index: Option<usize>,
    pub items: Vec<ItemId>,
    pub mask: Vec<bool>,
    /// Per-position next item within the window's source list; 0 = none.
    pub targets: Vec<ItemId>,
}

impl PaddedWindow {
    pub fn max_len(&self) -> usize {
        self.items.len()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Pads or truncates to `max_len`, keeping the most recent items.
pub fn pad_window(items: &[ItemId], max_len: usize) -> PaddedWindow {
    assert!(max_len >= 1, "max_len must be at least 1");
    let kept = if items.len() > max_len {
        &items[items.len() - max_len..]
    } else {
        items
    };
    let pad = max_len - kept.len();
    let mut window = vec![PAD; max_len];
    let mut mask = vec![false; max_len];
    let mut targets = vec![PAD; max_len];
    for (i, &item) in kept.iter().enumerate() {
        window[pad + i] = item;
        mask[pad + i] = true;
        if i + 1 < kept.len() {
            targets[pad + i] = kept[i + 1];
        }
    }
    PaddedWindow {
        seq_index: None,
        items: window,
        mask,
        targets,
    }
}

/// Uniform draw from `1..=universe` minus the excluded ids.
/// `exclude` must be ascending and deduplicated, all ids in range.
pub fn sample_negative(
    exclude: &[ItemId],
    universe: u32,
    rng: &mut ChaCha8Rng,
) -> Result<ItemId, CorpusError> {
    debug_assert!(exclude.windows(2).all(|w| w[0] < w[1]));
    if exclude.len() as u32 >= universe {
        return Err(CorpusError::ExhaustedUniverse { universe });
    }
    // Rejection is exact-uniform over the complement; fall back to explicit
    // enumeration when the exclusion covers most of the universe.
    for _ in 0..64 {
        let candidate = rng.random_range(1..=universe);
        if exclude.binary_search(&candidate).is_err() {
            return Ok(candidate);
        }
    }
    let complement: Vec<ItemId> = (1..=universe)
        .filter(|id| exclude.binary_search(id).is_err())
        .collect();
    Ok(complement[rng.random_range(0..complement.len())])
}

/// One shuffled pass over the split's training prefixes, inclusive of a
/// final short batch.
pub struct BatchIter<'a> {
    split: &'a DatasetSplit,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    max_len: usize,
}

pub fn iter_batches<'a>(
    split: &'a DatasetSplit,
    max_len: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> BatchIter<'a> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..split.entries.len()).collect();
    order.shuffle(rng);
    BatchIter {
        split,
        order,
        pos: 0,
        batch_size,
        max_len,
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Vec<PaddedWindow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end]
            .iter()
            .map(|&i| {
                let mut w = pad_window(&self.split.entries[i].prefix, self.max_len);
                w.seq_index = Some(i);
                w
            })
            .collect();
        self.pos = end;
        Some(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::io::Write;

    fn seq(user: &str, items: &[ItemId]) -> InteractionSequence {
        InteractionSequence {
            user: user.into(),
            items: items.to_vec(),
        }
    }

    fn write_file(dir: &tempfile::TempDir, name: &str, content: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        p
    }

    #[test]
    fn load_parses_repeats_and_remaps() {
        let dir = tempfile::tempdir().unwrap();
        let ints = write_file(&dir, "i.tsv", "u1\t3 7 7 2\n");
        let attrs = write_file(&dir, "a.tsv", "3\t10 11\n7\t11\n");
        let ds = load_interactions(&ints, &attrs).unwrap();
        assert_eq!(ds.sequences.len(), 1);
        // raw 3 -> 1, raw 7 -> 2, raw 2 -> 3; repeats preserved
        assert_eq!(ds.sequences[0].items, vec![1, 2, 2, 3]);
        assert_eq!(ds.ids.items, vec![3, 7, 2]);
        assert_eq!(ds.catalog.attrs_of(1), &[1, 2]);
        assert_eq!(ds.catalog.attrs_of(2), &[2]);
        assert_eq!(ds.catalog.attrs_of(3), &[] as &[AttrId]);
    }

    #[test]
    fn load_empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ints = write_file(&dir, "i.tsv", "");
        let attrs = write_file(&dir, "a.tsv", "");
        let ds = load_interactions(&ints, &attrs).unwrap();
        assert!(ds.sequences.is_empty());
        assert_eq!(ds.n_items(), 0);
    }

    #[test]
    fn load_names_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let ints = write_file(&dir, "i.tsv", "u1\t3 x 2\n");
        let attrs = write_file(&dir, "a.tsv", "");
        let err = load_interactions(&ints, &attrs).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":1:"), "{msg}");
        assert!(msg.contains('x'), "{msg}");
    }

    #[test]
    fn load_rejects_duplicate_user() {
        let dir = tempfile::tempdir().unwrap();
        let ints = write_file(&dir, "i.tsv", "u1\t1 2\nu1\t3 4\n");
        let attrs = write_file(&dir, "a.tsv", "");
        let err = load_interactions(&ints, &attrs).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateUser { .. }));
    }

    #[test]
    fn split_five_items() {
        let entry = split_sequence(&seq("u", &[11, 12, 13, 14, 15])).unwrap();
        assert_eq!(entry.prefix, vec![11, 12, 13]);
        assert_eq!(entry.valid, 14);
        assert_eq!(entry.test, 15);
    }

    #[test]
    fn split_minimal_and_too_short() {
        let entry = split_sequence(&seq("u", &[5, 6, 7])).unwrap();
        assert_eq!(entry.prefix, vec![5]);
        assert_eq!(entry.valid, 6);
        assert_eq!(entry.test, 7);
        let err = split_sequence(&seq("short", &[5, 6])).unwrap_err();
        assert!(err.to_string().contains("short"));
    }

    #[test]
    fn leave_one_out_reports_rejects() {
        let report = leave_one_out_split(&[seq("a", &[1, 2, 3]), seq("b", &[1, 2])]);
        assert_eq!(report.split.entries.len(), 1);
        assert_eq!(report.rejected, vec!["b".to_string()]);
    }

    #[test]
    fn pad_window_layouts() {
        let w = pad_window(&[5, 9], 4);
        assert_eq!(w.items, vec![0, 0, 5, 9]);
        assert_eq!(w.mask, vec![false, false, true, true]);
        assert_eq!(w.targets, vec![0, 0, 9, 0]);

        let long: Vec<ItemId> = (1..=60).collect();
        let w = pad_window(&long, 50);
        assert_eq!(w.items, (11..=60).collect::<Vec<_>>());
        assert!(w.mask.iter().all(|&m| m));

        let w = pad_window(&[], 4);
        assert_eq!(w.items, vec![0, 0, 0, 0]);
        assert!(w.mask.iter().all(|&m| !m));
    }

    #[test]
    fn sample_negative_forced_singleton_and_exhaustion() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let got = sample_negative(&[1, 2, 3, 4], 5, &mut rng).unwrap();
        assert_eq!(got, 5);
        assert!(sample_negative(&[1, 2, 3, 4, 5], 5, &mut rng).is_err());
    }

    #[test]
    fn sample_negative_uniform_chi_square() {
        // 1e5 draws over 1000 items: chi-square against the uniform oracle.
        let universe = 1000u32;
        let draws = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut counts = vec![0u32; universe as usize];
        for _ in 0..draws {
            let id = sample_negative(&[], universe, &mut rng).unwrap();
            counts[id as usize - 1] += 1;
        }
        let expect = draws as f64 / universe as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expect;
                d * d / expect
            })
            .sum();
        // dof = 999: mean 999, sigma = sqrt(2*999) ~ 44.7; 3 sigma ~ 1133
        assert!((chi2 - 999.0).abs() < 3.0 * (2.0 * 999.0f64).sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn batches_cover_everything_once_deterministically() {
        let seqs: Vec<_> = (0..10)
            .map(|i| seq(&format!("u{i}"), &[1, 2, 3, 4]))
            .collect();
        let split = leave_one_out_split(&seqs).split;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sizes: Vec<usize> = iter_batches(&split, 8, 4, &mut rng).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let order = |seed: u64| -> Vec<usize> {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            iter_batches(&split, 8, 4, &mut r)
                .flatten()
                .map(|w| w.seq_index.unwrap())
                .collect()
        };
        assert_eq!(order(3), order(3));
        let mut covered = order(3);
        covered.sort_unstable();
        assert_eq!(covered, (0..10).collect::<Vec<_>>());

        let empty = DatasetSplit::default();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(iter_batches(&empty, 8, 4, &mut r).count(), 0);
    }
}
