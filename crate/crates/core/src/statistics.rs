//! Directional co-occurrence mining and prefix-level frequent attributes,
//! computed from training prefixes only.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{AttrId, AttributeCatalog, ItemId, TrainPrefixes};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("stats file: bad magic bytes")]
    BadMagic,
    #[error("stats file: unsupported version {0}")]
    BadVersion (u32),
    #[error("stats file: truncated or malformed ({0})")]
    Malformed(String),
    #[error("frequent_attributes: prefix is empty")]
    EmptyPrefix,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sequence-presence counts and directional pair counts. A pair (a, b) is
/// counted once per sequence in which some occurrence of b is strictly
/// after some occurrence of a.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct CountLedger {
    item: HashMap<ItemId, u32>,
    pair: HashMap<(ItemId, ItemId), u32>,
}

impl CountLedger {
    pub fn item_count(&self, i: ItemId) -> u32 {
        self.item.get(&i).copied().unwrap_or(0)
    }

    pub fn pair_count(&self, a: ItemId, b: ItemId) -> u32 {
        self.pair.get(&(a, b)).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: CountLedger) {
        for (k, v) in other.item {
            *self.item.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.pair {
            *self.pair.entry(k).or_insert(0) += v;
        }
    }
}

/// Counts item presence and ordered pairs over training prefixes.
/// Each sequence contributes at most 1 to any count.
pub fn count_cooccurrence(prefixes: &TrainPrefixes) -> CountLedger {
    let mut ledger = CountLedger::default();
    let mut items_seen: HashSet<ItemId> = HashSet::new();
    let mut pairs_seen: HashSet<(ItemId, ItemId)> = HashSet::new();
    for prefix in prefixes.lists() {
        items_seen.clear();
        pairs_seen.clear();
        for (s, &a) in prefix.iter().enumerate() {
            items_seen.insert(a);
            for &b in &prefix[s + 1..] {
                pairs_seen.insert((a, b));
            }
        }
        for &i in &items_seen {
            *ledger.item.entry(i).or_insert(0) += 1;
        }
        for &p in &pairs_seen {
            *ledger.pair.entry(p).or_insert(0) += 1;
        }
    }
    ledger
}

/// cnt(a,b) / (cnt(a) + cnt(b) - cnt(a,b)); 0 when the denominator is 0.
pub fn jaccard(ledger: &CountLedger, a: ItemId, b: ItemId) -> f32 {
    let ab = ledger.pair_count(a, b);
    let denom = ledger.item_count(a) + ledger.item_count(b) - ab;
    if denom == 0 {
        0.0
    } else {
        ab as f32 / denom as f32
    }
}

/// Per item: ranked successors with their Jaccard scores, capped at k.
/// Directional by construction; the table is not symmetric in general.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceTable {
    k: u32,
    /// indexed by item - 1: (successor, score), score descending
    ranked: Vec<Vec<(ItemId, f32)>>,
    /// same successors sorted by id, for membership tests and sampling
    by_id: Vec<Vec<ItemId>>,
}

impl CooccurrenceTable {
    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn n_items(&self) -> u32 {
        self.ranked.len() as u32
    }

    pub fn successors(&self, item: ItemId) -> &[(ItemId, f32)] {
        self.ranked
            .get(item as usize - 1)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Successor ids in ascending order.
    pub fn successor_ids(&self, item: ItemId) -> &[ItemId] {
        self.by_id
            .get(item as usize - 1)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    fn from_ranked(k: u32, ranked: Vec<Vec<(ItemId, f32)>>) -> Self {
        let by_id = ranked
            .iter()
            .map(|list| {
                let mut ids: Vec<ItemId> = list.iter().map(|&(i, _)| i).collect();
                ids.sort_unstable();
                ids
            })
            .collect();
        Self { k, ranked, by_id }
    }
}

/// Ranks each item's successors by (score desc, pair count desc, id asc),
/// drops self-pairs and zero scores, truncates to k.
pub fn build_cooccurrence_table(ledger: &CountLedger, n_items: u32, k: u32) -> CooccurrenceTable {
    assert!(k >= 1);
    let mut per_item: Vec<Vec<(ItemId, u32)>> = vec![Vec::new(); n_items as usize];
    for (&(a, b), &cnt) in &ledger.pair {
        if a != b && a >= 1 && a <= n_items {
            per_item[a as usize - 1].push((b, cnt));
        }
    }
    let ranked = per_item
        .into_iter()
        .enumerate()
        .map(|(idx, succs)| {
            let a = idx as u32 + 1;
            let mut scored: Vec<(ItemId, f32, u32)> = succs
                .into_iter()
                .map(|(b, cnt)| (b, jaccard(ledger, a, b), cnt))
                .filter(|&(_, score, _)| score > 0.0)
                .collect();
            scored.sort_by(|x, y| {
                y.1.partial_cmp(&x.1)
                    .unwrap()
                    .then(y.2.cmp(&x.2))
                    .then(x.0.cmp(&y.0))
            });
            scored.truncate(k as usize);
            scored.into_iter().map(|(b, s, _)| (b, s)).collect()
        })
        .collect();
    CooccurrenceTable::from_ranked(k, ranked)
}

/// Top-k attributes of a prefix, counted once per item occurrence and
/// ranked by (frequency desc, attribute id asc).
#[derive(Debug, Clone, PartialEq)]
pub struct FrequentAttributeSet {
    pub ranked: Vec<(AttrId, u32)>,
}

impl FrequentAttributeSet {
    pub fn ids(&self) -> Vec<AttrId> {
        self.ranked.iter().map(|&(a, _)| a).collect()
    }
}

pub fn frequent_attributes(
    prefix: &[ItemId],
    catalog: &AttributeCatalog,
    k: u32,
) -> Result<FrequentAttributeSet, StatsError> {
    if prefix.is_empty() {
        return Err(StatsError::EmptyPrefix);
    }
    let mut tracker = PrefixAttributeTracker::new(k);
    for &item in prefix {
        tracker.push(catalog.attrs_of(item));
    }
    Ok(tracker.top())
}

/// Incrementally maintains per-step frequent attributes while walking a
/// prefix left to right; `top()` after the t-th push equals
/// `frequent_attributes(&prefix[..=t], ...)`.
pub struct PrefixAttributeTracker {
    k: u32,
    counts: HashMap<AttrId, u32>,
    // (count desc via Reverse-free trick: store (u32::MAX - count, id))
    order: BTreeSet<(u32, AttrId)>,
}

impl PrefixAttributeTracker {
    pub fn new(k: u32) -> Self {
        assert!(k >= 1);
        Self {
            k,
            counts: HashMap::new(),
            order: BTreeSet::new(),
        }
    }

    pub fn push(&mut self, attrs: &[AttrId]) {
        for &a in attrs {
            let c = self.counts.entry(a).or_insert(0);
            if *c > 0 {
                self.order.remove(&(u32::MAX - *c, a));
            }
            *c += 1;
            self.order.insert((u32::MAX - *c, a));
        }
    }

    pub fn top(&self) -> FrequentAttributeSet {
        let ranked = self
            .order
            .iter()
            .take(self.k as usize)
            .map(|&(inv, a)| (a, u32::MAX - inv))
            .collect();
        FrequentAttributeSet { ranked }
    }

    /// Number of distinct attributes seen so far.
    pub fn distinct(&self) -> usize {
        self.counts.len()
    }
}

const STATS_MAGIC: &[u8; 4] = b"STDP";
const STATS_VERSION: u32 = 1;

/// Binary, little-endian: magic "STDP", version, item count, k; then per
/// item in ascending id order a u16 list length and (id u32, score f32)
/// pairs.
pub fn save_stats(table: &CooccurrenceTable, path: impl AsRef<Path>) -> Result<(), StatsError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(STATS_MAGIC)?;
    w.write_all(&STATS_VERSION.to_le_bytes())?;
    w.write_all(&table.n_items().to_le_bytes())?;
    w.write_all(&table.k.to_le_bytes())?;
    for list in &table.ranked {
        w.write_all(&(list.len() as u16).to_le_bytes())?;
        for &(id, score) in list {
            w.write_all(&id.to_le_bytes())?;
            w.write_all(&score.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_stats(path: impl AsRef<Path>) -> Result<CooccurrenceTable, StatsError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != STATS_MAGIC {
        return Err(StatsError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != STATS_VERSION {
        return Err(StatsError::BadVersion(version));
    }
    let n_items = read_u32(&mut r)?;
    let k = read_u32(&mut r)?;
    let mut ranked = Vec::with_capacity(n_items as usize);
    for _ in 0..n_items {
        let len = read_u16(&mut r)?;
        let mut list = Vec::with_capacity(len as usize);
        for _ in 0..len {
            let id = read_u32(&mut r)?;
            let mut buf = [0u8; 4];
            read_exact(&mut r, &mut buf)?;
            list.push((id, f32::from_le_bytes(buf)));
        }
        ranked.push(list);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(StatsError::Malformed("trailing bytes".into()));
    }
    Ok(CooccurrenceTable::from_ranked(k, ranked))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), StatsError> {
    r.read_exact(buf)
        .map_err(|e| StatsError::Malformed(e.to_string()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, StatsError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16, StatsError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TrainPrefixes;

    const A: ItemId = 1;
    const B: ItemId = 2;
    const C: ItemId = 3;

    fn three_seq_ledger() -> CountLedger {
        let lists: Vec<Vec<ItemId>> = vec![vec![A, B, C], vec![A, C], vec![B, A, C]];
        let refs: Vec<&[ItemId]> = lists.iter().map(|v| v.as_slice()).collect();
        count_cooccurrence(&TrainPrefixes::from_lists(refs))
    }

    #[test]
    fn counts_match_hand_derivation() {
        let ledger = three_seq_ledger();
        assert_eq!(ledger.item_count(A), 3);
        assert_eq!(ledger.item_count(B), 2);
        assert_eq!(ledger.item_count(C), 3);
        // B follows A only in the first sequence; B precedes A in the third
        assert_eq!(ledger.pair_count(A, B), 1);
        assert_eq!(ledger.pair_count(A, C), 3);
        assert_eq!(ledger.pair_count(B, A), 1);
    }

    #[test]
    fn repeated_item_counts_once_and_forms_self_pair() {
        let lists: Vec<Vec<ItemId>> = vec![vec![A, A, A]];
        let refs: Vec<&[ItemId]> = lists.iter().map(|v| v.as_slice()).collect();
        let ledger = count_cooccurrence(&TrainPrefixes::from_lists(refs));
        assert_eq!(ledger.item_count(A), 1);
        assert_eq!(ledger.pair_count(A, A), 1);
        // self-pairs stay in the ledger but never enter the table
        let table = build_cooccurrence_table(&ledger, 1, 20);
        assert!(table.successors(A).is_empty());
    }

    #[test]
    fn empty_corpus_all_zero() {
        let ledger = count_cooccurrence(&TrainPrefixes::from_lists(vec![]));
        assert_eq!(ledger.item_count(A), 0);
        assert_eq!(ledger.pair_count(A, B), 0);
    }

    #[test]
    fn jaccard_values_from_example_corpus() {
        let ledger = three_seq_ledger();
        assert_eq!(jaccard(&ledger, A, C), 1.0);
        assert_eq!(jaccard(&ledger, A, B), 0.25);
        assert_eq!(jaccard(&ledger, C, B), 0.0); // zero numerator
        assert_eq!(jaccard(&ledger, 9, 9), 0.0); // zero denominator
    }

    #[test]
    fn table_ranking_and_ties() {
        let ledger = three_seq_ledger();
        let table = build_cooccurrence_table(&ledger, 3, 20);
        // A: C scores 1.0, B scores 0.25
        assert_eq!(table.successors(A), &[(C, 1.0), (B, 0.25)]);
        // item never seen
        let table_k1 = build_cooccurrence_table(&ledger, 5, 20);
        assert!(table_k1.successors(4).is_empty());
        assert!(table_k1.successors(5).is_empty());
    }

    #[test]
    fn equal_score_equal_count_breaks_by_lower_id() {
        // one sequence [A, B], another [A, C]: B and C both score
        // 1/(2+1-1) = 0.5 from A with pair count 1
        let lists: Vec<Vec<ItemId>> = vec![vec![A, B], vec![A, C]];
        let refs: Vec<&[ItemId]> = lists.iter().map(|v| v.as_slice()).collect();
        let ledger = count_cooccurrence(&TrainPrefixes::from_lists(refs));
        let table = build_cooccurrence_table(&ledger, 3, 20);
        assert_eq!(table.successors(A), &[(B, 0.5), (C, 0.5)]);
    }

    #[test]
    fn truncation_is_a_noop_below_k() {
        let lists: Vec<Vec<ItemId>> = vec![vec![A, B]];
        let refs: Vec<&[ItemId]> = lists.iter().map(|v| v.as_slice()).collect();
        let ledger = count_cooccurrence(&TrainPrefixes::from_lists(refs));
        let table = build_cooccurrence_table(&ledger, 2, 20);
        assert_eq!(table.successors(A).len(), 1);
    }

    fn catalog_abc() -> AttributeCatalog {
        // item 1 -> {1, 2}, item 2 -> {2, 3}, item 3 -> {2}
        AttributeCatalog::from_sets(vec![vec![1, 2], vec![2, 3], vec![2]], 3)
    }

    #[test]
    fn frequent_attributes_ranks_and_ties() {
        let cat = catalog_abc();
        let top1 = frequent_attributes(&[1, 2, 3], &cat, 1).unwrap();
        assert_eq!(top1.ranked, vec![(2, 3)]);
        let top2 = frequent_attributes(&[1, 2, 3], &cat, 2).unwrap();
        // attrs 1 and 3 tie at 1; lower id wins
        assert_eq!(top2.ranked, vec![(2, 3), (1, 1)]);
        assert!(frequent_attributes(&[], &cat, 2).is_err());
    }

    #[test]
    fn single_shared_attribute() {
        let cat = AttributeCatalog::from_sets(vec![vec![7], vec![7], vec![7]], 7);
        let top = frequent_attributes(&[1, 2, 3], &cat, 20).unwrap();
        assert_eq!(top.ranked, vec![(7, 3)]);
    }

    #[test]
    fn tracker_matches_full_recount_per_step() {
        let cat = catalog_abc();
        let prefix = [1u32, 2, 2, 3, 1];
        let mut tracker = PrefixAttributeTracker::new(2);
        for t in 0..prefix.len() {
            tracker.push(cat.attrs_of(prefix[t]));
            let expect = frequent_attributes(&prefix[..=t], &cat, 2).unwrap();
            assert_eq!(tracker.top(), expect, "step {t}");
        }
    }

    #[test]
    fn stats_file_round_trip() {
        let ledger = three_seq_ledger();
        let table = build_cooccurrence_table(&ledger, 3, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.bin");
        save_stats(&table, &path).unwrap();
        let loaded = load_stats(&path).unwrap();
        assert_eq!(loaded, table);

        let empty = build_cooccurrence_table(&CountLedger::default(), 0, 20);
        let path2 = dir.path().join("empty.bin");
        save_stats(&empty, &path2).unwrap();
        assert_eq!(load_stats(&path2).unwrap(), empty);
    }

    #[test]
    fn stats_file_rejects_corruption() {
        let ledger = three_seq_ledger();
        let table = build_cooccurrence_table(&ledger, 3, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.bin");
        save_stats(&table, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_stats(&path), Err(StatsError::BadMagic)));

        save_stats(&table, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_stats(&path), Err(StatsError::Malformed(_))));
    }

    #[test]
    fn mining_consumes_training_prefixes_only() {
        // Mining from the split's prefixes equals mining hand-sliced first
        // n-2 segments; appended valid/test items can never participate.
        use crate::corpus::{leave_one_out_split, InteractionSequence};
        let seqs = vec![
            InteractionSequence {
                user: "a".into(),
                items: vec![1, 2, 3, 4, 5],
            },
            InteractionSequence {
                user: "b".into(),
                items: vec![2, 1, 2, 4],
            },
        ];
        let split = leave_one_out_split(&seqs).split;
        let mined = count_cooccurrence(&split.train_prefixes());
        let sliced: Vec<&[ItemId]> = seqs
            .iter()
            .map(|s| &s.items[..s.items.len() - 2])
            .collect();
        let oracle = count_cooccurrence(&TrainPrefixes::from_lists(sliced));
        assert_eq!(mined, oracle);
        // the held-out items 4/5 from "a" never form prefix pairs
        assert_eq!(mined.pair_count(3, 4), 0);
        assert_eq!(mined.pair_count(4, 5), 0);
    }
}
