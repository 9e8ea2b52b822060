//! Sampled-candidate ranking evaluation: HR@5/10, NDCG@5/10, MRR.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tape;
use crate::corpus::{pad_window, DatasetSplit, ItemId, PaddedWindow};
use crate::model::{encode, score_item, Mode, ModelConfig, ModelError, Parameters};
use crate::rng::{purpose, stream};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("candidate pool too small: need {needed} negatives, {available} items available")]
    InsufficientPool { needed: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Valid,
    Test,
}

/// Metric means over all evaluated sequences.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub mrr: f64,
}

/// The ground-truth item followed by `n_neg` distinct negatives drawn
/// uniformly without replacement from items absent from the user's
/// sequence. The target is always at index 0.
pub fn sample_candidates(
    user_items: &[ItemId],
    target: ItemId,
    n_neg: usize,
    universe: u32,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ItemId>, EvalError> {
    debug_assert!(user_items.windows(2).all(|w| w[0] < w[1]));
    let available = universe as usize - user_items.len();
    if available < n_neg {
        return Err(EvalError::InsufficientPool {
            needed: n_neg,
            available,
        });
    }
    let mut candidates = Vec::with_capacity(n_neg + 1);
    candidates.push(target);
    if universe as usize >= 2 * (user_items.len() + n_neg) {
        // rejection sampling; the accepted subset is uniform
        let mut drawn = std::collections::HashSet::with_capacity(n_neg);
        while candidates.len() < n_neg + 1 {
            let c = rng.random_range(1..=universe);
            if user_items.binary_search(&c).is_err() && drawn.insert(c) {
                candidates.push(c);
            }
        }
    } else {
        // small pool: enumerate the complement and partially shuffle
        let mut pool: Vec<ItemId> = (1..=universe)
            .filter(|id| user_items.binary_search(id).is_err())
            .collect();
        for i in 0..n_neg {
            let j = rng.random_range(i..pool.len());
            pool.swap(i, j);
            candidates.push(pool[i]);
        }
    }
    Ok(candidates)
}

/// Per-sequence metrics at a pessimistically tie-broken rank.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankMetrics {
    pub rank: usize,
    pub hr5: f64,
    pub hr10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub rr: f64,
}

/// Rank = 1 + number of non-target candidates scoring >= the target
/// (ties never favor the target).
pub fn rank_metrics(scores: &[f32], target_index: usize) -> RankMetrics {
    let target_score = scores[target_index];
    let rank = 1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != target_index && s >= target_score)
        .count();
    let gain = |k: usize| -> f64 {
        if rank <= k {
            1.0 / ((rank as f64) + 1.0).log2()
        } else {
            0.0
        }
    };
    RankMetrics {
        rank,
        hr5: if rank <= 5 { 1.0 } else { 0.0 },
        hr10: if rank <= 10 { 1.0 } else { 0.0 },
        ndcg5: gain(5),
        ndcg10: gain(10),
        rr: 1.0 / rank as f64,
    }
}

fn history_window(entry: &crate::corpus::SplitEntry, mode: EvalMode, max_len: usize) -> PaddedWindow {
    match mode {
        EvalMode::Valid => pad_window(&entry.prefix, max_len),
        EvalMode::Test => {
            let mut history = entry.prefix.clone();
            history.push(entry.valid);
            pad_window(&history, max_len)
        }
    }
}

fn eval_entry(
    params: &Parameters,
    entry: &crate::corpus::SplitEntry,
    state: &[f32],
    mode: EvalMode,
    n_neg: usize,
    eval_seed: u64,
    entry_index: usize,
) -> Result<RankMetrics, EvalError> {
    let target = match mode {
        EvalMode::Valid => entry.valid,
        EvalMode::Test => entry.test,
    };
    let mut rng = stream(eval_seed, &[purpose::EVAL, entry_index as u64]);
    let candidates = sample_candidates(&entry.all_items, target, n_neg, params.n_items(), &mut rng)?;
    let scores: Vec<f32> = candidates
        .iter()
        .map(|&c| score_item(state, c, params))
        .collect();
    Ok(rank_metrics(&scores, 0))
}

/// Encodes each sequence's history (training prefix for Valid, prefix plus
/// the validation item for Test), scores the target against sampled
/// negatives at the final state, and averages the rank metrics. Candidate
/// draws depend only on `eval_seed` and the sequence index, so reports are
/// identical across thread counts and runs.
pub fn evaluate(
    split: &DatasetSplit,
    params: &Parameters,
    cfg: &ModelConfig,
    mode: EvalMode,
    eval_seed: u64,
    n_neg: usize,
    threads: usize,
) -> Result<EvalReport, EvalError> {
    const ENCODE_BATCH: usize = 256;
    let entries = &split.entries;
    let chunk_results: Result<Vec<Vec<RankMetrics>>, EvalError> = {
        let work = |chunk: (usize, &[crate::corpus::SplitEntry])| {
            let (chunk_start, chunk_entries) = chunk;
            let windows: Vec<PaddedWindow> = chunk_entries
                .iter()
                .map(|e| history_window(e, mode, cfg.max_len))
                .collect();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let states = encode(&mut tape, &bound, &windows, cfg, Mode::Eval, None)?;
            let data = tape.value(states).data();
            let (t, d) = (cfg.max_len, cfg.d);
            chunk_entries
                .iter()
                .enumerate()
                .map(|(i, entry)| {
                    let state = &data[(i * t + t - 1) * d..(i * t + t) * d];
                    eval_entry(params, entry, state, mode, n_neg, eval_seed, chunk_start + i)
                })
                .collect::<Result<Vec<_>, _>>()
        };
        let chunks: Vec<(usize, &[crate::corpus::SplitEntry])> = entries
            .chunks(ENCODE_BATCH)
            .enumerate()
            .map(|(ci, c)| (ci * ENCODE_BATCH, c))
            .collect();
        if threads > 1 {
            use rayon::prelude::*;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .expect("thread pool");
            pool.install(|| chunks.into_par_iter().map(work).collect())
        } else {
            chunks.into_iter().map(work).collect()
        }
    };
    // fixed-order f64 aggregation: the report is independent of threading
    let mut sums = [0.0f64; 5];
    let mut n = 0usize;
    for m in chunk_results?.into_iter().flatten() {
        sums[0] += m.hr5;
        sums[1] += m.hr10;
        sums[2] += m.ndcg5;
        sums[3] += m.ndcg10;
        sums[4] += m.rr;
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok(EvalReport {
        hr5: sums[0] / n,
        hr10: sums[1] / n,
        ndcg5: sums[2] / n,
        ndcg10: sums[3] / n,
        mrr: sums[4] / n,
    })
}

impl EvalReport {
    /// Human-readable table.
    pub fn table(&self) -> String {
        format!(
            "metric   value\nHR@5     {:.4}\nHR@10    {:.4}\nNDCG@5   {:.4}\nNDCG@10  {:.4}\nMRR      {:.4}",
            self.hr5, self.hr10, self.ndcg5, self.ndcg10, self.mrr
        )
    }
}
