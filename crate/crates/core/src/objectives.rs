//! Pre-training and fine-tuning objectives: co-occurred item prediction,
//! paired-sequence similarity, item/frequent attribute prediction, and
//! next-item prediction, plus their joint weighted combination.
//!
//! Target sampling is separated from graph construction so samples can be
//! frozen for gradient checks, and every task draws from its own rng stream
//! so disabling one task never shifts another's randomness.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{log_sigmoid_scalar, Tape, Tensor, TensorError, Var};
use crate::corpus::{sample_negative, AttributeCatalog, DatasetSplit, ItemId, PaddedWindow};
use crate::model::{encode, BoundParams, Mode, ModelConfig, ModelError, Parameters};
use crate::statistics::{CooccurrenceTable, PrefixAttributeTracker};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Task weights for joint pre-training. A zero weight disables the task:
/// its graph is not built and its rng stream is not consumed.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub cip: f32,
    pub pss: f32,
    pub iap: f32,
    pub fap: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cip: 0.3,
            pss: 0.3,
            iap: 0.8,
            fap: 0.5,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            cip: 0.0,
            pss: 0.0,
            iap: 0.0,
            fap: 0.0,
        }
    }

    pub fn all_zero(&self) -> bool {
        self.cip == 0.0 && self.pss == 0.0 && self.iap == 0.0 && self.fap == 0.0
    }
}

/// -log sigmoid(pos - neg): the shared pairwise ranking form.
pub fn pairwise_rank_loss(pos_score: f32, neg_score: f32) -> f32 {
    -log_sigmoid_scalar(pos_score - neg_score)
}

/// Frozen per-step target draws for one pairwise-ranking task over a
/// [batch, max_len] grid. Inactive steps carry id 0 and weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSamples {
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
    pub weight: Vec<f32>,
    pub active: usize,
}

impl StepSamples {
    fn sized(n: usize) -> Self {
        Self {
            pos: vec![0; n],
            neg: vec![0; n],
            weight: vec![0.0; n],
            active: 0,
        }
    }

    fn set(&mut self, slot: usize, pos: u32, neg: u32) {
        self.pos[slot] = pos;
        self.neg[slot] = neg;
        self.weight[slot] = 1.0;
        self.active += 1;
    }
}

/// Per mask-on step: positive uniform from the step item's co-occurrence
/// set, negative uniform outside it. Steps with empty sets stay inactive.
pub fn sample_cip_targets(
    batch: &[PaddedWindow],
    cooc: &CooccurrenceTable,
    n_items: u32,
    rng: &mut ChaCha8Rng,
) -> StepSamples {
    let t = batch.first().map(|w| w.max_len()).unwrap_or(0);
    let mut s = StepSamples::sized(batch.len() * t);
    for (bi, w) in batch.iter().enumerate() {
        for (ti, (&item, &m)) in w.items.iter().zip(&w.mask).enumerate() {
            if !m {
                continue;
            }
            let succ = cooc.successors(item);
            if succ.is_empty() {
                continue;
            }
            let pos = succ[rng.random_range(0..succ.len())].0;
            let Ok(neg) = sample_negative(cooc.successor_ids(item), n_items, rng) else {
                continue;
            };
            s.set(bi * t + ti, pos, neg);
        }
    }
    s
}

/// Per mask-on step: positive uniform from the step item's attribute set,
/// negative uniform from its complement.
pub fn sample_iap_targets(
    batch: &[PaddedWindow],
    catalog: &AttributeCatalog,
    rng: &mut ChaCha8Rng,
) -> StepSamples {
    let n_attrs = catalog.n_attrs();
    let t = batch.first().map(|w| w.max_len()).unwrap_or(0);
    let mut s = StepSamples::sized(batch.len() * t);
    for (bi, w) in batch.iter().enumerate() {
        for (ti, (&item, &m)) in w.items.iter().zip(&w.mask).enumerate() {
            if !m {
                continue;
            }
            let attrs = catalog.attrs_of(item);
            if attrs.is_empty() {
                continue;
            }
            let pos = attrs[rng.random_range(0..attrs.len())];
            let Ok(neg) = sample_negative(attrs, n_attrs, rng) else {
                continue;
            };
            s.set(bi * t + ti, pos, neg);
        }
    }
    s
}

/// Per mask-on step: positive uniform from the top-k frequent attributes of
/// the window's visible items up to and including the step, negative from
/// their complement. Steps with an empty set or full complement stay
/// inactive.
pub fn sample_fap_targets(
    batch: &[PaddedWindow],
    catalog: &AttributeCatalog,
    k: u32,
    rng: &mut ChaCha8Rng,
) -> StepSamples {
    let n_attrs = catalog.n_attrs();
    let t = batch.first().map(|w| w.max_len()).unwrap_or(0);
    let mut s = StepSamples::sized(batch.len() * t);
    for (bi, w) in batch.iter().enumerate() {
        let mut tracker = PrefixAttributeTracker::new(k);
        for (ti, (&item, &m)) in w.items.iter().zip(&w.mask).enumerate() {
            if !m {
                continue;
            }
            tracker.push(catalog.attrs_of(item));
            let top = tracker.top();
            if top.ranked.is_empty() {
                continue;
            }
            let pos = top.ranked[rng.random_range(0..top.ranked.len())].0;
            let mut ids = top.ids();
            ids.sort_unstable();
            let Ok(neg) = sample_negative(&ids, n_attrs, rng) else {
                continue;
            };
            s.set(bi * t + ti, pos, neg);
        }
    }
    s
}

/// Per step with a ground-truth next item: that item as the positive, a
/// uniform draw outside the sequence's items as the negative.
pub fn sample_nip_targets(
    batch: &[PaddedWindow],
    split: &DatasetSplit,
    n_items: u32,
    rng: &mut ChaCha8Rng,
) -> StepSamples {
    let t = batch.first().map(|w| w.max_len()).unwrap_or(0);
    let mut s = StepSamples::sized(batch.len() * t);
    let mut fallback: Vec<ItemId>;
    for (bi, w) in batch.iter().enumerate() {
        let exclude: &[ItemId] = match w.seq_index {
            Some(i) => &split.entries[i].all_items,
            None => {
                fallback = w
                    .items
                    .iter()
                    .copied()
                    .filter(|&i| i != crate::corpus::PAD)
                    .collect();
                fallback.sort_unstable();
                fallback.dedup();
                &fallback
            }
        };
        for (ti, (&target, &m)) in w.targets.iter().zip(&w.mask).enumerate() {
            if !m || target == crate::corpus::PAD {
                continue;
            }
            let Ok(neg) = sample_negative(exclude, n_items, rng) else {
                continue;
            };
            s.set(bi * t + ti, target, neg);
        }
    }
    s
}

/// Mean over active steps of -log sigmoid(pos - neg), with scores formed by
/// dotting gathered embedding rows against the per-step states.
/// None when no step contributes.
pub fn rank_loss_graph(
    tape: &mut Tape,
    states: Var,
    table: Var,
    samples: &StepSamples,
    batch: usize,
    max_len: usize,
) -> Result<Option<Var>, TensorError> {
    if samples.active == 0 {
        return Ok(None);
    }
    let pos_e = tape.gather(table, &samples.pos, &[batch, max_len])?;
    let neg_e = tape.gather(table, &samples.neg, &[batch, max_len])?;
    let pos_prod = tape.mul(pos_e, states)?;
    let neg_prod = tape.mul(neg_e, states)?;
    let pos_s = tape.sum_axis(pos_prod, 2)?;
    let neg_s = tape.sum_axis(neg_prod, 2)?;
    let margin = tape.sub(pos_s, neg_s)?;
    let ls = tape.log_sigmoid(margin)?;
    let w = tape.constant(Tensor::new(
        vec![batch, max_len],
        samples.weight.clone(),
    )?);
    let weighted = tape.mul(ls, w)?;
    let total = tape.sum_all(weighted)?;
    Ok(Some(tape.scale(total, -1.0 / samples.active as f32)?))
}

/// Mean over mask-on positions of the symmetric KL divergence between the
/// two states' feature-dimension softmax distributions.
pub fn pss_graph(
    tape: &mut Tape,
    states_a: Var,
    states_b: Var,
    batch: &[PaddedWindow],
) -> Result<Option<Var>, TensorError> {
    let b = batch.len();
    let t = batch.first().map(|w| w.max_len()).unwrap_or(0);
    let weights: Vec<f32> = batch
        .iter()
        .flat_map(|w| w.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
        .collect();
    let active = weights.iter().filter(|&&w| w > 0.0).count();
    if active == 0 {
        return Ok(None);
    }
    let p = tape.softmax(states_a, 2)?;
    let lp = tape.log_softmax(states_a, 2)?;
    let q = tape.softmax(states_b, 2)?;
    let lq = tape.log_softmax(states_b, 2)?;
    let d_pq = tape.sub(lp, lq)?;
    let m_pq = tape.mul(p, d_pq)?;
    let kl_pq = tape.sum_axis(m_pq, 2)?;
    let d_qp = tape.sub(lq, lp)?;
    let m_qp = tape.mul(q, d_qp)?;
    let kl_qp = tape.sum_axis(m_qp, 2)?;
    let sym = tape.add(kl_pq, kl_qp)?;
    let half = tape.scale(sym, 0.5)?;
    let w = tape.constant(Tensor::new(vec![b, t], weights)?);
    let weighted = tape.mul(half, w)?;
    let total = tape.sum_all(weighted)?;
    Ok(Some(tape.scale(total, 1.0 / active as f32)?))
}

/// Original windows alongside their replacement/reorder-augmented copies;
/// masks are shared.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub original: Vec<PaddedWindow>,
    pub paired: Vec<PaddedWindow>,
}

/// Stage 1: each real item independently becomes a uniform draw from its
/// co-occurrence set with probability `p_rpc` (items with empty sets are
/// left alone). Stage 2: a uniformly placed contiguous segment of
/// ceil(beta * real_len) real positions is uniformly permuted.
pub fn make_paired_sequence(
    window: &PaddedWindow,
    cooc: &CooccurrenceTable,
    p_rpc: f32,
    beta: f32,
    rng: &mut ChaCha8Rng,
) -> PaddedWindow {
    let mut paired = window.clone();
    let t = window.max_len();
    let real = window.real_len();
    let pad = t - real;
    for ti in pad..t {
        let item = paired.items[ti];
        if rng.random::<f32>() < p_rpc {
            let succ = cooc.successors(item);
            if !succ.is_empty() {
                paired.items[ti] = succ[rng.random_range(0..succ.len())].0;
            }
        }
    }
    let seg_len = (beta * real as f32).ceil() as usize;
    if seg_len >= 2 {
        let start = pad + rng.random_range(0..=real - seg_len);
        // Fisher-Yates over the segment
        for i in (1..seg_len).rev() {
            let j = rng.random_range(0..=i);
            paired.items.swap(start + i, start + j);
        }
    }
    paired
}

pub fn make_paired_batch(
    batch: &[PaddedWindow],
    cooc: &CooccurrenceTable,
    p_rpc: f32,
    beta: f32,
    rng: &mut ChaCha8Rng,
) -> PairedBatch {
    PairedBatch {
        original: batch.to_vec(),
        paired: batch
            .iter()
            .map(|w| make_paired_sequence(w, cooc, p_rpc, beta, rng))
            .collect(),
    }
}

/// Independent rng streams for one pre-training batch.
pub struct PretrainRngs {
    pub cip: ChaCha8Rng,
    pub pss: ChaCha8Rng,
    pub iap: ChaCha8Rng,
    pub fap: ChaCha8Rng,
    pub dropout_main: ChaCha8Rng,
    pub dropout_paired: ChaCha8Rng,
}

/// Unweighted per-task loss values for one batch; None = task disabled.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TaskLossValues {
    pub cip: Option<f32>,
    pub pss: Option<f32>,
    pub iap: Option<f32>,
    pub fap: Option<f32>,
}

pub struct PretrainBatchGraph {
    pub bound: BoundParams,
    /// Weighted total; None when nothing contributed.
    pub total: Option<Var>,
    pub parts: TaskLossValues,
}

/// Builds the joint pre-training objective for one batch: a single encode
/// shared by CIP/IAP/FAP, a second encode of the paired batch for PSS, and
/// the weighted sum of enabled task losses.
#[allow(clippy::too_many_arguments)]
pub fn build_pretrain_graph(
    tape: &mut Tape,
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[PaddedWindow],
    cooc: &CooccurrenceTable,
    catalog: &AttributeCatalog,
    weights: &LossWeights,
    k_freq: u32,
    p_rpc: f32,
    beta: f32,
    mode: Mode,
    rngs: &mut PretrainRngs,
) -> Result<PretrainBatchGraph, ObjectiveError> {
    let bound = params.bind(tape);
    let mut parts = TaskLossValues::default();
    if weights.all_zero() || batch.is_empty() {
        return Ok(PretrainBatchGraph {
            bound,
            total: None,
            parts,
        });
    }
    let b = batch.len();
    let t = cfg.max_len;
    let states = encode(
        tape,
        &bound,
        batch,
        cfg,
        mode,
        Some(&mut rngs.dropout_main),
    )?;

    let mut terms: Vec<Var> = Vec::new();
    if weights.cip > 0.0 {
        let samples = sample_cip_targets(batch, cooc, params.n_items(), &mut rngs.cip);
        let loss = rank_loss_graph(tape, states, bound.item_emb, &samples, b, t)?;
        parts.cip = Some(loss.map(|l| tape.value(l).item()).unwrap_or(0.0));
        if let Some(l) = loss {
            terms.push(tape.scale(l, weights.cip)?);
        }
    }
    if weights.pss > 0.0 {
        let paired = make_paired_batch(batch, cooc, p_rpc, beta, &mut rngs.pss);
        let states_p = encode(
            tape,
            &bound,
            &paired.paired,
            cfg,
            mode,
            Some(&mut rngs.dropout_paired),
        )?;
        let loss = pss_graph(tape, states, states_p, batch)?;
        parts.pss = Some(loss.map(|l| tape.value(l).item()).unwrap_or(0.0));
        if let Some(l) = loss {
            terms.push(tape.scale(l, weights.pss)?);
        }
    }
    if weights.iap > 0.0 {
        let samples = sample_iap_targets(batch, catalog, &mut rngs.iap);
        let loss = rank_loss_graph(tape, states, bound.attr_emb, &samples, b, t)?;
        parts.iap = Some(loss.map(|l| tape.value(l).item()).unwrap_or(0.0));
        if let Some(l) = loss {
            terms.push(tape.scale(l, weights.iap)?);
        }
    }
    if weights.fap > 0.0 {
        let samples = sample_fap_targets(batch, catalog, k_freq, &mut rngs.fap);
        let loss = rank_loss_graph(tape, states, bound.attr_emb, &samples, b, t)?;
        parts.fap = Some(loss.map(|l| tape.value(l).item()).unwrap_or(0.0));
        if let Some(l) = loss {
            terms.push(tape.scale(l, weights.fap)?);
        }
    }

    let mut total = None;
    for term in terms {
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(PretrainBatchGraph {
        bound,
        total,
        parts,
    })
}

pub struct NipBatchGraph {
    pub bound: BoundParams,
    pub loss: Option<Var>,
    pub value: f32,
}

/// Next-item prediction objective for one batch.
pub fn build_nip_graph(
    tape: &mut Tape,
    params: &Parameters,
    cfg: &ModelConfig,
    batch: &[PaddedWindow],
    split: &DatasetSplit,
    mode: Mode,
    sample_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<NipBatchGraph, ObjectiveError> {
    let bound = params.bind(tape);
    if batch.is_empty() {
        return Ok(NipBatchGraph {
            bound,
            loss: None,
            value: 0.0,
        });
    }
    let states = encode(tape, &bound, batch, cfg, mode, Some(dropout_rng))?;
    let samples = sample_nip_targets(batch, split, params.n_items(), sample_rng);
    let loss = rank_loss_graph(
        tape,
        states,
        bound.item_emb,
        &samples,
        batch.len(),
        cfg.max_len,
    )?;
    let value = loss.map(|l| tape.value(l).item()).unwrap_or(0.0);
    Ok(NipBatchGraph {
        bound,
        loss,
        value,
    })
}
