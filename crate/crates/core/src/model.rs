//! Causal self-attention next-item encoder: embeddings, stacked pre-norm
//! attention blocks, and dot-product scoring heads for items and attributes.

use std::sync::Arc;


use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::corpus::{AttrId, ItemId, PaddedWindow};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("window length {got} does not match configured max_len {expected}")]
    WindowLength { got: usize, expected: usize },
    #[error("train-mode encode needs a dropout rng")]
    MissingRng,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// hidden size
    pub d: usize,
    /// number of attention blocks
    pub layers: usize,
    /// attention heads; must divide d
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            layers: 2,
            heads: 2,
            max_len: 50,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            )));
        }
        if self.max_len < 1 {
            return Err(ModelError::BadConfig("max_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.layers == 0 {
            return Err(ModelError::BadConfig("layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable arrays. Embedding row 0 is the padding row and stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub item_emb: Tensor,
    pub pos_emb: Tensor,
    pub attr_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

fn trunc_normal(shape: &[usize], std: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("std > 0");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data consistent")
}

impl Parameters {
    /// Truncated-normal init (std 0.02) for embeddings and projections,
    /// ones/zeros for layer norms; padding rows zeroed.
    pub fn init(cfg: &ModelConfig, n_items: u32, n_attrs: u32, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d;
        let std = 0.02;
        let mut item_emb = trunc_normal(&[n_items as usize + 1, d], std, rng);
        item_emb.data_mut()[..d].fill(0.0);
        let pos_emb = trunc_normal(&[cfg.max_len, d], std, rng);
        let mut attr_emb = trunc_normal(&[n_attrs as usize + 1, d], std, rng);
        attr_emb.data_mut()[..d].fill(0.0);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: trunc_normal(&[d, d], std, rng),
                wk: trunc_normal(&[d, d], std, rng),
                wv: trunc_normal(&[d, d], std, rng),
                wo: trunc_normal(&[d, d], std, rng),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: trunc_normal(&[d, d], std, rng),
                b1: Tensor::zeros(&[d]),
                w2: trunc_normal(&[d, d], std, rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            item_emb,
            pos_emb,
            attr_emb,
            blocks,
            final_gain: Tensor::full(&[d], 1.0),
            final_bias: Tensor::zeros(&[d]),
        }
    }

    pub fn n_items(&self) -> u32 {
        self.item_emb.shape()[0] as u32 - 1
    }

    pub fn n_attrs(&self) -> u32 {
        self.attr_emb.shape()[0] as u32 - 1
    }

    pub fn d(&self) -> usize {
        self.item_emb.shape()[1]
    }

    /// Canonical (name, tensor) order; checkpoints and the optimizer rely
    /// on this order being stable.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("item_emb".to_string(), &self.item_emb),
            ("pos_emb".to_string(), &self.pos_emb),
            ("attr_emb".to_string(), &self.attr_emb),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.ln1.gain"), &b.ln1_gain));
            out.push((format!("block{l}.ln1.bias"), &b.ln1_bias));
            out.push((format!("block{l}.attn.wq"), &b.wq));
            out.push((format!("block{l}.attn.wk"), &b.wk));
            out.push((format!("block{l}.attn.wv"), &b.wv));
            out.push((format!("block{l}.attn.wo"), &b.wo));
            out.push((format!("block{l}.ln2.gain"), &b.ln2_gain));
            out.push((format!("block{l}.ln2.bias"), &b.ln2_bias));
            out.push((format!("block{l}.ffn.w1"), &b.w1));
            out.push((format!("block{l}.ffn.b1"), &b.b1));
            out.push((format!("block{l}.ffn.w2"), &b.w2));
            out.push((format!("block{l}.ffn.b2"), &b.b2));
        }
        out.push(("final_ln.gain".to_string(), &self.final_gain));
        out.push(("final_ln.bias".to_string(), &self.final_bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![
            ("item_emb".to_string(), &mut self.item_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
            ("attr_emb".to_string(), &mut self.attr_emb),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{l}.ln1.gain"), &mut b.ln1_gain));
            out.push((format!("block{l}.ln1.bias"), &mut b.ln1_bias));
            out.push((format!("block{l}.attn.wq"), &mut b.wq));
            out.push((format!("block{l}.attn.wk"), &mut b.wk));
            out.push((format!("block{l}.attn.wv"), &mut b.wv));
            out.push((format!("block{l}.attn.wo"), &mut b.wo));
            out.push((format!("block{l}.ln2.gain"), &mut b.ln2_gain));
            out.push((format!("block{l}.ln2.bias"), &mut b.ln2_bias));
            out.push((format!("block{l}.ffn.w1"), &mut b.w1));
            out.push((format!("block{l}.ffn.b1"), &mut b.b1));
            out.push((format!("block{l}.ffn.w2"), &mut b.w2));
            out.push((format!("block{l}.ffn.b2"), &mut b.b2));
        }
        out.push(("final_ln.gain".to_string(), &mut self.final_gain));
        out.push(("final_ln.bias".to_string(), &mut self.final_bias));
        out
    }

    /// Leafs every parameter onto the tape, in canonical order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let item_emb = tape.leaf(self.item_emb.clone());
        let pos_emb = tape.leaf(self.pos_emb.clone());
        let attr_emb = tape.leaf(self.attr_emb.clone());
        let blocks = self
            .blocks
            .iter()
            .map(|b| BoundBlock {
                ln1_gain: tape.leaf(b.ln1_gain.clone()),
                ln1_bias: tape.leaf(b.ln1_bias.clone()),
                wq: tape.leaf(b.wq.clone()),
                wk: tape.leaf(b.wk.clone()),
                wv: tape.leaf(b.wv.clone()),
                wo: tape.leaf(b.wo.clone()),
                ln2_gain: tape.leaf(b.ln2_gain.clone()),
                ln2_bias: tape.leaf(b.ln2_bias.clone()),
                w1: tape.leaf(b.w1.clone()),
                b1: tape.leaf(b.b1.clone()),
                w2: tape.leaf(b.w2.clone()),
                b2: tape.leaf(b.b2.clone()),
            })
            .collect();
        let final_gain = tape.leaf(self.final_gain.clone());
        let final_bias = tape.leaf(self.final_bias.clone());
        BoundParams {
            item_emb,
            pos_emb,
            attr_emb,
            blocks,
            final_gain,
            final_bias,
        }
    }
}

pub struct BoundBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub struct BoundParams {
    pub item_emb: Var,
    pub pos_emb: Var,
    pub attr_emb: Var,
    pub blocks: Vec<BoundBlock>,
    pub final_gain: Var,
    pub final_bias: Var,
}

impl BoundParams {
    /// Vars in the same canonical order as [`Parameters::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.item_emb, self.pos_emb, self.attr_emb];
        for b in &self.blocks {
            out.extend([
                b.ln1_gain, b.ln1_bias, b.wq, b.wk, b.wv, b.wo, b.ln2_gain, b.ln2_bias, b.w1,
                b.b1, b.w2, b.b2,
            ]);
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out
    }

    /// Inverse of [`Parameters::bind`] over externally created leaves in
    /// canonical order (gradient checks own leaf creation).
    pub fn from_vars(vars: &[Var], layers: usize) -> Self {
        let mut it = vars.iter().copied();
        let item_emb = it.next().unwrap();
        let pos_emb = it.next().unwrap();
        let attr_emb = it.next().unwrap();
        let blocks = (0..layers)
            .map(|_| BoundBlock {
                ln1_gain: it.next().unwrap(),
                ln1_bias: it.next().unwrap(),
                wq: it.next().unwrap(),
                wk: it.next().unwrap(),
                wv: it.next().unwrap(),
                wo: it.next().unwrap(),
                ln2_gain: it.next().unwrap(),
                ln2_bias: it.next().unwrap(),
                w1: it.next().unwrap(),
                b1: it.next().unwrap(),
                w2: it.next().unwrap(),
                b2: it.next().unwrap(),
            })
            .collect();
        let final_gain = it.next().unwrap();
        let final_bias = it.next().unwrap();
        Self {
            item_emb,
            pos_emb,
            attr_emb,
            blocks,
            final_gain,
            final_bias,
        }
    }
}

/// Causal + key-padding attention mask for a batch: true marks entries to
/// be filled with -1e9 before softmax. A padded query keeps its own key so
/// its softmax row is never fully masked and its state depends only on its
/// own position.
fn attention_mask(windows: &[PaddedWindow], heads: usize, max_len: usize) -> Arc<Vec<bool>> {
    let b = windows.len();
    let t = max_len;
    let mut mask = vec![false; b * heads * t * t];
    for (bi, w) in windows.iter().enumerate() {
        for h in 0..heads {
            for q in 0..t {
                let row = ((bi * heads + h) * t + q) * t;
                for k in 0..t {
                    mask[row + k] = k > q || (!w.mask[k] && k != q);
                }
            }
        }
    }
    Arc::new(mask)
}

/// Encodes a batch of padded windows into per-position hidden states of
/// shape [batch, max_len, d]. Position t depends only on positions <= t;
/// padded keys are masked out of attention entirely.
pub fn encode(
    tape: &mut Tape,
    bp: &BoundParams,
    windows: &[PaddedWindow],
    cfg: &ModelConfig,
    mode: Mode,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Var, ModelError> {
    cfg.validate()?;
    for w in windows {
        if w.items.len() != cfg.max_len {
            return Err(ModelError::WindowLength {
                got: w.items.len(),
                expected: cfg.max_len,
            });
        }
    }
    let b = windows.len();
    let t = cfg.max_len;
    let d = cfg.d;
    let h = cfg.heads;
    let hd = cfg.head_dim();

    let apply_dropout = mode == Mode::Train && cfg.dropout > 0.0;
    if apply_dropout && dropout_rng.is_none() {
        return Err(ModelError::MissingRng);
    }
    macro_rules! drop {
        ($tape:expr, $x:expr) => {
            if apply_dropout {
                $tape.dropout($x, cfg.dropout, dropout_rng.as_deref_mut().unwrap())?
            } else {
                $x
            }
        };
    }

    let ids: Vec<u32> = windows.iter().flat_map(|w| w.items.iter().copied()).collect();
    let mut x = tape.gather(bp.item_emb, &ids, &[b, t])?;
    x = tape.add(x, bp.pos_emb)?;
    x = drop!(tape, x);

    let mask = attention_mask(windows, h, t);
    let scale = 1.0 / (hd as f32).sqrt();

    for block in &bp.blocks {
        // attention sub-module, pre-norm with residual
        let normed = tape.layer_norm(x, block.ln1_gain, block.ln1_bias)?;
        let q = tape.matmul(normed, block.wq)?;
        let k = tape.matmul(normed, block.wk)?;
        let v = tape.matmul(normed, block.wv)?;
        let split = |tape: &mut Tape, m: Var| -> Result<Var, TensorError> {
            let m = tape.reshape(m, &[b, t, h, hd])?;
            tape.transpose(m, 1, 2) // [b, h, t, hd]
        };
        let q = split(tape, q)?;
        let k = split(tape, k)?;
        let v = split(tape, v)?;
        let kt = tape.transpose(k, 2, 3)?; // [b, h, hd, t]
        let mut scores = tape.matmul(q, kt)?; // [b, h, t, t]
        scores = tape.scale(scores, scale)?;
        scores = tape.masked_fill(scores, mask.clone(), -1e9)?;
        let mut attn = tape.softmax(scores, 3)?;
        attn = drop!(tape, attn);
        let ctx = tape.matmul(attn, v)?; // [b, h, t, hd]
        let ctx = tape.transpose(ctx, 1, 2)?; // [b, t, h, hd]
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let mut proj = tape.matmul(ctx, block.wo)?;
        proj = drop!(tape, proj);
        x = tape.add(x, proj)?;

        // feed-forward sub-module, pre-norm with residual
        let normed = tape.layer_norm(x, block.ln2_gain, block.ln2_bias)?;
        let mut f = tape.matmul(normed, block.w1)?;
        f = tape.add(f, block.b1)?;
        f = tape.relu(f)?;
        f = drop!(tape, f);
        f = tape.matmul(f, block.w2)?;
        f = tape.add(f, block.b2)?;
        f = drop!(tape, f);
        x = tape.add(x, f)?;
    }

    Ok(tape.layer_norm(x, bp.final_gain, bp.final_bias)?)
}

/// Dot product of the item's embedding row with a hidden state.
pub fn score_item(state: &[f32], item: ItemId, params: &Parameters) -> f32 {
    let d = params.d();
    let row = &params.item_emb.data()[item as usize * d..(item as usize + 1) * d];
    row.iter().zip(state).map(|(&e, &s)| e * s).sum()
}

/// Dot product of the attribute's embedding row with a hidden state.
pub fn score_attribute(state: &[f32], attr: AttrId, params: &Parameters) -> f32 {
    let d = params.d();
    let row = &params.attr_emb.data()[attr as usize * d..(attr as usize + 1) * d];
    row.iter().zip(state).map(|(&e, &s)| e * s).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::pad_window;
    use rand::{Rng, SeedableRng};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            layers: 2,
            heads: 2,
            max_len: 6,
            dropout: 0.0,
        }
    }

    fn eval_states(
        params: &Parameters,
        cfg: &ModelConfig,
        windows: &[PaddedWindow],
    ) -> Vec<f32> {
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        let states = encode(&mut tape, &bp, windows, cfg, Mode::Eval, None).unwrap();
        tape.value(states).data().to_vec()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            d: 10,
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn causality_perturbation_leaves_earlier_states_bit_identical() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = Parameters::init(&cfg, 10, 4, &mut rng);
        let w1 = pad_window(&[1, 2, 3, 4], cfg.max_len);
        let mut w2 = w1.clone();
        // change the item at the last real position (t = 5)
        let last = cfg.max_len - 1;
        w2.items[last] = 9;
        let a = eval_states(&params, &cfg, &[w1]);
        let b = eval_states(&params, &cfg, &[w2]);
        let d = cfg.d;
        assert_eq!(a[..last * d], b[..last * d]);
        assert_ne!(a[last * d..], b[last * d..]);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = Parameters::init(&cfg, 10, 4, &mut rng);
        let w = pad_window(&[3, 1, 4], cfg.max_len);
        assert_eq!(
            eval_states(&params, &cfg, &[w.clone()]),
            eval_states(&params, &cfg, &[w])
        );
    }

    #[test]
    fn window_length_mismatch_is_an_error() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = Parameters::init(&cfg, 10, 4, &mut rng);
        let w = pad_window(&[1], 4); // shorter than cfg.max_len = 6
        let mut tape = Tape::new();
        let bp = params.bind(&mut tape);
        assert!(matches!(
            encode(&mut tape, &bp, &[w], &cfg, Mode::Eval, None),
            Err(ModelError::WindowLength { .. })
        ));
    }

    #[test]
    fn score_item_matches_oracle_loop() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = Parameters::init(&cfg, 10, 4, &mut rng);
        let d = cfg.d;
        let state: Vec<f32> = (0..d).map(|i| (i as f32 - 3.0) * 0.25).collect();
        for item in 1..=10u32 {
            let mut expect = 0.0f32;
            for j in 0..d {
                expect += params.item_emb.data()[item as usize * d + j] * state[j];
            }
            assert_eq!(score_item(&state, item, &params), expect);
        }
        // zero state scores zero everywhere
        let zero = vec![0.0f32; d];
        assert_eq!(score_item(&zero, 3, &params), 0.0);
        assert_eq!(score_attribute(&zero, 2, &params), 0.0);
        // state equal to an embedding row gives the squared norm
        let row = params.item_emb.data()[5 * d..6 * d].to_vec();
        let norm2: f32 = row.iter().map(|v| v * v).sum();
        assert!((score_item(&row, 5, &params) - norm2).abs() < 1e-6);
        let arow = params.attr_emb.data()[2 * d..3 * d].to_vec();
        let anorm2: f32 = arow.iter().map(|v| v * v).sum();
        assert!((score_attribute(&arow, 2, &params) - anorm2).abs() < 1e-6);
    }

    #[test]
    fn init_zeroes_padding_rows() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = Parameters::init(&cfg, 10, 4, &mut rng);
        assert!(params.item_emb.data()[..cfg.d].iter().all(|&v| v == 0.0));
        assert!(params.attr_emb.data()[..cfg.d].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tiny_encoder_passes_gradient_check() {
        // L=1, H=1, d=4 full-encoder check against finite differences of
        // the tape's own forward pass
        let cfg = ModelConfig {
            d: 4,
            layers: 1,
            heads: 1,
            max_len: 4,
            dropout: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = Parameters::init(&cfg, 6, 3, &mut rng);
        // widen the init so hidden rows have O(1) spread; finite differences
        // through layer norm need the step to be small relative to row std
        for (name, t) in params.named_mut() {
            if !name.contains("ln") {
                for v in t.data_mut() {
                    *v *= 25.0;
                }
            }
        }
        let named: Vec<(String, Tensor)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let windows = vec![pad_window(&[1, 2, 3], cfg.max_len)];
        let report = crate::autodiff::grad_check(
            &|tape, vars| {
                let bp = BoundParams::from_vars(vars, cfg.layers);
                let states = encode(tape, &bp, &windows, &cfg, Mode::Eval, None)
                    .map_err(|e| match e {
                        ModelError::Tensor(t) => t,
                        other => TensorError::Invalid {
                            op: "encode",
                            msg: other.to_string(),
                        },
                    })?;
                // weighted sum over real positions only; padded states are
                // never read by any loss
                let mut wr = ChaCha8Rng::seed_from_u64(99);
                let shape = tape.value(states).shape().to_vec();
                let weights: Vec<f32> = windows
                    .iter()
                    .flat_map(|w| w.mask.iter().copied())
                    .flat_map(|m| {
                        (0..cfg.d).map(move |_| if m { 1.0 } else { 0.0 })
                    })
                    .map(|m| m * wr.random_range(-0.5..0.5f32))
                    .collect();
                let w = tape.constant(Tensor::new(shape, weights)?);
                let z = tape.mul(states, w)?;
                tape.sum_all(z)
            },
            &named,
            1e-3,
            1e-2,
        )
        .unwrap();
        let worst = report
            .per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .unwrap();
        assert!(
            report.pass,
            "max rel err {} at {}",
            report.max_rel_err, worst.name
        );
    }
}
