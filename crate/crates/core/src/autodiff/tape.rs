//! Eager reverse-mode tape over dense f32 tensors.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape; `backward` walks the recorded nodes in reverse and accumulates exact
//! analytic gradients into each node's gradient slot. Storage is f32;
//! reductions and layer-norm statistics accumulate in f64. The tape is
//! rebuilt per training step and never shared across threads mid-construction.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{strides, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Matmul(Var, Var),
    Gather {
        table: Var,
        indices: Arc<Vec<u32>>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    MaskedFill {
        x: Var,
        mask: Arc<Vec<bool>>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Transpose {
        x: Var,
        a: usize,
        b: usize,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// How the smaller operand of a binary op lines up with the larger one.
enum Broadcast {
    None,
    /// rhs is tiled across lhs's leading axes
    Rhs { outer: usize, inner: usize },
    /// lhs is tiled across rhs's leading axes
    Lhs { outer: usize, inner: usize },
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn classify_broadcast(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, Broadcast), TensorError> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::None));
    }
    if is_suffix(b, a) {
        let inner: usize = b.iter().product();
        let outer: usize = a.iter().product::<usize>() / inner.max(1);
        return Ok((a.to_vec(), Broadcast::Rhs { outer, inner }));
    }
    if is_suffix(a, b) {
        let inner: usize = a.iter().product();
        let outer: usize = b.iter().product::<usize>() / inner.max(1);
        return Ok((b.to_vec(), Broadcast::Lhs { outer, inner }));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// (outer, len, inner) decomposition around one axis.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

// out[m,n] += a[m,k] @ b[k,n]
fn mm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m,k] += c[m,n] @ b[k,n]^T
fn mm_bt_acc(c: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let crow = &c[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut s = 0.0f32;
            for j in 0..n {
                s += crow[j] * brow[j];
            }
            orow[kk] += s;
        }
    }
}

// out[k,n] += a[m,k]^T @ c[m,n]
fn mm_at_acc(a: &[f32], c: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * crow[j];
            }
        }
    }
}

/// Splits matmul operand shapes into (batch, m, k) / (batch, k, n).
struct MatmulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn plan_matmul(a: &[usize], b: &[usize]) -> Result<MatmulPlan, TensorError> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_batched = !b_batch.is_empty();
    if b_batched && a_batch != b_batch {
        return Err(err());
    }
    let batch: usize = a_batch.iter().product();
    let mut out_shape = a_batch.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    if out_shape.len() > 4 {
        return Err(TensorError::TooManyAxes(out_shape));
    }
    Ok(MatmulPlan {
        batch,
        m,
        k,
        n,
        b_batched,
        out_shape,
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (a parameter or anything whose gradient matters).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable input (masks, loss weights, frozen targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Constant)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        make: impl Fn(Var, Var) -> Op,
    ) -> Result<Var, TensorError> {
        let (out_shape, bc) = classify_broadcast(op_name, self.shape_of(a), self.shape_of(b))?;
        let av = self.val(a);
        let bv = self.val(b);
        let data = match bc {
            Broadcast::None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Rhs { outer, inner } => {
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    let ao = &av[o * inner..(o + 1) * inner];
                    for i in 0..inner {
                        out.push(f(ao[i], bv[i]));
                    }
                }
                out
            }
            Broadcast::Lhs { outer, inner } => {
                let mut out = Vec::with_capacity(outer * inner);
                for o in 0..outer {
                    let bo = &bv[o * inner..(o + 1) * inner];
                    for i in 0..inner {
                        out.push(f(av[i], bo[i]));
                    }
                }
                out
            }
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, make(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, TensorError> {
        let data = self.val(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape_of(a).to_vec(), data)?;
        let rg = self.requires(a);
        Ok(self.push(t, rg, Op::Scale(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let plan = plan_matmul(self.shape_of(a), self.shape_of(b))?;
        let MatmulPlan {
            batch,
            m,
            k,
            n,
            b_batched,
            out_shape,
        } = plan;
        let av = self.val(a);
        let bv = self.val(b);
        let mut out = vec![0.0f32; batch * m * n];
        for bi in 0..batch {
            let ab = &av[bi * m * k..(bi + 1) * m * k];
            let bb = if b_batched {
                &bv[bi * k * n..(bi + 1) * k * n]
            } else {
                bv
            };
            mm_acc(ab, bb, m, k, n, &mut out[bi * m * n..(bi + 1) * m * n]);
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(out_shape, out)?, rg, Op::Matmul(a, b)))
    }

    /// Rows of `table` selected by `indices`; output shape is
    /// `idx_shape ++ [row_width]`. Index 0 is the padding row.
    pub fn gather(
        &mut self,
        table: Var,
        indices: &[u32],
        idx_shape: &[usize],
    ) -> Result<Var, TensorError> {
        let tshape = self.shape_of(table);
        if tshape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("table must be 2-d, got {tshape:?}"),
            });
        }
        let (rows, width) = (tshape[0], tshape[1]);
        if idx_shape.iter().product::<usize>() != indices.len() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!(
                    "index shape {idx_shape:?} does not cover {} indices",
                    indices.len()
                ),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= rows) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let tv = self.val(table);
        let mut data = Vec::with_capacity(indices.len() * width);
        for &idx in indices {
            let r = idx as usize;
            data.extend_from_slice(&tv[r * width..(r + 1) * width]);
        }
        let mut out_shape = idx_shape.to_vec();
        out_shape.push(width);
        let rg = self.requires(table);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Gather {
                table,
                indices: Arc::new(indices.to_vec()),
            },
        ))
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Vec<f32> {
        let (outer, len, inner) = around_axis(self.shape_of(x), axis);
        let xv = self.val(x);
        let mut out = vec![0.0f32; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f32::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(xv[base + j * inner]);
                }
                let mut denom = 0.0f64;
                for j in 0..len {
                    denom += ((xv[base + j * inner] - max) as f64).exp();
                }
                if log {
                    let lse = denom.ln();
                    for j in 0..len {
                        let p = base + j * inner;
                        out[p] = ((xv[p] - max) as f64 - lse) as f32;
                    }
                } else {
                    for j in 0..len {
                        let p = base + j * inner;
                        out[p] = (((xv[p] - max) as f64).exp() / denom) as f32;
                    }
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        check_axis("softmax", self.shape_of(x), axis)?;
        let data = self.softmax_values(x, axis, false);
        let t = Tensor::new(self.shape_of(x).to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.push(t, rg, Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        check_axis("log_softmax", self.shape_of(x), axis)?;
        let data = self.softmax_values(x, axis, true);
        let t = Tensor::new(self.shape_of(x).to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.push(t, rg, Op::LogSoftmax { x, axis }))
    }

    /// Normalizes over the last axis; `gain` and `bias` have that axis's length.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape_of(x).to_vec();
        let n = *shape.last().ok_or(TensorError::Invalid {
            op: "layer_norm",
            msg: "input must have at least one axis".into(),
        })?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.shape_of(v) != [n] {
                return Err(TensorError::Invalid {
                    op: "layer_norm",
                    msg: format!("{name} shape {:?} != [{n}]", self.shape_of(v)),
                });
            }
        }
        let rows = shape.iter().product::<usize>() / n;
        let xv = self.val(x);
        let gv = self.val(gain);
        let bv = self.val(bias);
        let mut mean = vec![0.0f64; rows];
        let mut inv_std = vec![0.0f64; rows];
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let m = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[r] = m;
            inv_std[r] = is;
            for j in 0..n {
                let xhat = (row[j] as f64 - m) * is;
                out[r * n + j] = (xhat as f32) * gv[j] + bv[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            },
        ))
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f32) -> f32,
        make: impl Fn(Var) -> Op,
    ) -> Result<Var, TensorError> {
        let data = self.val(x).iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape_of(x).to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.push(t, rg, make(x)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, sigmoid_scalar, Op::Sigmoid)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, log_sigmoid_scalar, Op::LogSigmoid)
    }

    /// Inverted-scaling dropout: kept positions are multiplied by
    /// 1/(1-rate), so evaluation needs no rescale. Rate 0 is the identity.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        let keep = 1.0 - rate;
        let inv = 1.0 / keep;
        let mask: Vec<f32> = (0..self.val(x).len())
            .map(|_| {
                if rng.random::<f32>() < rate {
                    0.0
                } else {
                    inv
                }
            })
            .collect();
        let data = self.val(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.shape_of(x).to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    /// Replaces positions where `mask` is true by `value`; those positions
    /// receive zero gradient.
    pub fn masked_fill(
        &mut self,
        x: Var,
        mask: Arc<Vec<bool>>,
        value: f32,
    ) -> Result<Var, TensorError> {
        if mask.len() != self.val(x).len() {
            return Err(TensorError::Invalid {
                op: "masked_fill",
                msg: format!(
                    "mask has {} entries, input has {}",
                    mask.len(),
                    self.val(x).len()
                ),
            });
        }
        let data = self
            .val(x)
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let t = Tensor::new(self.shape_of(x).to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.push(t, rg, Op::MaskedFill { x, mask }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.shape_of(inputs[0]).to_vec();
        check_axis("concat", &first, axis)?;
        let mut axis_total = 0;
        for &v in inputs {
            let s = self.shape_of(v);
            let mut expect = first.clone();
            if s.len() != first.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            expect[axis] = s[axis];
            if s != expect {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = around_axis(&out_shape, axis);
        let mut data = vec![0.0f32; out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for &v in inputs {
            let len_v = self.shape_of(v)[axis];
            let chunk = len_v * inner;
            let vv = self.val(v);
            for o in 0..outer {
                data[o * row_out + offset..o * row_out + offset + chunk]
                    .copy_from_slice(&vv[o * chunk..(o + 1) * chunk]);
            }
            offset += chunk;
        }
        let rg = inputs.iter().any(|&v| self.requires(v));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var, TensorError> {
        let shape = self.shape_of(x).to_vec();
        check_axis("transpose", &shape, a)?;
        check_axis("transpose", &shape, b)?;
        let mut out_shape = shape.clone();
        out_shape.swap(a, b);
        let data = permute_two(self.val(x), &shape, a, b);
        let rg = self.requires(x);
        Ok(self.push(Tensor::new(out_shape, data)?, rg, Op::Transpose { x, a, b }))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var, TensorError> {
        let t = Tensor::new(new_shape.to_vec(), self.val(x).to_vec())?;
        if t.numel() != self.val(x).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape_of(x).to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        let rg = self.requires(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    fn reduce_axis(
        &mut self,
        op_name: &'static str,
        x: Var,
        axis: usize,
        mean: bool,
    ) -> Result<Var, TensorError> {
        let shape = self.shape_of(x).to_vec();
        check_axis(op_name, &shape, axis)?;
        let (outer, len, inner) = around_axis(&shape, axis);
        let xv = self.val(x);
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0f64;
                for j in 0..len {
                    acc += xv[o * len * inner + j * inner + i] as f64;
                }
                if mean {
                    acc /= len as f64;
                }
                out[o * inner + i] = acc as f32;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.requires(x);
        let op = if mean {
            Op::Mean { x, axis }
        } else {
            Op::Sum { x, axis }
        };
        Ok(self.push(Tensor::new(out_shape, out)?, rg, op))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("sum", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce_axis("mean", x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let acc: f64 = self.val(x).iter().map(|&v| v as f64).sum();
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(acc as f32), rg, Op::SumAll(x)))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.val(x).len().max(1);
        let acc: f64 = self.val(x).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let rg = self.requires(x);
        Ok(self.push(Tensor::scalar(acc as f32), rg, Op::MeanAll(x)))
    }

    /// Accumulates d(loss)/d(node) into every reachable node's gradient slot.
    /// Repeated calls without `zero_grads` keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        let mut local: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let g = match local[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut local);
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => self.nodes[i].grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn accum(&self, local: &mut [Option<Vec<f32>>], v: Var, contrib: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut local[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0f32; self.nodes[v.0].value.numel()]);
        }
        contrib(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &[f32], local: &mut [Option<Vec<f32>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.binary_backward(local, *a, *b, g, |_, _| (1.0, 1.0));
            }
            Op::Sub(a, b) => {
                self.binary_backward(local, *a, *b, g, |_, _| (1.0, -1.0));
            }
            Op::Mul(a, b) => {
                self.binary_backward(local, *a, *b, g, |x, y| (y, x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(local, *a, |da| {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::Matmul(a, b) => self.matmul_backward(local, *a, *b, g),
            Op::Gather { table, indices } => {
                let width = self.shape_of(*table)[1];
                self.accum(local, *table, |dt| {
                    for (slot, &idx) in indices.iter().enumerate() {
                        let r = idx as usize;
                        for j in 0..width {
                            dt[r * width + j] += g[slot * width + j];
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = around_axis(self.nodes[i].value.shape(), *axis);
                self.accum(local, *x, |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = 0.0f64;
                            for j in 0..len {
                                let p = base + j * inner;
                                dot += (g[p] * y[p]) as f64;
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] += y[p] * (g[p] - dot as f32);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = around_axis(self.nodes[i].value.shape(), *axis);
                self.accum(local, *x, |dx| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut gsum = 0.0f64;
                            for j in 0..len {
                                gsum += g[base + j * inner] as f64;
                            }
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] += g[p] - ((y[p] as f64).exp() * gsum) as f32;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let n = *self.shape_of(*x).last().unwrap();
                let rows = mean.len();
                let xv = self.val(*x);
                let gv = self.val(*gain);
                self.accum(local, *x, |dx| {
                    for r in 0..rows {
                        let (m, is) = (mean[r], inv_std[r]);
                        let row = &xv[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..n {
                            let xhat = (row[j] as f64 - m) * is;
                            let dy = (grow[j] * gv[j]) as f64;
                            s1 += dy;
                            s2 += dy * xhat;
                        }
                        s1 /= n as f64;
                        s2 /= n as f64;
                        for j in 0..n {
                            let xhat = (row[j] as f64 - m) * is;
                            let dy = (grow[j] * gv[j]) as f64;
                            dx[r * n + j] += ((dy - s1 - xhat * s2) * is) as f32;
                        }
                    }
                });
                self.accum(local, *gain, |dg| {
                    for r in 0..rows {
                        let (m, is) = (mean[r], inv_std[r]);
                        for j in 0..n {
                            let xhat = (xv[r * n + j] as f64 - m) * is;
                            dg[j] += g[r * n + j] * xhat as f32;
                        }
                    }
                });
                self.accum(local, *bias, |db| {
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                self.accum(local, *x, |dx| {
                    for j in 0..xv.len() {
                        if xv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                self.accum(local, *x, |dx| {
                    for j in 0..y.len() {
                        dx[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let xv = self.val(*x);
                self.accum(local, *x, |dx| {
                    for j in 0..xv.len() {
                        dx[j] += g[j] * sigmoid_scalar(-xv[j]);
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accum(local, *x, |dx| {
                    for j in 0..mask.len() {
                        dx[j] += g[j] * mask[j];
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                self.accum(local, *x, |dx| {
                    for j in 0..mask.len() {
                        if !mask[j] {
                            dx[j] += g[j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, _, inner) = around_axis(out_shape, *axis);
                let row_out = out_shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape_of(v)[*axis] * inner;
                    self.accum(local, v, |dv| {
                        for o in 0..outer {
                            let src = &g[o * row_out + offset..o * row_out + offset + chunk];
                            for (d, &s) in dv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Transpose { x, a, b } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let back = permute_two(g, &out_shape, *a, *b);
                self.accum(local, *x, |dx| {
                    for (d, s) in dx.iter_mut().zip(&back) {
                        *d += s;
                    }
                });
            }
            Op::Reshape(x) => {
                self.accum(local, *x, |dx| {
                    for (d, &s) in dx.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let shape = self.shape_of(*x);
                let (outer, len, inner) = around_axis(shape, *axis);
                let scale = match &self.nodes[i].op {
                    Op::Mean { .. } => 1.0 / len as f32,
                    _ => 1.0,
                };
                self.accum(local, *x, |dx| {
                    for o in 0..outer {
                        for j in 0..len {
                            for ii in 0..inner {
                                dx[o * len * inner + j * inner + ii] +=
                                    g[o * inner + ii] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                self.accum(local, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::MeanAll(x) => {
                let n = self.val(*x).len().max(1) as f32;
                self.accum(local, *x, |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
        }
    }

    fn binary_backward(
        &self,
        local: &mut [Option<Vec<f32>>],
        a: Var,
        b: Var,
        g: &[f32],
        partials: impl Fn(f32, f32) -> (f32, f32) + Copy,
    ) {
        let (_, bc) = classify_broadcast("", self.shape_of(a), self.shape_of(b))
            .expect("shapes validated at forward time");
        let av = self.val(a);
        let bv = self.val(b);
        match bc {
            Broadcast::None => {
                self.accum(local, a, |da| {
                    for j in 0..g.len() {
                        da[j] += g[j] * partials(av[j], bv[j]).0;
                    }
                });
                self.accum(local, b, |db| {
                    for j in 0..g.len() {
                        db[j] += g[j] * partials(av[j], bv[j]).1;
                    }
                });
            }
            Broadcast::Rhs { outer, inner } => {
                self.accum(local, a, |da| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let p = o * inner + j;
                            da[p] += g[p] * partials(av[p], bv[j]).0;
                        }
                    }
                });
                self.accum(local, b, |db| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let p = o * inner + j;
                            db[j] += g[p] * partials(av[p], bv[j]).1;
                        }
                    }
                });
            }
            Broadcast::Lhs { outer, inner } => {
                self.accum(local, a, |da| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let p = o * inner + j;
                            da[j] += g[p] * partials(av[j], bv[p]).0;
                        }
                    }
                });
                self.accum(local, b, |db| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let p = o * inner + j;
                            db[p] += g[p] * partials(av[j], bv[p]).1;
                        }
                    }
                });
            }
        }
    }

    fn matmul_backward(&self, local: &mut [Option<Vec<f32>>], a: Var, b: Var, g: &[f32]) {
        let plan = plan_matmul(self.shape_of(a), self.shape_of(b))
            .expect("shapes validated at forward time");
        let MatmulPlan {
            batch,
            m,
            k,
            n,
            b_batched,
            ..
        } = plan;
        let av = self.val(a);
        let bv = self.val(b);
        self.accum(local, a, |da| {
            for bi in 0..batch {
                let gb = &g[bi * m * n..(bi + 1) * m * n];
                let bb = if b_batched {
                    &bv[bi * k * n..(bi + 1) * k * n]
                } else {
                    bv
                };
                mm_bt_acc(gb, bb, m, k, n, &mut da[bi * m * k..(bi + 1) * m * k]);
            }
        });
        self.accum(local, b, |db| {
            for bi in 0..batch {
                let gb = &g[bi * m * n..(bi + 1) * m * n];
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let dst = if b_batched {
                    &mut db[bi * k * n..(bi + 1) * k * n]
                } else {
                    &mut db[..]
                };
                mm_at_acc(ab, gb, m, k, n, dst);
            }
        });
    }
}

fn permute_two(data: &[f32], shape: &[usize], a: usize, b: usize) -> Vec<f32> {
    if a == b {
        return data.to_vec();
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0f32; data.len()];
    let ndim = shape.len();
    let mut idx = vec![0usize; ndim];
    for (pos, &v) in data.iter().enumerate() {
        let mut rem = pos;
        for d in 0..ndim {
            idx[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        idx.swap(a, b);
        let mut opos = 0;
        for d in 0..ndim {
            opos += idx[d] * out_strides[d];
        }
        out[opos] = v;
    }
    out
}

pub fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid_scalar(x: f32) -> f32 {
    // -softplus(-x), stable in both tails
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}
