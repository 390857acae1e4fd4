//! Dense f32 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! The tape is rebuilt for every optimizer step: the unlearning objectives
//! combine several forward passes (forget / retain / reference) in one loss,
//! which is easiest to express dynamically. Kernels may parallelize over
//! output rows; every inner reduction runs in a fixed sequential order, so
//! results are bitwise deterministic regardless of thread count.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("cross entropy mask selects no positions")]
    EmptyMask,
    #[error("target id {id} out of vocabulary {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
}

/// An owned value buffer with a shape. Parameters and checkpoint payloads
/// live here; tape nodes hold their own copies during a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    /// Gaussian init via Box-Muller from the supplied RNG.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos();
            data.push(z * std);
        }
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    AddRow {
        a: TensorId,
        bias: TensorId,
    },
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    SliceCols {
        a: TensorId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<TensorId>),
    Relu(TensorId),
    Tanh(TensorId),
    Gelu(TensorId),
    SumAll(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    },
    EmbedGather {
        table: TensorId,
        ids: Vec<usize>,
    },
    CausalSoftmaxRows(TensorId),
    SoftmaxCrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    KlToReference {
        logits: TensorId,
        ref_logits: Vec<f32>,
        mask: Vec<bool>,
    },
}

struct Node {
    data: Vec<f32>,
    shape: Vec<usize>,
    grad: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Records ops in execution order; `backward` replays them in reverse and
/// visits each node exactly once.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_row(a_row: &[f32], b: &[f32], n: usize, row: &mut [f32]) {
    for (p, &av) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (r, &bv) in row.iter_mut().zip(b_row) {
            *r += av * bv;
        }
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    // Row-parallel for large products; each output row is a fixed-order
    // sequential reduction either way, so results are bitwise identical
    // for any thread count.
    if m * k * n >= 1 << 16 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            matmul_row(&a[i * k..(i + 1) * k], b, n, row);
        });
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            matmul_row(&a[i * k..(i + 1) * k], b, n, row);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: Vec::new(),
            requires_grad: false,
            op,
        });
        id
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        let id = self.push(t.data.clone(), t.shape.clone(), Op::Leaf);
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar(&self, id: TensorId) -> f32 {
        self.nodes[id.0].data[0]
    }

    /// Gradient buffer of a node; zeros until `backward` has run.
    pub fn grad(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].grad
    }

    fn shapes(&self, a: TensorId, b: TensorId) -> (Vec<usize>, Vec<usize>) {
        (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = self.shapes(a, b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(data, sa, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = self.shapes(a, b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(data, sa, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Scale(a, c))
    }

    /// Adds a length-`cols` bias row to every row of a 2-D tensor.
    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = self.shapes(a, bias);
        if sa.len() != 2 || sb != vec![sa[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let cols = sa[1];
        let bias_data = self.nodes[bias.0].data.clone();
        let data: Vec<f32> = self.nodes[a.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias_data[i % cols])
            .collect();
        Ok(self.push(data, sa, Op::AddRow { a, bias }))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = self.shapes(a, b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(out, vec![c, r], Op::Transpose(a))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let (r, c) = (shape[0], shape[1]);
        assert!(start + len <= c, "slice_cols out of range");
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(out, vec![r, len], Op::SliceCols { a, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        let r = self.nodes[parts[0].0].shape[0];
        let total: usize = parts.iter().map(|p| self.nodes[p.0].shape[1]).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = self.nodes[p.0].shape[1];
                out.extend_from_slice(&self.nodes[p.0].data[i * c..(i + 1) * c]);
            }
        }
        self.push(out, vec![r, total], Op::ConcatCols(parts.to_vec()))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.nodes[a.0].data.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Gelu(a))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let mut acc = 0.0f64;
        for &x in &self.nodes[a.0].data {
            acc += x as f64;
        }
        self.push(vec![acc as f32], vec![1], Op::SumAll(a))
    }

    /// Per-row normalization over the last dimension with learned gain/shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let d = *shape.last().unwrap();
        if self.nodes[gamma.0].shape != vec![d] || self.nodes[beta.0].shape != vec![d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let rows = self.nodes[x.0].data.len() / d;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let xs = &self.nodes[x.0].data[r * d..(r + 1) * d];
            let mean = xs.iter().sum::<f32>() / d as f32;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (xs[j] - mean) * inv_std * self.nodes[gamma.0].data[j]
                    + self.nodes[beta.0].data[j];
            }
        }
        Ok(self.push(out, shape, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Gathers table rows by token id: out[i] = table[ids[i]].
    pub fn embed_gather(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let d = self.nodes[table.0].shape[1];
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        self.push(
            out,
            vec![ids.len(), d],
            Op::EmbedGather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Row-wise softmax over a square score matrix with a strict causal
    /// prefix: row i normalizes over columns 0..=i, the rest are zero.
    pub fn causal_softmax_rows(&mut self, a: TensorId) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let n = shape[0];
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let row = &src[i * n..i * n + i + 1];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for &v in row {
                denom += (v - max).exp();
            }
            for (j, &v) in row.iter().enumerate() {
                out[i * n + j] = (v - max).exp() / denom;
            }
        }
        self.push(out, shape, Op::CausalSoftmaxRows(a))
    }

    /// Mean negative log-likelihood over masked positions, stabilized by
    /// max-subtraction. `targets` and `mask` index logit rows.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[logits.0].shape.clone();
        let (rows, vocab) = (shape[0], shape[1]);
        assert_eq!(targets.len(), rows, "one target per logit row");
        assert_eq!(mask.len(), rows, "one mask bit per logit row");
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::EmptyMask);
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= vocab {
                return Err(TensorError::TargetOutOfRange { id: t, vocab });
            }
        }
        let n_masked = mask.iter().filter(|&&m| m).count();
        let mut acc = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let row = &self.nodes[logits.0].data[r * vocab..(r + 1) * vocab];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            let lse = max as f64 + denom.ln();
            acc += lse - row[targets[r]] as f64;
        }
        let loss = (acc / n_masked as f64) as f32;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Forward KL from a frozen reference model's distribution to the
    /// current one, mean over masked rows:
    /// sum_v softmax(ref)_v (log_softmax(ref)_v - log_softmax(cur)_v).
    /// Both log-softmaxes go through identical arithmetic, so equal logits
    /// give exactly zero.
    pub fn kl_to_reference(
        &mut self,
        logits: TensorId,
        ref_logits: &[f32],
        mask: &[bool],
    ) -> Result<TensorId, TensorError> {
        let shape = self.nodes[logits.0].shape.clone();
        let (rows, vocab) = (shape[0], shape[1]);
        assert_eq!(ref_logits.len(), rows * vocab);
        assert_eq!(mask.len(), rows);
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::EmptyMask);
        }
        let row_lse = |row: &[f32]| -> f64 {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            max as f64 + denom.ln()
        };
        let n_masked = mask.iter().filter(|&&m| m).count();
        let mut acc = 0.0f64;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let cur = &self.nodes[logits.0].data[r * vocab..(r + 1) * vocab];
            let rref = &ref_logits[r * vocab..(r + 1) * vocab];
            let cur_lse = row_lse(cur);
            let ref_lse = row_lse(rref);
            for v in 0..vocab {
                let log_p = rref[v] as f64 - ref_lse;
                let log_q = cur[v] as f64 - cur_lse;
                acc += log_p.exp() * (log_p - log_q);
            }
        }
        let loss = (acc / n_masked as f64) as f32;
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::KlToReference {
                logits,
                ref_logits: ref_logits.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node;
    /// nodes not on a path to the loss keep zero gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        for node in &mut self.nodes {
            node.grad = vec![0.0; node.data.len()];
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].grad);
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut self.nodes[a.0].grad, &grad);
                    accumulate(&mut self.nodes[b.0].grad, &grad);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f32> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, x)| g * x)
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    let da: Vec<f32> = grad.iter().map(|g| g * c).collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::AddRow { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let cols = self.nodes[bias.0].data.len();
                    let mut db = vec![0.0; cols];
                    for (i, g) in grad.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    accumulate(&mut self.nodes[a.0].grad, &grad);
                    accumulate(&mut self.nodes[bias.0].grad, &db);
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    // dA = dC @ B^T
                    let b_data = &self.nodes[b.0].data;
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = b_data[p * n + j];
                        }
                    }
                    let mut da = vec![0.0; m * k];
                    matmul_raw(&grad, &bt, m, n, k, &mut da);
                    // dB = A^T @ dC
                    let a_data = &self.nodes[a.0].data;
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = a_data[i * k + p];
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    matmul_raw(&at, &grad, k, m, n, &mut db);
                    accumulate(&mut self.nodes[a.0].grad, &da);
                    accumulate(&mut self.nodes[b.0].grad, &db);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                    let mut da = vec![0.0; r * c];
                    for x in 0..r {
                        for y in 0..c {
                            da[y * r + x] = grad[x * c + y];
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::SliceCols { a, start, len } => {
                    let (a, start, len) = (*a, *start, *len);
                    let c = self.nodes[a.0].shape[1];
                    let rows = self.nodes[a.0].shape[0];
                    let mut da = vec![0.0; rows * c];
                    for r in 0..rows {
                        for j in 0..len {
                            da[r * c + start + j] = grad[r * len + j];
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let rows = self.nodes[i].shape[0];
                    let total = self.nodes[i].shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].shape[1];
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&grad[r * total + offset..r * total + offset + c]);
                        }
                        accumulate(&mut self.nodes[p.0].grad, &dp);
                        offset += c;
                    }
                }
                Op::Relu(a) => {
                    let a = *a;
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::Tanh(a) => {
                    let a = *a;
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(&self.nodes[i].data)
                        .map(|(g, &t)| g * (1.0 - t * t))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * gelu_bwd(x))
                        .collect();
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let g = grad[0];
                    let da = vec![g; self.nodes[a.0].data.len()];
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let d = *self.nodes[x.0].shape.last().unwrap();
                    let rows = self.nodes[x.0].data.len() / d;
                    let mut dx = vec![0.0; rows * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..rows {
                        let xs = &self.nodes[x.0].data[r * d..(r + 1) * d];
                        let gs = &grad[r * d..(r + 1) * d];
                        let mean = xs.iter().sum::<f32>() / d as f32;
                        let var =
                            xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f32> = xs.iter().map(|v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += gs[j] * xhat[j];
                            dbeta[j] += gs[j];
                            dxhat[j] = gs[j] * self.nodes[gamma.0].data[j];
                        }
                        let sum_dxhat: f32 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f32 =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f32;
                        for j in 0..d {
                            dx[r * d + j] = inv_std / df
                                * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut self.nodes[x.0].grad, &dx);
                    accumulate(&mut self.nodes[gamma.0].grad, &dgamma);
                    accumulate(&mut self.nodes[beta.0].grad, &dbeta);
                }
                Op::EmbedGather { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let d = self.nodes[table.0].shape[1];
                    let mut dt = vec![0.0; self.nodes[table.0].data.len()];
                    for (pos, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += grad[pos * d + j];
                        }
                    }
                    accumulate(&mut self.nodes[table.0].grad, &dt);
                }
                Op::CausalSoftmaxRows(a) => {
                    let a = *a;
                    let n = self.nodes[i].shape[0];
                    let probs = &self.nodes[i].data;
                    let mut da = vec![0.0; n * n];
                    for r in 0..n {
                        let mut dot = 0.0f32;
                        for j in 0..=r {
                            dot += grad[r * n + j] * probs[r * n + j];
                        }
                        for j in 0..=r {
                            da[r * n + j] = probs[r * n + j] * (grad[r * n + j] - dot);
                        }
                    }
                    accumulate(&mut self.nodes[a.0].grad, &da);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let mask = mask.clone();
                    let vocab = self.nodes[logits.0].shape[1];
                    let rows = self.nodes[logits.0].shape[0];
                    let n_masked = mask.iter().filter(|&&m| m).count() as f32;
                    let g = grad[0];
                    let mut dl = vec![0.0; rows * vocab];
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = &self.nodes[logits.0].data[r * vocab..(r + 1) * vocab];
                        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let mut denom = 0.0f32;
                        for &v in row {
                            denom += (v - max).exp();
                        }
                        for v in 0..vocab {
                            let p = (row[v] - max).exp() / denom;
                            let t = if v == targets[r] { 1.0 } else { 0.0 };
                            dl[r * vocab + v] = g * (p - t) / n_masked;
                        }
                    }
                    accumulate(&mut self.nodes[logits.0].grad, &dl);
                }
                Op::KlToReference {
                    logits,
                    ref_logits,
                    mask,
                } => {
                    let logits = *logits;
                    let ref_logits = ref_logits.clone();
                    let mask = mask.clone();
                    let vocab = self.nodes[logits.0].shape[1];
                    let rows = self.nodes[logits.0].shape[0];
                    let n_masked = mask.iter().filter(|&&m| m).count() as f32;
                    let g = grad[0];
                    let softmax_row = |row: &[f32], out: &mut [f32]| {
                        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let mut denom = 0.0f32;
                        for &v in row {
                            denom += (v - max).exp();
                        }
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o = (v - max).exp() / denom;
                        }
                    };
                    let mut dl = vec![0.0; rows * vocab];
                    let mut p_cur = vec![0.0f32; vocab];
                    let mut p_ref = vec![0.0f32; vocab];
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let cur = &self.nodes[logits.0].data[r * vocab..(r + 1) * vocab];
                        softmax_row(cur, &mut p_cur);
                        softmax_row(&ref_logits[r * vocab..(r + 1) * vocab], &mut p_ref);
                        for v in 0..vocab {
                            dl[r * vocab + v] = g * (p_cur[v] - p_ref[v]) / n_masked;
                        }
                    }
                    accumulate(&mut self.nodes[logits.0].grad, &dl);
                }
            }
            self.nodes[i].grad = grad;
        }
        Ok(())
    }
}

fn accumulate(target: &mut [f32], src: &[f32]) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tensor(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(&tensor(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![3, 4]), false);
        let b = tape.leaf(&tensor(vec![4, 2], (0..8).map(|i| i as f32).collect()), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        assert!(tape.data(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let b = Tensor::randn(vec![5, 2], 1.0, &mut rng);
        // Independent naive triple loop.
        let mut expect = vec![0.0f32; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f32;
                for p in 0..5 {
                    s += a.data[i * 5 + p] * b.data[p * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let ta = tape.leaf(&a, false);
        let tb = tape.leaf(&b, false);
        let c = tape.matmul(ta, tb).unwrap();
        assert_eq!(tape.data(c), expect.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![4, 2]), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_vocab() {
        let vocab = 11;
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![3, vocab]), false);
        let loss = tape
            .softmax_cross_entropy(logits, &[0, 5, 10], &[true, true, true])
            .unwrap();
        let expect = (vocab as f32).ln();
        assert!((tape.scalar(loss) - expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_one_hot_gap_drives_loss_to_zero() {
        let mut tape = Tape::new();
        let mut data = vec![0.0; 7];
        data[2] = 50.0;
        let logits = tape.leaf(&tensor(vec![1, 7], data), false);
        let loss = tape
            .softmax_cross_entropy(logits, &[2], &[true])
            .unwrap();
        assert!(tape.scalar(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let logits = Tensor::randn(vec![2, 7], 2.0, &mut rng);
        let targets = [3usize, 6];
        // Direct scalar log-sum-exp per row in f64.
        let mut expect = 0.0f64;
        for r in 0..2 {
            let row = &logits.data[r * 7..(r + 1) * 7];
            let lse = row.iter().map(|&v| (v as f64).exp()).sum::<f64>().ln();
            expect += lse - row[targets[r]] as f64;
        }
        expect /= 2.0;
        let mut tape = Tape::new();
        let l = tape.leaf(&logits, false);
        let loss = tape
            .softmax_cross_entropy(l, &targets, &[true, true])
            .unwrap();
        let got = tape.scalar(loss) as f64;
        assert!((got - expect).abs() / expect.abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_empty_mask_is_error() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&Tensor::zeros(vec![2, 4]), false);
        let err = tape
            .softmax_cross_entropy(logits, &[0, 0], &[false, false])
            .unwrap_err();
        assert!(matches!(err, TensorError::EmptyMask));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![2, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x, true);
        let s = tape.sum_all(xi);
        tape.backward(s).unwrap();
        assert!(tape.grad(xi).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_of_sum_of_squares_is_two_x() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = Tensor::randn(vec![4, 2], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x, true);
        let sq = tape.mul(xi, xi).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        for (g, v) in tape.grad(xi).iter().zip(&x.data) {
            assert!((g - 2.0 * v).abs() < 1e-5, "{g} vs {}", 2.0 * v);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros(vec![2, 2]), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss(_)));
    }

    #[test]
    fn unreachable_parameter_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::full(vec![2], 1.0), true);
        let orphan = tape.leaf(&Tensor::full(vec![2], 5.0), true);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(orphan).iter().all(|&g| g == 0.0));
    }

    /// Runs the same two-layer MLP in plain f64 arithmetic; independent of
    /// every tape code path.
    fn mlp_loss_f64(w1: &[f64], b1: &[f64], w2: &[f64], x: &[f64], din: usize, dh: usize) -> f64 {
        let mut h = vec![0.0f64; dh];
        for j in 0..dh {
            let mut s = b1[j];
            for i in 0..din {
                s += x[i] * w1[i * dh + j];
            }
            h[j] = s.tanh();
        }
        let mut out = 0.0f64;
        for (j, hv) in h.iter().enumerate() {
            out += hv * w2[j];
        }
        out * out
    }

    #[test]
    fn mlp_grads_match_central_finite_differences() {
        let (din, dh) = (3, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let w1 = Tensor::randn(vec![din, dh], 0.5, &mut rng);
        let b1 = Tensor::randn(vec![dh], 0.5, &mut rng);
        let w2 = Tensor::randn(vec![dh, 1], 0.5, &mut rng);
        let x = Tensor::randn(vec![1, din], 1.0, &mut rng);

        let mut tape = Tape::new();
        let w1i = tape.leaf(&w1, true);
        let b1i = tape.leaf(&b1, true);
        let w2i = tape.leaf(&w2, true);
        let xi = tape.leaf(&x, false);
        let h = tape.matmul(xi, w1i).unwrap();
        let h = tape.add_row(h, b1i).unwrap();
        let h = tape.tanh(h);
        let out = tape.matmul(h, w2i).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();

        let to_f64 = |t: &Tensor| t.data.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        let (w1d, b1d, w2d, xd) = (to_f64(&w1), to_f64(&b1), to_f64(&w2), to_f64(&x));
        let h_step = 1e-3;
        let check = |param: usize, idx: usize, analytic: f32| {
            let eval = |delta: f64| {
                let mut w1m = w1d.clone();
                let mut b1m = b1d.clone();
                let mut w2m = w2d.clone();
                match param {
                    0 => w1m[idx] += delta,
                    1 => b1m[idx] += delta,
                    _ => w2m[idx] += delta,
                }
                mlp_loss_f64(&w1m, &b1m, &w2m, &xd, din, dh)
            };
            let fd = (eval(h_step) - eval(-h_step)) / (2.0 * h_step);
            let diff = (analytic as f64 - fd).abs();
            assert!(
                diff < 1e-6 || diff / fd.abs() < 1e-4,
                "param {param} idx {idx}: analytic {analytic} vs fd {fd}"
            );
        };
        for i in 0..w1.numel() {
            check(0, i, tape.grad(w1i)[i]);
        }
        for i in 0..b1.numel() {
            check(1, i, tape.grad(b1i)[i]);
        }
        for i in 0..w2.numel() {
            check(2, i, tape.grad(w2i)[i]);
        }
    }

    #[test]
    fn forward_backward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha20Rng::seed_from_u64(99);
            let w = Tensor::randn(vec![6, 6], 1.0, &mut rng);
            let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
            let mut tape = Tape::new();
            let wi = tape.leaf(&w, true);
            let xi = tape.leaf(&x, false);
            let h = tape.matmul(xi, wi).unwrap();
            let h = tape.gelu(h);
            let s = tape.sum_all(h);
            tape.backward(s).unwrap();
            tape.grad(wi).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn causal_softmax_rows_normalize_over_prefix() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let scores = Tensor::randn(vec![5, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let s = tape.leaf(&scores, false);
        let p = tape.causal_softmax_rows(s);
        let data = tape.data(p);
        for i in 0..5 {
            let row_sum: f32 = data[i * 5..=i * 5 + i].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-5);
            for j in i + 1..5 {
                assert_eq!(data[i * 5 + j], 0.0);
            }
        }
    }

    #[test]
    fn kl_of_identical_logits_is_exactly_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let logits = Tensor::randn(vec![3, 6], 1.5, &mut rng);
        let mut tape = Tape::new();
        let l = tape.leaf(&logits, false);
        let kl = tape
            .kl_to_reference(l, &logits.data, &[true, true, true])
            .unwrap();
        assert_eq!(tape.scalar(kl), 0.0);
    }

    #[test]
    fn kl_matches_closed_form_on_three_token_distributions() {
        // Reference softmax p = (0.5, 0.25, 0.25); current softmax
        // q = (0.2, 0.5, 0.3). Logits are the logs of those probabilities.
        let q = [0.2f32, 0.5, 0.3];
        let p = [0.5f32, 0.25, 0.25];
        let ref_logits: Vec<f32> = p.iter().map(|v| v.ln()).collect();
        let logits = Tensor::new(vec![1, 3], q.iter().map(|v| v.ln()).collect()).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(&logits, false);
        let kl = tape.kl_to_reference(l, &ref_logits, &[true]).unwrap();
        let expect: f64 = p
            .iter()
            .zip(&q)
            .map(|(&pv, &qv)| pv as f64 * ((pv as f64).ln() - (qv as f64).ln()))
            .sum();
        let got = tape.scalar(kl) as f64;
        assert!((got - expect).abs() / expect < 1e-6, "{got} vs {expect}");
    }

    #[test]
    fn kl_is_nonnegative_for_differing_distributions() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        for _ in 0..25 {
            let cur = Tensor::randn(vec![2, 9], 2.0, &mut rng);
            let reference = Tensor::randn(vec![2, 9], 2.0, &mut rng);
            let mut tape = Tape::new();
            let l = tape.leaf(&cur, false);
            let kl = tape
                .kl_to_reference(l, &reference.data, &[true, true])
                .unwrap();
            assert!(tape.scalar(kl) >= 0.0);
        }
    }
}
