//! Dense f64 tensors on a reverse-mode differentiation tape.
//!
//! The primitive set is deliberately small: exactly what a cell supernet
//! forward pass, its scoring losses, and the finite-width NTK extraction
//! need. Every primitive records a backward rule on the [`Tape`]; one
//! [`Tape::backward`] sweep fills gradients for every leaf reachable from
//! the loss. Tapes are single-threaded; independent tapes can be built and
//! evaluated concurrently.

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

/// Errors raised by tensor construction and tape primitives.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: variable does not belong to this tape")]
    ForeignVar { op: &'static str },
    #[error("finite-difference step must be positive, got {eps}")]
    InvalidStep { eps: f64 },
    #[error("{op}: {detail}")]
    Unsupported { op: &'static str, detail: String },
}

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![1.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Identity(usize),
    Relu(usize),
    Abs(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale {
        x: usize,
        factor: f64,
    },
    ScaleByScalar {
        x: usize,
        s: usize,
    },
    Matmul(usize, usize),
    Conv2d {
        x: usize,
        kernel: usize,
    },
    AvgPool3x3(usize),
    GlobalAvgPool(usize),
    Softmax(usize),
    Concat(Vec<usize>),
    Index {
        x: usize,
        at: usize,
    },
    SumReduce(usize),
    RowSum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        // cached softmax probabilities for the backward rule
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Reverse-mode tape: records primitives during the forward pass and
/// replays them in reverse to accumulate gradients.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_sweeps: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_sweeps: 0,
        }
    }

    /// Number of backward sweeps performed so far on this tape.
    pub fn backward_sweeps(&self) -> usize {
        self.backward_sweeps
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var, op: &'static str) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar { op });
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index,
        }
    }

    fn finite(&self, index: usize, op: &'static str) -> Result<(), TensorError> {
        if self.nodes[index].value.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Gradient accumulated on `v` by the most recent backward sweep.
    /// `None` when the node was unreachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.index].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    // ---- leaves ------------------------------------------------------

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn scalar_leaf(&mut self, value: f64, requires_grad: bool) -> Var {
        self.leaf(Tensor::scalar(value), requires_grad)
    }

    // ---- elementwise primitives ---------------------------------------

    pub fn identity(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "identity")?;
        let value = self.nodes[xi].value.clone();
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(value, Op::Identity(xi), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "relu")?;
        let value = Tensor {
            shape: self.nodes[xi].value.shape.clone(),
            data: self.nodes[xi].value.data.iter().map(|v| v.max(0.0)).collect(),
        };
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(value, Op::Relu(xi), rg))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "abs")?;
        let value = Tensor {
            shape: self.nodes[xi].value.shape.clone(),
            data: self.nodes[xi].value.data.iter().map(|v| v.abs()).collect(),
        };
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(value, Op::Abs(xi), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ai = self.check(a, "add")?;
        let bi = self.check(b, "add")?;
        if self.nodes[ai].value.shape != self.nodes[bi].value.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.nodes[ai].value.shape.clone(),
                rhs: self.nodes[bi].value.shape.clone(),
            });
        }
        let data = self.nodes[ai]
            .value
            .data
            .iter()
            .zip(&self.nodes[bi].value.data)
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor {
            shape: self.nodes[ai].value.shape.clone(),
            data,
        };
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        let out = self.push(value, Op::Add(ai, bi), rg);
        self.finite(out.index, "add")?;
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ai = self.check(a, "mul")?;
        let bi = self.check(b, "mul")?;
        if self.nodes[ai].value.shape != self.nodes[bi].value.shape {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.nodes[ai].value.shape.clone(),
                rhs: self.nodes[bi].value.shape.clone(),
            });
        }
        let data = self.nodes[ai]
            .value
            .data
            .iter()
            .zip(&self.nodes[bi].value.data)
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor {
            shape: self.nodes[ai].value.shape.clone(),
            data,
        };
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        let out = self.push(value, Op::Mul(ai, bi), rg);
        self.finite(out.index, "mul")?;
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let xi = self.check(x, "scale")?;
        let value = Tensor {
            shape: self.nodes[xi].value.shape.clone(),
            data: self.nodes[xi].value.data.iter().map(|v| v * factor).collect(),
        };
        let rg = self.nodes[xi].requires_grad;
        let out = self.push(value, Op::Scale { x: xi, factor }, rg);
        self.finite(out.index, "scale")?;
        Ok(out)
    }

    /// Multiply a tensor by a scalar variable living on the tape.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "scale_by")?;
        let si = self.check(s, "scale_by")?;
        if !self.nodes[si].value.is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.nodes[xi].value.shape.clone(),
                rhs: self.nodes[si].value.shape.clone(),
            });
        }
        let factor = self.nodes[si].value.item();
        let value = Tensor {
            shape: self.nodes[xi].value.shape.clone(),
            data: self.nodes[xi].value.data.iter().map(|v| v * factor).collect(),
        };
        let rg = self.nodes[xi].requires_grad || self.nodes[si].requires_grad;
        let out = self.push(value, Op::ScaleByScalar { x: xi, s: si }, rg);
        self.finite(out.index, "scale_by")?;
        Ok(out)
    }

    // ---- linear algebra ------------------------------------------------

    /// (m, k) x (k, n) -> (m, n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ai = self.check(a, "matmul")?;
        let bi = self.check(b, "matmul")?;
        let (ash, bsh) = (
            self.nodes[ai].value.shape.clone(),
            self.nodes[bi].value.shape.clone(),
        );
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let av = &self.nodes[ai].value.data;
        let bv = &self.nodes[bi].value.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += aip * b;
                }
            }
        }
        let value = Tensor {
            shape: vec![m, n],
            data: out,
        };
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        let out = self.push(value, Op::Matmul(ai, bi), rg);
        self.finite(out.index, "matmul")?;
        Ok(out)
    }

    /// Direct 2-D convolution, stride 1, same (zero) padding.
    /// x: (n, c_in, h, w), kernel: (c_out, c_in, kh, kw) with kh == kw in {1, 3}.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "conv2d")?;
        let ki = self.check(kernel, "conv2d")?;
        let xsh = self.nodes[xi].value.shape.clone();
        let ksh = self.nodes[ki].value.shape.clone();
        if xsh.len() != 4 || ksh.len() != 4 || xsh[1] != ksh[1] || ksh[2] != ksh[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xsh,
                rhs: ksh,
            });
        }
        let ksz = ksh[2];
        if ksz != 1 && ksz != 3 {
            return Err(TensorError::Unsupported {
                op: "conv2d",
                detail: format!("kernel size {ksz}x{ksz}; only 1x1 and 3x3 are supported"),
            });
        }
        let (n, cin, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let cout = ksh[0];
        let pad = ksz / 2;
        let xv = &self.nodes[xi].value.data;
        let kv = &self.nodes[ki].value.data;
        let mut out = vec![0.0; n * cout * h * w];
        conv2d_forward(xv, kv, &mut out, n, cin, cout, h, w, ksz, pad);
        let value = Tensor {
            shape: vec![n, cout, h, w],
            data: out,
        };
        let rg = self.nodes[xi].requires_grad || self.nodes[ki].requires_grad;
        let out = self.push(value, Op::Conv2d { x: xi, kernel: ki }, rg);
        self.finite(out.index, "conv2d")?;
        Ok(out)
    }

    /// 3x3 average pool, stride 1, zero padding 1. The window sum is always
    /// divided by 9, padded positions included.
    pub fn avg_pool3x3(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "avg_pool3x3")?;
        let xsh = self.nodes[xi].value.shape.clone();
        if xsh.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "avg_pool3x3",
                lhs: xsh,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let xv = &self.nodes[xi].value.data;
        let mut out = vec![0.0; xv.len()];
        pool3x3_shift(xv, &mut out, n * c, h, w, 1.0 / 9.0);
        let value = Tensor {
            shape: xsh,
            data: out,
        };
        let rg = self.nodes[xi].requires_grad;
        let out = self.push(value, Op::AvgPool3x3(xi), rg);
        self.finite(out.index, "avg_pool3x3")?;
        Ok(out)
    }

    /// (n, c, h, w) -> (n, c): mean over the spatial dimensions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "global_avg_pool")?;
        let xsh = self.nodes[xi].value.shape.clone();
        if xsh.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "global_avg_pool",
                lhs: xsh,
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
        let hw = (h * w) as f64;
        let xv = &self.nodes[xi].value.data;
        let mut out = vec![0.0; n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * h * w;
            *o = xv[base..base + h * w].iter().sum::<f64>() / hw;
        }
        let value = Tensor {
            shape: vec![n, c],
            data: out,
        };
        let rg = self.nodes[xi].requires_grad;
        let out = self.push(value, Op::GlobalAvgPool(xi), rg);
        self.finite(out.index, "global_avg_pool")?;
        Ok(out)
    }

    // ---- reductions and vector ops --------------------------------------

    /// Softmax over a 1-D vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "softmax")?;
        let xsh = self.nodes[xi].value.shape.clone();
        if xsh.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                lhs: xsh,
                rhs: vec![],
            });
        }
        let xv = &self.nodes[xi].value.data;
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let value = Tensor { shape: xsh, data };
        let rg = self.nodes[xi].requires_grad;
        let out = self.push(value, Op::Softmax(xi), rg);
        self.finite(out.index, "softmax")?;
        Ok(out)
    }

    /// Concatenate 1-D vectors (or scalars) into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Unsupported {
                op: "concat",
                detail: "empty input list".into(),
            });
        }
        let mut idxs = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let pi = self.check(p, "concat")?;
            if self.nodes[pi].value.shape.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[pi].value.shape.clone(),
                    rhs: vec![],
                });
            }
            data.extend_from_slice(&self.nodes[pi].value.data);
            rg |= self.nodes[pi].requires_grad;
            idxs.push(pi);
        }
        let value = Tensor {
            shape: vec![data.len()],
            data,
        };
        Ok(self.push(value, Op::Concat(idxs), rg))
    }

    /// Extract element `at` of a 1-D vector as a scalar.
    pub fn index(&mut self, x: Var, at: usize) -> Result<Var, TensorError> {
        let xi = self.check(x, "index")?;
        let xsh = &self.nodes[xi].value.shape;
        if xsh.len() != 1 || at >= self.nodes[xi].value.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "index",
                lhs: xsh.clone(),
                rhs: vec![at],
            });
        }
        let value = Tensor::scalar(self.nodes[xi].value.data[at]);
        let rg = self.nodes[xi].requires_grad;
        Ok(self.push(value, Op::Index { x: xi, at }, rg))
    }

    /// Sum of all entries -> scalar.
    pub fn sum_reduce(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "sum_reduce")?;
        let total: f64 = self.nodes[xi].value.data.iter().sum();
        let rg = self.nodes[xi].requires_grad;
        let out = self.push(Tensor::scalar(total), Op::SumReduce(xi), rg);
        self.finite(out.index, "sum_reduce")?;
        Ok(out)
    }

    /// (r, c) -> (r,): per-row sum.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let xi = self.check(x, "row_sum")?;
        let xsh = self.nodes[xi].value.shape.clone();
        if xsh.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "row_sum",
                lhs: xsh,
                rhs: vec![],
            });
        }
        let (r, c) = (xsh[0], xsh[1]);
        let xv = &self.nodes[xi].value.data;
        let data: Vec<f64> = (0..r).map(|i| xv[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor {
            shape: vec![r],
            data,
        };
        let rg = self.nodes[xi].requires_grad;
        let out = self.push(value, Op::RowSum(xi), rg);
        self.finite(out.index, "row_sum")?;
        Ok(out)
    }

    /// Mean cross-entropy with an internal softmax. logits: (n, k), one
    /// label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let li = self.check(logits, "cross_entropy")?;
        let lsh = self.nodes[li].value.shape.clone();
        if lsh.len() != 2 || lsh[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lsh,
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (lsh[0], lsh[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::Unsupported {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {k} classes"),
            });
        }
        let lv = &self.nodes[li].value.data;
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            for p in &mut probs[i * k..(i + 1) * k] {
                *p /= sum;
            }
            let lse = max + sum.ln();
            total += lse - row[labels[i]];
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.nodes[li].requires_grad;
        let out = self.push(
            value,
            Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        );
        self.finite(out.index, "cross_entropy")?;
        Ok(out)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss; gradients accumulate on every node
    /// reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let li = self.check(loss, "backward")?;
        if !self.nodes[li].value.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[li].value.shape.clone(),
            });
        }
        self.sweep(li, 0)
    }

    /// Reverse sweep seeding d(output[seed_index]) = 1, all other output
    /// entries 0. Used for Jacobian extraction.
    pub fn backward_seeded(&mut self, output: Var, seed_index: usize) -> Result<(), TensorError> {
        let oi = self.check(output, "backward_seeded")?;
        if seed_index >= self.nodes[oi].value.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "backward_seeded",
                lhs: self.nodes[oi].value.shape.clone(),
                rhs: vec![seed_index],
            });
        }
        self.sweep(oi, seed_index)
    }

    fn sweep(&mut self, root: usize, seed_index: usize) -> Result<(), TensorError> {
        for g in &mut self.grads {
            *g = None;
        }
        let mut seed = vec![0.0; self.nodes[root].value.numel()];
        seed[seed_index] = 1.0;
        self.grads[root] = Some(seed);
        for i in (0..=root).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            distribute(&self.nodes, &mut self.grads, i, &gout);
            self.grads[i] = Some(gout);
        }
        self.backward_sweeps += 1;
        Ok(())
    }

    // ---- Jacobian -------------------------------------------------------

    /// Row i = gradient of output scalar i with respect to the concatenated
    /// leaves, computed by repeated backward sweeps with one-hot seeds.
    pub fn jacobian(&mut self, output: Var, leaves: &[Var]) -> Result<Jacobian, TensorError> {
        self.check(output, "jacobian")?;
        let mut cols = 0;
        for &l in leaves {
            let li = self.check(l, "jacobian")?;
            cols += self.nodes[li].value.numel();
        }
        let rows = self.nodes[output.index].value.numel();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            self.backward_seeded(output, r)?;
            let mut c0 = 0;
            for &l in leaves {
                let numel = self.nodes[l.index].value.numel();
                if let Some(g) = self.grad(l) {
                    data[r * cols + c0..r * cols + c0 + numel].copy_from_slice(g);
                }
                c0 += numel;
            }
        }
        Ok(Jacobian { rows, cols, data })
    }
}

fn grad_buf<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    index: usize,
) -> &'a mut Vec<f64> {
    let numel = nodes[index].value.numel();
    grads[index].get_or_insert_with(|| vec![0.0; numel])
}

/// Apply one node's backward rule, accumulating into its inputs' gradient
/// buffers. `grads[index]` has been taken by the caller, so the split borrow
/// of `nodes` and `grads` is safe.
fn distribute(nodes: &[Node], grads: &mut [Option<Vec<f64>>], index: usize, gout: &[f64]) {
    match &nodes[index].op {
        Op::Leaf => {}
        Op::Identity(x) => {
            let gx = grad_buf(nodes, grads, *x);
            for (g, go) in gx.iter_mut().zip(gout) {
                *g += go;
            }
        }
        Op::Relu(x) => {
            // subgradient 0 at the kink
            let xv = &nodes[*x].value.data;
            let gx = grad_buf(nodes, grads, *x);
            for ((g, go), v) in gx.iter_mut().zip(gout).zip(xv) {
                if *v > 0.0 {
                    *g += go;
                }
            }
        }
        Op::Abs(x) => {
            let xv = &nodes[*x].value.data;
            let gx = grad_buf(nodes, grads, *x);
            for ((g, go), v) in gx.iter_mut().zip(gout).zip(xv) {
                if *v > 0.0 {
                    *g += go;
                } else if *v < 0.0 {
                    *g -= go;
                }
            }
        }
        Op::Add(a, b) => {
            let ga = grad_buf(nodes, grads, *a);
            for (g, go) in ga.iter_mut().zip(gout) {
                *g += go;
            }
            let gb = grad_buf(nodes, grads, *b);
            for (g, go) in gb.iter_mut().zip(gout) {
                *g += go;
            }
        }
        Op::Mul(a, b) => {
            {
                let bv = &nodes[*b].value.data;
                let ga = grad_buf(nodes, grads, *a);
                for ((g, go), v) in ga.iter_mut().zip(gout).zip(bv) {
                    *g += go * v;
                }
            }
            let av = &nodes[*a].value.data;
            let gb = grad_buf(nodes, grads, *b);
            for ((g, go), v) in gb.iter_mut().zip(gout).zip(av) {
                *g += go * v;
            }
        }
        Op::Scale { x, factor } => {
            let gx = grad_buf(nodes, grads, *x);
            for (g, go) in gx.iter_mut().zip(gout) {
                *g += go * factor;
            }
        }
        Op::ScaleByScalar { x, s } => {
            {
                let sv = nodes[*s].value.item();
                let gx = grad_buf(nodes, grads, *x);
                for (g, go) in gx.iter_mut().zip(gout) {
                    *g += go * sv;
                }
            }
            let xv = &nodes[*x].value.data;
            let ds: f64 = xv.iter().zip(gout).map(|(x, go)| x * go).sum();
            grad_buf(nodes, grads, *s)[0] += ds;
        }
        Op::Matmul(a, b) => {
            let ash = &nodes[*a].value.shape;
            let bsh = &nodes[*b].value.shape;
            let (m, k, n) = (ash[0], ash[1], bsh[1]);
            {
                // dA = dC * B^T
                let bv = &nodes[*b].value.data;
                let ga = grad_buf(nodes, grads, *a);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        let grow = &gout[i * n..(i + 1) * n];
                        let brow = &bv[p * n..(p + 1) * n];
                        for (go, b) in grow.iter().zip(brow) {
                            acc += go * b;
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            // dB = A^T * dC
            let av = &nodes[*a].value.data;
            let gb = grad_buf(nodes, grads, *b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let grow = &gout[i * n..(i + 1) * n];
                    let brow = &mut gb[p * n..(p + 1) * n];
                    for (g, go) in brow.iter_mut().zip(grow) {
                        *g += aip * go;
                    }
                }
            }
        }
        Op::Conv2d { x, kernel } => {
            let xsh = &nodes[*x].value.shape;
            let ksh = &nodes[*kernel].value.shape;
            let (n, cin, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
            let (cout, ksz) = (ksh[0], ksh[2]);
            let pad = ksz / 2;
            {
                let kv = &nodes[*kernel].value.data;
                let gx = grad_buf(nodes, grads, *x);
                conv2d_backward_input(gout, kv, gx, n, cin, cout, h, w, ksz, pad);
            }
            let xv = &nodes[*x].value.data;
            let gk = grad_buf(nodes, grads, *kernel);
            conv2d_backward_kernel(gout, xv, gk, n, cin, cout, h, w, ksz, pad);
        }
        Op::AvgPool3x3(x) => {
            let xsh = &nodes[*x].value.shape;
            let (n, c, h, w) = (xsh[0], xsh[1], xsh[2], xsh[3]);
            let gx = grad_buf(nodes, grads, *x);
            // transpose of the pooling stencil is the same stencil
            pool3x3_shift_transposed(gout, gx, n * c, h, w, 1.0 / 9.0);
        }
        Op::GlobalAvgPool(x) => {
            let xsh = &nodes[*x].value.shape;
            let (h, w) = (xsh[2], xsh[3]);
            let hw = h * w;
            let inv = 1.0 / hw as f64;
            let gx = grad_buf(nodes, grads, *x);
            for (i, go) in gout.iter().enumerate() {
                for g in &mut gx[i * hw..(i + 1) * hw] {
                    *g += go * inv;
                }
            }
        }
        Op::Softmax(x) => {
            let sv = &nodes[index].value.data;
            let dot: f64 = sv.iter().zip(gout).map(|(s, g)| s * g).sum();
            let gx = grad_buf(nodes, grads, *x);
            for ((g, go), s) in gx.iter_mut().zip(gout).zip(sv) {
                *g += s * (go - dot);
            }
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[*p].value.numel();
                let gp = grad_buf(nodes, grads, *p);
                for (g, go) in gp.iter_mut().zip(&gout[offset..offset + len]) {
                    *g += go;
                }
                offset += len;
            }
        }
        Op::Index { x, at } => {
            grad_buf(nodes, grads, *x)[*at] += gout[0];
        }
        Op::SumReduce(x) => {
            let gx = grad_buf(nodes, grads, *x);
            for g in gx.iter_mut() {
                *g += gout[0];
            }
        }
        Op::RowSum(x) => {
            let c = nodes[*x].value.shape[1];
            let gx = grad_buf(nodes, grads, *x);
            for (i, go) in gout.iter().enumerate() {
                for g in &mut gx[i * c..(i + 1) * c] {
                    *g += go;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = labels.len();
            let k = nodes[*logits].value.shape[1];
            let scale = gout[0] / n as f64;
            let gl = grad_buf(nodes, grads, *logits);
            for i in 0..n {
                for j in 0..k {
                    let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                    gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                }
            }
        }
    }
}

/// Dense row-major Jacobian: one row per output scalar.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Jacobian {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gram matrix J * J^T, rows x rows.
    pub fn gram(&self) -> Vec<f64> {
        let n = self.rows;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let ri = self.row(i);
            for j in i..n {
                let rj = self.row(j);
                let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                out[i * n + j] = dot;
                out[j * n + i] = dot;
            }
        }
        out
    }
}

// ---- convolution kernels (shared by forward and backward) ----------------

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ksz: usize,
    pad: usize,
) {
    let hw = h * w;
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * hw;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * hw;
                let kbase = (co * cin + ci) * ksz * ksz;
                for dy in 0..ksz {
                    for dx in 0..ksz {
                        let weight = k[kbase + dy * ksz + dx];
                        if weight == 0.0 {
                            continue;
                        }
                        shift_axpy(
                            &x[xbase..xbase + hw],
                            &mut out[obase..obase + hw],
                            h,
                            w,
                            dy as isize - pad as isize,
                            dx as isize - pad as isize,
                            weight,
                        );
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    gout: &[f64],
    k: &[f64],
    gx: &mut [f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ksz: usize,
    pad: usize,
) {
    let hw = h * w;
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * hw;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * hw;
                let kbase = (co * cin + ci) * ksz * ksz;
                for dy in 0..ksz {
                    for dx in 0..ksz {
                        let weight = k[kbase + dy * ksz + dx];
                        if weight == 0.0 {
                            continue;
                        }
                        // reverse shift of the forward stencil
                        shift_axpy(
                            &gout[obase..obase + hw],
                            &mut gx[xbase..xbase + hw],
                            h,
                            w,
                            pad as isize - dy as isize,
                            pad as isize - dx as isize,
                            weight,
                        );
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_kernel(
    gout: &[f64],
    x: &[f64],
    gk: &mut [f64],
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    ksz: usize,
    pad: usize,
) {
    let hw = h * w;
    for b in 0..n {
        for co in 0..cout {
            let obase = (b * cout + co) * hw;
            for ci in 0..cin {
                let xbase = (b * cin + ci) * hw;
                let kbase = (co * cin + ci) * ksz * ksz;
                for dy in 0..ksz {
                    for dx in 0..ksz {
                        gk[kbase + dy * ksz + dx] += shift_dot(
                            &x[xbase..xbase + hw],
                            &gout[obase..obase + hw],
                            h,
                            w,
                            dy as isize - pad as isize,
                            dx as isize - pad as isize,
                        );
                    }
                }
            }
        }
    }
}

/// out[y][x] += weight * src[y + sy][x + sx] over the in-range region.
fn shift_axpy(src: &[f64], out: &mut [f64], h: usize, w: usize, sy: isize, sx: isize, weight: f64) {
    let (h, w) = (h as isize, w as isize);
    let y0 = 0.max(-sy);
    let y1 = h.min(h - sy);
    let x0 = 0.max(-sx);
    let x1 = w.min(w - sx);
    if y0 >= y1 || x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let orow = (y * w + x0) as usize;
        let srow = ((y + sy) * w + x0 + sx) as usize;
        let len = (x1 - x0) as usize;
        let (o, s) = (&mut out[orow..orow + len], &src[srow..srow + len]);
        for (ov, sv) in o.iter_mut().zip(s) {
            *ov += weight * sv;
        }
    }
}

/// sum over y,x of a[y + sy][x + sx] * b[y][x] over the in-range region.
fn shift_dot(a: &[f64], b: &[f64], h: usize, w: usize, sy: isize, sx: isize) -> f64 {
    let (h, w) = (h as isize, w as isize);
    let y0 = 0.max(-sy);
    let y1 = h.min(h - sy);
    let x0 = 0.max(-sx);
    let x1 = w.min(w - sx);
    let mut acc = 0.0;
    if y0 >= y1 || x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let brow = (y * w + x0) as usize;
        let arow = ((y + sy) * w + x0 + sx) as usize;
        let len = (x1 - x0) as usize;
        acc += a[arow..arow + len]
            .iter()
            .zip(&b[brow..brow + len])
            .map(|(x, y)| x * y)
            .sum::<f64>();
    }
    acc
}

fn pool3x3_shift(x: &[f64], out: &mut [f64], planes: usize, h: usize, w: usize, weight: f64) {
    let hw = h * w;
    for p in 0..planes {
        let base = p * hw;
        for dy in -1..=1 {
            for dx in -1..=1 {
                shift_axpy(&x[base..base + hw], &mut out[base..base + hw], h, w, dy, dx, weight);
            }
        }
    }
}

fn pool3x3_shift_transposed(
    gout: &[f64],
    gx: &mut [f64],
    planes: usize,
    h: usize,
    w: usize,
    weight: f64,
) {
    // symmetric stencil: the adjoint is the same shift set
    pool3x3_shift(gout, gx, planes, h, w, weight);
}

// ---- finite differences ---------------------------------------------------

/// Central-difference gradient of a scalar function, step `step` per
/// coordinate. Independent of the tape's backward rules.
pub fn finite_difference_gradient<F>(
    mut f: F,
    x: &[f64],
    step: f64,
) -> Result<Vec<f64>, TensorError>
where
    F: FnMut(&[f64]) -> Result<f64, TensorError>,
{
    if step <= 0.0 {
        return Err(TensorError::InvalidStep { eps: step });
    }
    let mut xp = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        xp[i] = x[i] + step;
        let fp = f(&xp)?;
        xp[i] = x[i] - step;
        let fm = f(&xp)?;
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Hessian-vector product by central differences on the gradient:
/// (grad(theta + eps v) - grad(theta - eps v)) / (2 eps).
pub fn hvp_finite_difference<F>(
    mut grad_fn: F,
    theta: &[f64],
    v: &[f64],
    eps: f64,
) -> Result<Vec<f64>, TensorError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::InvalidStep { eps });
    }
    if theta.len() != v.len() {
        return Err(TensorError::ShapeMismatch {
            op: "hvp_finite_difference",
            lhs: vec![theta.len()],
            rhs: vec![v.len()],
        });
    }
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t + eps * d).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, d)| t - eps * d).collect();
    let gp = grad_fn(&plus)?;
    let gm = grad_fn(&minus)?;
    if gp.len() != theta.len() || gm.len() != theta.len() {
        return Err(TensorError::ShapeMismatch {
            op: "hvp_finite_difference",
            lhs: vec![gp.len()],
            rhs: vec![theta.len()],
        });
    }
    Ok(gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn relu_matches_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![3], vec![-1.0, 0.0, 2.0]).unwrap(),
            false,
        );
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_reduce_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2, 3]), false);
        let s = tape.sum_reduce(x).unwrap();
        assert_eq!(tape.value(s).item(), 6.0);
    }

    /// Brute-force direct convolution used as an oracle: no shared code with
    /// the tape kernel.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &[f64],
        k: &[f64],
        n: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
        ksz: usize,
    ) -> Vec<f64> {
        let pad = ksz as isize / 2;
        let mut out = vec![0.0; n * cout * h * w];
        for b in 0..n {
            for co in 0..cout {
                for y in 0..h as isize {
                    for xc in 0..w as isize {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for dy in 0..ksz as isize {
                                for dx in 0..ksz as isize {
                                    let iy = y + dy - pad;
                                    let ix = xc + dx - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((b * cin + ci) * h + iy as usize) * w + ix as usize;
                                    let ki = ((co * cin + ci) * ksz + dy as usize) * ksz
                                        + dx as usize;
                                    acc += x[xi] * k[ki];
                                }
                            }
                        }
                        out[((b * cout + co) * h + y as usize) * w + xc as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_ones_same_padding() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![1, 1, 4, 4]), false);
        let k = tape.leaf(Tensor::ones(vec![1, 1, 3, 3]), false);
        let y = tape.conv2d(x, k).unwrap();
        let out = tape.value(y).data();
        // frozen from the brute-force oracle below
        assert_eq!(out[5], 9.0); // interior
        assert_eq!(out[0], 4.0); // corner
        assert_eq!(out[1], 6.0); // edge
        let oracle = conv_oracle(&vec![1.0; 16], &vec![1.0; 9], 1, 1, 1, 4, 4, 3);
        assert_eq!(out, &oracle[..]);
    }

    #[test]
    fn conv_matches_oracle_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, hw, ksz) in &[(2usize, 3usize, 5usize, 3usize), (3, 2, 4, 1)] {
            let xv = randn(&mut rng, 2 * cin * hw * hw);
            let kv = randn(&mut rng, cout * cin * ksz * ksz);
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::from_vec(vec![2, cin, hw, hw], xv.clone()).unwrap(),
                false,
            );
            let k = tape.leaf(
                Tensor::from_vec(vec![cout, cin, ksz, ksz], kv.clone()).unwrap(),
                false,
            );
            let y = tape.conv2d(x, k).unwrap();
            let oracle = conv_oracle(&xv, &kv, 2, cin, cout, hw, hw, ksz);
            for (a, b) in tape.value(y).data().iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_linear() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, 4.0]).unwrap(), true);
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let prod = tape.mul(theta, x).unwrap();
        let loss = tape.sum_reduce(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(theta).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_relu_subgradient() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::from_vec(vec![2], vec![-1.0, 2.0]).unwrap(), true);
        let r = tape.relu(theta).unwrap();
        let loss = tape.sum_reduce(r).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(theta).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        let y = tape.relu(x).unwrap();
        assert!(matches!(
            tape.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    /// Three-layer MLP builder over raw parameter slices so finite
    /// differences can re-evaluate the same scalar function.
    fn mlp_loss(params: &[f64], x: &[f64], dims: &[usize]) -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let mut h = tape.leaf(Tensor::from_vec(vec![1, dims[0]], x.to_vec())?, false);
        let mut offset = 0;
        for i in 0..dims.len() - 1 {
            let (din, dout) = (dims[i], dims[i + 1]);
            let w = tape.leaf(
                Tensor::from_vec(
                    vec![din, dout],
                    params[offset..offset + din * dout].to_vec(),
                )?,
                true,
            );
            offset += din * dout;
            h = tape.matmul(h, w)?;
            if i + 2 < dims.len() {
                h = tape.relu(h)?;
            }
        }
        let loss = tape.sum_reduce(h)?;
        Ok(tape.value(loss).item())
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let dims = [3usize, 5, 4, 2];
        let nparams: usize = dims.windows(2).map(|w| w[0] * w[1]).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = randn(&mut rng, nparams);
        let x = randn(&mut rng, dims[0]);

        // analytic gradient via the tape
        let mut tape = Tape::new();
        let xin = tape.leaf(Tensor::from_vec(vec![1, dims[0]], x.clone()).unwrap(), false);
        let mut h = xin;
        let mut leaves = Vec::new();
        let mut offset = 0;
        for i in 0..dims.len() - 1 {
            let (din, dout) = (dims[i], dims[i + 1]);
            let w = tape.leaf(
                Tensor::from_vec(
                    vec![din, dout],
                    params[offset..offset + din * dout].to_vec(),
                )
                .unwrap(),
                true,
            );
            offset += din * dout;
            leaves.push(w);
            h = tape.matmul(h, w).unwrap();
            if i + 2 < dims.len() {
                h = tape.relu(h).unwrap();
            }
        }
        let loss = tape.sum_reduce(h).unwrap();
        tape.backward(loss).unwrap();
        let mut analytic = Vec::new();
        for l in &leaves {
            analytic.extend_from_slice(tape.grad(*l).unwrap());
        }

        let fd = finite_difference_gradient(|p| mlp_loss(p, &x, &dims), &params, 1e-5).unwrap();
        for (a, f) in analytic.iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-8);
            assert!((a - f).abs() / denom < 1e-4, "{a} vs {f}");
        }
    }

    #[test]
    fn jacobian_rows_match_individual_backwards() {
        let mut tape = Tape::new();
        let theta = tape.leaf(Tensor::from_vec(vec![1, 2], vec![0.5, -0.3]).unwrap(), true);
        let w = tape.leaf(
            Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let out = tape.matmul(theta, w).unwrap();
        let jac = tape.jacobian(out, &[theta]).unwrap();
        assert_eq!(jac.rows, 2);
        for r in 0..2 {
            tape.backward_seeded(out, r).unwrap();
            assert_eq!(jac.row(r), tape.grad(theta).unwrap());
        }
        // f(theta) = theta . x special case
        let mut t2 = Tape::new();
        let th = t2.leaf(Tensor::from_vec(vec![2], vec![9.0, -2.0]).unwrap(), true);
        let x = t2.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), false);
        let p = t2.mul(th, x).unwrap();
        let f = t2.sum_reduce(p).unwrap();
        let j = t2.jacobian(f, &[th]).unwrap();
        assert_eq!(j.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn jacobian_rejects_foreign_vars() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(Tensor::ones(vec![2]), true);
        let b = t2.leaf(Tensor::ones(vec![2]), true);
        let s = t1.sum_reduce(a).unwrap();
        assert!(matches!(
            t1.jacobian(s, &[b]),
            Err(TensorError::ForeignVar { .. })
        ));
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(vec![4, 3], randn(&mut rng, 12)).unwrap(),
            false,
        );
        let w1 = tape.leaf(
            Tensor::from_vec(vec![3, 6], randn(&mut rng, 18)).unwrap(),
            true,
        );
        let w2 = tape.leaf(
            Tensor::from_vec(vec![6, 1], randn(&mut rng, 6)).unwrap(),
            true,
        );
        let h = tape.matmul(x, w1).unwrap();
        let h = tape.relu(h).unwrap();
        let out = tape.matmul(h, w2).unwrap();
        let f = tape.row_sum(out).unwrap();
        let jac = tape.jacobian(f, &[w1, w2]).unwrap();
        let gram = jac.gram();
        let n = jac.rows;
        for i in 0..n {
            for j in 0..n {
                assert!((gram[i * n + j] - gram[j * n + i]).abs() < 1e-12);
            }
        }
        let m = nalgebra::DMatrix::from_row_slice(n, n, &gram);
        let eig = m.symmetric_eigenvalues();
        let trace: f64 = (0..n).map(|i| gram[i * n + i]).sum();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-10 * trace.max(1.0), "min eig {min}");
    }

    #[test]
    fn hvp_identity_hessian() {
        // L = 0.5 theta^T theta -> H v = v
        let grad_fn = |t: &[f64]| -> Result<Vec<f64>, TensorError> { Ok(t.to_vec()) };
        let theta = [0.3, -1.2, 2.0];
        let v = [1.0, 2.0, -0.5];
        let hv = hvp_finite_difference(grad_fn, &theta, &v, 1e-4).unwrap();
        for (h, vi) in hv.iter().zip(&v) {
            assert!((h - vi).abs() < 1e-8);
        }
    }

    #[test]
    fn hvp_known_quadratic() {
        // L = 0.5 theta^T A theta with A = [[2, 1], [1, 3]] -> H v = A v
        let a = [[2.0, 1.0], [1.0, 3.0]];
        let grad_fn = |t: &[f64]| -> Result<Vec<f64>, TensorError> {
            Ok(vec![
                a[0][0] * t[0] + a[0][1] * t[1],
                a[1][0] * t[0] + a[1][1] * t[1],
            ])
        };
        let theta = [0.7, -0.2];
        let v = [1.0, 1.0];
        let expect = [3.0, 4.0];
        for eps in [1e-3, 1e-4] {
            let hv = hvp_finite_difference(grad_fn, &theta, &v, eps).unwrap();
            for (h, e) in hv.iter().zip(&expect) {
                assert!((h - e).abs() < 1e-6, "eps {eps}: {h} vs {e}");
            }
        }
    }

    #[test]
    fn hvp_rejects_bad_step() {
        let grad_fn = |t: &[f64]| -> Result<Vec<f64>, TensorError> { Ok(t.to_vec()) };
        assert!(matches!(
            hvp_finite_difference(grad_fn, &[1.0], &[1.0], 0.0),
            Err(TensorError::InvalidStep { .. })
        ));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::ones(vec![2, 3]), false);
        let b = tape.leaf(Tensor::ones(vec![2, 2]), false);
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let xv = vec![0.3, -0.8, 1.1, 0.05];
        let eval = |p: &[f64]| -> Result<f64, TensorError> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(vec![4], p.to_vec())?, true);
            let s = tape.softmax(x)?;
            let c = tape.leaf(Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.1])?, false);
            let m = tape.mul(s, c)?;
            let l = tape.sum_reduce(m)?;
            Ok(tape.value(l).item())
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![4], xv.clone()).unwrap(), true);
        let s = tape.softmax(x).unwrap();
        let c = tape.leaf(
            Tensor::from_vec(vec![4], vec![0.5, -1.0, 2.0, 0.1]).unwrap(),
            false,
        );
        let m = tape.mul(s, c).unwrap();
        let l = tape.sum_reduce(m).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_difference_gradient(eval, &xv, 1e-6).unwrap();
        for (a, f) in tape.grad(x).unwrap().iter().zip(&fd) {
            assert!((a - f).abs() < 1e-7, "{a} vs {f}");
        }
    }

    #[test]
    fn cross_entropy_backward_matches_fd() {
        let logits = vec![0.2, -0.5, 1.3, 0.0, 0.7, -1.1];
        let labels = [2usize, 0];
        let eval = |p: &[f64]| -> Result<f64, TensorError> {
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::from_vec(vec![2, 3], p.to_vec())?, true);
            let loss = tape.cross_entropy(l, &labels)?;
            Ok(tape.value(loss).item())
        };
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::from_vec(vec![2, 3], logits.clone()).unwrap(), true);
        let loss = tape.cross_entropy(l, &labels).unwrap();
        tape.backward(loss).unwrap();
        let fd = finite_difference_gradient(eval, &logits, 1e-6).unwrap();
        for (a, f) in tape.grad(l).unwrap().iter().zip(&fd) {
            assert!((a - f).abs() < 1e-7, "{a} vs {f}");
        }
    }

    #[test]
    fn avg_pool_and_gap_backward_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xv = randn(&mut rng, 1 * 2 * 4 * 4);
        let eval = |p: &[f64]| -> Result<f64, TensorError> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(vec![1, 2, 4, 4], p.to_vec())?, true);
            let pool = tape.avg_pool3x3(x)?;
            let gap = tape.global_avg_pool(pool)?;
            let l = tape.sum_reduce(gap)?;
            Ok(tape.value(l).item())
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2, 4, 4], xv.clone()).unwrap(), true);
        let pool = tape.avg_pool3x3(x).unwrap();
        let gap = tape.global_avg_pool(pool).unwrap();
        let l = tape.sum_reduce(gap).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_difference_gradient(eval, &xv, 1e-6).unwrap();
        for (a, f) in tape.grad(x).unwrap().iter().zip(&fd) {
            assert!((a - f).abs() < 1e-8, "{a} vs {f}");
        }
    }

    #[test]
    fn conv_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = randn(&mut rng, 1 * 2 * 4 * 4);
        let kv = randn(&mut rng, 3 * 2 * 3 * 3);
        let eval = |p: &[f64]| -> Result<f64, TensorError> {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(vec![1, 2, 4, 4], xv.clone())?, false);
            let k = tape.leaf(Tensor::from_vec(vec![3, 2, 3, 3], p.to_vec())?, true);
            let y = tape.conv2d(x, k)?;
            let r = tape.relu(y)?;
            let l = tape.sum_reduce(r)?;
            Ok(tape.value(l).item())
        };
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1, 2, 4, 4], xv.clone()).unwrap(), false);
        let k = tape.leaf(Tensor::from_vec(vec![3, 2, 3, 3], kv.clone()).unwrap(), true);
        let y = tape.conv2d(x, k).unwrap();
        let r = tape.relu(y).unwrap();
        let l = tape.sum_reduce(r).unwrap();
        tape.backward(l).unwrap();
        let fd = finite_difference_gradient(eval, &kv, 1e-5).unwrap();
        for (a, f) in tape.grad(k).unwrap().iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-8);
            assert!((a - f).abs() / denom < 1e-4, "{a} vs {f}");
        }
    }

    #[test]
    fn deterministic_forward_and_grad() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.leaf(
                Tensor::from_vec(vec![2, 3], randn(&mut rng, 6)).unwrap(),
                false,
            );
            let w = tape.leaf(
                Tensor::from_vec(vec![3, 3], randn(&mut rng, 9)).unwrap(),
                true,
            );
            let h = tape.matmul(x, w).unwrap();
            let r = tape.relu(h).unwrap();
            let l = tape.sum_reduce(r).unwrap();
            tape.backward(l).unwrap();
            (
                tape.value(l).item().to_bits(),
                tape.grad(w)
                    .unwrap()
                    .iter()
                    .map(|g| g.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn scale_by_scalar_var_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![3.0, -1.0]).unwrap(), true);
        let s = tape.scalar_leaf(2.0, true);
        let y = tape.scale_by(x, s).unwrap();
        let l = tape.sum_reduce(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        assert_eq!(tape.grad(s).unwrap(), &[2.0]); // sum(x)
    }

    #[test]
    fn concat_index_backward() {
        let mut tape = Tape::new();
        let a = tape.scalar_leaf(0.3, true);
        let b = tape.scalar_leaf(-0.7, true);
        let v = tape.concat(&[a, b]).unwrap();
        let s = tape.softmax(v).unwrap();
        let w0 = tape.index(s, 0).unwrap();
        tape.backward(w0).unwrap();
        // d softmax_0 / d a = s0 (1 - s0), d / d b = -s0 s1
        let s0 = tape.value(s).data()[0];
        let s1 = tape.value(s).data()[1];
        assert!((tape.grad(a).unwrap()[0] - s0 * (1.0 - s0)).abs() < 1e-12);
        assert!((tape.grad(b).unwrap()[0] + s0 * s1).abs() < 1e-12);
    }
}
