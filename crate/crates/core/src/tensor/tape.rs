//! Append-only gradient tape.
//!
//! Operations performed through a [`Tape`] push one node each (operands that
//! are not yet tracked are interned as constant leaves). [`Tape::backward`]
//! walks the nodes in reverse creation order from a scalar root and
//! accumulates gradients; iteration order is fixed, so repeated backward
//! passes over the same graph are bit-identical.
//!
//! Each tape carries a unique token and tensors remember `(token, node id)`,
//! so a tensor from one tape handed to another is treated as a constant
//! instead of silently aliasing an unrelated node.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{row_norm, Tensor, TensorError};

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Normalize(usize),
    LogSoftmax(usize),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
}

pub struct Tape {
    token: u64,
    nodes: Vec<Node>,
    ran_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            token: NEXT_TOKEN.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a tracked leaf (typically a parameter).
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec());
        t.clone().with_node(self.token, id)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> usize {
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: Vec::new(),
        });
        self.nodes.len() - 1
    }

    /// Node id of `t` on this tape, interning it as a constant leaf if it is
    /// untracked (or tracked on a different tape).
    fn id_of(&mut self, t: &Tensor) -> usize {
        match t.node() {
            Some((token, id)) if token == self.token => id,
            _ => self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec()),
        }
    }

    fn emit(&mut self, op: Op, value: Tensor) -> Tensor {
        let id = self.push(op, value.shape().to_vec(), value.data().to_vec());
        value.with_node(self.token, id)
    }

    // ─── recorded operations ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.matmul(b)?;
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        Ok(self.emit(Op::MatMul(ia, ib), value))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.transpose()?;
        let ia = self.id_of(a);
        Ok(self.emit(Op::Transpose(ia), value))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.add(b)?;
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        Ok(self.emit(Op::Add(ia, ib), value))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.sub(b)?;
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        Ok(self.emit(Op::Sub(ia, ib), value))
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.mul(b)?;
        let (ia, ib) = (self.id_of(a), self.id_of(b));
        Ok(self.emit(Op::Mul(ia, ib), value))
    }

    pub fn add_bias(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.add_bias(bias)?;
        let (ia, ib) = (self.id_of(a), self.id_of(bias));
        Ok(self.emit(Op::AddBias(ia, ib), value))
    }

    pub fn scale(&mut self, a: &Tensor, k: f64) -> Result<Tensor, TensorError> {
        let value = a.scale(k);
        let ia = self.id_of(a);
        Ok(self.emit(Op::Scale(ia, k), value))
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.tanh();
        let ia = self.id_of(a);
        Ok(self.emit(Op::Tanh(ia), value))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.relu();
        let ia = self.id_of(a);
        Ok(self.emit(Op::Relu(ia), value))
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.exp();
        let ia = self.id_of(a);
        Ok(self.emit(Op::Exp(ia), value))
    }

    pub fn log(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.log();
        let ia = self.id_of(a);
        Ok(self.emit(Op::Log(ia), value))
    }

    pub fn square(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.square();
        let ia = self.id_of(a);
        Ok(self.emit(Op::Square(ia), value))
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.sum();
        let ia = self.id_of(a);
        Ok(self.emit(Op::Sum(ia), value))
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.mean();
        let ia = self.id_of(a);
        Ok(self.emit(Op::Mean(ia), value))
    }

    pub fn row_sum(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.row_sum()?;
        let ia = self.id_of(a);
        Ok(self.emit(Op::RowSum(ia), value))
    }

    pub fn rowwise_l2_normalize(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.rowwise_l2_normalize()?;
        let ia = self.id_of(a);
        Ok(self.emit(Op::Normalize(ia), value))
    }

    pub fn log_softmax_rows(&mut self, a: &Tensor) -> Result<Tensor, TensorError> {
        let value = a.log_softmax_rows()?;
        let ia = self.id_of(a);
        Ok(self.emit(Op::LogSoftmax(ia), value))
    }

    // ─── backward ───────────────────────────────────────────────────────────

    /// Accumulate gradients of `root` (a scalar tracked on this tape) with
    /// respect to every node. Resets previous gradients first, so calling it
    /// twice gives bit-identical results.
    pub fn backward(&mut self, root: &Tensor) -> Result<(), TensorError> {
        let root_id = match root.node() {
            Some((token, id)) if token == self.token => id,
            _ => return Err(TensorError::Untracked),
        };
        if self.nodes[root_id].value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.nodes[root_id].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad.clear();
            node.grad.resize(node.value.len(), 0.0);
        }
        self.nodes[root_id].grad[0] = 1.0;

        for id in (0..=root_id).rev() {
            // Split off the current node so parent grads can be borrowed mutably.
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            if node.grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            match node.op {
                Op::Leaf => {}
                Op::MatMul(ia, ib) => {
                    // c = a·b  ⇒  da += g·bᵀ, db += aᵀ·g
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let k = before[ia].shape[1];
                    if ia == ib {
                        // square self-product: both contributions target one node
                        let a_val = before[ia].value.clone();
                        let ga = &mut before[ia].grad;
                        accumulate_matmul_nt(&node.grad, &a_val, m, n, k, ga);
                        accumulate_matmul_tn(&a_val, &node.grad, m, k, n, ga);
                    } else {
                        let (pa, pb) = two_muts(before, ia, ib);
                        accumulate_matmul_nt(&node.grad, &pb.value, m, n, k, &mut pa.grad);
                        accumulate_matmul_tn(&pa.value, &node.grad, m, k, n, &mut pb.grad);
                    }
                }
                Op::Transpose(ia) => {
                    let (n, m) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[ia].grad;
                    for i in 0..n {
                        for j in 0..m {
                            ga[j * n + i] += node.grad[i * m + j];
                        }
                    }
                }
                Op::Add(ia, ib) => {
                    accumulate_broadcast(before, ia, &node.grad, 1.0, None);
                    accumulate_broadcast(before, ib, &node.grad, 1.0, None);
                }
                Op::Sub(ia, ib) => {
                    accumulate_broadcast(before, ia, &node.grad, 1.0, None);
                    accumulate_broadcast(before, ib, &node.grad, -1.0, None);
                }
                Op::Mul(ia, ib) => {
                    // d(a∘b) ⇒ da += g∘b, db += g∘a, with scalar reduction
                    let other_b = before[ib].value.clone();
                    accumulate_broadcast(before, ia, &node.grad, 1.0, Some(&other_b));
                    let other_a = before[ia].value.clone();
                    accumulate_broadcast(before, ib, &node.grad, 1.0, Some(&other_a));
                }
                Op::AddBias(ia, ib) => {
                    let (m, n) = (node.shape[0], node.shape[1]);
                    {
                        let ga = &mut before[ia].grad;
                        for (g, o) in ga.iter_mut().zip(&node.grad) {
                            *g += o;
                        }
                    }
                    let gb = &mut before[ib].grad;
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += node.grad[i * n + j];
                        }
                    }
                }
                Op::Scale(ia, kf) => {
                    let ga = &mut before[ia].grad;
                    for (g, o) in ga.iter_mut().zip(&node.grad) {
                        *g += kf * o;
                    }
                }
                Op::Tanh(ia) => {
                    let ga = &mut before[ia].grad;
                    for ((g, o), y) in ga.iter_mut().zip(&node.grad).zip(&node.value) {
                        *g += o * (1.0 - y * y);
                    }
                }
                Op::Relu(ia) => {
                    let parent = &before[ia];
                    let x = parent.value.clone();
                    let ga = &mut before[ia].grad;
                    for ((g, o), xv) in ga.iter_mut().zip(&node.grad).zip(&x) {
                        if *xv > 0.0 {
                            *g += o;
                        }
                    }
                }
                Op::Exp(ia) => {
                    let ga = &mut before[ia].grad;
                    for ((g, o), y) in ga.iter_mut().zip(&node.grad).zip(&node.value) {
                        *g += o * y;
                    }
                }
                Op::Log(ia) => {
                    let x = before[ia].value.clone();
                    let ga = &mut before[ia].grad;
                    for ((g, o), xv) in ga.iter_mut().zip(&node.grad).zip(&x) {
                        *g += o / xv;
                    }
                }
                Op::Square(ia) => {
                    let x = before[ia].value.clone();
                    let ga = &mut before[ia].grad;
                    for ((g, o), xv) in ga.iter_mut().zip(&node.grad).zip(&x) {
                        *g += 2.0 * xv * o;
                    }
                }
                Op::Sum(ia) => {
                    let g0 = node.grad[0];
                    for g in before[ia].grad.iter_mut() {
                        *g += g0;
                    }
                }
                Op::Mean(ia) => {
                    let n = before[ia].value.len() as f64;
                    let g0 = node.grad[0] / n;
                    for g in before[ia].grad.iter_mut() {
                        *g += g0;
                    }
                }
                Op::RowSum(ia) => {
                    let parent_cols = before[ia].shape[1];
                    let ga = &mut before[ia].grad;
                    for i in 0..node.shape[0] {
                        let gi = node.grad[i];
                        for j in 0..parent_cols {
                            ga[i * parent_cols + j] += gi;
                        }
                    }
                }
                Op::Normalize(ia) => {
                    // y = x/‖x‖ per row ⇒ dx = (g − y·(y·g)) / ‖x‖
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let x = before[ia].value.clone();
                    let ga = &mut before[ia].grad;
                    for i in 0..m {
                        let xr = &x[i * n..(i + 1) * n];
                        let yr = &node.value[i * n..(i + 1) * n];
                        let gr = &node.grad[i * n..(i + 1) * n];
                        let norm = row_norm(xr);
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            ga[i * n + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                }
                Op::LogSoftmax(ia) => {
                    // y = log softmax(x) per row ⇒ dx = g − softmax(x)·Σg
                    let (m, n) = (node.shape[0], node.shape[1]);
                    let ga = &mut before[ia].grad;
                    for i in 0..m {
                        let yr = &node.value[i * n..(i + 1) * n];
                        let gr = &node.grad[i * n..(i + 1) * n];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[i * n + j] += gr[j] - yr[j].exp() * gsum;
                        }
                    }
                }
            }
        }
        self.ran_backward = true;
        Ok(())
    }

    /// Gradient of a tensor tracked on this tape, after [`Tape::backward`].
    pub fn grad(&self, t: &Tensor) -> Result<&[f64], TensorError> {
        let id = match t.node() {
            Some((token, id)) if token == self.token => id,
            _ => return Err(TensorError::Untracked),
        };
        if !self.ran_backward {
            return Err(TensorError::NoBackward);
        }
        Ok(&self.nodes[id].grad)
    }
}

/// da += g · bᵀ where g is m×n, b is k×n, da is m×k.
fn accumulate_matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, da: &mut [f64]) {
    // (g · bᵀ)[i,t] = Σ_j g[i,j]·b[t,j]
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let br = &b[t * n..(t + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += gr[j] * br[j];
            }
            da[i * k + t] += acc;
        }
    }
}

/// db += aᵀ · g where a is m×k, g is m×n, db is k×n.
fn accumulate_matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let dr = &mut db[t * n..(t + 1) * n];
            for j in 0..n {
                dr[j] += av * gr[j];
            }
        }
    }
}

/// Accumulate `sign·g` (optionally scaled elementwise by `other`) into parent
/// `ia`, reducing to a single element when the parent is scalar-broadcast.
fn accumulate_broadcast(
    nodes: &mut [Node],
    ia: usize,
    g: &[f64],
    sign: f64,
    other: Option<&[f64]>,
) {
    let parent_len = nodes[ia].value.len();
    let ga = &mut nodes[ia].grad;
    if parent_len == g.len() {
        match other {
            None => {
                for (d, o) in ga.iter_mut().zip(g) {
                    *d += sign * o;
                }
            }
            Some(other) => {
                if other.len() == g.len() {
                    for ((d, o), w) in ga.iter_mut().zip(g).zip(other) {
                        *d += sign * o * w;
                    }
                } else {
                    // other side is scalar
                    let w = other[0];
                    for (d, o) in ga.iter_mut().zip(g) {
                        *d += sign * o * w;
                    }
                }
            }
        }
    } else {
        // parent was broadcast from a scalar: reduce
        debug_assert_eq!(parent_len, 1);
        let acc: f64 = match other {
            None => g.iter().sum(),
            Some(other) => g.iter().zip(other).map(|(o, w)| o * w).sum(),
        };
        ga[0] += sign * acc;
    }
}

fn two_muts(nodes: &mut [Node], i: usize, j: usize) -> (&mut Node, &mut Node) {
    debug_assert_ne!(i, j);
    if i < j {
        let (lo, hi) = nodes.split_at_mut(j);
        (&mut lo[i], &mut hi[0])
    } else {
        let (lo, hi) = nodes.split_at_mut(i);
        (&mut hi[0], &mut lo[j])
    }
}
