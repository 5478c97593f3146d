//! Wengert-list reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value. Nodes whose inputs
//! all lack `requires_grad` are stored as constants and carry no backward
//! closure. `backward` walks the list once in reverse.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScalarMul {
        a: Var,
        s: f64,
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Sum {
        a: Var,
    },
    GatherRows {
        a: Var,
        rows: Vec<usize>,
        width: usize,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<f64>,
        count: usize,
    },
    L1Masked {
        pred: Var,
        target: Var,
        mask: Vec<f64>,
        denom: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax_lastdim",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::GatherRows { .. } => "gather_rows",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1Masked { .. } => "l1_masked",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Which operand (if any) is repeated along leading axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Rhs,
    Lhs,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        return Ok((a.to_vec(), Broadcast::None));
    }
    if b.len() < a.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Broadcast::Rhs));
    }
    if a.len() < b.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Broadcast::Lhs));
    }
    Err(Error::shape(op, format!("{:?} vs {:?}", a, b)))
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected rank-2, got {:?}", s))),
    }
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => Err(Error::shape(
            op,
            format!("needs a non-empty last axis, got {:?}", t.shape()),
        )),
    }
}

/// `a[m,k] @ b[k,n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] @ b[n,k]^T`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]^T @ b[k,n]`
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sums `g` (shaped like the broadcast output) back onto an operand of `len` values.
fn reduce_to(g: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for chunk in g.chunks(len) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. Its `requires_grad` flag decides whether gradients reach it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Name of the primitive that produced `v`; `"leaf"` for leaves and
    /// for results that were not recorded because no input needed a gradient.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, shape: &[usize], data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(&[m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    fn elementwise2(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let (shape, mode) = broadcast(name, self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out = match mode {
            Broadcast::None => av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Rhs => av
                .chunks(bv.len())
                .flat_map(|c| c.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>())
                .collect(),
            Broadcast::Lhs => bv
                .chunks(av.len())
                .flat_map(|c| av.iter().zip(c).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>())
                .collect(),
        };
        Ok((shape, out))
    }

    /// Elementwise sum; the lower-rank operand may repeat along leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise2("add", a, b, |x, y| x + y)?;
        self.push(&shape, out, Op::Add { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise2("mul", a, b, |x, y| x * y)?;
        self.push(&shape, out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::ScalarMul { a, s }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let out = self.value(a).data().to_vec();
        self.push(shape, out, Op::Reshape { a }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = dims2("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        self.push(&[cols, rows], out, Op::Transpose { a, rows, cols }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Gelu { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Relu { a }, &[a])
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta` (both `[d]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = last_dim("layer_norm", self.value(x))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (xs, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            &shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let d = last_dim("softmax_lastdim", self.value(a))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let shape = self.shape(a).to_vec();
        self.push(&shape, out, Op::Softmax { a }, &[a])
    }

    /// Mean over all elements, giving a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(&[], vec![m], Op::Mean { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(&[], vec![s], Op::Sum { a }, &[a])
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, width) = dims2("gather_rows", self.value(a))?;
        if let Some(bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {} out of range for {:?}", bad, self.shape(a)),
            ));
        }
        let src = self.value(a).data();
        let out: Vec<f64> = rows
            .iter()
            .flat_map(|&i| src[i * width..(i + 1) * width].iter().copied())
            .collect();
        let op = Op::GatherRows {
            a,
            rows: rows.to_vec(),
            width,
        };
        self.push(&[rows.len(), width], out, op, &[a])
    }

    /// Flat gather: `out[i] = a.flat[index[i]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let n = self.value(a).numel();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output {:?}", index.len(), shape),
            ));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {} out of range for {} elements", bad, n),
            ));
        }
        let src = self.value(a).data();
        let out = index.iter().map(|&i| src[i]).collect();
        self.push(
            shape,
            out,
            Op::Gather {
                a,
                index: index.to_vec(),
            },
            &[a],
        )
    }

    /// Mean negative log-softmax over rows whose label is not `ignore_index`.
    /// Returns 0 (with zero gradient) when every row is ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let (n, c) = dims2("cross_entropy", self.value(logits))?;
        if n == 0 || targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {:?} with {} targets",
                    self.shape(logits),
                    targets.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c && t != ignore_index) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..n {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if targets[r] != ignore_index {
                total += lse - row[targets[r]];
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore: ignore_index,
            probs,
            count,
        };
        self.push(&[], vec![loss], op, &[logits])
    }

    /// `sum(|pred - target| * mask) / max(sum(mask), 1)`, with `mask` in {0,1}.
    pub fn l1_masked(&mut self, pred: Var, target: Var, mask: &Tensor) -> Result<Var> {
        let (ps, ts) = (self.shape(pred), self.shape(target));
        if ps != ts || ps != mask.shape() {
            return Err(Error::shape(
                "l1_masked",
                format!("pred {:?}, target {:?}, mask {:?}", ps, ts, mask.shape()),
            ));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument(
                "l1_masked: mask values must be 0 or 1".into(),
            ));
        }
        let denom = mask.data().iter().sum::<f64>().max(1.0);
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .zip(mask.data())
            .map(|((p, t), m)| if *m == 1.0 { (p - t).abs() } else { 0.0 })
            .sum();
        let op = Op::L1Masked {
            pred,
            target,
            mask: mask.data().to_vec(),
            denom,
        };
        self.push(&[], vec![total / denom], op, &[pred, target])
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: node.op.name() });
            }
            let contributions = self.vjp(i, &g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            for (input, gi) in contributions {
                if self.requires_grad(input) {
                    accumulate(&mut grads[input.0], gi);
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    out.push((*a, matmul_nt(g, bv, *m, *n, *k)));
                }
                if self.requires_grad(*b) {
                    out.push((*b, matmul_tn(av, g, *m, *k, *n)));
                }
                out
            }
            Op::Add { a, b } => {
                let (la, lb) = (self.value(*a).numel(), self.value(*b).numel());
                vec![(*a, reduce_to(g, la)), (*b, reduce_to(g, lb))]
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(j, gv)| gv * bv[j % bv.len()])
                    .collect();
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(j, gv)| gv * av[j % av.len()])
                    .collect();
                vec![
                    (*a, reduce_to(&ga, av.len())),
                    (*b, reduce_to(&gb, bv.len())),
                ]
            }
            Op::ScalarMul { a, s } => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Reshape { a } => vec![(*a, g.to_vec())],
            Op::Transpose { a, rows, cols } => {
                // g is [cols, rows]
                let mut out = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        out[r * cols + c] = g[c * rows + r];
                    }
                }
                vec![(*a, out)]
            }
            Op::Gelu { a } => {
                let x = self.value(*a).data();
                vec![(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                )]
            }
            Op::Relu { a } => {
                let x = self.value(*a).data();
                vec![(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                )]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = rs * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap_or(&1);
                let mut out = vec![0.0; g.len()];
                for ((orow, yrow), grow) in out.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        orow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                vec![(*a, out)]
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0]; n])]
            }
            Op::GatherRows { a, rows, width } => {
                let mut out = vec![0.0; self.value(*a).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..*width {
                        out[r * width + j] += g[k * width + j];
                    }
                }
                vec![(*a, out)]
            }
            Op::Gather { a, index } => {
                let mut out = vec![0.0; self.value(*a).numel()];
                for (k, &src) in index.iter().enumerate() {
                    out[src] += g[k];
                }
                vec![(*a, out)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let c = self.shape(*logits)[1];
                let mut out = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            out[r * c + j] = (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
                vec![(*logits, out)]
            }
            Op::L1Masked {
                pred,
                target,
                mask,
                denom,
            } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = g[0] / denom;
                let gp: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .zip(mask)
                    .map(|((pv, tv), m)| {
                        if *m == 1.0 {
                            sign(pv - tv) * scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let gt = gp.iter().map(|v| -v).collect();
                vec![(*pred, gp), (*target, gt)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn param(shape: &[usize], data: &[f64]) -> Tensor {
        t(shape, data).with_requires_grad(true)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax_lastdim(a).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1]));
        let y = tape.gelu(a).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn records_only_when_grad_needed() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let p = tape.leaf(param(&[2], &[1.0, 2.0]));
        let y0 = tape.add(c, c).unwrap();
        let y1 = tape.add(c, p).unwrap();
        assert_eq!(tape.op_name(y0), "leaf");
        assert_eq!(tape.op_name(y1), "add");
        assert!(!tape.requires_grad(y0));
        assert!(tape.requires_grad(y1));
    }

    #[test]
    fn broadcasting_only_on_leading_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let ok = tape.constant(Tensor::full(&[3], 1.0));
        let bad = tape.constant(Tensor::full(&[2], 1.0));
        let y = tape.add(a, ok).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0; 6]);
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1], 1e300));
        let err = tape.mul(a, a).unwrap_err();
        assert!(err.is_non_finite());
        assert!(err.to_string().contains("mul"));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4]));
        let y = tape.cross_entropy(l, &[0, 3], usize::MAX).unwrap();
        assert!((tape.value(y).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_large_margin_near_zero() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 3], &[100.0, 0.0, 0.0]));
        let y = tape.cross_entropy(l, &[0], usize::MAX).unwrap();
        assert!(tape.value(y).item().unwrap() < 1e-40);
    }

    #[test]
    fn cross_entropy_hand_values() {
        // row 0: -log(e^2/(e^1+e^2)); row 1: -log(e^3/(e^3+e^0))
        let mut tape = Tape::new();
        let l = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 0.0]));
        let y = tape.cross_entropy(l, &[1, 0], usize::MAX).unwrap();
        let r0 = (1f64.exp() + 2f64.exp()).ln() - 2.0;
        let r1 = (3f64.exp() + 1.0).ln() - 3.0;
        assert!((tape.value(y).item().unwrap() - 0.5 * (r0 + r1)).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_all_ignored() {
        let mut tape = Tape::new();
        let l = tape.leaf(param(&[2, 2], &[1.0, 2.0, 3.0, 0.0]));
        let y = tape.cross_entropy(l, &[7, 7], 7).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 0.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(l).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            tape.cross_entropy(l, &[2], usize::MAX),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn l1_masked_cases() {
        let mut tape = Tape::new();
        let p = tape.leaf(param(&[2], &[1.0, 2.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        let y = tape.l1_masked(p, z, &t(&[2], &[1.0, 0.0])).unwrap();
        assert_eq!(tape.value(y).item().unwrap(), 1.0);
        let same = tape.l1_masked(p, p, &t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(tape.value(same).item().unwrap(), 0.0);
        let empty = tape.l1_masked(p, z, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(tape.value(empty).item().unwrap(), 0.0);
        assert!(tape.l1_masked(p, z, &t(&[2], &[0.5, 0.0])).is_err());
        assert!(tape.l1_masked(p, z, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn l1_masked_subgradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(param(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let target = tape.constant(t(&[4], &[0.0, 0.0, 0.5, 0.0]));
        let mask = t(&[4], &[1.0, 1.0, 1.0, 0.0]);
        let y = tape.l1_masked(p, target, &mask).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0 / 3.0, -1.0 / 3.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[1], &[3.0]));
        let xx = tape.mul(x, x).unwrap();
        let y = tape.sum(xx).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(param(&[2], &[3.0, 1.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.5, 10.0, 2.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        for row in tape.value(y).data().chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 4]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-10).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let mut tape = Tape::new();
        let a = tape.leaf(param(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.gather_rows(a, &[1, 1, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
