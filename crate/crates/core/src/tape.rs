//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes only refer to earlier nodes, so the
//! tape is topologically ordered by construction and [`Tape::backward`] is a
//! single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{gemm, Shape, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean matrix; `true` marks an entry that takes part in the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self, TensorError> {
        if allowed.len() != rows * cols {
            return Err(TensorError::BadLength {
                op: "mask",
                expected: rows * cols,
                actual: allowed.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            allowed,
        })
    }

    /// Key `r` is visible to query `c` iff `r <= c`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for r in 0..n {
            for c in r..n {
                allowed[r * n + c] = true;
            }
        }
        Self {
            rows: n,
            cols: n,
            allowed,
        }
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.rows, self.cols)
    }

    pub fn is_allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }
}

/// Vector-Jacobian product for [`Tape::custom_unary`]: receives the input
/// value, the output value and the upstream gradient, returns the gradient
/// with respect to the input.
pub type VjpFn = fn(&[f64], &[f64], &[f64]) -> Vec<f64>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        alpha: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddColBroadcast(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    FrobSq(Var),
    SumRows(Var),
    SumCols(Var),
    GatherCols {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    VecCols(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    Custom {
        input: Var,
        vjp: VjpFn,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::ForeignNode {
            node: v.0,
            len: self.nodes.len(),
        })
    }

    fn shape_of(&self, v: Var) -> Result<Shape, TensorError> {
        self.node(v).map(|n| Shape::new(n.rows, n.cols))
    }

    /// Records a copy of `t`. Gradients flow to every leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var, TensorError> {
        if value.len() != rows * cols {
            return Err(TensorError::BadLength {
                op: "leaf",
                expected: rows * cols,
                actual: value.len(),
            });
        }
        Ok(self.push(rows, cols, value, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        let n = &self.nodes[v.0];
        Shape::new(n.rows, n.cols)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// `alpha · op(a) · op(b)` where `op` optionally transposes.
    pub fn gemm(&mut self, a: Var, ta: bool, b: Var, tb: bool, alpha: f64) -> Result<Var, TensorError> {
        if ta && tb {
            // Never needed; keeps the backward rules to three cases.
            let sb = self.shape_of(b)?;
            return Err(TensorError::ShapeMismatch {
                op: "gemm(transpose both)",
                left: self.shape_of(a)?,
                right: sb,
            });
        }
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        let (m, k) = if ta { (sa.cols, sa.rows) } else { (sa.rows, sa.cols) };
        let (k2, n) = if tb { (sb.cols, sb.rows) } else { (sb.rows, sb.cols) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            alpha,
            &self.nodes[a.0].value,
            ta,
            &self.nodes[b.0].value,
            tb,
            0.0,
            &mut out,
        );
        Ok(self.push(m, n, out, Op::MatMul { a, b, ta, tb, alpha }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.gemm(a, false, b, false, 1.0)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.gemm(a, true, b, false, 1.0)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.gemm(a, false, b, true, 1.0)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape, TensorError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let s = self.same_shape("add", a, b)?;
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        Ok(self.push(s.rows, s.cols, out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let s = self.same_shape("sub", a, b)?;
        let out = zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        Ok(self.push(s.rows, s.cols, out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let sh = self.shape_of(a)?;
        let out = self.nodes[a.0].value.iter().map(|x| s * x).collect();
        Ok(self.push(sh.rows, sh.cols, out, Op::Scale(a, s)))
    }

    /// Adds the `r × 1` column `b` to every column of the `r × c` matrix `a`.
    pub fn add_col_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape_of(a)?;
        let sb = self.shape_of(b)?;
        if sb != Shape::new(sa.rows, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "add_col_broadcast",
                left: sa,
                right: sb,
            });
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = av.clone();
        for r in 0..sa.rows {
            for x in &mut out[r * sa.cols..(r + 1) * sa.cols] {
                *x += bv[r];
            }
        }
        Ok(self.push(sa.rows, sa.cols, out, Op::AddColBroadcast(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.tensor_checked(a)?.transpose();
        let (r, c) = (t.rows(), t.cols());
        Ok(self.push(r, c, t.into_data(), Op::Transpose(a)))
    }

    fn tensor_checked(&self, a: Var) -> Result<Tensor, TensorError> {
        self.node(a)?;
        Ok(self.tensor(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape_of(a)?;
        let out = self.nodes[a.0].value.iter().map(|&x| gelu(x)).collect();
        Ok(self.push(s.rows, s.cols, out, Op::Gelu(a)))
    }

    /// Softmax down each column. Masked entries are exactly zero.
    pub fn softmax_cols(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var, TensorError> {
        let s = self.shape_of(a)?;
        if let Some(m) = mask {
            if m.shape() != s {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cols",
                    left: s,
                    right: m.shape(),
                });
            }
        }
        let out = softmax_cols_raw(&self.nodes[a.0].value, s.rows, s.cols, mask)?;
        Ok(self.push(s.rows, s.cols, out, Op::Softmax(a)))
    }

    /// Normalizes each column to zero mean and unit variance, then applies
    /// the per-row `gain` and `bias` (both `rows × 1`).
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let s = self.shape_of(a)?;
        for p in [gain, bias] {
            let sp = self.shape_of(p)?;
            if sp != Shape::new(s.rows, 1) {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: s,
                    right: sp,
                });
            }
        }
        let (d, n) = (s.rows, s.cols);
        let x = &self.nodes[a.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let mut xhat = vec![0.0; d * n];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; d * n];
        for c in 0..n {
            let mut mean = 0.0;
            for r in 0..d {
                mean += x[r * n + c];
            }
            mean /= d as f64;
            let mut var = 0.0;
            for r in 0..d {
                let z = x[r * n + c] - mean;
                var += z * z;
            }
            var /= d as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[c] = is;
            for r in 0..d {
                let h = (x[r * n + c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = g[r] * h + b[r];
            }
        }
        Ok(self.push(
            d,
            n,
            out,
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.node(a)?;
        let s = self.nodes[a.0].value.iter().sum();
        Ok(self.push(1, 1, vec![s], Op::SumAll(a)))
    }

    /// `Σᵢⱼ aᵢⱼ²` as a `1 × 1` node.
    pub fn frobenius_norm_sq(&mut self, a: Var) -> Result<Var, TensorError> {
        self.node(a)?;
        let s = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        Ok(self.push(1, 1, vec![s], Op::FrobSq(a)))
    }

    /// Sums across each row: `r × c → r × 1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape_of(a)?;
        let v = &self.nodes[a.0].value;
        let out = (0..s.rows)
            .map(|r| v[r * s.cols..(r + 1) * s.cols].iter().sum())
            .collect();
        Ok(self.push(s.rows, 1, out, Op::SumRows(a)))
    }

    /// Sums down each column: `r × c → 1 × c`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.shape_of(a)?;
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; s.cols];
        for r in 0..s.rows {
            for (o, x) in out.iter_mut().zip(&v[r * s.cols..(r + 1) * s.cols]) {
                *o += x;
            }
        }
        Ok(self.push(1, s.cols, out, Op::SumCols(a)))
    }

    /// Column `j` of the result is column `ids[j]` of `table`.
    pub fn gather_cols(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape_of(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= s.cols) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                bound: s.cols,
            });
        }
        let n = ids.len();
        let t = &self.nodes[table.0].value;
        let mut out = vec![0.0; s.rows * n];
        for r in 0..s.rows {
            for (j, &id) in ids.iter().enumerate() {
                out[r * n + j] = t[r * s.cols + id];
            }
        }
        Ok(self.push(
            s.rows,
            n,
            out,
            Op::GatherCols {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Columns `start .. start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let s = self.shape_of(a)?;
        if start + len > s.cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: s.cols,
            });
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(s.rows * len);
        for r in 0..s.rows {
            out.extend_from_slice(&v[r * s.cols + start..r * s.cols + start + len]);
        }
        Ok(self.push(s.rows, len, out, Op::SliceCols { a, start }))
    }

    /// Column-stacking vectorization `d × n → dn × 1`.
    pub fn vec_cols(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = self.tensor_checked(a)?.vec_cols();
        let len = t.len();
        Ok(self.push(len, 1, t.into_data(), Op::VecCols(a)))
    }

    /// Mean over columns of `logsumexp(column) − column[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let s = self.shape_of(logits)?;
        if targets.len() != s.cols {
            return Err(TensorError::BadLength {
                op: "cross_entropy",
                expected: s.cols,
                actual: targets.len(),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s.rows) {
            return Err(TensorError::InvalidTarget {
                id: bad,
                classes: s.rows,
            });
        }
        let z = &self.nodes[logits.0].value;
        let probs = softmax_cols_raw(z, s.rows, s.cols, None)?;
        let mut loss = 0.0;
        for (j, &t) in targets.iter().enumerate() {
            loss += logsumexp_col(z, s.rows, s.cols, j) - z[t * s.cols + j];
        }
        loss /= s.cols as f64;
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Summed over columns: `Σⱼ logsumexp(zⱼ) − ⟨yⱼ, zⱼ⟩` for target columns
    /// `yⱼ` on the probability simplex.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor) -> Result<Var, TensorError> {
        let s = self.shape_of(logits)?;
        if targets.shape() != s {
            return Err(TensorError::ShapeMismatch {
                op: "soft_cross_entropy",
                left: s,
                right: targets.shape(),
            });
        }
        let z = &self.nodes[logits.0].value;
        let y = targets.data();
        let probs = softmax_cols_raw(z, s.rows, s.cols, None)?;
        let mut loss = 0.0;
        for j in 0..s.cols {
            let lse = logsumexp_col(z, s.rows, s.cols, j);
            for r in 0..s.rows {
                loss += y[r * s.cols + j] * (lse - z[r * s.cols + j]);
            }
        }
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::SoftCrossEntropy {
                logits,
                targets: y.to_vec(),
                probs,
            },
        ))
    }

    /// `½‖pred − target‖²_F`.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var, TensorError> {
        let s = self.shape_of(pred)?;
        if target.shape() != s {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: s,
                right: target.shape(),
            });
        }
        let p = &self.nodes[pred.0].value;
        let loss = 0.5
            * p.iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
        ))
    }

    /// Elementwise map with a caller-supplied backward rule.
    pub fn custom_unary(&mut self, a: Var, f: fn(f64) -> f64, vjp: VjpFn) -> Result<Var, TensorError> {
        let s = self.shape_of(a)?;
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        Ok(self.push(s.rows, s.cols, out, Op::Custom { input: a, vjp }))
    }

    /// Reverse sweep from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let shape = self.shape_of(root)?;
        if shape != Shape::new(1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.backprop_node(i, g, lo);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], lo: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, alpha } => {
                let (m, n) = (node.rows, node.cols);
                let sa = self.shape(a);
                let k = if ta { sa.rows } else { sa.cols };
                let (av, bv) = (val(a), val(b));
                let (la, lb) = (len(a), len(b));
                match (ta, tb) {
                    (false, false) => {
                        gemm(m, n, k, alpha, g, false, bv, true, 1.0, slot(lo, a, la));
                        gemm(k, m, n, alpha, av, true, g, false, 1.0, slot(lo, b, lb));
                    }
                    (true, false) => {
                        gemm(k, n, m, alpha, bv, false, g, true, 1.0, slot(lo, a, la));
                        gemm(k, m, n, alpha, av, false, g, false, 1.0, slot(lo, b, lb));
                    }
                    (false, true) => {
                        gemm(m, n, k, alpha, g, false, bv, false, 1.0, slot(lo, a, la));
                        gemm(n, m, k, alpha, g, true, av, false, 1.0, slot(lo, b, lb));
                    }
                    (true, true) => unreachable!("rejected at construction"),
                }
            }
            &Op::Add(a, b) => {
                axpy(slot(lo, a, g.len()), 1.0, g);
                axpy(slot(lo, b, g.len()), 1.0, g);
            }
            &Op::Sub(a, b) => {
                axpy(slot(lo, a, g.len()), 1.0, g);
                axpy(slot(lo, b, g.len()), -1.0, g);
            }
            &Op::Scale(a, s) => axpy(slot(lo, a, g.len()), s, g),
            &Op::AddColBroadcast(a, b) => {
                axpy(slot(lo, a, g.len()), 1.0, g);
                let gb = slot(lo, b, node.rows);
                for (r, o) in gb.iter_mut().enumerate() {
                    *o += g[r * node.cols..(r + 1) * node.cols].iter().sum::<f64>();
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (node.rows, node.cols);
                let ga = slot(lo, a, g.len());
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] += g[i * c + j];
                    }
                }
            }
            &Op::Gelu(a) => {
                let x = val(a);
                let ga = slot(lo, a, g.len());
                for ((o, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    *o += gi * gelu_grad(xi);
                }
            }
            &Op::Softmax(a) => {
                let (r, c) = (node.rows, node.cols);
                let y = &node.value;
                let mut dots = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dots[j] += y[i * c + j] * g[i * c + j];
                    }
                }
                let ga = slot(lo, a, g.len());
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        ga[k] += y[k] * (g[k] - dots[j]);
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (d, n) = (node.rows, node.cols);
                let gv = val(*gain);
                {
                    let gg = slot(lo, *gain, d);
                    for r in 0..d {
                        for c in 0..n {
                            gg[r] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                {
                    let gb = slot(lo, *bias, d);
                    for r in 0..d {
                        gb[r] += g[r * n..(r + 1) * n].iter().sum::<f64>();
                    }
                }
                let ga = slot(lo, *a, d * n);
                let df = d as f64;
                for c in 0..n {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for r in 0..d {
                        let dh = g[r * n + c] * gv[r];
                        s1 += dh;
                        s2 += dh * xhat[r * n + c];
                    }
                    for r in 0..d {
                        let dh = g[r * n + c] * gv[r];
                        ga[r * n + c] += inv_std[c] / df * (df * dh - s1 - xhat[r * n + c] * s2);
                    }
                }
            }
            &Op::SumAll(a) => {
                slot(lo, a, len(a)).iter_mut().for_each(|o| *o += g[0]);
            }
            &Op::FrobSq(a) => {
                let x = val(a);
                let ga = slot(lo, a, x.len());
                for (o, xi) in ga.iter_mut().zip(x) {
                    *o += 2.0 * xi * g[0];
                }
            }
            &Op::SumRows(a) => {
                let c = self.shape(a).cols;
                let ga = slot(lo, a, node.rows * c);
                for (r, gr) in g.iter().enumerate() {
                    ga[r * c..(r + 1) * c].iter_mut().for_each(|o| *o += gr);
                }
            }
            &Op::SumCols(a) => {
                let sa = self.shape(a);
                let ga = slot(lo, a, sa.len());
                for r in 0..sa.rows {
                    for (o, gc) in ga[r * sa.cols..(r + 1) * sa.cols].iter_mut().zip(g) {
                        *o += gc;
                    }
                }
            }
            Op::GatherCols { table, ids } => {
                let st = self.shape(*table);
                let n = ids.len();
                let gt = slot(lo, *table, st.len());
                for r in 0..st.rows {
                    for (j, &id) in ids.iter().enumerate() {
                        gt[r * st.cols + id] += g[r * n + j];
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                let sa = self.shape(a);
                let w = node.cols;
                let ga = slot(lo, a, sa.len());
                for r in 0..sa.rows {
                    axpy(
                        &mut ga[r * sa.cols + start..r * sa.cols + start + w],
                        1.0,
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
            &Op::VecCols(a) => {
                let sa = self.shape(a);
                let ga = slot(lo, a, sa.len());
                for c in 0..sa.cols {
                    for r in 0..sa.rows {
                        ga[r * sa.cols + c] += g[c * sa.rows + r];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = self.shape(*logits);
                let w = g[0] / s.cols as f64;
                let gl = slot(lo, *logits, s.len());
                for (o, p) in gl.iter_mut().zip(probs) {
                    *o += w * p;
                }
                for (j, &t) in targets.iter().enumerate() {
                    gl[t * s.cols + j] -= w;
                }
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let s = self.shape(*logits);
                // Column sums of the targets; 1 when they lie on the simplex.
                let mut mass = vec![0.0; s.cols];
                for r in 0..s.rows {
                    for j in 0..s.cols {
                        mass[j] += targets[r * s.cols + j];
                    }
                }
                let gl = slot(lo, *logits, s.len());
                for r in 0..s.rows {
                    for j in 0..s.cols {
                        let k = r * s.cols + j;
                        gl[k] += g[0] * (mass[j] * probs[k] - targets[k]);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = val(*pred);
                let gp = slot(lo, *pred, p.len());
                for ((o, a), b) in gp.iter_mut().zip(p).zip(target) {
                    *o += g[0] * (a - b);
                }
            }
            &Op::Custom { input, vjp } => {
                let d = vjp(val(input), &node.value, g);
                axpy(slot(lo, input, d.len()), 1.0, &d);
            }
        }
    }
}

/// Gradients of a backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if `v` does not influence the root.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }

    /// Adds the gradient of `v` into `t.grad`. Calling this twice for the
    /// same sweep doubles the stored gradient.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<(), TensorError> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}

fn slot(lo: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    lo[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in dst.iter_mut().zip(x) {
        *d += a * s;
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(SQRT_2_OVER_PI * (x + GELU_C * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = math::tanh(u);
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn logsumexp_col(z: &[f64], rows: usize, cols: usize, j: usize) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for r in 0..rows {
        m = m.max(z[r * cols + j]);
    }
    let s: f64 = (0..rows).map(|r| math::exp(z[r * cols + j] - m)).sum();
    m + math::ln(s)
}

pub(crate) fn softmax_cols_raw(
    z: &[f64],
    rows: usize,
    cols: usize,
    mask: Option<&Mask>,
) -> Result<Vec<f64>, TensorError> {
    let ok = |r: usize, c: usize| mask.is_none_or(|m| m.is_allowed(r, c));
    let mut out = vec![0.0; rows * cols];
    let mut maxes = vec![f64::NEG_INFINITY; cols];
    for r in 0..rows {
        for c in 0..cols {
            if ok(r, c) {
                maxes[c] = maxes[c].max(z[r * cols + c]);
            }
        }
    }
    if let Some(c) = maxes.iter().position(|m| *m == f64::NEG_INFINITY) {
        return Err(TensorError::DegenerateMask { col: c });
    }
    let mut sums = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            if ok(r, c) {
                let e = math::exp(z[r * cols + c] - maxes[c]);
                out[r * cols + c] = e;
                sums[c] += e;
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] /= sums[c];
        }
    }
    Ok(out)
}
