//! Convex terminal losses on the final hidden state and their closed-form
//! gradients.
//!
//! Both losses compose a linear output layer `ψ` with a convex function:
//! `G(x, y) = ½‖ψx − y‖²` or `G(x, y) = Σⱼ logsumexp(ψxⱼ) − ⟨yⱼ, ψxⱼ⟩`.
//! With a per-token head the sums run over token columns; a pooled head acts
//! on `vec(X)`.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::operator_norm;
use crate::math;
use crate::tape::softmax_cols_raw;
use crate::tensor::{Tensor, TensorError};
use crate::transformer::HeadKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TerminalKind {
    Mse,
    SoftmaxCe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalLossSpec {
    kind: TerminalKind,
    head: HeadKind,
    psi: Tensor,
    l: f64,
}

impl TerminalLossSpec {
    /// Computes and caches `L = ‖ψ‖₂`.
    pub fn new(kind: TerminalKind, head: HeadKind, psi: Tensor) -> Self {
        let l = operator_norm(&psi);
        Self { kind, head, psi, l }
    }

    pub fn kind(&self) -> TerminalKind {
        self.kind
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head
    }

    pub fn psi(&self) -> &Tensor {
        &self.psi
    }

    /// Largest singular value of `ψ`.
    pub fn lipschitz(&self) -> f64 {
        self.l
    }

    /// The state in the layout `ψ` acts on: `X` itself per token, or
    /// `vec(X)` for a pooled head.
    fn columns(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let x = match self.head {
            HeadKind::PerToken => x.clone(),
            HeadKind::Pooled => x.vec_cols(),
        };
        if x.rows() != self.psi.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "terminal loss",
                left: self.psi.shape(),
                right: x.shape(),
            });
        }
        Ok(x)
    }

    fn uncolumns(&self, g: Tensor, like: &Tensor) -> Tensor {
        match self.head {
            HeadKind::PerToken => g,
            HeadKind::Pooled => {
                Tensor::unvec_cols(g.data(), like.rows(), like.cols()).expect("length preserved")
            }
        }
    }

    /// Logits `ψx` (per token) or `ψ vec(X)` (pooled).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.psi.matmul(&self.columns(x)?)
    }

    /// Model output: the logits for MSE, their column softmax for CE.
    pub fn head(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let z = self.logits(x)?;
        match self.kind {
            TerminalKind::Mse => Ok(z),
            TerminalKind::SoftmaxCe => {
                let p = softmax_cols_raw(z.data(), z.rows(), z.cols(), None)?;
                Tensor::from_vec(z.rows(), z.cols(), p)
            }
        }
    }

    pub fn value(&self, x: &Tensor, y: &Tensor) -> Result<f64, TensorError> {
        let z = self.logits(x)?;
        self.check_target(&z, y)?;
        let (c, n) = (z.rows(), z.cols());
        Ok(match self.kind {
            TerminalKind::Mse => 0.5 * z.sub(y)?.frobenius_norm_sq(),
            TerminalKind::SoftmaxCe => {
                let mut total = 0.0;
                for j in 0..n {
                    let m = (0..c).map(|r| z.get(r, j)).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + math::ln((0..c).map(|r| math::exp(z.get(r, j) - m)).sum());
                    for r in 0..c {
                        total += y.get(r, j) * (lse - z.get(r, j));
                    }
                }
                total
            }
        })
    }

    fn check_target(&self, z: &Tensor, y: &Tensor) -> Result<(), TensorError> {
        if z.shape() != y.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "terminal target",
                left: z.shape(),
                right: y.shape(),
            });
        }
        Ok(())
    }

    /// `∇ₓG(x, y)`: `ψᵀ(ψx − y)` for MSE, `ψᵀ(softmax(ψx) − y)` for CE.
    pub fn grad(&self, x: &Tensor, y: &Tensor) -> Result<Tensor, TensorError> {
        let r = self.head(x)?;
        self.check_target(&r, y)?;
        let g = self.psi.transpose().matmul(&r.sub(y)?)?;
        Ok(self.uncolumns(g, x))
    }

    /// Hessian blocks of `G` in the column layout: one `q × q` block per
    /// column, `ψᵀψ` for MSE and `ψᵀ(diag p − ppᵀ)ψ` for CE.
    pub fn hessian_blocks(&self, x: &Tensor) -> Result<Vec<Tensor>, TensorError> {
        let z = self.logits(x)?;
        let q = self.psi.cols();
        let c = self.psi.rows();
        let psi_t = self.psi.transpose();
        match self.kind {
            TerminalKind::Mse => {
                let h = psi_t.matmul(&self.psi)?;
                Ok(vec![h; z.cols()])
            }
            TerminalKind::SoftmaxCe => {
                let p = softmax_cols_raw(z.data(), c, z.cols(), None)?;
                let mut blocks = Vec::with_capacity(z.cols());
                for j in 0..z.cols() {
                    let mut s = Tensor::zeros(c, c);
                    for a in 0..c {
                        let pa = p[a * z.cols() + j];
                        for b in 0..c {
                            let pb = p[b * z.cols() + j];
                            s.set(a, b, if a == b { pa - pa * pb } else { -pa * pb });
                        }
                    }
                    let h = psi_t.matmul(&s.matmul(&self.psi)?)?;
                    debug_assert_eq!(h.shape(), crate::tensor::Shape::new(q, q));
                    blocks.push(h);
                }
                Ok(blocks)
            }
        }
    }

    /// Converts between the state layout and the column layout used by
    /// [`TerminalLossSpec::hessian_blocks`].
    pub fn to_columns(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.columns(x)
    }

    pub fn from_columns(&self, cols: Tensor, like: &Tensor) -> Tensor {
        self.uncolumns(cols, like)
    }
}
