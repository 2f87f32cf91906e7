//! Token embedding, transformer blocks, the block stack and output heads.
//!
//! Parameters live in plain [`Tensor`] containers. A forward pass first binds
//! them to a [`Tape`] with [`ModelParams::bind`], which yields a mirror
//! structure of [`Var`] handles in the same declared order.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use thiserror::Error;

use crate::math;
use crate::rng::RngState;
use crate::tape::{Mask, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LnPlacement {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TimeConditioning {
    None,
    AppendScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    PerToken,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {n} exceeds context {n_ctx}")]
    SequenceTooLong { n: usize, n_ctx: usize },
    #[error("time conditioning is enabled but no time was supplied")]
    MissingTime,
    #[error("pooled head expects {expected} tokens, got {actual}")]
    PooledLength { expected: usize, actual: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Token width.
    pub d: usize,
    /// Per-head query/key/value width.
    pub k: usize,
    pub heads: usize,
    pub depth: usize,
    pub n_ctx: usize,
    pub vocab_size: usize,
    /// Output dimension of the head; equals `vocab_size` for language models.
    pub out_dim: usize,
    /// Time horizon `T`.
    pub horizon: f64,
    /// Euler steps `M`.
    pub steps: usize,
    pub lambda: f64,
    pub causal: bool,
    pub ln_placement: LnPlacement,
    pub time_conditioning: TimeConditioning,
    pub head: HeadKind,
    /// Divide the squared velocity norm by the token count.
    pub normalize_by_tokens: bool,
}

impl ModelConfig {
    /// Character-level defaults for a given vocabulary.
    pub fn char_lm(vocab_size: usize) -> Self {
        Self {
            d: 64,
            k: 16,
            heads: 4,
            depth: 2,
            n_ctx: 128,
            vocab_size,
            out_dim: vocab_size,
            horizon: 1.0,
            steps: 8,
            lambda: 1.0,
            causal: true,
            ln_placement: LnPlacement::Pre,
            time_conditioning: TimeConditioning::None,
            head: HeadKind::PerToken,
            normalize_by_tokens: false,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(String::from(m)));
        if self.d == 0 || self.k == 0 || self.heads == 0 || self.depth == 0 {
            return bad("d, k, heads and depth must be at least 1");
        }
        if self.n_ctx == 0 || self.vocab_size == 0 || self.out_dim == 0 {
            return bad("n_ctx, vocab_size and out_dim must be at least 1");
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad("horizon T must be positive and finite");
        }
        if self.steps == 0 {
            return bad("steps M must be at least 1");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHeadParams {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub w: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub heads: Vec<AttentionHeadParams>,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackParams {
    pub blocks: Vec<BlockParams>,
    /// `d × 1` direction added as `t · e` before the first block.
    pub time_embed: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingParams {
    pub token_table: Tensor,
    pub pos_table: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputParams {
    pub psi: Tensor,
    pub kind: HeadKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: EmbeddingParams,
    pub stack: StackParams,
    pub out: OutputParams,
}

impl BlockParams {
    /// Normal(0, 0.02) matrices, zero biases, unit gains. The output
    /// projections of both residual branches are further scaled by
    /// `1/√(2D)`.
    pub fn init(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let (d, k) = (cfg.d, cfg.k);
        let resid = INIT_STD / math::sqrt(2.0 * cfg.depth as f64);
        let heads = (0..cfg.heads)
            .map(|_| AttentionHeadParams {
                q: Tensor::randn(k, d, INIT_STD, rng),
                k: Tensor::randn(k, d, INIT_STD, rng),
                v: Tensor::randn(k, d, INIT_STD, rng),
                w: Tensor::randn(d, k, resid, rng),
            })
            .collect();
        Self {
            heads,
            mlp_w1: Tensor::randn(4 * d, d, INIT_STD, rng),
            mlp_b1: Tensor::zeros(4 * d, 1),
            mlp_w2: Tensor::randn(d, 4 * d, resid, rng),
            mlp_b2: Tensor::zeros(d, 1),
            ln1_gain: Tensor::filled(d, 1, 1.0),
            ln1_bias: Tensor::zeros(d, 1),
            ln2_gain: Tensor::filled(d, 1, 1.0),
            ln2_bias: Tensor::zeros(d, 1),
        }
    }

    /// Both residual branches output zero, so the block is the identity
    /// under pre-LN placement.
    pub fn zero_branches(&mut self) {
        for h in &mut self.heads {
            h.w.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.mlp_w2.data_mut().iter_mut().for_each(|x| *x = 0.0);
        self.mlp_b2.data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut RngState) -> Self {
        let embed = EmbeddingParams {
            token_table: Tensor::randn(cfg.d, cfg.vocab_size, INIT_STD, rng),
            pos_table: Tensor::randn(cfg.d, cfg.n_ctx, INIT_STD, rng),
        };
        let blocks = (0..cfg.depth).map(|_| BlockParams::init(cfg, rng)).collect();
        let time_embed = match cfg.time_conditioning {
            TimeConditioning::None => None,
            TimeConditioning::AppendScalar => Some(Tensor::randn(cfg.d, 1, INIT_STD, rng)),
        };
        let psi_cols = match cfg.head {
            HeadKind::PerToken => cfg.d,
            HeadKind::Pooled => cfg.d * cfg.n_ctx,
        };
        let out = OutputParams {
            psi: Tensor::randn(cfg.out_dim, psi_cols, INIT_STD, rng),
            kind: cfg.head,
        };
        Self {
            embed,
            stack: StackParams { blocks, time_embed },
            out,
        }
    }

    /// All parameters in declared order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embed.token_table, &self.embed.pos_table];
        for b in &self.stack.blocks {
            for h in &b.heads {
                v.extend([&h.q, &h.k, &h.v, &h.w]);
            }
            v.extend([
                &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2, &b.ln1_gain, &b.ln1_bias, &b.ln2_gain,
                &b.ln2_bias,
            ]);
        }
        if let Some(e) = &self.stack.time_embed {
            v.push(e);
        }
        v.push(&self.out.psi);
        v
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.embed.token_table, &mut self.embed.pos_table];
        for b in &mut self.stack.blocks {
            for h in &mut b.heads {
                v.extend([&mut h.q, &mut h.k, &mut h.v, &mut h.w]);
            }
            v.extend([
                &mut b.mlp_w1,
                &mut b.mlp_b1,
                &mut b.mlp_w2,
                &mut b.mlp_b2,
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
            ]);
        }
        if let Some(e) = &mut self.stack.time_embed {
            v.push(e);
        }
        v.push(&mut self.out.psi);
        v
    }

    /// Stable names matching [`ModelParams::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut v = vec![String::from("embed.token"), String::from("embed.pos")];
        for (i, b) in self.stack.blocks.iter().enumerate() {
            for h in 0..b.heads.len() {
                for m in ["q", "k", "v", "w"] {
                    v.push(format!("block{i}.head{h}.{m}"));
                }
            }
            for m in ["mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"] {
                v.push(format!("block{i}.{m}"));
            }
        }
        if self.stack.time_embed.is_some() {
            v.push(String::from("stack.time_embed"));
        }
        v.push(String::from("out.psi"));
        v
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let embed = BoundEmbedding {
            token_table: tape.leaf(&self.embed.token_table),
            pos_table: tape.leaf(&self.embed.pos_table),
        };
        let blocks = self.stack.blocks.iter().map(|b| bind_block(b, tape)).collect();
        let time_embed = self.stack.time_embed.as_ref().map(|e| tape.leaf(e));
        let out = BoundOutput {
            psi: tape.leaf(&self.out.psi),
            kind: self.out.kind,
        };
        BoundModel {
            embed,
            stack: BoundStack { blocks, time_embed },
            out,
        }
    }
}

/// Binds a block's parameters as tape leaves.
pub fn bind_block(b: &BlockParams, tape: &mut Tape) -> BoundBlock {
    BoundBlock {
        heads: b
            .heads
            .iter()
            .map(|h| BoundHead {
                q: tape.leaf(&h.q),
                k: tape.leaf(&h.k),
                v: tape.leaf(&h.v),
                w: tape.leaf(&h.w),
            })
            .collect(),
        mlp_w1: tape.leaf(&b.mlp_w1),
        mlp_b1: tape.leaf(&b.mlp_b1),
        mlp_w2: tape.leaf(&b.mlp_w2),
        mlp_b2: tape.leaf(&b.mlp_b2),
        ln1_gain: tape.leaf(&b.ln1_gain),
        ln1_bias: tape.leaf(&b.ln1_bias),
        ln2_gain: tape.leaf(&b.ln2_gain),
        ln2_bias: tape.leaf(&b.ln2_bias),
    }
}

/// Binds a whole stack.
pub fn bind_stack(s: &StackParams, tape: &mut Tape) -> BoundStack {
    BoundStack {
        blocks: s.blocks.iter().map(|b| bind_block(b, tape)).collect(),
        time_embed: s.time_embed.as_ref().map(|e| tape.leaf(e)),
    }
}

#[derive(Debug, Clone)]
pub struct BoundHead {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub w: Var,
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub heads: Vec<BoundHead>,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
}

#[derive(Debug, Clone)]
pub struct BoundStack {
    pub blocks: Vec<BoundBlock>,
    pub time_embed: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundEmbedding {
    pub token_table: Var,
    pub pos_table: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundOutput {
    pub psi: Var,
    pub kind: HeadKind,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub embed: BoundEmbedding,
    pub stack: BoundStack,
    pub out: BoundOutput,
}

impl BoundModel {
    /// Handles in the order of [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = vec![self.embed.token_table, self.embed.pos_table];
        for b in &self.stack.blocks {
            for h in &b.heads {
                v.extend([h.q, h.k, h.v, h.w]);
            }
            v.extend([
                b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2, b.ln1_gain, b.ln1_bias, b.ln2_gain, b.ln2_bias,
            ]);
        }
        v.extend(self.stack.time_embed);
        v.push(self.out.psi);
        v
    }
}

/// Architecture switches shared by every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockOptions {
    pub causal: bool,
    pub ln: LnPlacement,
}

impl From<&ModelConfig> for BlockOptions {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            causal: cfg.causal,
            ln: cfg.ln_placement,
        }
    }
}

/// Column `j` is `token_table[:, tokens[j]] + pos_table[:, j]`.
pub fn embed(tape: &mut Tape, e: &BoundEmbedding, tokens: &[usize]) -> Result<Var, ModelError> {
    let vocab = tape.shape(e.token_table).cols;
    let n_ctx = tape.shape(e.pos_table).cols;
    if let Some(&id) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(ModelError::TokenOutOfRange { id, vocab });
    }
    if tokens.len() > n_ctx {
        return Err(ModelError::SequenceTooLong {
            n: tokens.len(),
            n_ctx,
        });
    }
    let tok = tape.gather_cols(e.token_table, tokens)?;
    let pos = tape.slice_cols(e.pos_table, 0, tokens.len())?;
    Ok(tape.add(tok, pos)?)
}

fn attention_sum(tape: &mut Tape, xn: Var, b: &BoundBlock, causal: bool) -> Result<Var, ModelError> {
    let n = tape.shape(xn).cols;
    let mask = causal.then(|| Mask::causal(n));
    let mut acc: Option<Var> = None;
    for h in &b.heads {
        let kdim = tape.shape(h.q).rows;
        let qx = tape.matmul(h.q, xn)?;
        let kx = tape.matmul(h.k, xn)?;
        let s = tape.gemm(kx, true, qx, false, 1.0 / math::sqrt(kdim as f64))?;
        let a = tape.softmax_cols(s, mask.as_ref())?;
        let vx = tape.matmul(h.v, xn)?;
        let va = tape.matmul(vx, a)?;
        let o = tape.matmul(h.w, va)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, o)?,
            None => o,
        });
    }
    Ok(acc.expect("at least one head"))
}

/// Multi-head self-attention with its skip connection.
///
/// Pre-LN: `x + Σ_h Wʰ Vʰ x̂ softmax(...)` with `x̂ = LN₁(x)`.
/// Post-LN: `LN₁(x + Σ_h Wʰ Vʰ x softmax(...))`.
pub fn mhsa(tape: &mut Tape, x: Var, b: &BoundBlock, opts: BlockOptions) -> Result<Var, ModelError> {
    match opts.ln {
        LnPlacement::Pre => {
            let xn = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
            let att = attention_sum(tape, xn, b, opts.causal)?;
            Ok(tape.add(x, att)?)
        }
        LnPlacement::Post => {
            let att = attention_sum(tape, x, b, opts.causal)?;
            let s = tape.add(x, att)?;
            Ok(tape.layer_norm(s, b.ln1_gain, b.ln1_bias, LN_EPS)?)
        }
    }
}

fn mlp(tape: &mut Tape, u: Var, b: &BoundBlock) -> Result<Var, ModelError> {
    let h = tape.matmul(b.mlp_w1, u)?;
    let h = tape.add_col_broadcast(h, b.mlp_b1)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(b.mlp_w2, h)?;
    Ok(tape.add_col_broadcast(o, b.mlp_b2)?)
}

/// Attention followed by the per-token MLP, each with a skip connection.
pub fn block_forward(tape: &mut Tape, x: Var, b: &BoundBlock, opts: BlockOptions) -> Result<Var, ModelError> {
    let u = mhsa(tape, x, b, opts)?;
    match opts.ln {
        LnPlacement::Pre => {
            let un = tape.layer_norm(u, b.ln2_gain, b.ln2_bias, LN_EPS)?;
            let m = mlp(tape, un, b)?;
            Ok(tape.add(u, m)?)
        }
        LnPlacement::Post => {
            let m = mlp(tape, u, b)?;
            let s = tape.add(u, m)?;
            Ok(tape.layer_norm(s, b.ln2_gain, b.ln2_bias, LN_EPS)?)
        }
    }
}

/// `f_D ∘ … ∘ f_1`, preceded by `x + t·e` when time conditioning is on.
/// Without time conditioning `t` is ignored.
pub fn stack_forward(
    tape: &mut Tape,
    x: Var,
    s: &BoundStack,
    opts: BlockOptions,
    t: Option<f64>,
) -> Result<Var, ModelError> {
    let mut h = match s.time_embed {
        Some(e) => {
            let t = t.ok_or(ModelError::MissingTime)?;
            let te = tape.scale(e, t)?;
            tape.add_col_broadcast(x, te)?
        }
        None => x,
    };
    for b in &s.blocks {
        h = block_forward(tape, h, b, opts)?;
    }
    Ok(h)
}

/// Per-token: column `j` is `ψ xⱼ`. Pooled: a single column `ψ vec(X)`.
pub fn output_head(tape: &mut Tape, x: Var, out: &BoundOutput) -> Result<Var, ModelError> {
    match out.kind {
        HeadKind::PerToken => Ok(tape.matmul(out.psi, x)?),
        HeadKind::Pooled => {
            let s = tape.shape(x);
            let want = tape.shape(out.psi).cols;
            if s.len() != want {
                return Err(ModelError::PooledLength {
                    expected: want / s.rows.max(1),
                    actual: s.cols,
                });
            }
            let v = tape.vec_cols(x)?;
            Ok(tape.matmul(out.psi, v)?)
        }
    }
}
