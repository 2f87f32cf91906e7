//! Forward-Euler integration of `dX/dt = v(X, t)` with transport-cost
//! accumulation, the per-block chained comparator, and trajectory
//! diagnostics.
//!
//! The velocity of a stack `F` is its residual `v(X, t) = F(X, t) − X`, so a
//! single step of length one reproduces one application of `F`.

use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};
use crate::transformer::{
    block_forward, embed, output_head, stack_forward, BlockOptions, BoundBlock, BoundModel, BoundStack,
    ModelConfig, ModelError,
};

/// States whose Frobenius norm exceeds this are treated as divergent.
pub const DIVERGENCE_NORM: f64 = 1e8;
pub const STRAIGHTNESS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FlowError {
    #[error("integration diverged at step {step} (state norm {norm})")]
    Divergence { step: usize, norm: f64 },
    #[error("steps M = {steps} is not a multiple of depth D = {depth}")]
    StepsNotDivisible { steps: usize, depth: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for FlowError {
    fn from(e: TensorError) -> Self {
        FlowError::Model(ModelError::Tensor(e))
    }
}

/// How the hidden state is propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// One velocity field given by the whole stack, `M` Euler steps.
    Ot,
    /// One field per block, chained, `M / D` steps each.
    Node,
    /// A single application of the stack; `T`, `M` and `λ` are ignored.
    Discrete,
}

/// A velocity field appended to a tape.
pub trait VelocityField {
    fn velocity(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var, ModelError>;
}

/// Residual of the full stack.
pub struct StackField<'a> {
    pub stack: &'a BoundStack,
    pub opts: BlockOptions,
}

impl VelocityField for StackField<'_> {
    fn velocity(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var, ModelError> {
        let f = stack_forward(tape, x, self.stack, self.opts, Some(t))?;
        Ok(tape.sub(f, x)?)
    }
}

/// Residual of one block, with the stack's time direction if any.
pub struct BlockField<'a> {
    pub block: &'a BoundBlock,
    pub time_embed: Option<Var>,
    pub opts: BlockOptions,
}

impl VelocityField for BlockField<'_> {
    fn velocity(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var, ModelError> {
        let h = match self.time_embed {
            Some(e) => {
                let te = tape.scale(e, t)?;
                tape.add_col_broadcast(x, te)?
            }
            None => x,
        };
        let f = block_forward(tape, h, self.block, self.opts)?;
        Ok(tape.sub(f, x)?)
    }
}

/// Recorded values of an integration. `states` and `velocities` are empty
/// unless recording was requested.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrace {
    pub states: Vec<Tensor>,
    pub velocities: Vec<Tensor>,
    pub times: Vec<f64>,
    pub dt: f64,
    pub transport_cost: f64,
    pub terminal: Tensor,
}

/// Tape handles of an integration together with its recorded values.
#[derive(Debug, Clone)]
pub struct FlowOutput {
    pub terminal: Var,
    /// `1 × 1` transport cost `R`.
    pub cost: Var,
    pub trace: FlowTrace,
}

/// Integration parameters independent of the field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerOptions {
    pub horizon: f64,
    pub steps: usize,
    pub record: bool,
    pub normalize_by_tokens: bool,
}

impl From<&ModelConfig> for EulerOptions {
    fn from(cfg: &ModelConfig) -> Self {
        Self {
            horizon: cfg.horizon,
            steps: cfg.steps,
            record: false,
            normalize_by_tokens: cfg.normalize_by_tokens,
        }
    }
}

/// `X_{m+1} = X_m + Δt·v(X_m, t_m)` with `R = (Δt/2) Σ_m ‖v(X_m, t_m)‖²_F`.
pub fn integrate_field(
    tape: &mut Tape,
    x0: Var,
    field: &dyn VelocityField,
    opts: EulerOptions,
) -> Result<FlowOutput, FlowError> {
    assert!(opts.steps >= 1, "at least one step");
    let dt = opts.horizon / opts.steps as f64;
    let n_tokens = tape.shape(x0).cols;
    let mut x = x0;
    let mut states = Vec::new();
    let mut velocities = Vec::new();
    let mut times = Vec::with_capacity(opts.steps + 1);
    if opts.record {
        states.push(tape.tensor(x0));
    }
    let mut sum_sq: Option<Var> = None;
    for m in 0..opts.steps {
        let t = m as f64 * dt;
        times.push(t);
        let v = field.velocity(tape, x, t)?;
        let sq = tape.frobenius_norm_sq(v)?;
        sum_sq = Some(match sum_sq {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
        let step = tape.scale(v, dt)?;
        x = tape.add(x, step)?;
        check_state(tape.value(x), m + 1)?;
        if opts.record {
            velocities.push(tape.tensor(v));
            states.push(tape.tensor(x));
        }
    }
    times.push(opts.steps as f64 * dt);
    let mut factor = 0.5 * dt;
    if opts.normalize_by_tokens {
        factor /= n_tokens as f64;
    }
    let cost = tape.scale(sum_sq.expect("steps >= 1"), factor)?;
    let trace = FlowTrace {
        states,
        velocities,
        times,
        dt,
        transport_cost: tape.scalar(cost),
        terminal: tape.tensor(x),
    };
    Ok(FlowOutput {
        terminal: x,
        cost,
        trace,
    })
}

fn check_state(x: &[f64], step: usize) -> Result<(), FlowError> {
    let norm_sq: f64 = x.iter().map(|v| v * v).sum();
    let norm = math::sqrt(norm_sq);
    if !norm.is_finite() || norm > DIVERGENCE_NORM {
        return Err(FlowError::Divergence { step, norm });
    }
    Ok(())
}

/// Euler flow of the whole stack.
pub fn euler_integrate(
    tape: &mut Tape,
    x0: Var,
    stack: &BoundStack,
    cfg: &ModelConfig,
    record: bool,
) -> Result<FlowOutput, FlowError> {
    let field = StackField {
        stack,
        opts: cfg.into(),
    };
    let opts = EulerOptions {
        record,
        ..cfg.into()
    };
    integrate_field(tape, x0, &field, opts)
}

/// Chained per-block flows: block `i` starts where block `i − 1` ended and
/// runs `M / D` steps of size `T·D/M` over its own `[0, T]`. Costs add up.
/// With `D = 1` this is [`euler_integrate`].
pub fn node_block_integrate(
    tape: &mut Tape,
    x0: Var,
    stack: &BoundStack,
    cfg: &ModelConfig,
    record: bool,
) -> Result<FlowOutput, FlowError> {
    let depth = stack.blocks.len();
    if !cfg.steps.is_multiple_of(depth) {
        return Err(FlowError::StepsNotDivisible {
            steps: cfg.steps,
            depth,
        });
    }
    let opts = EulerOptions {
        horizon: cfg.horizon,
        steps: cfg.steps / depth,
        record,
        normalize_by_tokens: cfg.normalize_by_tokens,
    };
    let mut x = x0;
    let mut cost: Option<Var> = None;
    let mut trace: Option<FlowTrace> = None;
    for (i, block) in stack.blocks.iter().enumerate() {
        let field = BlockField {
            block,
            time_embed: stack.time_embed,
            opts: cfg.into(),
        };
        let out = integrate_field(tape, x, &field, opts).map_err(|e| match e {
            FlowError::Divergence { step, norm } => FlowError::Divergence {
                step: i * opts.steps + step,
                norm,
            },
            other => other,
        })?;
        x = out.terminal;
        cost = Some(match cost {
            Some(c) => tape.add(c, out.cost)?,
            None => out.cost,
        });
        trace = Some(match trace {
            None => out.trace,
            Some(mut acc) => {
                let offset = i as f64 * cfg.horizon;
                acc.times.pop();
                acc.times.extend(out.trace.times.iter().map(|t| t + offset));
                if record {
                    acc.states.extend(out.trace.states.into_iter().skip(1));
                    acc.velocities.extend(out.trace.velocities);
                }
                acc.transport_cost += out.trace.transport_cost;
                acc.terminal = out.trace.terminal;
                acc
            }
        });
    }
    let cost = cost.expect("depth >= 1");
    let mut trace = trace.expect("depth >= 1");
    trace.transport_cost = tape.scalar(cost);
    Ok(FlowOutput {
        terminal: x,
        cost,
        trace,
    })
}

/// `X₀ + v(X₀)`, one application of the stack written through the residual
/// so it matches one Euler step of unit length bit for bit. The cost is the
/// transport cost of that step, `½‖v‖²`, reported as a diagnostic.
pub fn discrete_forward(tape: &mut Tape, x0: Var, stack: &BoundStack, cfg: &ModelConfig) -> Result<FlowOutput, FlowError> {
    let opts = EulerOptions {
        horizon: 1.0,
        steps: 1,
        record: false,
        normalize_by_tokens: cfg.normalize_by_tokens,
    };
    let field = StackField {
        stack,
        opts: cfg.into(),
    };
    integrate_field(tape, x0, &field, opts)
}

pub fn propagate(
    tape: &mut Tape,
    x0: Var,
    stack: &BoundStack,
    cfg: &ModelConfig,
    mode: Mode,
    record: bool,
) -> Result<FlowOutput, FlowError> {
    match mode {
        Mode::Ot => euler_integrate(tape, x0, stack, cfg, record),
        Mode::Node => node_block_integrate(tape, x0, stack, cfg, record),
        Mode::Discrete => discrete_forward(tape, x0, stack, cfg),
    }
}

/// One next-token training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Tape handles and values of a batch objective.
#[derive(Debug, Clone)]
pub struct Objective {
    /// Batch mean of `G + λR`.
    pub loss: Var,
    /// Batch mean of the terminal loss alone.
    pub terminal_loss: f64,
    /// Batch mean of the transport cost.
    pub transport_cost: f64,
}

/// Next-token logits of one sequence.
pub fn forward_logits(
    tape: &mut Tape,
    model: &BoundModel,
    cfg: &ModelConfig,
    mode: Mode,
    tokens: &[usize],
) -> Result<(Var, FlowOutput), FlowError> {
    let x0 = embed(tape, &model.embed, tokens)?;
    let flow = propagate(tape, x0, &model.stack, cfg, mode, false)?;
    let logits = output_head(tape, flow.terminal, &model.out)?;
    Ok((logits, flow))
}

/// Mean over the batch of `CE(head(X_M), targets) + λ·R`. The penalty is
/// left off the tape when `λ = 0` or in discrete mode.
pub fn training_objective(
    tape: &mut Tape,
    model: &BoundModel,
    cfg: &ModelConfig,
    mode: Mode,
    batch: &[TokenSample],
) -> Result<Objective, FlowError> {
    assert!(!batch.is_empty(), "empty batch");
    let penalize = cfg.lambda != 0.0 && mode != Mode::Discrete;
    let mut total: Option<Var> = None;
    let mut terminal_sum = 0.0;
    let mut cost_sum = 0.0;
    for s in batch {
        let (logits, flow) = forward_logits(tape, model, cfg, mode, &s.input)?;
        let g = tape.cross_entropy(logits, &s.target)?;
        terminal_sum += tape.scalar(g);
        cost_sum += flow.trace.transport_cost;
        let sample = if penalize {
            let reg = tape.scale(flow.cost, cfg.lambda)?;
            tape.add(g, reg)?
        } else {
            g
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, sample)?,
            None => sample,
        });
    }
    let b = batch.len() as f64;
    let loss = tape.scale(total.expect("non-empty"), 1.0 / b)?;
    Ok(Objective {
        loss,
        terminal_loss: terminal_sum / b,
        transport_cost: cost_sum / b,
    })
}

/// Regression variant: the batch supplies initial states directly and the
/// terminal loss is `½‖head(X_M) − y‖²`.
pub fn regression_objective(
    tape: &mut Tape,
    stack: &BoundStack,
    out: &crate::transformer::BoundOutput,
    cfg: &ModelConfig,
    mode: Mode,
    batch: &[(Tensor, Tensor)],
) -> Result<Objective, FlowError> {
    assert!(!batch.is_empty(), "empty batch");
    let penalize = cfg.lambda != 0.0 && mode != Mode::Discrete;
    let mut total: Option<Var> = None;
    let mut terminal_sum = 0.0;
    let mut cost_sum = 0.0;
    for (x0, y) in batch {
        let x = tape.leaf(x0);
        let flow = propagate(tape, x, stack, cfg, mode, false)?;
        let pred = output_head(tape, flow.terminal, out)?;
        let g = tape.mse(pred, y)?;
        terminal_sum += tape.scalar(g);
        cost_sum += flow.trace.transport_cost;
        let sample = if penalize {
            let reg = tape.scale(flow.cost, cfg.lambda)?;
            tape.add(g, reg)?
        } else {
            g
        };
        total = Some(match total {
            Some(acc) => tape.add(acc, sample)?,
            None => sample,
        });
    }
    let b = batch.len() as f64;
    let loss = tape.scale(total.expect("non-empty"), 1.0 / b)?;
    Ok(Objective {
        loss,
        terminal_loss: terminal_sum / b,
        transport_cost: cost_sum / b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Straightness {
    pub velocity_dispersion: f64,
    pub chord_deviation: f64,
}

/// Deviation of a recorded trajectory from straight, constant-speed motion.
///
/// `velocity_dispersion = max_m ‖v_m − v_0‖ / (‖v_0‖ + ε)` and
/// `chord_deviation = max_m dist(X_m, [X_0, X_M]) / (‖X_M − X_0‖ + ε)`.
pub fn straightness_metrics(trace: &FlowTrace) -> Straightness {
    let velocity_dispersion = match trace.velocities.first() {
        None => 0.0,
        Some(v0) => {
            let base = v0.frobenius_norm() + STRAIGHTNESS_EPS;
            trace
                .velocities
                .iter()
                .map(|v| dist(v.data(), v0.data()) / base)
                .fold(0.0, f64::max)
        }
    };
    let chord_deviation = match (trace.states.first(), trace.states.last()) {
        (Some(a), Some(b)) => {
            let chord: Vec<f64> = b.data().iter().zip(a.data()).map(|(b, a)| b - a).collect();
            let len_sq: f64 = chord.iter().map(|c| c * c).sum();
            let base = math::sqrt(len_sq) + STRAIGHTNESS_EPS;
            trace
                .states
                .iter()
                .map(|x| segment_distance(x.data(), a.data(), &chord, len_sq) / base)
                .fold(0.0, f64::max)
        }
        _ => 0.0,
    };
    Straightness {
        velocity_dispersion,
        chord_deviation,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn segment_distance(x: &[f64], a: &[f64], chord: &[f64], len_sq: f64) -> f64 {
    let s = if len_sq > 0.0 {
        let dot: f64 = x.iter().zip(a).zip(chord).map(|((x, a), c)| (x - a) * c).sum();
        (dot / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    math::sqrt(
        x.iter()
            .zip(a)
            .zip(chord)
            .map(|((x, a), c)| {
                let d = x - a - s * c;
                d * d
            })
            .sum(),
    )
}
