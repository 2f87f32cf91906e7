//! Training loop, evaluation and sampling for character-level models.

use alloc::vec::Vec;

use thiserror::Error;

use crate::data::{eval_windows, sample_batch, CorpusSplit, DataError};
use crate::flow::{forward_logits, training_objective, FlowError, Mode, TokenSample};
use crate::math;
use crate::optim::{adam_step, clip_grad_norm, lr_schedule, AdamState, OptimError};
use crate::rng::RngState;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};
use crate::transformer::{ModelConfig, ModelError, ModelParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid training config: {0}")]
    Config(&'static str),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Flow(FlowError::from(e))
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Flow(FlowError::Model(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub iters: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// A metrics row is emitted every `eval_every` iterations and after the
    /// last one.
    pub eval_every: u64,
    pub eval_windows: usize,
    pub seed: u64,
    /// Optional L2 penalty on the output matrix only.
    pub weight_decay_out: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Ot,
            iters: 2000,
            batch_size: 4,
            lr_max: 1e-3,
            lr_min: 1e-4,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            eval_every: 250,
            eval_windows: 16,
            seed: 0,
            weight_decay_out: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 || self.eval_windows == 0 {
            return bad("eval_every and eval_windows must be at least 1");
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad("need 0 <= lr_min <= lr_max and lr_max > 0");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.weight_decay_out >= 0.0) {
            return bad("weight_decay_out must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub transport_cost: f64,
    pub perplexity: f64,
    pub wall_ms: u64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optim: AdamState,
    pub rng: RngState,
    pub iteration: u64,
    pub history: Vec<MetricsRow>,
}

/// Where and why a run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct FailureRecord {
    /// Iteration during which the failure happened (0-based).
    pub iteration: u64,
    pub kind: FailureKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FailureKind {
    /// A hidden state became non-finite or exceeded the norm threshold.
    StateDivergence { step: usize, norm: f64 },
    NonFiniteLoss,
    NonFiniteGradient,
}

impl core::fmt::Display for FailureRecord {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self.kind {
            FailureKind::StateDivergence { step, norm } => write!(
                f,
                "iteration {}: hidden state diverged at step {} (norm {})",
                self.iteration, step, norm
            ),
            FailureKind::NonFiniteLoss => write!(f, "iteration {}: loss is not finite", self.iteration),
            FailureKind::NonFiniteGradient => {
                write!(f, "iteration {}: gradient is not finite", self.iteration)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed,
    /// A hook asked to stop; the state can be saved and resumed.
    Stopped,
    Diverged(FailureRecord),
}

/// Observers of a run. All methods have no-op defaults.
pub trait TrainHooks {
    /// Milliseconds since some fixed origin, if wall time is recorded.
    fn now_ms(&mut self) -> Option<u64> {
        None
    }

    fn on_row(&mut self, _row: &MetricsRow) {}

    /// Checked after each completed iteration.
    fn should_stop(&mut self, _iteration: u64) -> bool {
        false
    }
}

/// Hooks that do nothing.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub terminal_loss: f64,
    pub transport_cost: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

enum StepFailure {
    Failed(FailureRecord),
    Error(TrainError),
}

impl From<TrainError> for StepFailure {
    fn from(e: TrainError) -> Self {
        StepFailure::Error(e)
    }
}

fn classify(iteration: u64, e: FlowError) -> StepFailure {
    match e {
        FlowError::Divergence { step, norm } => StepFailure::Failed(FailureRecord {
            iteration,
            kind: FailureKind::StateDivergence { step, norm },
        }),
        other => StepFailure::Error(other.into()),
    }
}

impl Trainer {
    /// Fresh parameters drawn from the seed; the same stream then drives
    /// batch sampling.
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self, TrainError> {
        model.validate()?;
        train.validate()?;
        let mut rng = RngState::new(train.seed);
        let params = ModelParams::init(&model, &mut rng);
        let optim = AdamState::new(&params.tensors(), train.beta1, train.beta2, train.eps);
        Ok(Self {
            model,
            train,
            state: TrainState {
                params,
                optim,
                rng,
                iteration: 0,
                history: Vec::new(),
            },
        })
    }

    pub fn from_state(model: ModelConfig, train: TrainConfig, state: TrainState) -> Result<Self, TrainError> {
        model.validate()?;
        train.validate()?;
        Ok(Self { model, train, state })
    }

    fn try_step(&mut self, train_ids: &[usize]) -> Result<StepStats, StepFailure> {
        let it = self.state.iteration;
        let lr = lr_schedule(it as usize, self.train.iters as usize, self.train.lr_max, self.train.lr_min);
        let batch = sample_batch(train_ids, self.model.n_ctx, self.train.batch_size, &mut self.state.rng)
            .map_err(TrainError::from)?;
        let mut tape = Tape::new();
        let bound = self.state.params.bind(&mut tape);
        let obj = training_objective(&mut tape, &bound, &self.model, self.train.mode, &batch)
            .map_err(|e| classify(it, e))?;
        let loss = tape.scalar(obj.loss);
        if !loss.is_finite() {
            return Err(StepFailure::Failed(FailureRecord {
                iteration: it,
                kind: FailureKind::NonFiniteLoss,
            }));
        }
        let grads = tape.backward(obj.loss).map_err(TrainError::from)?;
        let vars = bound.vars();
        let mut params = self.state.params.tensors_mut();
        for (v, p) in vars.iter().zip(params.iter_mut()) {
            p.clear_grad();
            grads.accumulate_into(*v, p).map_err(TrainError::from)?;
        }
        if self.train.weight_decay_out > 0.0 {
            let psi = params.last_mut().expect("output matrix");
            let wd: Vec<f64> = psi.data().iter().map(|x| self.train.weight_decay_out * x).collect();
            psi.accumulate_grad(&wd).map_err(TrainError::from)?;
        }
        let grad_norm = clip_grad_norm(&mut params, self.train.clip_norm);
        if !grad_norm.is_finite() {
            return Err(StepFailure::Failed(FailureRecord {
                iteration: it,
                kind: FailureKind::NonFiniteGradient,
            }));
        }
        adam_step(&mut params, &mut self.state.optim, lr).map_err(TrainError::from)?;
        self.state.iteration += 1;
        Ok(StepStats {
            loss,
            terminal_loss: obj.terminal_loss,
            transport_cost: obj.transport_cost,
            grad_norm,
            lr,
        })
    }

    /// One optimization step. A divergent forward pass is an error here;
    /// [`Trainer::run`] turns it into a [`FailureRecord`].
    pub fn step(&mut self, train_ids: &[usize]) -> Result<StepStats, TrainError> {
        self.try_step(train_ids).map_err(|f| match f {
            StepFailure::Error(e) => e,
            StepFailure::Failed(r) => match r.kind {
                FailureKind::StateDivergence { step, norm } => FlowError::Divergence { step, norm }.into(),
                _ => TrainError::Config("non-finite loss or gradient"),
            },
        })
    }

    /// Mean next-token cross-entropy over `windows`.
    pub fn evaluate(&self, windows: &[TokenSample]) -> Result<f64, FlowError> {
        evaluate(&self.state.params, &self.model, self.train.mode, windows)
    }

    /// Trains until `train.iters` iterations are done, a hook stops the run,
    /// or the model diverges.
    pub fn run(&mut self, split: &CorpusSplit, hooks: &mut dyn TrainHooks) -> Result<RunOutcome, TrainError> {
        let windows = eval_windows(&split.test, self.model.n_ctx, self.train.eval_windows)?;
        while self.state.iteration < self.train.iters {
            let stats = match self.try_step(&split.train) {
                Ok(s) => s,
                Err(StepFailure::Failed(r)) => return Ok(RunOutcome::Diverged(r)),
                Err(StepFailure::Error(e)) => return Err(e),
            };
            let it = self.state.iteration;
            if it.is_multiple_of(self.train.eval_every) || it == self.train.iters {
                let test_loss = match self.evaluate(&windows) {
                    Ok(l) => l,
                    Err(e) => match classify(it - 1, e) {
                        StepFailure::Failed(r) => return Ok(RunOutcome::Diverged(r)),
                        StepFailure::Error(e) => return Err(e),
                    },
                };
                let row = MetricsRow {
                    iteration: it,
                    train_loss: stats.terminal_loss,
                    test_loss,
                    transport_cost: stats.transport_cost,
                    perplexity: math::exp(test_loss),
                    wall_ms: hooks.now_ms().unwrap_or(0),
                };
                self.state.history.push(row);
                hooks.on_row(&row);
            }
            if hooks.should_stop(it) && it < self.train.iters {
                return Ok(RunOutcome::Stopped);
            }
        }
        Ok(RunOutcome::Completed)
    }
}

/// Mean next-token cross-entropy of `params` over `windows`.
pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, mode: Mode, windows: &[TokenSample]) -> Result<f64, FlowError> {
    let mut total = 0.0;
    for w in windows {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (logits, _) = forward_logits(&mut tape, &bound, cfg, mode, &w.input)?;
        let ce = tape.cross_entropy(logits, &w.target)?;
        total += tape.scalar(ce);
    }
    Ok(total / windows.len() as f64)
}

/// Next-token logits at the last position of `context`.
pub fn last_logits(params: &ModelParams, cfg: &ModelConfig, mode: Mode, context: &[usize]) -> Result<Vec<f64>, FlowError> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let (logits, _) = forward_logits(&mut tape, &bound, cfg, mode, context)?;
    let z = tape.tensor(logits);
    Ok(z.col(z.cols() - 1))
}

/// Autoregressive sampling from the last `n_ctx` tokens. Temperature 0 picks
/// the most likely token (lowest id on ties).
pub fn generate(
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
    prompt: &[usize],
    length: usize,
    temperature: f64,
    rng: &mut RngState,
) -> Result<Vec<usize>, FlowError> {
    let mut out = prompt.to_vec();
    for _ in 0..length {
        let start = out.len().saturating_sub(cfg.n_ctx);
        let z = last_logits(params, cfg, mode, &out[start..])?;
        let next = if temperature <= 0.0 {
            let mut best = 0;
            for (i, v) in z.iter().enumerate() {
                if *v > z[best] {
                    best = i;
                }
            }
            best
        } else {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = z.iter().map(|v| math::exp((v - m) / temperature)).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.uniform() * total;
            let mut pick = w.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    pick = i;
                    break;
                }
                u -= wi;
            }
            pick
        };
        out.push(next);
    }
    Ok(out)
}

/// Fits `y ≈ ψ vec(X₀)` by full-batch Adam on the mean of `½‖ψ vec(X₀) − y‖²`,
/// with the learning rate decayed from `lr_max` to `lr_max · 1e-4`.
/// Returns `ψ` and the final mean loss.
pub fn fit_linear_head(pairs: &[(Tensor, Tensor)], iters: usize, lr_max: f64) -> Result<(Tensor, f64), TrainError> {
    assert!(!pairs.is_empty(), "no data");
    let q = pairs[0].0.len();
    let c = pairs[0].1.rows();
    let mut psi = Tensor::zeros(c, q);
    let mut optim = AdamState::new(&[&psi], 0.9, 0.999, 1e-8);
    let inputs: Vec<Tensor> = pairs.iter().map(|(x, _)| x.vec_cols()).collect();
    let loss_at = |psi: &Tensor, with_grad: bool| -> Result<(f64, Option<Vec<f64>>), TrainError> {
        let mut tape = Tape::new();
        let p = tape.leaf(psi);
        let mut acc = None;
        for (x, (_, y)) in inputs.iter().zip(pairs) {
            let xv = tape.leaf(x);
            let pred = tape.matmul(p, xv)?;
            let l = tape.mse(pred, y)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, l)?,
                None => l,
            });
        }
        let mean = tape.scale(acc.expect("non-empty"), 1.0 / pairs.len() as f64)?;
        let g = if with_grad {
            Some(tape.backward(mean)?.get_or_zeros(&tape, p))
        } else {
            None
        };
        Ok((tape.scalar(mean), g))
    };
    for it in 0..iters {
        let (_, g) = loss_at(&psi, true)?;
        psi.accumulate_grad(&g.expect("requested"))?;
        let lr = lr_schedule(it, iters, lr_max, lr_max * 1e-4);
        adam_step(&mut [&mut psi], &mut optim, lr)?;
    }
    let (final_loss, _) = loss_at(&psi, false)?;
    Ok((psi, final_loss))
}
