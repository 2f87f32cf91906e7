//! Optimal-control ground truth for the regularized flow.
//!
//! At the optimum every hidden state moves with the constant velocity
//! `−(1/λ)∇G(X(T), y)`, so the terminal state solves the fixed-point
//! equation `Z = X₀ − (T/λ)∇G(Z, y)`. Since `∇G` is `L²`-Lipschitz in its
//! first argument, the map is a contraction whenever `λ > TL²`.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::flow::FlowTrace;
use crate::linalg::{cholesky, cholesky_solve, LinalgError};
use crate::loss::{TerminalKind, TerminalLossSpec};
use crate::math;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("lambda = {lambda} does not exceed T*L^2 = {bound}")]
    ConditionViolated { lambda: f64, bound: f64 },
    #[error("fixed point not reached after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("measures differ in size: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("measure must be non-empty with finite points of equal dimension")]
    InvalidMeasure,
    #[error("unsupported Wasserstein order p = {0}")]
    UnsupportedOrder(u32),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    /// Closed form for MSE, plain iteration with a Newton fallback otherwise.
    Auto,
    Iteration,
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub method: SolveMethod,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iters: 10_000,
            method: SolveMethod::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x_t: Tensor,
    /// `−(1/λ)∇G(X(T), y)`.
    pub velocity: Tensor,
    /// `‖Z − Φ(Z)‖_F`.
    pub residual: f64,
    pub iterations: usize,
    pub method: SolveMethod,
    /// Residual after each plain iteration (empty for other methods).
    pub residual_history: Vec<f64>,
}

/// Contraction factor `TL²/λ`, or an error when it is not below one.
pub fn contraction_factor(spec: &TerminalLossSpec, horizon: f64, lambda: f64) -> Result<f64, OracleError> {
    let l = spec.lipschitz();
    let bound = horizon * l * l;
    if !(lambda > bound) {
        return Err(OracleError::ConditionViolated { lambda, bound });
    }
    Ok(bound / lambda)
}

/// `(1 − TL²/λ)⁻¹`.
pub fn certified_constant(spec: &TerminalLossSpec, horizon: f64, lambda: f64) -> Result<f64, OracleError> {
    Ok(1.0 / (1.0 - contraction_factor(spec, horizon, lambda)?))
}

fn phi(spec: &TerminalLossSpec, x0: &Tensor, z: &Tensor, y: &Tensor, s: f64) -> Result<Tensor, OracleError> {
    let g = spec.grad(z, y)?;
    Ok(x0.sub(&g.scale(s))?)
}

fn residual(spec: &TerminalLossSpec, x0: &Tensor, z: &Tensor, y: &Tensor, s: f64) -> Result<f64, OracleError> {
    Ok(z.sub(&phi(spec, x0, z, y, s)?)?.frobenius_norm())
}

/// Terminal state of the optimally regularized flow started at `x0`.
pub fn solve_terminal(
    x0: &Tensor,
    spec: &TerminalLossSpec,
    y: &Tensor,
    horizon: f64,
    lambda: f64,
    opts: SolveOptions,
) -> Result<OracleSolution, OracleError> {
    contraction_factor(spec, horizon, lambda)?;
    let s = horizon / lambda;
    let mut sol = match (opts.method, spec.kind()) {
        (SolveMethod::Auto, TerminalKind::Mse) => closed_form_mse(x0, spec, y, s)?,
        (SolveMethod::Auto, _) => match iterate(x0, spec, y, s, opts) {
            Ok(sol) => sol,
            Err(OracleError::NoConvergence { .. }) => newton(x0, spec, y, s, opts)?,
            Err(e) => return Err(e),
        },
        (SolveMethod::Iteration, _) => iterate(x0, spec, y, s, opts)?,
        (SolveMethod::Newton, _) => newton(x0, spec, y, s, opts)?,
    };
    sol.velocity = spec.grad(&sol.x_t, y)?.scale(-1.0 / lambda);
    Ok(sol)
}

fn closed_form_mse(x0: &Tensor, spec: &TerminalLossSpec, y: &Tensor, s: f64) -> Result<OracleSolution, OracleError> {
    // (I + s ψᵀψ) z = x₀ + s ψᵀy, column by column in the head's layout.
    let psi = spec.psi();
    let q = psi.cols();
    let mut a = psi.transpose().matmul(psi)?.scale(s);
    for i in 0..q {
        a.set(i, i, a.get(i, i) + 1.0);
    }
    let l = cholesky(&a)?;
    let cols = spec.to_columns(x0)?;
    let rhs = cols.add(&psi.transpose().matmul(y)?.scale(s))?;
    let mut z = Tensor::zeros(cols.rows(), cols.cols());
    for j in 0..cols.cols() {
        let sol = cholesky_solve(&l, &rhs.col(j));
        for (i, v) in sol.into_iter().enumerate() {
            z.set(i, j, v);
        }
    }
    let x_t = spec.from_columns(z, x0);
    let residual = residual(spec, x0, &x_t, y, s)?;
    Ok(OracleSolution {
        velocity: Tensor::zeros(x_t.rows(), x_t.cols()),
        x_t,
        residual,
        iterations: 0,
        method: SolveMethod::Auto,
        residual_history: Vec::new(),
    })
}

fn iterate(
    x0: &Tensor,
    spec: &TerminalLossSpec,
    y: &Tensor,
    s: f64,
    opts: SolveOptions,
) -> Result<OracleSolution, OracleError> {
    let mut z = x0.clone();
    let mut history = Vec::new();
    for it in 0..=opts.max_iters {
        let next = phi(spec, x0, &z, y, s)?;
        let r = next.sub(&z)?.frobenius_norm();
        history.push(r);
        if r <= opts.tol {
            return Ok(OracleSolution {
                velocity: Tensor::zeros(z.rows(), z.cols()),
                x_t: z,
                residual: r,
                iterations: it,
                method: SolveMethod::Iteration,
                residual_history: history,
            });
        }
        if !r.is_finite() {
            break;
        }
        z = next;
    }
    Err(OracleError::NoConvergence {
        iterations: opts.max_iters,
        residual: *history.last().unwrap_or(&f64::NAN),
    })
}

/// Damped Newton on `F(Z) = Z − X₀ + s∇G(Z)`; the Jacobian
/// `I + s∇²G` is block diagonal and positive definite.
fn newton(
    x0: &Tensor,
    spec: &TerminalLossSpec,
    y: &Tensor,
    s: f64,
    opts: SolveOptions,
) -> Result<OracleSolution, OracleError> {
    let f = |z: &Tensor| -> Result<Tensor, OracleError> { Ok(z.sub(&phi(spec, x0, z, y, s)?)?) };
    let mut z = x0.clone();
    let mut fz = f(&z)?;
    let mut r = fz.frobenius_norm();
    for it in 0..opts.max_iters {
        if r <= opts.tol {
            return Ok(OracleSolution {
                velocity: Tensor::zeros(z.rows(), z.cols()),
                x_t: z,
                residual: r,
                iterations: it,
                method: SolveMethod::Newton,
                residual_history: Vec::new(),
            });
        }
        let blocks = spec.hessian_blocks(&z)?;
        let fcols = spec.to_columns(&fz)?;
        let mut step = Tensor::zeros(fcols.rows(), fcols.cols());
        for (j, h) in blocks.iter().enumerate() {
            let mut jac = h.scale(s);
            for i in 0..jac.rows() {
                jac.set(i, i, jac.get(i, i) + 1.0);
            }
            let l = cholesky(&jac)?;
            let d = cholesky_solve(&l, &fcols.col(j));
            for (i, v) in d.into_iter().enumerate() {
                step.set(i, j, v);
            }
        }
        let step = spec.from_columns(step, &z);
        let mut alpha = 1.0;
        loop {
            let cand = z.sub(&step.scale(alpha))?;
            let fc = f(&cand)?;
            let rc = fc.frobenius_norm();
            if rc < r || alpha < 1e-10 {
                z = cand;
                fz = fc;
                r = rc;
                break;
            }
            alpha *= 0.5;
        }
    }
    if r <= opts.tol {
        return Ok(OracleSolution {
            velocity: Tensor::zeros(z.rows(), z.cols()),
            x_t: z,
            residual: r,
            iterations: opts.max_iters,
            method: SolveMethod::Newton,
            residual_history: Vec::new(),
        });
    }
    Err(OracleError::NoConvergence {
        iterations: opts.max_iters,
        residual: r,
    })
}

/// Samples `X(t) = X(T) + ((T − t)/λ)∇G(X(T), y)` at `num_samples + 1`
/// uniform times in `[0, T]`, recorded as a trace with constant velocity.
pub fn optimal_trajectory(sol: &OracleSolution, horizon: f64, num_samples: usize) -> FlowTrace {
    assert!(num_samples >= 1, "at least one interval");
    let dt = horizon / num_samples as f64;
    let mut states = Vec::with_capacity(num_samples + 1);
    let mut times = Vec::with_capacity(num_samples + 1);
    for m in 0..=num_samples {
        let t = if m == num_samples { horizon } else { m as f64 * dt };
        // velocity = −∇G/λ, so X(t) = X(T) − (T − t)·velocity.
        let x = sol
            .x_t
            .sub(&sol.velocity.scale(horizon - t))
            .expect("same shape");
        states.push(x);
        times.push(t);
    }
    let speed_sq = sol.velocity.frobenius_norm_sq();
    FlowTrace {
        terminal: sol.x_t.clone(),
        states,
        velocities: vec![sol.velocity.clone(); num_samples],
        times,
        dt,
        transport_cost: 0.5 * horizon * speed_sq,
    }
}

/// Two initial states with their targets.
pub type Pair = ((Tensor, Tensor), (Tensor, Tensor));

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub pairs: usize,
    /// Pairs where `lhs > rhs + slack`.
    pub violations: usize,
    /// `max(lhs − rhs)`; negative when every pair has room to spare.
    pub max_violation: f64,
    /// `(1 − TL²/λ)⁻¹`.
    pub constant: f64,
    pub lipschitz: f64,
    /// Counts of `lhs / rhs` in ten bins of width 0.1 over `[0, 1]`.
    pub tightness: [usize; 10],
}

/// Checks `‖ỹ₁ − ỹ₂‖ ≤ C (L‖ΔX₀‖_F + (TL²/λ)‖Δy‖)` with `C = (1 − TL²/λ)⁻¹`
/// on oracle outputs `ỹᵢ = head(X_T(X₀ᵢ, yᵢ))`.
pub fn check_stability_bound(
    pairs: &[Pair],
    spec: &TerminalLossSpec,
    horizon: f64,
    lambda: f64,
    slack: f64,
) -> Result<StabilityReport, OracleError> {
    let q = contraction_factor(spec, horizon, lambda)?;
    let constant = 1.0 / (1.0 - q);
    let l = spec.lipschitz();
    let mut report = StabilityReport {
        pairs: pairs.len(),
        violations: 0,
        max_violation: f64::NEG_INFINITY,
        constant,
        lipschitz: l,
        tightness: [0; 10],
    };
    let opts = SolveOptions::default();
    for ((x1, y1), (x2, y2)) in pairs {
        let s1 = solve_terminal(x1, spec, y1, horizon, lambda, opts)?;
        let s2 = solve_terminal(x2, spec, y2, horizon, lambda, opts)?;
        let out1 = spec.head(&s1.x_t)?;
        let out2 = spec.head(&s2.x_t)?;
        let lhs = out1.sub(&out2)?.frobenius_norm();
        let rhs = constant * (l * x1.sub(x2)?.frobenius_norm() + q * y1.sub(y2)?.frobenius_norm());
        let gap = lhs - rhs;
        report.max_violation = report.max_violation.max(gap);
        if gap > slack {
            report.violations += 1;
        }
        let ratio = if rhs > 0.0 { lhs / rhs } else { 0.0 };
        let bin = ((ratio * 10.0) as usize).min(9);
        report.tightness[bin] += 1;
    }
    Ok(report)
}

/// Equal-weight point cloud in `R^q`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    points: Vec<Vec<f64>>,
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, OracleError> {
        let dim = points.first().ok_or(OracleError::InvalidMeasure)?.len();
        if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
            return Err(OracleError::InvalidMeasure);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    /// Image of every point under `f`.
    pub fn map<E>(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>, E>) -> Result<Vec<Vec<f64>>, E> {
        self.points.iter().map(|p| f(p)).collect()
    }
}

/// Exact `W_p` between equal-size equal-weight measures with the Euclidean
/// ground metric: `(min_σ (1/N) Σᵢ ‖xᵢ − x'_σ(i)‖₂^p)^(1/p)`.
pub fn wasserstein_p(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: u32) -> Result<f64, OracleError> {
    if p != 1 && p != 2 {
        return Err(OracleError::UnsupportedOrder(p));
    }
    if mu.len() != nu.len() {
        return Err(OracleError::SizeMismatch {
            left: mu.len(),
            right: nu.len(),
        });
    }
    if mu.dim() != nu.dim() {
        return Err(OracleError::InvalidMeasure);
    }
    let n = mu.len();
    let mut cost = vec![0.0; n * n];
    for (i, a) in mu.points.iter().enumerate() {
        for (j, b) in nu.points.iter().enumerate() {
            let d = math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum());
            cost[i * n + j] = if p == 1 { d } else { d * d };
        }
    }
    let assignment = hungarian(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    let mean = (total / n as f64).max(0.0);
    Ok(if p == 1 { mean } else { math::sqrt(mean) })
}

/// Minimum-cost perfect matching on a dense `n × n` cost matrix by
/// shortest augmenting paths with potentials. Returns `row → column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut col_of = vec![0usize; n + 1];
    for i in 1..=n {
        col_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_of[j0] = col_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if col_of[j] > 0 {
            assignment[col_of[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PushforwardReport {
    pub w_in: f64,
    pub w_out: f64,
    /// `w_out / w_in`; zero when both vanish.
    pub ratio: f64,
    pub budget: f64,
    pub satisfied: bool,
}

/// Compares `W_p(f♯μ, f♯ν)` with `budget · W_p(μ, ν)`.
pub fn check_pushforward_stability<F>(
    map: F,
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    budget: f64,
    p: u32,
    slack: f64,
) -> Result<PushforwardReport, OracleError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, OracleError>,
{
    let w_in = wasserstein_p(mu, nu, p)?;
    let fmu = EmpiricalMeasure::new(mu.map(&map)?)?;
    let fnu = EmpiricalMeasure::new(nu.map(&map)?)?;
    let w_out = wasserstein_p(&fmu, &fnu, p)?;
    let ratio = if w_in == 0.0 {
        if w_out == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        w_out / w_in
    };
    Ok(PushforwardReport {
        w_in,
        w_out,
        ratio,
        budget,
        satisfied: w_out <= budget * w_in + slack,
    })
}
