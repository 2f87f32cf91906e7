//! Randomized certification suites built on the oracles.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::flow::straightness_metrics;
use crate::loss::{TerminalKind, TerminalLossSpec};
use crate::oracle::{
    certified_constant, check_pushforward_stability, check_stability_bound, contraction_factor,
    optimal_trajectory, solve_terminal, wasserstein_p, EmpiricalMeasure, OracleError, Pair, SolveMethod,
    SolveOptions,
};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::transformer::HeadKind;

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryConfig {
    pub seed: u64,
    pub horizon: f64,
    /// `λ = lambda_factor · T L²` unless `lambda` is set.
    pub lambda_factor: f64,
    pub lambda: Option<f64>,
    pub d: usize,
    pub n: usize,
    pub classes: usize,
    pub pairs: usize,
    pub clouds: usize,
    pub cloud_size: usize,
    pub trajectories: usize,
    pub slack: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            horizon: 1.0,
            lambda_factor: 2.0,
            lambda: None,
            d: 4,
            n: 2,
            classes: 3,
            pairs: 1000,
            clouds: 200,
            cloud_size: 32,
            trajectories: 50,
            slack: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed excess over the certified quantity (negative means
    /// every case had room to spare).
    pub worst_slack: f64,
    /// `(1 − TL²/λ)⁻¹` where it applies.
    pub constant: Option<f64>,
    pub lambda: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub suites: Vec<SuiteResult>,
}

impl TheoryReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

fn random_simplex(rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for c in 0..cols {
        let w: Vec<f64> = (0..rows).map(|_| crate::math::exp(rng.standard_normal())).collect();
        let s: f64 = w.iter().sum();
        for (r, v) in w.into_iter().enumerate() {
            t.set(r, c, v / s);
        }
    }
    t
}

fn random_target(kind: TerminalKind, rows: usize, cols: usize, rng: &mut RngState) -> Tensor {
    match kind {
        TerminalKind::Mse => Tensor::randn(rows, cols, 1.0, rng),
        TerminalKind::SoftmaxCe => random_simplex(rows, cols, rng),
    }
}

fn kind_name(kind: TerminalKind) -> &'static str {
    match kind {
        TerminalKind::Mse => "mse",
        TerminalKind::SoftmaxCe => "softmax_ce",
    }
}

/// Random `classes × d` output matrix and the λ used with it.
fn setup(cfg: &TheoryConfig, kind: TerminalKind, rng: &mut RngState) -> (TerminalLossSpec, f64) {
    let psi = Tensor::randn(cfg.classes, cfg.d, 1.0, rng);
    let spec = TerminalLossSpec::new(kind, HeadKind::PerToken, psi);
    let l = spec.lipschitz();
    let lambda = cfg
        .lambda
        .unwrap_or(cfg.lambda_factor * cfg.horizon * l * l);
    (spec, lambda)
}

fn failed(name: String, lambda: f64, e: OracleError) -> SuiteResult {
    SuiteResult {
        name,
        passed: false,
        cases: 0,
        worst_slack: f64::INFINITY,
        constant: None,
        lambda: Some(lambda),
        detail: format!("{e}"),
    }
}

/// Theorem-2 style bound on random pairs.
pub fn stability_suite(cfg: &TheoryConfig, kind: TerminalKind) -> SuiteResult {
    let name = format!("stability_{}", kind_name(kind));
    let mut rng = RngState::new(cfg.seed ^ 0x5747_4142);
    let (spec, lambda) = setup(cfg, kind, &mut rng);
    let pairs: Vec<Pair> = (0..cfg.pairs)
        .map(|i| {
            let x1 = Tensor::randn(cfg.d, cfg.n, 1.0, &mut rng);
            let y1 = random_target(kind, cfg.classes, cfg.n, &mut rng);
            // Every tenth pair is identical, the rest independent.
            if i % 10 == 0 {
                ((x1.clone(), y1.clone()), (x1, y1))
            } else {
                let x2 = Tensor::randn(cfg.d, cfg.n, 1.0, &mut rng);
                let y2 = random_target(kind, cfg.classes, cfg.n, &mut rng);
                ((x1, y1), (x2, y2))
            }
        })
        .collect();
    match check_stability_bound(&pairs, &spec, cfg.horizon, lambda, cfg.slack) {
        Ok(r) => SuiteResult {
            name,
            passed: r.violations == 0,
            cases: r.pairs,
            worst_slack: r.max_violation,
            constant: Some(r.constant),
            lambda: Some(lambda),
            detail: format!("L = {:.6}, violations = {}, tightness = {:?}", r.lipschitz, r.violations, r.tightness),
        },
        Err(e) => failed(name, lambda, e),
    }
}

/// Sampled optimal trajectories must be straight.
pub fn straightness_suite(cfg: &TheoryConfig) -> SuiteResult {
    let mut rng = RngState::new(cfg.seed ^ 0x5354_5241);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let mut last_lambda = 0.0;
    for kind in [TerminalKind::Mse, TerminalKind::SoftmaxCe] {
        let (spec, lambda) = setup(cfg, kind, &mut rng);
        last_lambda = lambda;
        for _ in 0..cfg.trajectories {
            let x0 = Tensor::randn(cfg.d, cfg.n, 1.0, &mut rng);
            let y = random_target(kind, cfg.classes, cfg.n, &mut rng);
            let sol = match solve_terminal(&x0, &spec, &y, cfg.horizon, lambda, SolveOptions::default()) {
                Ok(s) => s,
                Err(e) => return failed(String::from("straightness"), lambda, e),
            };
            let s = straightness_metrics(&optimal_trajectory(&sol, cfg.horizon, 16));
            worst = worst.max(s.velocity_dispersion).max(s.chord_deviation);
            cases += 1;
        }
    }
    SuiteResult {
        name: String::from("straightness"),
        passed: worst < 1e-10,
        cases,
        worst_slack: worst - 1e-10,
        constant: None,
        lambda: Some(last_lambda),
        detail: format!("max metric = {worst:e}"),
    }
}

/// Plain iteration contracts at least as fast as `TL²/λ`.
pub fn contraction_suite(cfg: &TheoryConfig) -> SuiteResult {
    let mut rng = RngState::new(cfg.seed ^ 0x434f_4e54);
    let (spec, lambda) = setup(cfg, TerminalKind::SoftmaxCe, &mut rng);
    let q = match contraction_factor(&spec, cfg.horizon, lambda) {
        Ok(q) => q,
        Err(e) => return failed(String::from("contraction"), lambda, e),
    };
    let opts = SolveOptions {
        method: SolveMethod::Iteration,
        ..SolveOptions::default()
    };
    let mut worst = f64::NEG_INFINITY;
    let mut cases = 0;
    for _ in 0..cfg.trajectories {
        let x0 = Tensor::randn(cfg.d, cfg.n, 1.0, &mut rng);
        let y = random_target(TerminalKind::SoftmaxCe, cfg.classes, cfg.n, &mut rng);
        let sol = match solve_terminal(&x0, &spec, &y, cfg.horizon, lambda, opts) {
            Ok(s) => s,
            Err(e) => return failed(String::from("contraction"), lambda, e),
        };
        for w in sol.residual_history.windows(2) {
            // Ratios of residuals near machine precision are noise.
            if w[0] > 1e-10 {
                worst = worst.max(w[1] / w[0] - (q + 1e-6));
                cases += 1;
            }
        }
    }
    SuiteResult {
        name: String::from("contraction"),
        passed: worst <= 0.0,
        cases,
        worst_slack: worst,
        constant: Some(1.0 / (1.0 - q)),
        lambda: Some(lambda),
        detail: format!("factor TL^2/lambda = {q:.6}"),
    }
}

fn random_cloud(size: usize, dim: usize, rng: &mut RngState) -> EmpiricalMeasure {
    EmpiricalMeasure::new((0..size).map(|_| (0..dim).map(|_| rng.standard_normal()).collect()).collect())
        .expect("finite points")
}

/// `W₂(f♯μ, f♯ν) ≤ L(1 − TL²/λ)⁻¹ W₂(μ, ν)` for the oracle input-output map
/// with a fixed target.
pub fn pushforward_suite(cfg: &TheoryConfig, kind: TerminalKind) -> SuiteResult {
    let name = format!("pushforward_{}", kind_name(kind));
    let mut rng = RngState::new(cfg.seed ^ 0x5055_5348);
    let (spec, lambda) = setup(cfg, kind, &mut rng);
    let constant = match certified_constant(&spec, cfg.horizon, lambda) {
        Ok(c) => c,
        Err(e) => return failed(name, lambda, e),
    };
    let budget = spec.lipschitz() * constant;
    let y = random_target(kind, cfg.classes, 1, &mut rng);
    let map = |x: &[f64]| -> Result<Vec<f64>, OracleError> {
        let x0 = Tensor::column(x);
        let sol = solve_terminal(&x0, &spec, &y, cfg.horizon, lambda, SolveOptions::default())?;
        Ok(spec.head(&sol.x_t)?.into_data())
    };
    let mut worst = f64::NEG_INFINITY;
    let mut max_ratio: f64 = 0.0;
    for _ in 0..cfg.clouds {
        let mu = random_cloud(cfg.cloud_size, cfg.d, &mut rng);
        let nu = random_cloud(cfg.cloud_size, cfg.d, &mut rng);
        match check_pushforward_stability(map, &mu, &nu, budget, 2, cfg.slack) {
            Ok(r) => {
                worst = worst.max(r.w_out - budget * r.w_in);
                max_ratio = max_ratio.max(r.ratio);
            }
            Err(e) => return failed(name, lambda, e),
        }
    }
    SuiteResult {
        name,
        passed: worst <= cfg.slack,
        cases: cfg.clouds,
        worst_slack: worst,
        constant: Some(constant),
        lambda: Some(lambda),
        detail: format!("budget = {budget:.6}, max ratio = {max_ratio:.6}"),
    }
}

/// Symmetry, triangle inequality and identity of indiscernibles.
pub fn wasserstein_axioms_suite(cfg: &TheoryConfig) -> SuiteResult {
    let mut rng = RngState::new(cfg.seed ^ 0x5741_5353);
    let mut worst = f64::NEG_INFINITY;
    let mut cases = 0;
    for _ in 0..cfg.trajectories {
        let size = 1 + rng.below(12);
        let a = random_cloud(size, cfg.d, &mut rng);
        let b = random_cloud(size, cfg.d, &mut rng);
        let c = random_cloud(size, cfg.d, &mut rng);
        // A permuted copy of `a` is the same multiset.
        let mut shuffled = a.points().to_vec();
        shuffled.reverse();
        let a_perm = EmpiricalMeasure::new(shuffled).expect("finite");
        for p in [1, 2] {
            let w = |x: &EmpiricalMeasure, y: &EmpiricalMeasure| wasserstein_p(x, y, p).expect("equal sizes");
            let (ab, ba, bc, ac) = (w(&a, &b), w(&b, &a), w(&b, &c), w(&a, &c));
            worst = worst
                .max((ab - ba).abs() - 1e-12)
                .max(ac - (ab + bc) - cfg.slack)
                .max(w(&a, &a_perm) - 1e-12);
            if ab <= 0.0 {
                worst = worst.max(1.0);
            }
            cases += 1;
        }
    }
    SuiteResult {
        name: String::from("wasserstein_axioms"),
        passed: worst <= 0.0,
        cases,
        worst_slack: worst,
        constant: None,
        lambda: None,
        detail: String::from("symmetry 1e-12, triangle with slack, zero on permuted copies"),
    }
}

pub fn run_suites(cfg: &TheoryConfig) -> TheoryReport {
    TheoryReport {
        suites: alloc::vec![
            straightness_suite(cfg),
            contraction_suite(cfg),
            stability_suite(cfg, TerminalKind::Mse),
            stability_suite(cfg, TerminalKind::SoftmaxCe),
            pushforward_suite(cfg, TerminalKind::Mse),
            pushforward_suite(cfg, TerminalKind::SoftmaxCe),
            wasserstein_axioms_suite(cfg),
        ],
    }
}
