use ott_core::flow::{
    discrete_forward, euler_integrate, forward_logits, integrate_field, node_block_integrate, propagate,
    straightness_metrics, training_objective, EulerOptions, FlowError, Mode, TokenSample, VelocityField,
};
use ott_core::transformer::{
    bind_block, block_forward, stack_forward, BlockOptions, BlockParams, LnPlacement, ModelConfig, ModelError,
    ModelParams, StackParams, TimeConditioning, LN_EPS,
};
use ott_core::{RngState, Tape, Tensor, Var};
use proptest::prelude::*;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d: 8,
        k: 4,
        heads: 2,
        depth: 2,
        n_ctx: 6,
        vocab_size: 5,
        out_dim: 5,
        steps: 4,
        ..ModelConfig::char_lm(5)
    }
}

/// `v(X) = A·X` with a fixed matrix `A`.
struct Linear(Tensor);

impl VelocityField for Linear {
    fn velocity(&self, tape: &mut Tape, x: Var, _t: f64) -> Result<Var, ModelError> {
        let a = tape.leaf(&self.0);
        Ok(tape.matmul(a, x)?)
    }
}

/// Always zero.
struct Still;

impl VelocityField for Still {
    fn velocity(&self, tape: &mut Tape, x: Var, _t: f64) -> Result<Var, ModelError> {
        Ok(tape.scale(x, 0.0)?)
    }
}

/// `exp(A)` by scaling and squaring of a truncated Taylor series.
fn expm(a: &Tensor) -> Tensor {
    let n = a.rows();
    let norm = a.frobenius_norm();
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.5 {
        s += 1;
    }
    let b = a.scale(1.0 / f64::powi(2.0, s));
    let mut term = Tensor::identity(n);
    let mut sum = Tensor::identity(n);
    for k in 1..30 {
        term = term.matmul(&b).unwrap().scale(1.0 / k as f64);
        sum = sum.add(&term).unwrap();
    }
    for _ in 0..s {
        sum = sum.matmul(&sum).unwrap();
    }
    sum
}

fn euler_endpoint(field: &dyn VelocityField, x0: &Tensor, horizon: f64, steps: usize) -> Tensor {
    let mut tape = Tape::new();
    let x = tape.leaf(x0);
    let opts = EulerOptions {
        horizon,
        steps,
        record: false,
        normalize_by_tokens: false,
    };
    let out = integrate_field(&mut tape, x, field, opts).unwrap();
    tape.tensor(out.terminal)
}

#[test]
fn euler_is_first_order_on_a_rotation() {
    let a = Tensor::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
    let x0 = Tensor::from_rows(&[&[1.0, 0.3], &[0.0, -0.7]]);
    let exact = expm(&a).matmul(&x0).unwrap();
    let field = Linear(a);
    let e64 = euler_endpoint(&field, &x0, 1.0, 64).sub(&exact).unwrap().frobenius_norm();
    let e128 = euler_endpoint(&field, &x0, 1.0, 128).sub(&exact).unwrap().frobenius_norm();
    let ratio = e64 / e128;
    assert!((1.7..=2.3).contains(&ratio), "ratio {ratio}");
}

#[test]
fn expm_oracle_matches_rotation() {
    let a = Tensor::from_rows(&[&[0.0, -0.4], &[0.4, 0.0]]);
    let e = expm(&a);
    assert!((e.get(0, 0) - 0.4f64.cos()).abs() < 1e-14);
    assert!((e.get(1, 0) - 0.4f64.sin()).abs() < 1e-14);
}

#[test]
fn zero_field_keeps_the_state() {
    let x0 = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let mut tape = Tape::new();
    let x = tape.leaf(&x0);
    let opts = EulerOptions {
        horizon: 2.0,
        steps: 5,
        record: true,
        normalize_by_tokens: false,
    };
    let out = integrate_field(&mut tape, x, &Still, opts).unwrap();
    assert_eq!(out.trace.terminal, x0);
    assert_eq!(out.trace.transport_cost, 0.0);
    assert_eq!(out.trace.states.len(), 6);
    assert!(out.trace.states.iter().all(|s| *s == x0));
}

#[test]
fn recorded_states_follow_the_update_rule() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, &mut RngState::new(4));
    let mut tape = Tape::new();
    let m = p.bind(&mut tape);
    let x0 = tape.leaf(&Tensor::randn(8, 5, 1.0, &mut RngState::new(5)));
    let out = euler_integrate(&mut tape, x0, &m.stack, &cfg, true).unwrap();
    let tr = &out.trace;
    assert_eq!(tr.states.len(), cfg.steps + 1);
    assert_eq!(tr.velocities.len(), cfg.steps);
    assert_eq!(tr.times.len(), cfg.steps + 1);
    assert_eq!(*tr.times.last().unwrap(), cfg.horizon);
    let mut cost = 0.0;
    for m in 0..cfg.steps {
        let next = tr.states[m].add(&tr.velocities[m].scale(tr.dt)).unwrap();
        assert_eq!(next, tr.states[m + 1], "step {m}");
        cost += tr.velocities[m].frobenius_norm_sq();
    }
    let want = 0.5 * tr.dt * cost;
    assert!((tr.transport_cost - want).abs() <= 1e-12 * want);
    assert_eq!(tr.terminal, tr.states[cfg.steps]);
}

#[test]
fn recording_does_not_change_results() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, &mut RngState::new(6));
    let x = Tensor::randn(8, 4, 1.0, &mut RngState::new(7));
    let run = |record| {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let x0 = tape.leaf(&x);
        let out = euler_integrate(&mut tape, x0, &m.stack, &cfg, record).unwrap();
        (out.trace.terminal, out.trace.transport_cost)
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn token_normalization_divides_the_cost() {
    let mut cfg = small_cfg();
    let p = ModelParams::init(&cfg, &mut RngState::new(8));
    let x = Tensor::randn(8, 4, 1.0, &mut RngState::new(9));
    let mut costs = Vec::new();
    for norm in [false, true] {
        cfg.normalize_by_tokens = norm;
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let x0 = tape.leaf(&x);
        costs.push(euler_integrate(&mut tape, x0, &m.stack, &cfg, false).unwrap().trace.transport_cost);
    }
    assert!((costs[0] / 4.0 - costs[1]).abs() < 1e-12 * costs[0]);
}

#[test]
fn discrete_equals_single_unit_step() {
    let mut cfg = small_cfg();
    cfg.horizon = 1.0;
    cfg.steps = 1;
    cfg.lambda = 0.0;
    let p = ModelParams::init(&cfg, &mut RngState::new(10));
    let tokens = [1, 0, 4, 4, 2];
    let logits = |mode| {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let (l, _) = forward_logits(&mut tape, &m, &cfg, mode, &tokens).unwrap();
        tape.tensor(l)
    };
    assert_eq!(logits(Mode::Discrete), logits(Mode::Ot));
}

#[test]
fn discrete_ignores_horizon_and_steps() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, &mut RngState::new(11));
    let x = Tensor::randn(8, 3, 1.0, &mut RngState::new(12));
    let run = |c: &ModelConfig| {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let x0 = tape.leaf(&x);
        let out = discrete_forward(&mut tape, x0, &m.stack, c).unwrap();
        tape.tensor(out.terminal)
    };
    let other = ModelConfig {
        horizon: 3.0,
        steps: 7,
        ..cfg.clone()
    };
    assert_eq!(run(&cfg), run(&other));
}

#[test]
fn node_with_one_block_equals_ot() {
    let cfg = ModelConfig {
        depth: 1,
        steps: 6,
        time_conditioning: TimeConditioning::AppendScalar,
        ..small_cfg()
    };
    let p = ModelParams::init(&cfg, &mut RngState::new(13));
    let x = Tensor::randn(8, 5, 1.0, &mut RngState::new(14));
    let run = |mode| {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let x0 = tape.leaf(&x);
        let out = propagate(&mut tape, x0, &m.stack, &cfg, mode, true).unwrap();
        out.trace
    };
    assert_eq!(run(Mode::Ot), run(Mode::Node));
}

#[test]
fn node_chains_blocks_and_adds_costs() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, &mut RngState::new(15));
    let x = Tensor::randn(8, 5, 1.0, &mut RngState::new(16));
    let mut tape = Tape::new();
    let m = p.bind(&mut tape);
    let x0 = tape.leaf(&x);
    let out = node_block_integrate(&mut tape, x0, &m.stack, &cfg, true).unwrap();
    // Two blocks, two steps each, times laid end to end.
    assert_eq!(out.trace.times, vec![0.0, 0.5, 1.0, 1.5, 2.0]);
    assert_eq!(out.trace.states.len(), 5);
    let per_block: f64 = out
        .trace
        .velocities
        .iter()
        .map(|v| 0.5 * out.trace.dt * v.frobenius_norm_sq())
        .sum();
    assert!((per_block - out.trace.transport_cost).abs() < 1e-12 * per_block);
    let odd = ModelConfig { steps: 5, ..cfg };
    assert_eq!(
        node_block_integrate(&mut tape, x0, &m.stack, &odd, false).unwrap_err(),
        FlowError::StepsNotDivisible { steps: 5, depth: 2 }
    );
}

#[test]
fn huge_weights_are_reported_as_divergence() {
    let cfg = small_cfg();
    let mut p = ModelParams::init(&cfg, &mut RngState::new(17));
    for b in &mut p.stack.blocks {
        b.mlp_b2 = Tensor::filled(8, 1, 1e9);
    }
    let mut tape = Tape::new();
    let m = p.bind(&mut tape);
    let x0 = tape.leaf(&Tensor::zeros(8, 3));
    match euler_integrate(&mut tape, x0, &m.stack, &cfg, false) {
        Err(FlowError::Divergence { step, norm }) => {
            assert_eq!(step, 1);
            assert!(norm > 1e8);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn causal_logits_ignore_later_tokens() {
    let cfg = small_cfg();
    let p = ModelParams::init(&cfg, &mut RngState::new(18));
    let logits = |tokens: &[usize], mode| {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let (l, _) = forward_logits(&mut tape, &m, &cfg, mode, tokens).unwrap();
        tape.tensor(l)
    };
    for mode in [Mode::Ot, Mode::Node, Mode::Discrete] {
        let a = logits(&[0, 1, 2, 3, 4, 0], mode);
        let b = logits(&[0, 1, 2, 4, 4, 1], mode);
        for c in 0..6 {
            let same = a.col(c) == b.col(c);
            assert_eq!(same, c < 3, "{mode:?} column {c}");
        }
    }
}

#[test]
fn non_causal_attention_mixes_all_positions() {
    let cfg = ModelConfig {
        causal: false,
        ..small_cfg()
    };
    let p = ModelParams::init(&cfg, &mut RngState::new(19));
    let logits = |tokens: &[usize]| {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let (l, _) = forward_logits(&mut tape, &m, &cfg, Mode::Ot, tokens).unwrap();
        tape.tensor(l)
    };
    let a = logits(&[0, 1, 2, 3]);
    let b = logits(&[0, 1, 2, 4]);
    assert_ne!(a.col(0), b.col(0));
}

fn opts(ln: LnPlacement) -> BlockOptions {
    BlockOptions { causal: true, ln }
}

#[test]
fn zeroed_branches_make_a_pre_ln_block_the_identity() {
    let cfg = small_cfg();
    let mut b = BlockParams::init(&cfg, &mut RngState::new(20));
    b.zero_branches();
    let x = Tensor::randn(8, 4, 1.0, &mut RngState::new(21));
    let mut tape = Tape::new();
    let bb = bind_block(&b, &mut tape);
    let xv = tape.leaf(&x);
    let y = block_forward(&mut tape, xv, &bb, opts(LnPlacement::Pre)).unwrap();
    assert_eq!(tape.tensor(y), x);
}

#[test]
fn post_ln_normalizes_each_column() {
    let cfg = small_cfg();
    let b = BlockParams::init(&cfg, &mut RngState::new(22));
    let x = Tensor::randn(8, 4, 3.0, &mut RngState::new(23));
    let mut tape = Tape::new();
    let bb = bind_block(&b, &mut tape);
    let xv = tape.leaf(&x);
    let yv = block_forward(&mut tape, xv, &bb, opts(LnPlacement::Post)).unwrap();
    let y = tape.tensor(yv);
    for c in 0..4 {
        let col = y.col(c);
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3, "var {var}, eps {LN_EPS}");
    }
}

#[test]
fn one_block_stack_is_that_block_and_composition_holds() {
    let cfg = small_cfg();
    let mut rng = RngState::new(24);
    let b1 = BlockParams::init(&cfg, &mut rng);
    let b2 = BlockParams::init(&cfg, &mut rng);
    let x = Tensor::randn(8, 5, 1.0, &mut rng);
    let o = opts(LnPlacement::Pre);

    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let one = StackParams {
        blocks: vec![b1.clone()],
        time_embed: None,
    };
    let s1 = ott_core::transformer::bind_stack(&one, &mut tape);
    let via_stack = stack_forward(&mut tape, xv, &s1, o, Some(0.3)).unwrap();
    let via_block = block_forward(&mut tape, xv, &s1.blocks[0], o).unwrap();
    assert_eq!(tape.tensor(via_stack), tape.tensor(via_block));

    let two = StackParams {
        blocks: vec![b1, b2],
        time_embed: None,
    };
    let s2 = ott_core::transformer::bind_stack(&two, &mut tape);
    let whole = stack_forward(&mut tape, xv, &s2, o, None).unwrap();
    let h = block_forward(&mut tape, xv, &s2.blocks[0], o).unwrap();
    let h = block_forward(&mut tape, h, &s2.blocks[1], o).unwrap();
    assert_eq!(tape.tensor(whole), tape.tensor(h));
}

#[test]
fn time_matters_only_with_time_conditioning() {
    for (time, should_differ) in [(TimeConditioning::None, false), (TimeConditioning::AppendScalar, true)] {
        let cfg = ModelConfig {
            time_conditioning: time,
            ..small_cfg()
        };
        let p = ModelParams::init(&cfg, &mut RngState::new(25));
        let x = Tensor::randn(8, 3, 1.0, &mut RngState::new(26));
        let at = |t: f64| {
            let mut tape = Tape::new();
            let m = p.bind(&mut tape);
            let xv = tape.leaf(&x);
            let y = stack_forward(&mut tape, xv, &m.stack, (&cfg).into(), Some(t)).unwrap();
            tape.tensor(y)
        };
        assert_eq!(at(0.0) != at(0.75), should_differ, "{time:?}");
    }
}

#[test]
fn missing_time_is_an_error_with_time_conditioning() {
    let cfg = ModelConfig {
        time_conditioning: TimeConditioning::AppendScalar,
        ..small_cfg()
    };
    let p = ModelParams::init(&cfg, &mut RngState::new(27));
    let mut tape = Tape::new();
    let m = p.bind(&mut tape);
    let xv = tape.leaf(&Tensor::zeros(8, 2));
    assert_eq!(
        stack_forward(&mut tape, xv, &m.stack, (&cfg).into(), None).unwrap_err(),
        ModelError::MissingTime
    );
}

#[test]
fn heavy_penalty_step_lowers_transport_cost() {
    let cfg = ModelConfig {
        lambda: 1e6,
        ..small_cfg()
    };
    let mut p = ModelParams::init(&cfg, &mut RngState::new(28));
    let batch = vec![TokenSample {
        input: vec![0, 1, 2, 3],
        target: vec![1, 2, 3, 4],
    }];
    let cost_and_grad = |p: &ModelParams| {
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let obj = training_objective(&mut tape, &m, &cfg, Mode::Ot, &batch).unwrap();
        let g = tape.backward(obj.loss).unwrap();
        let grads: Vec<Vec<f64>> = m.vars().iter().map(|v| g.get_or_zeros(&tape, *v)).collect();
        (obj.transport_cost, grads)
    };
    let (before, grads) = cost_and_grad(&p);
    let norm: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    let lr = 1e-3 / norm;
    for (t, g) in p.tensors_mut().into_iter().zip(&grads) {
        for (x, g) in t.data_mut().iter_mut().zip(g) {
            *x -= lr * g;
        }
    }
    let (after, _) = cost_and_grad(&p);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn random_field_trace_is_not_straight() {
    let cfg = ModelConfig { steps: 8, ..small_cfg() };
    let p = ModelParams::init(&cfg, &mut RngState::new(29));
    let mut p2 = p.clone();
    for t in p2.tensors_mut() {
        let noise = Tensor::randn(t.rows(), t.cols(), 0.5, &mut RngState::new(30));
        *t = t.add(&noise).unwrap();
    }
    let mut tape = Tape::new();
    let m = p2.bind(&mut tape);
    let x0 = tape.leaf(&Tensor::randn(8, 4, 1.0, &mut RngState::new(31)));
    let out = euler_integrate(&mut tape, x0, &m.stack, &cfg, true).unwrap();
    let s = straightness_metrics(&out.trace);
    assert!(s.velocity_dispersion > 1e-3, "{s:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transport_cost_is_non_negative_and_scales_with_dt(seed in 0u64..1000, steps in 1usize..6) {
        let cfg = ModelConfig { steps, depth: 1, ..small_cfg() };
        let p = ModelParams::init(&cfg, &mut RngState::new(seed));
        let mut tape = Tape::new();
        let m = p.bind(&mut tape);
        let x0 = tape.leaf(&Tensor::randn(8, 3, 1.0, &mut RngState::new(seed + 1)));
        let out = euler_integrate(&mut tape, x0, &m.stack, &cfg, true).unwrap();
        let tr = out.trace;
        prop_assert!(tr.transport_cost >= 0.0);
        let direct: f64 = tr.velocities.iter().map(|v| v.frobenius_norm_sq()).sum::<f64>() * tr.dt / 2.0;
        prop_assert!((direct - tr.transport_cost).abs() <= 1e-12 * direct.max(1e-300));
        prop_assert_eq!(tape.scalar(out.cost), tr.transport_cost);
    }

    #[test]
    fn linear_field_cost_matches_closed_form_for_one_step(a in -2.0f64..2.0, x in -2.0f64..2.0) {
        let mut tape = Tape::new();
        let xv = tape.leaf(&Tensor::column(&[x]));
        let field = Linear(Tensor::column(&[a]));
        let opts = EulerOptions { horizon: 0.5, steps: 1, record: false, normalize_by_tokens: false };
        let out = integrate_field(&mut tape, xv, &field, opts).unwrap();
        let want = 0.25 * (a * x) * (a * x);
        prop_assert!((out.trace.transport_cost - want).abs() <= 1e-15 * (1.0 + want));
        prop_assert!((out.trace.terminal.get(0, 0) - (x + 0.5 * a * x)).abs() <= 1e-15 * (1.0 + x.abs()));
    }
}
