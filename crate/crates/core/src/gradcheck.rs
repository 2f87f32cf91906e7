//! Central-difference gradient checking.

use alloc::vec::Vec;

use crate::math;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step, in `(0, 1e-3]`.
    pub h: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so entries
    /// whose true gradient is zero are judged on absolute error. Scaled by
    /// `max(1, |f|)`, since rounding noise in the difference quotient grows
    /// with the function value.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares tape gradients of the scalar `f(params)` against central
/// differences, entry by entry.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    assert!(opts.h > 0.0 && opts.h <= 1e-3, "h must lie in (0, 1e-3]");
    let eval = |ps: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let floor = opts.floor * math::abs(tape.scalar(root)).max(1.0);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries: 0,
        tol: opts.tol,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(&tape, v);
        for e in 0..params[pi].len() {
            let x = params[pi].data()[e];
            work[pi].data_mut()[e] = x + opts.h;
            let fp = eval(&work)?;
            work[pi].data_mut()[e] = x - opts.h;
            let fm = eval(&work)?;
            work[pi].data_mut()[e] = x;
            let numeric = (fp - fm) / (2.0 * opts.h);
            let a = analytic[e];
            let denom = math::abs(a).max(math::abs(numeric)).max(floor);
            let rel = math::abs(a - numeric) / denom;
            report.entries += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((pi, e));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = RngState::new(1);
        let p = Tensor::randn(3, 4, 1.0, &mut rng);
        let r = grad_check(|t, v| t.frobenius_norm_sq(v[0]), &[p], GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_err < 1e-8, "{r:?}");
    }

    #[test]
    fn sign_flipped_backward_is_caught() {
        fn sq(x: f64) -> f64 {
            x * x
        }
        fn wrong_vjp(x: &[f64], _y: &[f64], g: &[f64]) -> Vec<f64> {
            x.iter().zip(g).map(|(x, g)| -2.0 * x * g).collect()
        }
        let mut rng = RngState::new(2);
        let p = Tensor::randn(2, 3, 1.0, &mut rng);
        let opts = GradCheckOptions::default();
        let r = grad_check(
            |t, v| {
                let y = t.custom_unary(v[0], sq, wrong_vjp)?;
                t.sum(y)
            },
            &[p],
            opts,
        )
        .unwrap();
        assert!(!r.passed());
        assert!(r.max_rel_err > opts.tol);
    }
}
