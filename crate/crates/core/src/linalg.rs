//! Small dense solvers used by the oracles.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::math;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &Tensor) -> Result<Tensor, LinalgError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = math::sqrt(d);
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
pub fn cholesky_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    y
}

/// Largest singular value of `a` by power iteration on `aᵀa`.
///
/// The start vector is drawn from a fixed seed, so the result is
/// deterministic.
pub fn operator_norm(a: &Tensor) -> f64 {
    let (m, n) = (a.rows(), a.cols());
    if a.data().iter().all(|x| *x == 0.0) || m == 0 || n == 0 {
        return 0.0;
    }
    let mut rng = RngState::new(0x5eed_0f_5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    normalize(&mut v);
    let mut av = vec![0.0; m];
    let mut w = vec![0.0; n];
    let mut rho = 0.0;
    for _ in 0..200_000 {
        for i in 0..m {
            av[i] = (0..n).map(|j| a.get(i, j) * v[j]).sum();
        }
        for j in 0..n {
            w[j] = (0..m).map(|i| a.get(i, j) * av[i]).sum();
        }
        let next: f64 = w.iter().zip(&v).map(|(x, y)| x * y).sum();
        let resid = math::sqrt(
            w.iter()
                .zip(&v)
                .map(|(x, y)| (x - next * y) * (x - next * y))
                .sum::<f64>(),
        );
        rho = next;
        if resid <= 1e-14 * next {
            break;
        }
        v.copy_from_slice(&w);
        normalize(&mut v);
    }
    math::sqrt(rho)
}

fn normalize(v: &mut [f64]) {
    let n = math::sqrt(v.iter().map(|x| x * x).sum());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
