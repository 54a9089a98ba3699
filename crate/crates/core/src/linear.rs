//! Full-batch fitting of linear softmax heads by damped Newton steps.
//!
//! Parameters are laid out as `W` (`d x C`, row-major) followed by `b` (`C`).
//! The softmax parametrisation is invariant to adding a constant across
//! classes; the damping term only regularises the step, never the objective.

use nalgebra::{DMatrix, DVector};

use crate::tensor::{log_softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { max_iters: 200, grad_tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NewtonFit {
    pub theta: Vec<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn logits(theta: &[f64], x: &Tensor, classes: usize) -> Tensor {
    let d = x.cols();
    let mut out = Tensor::zeros(x.rows(), classes);
    for i in 0..x.rows() {
        let row = x.row(i);
        for c in 0..classes {
            let mut v = theta[d * classes + c];
            for (j, xv) in row.iter().enumerate() {
                v += xv * theta[j * classes + c];
            }
            out.set(i, c, v);
        }
    }
    out
}

/// Mean cross-entropy of the head `theta` on `(x, y)`.
pub fn softmax_loss(theta: &[f64], x: &Tensor, y: &[usize], classes: usize) -> f64 {
    let ls = log_softmax_rows(&logits(theta, x, classes));
    -y.iter().enumerate().map(|(i, &c)| ls.get(i, c)).sum::<f64>() / y.len() as f64
}

/// Loss, gradient and Hessian of the mean cross-entropy.
pub fn softmax_derivatives(theta: &[f64], x: &Tensor, y: &[usize], classes: usize) -> (f64, DVector<f64>, DMatrix<f64>) {
    let d = x.cols();
    let k = (d + 1) * classes;
    let n = y.len() as f64;
    let ls = log_softmax_rows(&logits(theta, x, classes));
    let mut grad = DVector::zeros(k);
    let mut hess = DMatrix::zeros(k, k);
    let mut loss = 0.0;
    let mut xa = vec![1.0; d + 1];
    for (i, &yi) in y.iter().enumerate() {
        loss -= ls.get(i, yi);
        xa[..d].copy_from_slice(x.row(i));
        let p: Vec<f64> = (0..classes).map(|c| ls.get(i, c).exp()).collect();
        for c in 0..classes {
            let r = p[c] - if c == yi { 1.0 } else { 0.0 };
            for (j, xv) in xa.iter().enumerate() {
                grad[j * classes + c] += r * xv;
            }
        }
        for c1 in 0..classes {
            for c2 in 0..classes {
                let w = if c1 == c2 { p[c1] * (1.0 - p[c1]) } else { -p[c1] * p[c2] };
                if w == 0.0 {
                    continue;
                }
                for (j1, x1) in xa.iter().enumerate() {
                    let a = w * x1;
                    let row = j1 * classes + c1;
                    for (j2, x2) in xa.iter().enumerate() {
                        hess[(row, j2 * classes + c2)] += a * x2;
                    }
                }
            }
        }
    }
    (loss / n, grad / n, hess / n)
}

/// Minimise the mean cross-entropy from `init` until the gradient norm drops
/// below `grad_tol` or `max_iters` Newton steps have run.
pub fn fit_softmax(x: &Tensor, y: &[usize], classes: usize, init: &[f64], opts: NewtonOptions) -> NewtonFit {
    let k = (x.cols() + 1) * classes;
    assert_eq!(init.len(), k);
    let mut theta = DVector::from_column_slice(init);
    let mut iterations = 0;
    loop {
        let (loss, grad, hess) = softmax_derivatives(theta.as_slice(), x, y, classes);
        let gn = grad.norm();
        if gn < opts.grad_tol || iterations >= opts.max_iters || !loss.is_finite() {
            return NewtonFit { theta: theta.as_slice().to_vec(), loss, grad_norm: gn, iterations, converged: gn < opts.grad_tol };
        }
        let step = damped_solve(&hess, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - &step * t;
            let l = softmax_loss(cand.as_slice(), x, y, classes);
            if l <= loss - 1e-4 * t * grad.dot(&step) || (l <= loss && t < 1e-6) {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        if !accepted {
            let (loss, grad, _) = softmax_derivatives(theta.as_slice(), x, y, classes);
            let gn = grad.norm();
            return NewtonFit { theta: theta.as_slice().to_vec(), loss, grad_norm: gn, iterations, converged: gn < opts.grad_tol };
        }
    }
}

/// Solve `(H + μI) s = g`, growing `μ` until the Cholesky factorisation succeeds.
pub fn damped_solve(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let scale = hess.diagonal().amax().max(1e-300);
    let mut mu = 1e-12 * scale;
    loop {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += mu;
        }
        if let Some(ch) = h.cholesky() {
            return ch.solve(grad);
        }
        mu *= 10.0;
    }
}
