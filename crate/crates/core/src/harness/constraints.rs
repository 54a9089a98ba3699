//! Feasibility of a fixed representation under the invariance and regret
//! constraints, using binary logistic heads fitted to convergence.
//!
//! The held-out family `F_{-e}` is the ε-sublevel set of the complement loss.
//! It is explored from the complement optimum along random directions and
//! along the generalized eigenvectors of `(H_{-e}, H_e)`, each pushed out to
//! the boundary. A member's regret on `e` is charged net of its own
//! suboptimality on the complement, so identical environments give zero.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::environments::{EnvironmentSet, Labels};
use crate::error::{Error, Result};
use crate::linear::damped_solve;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintOptions {
    pub tolerance: f64,
    /// Width ε of the held-out family in complement loss.
    pub membership: f64,
    pub random_directions: usize,
    pub seed: u64,
    pub max_newton: usize,
}

impl Default for ConstraintOptions {
    fn default() -> Self {
        ConstraintOptions { tolerance: 1e-3, membership: 1e-2, random_directions: 32, seed: 0, max_newton: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub irm_gap: f64,
    pub rgm_gap: f64,
    pub irm_feasible: bool,
    pub rgm_feasible: bool,
    pub irm_gaps: Vec<f64>,
    pub rgm_gaps: Vec<f64>,
    /// All logistic fits reached the gradient tolerance.
    pub converged: bool,
}

/// Representation data of one environment: features and binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticData {
    x: DMatrix<f64>,
    s: Vec<f64>,
}

impl LogisticData {
    pub fn new(z: &Tensor, y: &[usize]) -> Result<Self> {
        if z.rows() != y.len() || y.is_empty() {
            return Err(Error::Shape { op: "check_constraints", shapes: format!("{} feature rows, {} labels", z.rows(), y.len()) });
        }
        if y.iter().any(|&c| c > 1) {
            return Err(Error::Config("constraint checks need binary labels".into()));
        }
        let d = z.cols();
        let x = DMatrix::from_fn(z.rows(), d + 1, |i, j| if j < d { z.get(i, j) } else { 1.0 });
        Ok(LogisticData { x, s: y.iter().map(|&c| if c == 1 { 1.0 } else { -1.0 }).collect() })
    }

    fn concat(parts: &[&LogisticData]) -> LogisticData {
        let rows: usize = parts.iter().map(|p| p.x.nrows()).sum();
        let cols = parts[0].x.ncols();
        let mut x = DMatrix::zeros(rows, cols);
        let mut s = Vec::with_capacity(rows);
        let mut r = 0;
        for p in parts {
            x.rows_mut(r, p.x.nrows()).copy_from(&p.x);
            s.extend_from_slice(&p.s);
            r += p.x.nrows();
        }
        LogisticData { x, s }
    }

    fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Mean logistic loss.
    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        let m = &self.x * theta;
        m.iter().zip(&self.s).map(|(v, s)| softplus(-s * v)).sum::<f64>() / self.s.len() as f64
    }

    fn derivatives(&self, theta: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.s.len() as f64;
        let m = &self.x * theta;
        let mut loss = 0.0;
        let mut r = DVector::zeros(self.s.len());
        let mut w = DVector::zeros(self.s.len());
        for (i, (v, s)) in m.iter().zip(&self.s).enumerate() {
            let t = s * v;
            loss += softplus(-t);
            let p = sigmoid(-t);
            r[i] = -s * p;
            w[i] = p * (1.0 - p);
        }
        let grad = self.x.tr_mul(&r) / n;
        let wx = DMatrix::from_fn(self.x.nrows(), self.x.ncols(), |i, j| w[i] * self.x[(i, j)]);
        let hess = self.x.tr_mul(&wx) / n;
        (loss / n, grad, hess)
    }
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

const GRAD_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Fit {
    theta: DVector<f64>,
    loss: f64,
    hess: DMatrix<f64>,
    converged: bool,
}

fn fit_logistic(data: &LogisticData, max_iters: usize) -> Fit {
    let mut theta = DVector::zeros(data.dim());
    let mut it = 0;
    loop {
        let (loss, grad, hess) = data.derivatives(&theta);
        let gn = grad.norm();
        if gn < GRAD_TOL || it >= max_iters {
            return Fit { theta, loss, hess, converged: gn < GRAD_TOL };
        }
        let step = damped_solve(&hess, &grad);
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &theta - &step * t;
            if data.loss(&cand) <= loss - 1e-4 * t * grad.dot(&step) {
                theta = cand;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        it += 1;
        if !moved {
            let (loss, grad, hess) = data.derivatives(&theta);
            return Fit { theta, loss, hess, converged: grad.norm() < GRAD_TOL };
        }
    }
}

/// Directions `d` solving `H_e d = κ H_o d`, scaled to unit `H_o`-norm.
fn generalized_eigen_dirs(h_o: &DMatrix<f64>, h_e: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let n = h_o.nrows();
    let mut h = h_o.clone();
    let mut jitter = 1e-12 * h_o.diagonal().amax().max(1e-300);
    let chol = loop {
        if let Some(c) = h.clone().cholesky() {
            break c;
        }
        for i in 0..n {
            h[(i, i)] += jitter;
        }
        jitter *= 10.0;
    };
    let l = chol.l();
    let Some(a) = l.solve_lower_triangular(h_e) else { return Vec::new() };
    let Some(m) = l.solve_lower_triangular(&a.transpose()) else { return Vec::new() };
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    (0..n)
        .filter_map(|k| l.transpose().solve_upper_triangular(&eig.eigenvectors.column(k).into_owned()))
        .collect()
}

/// Largest step `t` along `d` with `L_o(θ + t d) − min_o ≤ eps`, or `None`
/// when the loss never rises that far.
fn boundary_step(data: &LogisticData, theta: &DVector<f64>, min_loss: f64, d: &DVector<f64>, eps: f64) -> Option<f64> {
    let excess = |t: f64| data.loss(&(theta + d * t)) - min_loss;
    let mut hi = 1e-3;
    let mut found = false;
    for _ in 0..80 {
        if excess(hi) >= eps {
            found = true;
            break;
        }
        hi *= 2.0;
    }
    if !found {
        return None;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) >= eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(lo)
}

/// Check both constraints for representation data given per training environment.
pub fn check_constraints(envs: &[LogisticData], opts: &ConstraintOptions) -> Result<ConstraintReport> {
    if envs.len() < 2 {
        return Err(Error::Config(format!("constraint checks need at least two environments, got {}", envs.len())));
    }
    let fits: Vec<Fit> = envs.iter().map(|d| fit_logistic(d, opts.max_newton)).collect();
    let all: Vec<&LogisticData> = envs.iter().collect();
    let pooled = fit_logistic(&LogisticData::concat(&all), opts.max_newton);
    let mut converged = pooled.converged && fits.iter().all(|f| f.converged);

    let irm_gaps: Vec<f64> = envs.iter().zip(&fits).map(|(d, f)| d.loss(&pooled.theta) - f.loss).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dim = envs[0].dim();
    let random: Vec<DVector<f64>> = (0..opts.random_directions)
        .map(|_| {
            let v: DVector<f64> = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            let n = v.norm();
            v / n
        })
        .collect();

    let mut rgm_gaps = Vec::with_capacity(envs.len());
    for (e, data) in envs.iter().enumerate() {
        let others: Vec<&LogisticData> = envs.iter().enumerate().filter(|(i, _)| *i != e).map(|(_, d)| d).collect();
        let comp = LogisticData::concat(&others);
        let fo = fit_logistic(&comp, opts.max_newton);
        converged &= fo.converged;
        let charge = |h: &DVector<f64>| (data.loss(h) - fits[e].loss) - (comp.loss(h) - fo.loss);
        let mut worst = charge(&fo.theta);
        let mut dirs = random.clone();
        dirs.extend(generalized_eigen_dirs(&fo.hess, &fits[e].hess));
        for d in dirs {
            for sign in [1.0, -1.0] {
                let d = &d * sign;
                if let Some(t) = boundary_step(&comp, &fo.theta, fo.loss, &d, opts.membership) {
                    worst = worst.max(charge(&(&fo.theta + d * t)));
                }
            }
        }
        rgm_gaps.push(worst);
    }
    let irm_gap = irm_gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rgm_gap = rgm_gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(ConstraintReport {
        irm_gap,
        rgm_gap,
        irm_feasible: irm_gap <= opts.tolerance,
        rgm_feasible: rgm_gap <= opts.tolerance,
        irm_gaps,
        rgm_gaps,
        converged,
    })
}

/// Apply `phi` to every training environment and check the result.
pub fn check_representation(envs: &EnvironmentSet, phi: impl Fn(&Tensor) -> Tensor, opts: &ConstraintOptions) -> Result<ConstraintReport> {
    let data = envs
        .train
        .iter()
        .map(|env| {
            let b = env.to_batch();
            match &b.labels {
                Labels::Class(y) => LogisticData::new(&phi(&b.x), y),
                Labels::Real(_) => Err(Error::Config("constraint checks need class labels".into())),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    check_constraints(&data, opts)
}

/// Keep only the listed input columns.
pub fn select_columns(x: &Tensor, cols: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), cols.len());
    for i in 0..x.rows() {
        for (k, &c) in cols.iter().enumerate() {
            out.set(i, k, x.get(i, c));
        }
    }
    out
}
