//! Exhaustive Bayes predictors on small discrete instances.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_TOL: f64 = 1e-9;

/// Joint law of (e, x, y) given as `p(e)`, `p(x|e)` and `p(y|x,e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub p_env: Vec<f64>,
    /// `p_x[e][x]`
    pub p_x: Vec<Vec<f64>>,
    /// `p_y[e][x][y]`
    pub p_y: Vec<Vec<Vec<f64>>>,
}

impl DiscreteInstance {
    pub fn n_env(&self) -> usize {
        self.p_env.len()
    }

    pub fn n_x(&self) -> usize {
        self.p_x.first().map_or(0, Vec::len)
    }

    pub fn n_y(&self) -> usize {
        self.p_y.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.n_env() * self.n_x() * self.n_y();
        if cells == 0 || cells > 10_000 {
            return Err(Error::Config(format!("instance has {cells} cells; need 1..=10000")));
        }
        let check = |what: String, row: &[f64]| -> Result<()> {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > NORM_TOL {
                return Err(Error::Unnormalized(format!("{what} sums to {s}")));
            }
            Ok(())
        };
        check("p(e)".into(), &self.p_env)?;
        for e in 0..self.n_env() {
            check(format!("p(x|e={e})"), &self.p_x[e])?;
            for x in 0..self.n_x() {
                check(format!("p(y|x={x},e={e})"), &self.p_y[e][x])?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesResult {
    /// `f*(c)[y] = p(y | φ(x) = c)`; uniform on cells of zero mass.
    pub predictor: Vec<Vec<f64>>,
    /// Log-loss of `f*` in each environment.
    pub env_risks: Vec<f64>,
    /// Smallest log-loss any predictor on φ reaches in each environment.
    pub env_optimal: Vec<f64>,
    /// `env_risks − env_optimal`.
    pub gaps: Vec<f64>,
}

fn xlogy(p: f64, q: f64) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        p * q.ln()
    }
}

/// Per-cell label mass `m[c][y]` under weights `w(e)`.
fn cell_mass(inst: &DiscreteInstance, phi: &[usize], cells: usize, weights: &[f64]) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; inst.n_y()]; cells];
    for (e, &we) in weights.iter().enumerate() {
        for x in 0..inst.n_x() {
            let px = we * inst.p_x[e][x];
            for y in 0..inst.n_y() {
                m[phi[x]][y] += px * inst.p_y[e][x][y];
            }
        }
    }
    m
}

fn normalize_rows(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter().map(|v| v / s).collect()
            } else {
                vec![1.0 / row.len() as f64; row.len()]
            }
        })
        .collect()
}

/// Log-loss of a cell predictor in each environment.
pub fn env_risks(inst: &DiscreteInstance, phi: &[usize], predictor: &[Vec<f64>]) -> Vec<f64> {
    (0..inst.n_env())
        .map(|e| {
            let mut r = 0.0;
            for x in 0..inst.n_x() {
                for y in 0..inst.n_y() {
                    r -= xlogy(inst.p_x[e][x] * inst.p_y[e][x][y], predictor[phi[x]][y]);
                }
            }
            r
        })
        .collect()
}

/// Bayes predictor on a discrete representation `phi: x → cell`, with its
/// per-environment risks and the per-environment optimum.
pub fn brute_force_bayes(inst: &DiscreteInstance, phi: &[usize]) -> Result<BayesResult> {
    inst.validate()?;
    if phi.len() != inst.n_x() {
        return Err(Error::Shape { op: "brute_force_bayes", shapes: format!("φ over {} points, instance has {}", phi.len(), inst.n_x()) });
    }
    let cells = phi.iter().max().map_or(0, |m| m + 1);
    let predictor = normalize_rows(&cell_mass(inst, phi, cells, &inst.p_env));
    let risks = env_risks(inst, phi, &predictor);
    let mut optimal = Vec::with_capacity(inst.n_env());
    for e in 0..inst.n_env() {
        let mut w = vec![0.0; inst.n_env()];
        w[e] = 1.0;
        let best = normalize_rows(&cell_mass(inst, phi, cells, &w));
        optimal.push(env_risks(inst, phi, &best)[e]);
    }
    let gaps = risks.iter().zip(&optimal).map(|(r, o)| r - o).collect();
    Ok(BayesResult { predictor, env_risks: risks, env_optimal: optimal, gaps })
}

fn simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Random instance in which the environment is a function of x: each point
/// belongs to exactly one environment, so `p(y|x,e) = p(y|x,e(x))`.
pub fn random_env_determined_instance<R: Rng>(n_x: usize, n_env: usize, n_y: usize, rng: &mut R) -> DiscreteInstance {
    assert!(n_x >= n_env && n_env >= 1);
    let mut owner: Vec<usize> = (0..n_x).map(|x| if x < n_env { x } else { rng.random_range(0..n_env) }).collect();
    for i in (1..owner.len()).rev() {
        owner.swap(i, rng.random_range(0..=i));
    }
    let p_env = simplex(n_env, rng);
    let mut p_x = vec![vec![0.0; n_x]; n_env];
    for (e, row) in p_x.iter_mut().enumerate() {
        let own: Vec<usize> = (0..n_x).filter(|&x| owner[x] == e).collect();
        for (x, p) in own.iter().zip(simplex(own.len(), rng)) {
            row[*x] = p;
        }
    }
    let label_rows: Vec<Vec<f64>> = (0..n_x).map(|_| simplex(n_y, rng)).collect();
    let p_y = (0..n_env).map(|_| label_rows.clone()).collect();
    DiscreteInstance { p_env, p_x, p_y }
}
