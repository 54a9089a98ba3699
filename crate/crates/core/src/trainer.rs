//! The simultaneous update loop, validation checkpointing and evaluation-time
//! oracle refits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, ParamId};
use crate::environments::{sample_minibatches, Batch, Environment, EnvironmentSet, Labels, Sampling, Task};
use crate::error::{Error, Result};
use crate::harness::metrics::evaluate;
use crate::linear::{fit_softmax, NewtonOptions};
use crate::models::{init_players, predict, Activation, ArchConfig, GKind, HeadKind, PlayerSet, Predictor};
use crate::objectives::{build_objective, perturbation, Method, ObjectiveConfig, RegretTerm, StepBatches};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { start: lr, end: lr }
    }

    /// Linear interpolation from `start` at step 0 to `end` at the last step.
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        if steps <= 1 {
            return self.start;
        }
        self.start + (self.end - self.start) * step as f64 / (steps - 1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitConfig {
    pub steps: usize,
    /// Step size for heads that are not fitted by Newton steps.
    pub lr: f64,
    pub grad_tol: f64,
}

impl Default for RefitConfig {
    fn default() -> Self {
        RefitConfig { steps: 200, lr: 0.5, grad_tol: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub phi_widths: Vec<usize>,
    pub phi_activation: Activation,
    pub head: HeadKind,
    pub g: GKind,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { phi_widths: vec![64, 16], phi_activation: Activation::Tanh, head: HeadKind::Linear, g: GKind::Mlp { hidden: 64 }, embed_dim: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
    /// Per-player gradient norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Validation is scored every this many steps for checkpoint selection.
    pub eval_every: usize,
    pub refit: RefitConfig,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn new(method: Method) -> Self {
        TrainConfig {
            objective: ObjectiveConfig::new(method),
            steps: 2000,
            batch_size: 32,
            lr: LrSchedule::constant(0.1),
            seed: 0,
            sampling: Sampling::WithReplacement,
            clip_norm: Some(10.0),
            eval_every: 100,
            refit: RefitConfig::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.end > 0.0 && self.lr.start >= self.lr.end) {
            return Err(Error::Config(format!("learning rate schedule needs start >= end > 0, got {:?}", self.lr)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    pub fn arch_for(&self, envs: &EnvironmentSet) -> ArchConfig {
        ArchConfig {
            input_dim: envs.dim(),
            phi_widths: self.model.phi_widths.clone(),
            phi_activation: self.model.phi_activation,
            head: self.model.head,
            outputs: envs.classes(),
            g: self.model.g,
            embed_dim: self.model.embed_dim,
            n_envs: envs.train.len(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub lr: f64,
    pub value: f64,
    pub main: f64,
    pub aux: Vec<f64>,
    pub oracle: Vec<f64>,
    pub perturbed_oracle: Vec<f64>,
    pub descriptor: f64,
    pub regrets: Vec<RegretTerm>,
    /// Pre-clipping gradient norm per player group.
    pub grad_norms: Vec<(String, f64)>,
}

/// Parameter groups a method updates.
pub fn trained_groups(players: &PlayerSet, method: Method) -> Vec<(String, Vec<ParamId>)> {
    players
        .groups()
        .into_iter()
        .filter(|(name, _)| {
            let kind = name.split('.').next().unwrap_or("");
            match method {
                Method::Erm => matches!(kind, "phi" | "f"),
                Method::Irm => matches!(kind, "phi" | "f" | "oracle"),
                Method::Rgm => matches!(kind, "phi" | "f" | "oracle" | "heldout"),
                Method::Srgm => true,
                Method::CrossGrad => matches!(kind, "phi" | "f" | "g"),
            }
        })
        .collect()
}

fn finite_or_abort(what: &str, v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what: what.to_string(), step })
    }
}

/// One simultaneous update of every player the method trains.
pub fn train_step(players: &mut PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig, lr: f64, clip: Option<f64>, step: usize) -> Result<StepTrace> {
    let mut out = build_objective(players, batches, cfg, None)?;
    finite_or_abort("objective", out.value, step)?;
    finite_or_abort("main", out.terms.main, step)?;
    players.store.zero_grads();
    out.tape.backward(out.surrogate, &mut players.store)?;
    let groups = trained_groups(players, cfg.method);
    let mut grad_norms = Vec::with_capacity(groups.len());
    for (name, ids) in &groups {
        let norm = match clip {
            Some(c) => players.store.clip_grad_norm(ids, c),
            None => players.store.grad_norm(ids),
        };
        finite_or_abort(&format!("grad.{name}"), norm, step)?;
        grad_norms.push((name.clone(), norm));
    }
    for (_, ids) in &groups {
        sgd_step(&mut players.store, ids, lr)?;
    }
    players.store.zero_grads();
    Ok(StepTrace {
        step,
        lr,
        value: out.value,
        main: out.terms.main,
        aux: out.terms.aux,
        oracle: out.terms.oracle,
        perturbed_oracle: out.terms.perturbed_oracle,
        descriptor: out.terms.descriptor,
        regrets: out.regrets,
        grad_norms,
    })
}

/// Update step for ERM, IRM and RGM.
pub fn rgm_step(players: &mut PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig, lr: f64, clip: Option<f64>, step: usize) -> Result<StepTrace> {
    if !matches!(cfg.method, Method::Erm | Method::Irm | Method::Rgm) {
        return Err(Error::Config(format!("rgm_step called with method {}", cfg.method)));
    }
    train_step(players, batches, cfg, lr, clip, step)
}

/// Update step for SRGM.
pub fn srgm_step(players: &mut PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig, lr: f64, clip: Option<f64>, step: usize) -> Result<StepTrace> {
    if cfg.method != Method::Srgm {
        return Err(Error::Config(format!("srgm_step called with method {}", cfg.method)));
    }
    train_step(players, batches, cfg, lr, clip, step)
}

/// Produces the per-step batches from a seeded stream, independent of the method.
pub struct BatchStream {
    envs: Vec<Batch>,
    batch_size: usize,
    sampling: Sampling,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(train: &[Environment], batch_size: usize, sampling: Sampling, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        BatchStream { envs: train.iter().map(Environment::to_batch).collect(), batch_size, sampling, rng }
    }

    pub fn next_batches(&mut self) -> Result<StepBatches> {
        let sizes: Vec<usize> = self.envs.iter().map(Batch::len).collect();
        let mb = sample_minibatches(&sizes, self.batch_size, self.sampling, &mut self.rng)?;
        Ok(StepBatches::new(mb.per_env.iter().zip(&self.envs).map(|(idx, env)| env.select(idx)).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub players: PlayerSet,
    /// Players at the best validation score seen so far.
    pub best: PlayerSet,
    pub best_step: usize,
    pub best_val: f64,
    pub trace: Vec<StepTrace>,
    /// Set when a non-finite value stopped the run; the trace covers the steps before it.
    pub aborted: Option<String>,
}

fn validation_score(players: &PlayerSet, env: &Environment, task: Task) -> Result<f64> {
    let m = evaluate(players, env)?;
    Ok(match task {
        Task::Classification { .. } => m.primary(),
        Task::Regression => -m.primary(),
    })
}

/// Run `cfg.steps` updates on fresh minibatches, scoring validation every
/// `eval_every` steps (and at the end) to keep the best checkpoint.
pub fn train(envs: &EnvironmentSet, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let arch = cfg.arch_for(envs);
    let mut players = init_players(&arch, cfg.seed)?;
    let mut stream = BatchStream::new(&envs.train, cfg.batch_size, cfg.sampling, cfg.seed);
    let mut best = players.clone();
    let mut best_val = validation_score(&players, &envs.validation, envs.task)?;
    let mut best_step = 0;
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut aborted = None;
    for step in 0..cfg.steps {
        let batches = stream.next_batches()?;
        let lr = cfg.lr.at(step, cfg.steps);
        match train_step(&mut players, &batches, &cfg.objective, lr, cfg.clip_norm, step) {
            Ok(t) => trace.push(t),
            Err(e @ (Error::NonFinite { .. } | Error::NonFiniteGradient { .. })) => {
                aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let v = validation_score(&players, &envs.validation, envs.task)?;
            if v > best_val {
                best_val = v;
                best_step = done;
                best = players.clone();
            }
        }
    }
    Ok(TrainOutput { players, best, best_step, best_val, trace, aborted })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefitResult {
    pub env_id: usize,
    pub perturbed: bool,
    pub loss_heldout: f64,
    pub loss_oracle: f64,
    pub regret: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// False when the step cap was hit before the gradient tolerance.
    pub converged: bool,
}

fn head_theta(players: &PlayerSet, head: &Predictor) -> Vec<f64> {
    let layer = &head.net.layers[0];
    let mut theta = players.store.value(layer.w).data().to_vec();
    match layer.b {
        Some(b) => theta.extend_from_slice(players.store.value(b).data()),
        None => theta.extend(std::iter::repeat_n(0.0, players.arch.outputs)),
    }
    theta
}

fn set_head_theta(players: &mut PlayerSet, head: &Predictor, theta: &[f64]) {
    let layer = head.net.layers[0].clone();
    let (d, c) = players.store.value(layer.w).shape();
    *players.store.value_mut(layer.w) = Tensor::from_vec(d, c, theta[..d * c].to_vec());
    if let Some(b) = layer.b {
        *players.store.value_mut(b) = Tensor::from_vec(1, c, theta[d * c..].to_vec());
    }
}

fn mean_loss(players: &PlayerSet, head: &Predictor, z: &Tensor, labels: &Labels) -> Result<f64> {
    let out = predict(head, &players.store, z)?;
    Ok(match labels {
        Labels::Class(y) => {
            let ls = crate::tensor::log_softmax_rows(&out);
            -y.iter().enumerate().map(|(i, &c)| ls.get(i, c)).sum::<f64>() / y.len() as f64
        }
        Labels::Real(y) => y.iter().enumerate().map(|(i, v)| (out.get(i, 0) - v).powi(2)).sum::<f64>() / y.len() as f64,
    })
}

/// Fit one head on `(z, labels)` and return (loss, grad norm, iterations, converged).
fn refit_head(players: &mut PlayerSet, head: &Predictor, z: &Tensor, labels: &Labels, cfg: &RefitConfig) -> Result<(f64, f64, usize, bool)> {
    match (players.arch.head, labels) {
        (HeadKind::Linear, Labels::Class(y)) => {
            let init = head_theta(players, head);
            let fit = fit_softmax(z, y, players.arch.outputs, &init, NewtonOptions { max_iters: cfg.steps, grad_tol: cfg.grad_tol });
            set_head_theta(players, head, &fit.theta);
            Ok((fit.loss, fit.grad_norm, fit.iterations, fit.converged))
        }
        _ => {
            let ids = head.params();
            let mut gn = f64::INFINITY;
            let mut it = 0;
            while it < cfg.steps {
                let mut tape = crate::autodiff::Tape::new();
                let zn = tape.constant(z.clone());
                let l = crate::objectives::env_loss(&mut tape, &players.store, head, zn, labels, crate::models::Bind::Train)?;
                let l = tape.scale(l, 1.0 / labels.len() as f64);
                players.store.zero_grads();
                tape.backward(l, &mut players.store)?;
                gn = players.store.grad_norm(&ids);
                if gn < cfg.grad_tol {
                    break;
                }
                sgd_step(&mut players.store, &ids, cfg.lr)?;
                it += 1;
            }
            players.store.zero_grads();
            Ok((mean_loss(players, head, z, labels)?, gn, it, gn < cfg.grad_tol))
        }
    }
}

/// Refit every oracle on its full environment with φ frozen and report the
/// regret of the current held-out head against it. When descriptors are
/// present and `perturbed` is set, the perturbed oracles are refit on
/// `φ + δ` of the whole environment as well.
pub fn refit_oracles(players: &mut PlayerSet, envs: &EnvironmentSet, cfg: &RefitConfig, perturbed: Option<f64>) -> Result<Vec<RefitResult>> {
    let mut out = Vec::new();
    for e in 0..players.n_envs() {
        let batch = envs.train[e].to_batch();
        let z = players.features(&batch.x)?;
        let oracle = players.oracles[e].clone();
        let (lo, gn, it, conv) = refit_head(players, &oracle, &z, &batch.labels, cfg)?;
        let lh = mean_loss(players, &players.heldout[e].clone(), &z, &batch.labels)?;
        out.push(RefitResult { env_id: e, perturbed: false, loss_heldout: lh, loss_oracle: lo, regret: lh - lo, grad_norm: gn, iterations: it, converged: conv });
        if let (Some(alpha), Some(desc)) = (perturbed, batch.descriptors.as_ref()) {
            let delta = perturbation(&players.store, &players.g, &z, desc, alpha)?;
            let zt = z.zip_map(&delta, |a, d| a + d);
            let pert = players.perturbed[e].clone();
            let (lo, gn, it, conv) = refit_head(players, &pert, &zt, &batch.labels, cfg)?;
            let lh = mean_loss(players, &players.heldout[e].clone(), &zt, &batch.labels)?;
            out.push(RefitResult { env_id: e, perturbed: true, loss_heldout: lh, loss_oracle: lo, regret: lh - lo, grad_norm: gn, iterations: it, converged: conv });
        }
    }
    Ok(out)
}
