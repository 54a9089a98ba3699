//! Losses and regularizers: environment losses, regret, RGM, the IRM penalty,
//! the descriptor negative-sampling loss, representation perturbation, SRGM and
//! the CrossGrad-style augmentation.
//!
//! Every objective is assembled as one surrogate node whose single backward
//! pass hands each player the gradient of its own loss. Oracles see the
//! representation through a reversal layer scaled by λ, so they descend their
//! loss while φ ascends it with weight λ. Held-out heads enter regret terms as
//! frozen constants and are trained only on their complement batches.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::environments::{Batch, Descriptor, Labels, CODE_BITS};
use crate::error::{Error, Result};
use crate::models::{Bind, DescriptorClassifier, PlayerSet, Predictor, Role};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Irm,
    Rgm,
    Srgm,
    #[serde(rename = "crossgrad")]
    CrossGrad,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Erm, Method::Irm, Method::Rgm, Method::Srgm, Method::CrossGrad];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irm => "irm",
            Method::Rgm => "rgm",
            Method::Srgm => "srgm",
            Method::CrossGrad => "crossgrad",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s.to_ascii_lowercase()).ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    pub fn needs_descriptors(self) -> bool {
        matches!(self, Method::Srgm | Method::CrossGrad)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub method: Method,
    pub lambda: f64,
    pub lambda_g: f64,
    pub alpha: f64,
    #[serde(default)]
    pub detach_phi_from_g: bool,
}

impl ObjectiveConfig {
    /// Defaults: λ = 0.1 where a regret or penalty exists, λ_g = α = 1 where a descriptor term exists.
    pub fn new(method: Method) -> Self {
        let lambda = if matches!(method, Method::Irm | Method::Rgm | Method::Srgm) { 0.1 } else { 0.0 };
        let desc = if method.needs_descriptors() { 1.0 } else { 0.0 };
        ObjectiveConfig { method, lambda, lambda_g: desc, alpha: desc, detach_phi_from_g: false }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("lambda_g", self.lambda_g), ("alpha", self.alpha)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretTerm {
    pub env_id: usize,
    pub loss_heldout: f64,
    pub loss_oracle: f64,
    pub regret: f64,
    pub perturbed: bool,
}

impl RegretTerm {
    pub fn new(env_id: usize, loss_heldout: f64, loss_oracle: f64, perturbed: bool) -> Self {
        RegretTerm { env_id, loss_heldout, loss_oracle, regret: loss_heldout - loss_oracle, perturbed }
    }
}

/// The batches of one step: `B_e` per environment and the matching `B_{-e}`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepBatches {
    pub per_env: Vec<Batch>,
    pub complements: Vec<Batch>,
}

impl StepBatches {
    pub fn new(per_env: Vec<Batch>) -> Self {
        let complements = (0..per_env.len())
            .map(|e| {
                let others: Vec<&Batch> = per_env.iter().enumerate().filter(|(k, _)| *k != e).map(|(_, b)| b).collect();
                Batch::concat(&others)
            })
            .collect();
        StepBatches { per_env, complements }
    }

    pub fn total_len(&self) -> usize {
        self.per_env.iter().map(Batch::len).sum()
    }
}

/// Summed loss `Σ ℓ(y, predictor(z))` over a batch: softmax cross-entropy for
/// class labels, squared error for real ones.
pub fn env_loss(tape: &mut Tape, store: &ParamStore, predictor: &Predictor, z: NodeId, labels: &Labels, bind: Bind) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch("env_loss"));
    }
    let out = predictor.forward(tape, store, z, bind)?;
    match labels {
        Labels::Class(y) => tape.softmax_cross_entropy(out, y),
        Labels::Real(y) => {
            let t = tape.constant(Tensor::from_vec(y.len(), 1, y.clone()));
            tape.mse(out, t)
        }
    }
}

/// `z` seen through a reversal layer scaled by `c`: identity forward, `−c·g`
/// backward. With `c = 0` the input is detached instead.
fn reversed(tape: &mut Tape, z: NodeId, c: f64) -> NodeId {
    if c == 0.0 {
        tape.detach(z)
    } else {
        let r = tape.grad_reverse(z);
        tape.grad_scale(r, c)
    }
}

/// `z` with its backward gradient scaled by `c`; detached when `c = 0`.
fn scaled(tape: &mut Tape, z: NodeId, c: f64) -> NodeId {
    if c == 0.0 {
        tape.detach(z)
    } else if c == 1.0 {
        z
    } else {
        tape.grad_scale(z, c)
    }
}

/// Regret of `oracle` against the held-out head on one environment batch.
///
/// Returns the surrogate contribution `λ·L^e(f_{-e}∘z)/n + L^e(oracle∘R_λ(z))/n`
/// (with `R_λ` the scaled reversal) and the numeric [`RegretTerm`]. φ thus
/// receives `λ·∇R^e` while the oracle descends its own loss.
#[allow(clippy::too_many_arguments)]
pub fn regret(
    tape: &mut Tape,
    store: &ParamStore,
    heldout: &Predictor,
    oracle: &Predictor,
    z: NodeId,
    labels: &Labels,
    lambda: f64,
    perturbed: bool,
) -> Result<(Option<NodeId>, NodeId, RegretTerm)> {
    heldout.expect_role(Role::HeldOut)?;
    oracle.expect_role(if perturbed { Role::PerturbedOracle } else { Role::Oracle })?;
    let n = labels.len() as f64;
    let zr = reversed(tape, z, lambda);
    let lo = env_loss(tape, store, oracle, zr, labels, Bind::Train)?;
    let lo = tape.scale(lo, 1.0 / n);
    let (held_node, held_value) = if lambda == 0.0 {
        let zc = tape.detach(z);
        let mut scratch = Tape::new();
        let zs = scratch.constant(tape.value(zc).clone());
        let lh = env_loss(&mut scratch, store, heldout, zs, labels, Bind::Frozen)?;
        (None, scratch.value(lh).item() / n)
    } else {
        let lh = env_loss(tape, store, heldout, z, labels, Bind::Frozen)?;
        let lh = tape.scale(lh, 1.0 / n);
        let v = tape.value(lh).item();
        (Some(tape.scale(lh, lambda)), v)
    };
    let term = RegretTerm::new(oracle.env.unwrap_or(0), held_value, tape.value(lo).item(), perturbed);
    Ok((held_node, lo, term))
}

fn distinct_descriptors(descriptors: &[Descriptor]) -> Result<(Vec<Descriptor>, Vec<usize>)> {
    if descriptors.len() < 2 {
        return Err(Error::DegenerateDescriptors(format!("batch of {} has no negatives", descriptors.len())));
    }
    let mut uniq: Vec<Descriptor> = Vec::new();
    let mut targets = Vec::with_capacity(descriptors.len());
    for d in descriptors {
        let k = match uniq.iter().position(|u| u == d) {
            Some(k) => k,
            None => {
                uniq.push(*d);
                uniq.len() - 1
            }
        };
        targets.push(k);
    }
    if uniq.len() < 2 {
        return Err(Error::DegenerateDescriptors("every example shares one descriptor".into()));
    }
    Ok((uniq, targets))
}

fn code_matrix(uniq: &[Descriptor]) -> Tensor {
    let data = uniq.iter().flat_map(|d| d.signs()).collect();
    Tensor::from_vec(uniq.len(), CODE_BITS, data)
}

/// Negative-sampling descriptor loss `−Σ_i log p(s_i | x_i, B)`, where the
/// softmax runs over `g(z_i)·enc(s_k)` for the distinct descriptors `s_k` of
/// the batch.
pub fn descriptor_ns_loss(tape: &mut Tape, store: &ParamStore, g: &DescriptorClassifier, z: NodeId, descriptors: &[Descriptor], bind: Bind) -> Result<NodeId> {
    if tape.value(z).rows() != descriptors.len() {
        return Err(Error::Shape { op: "descriptor_ns_loss", shapes: format!("{} rows vs {} descriptors", tape.value(z).rows(), descriptors.len()) });
    }
    let (uniq, targets) = distinct_descriptors(descriptors)?;
    let codes = tape.constant(code_matrix(&uniq));
    let keys = g.encode(tape, store, codes, bind)?;
    let q = g.score(tape, store, z, bind)?;
    tape.batch_dot_softmax(q, keys, &targets)
}

/// `z + α·∇_z ℓ_NS(s, g(z))`, the gradient taken of the summed loss and
/// returned as a constant.
pub fn perturb_representation(store: &ParamStore, g: &DescriptorClassifier, z: &Tensor, descriptors: &[Descriptor], alpha: f64) -> Result<Tensor> {
    let delta = perturbation(store, g, z, descriptors, alpha)?;
    Ok(z.zip_map(&delta, |a, d| a + d))
}

/// The perturbation `δ = α·∇_z ℓ_NS` alone.
pub fn perturbation(store: &ParamStore, g: &DescriptorClassifier, z: &Tensor, descriptors: &[Descriptor], alpha: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let loss = descriptor_ns_loss(&mut tape, store, g, zn, descriptors, Bind::Frozen)?;
    let mut scratch = ParamStore::new();
    tape.backward(loss, &mut scratch)?;
    Ok(tape.grad(zn).scaled(alpha))
}

/// Per-term loss values of one objective evaluation, each divided by its own batch size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// `L(f∘φ)` over the union of the environment batches.
    pub main: f64,
    /// Summed `L^e(f∘φ)` per environment, before normalization.
    pub main_sums: Vec<f64>,
    /// `L^{-e}(f_{-e}∘φ)` on `B_{-e}`.
    pub aux: Vec<f64>,
    /// `L^e(f_e∘φ)`.
    pub oracle: Vec<f64>,
    /// `L^e(f_{-e}∘φ)`.
    pub heldout: Vec<f64>,
    /// `L^e(f̃_e∘(φ+δ))`.
    pub perturbed_oracle: Vec<f64>,
    /// `L^e(f_{-e}∘(φ+δ))`.
    pub perturbed_heldout: Vec<f64>,
    /// `L^e(f∘φ)` as used by the IRM penalty.
    pub irm_main: Vec<f64>,
    /// Descriptor loss over the union of the batches.
    pub descriptor: f64,
    /// `L(f∘(φ+δ))` for the augmentation comparator.
    pub augmented: f64,
}

/// One player's parameters, as addressed by [`player_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Player {
    Phi,
    F,
    G,
    Oracle(usize),
    HeldOut(usize),
    Perturbed(usize),
}

pub struct ObjectiveOutput {
    pub tape: Tape,
    /// Node whose backward pass yields every player's gradient.
    pub surrogate: NodeId,
    /// The objective value φ minimises.
    pub value: f64,
    pub terms: LossTerms,
    pub regrets: Vec<RegretTerm>,
    /// Perturbation applied to each environment batch, if any.
    pub deltas: Vec<Tensor>,
}

/// Assemble the objective selected by `cfg.method`.
///
/// `fixed_deltas` replaces the computed perturbations, which lets a finite
/// difference check hold δ constant as the backward pass does.
pub fn build_objective(players: &PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig, fixed_deltas: Option<&[Tensor]>) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    let n_envs = players.n_envs();
    if batches.per_env.len() < n_envs {
        return Err(Error::MissingBatch(batches.per_env.len()));
    }
    for b in &batches.per_env {
        if b.is_empty() {
            return Err(Error::EmptyBatch("objective"));
        }
        if cfg.method.needs_descriptors() && b.descriptors.is_none() {
            return Err(Error::MissingDescriptors { method: if cfg.method == Method::Srgm { "SRGM" } else { "CrossGrad" } });
        }
    }
    let store = &players.store;
    let lambda = cfg.lambda;
    let total = batches.total_len() as f64;
    let mut tape = Tape::new();
    let mut terms = LossTerms::default();
    let mut regrets = Vec::new();
    let mut deltas = Vec::new();
    let mut parts: Vec<NodeId> = Vec::new();

    let mut zs = Vec::with_capacity(n_envs);
    let mut main_sum_nodes = Vec::with_capacity(n_envs);
    for b in &batches.per_env[..n_envs] {
        let x = tape.constant(b.x.clone());
        let z = players.phi.forward(&mut tape, store, x)?;
        let l = env_loss(&mut tape, store, &players.f, z, &b.labels, Bind::Train)?;
        terms.main_sums.push(tape.value(l).item());
        main_sum_nodes.push(l);
        zs.push(z);
    }
    let main_sum = tape.sum(&main_sum_nodes)?;
    let main = tape.scale(main_sum, 1.0 / total);
    terms.main = tape.value(main).item();
    parts.push(main);
    let mut value = terms.main;

    let uses_aux = matches!(cfg.method, Method::Rgm | Method::Srgm);
    if uses_aux {
        for e in 0..n_envs {
            let others: Vec<Tensor> = (0..n_envs).filter(|&k| k != e).map(|k| tape.value(zs[k]).clone()).collect();
            let refs: Vec<&Tensor> = others.iter().collect();
            let zc = tape.constant(Tensor::vstack(&refs));
            let labels = &batches.complements[e].labels;
            let l = env_loss(&mut tape, store, &players.heldout[e], zc, labels, Bind::Train)?;
            let l = tape.scale(l, 1.0 / labels.len() as f64);
            terms.aux.push(tape.value(l).item());
            parts.push(l);
        }
    }

    match cfg.method {
        Method::Erm => {}
        Method::Irm => {
            for e in 0..n_envs {
                let b = &batches.per_env[e];
                let n = b.len() as f64;
                let zr = reversed(&mut tape, zs[e], lambda);
                let lo = env_loss(&mut tape, store, &players.oracles[e], zr, &b.labels, Bind::Train)?;
                let lo = tape.scale(lo, 1.0 / n);
                let lo_v = tape.value(lo).item();
                parts.push(lo);
                let lf_v = terms.main_sums[e] / n;
                if lambda != 0.0 {
                    let lf = env_loss(&mut tape, store, &players.f, zs[e], &b.labels, Bind::Train)?;
                    let lf = tape.scale(lf, lambda / n);
                    parts.push(lf);
                }
                terms.oracle.push(lo_v);
                terms.irm_main.push(lf_v);
                value += lambda * (lf_v - lo_v);
            }
        }
        Method::Rgm | Method::Srgm => {
            for e in 0..n_envs {
                let b = &batches.per_env[e];
                let (held, lo, term) = regret(&mut tape, store, &players.heldout[e], &players.oracles[e], zs[e], &b.labels, lambda, false)?;
                parts.extend(held);
                parts.push(lo);
                terms.heldout.push(term.loss_heldout);
                terms.oracle.push(term.loss_oracle);
                value += lambda * term.regret;
                regrets.push(term);
            }
        }
        Method::CrossGrad => {}
    }

    if cfg.method.needs_descriptors() {
        let gscale = if cfg.detach_phi_from_g { 0.0 } else { cfg.lambda_g };
        let mut ns_nodes = Vec::with_capacity(n_envs);
        for e in 0..n_envs {
            let desc = batches.per_env[e].descriptors.as_deref().expect("checked above");
            let zg = scaled(&mut tape, zs[e], gscale);
            ns_nodes.push(descriptor_ns_loss(&mut tape, store, &players.g, zg, desc, Bind::Train)?);
        }
        let ns = tape.sum(&ns_nodes)?;
        let lg = tape.scale(ns, 1.0 / total);
        terms.descriptor = tape.value(lg).item();
        value += cfg.lambda_g * terms.descriptor;
        parts.push(lg);

        let mut ztil = Vec::with_capacity(n_envs);
        for e in 0..n_envs {
            let desc = batches.per_env[e].descriptors.as_deref().expect("checked above");
            let delta = match fixed_deltas {
                Some(d) => d[e].clone(),
                None => perturbation(store, &players.g, tape.value(zs[e]), desc, cfg.alpha)?,
            };
            let dn = tape.constant(delta.clone());
            ztil.push(tape.add(zs[e], dn)?);
            deltas.push(delta);
        }

        if cfg.method == Method::Srgm {
            for e in 0..n_envs {
                let b = &batches.per_env[e];
                let (held, lo, term) = regret(&mut tape, store, &players.heldout[e], &players.perturbed[e], ztil[e], &b.labels, lambda, true)?;
                parts.extend(held);
                parts.push(lo);
                terms.perturbed_heldout.push(term.loss_heldout);
                terms.perturbed_oracle.push(term.loss_oracle);
                value += lambda * term.regret;
                regrets.push(term);
            }
        } else {
            let mut aug = Vec::with_capacity(n_envs);
            for e in 0..n_envs {
                aug.push(env_loss(&mut tape, store, &players.f, ztil[e], &batches.per_env[e].labels, Bind::Train)?);
            }
            let s = tape.sum(&aug)?;
            let a = tape.scale(s, 1.0 / total);
            terms.augmented = tape.value(a).item();
            value += terms.augmented;
            parts.push(a);
        }
    }

    let surrogate = tape.sum(&parts)?;
    Ok(ObjectiveOutput { tape, surrogate, value, terms, regrets, deltas })
}

/// The loss a given player descends under `cfg`, read off the loss terms.
pub fn player_loss(cfg: &ObjectiveConfig, value: f64, terms: &LossTerms, player: Player) -> f64 {
    match player {
        Player::Phi => {
            if cfg.detach_phi_from_g && cfg.method.needs_descriptors() {
                value - cfg.lambda_g * terms.descriptor
            } else {
                value
            }
        }
        Player::F => match cfg.method {
            Method::Irm => terms.main + cfg.lambda * terms.irm_main.iter().sum::<f64>(),
            Method::CrossGrad => terms.main + terms.augmented,
            _ => terms.main,
        },
        Player::G => terms.descriptor,
        Player::Oracle(e) => terms.oracle.get(e).copied().unwrap_or(0.0),
        Player::HeldOut(e) => terms.aux.get(e).copied().unwrap_or(0.0),
        Player::Perturbed(e) => terms.perturbed_oracle.get(e).copied().unwrap_or(0.0),
    }
}

fn expect_method(cfg: &ObjectiveConfig, allowed: &[Method], op: &str) -> Result<()> {
    if allowed.contains(&cfg.method) {
        Ok(())
    } else {
        Err(Error::Config(format!("{op} called with method {}", cfg.method)))
    }
}

pub fn erm_objective(players: &PlayerSet, batches: &StepBatches) -> Result<ObjectiveOutput> {
    build_objective(players, batches, &ObjectiveConfig::new(Method::Erm), None)
}

/// Pooled loss plus `λ·Σ_e R^e(φ)`, with the auxiliary losses on the side.
pub fn rgm_objective(players: &PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput> {
    expect_method(cfg, &[Method::Rgm], "rgm_objective")?;
    build_objective(players, batches, cfg, None)
}

/// Pooled loss plus `λ·Σ_e (L^e(f∘φ) − L^e(f_e∘φ))` with concurrently trained oracles.
pub fn irm_penalty(players: &PlayerSet, batches: &StepBatches, lambda: f64) -> Result<ObjectiveOutput> {
    let cfg = ObjectiveConfig { lambda, ..ObjectiveConfig::new(Method::Irm) };
    build_objective(players, batches, &cfg, None)
}

/// Pooled loss, `λ_g·L_g` and both unperturbed and perturbed regrets.
pub fn srgm_objective(players: &PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput> {
    expect_method(cfg, &[Method::Srgm], "srgm_objective")?;
    build_objective(players, batches, cfg, None)
}

/// Pooled loss on clean and perturbed representations plus `λ_g·L_g`.
pub fn crossgrad_augmented_loss(players: &PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig) -> Result<ObjectiveOutput> {
    expect_method(cfg, &[Method::CrossGrad], "crossgrad_augmented_loss")?;
    build_objective(players, batches, cfg, None)
}
