#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use regretlab::objectives::player_loss;
use regretlab::{
    build_objective, init_players, ArchConfig, Batch, Descriptor, Example, FdOptions, FdReport, GKind, Label, Method, ObjectiveConfig, ParamId,
    PlayerSet, StepBatches, Tensor,
};
use regretlab::objectives::Player;

/// Small players: 3 inputs, φ widths [5, 4], 2 classes, `n_envs` environments.
pub fn toy_players(n_envs: usize, seed: u64) -> PlayerSet {
    let mut a = ArchConfig::new(3, 2, n_envs);
    a.phi_widths = vec![5, 4];
    a.g = GKind::Mlp { hidden: 5 };
    a.embed_dim = 4;
    init_players(&a, seed).unwrap()
}

/// Random batches of 4 to 7 examples per environment with at least two distinct descriptors each.
pub fn toy_batches(n_envs: usize, seed: u64) -> StepBatches {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_env = (0..n_envs)
        .map(|_| {
            let n = rng.random_range(4..8);
            let exs: Vec<Example> = (0..n)
                .map(|i| Example {
                    x: (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
                    y: Label::Class(rng.random_range(0..2)),
                    s: Some(Descriptor::new(if i < 2 { i as u16 } else { rng.random_range(0..6) })),
                })
                .collect();
            let idx: Vec<usize> = (0..n).collect();
            Batch::from_examples(&exs, &idx)
        })
        .collect();
    StepBatches::new(per_env)
}

pub fn player_params(p: &PlayerSet, player: Player) -> Vec<ParamId> {
    match player {
        Player::Phi => p.phi.net.params(),
        Player::F => p.f.params(),
        Player::G => p.g.params(),
        Player::Oracle(e) => p.oracles[e].params(),
        Player::HeldOut(e) => p.heldout[e].params(),
        Player::Perturbed(e) => p.perturbed[e].params(),
    }
}

pub fn players_of(method: Method, n_envs: usize) -> Vec<Player> {
    let mut out = vec![Player::Phi, Player::F];
    if method.needs_descriptors() {
        out.push(Player::G);
    }
    for e in 0..n_envs {
        match method {
            Method::Irm => out.push(Player::Oracle(e)),
            Method::Rgm => out.extend([Player::Oracle(e), Player::HeldOut(e)]),
            Method::Srgm => out.extend([Player::Oracle(e), Player::HeldOut(e), Player::Perturbed(e)]),
            Method::Erm | Method::CrossGrad => {}
        }
    }
    out
}

/// Finite-difference check of every player's gradient from one backward pass of the objective.
pub fn check_objective(players: &PlayerSet, batches: &StepBatches, cfg: &ObjectiveConfig) -> Vec<(Player, FdReport)> {
    let mut p = players.clone();
    let mut out = build_objective(&p, batches, cfg, None).unwrap();
    p.store.zero_grads();
    out.tape.backward(out.surrogate, &mut p.store).unwrap();
    let deltas = out.deltas.clone();
    players_of(cfg.method, p.n_envs())
        .into_iter()
        .map(|player| {
            let ids = player_params(&p, player);
            let analytic: Vec<Tensor> = ids.iter().map(|&id| p.store.grad(id).clone()).collect();
            let base = p.clone();
            let report = regretlab::finite_diff_check(
                &p.store,
                &ids,
                &analytic,
                |store| {
                    let mut q = base.clone();
                    q.store = store.clone();
                    let o = build_objective(&q, batches, cfg, if deltas.is_empty() { None } else { Some(&deltas) }).unwrap();
                    player_loss(cfg, o.value, &o.terms, player)
                },
                FdOptions::default(),
            );
            (player, report)
        })
        .collect()
}

pub fn objective_config(method: Method, rng: &mut ChaCha8Rng) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::new(method);
    if !matches!(method, Method::Erm | Method::CrossGrad) {
        cfg.lambda = rng.random_range(0.05..1.0);
    }
    if method.needs_descriptors() {
        cfg.lambda_g = rng.random_range(0.1..1.5);
        cfg.alpha = rng.random_range(0.1..1.0);
    }
    cfg
}
