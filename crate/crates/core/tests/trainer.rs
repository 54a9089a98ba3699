mod common;

use std::collections::HashSet;

use common::{toy_batches, toy_players};
use regretlab::models::{Activation, Mlp};
use regretlab::objectives::{descriptor_ns_loss, env_loss};
use regretlab::trainer::trained_groups;
use regretlab::{
    build_objective, gen_descriptor_envs, gen_translation_envs, refit_oracles, sgd_step, srgm_step, train, train_step, Batch, DescriptorConfig,
    EnvironmentSet, GKind, Labels, Method, ObjectiveConfig, ParamStore, PlayerSet, StepBatches, Tape, Tensor, TrainConfig, TranslationConfig,
};

fn small_translation() -> EnvironmentSet {
    gen_translation_envs(&TranslationConfig { n_per_env: 400, ..TranslationConfig::reference() }, 3).unwrap()
}

fn small_descriptor() -> EnvironmentSet {
    let envs = gen_descriptor_envs(&DescriptorConfig { n_descriptors: 60, n_examples: 300, ..DescriptorConfig::reference() }, 3).unwrap();
    regretlab::cluster_envs(&envs).unwrap()
}

fn quick(method: Method, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(method);
    cfg.steps = steps;
    cfg.eval_every = 10;
    cfg.model.phi_widths = vec![8, 4];
    cfg.model.g = GKind::Mlp { hidden: 8 };
    cfg.model.embed_dim = 4;
    cfg
}

fn phi_f_bits(p: &PlayerSet) -> Vec<u64> {
    let mut ids = p.phi.net.params();
    ids.extend(p.f.params());
    ids.iter().flat_map(|&i| p.store.value(i).data().iter().map(|v| v.to_bits())).collect()
}

// Straight-line forward passes over plain vectors, sharing nothing with the tape.

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(0.0),
        Activation::Identity => v,
    }
}

fn mlp_rows(store: &ParamStore, net: &Mlp, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let last = net.layers.len() - 1;
    let mut h: Vec<Vec<f64>> = x.to_vec();
    for (li, layer) in net.layers.iter().enumerate() {
        let w = store.value(layer.w);
        let a = if li == last { net.output } else { net.hidden };
        h = h
            .iter()
            .map(|row| {
                (0..w.cols())
                    .map(|j| {
                        let mut s = layer.b.map_or(0.0, |b| store.value(b).get(0, j));
                        for (i, v) in row.iter().enumerate() {
                            s += v * w.get(i, j);
                        }
                        act(a, s)
                    })
                    .collect()
            })
            .collect();
    }
    h
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn summed_ce(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    logits
        .iter()
        .zip(y)
        .map(|(l, &c)| {
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - l[c]
        })
        .sum()
}

fn classes(b: &Batch) -> Vec<usize> {
    match &b.labels {
        Labels::Class(y) => y.clone(),
        Labels::Real(_) => unreachable!(),
    }
}

fn ns_loss(store: &ParamStore, p: &PlayerSet, z: &[Vec<f64>], desc: &[regretlab::Descriptor]) -> f64 {
    let mut uniq: Vec<regretlab::Descriptor> = Vec::new();
    let targets: Vec<usize> = desc
        .iter()
        .map(|d| {
            if let Some(k) = uniq.iter().position(|u| u == d) {
                k
            } else {
                uniq.push(*d);
                uniq.len() - 1
            }
        })
        .collect();
    let enc = store.value(p.g.encoder.w);
    let keys: Vec<Vec<f64>> = uniq
        .iter()
        .map(|d| {
            let s = d.signs();
            (0..enc.cols()).map(|j| s.iter().enumerate().map(|(i, v)| v * enc.get(i, j)).sum()).collect()
        })
        .collect();
    let q = mlp_rows(store, &p.g.g, z);
    let logits: Vec<Vec<f64>> = q.iter().map(|qi| keys.iter().map(|k| qi.iter().zip(k).map(|(a, b)| a * b).sum()).collect()).collect();
    summed_ce(&logits, &targets)
}

#[test]
fn srgm_forward_matches_straight_line_reimplementation() {
    let p = toy_players(2, 21);
    let b = toy_batches(2, 22);
    let cfg = ObjectiveConfig { lambda: 0.3, lambda_g: 0.7, alpha: 0.4, ..ObjectiveConfig::new(Method::Srgm) };
    let out = build_objective(&p, &b, &cfg, None).unwrap();
    let s = &p.store;
    let total = b.total_len() as f64;
    let zs: Vec<Vec<Vec<f64>>> = b.per_env.iter().map(|e| mlp_rows(s, &p.phi.net, &rows_of(&e.x))).collect();
    let ys: Vec<Vec<usize>> = b.per_env.iter().map(classes).collect();
    let tol = 1e-12;

    let main: f64 = zs.iter().zip(&ys).map(|(z, y)| summed_ce(&mlp_rows(s, &p.f.net, z), y)).sum::<f64>() / total;
    assert!((main - out.terms.main).abs() < tol);
    let mut value = main;
    for e in 0..2 {
        let k = 1 - e;
        let aux = summed_ce(&mlp_rows(s, &p.heldout[e].net, &zs[k]), &ys[k]) / ys[k].len() as f64;
        assert!((aux - out.terms.aux[e]).abs() < tol);
        let n = ys[e].len() as f64;
        let oracle = summed_ce(&mlp_rows(s, &p.oracles[e].net, &zs[e]), &ys[e]) / n;
        let held = summed_ce(&mlp_rows(s, &p.heldout[e].net, &zs[e]), &ys[e]) / n;
        assert!((oracle - out.terms.oracle[e]).abs() < tol);
        assert!((held - out.terms.heldout[e]).abs() < tol);
        value += cfg.lambda * (held - oracle);
    }
    let desc: Vec<Vec<regretlab::Descriptor>> = b.per_env.iter().map(|e| e.descriptors.clone().unwrap()).collect();
    let lg: f64 = (0..2).map(|e| ns_loss(s, &p, &zs[e], &desc[e])).sum::<f64>() / total;
    assert!((lg - out.terms.descriptor).abs() < tol);
    value += cfg.lambda_g * lg;
    for e in 0..2 {
        // δ is α times the gradient of the summed descriptor loss; compare against central differences.
        let h = 1e-6;
        for r in 0..zs[e].len() {
            for c in 0..zs[e][0].len() {
                let mut up = zs[e].clone();
                let mut dn = zs[e].clone();
                up[r][c] += h;
                dn[r][c] -= h;
                let num = cfg.alpha * (ns_loss(s, &p, &up, &desc[e]) - ns_loss(s, &p, &dn, &desc[e])) / (2.0 * h);
                assert!((num - out.deltas[e].get(r, c)).abs() < 1e-7);
            }
        }
        let zt: Vec<Vec<f64>> = zs[e].iter().enumerate().map(|(r, row)| row.iter().enumerate().map(|(c, v)| v + out.deltas[e].get(r, c)).collect()).collect();
        let n = ys[e].len() as f64;
        let po = summed_ce(&mlp_rows(s, &p.perturbed[e].net, &zt), &ys[e]) / n;
        let ph = summed_ce(&mlp_rows(s, &p.heldout[e].net, &zt), &ys[e]) / n;
        assert!((po - out.terms.perturbed_oracle[e]).abs() < tol);
        assert!((ph - out.terms.perturbed_heldout[e]).abs() < tol);
        value += cfg.lambda * (ph - po);
    }
    assert!((value - out.value).abs() < 1e-11);
}

#[test]
fn zero_alpha_gives_equal_regrets_at_initialization() {
    let p = toy_players(2, 4);
    let b = toy_batches(2, 5);
    let cfg = ObjectiveConfig { alpha: 0.0, ..ObjectiveConfig::new(Method::Srgm) };
    let out = build_objective(&p, &b, &cfg, None).unwrap();
    assert_eq!(out.regrets.len(), 4);
    for e in 0..2 {
        assert_eq!(out.regrets[e].regret, out.regrets[e + 2].regret);
    }
}

#[test]
fn player_groups_are_disjoint() {
    let p = toy_players(3, 0);
    let mut seen = HashSet::new();
    for (_, ids) in p.groups() {
        for id in ids {
            assert!(seen.insert(id), "parameter shared between players");
        }
    }
    assert_eq!(seen.len(), p.store.len());
}

#[test]
fn untrained_players_keep_their_parameters() {
    for method in [Method::Erm, Method::Irm, Method::Rgm, Method::Srgm, Method::CrossGrad] {
        let mut p = toy_players(2, 1);
        let b = toy_batches(2, 2);
        let trained: HashSet<String> = trained_groups(&p, method).into_iter().map(|(n, _)| n).collect();
        let before: Vec<(String, u64)> = p.groups().iter().map(|(n, ids)| (n.clone(), p.hash_params(ids))).collect();
        train_step(&mut p, &b, &ObjectiveConfig::new(method), 0.1, Some(10.0), 0).unwrap();
        for ((name, h0), (_, ids)) in before.iter().zip(p.groups()) {
            let changed = p.hash_params(&ids) != *h0;
            assert_eq!(changed, trained.contains(name), "{method}: group {name}");
        }
    }
}

#[test]
fn oracle_descends_its_own_loss() {
    let p0 = toy_players(2, 9);
    let b = toy_batches(2, 10);
    let cfg = ObjectiveConfig { lambda: 0.5, ..ObjectiveConfig::new(Method::Rgm) };
    let oracle_loss = |p: &PlayerSet, e: usize| {
        let mut t = Tape::new();
        let x = t.constant(b.per_env[e].x.clone());
        let z = p.phi.forward(&mut t, &p.store, x).unwrap();
        let l = env_loss(&mut t, &p.store, &p.oracles[e], z, &b.per_env[e].labels, regretlab::models::Bind::Train).unwrap();
        t.value(l).item()
    };
    let mut p = p0.clone();
    let mut out = build_objective(&p, &b, &cfg, None).unwrap();
    p.store.zero_grads();
    out.tape.backward(out.surrogate, &mut p.store).unwrap();
    for e in 0..2 {
        sgd_step(&mut p.store, &p.oracles[e].params(), 1e-4).unwrap();
        assert!(oracle_loss(&p, e) < oracle_loss(&p0, e));
    }
}

#[test]
fn detach_removes_only_the_descriptor_path_into_phi() {
    let p = toy_players(2, 30);
    let b = toy_batches(2, 31);
    let phi_grad = |cfg: &ObjectiveConfig| {
        let mut q = p.clone();
        let mut out = build_objective(&q, &b, cfg, None).unwrap();
        q.store.zero_grads();
        out.tape.backward(out.surrogate, &mut q.store).unwrap();
        q.phi.net.params().iter().flat_map(|&i| q.store.grad(i).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect::<Vec<u64>>()
    };
    let base = ObjectiveConfig { lambda: 0.2, lambda_g: 0.8, alpha: 0.5, ..ObjectiveConfig::new(Method::Srgm) };
    let detached = phi_grad(&ObjectiveConfig { detach_phi_from_g: true, ..base });
    let zero_g = phi_grad(&ObjectiveConfig { lambda_g: 0.0, ..base });
    assert_eq!(detached, zero_g);
    assert_ne!(detached, phi_grad(&base));
}

#[test]
fn step_dispatch_checks_the_method() {
    let mut p = toy_players(2, 0);
    let b = toy_batches(2, 1);
    assert!(srgm_step(&mut p, &b, &ObjectiveConfig::new(Method::Rgm), 0.1, None, 0).is_err());
    assert!(regretlab::rgm_step(&mut p, &b, &ObjectiveConfig::new(Method::Srgm), 0.1, None, 0).is_err());
}

#[test]
fn zero_steps_returns_initialization() {
    let envs = small_translation();
    let cfg = quick(Method::Rgm, 0);
    let out = train(&envs, &cfg).unwrap();
    let init = regretlab::init_players(&cfg.arch_for(&envs), cfg.seed).unwrap();
    assert_eq!(out.players, init);
    assert_eq!(out.best, init);
    assert!(out.trace.is_empty());
}

#[test]
fn training_is_deterministic() {
    let envs = small_descriptor();
    let cfg = quick(Method::Srgm, 60);
    let a = train(&envs, &cfg).unwrap();
    let b = train(&envs, &cfg).unwrap();
    assert_eq!(a.players, b.players);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn reductions_follow_the_erm_trajectory() {
    let t = small_translation();
    let erm = train(&t, &quick(Method::Erm, 200)).unwrap();
    let mut rgm = quick(Method::Rgm, 200);
    rgm.objective.lambda = 0.0;
    let rgm = train(&t, &rgm).unwrap();
    assert_eq!(phi_f_bits(&erm.players), phi_f_bits(&rgm.players));
    assert_eq!(erm.best_step, rgm.best_step);

    let d = small_descriptor();
    let erm = train(&d, &quick(Method::Erm, 200)).unwrap();
    let mut srgm = quick(Method::Srgm, 200);
    srgm.objective = ObjectiveConfig { lambda: 0.0, lambda_g: 0.0, alpha: 0.0, ..ObjectiveConfig::new(Method::Srgm) };
    let srgm = train(&d, &srgm).unwrap();
    assert_eq!(phi_f_bits(&erm.players), phi_f_bits(&srgm.players));
    for (a, b) in erm.trace.iter().zip(&srgm.trace) {
        assert_eq!(a.main.to_bits(), b.main.to_bits());
    }
}

#[test]
fn erm_fits_the_translation_training_data() {
    let envs = gen_translation_envs(&TranslationConfig::reference(), 0).unwrap();
    let mut cfg = TrainConfig::new(Method::Erm);
    cfg.model.phi_widths = vec![16];
    let out = train(&envs, &cfg).unwrap();
    let pooled = regretlab::Environment::new(0, envs.train.iter().flat_map(|e| e.examples.clone()).collect()).unwrap();
    let acc = regretlab::evaluate(&out.players, &pooled).unwrap().accuracy.unwrap();
    assert!(acc >= 0.93, "train accuracy {acc}");
}

#[test]
fn non_finite_values_abort_with_partial_trace() {
    let envs = small_translation();
    let mut cfg = quick(Method::Erm, 50);
    cfg.lr = regretlab::trainer::LrSchedule::constant(1e308);
    let out = train(&envs, &cfg).unwrap();
    let reason = out.aborted.expect("run should abort");
    assert!(reason.contains("non-finite"), "{reason}");
    assert!(out.trace.len() < 50);
    assert!(out.trace.iter().all(|t| t.value.is_finite()));
}

#[test]
fn refit_converges_and_is_idempotent() {
    let envs = small_descriptor();
    let cfg = quick(Method::Srgm, 100);
    let mut players = train(&envs, &cfg).unwrap().players;
    let first = refit_oracles(&mut players, &envs, &cfg.refit, Some(cfg.objective.alpha)).unwrap();
    assert_eq!(first.len(), 2 * envs.train.len());
    for r in &first {
        assert!(r.converged && r.grad_norm < 1e-8, "{r:?}");
        assert!(r.regret >= -1e-6, "{r:?}");
    }
    let second = refit_oracles(&mut players, &envs, &cfg.refit, Some(cfg.objective.alpha)).unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert!((a.loss_oracle - b.loss_oracle).abs() < 1e-10);
    }
}

#[test]
fn checkpoints_roundtrip() {
    let envs = small_descriptor();
    let players = train(&envs, &quick(Method::CrossGrad, 20)).unwrap().players;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("players.ckpt");
    players.save(&path).unwrap();
    assert_eq!(PlayerSet::load(&path).unwrap(), players);
    assert!(PlayerSet::from_checkpoint(b"garbage").is_err());
}

#[test]
fn descriptor_classifier_learns_more_without_detach() {
    let envs = gen_descriptor_envs(&DescriptorConfig::reference(), 0).unwrap();
    let envs = regretlab::cluster_envs(&envs).unwrap();
    let batch_acc = |detach: bool| {
        let mut cfg = TrainConfig::new(Method::Srgm);
        cfg.steps = 500;
        cfg.model.phi_widths = vec![32, 16];
        cfg.objective.detach_phi_from_g = detach;
        let p = train(&envs, &cfg).unwrap().players;
        let mut stream = regretlab::BatchStream::new(&envs.train, 32, cfg.sampling, 99);
        let mut acc = 0.0;
        for _ in 0..50 {
            let b: StepBatches = stream.next_batches().unwrap();
            acc += b.per_env.iter().map(|x| regretlab::harness::metrics::descriptor_batch_accuracy(&p, x).unwrap()).sum::<f64>() / b.per_env.len() as f64;
        }
        acc / 50.0
    };
    let (attached, detached) = (batch_acc(false), batch_acc(true));
    assert!(attached > detached, "attached {attached} vs detached {detached}");
}

#[test]
fn descriptor_loss_rejects_degenerate_batches() {
    let p = toy_players(2, 0);
    let mut t = Tape::new();
    let z = t.constant(Tensor::zeros(3, 4));
    let same = vec![regretlab::Descriptor::new(1); 3];
    assert!(descriptor_ns_loss(&mut t, &p.store, &p.g, z, &same, regretlab::models::Bind::Train).is_err());
}
