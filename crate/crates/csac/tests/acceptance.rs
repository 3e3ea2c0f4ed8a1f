//! Acceptance suite: one test per criterion, each printing a PASS line on
//! success (run with `--nocapture` to see them). The training-based
//! criteria (6 and 7) are full desk-scale experiments and take tens of
//! minutes; everything else is seconds to a couple of minutes.

use csac::coop::{
    cooperative_policy_loss, cooperative_policy_loss_with, normalize_over_batch, CoopRatios,
    Method, Trainer,
};
use csac::gradcheck;
use csac::harness::{run_to_completion, EpochStats, Hyper, MazeChoice, RunDir, TrainConfig};
use csac::maze::{builtin_maze, MazeEnv, ResetMode, Scale};
use csac::nn::{Activation, Mlp, SquashedGaussianPolicy};
use csac::replay::{Batch, TransitionRecord};
use csac::sac::{bellman_targets, SacAgent, SacConfig};
use csac::seeding::seeded_rng;
use csac::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    seeded_rng(seed, 7000)
}

fn small_agent(seed: u64, hidden: &[usize]) -> SacAgent {
    let cfg = SacConfig {
        hidden: hidden.to_vec(),
        activation: Activation::Tanh,
        ..SacConfig::default()
    };
    SacAgent::new(3, 2, vec![1.0; 3], &cfg, &mut rng(seed))
}

fn set_params(net: &mut Mlp, params: &[Tensor]) {
    for (dst, src) in net.params_mut().into_iter().zip(params) {
        *dst = src.clone();
    }
}

fn grads_of(net: &Mlp) -> Vec<Tensor> {
    net.params()
        .iter()
        .map(|p| Tensor::new(p.rows(), p.cols(), p.grad.clone().expect("gradient written")))
        .collect()
}

// ── criterion 1: gradient suite ─────────────────────────────────────

/// For 50 random small networks, the analytic gradients of the critic
/// loss, the SAC policy loss, the cooperative policy loss and the alpha
/// loss match central finite differences (h = 1e-5) with max relative
/// error <= 1e-4.
///
/// The networks use smooth (tanh) activations: a central-difference oracle
/// is only valid for differentiable functions, and ReLU/clamp/min
/// subgradients are pinned by exact-value unit tests instead. The
/// relative error uses a 1e-3 floor against rounding noise on near-zero
/// components, and the cooperative loss is differentiated with its batch
/// normalisation constants frozen at the centre point, which is exactly
/// the function whose gradient the detached-normaliser analytic path
/// computes.
#[test]
fn criterion_1_gradient_suite() {
    let h = 1e-5;
    let tol = 1e-4;
    let floor = 1e-3;
    let mut worst: f64 = 0.0;

    for trial in 0..50 {
        let mut agent = small_agent(1000 + trial, &[6]);
        let next_agent = small_agent(2000 + trial, &[6]);
        let mut r = rng(3000 + trial);
        agent.log_alpha = Tensor::scalar(r.gen_range(0.05..0.5f64).ln());
        let m = 6;
        let states = Tensor::new(m, 3, (0..m * 3).map(|_| r.gen_range(-1.0..1.0)).collect());
        let scaled = agent.scale_obs(&states);
        let actions = Tensor::new(m, 2, (0..m * 2).map(|_| r.gen_range(-0.9..0.9)).collect());
        let targets = Tensor::new(m, 1, (0..m).map(|_| r.gen_range(-1.0..1.0)).collect());
        let noise = Tensor::new(m, 2, (0..m * 2).map(|_| r.gen_range(-1.5..1.5)).collect());
        let eta = r.gen_range(0.0..=1.0);

        // Critic loss (mean squared Bellman error) wrt critic parameters.
        {
            let params: Vec<Tensor> = agent.critic1.params().into_iter().cloned().collect();
            let mut tape = Tape::new();
            let sv = tape.constant(&scaled);
            let av = tape.constant(&actions);
            let (loss, vars) =
                SacAgent::critic_loss_graph(&agent.critic1, &mut tape, sv, av, &targets).unwrap();
            tape.backward(loss).unwrap();
            let mut net = agent.critic1.clone();
            vars.write_grads(&tape, &mut net);
            let analytic = grads_of(&net);
            let numeric = gradcheck::central_difference(&params, h, |ps| {
                let mut c = agent.critic1.clone();
                set_params(&mut c, ps);
                let mut t = Tape::new();
                let sv = t.constant(&scaled);
                let av = t.constant(&actions);
                let (l, _) = SacAgent::critic_loss_graph(&c, &mut t, sv, av, &targets).unwrap();
                t.item(l)
            });
            worst = worst.max(gradcheck::max_rel_error(&analytic, &numeric, floor));
        }

        // SAC policy loss wrt policy parameters.
        {
            let params: Vec<Tensor> = agent.policy.net.params().into_iter().cloned().collect();
            let mut tape = Tape::new();
            let sv = tape.constant(&scaled);
            let (loss, vars, _) = agent.policy_loss_graph(&mut tape, sv, &noise).unwrap();
            tape.backward(loss).unwrap();
            let mut net = agent.policy.net.clone();
            vars.write_grads(&tape, &mut net);
            let analytic = grads_of(&net);
            let numeric = gradcheck::central_difference(&params, h, |ps| {
                let mut a = agent.clone();
                set_params(&mut a.policy.net, ps);
                let mut t = Tape::new();
                let sv = t.constant(&scaled);
                let (l, _, _) = a.policy_loss_graph(&mut t, sv, &noise).unwrap();
                t.item(l)
            });
            worst = worst.max(gradcheck::max_rel_error(&analytic, &numeric, floor));
        }

        // Cooperative policy loss wrt policy parameters, frozen normalisers.
        {
            let params: Vec<Tensor> = agent.policy.net.params().into_iter().cloned().collect();
            let mut tape = Tape::new();
            let sv = tape.constant(&scaled);
            let (loss, vars, _, constants) = cooperative_policy_loss_with(
                &mut tape,
                &agent,
                Some(&next_agent),
                false,
                sv,
                &noise,
                eta,
                None,
            )
            .unwrap();
            tape.backward(loss).unwrap();
            let mut net = agent.policy.net.clone();
            vars.write_grads(&tape, &mut net);
            let analytic = grads_of(&net);
            let numeric = gradcheck::central_difference(&params, h, |ps| {
                let mut a = agent.clone();
                set_params(&mut a.policy.net, ps);
                let mut t = Tape::new();
                let sv = t.constant(&scaled);
                let (l, _, _, _) = cooperative_policy_loss_with(
                    &mut t,
                    &a,
                    Some(&next_agent),
                    false,
                    sv,
                    &noise,
                    eta,
                    constants,
                )
                .unwrap();
                t.item(l)
            });
            worst = worst.max(gradcheck::max_rel_error(&analytic, &numeric, floor));
        }

        // Alpha loss wrt log-alpha.
        {
            let c = r.gen_range(-2.0..2.0);
            let la = agent.log_alpha.clone();
            let mut tape = Tape::new();
            let lav = tape.param(&la);
            let a = tape.exp(lav);
            let scaled_a = tape.affine(a, -c, 0.0);
            let loss = tape.mean_all(scaled_a);
            tape.backward(loss).unwrap();
            let mut target = la.clone();
            tape.write_grad(lav, &mut target);
            let analytic = vec![Tensor::new(1, 1, target.grad.clone().unwrap())];
            let numeric = gradcheck::central_difference(&[la], h, |ps| -ps[0].item().exp() * c);
            worst = worst.max(gradcheck::max_rel_error(&analytic, &numeric, floor));
        }
    }
    assert!(worst <= tol, "max relative error {worst} exceeds {tol}");
    println!("ACCEPTANCE 1 gradient suite: PASS (max rel error {worst:.2e} <= {tol:.0e})");
}

// ── criterion 2: algebraic property suite ───────────────────────────

#[test]
fn criterion_2_algebraic_properties() {
    // Batch normalisation: range and endpoints.
    let n = normalize_over_batch(&[2.0, 4.0, 6.0]);
    assert!(n.values.iter().zip(&[0.0, 0.5, 1.0]).all(|(a, b)| (a - b).abs() < 1e-7));
    let mut r = rng(42);
    for _ in 0..200 {
        let m = r.gen_range(1..64);
        let q: Vec<f64> = (0..m).map(|_| r.gen_range(-100.0..100.0)).collect();
        let n = normalize_over_batch(&q);
        assert!(n.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if m > 1 && (n.max - n.min) > 1e-9 {
            let lo = n.values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = n.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo.abs() < 1e-7 && (hi - 1.0).abs() < 1e-7);
        }
    }
    let constant = normalize_over_batch(&[3.0; 8]);
    assert!(constant.values.iter().all(|&v| v == 0.0));

    // Endpoint independence of the convex combination, by perturbation.
    let agent = small_agent(7, &[8]);
    let next = small_agent(8, &[8]);
    let states = Tensor::new(8, 3, (0..24).map(|_| r.gen_range(-1.0..1.0)).collect());
    let scaled = agent.scale_obs(&states);
    let noise = Tensor::new(8, 2, (0..16).map(|_| r.gen_range(-1.0..1.0)).collect());
    let loss_value = |a: &SacAgent, nx: &SacAgent, eta: f64| {
        let mut tape = Tape::new();
        let sv = tape.constant(&scaled);
        let (l, _, _) = cooperative_policy_loss(&mut tape, a, Some(nx), false, sv, &noise, eta)
            .unwrap();
        tape.item(l)
    };
    let mut next_perturbed = next.clone();
    for p in next_perturbed.critic1.params_mut() {
        for v in p.data_mut() {
            *v += 11.3;
        }
    }
    for p in next_perturbed.critic2.params_mut() {
        for v in p.data_mut() {
            *v -= 4.1;
        }
    }
    assert_eq!(loss_value(&agent, &next, 1.0), loss_value(&agent, &next_perturbed, 1.0));
    let mut own_perturbed = agent.clone();
    for p in own_perturbed.critic1.params_mut() {
        for v in p.data_mut() {
            *v += 5.7;
        }
    }
    for p in own_perturbed.critic2.params_mut() {
        for v in p.data_mut() {
            *v -= 2.9;
        }
    }
    assert_eq!(loss_value(&agent, &next, 0.0), loss_value(&own_perturbed, &next, 0.0));

    // Affinity in eta: three-point collinearity (and more) within 1e-10.
    let l0 = loss_value(&agent, &next, 0.0);
    let l1 = loss_value(&agent, &next, 1.0);
    for eta in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let expect = eta * l1 + (1.0 - eta) * l0;
        let got = loss_value(&agent, &next, eta);
        assert!((got - expect).abs() <= 1e-10, "eta {eta}: {got} vs {expect}");
    }

    // Terminal Bellman targets: y = r exactly when d = 1.
    let m = 16;
    let rewards = Tensor::new(m, 1, (0..m).map(|i| i as f64 * 0.37 - 2.0).collect());
    let dones = Tensor::full(m, 1, 1.0);
    let q = Tensor::new(m, 1, (0..m).map(|_| r.gen_range(-5.0..5.0)).collect());
    let lp = Tensor::new(m, 1, (0..m).map(|_| r.gen_range(-3.0..3.0)).collect());
    let y = bellman_targets(&rewards, &dones, &q, &lp, 0.3, 0.95, false);
    assert_eq!(y.data(), rewards.data());

    // Twin-critic symmetry: swapping critic labels leaves the SAC policy
    // loss unchanged.
    let sac_loss = |a: &SacAgent| {
        let mut tape = Tape::new();
        let sv = tape.constant(&scaled);
        let (l, _, _) = a.policy_loss_graph(&mut tape, sv, &noise).unwrap();
        tape.item(l)
    };
    let mut swapped = agent.clone();
    std::mem::swap(&mut swapped.critic1, &mut swapped.critic2);
    assert_eq!(sac_loss(&agent), sac_loss(&swapped));

    println!("ACCEPTANCE 2 algebraic property suite: PASS");
}

// ── criterion 3: toy-MDP oracle ─────────────────────────────────────

/// Two-state deterministic MDP, gamma = 0.95: s0 -> s1 pays 1, s1 -> s0
/// pays 0, regardless of action, no terminal state. Analytic fixed point:
/// Q(s0) = 1 / (1 - gamma^2), Q(s1) = gamma / (1 - gamma^2). The critic
/// machinery (targets from twin target networks, mean squared Bellman
/// error steps, soft updates) must reproduce both within 5%.
#[test]
fn criterion_3_toy_mdp_oracle() {
    let gamma = 0.95;
    let q0_true = 1.0 / (1.0 - gamma * gamma);
    let q1_true = gamma / (1.0 - gamma * gamma);

    let cfg = SacConfig {
        gamma,
        tau: 0.02,
        learning_rate: 1e-3,
        hidden: vec![32, 32],
        activation: Activation::Relu,
        auto_alpha: false,
        init_alpha: 0.0,
        ..SacConfig::default()
    };
    let mut r = rng(99);
    let mut agent = SacAgent::new(2, 2, vec![1.0; 2], &cfg, &mut r);

    let s0 = vec![1.0, 0.0];
    let s1 = vec![0.0, 1.0];
    let m = 64;
    for _ in 0..4000 {
        let records: Vec<TransitionRecord> = (0..m)
            .map(|_| {
                let from_s0 = r.gen_bool(0.5);
                TransitionRecord {
                    state: if from_s0 { s0.clone() } else { s1.clone() },
                    action: vec![r.gen_range(-0.9..0.9), r.gen_range(-0.9..0.9)],
                    rewards: vec![if from_s0 { 1.0 } else { 0.0 }],
                    next_state: if from_s0 { s1.clone() } else { s0.clone() },
                    done: false,
                }
            })
            .collect();
        let refs: Vec<&TransitionRecord> = records.iter().collect();
        let batch = Batch::from_records(&refs);
        let noise = agent.draw_noise(m, &mut r);
        let policy = agent.policy.clone();
        let targets = agent
            .compute_targets(&batch.reward_channel(0), &batch.next_states, &batch.dones, &policy, &noise)
            .unwrap();
        agent.critic_step(&batch.states, &batch.actions, &targets).unwrap();
        agent.soft_target_update();
    }

    let probe = |agent: &SacAgent, s: &[f64], truth: f64| -> f64 {
        let mut worst: f64 = 0.0;
        for ax in [-0.8, -0.3, 0.2, 0.7] {
            for ay in [-0.6, 0.0, 0.5] {
                let states = Tensor::new(1, 2, s.to_vec());
                let actions = Tensor::new(1, 2, vec![ax, ay]);
                let q = agent.min_q(&states, &actions).unwrap().item();
                worst = worst.max((q - truth).abs() / truth);
            }
        }
        worst
    };
    let err0 = probe(&agent, &s0, q0_true);
    let err1 = probe(&agent, &s1, q1_true);
    assert!(err0 <= 0.05, "Q(s0) off by {:.1}% (> 5%)", err0 * 100.0);
    assert!(err1 <= 0.05, "Q(s1) off by {:.1}% (> 5%)", err1 * 100.0);
    println!(
        "ACCEPTANCE 3 toy-MDP oracle: PASS (Q errors {:.2}% / {:.2}%)",
        err0 * 100.0,
        err1 * 100.0
    );
}

// ── criterion 4: routing and scheduling audit ───────────────────────

/// 100 random episodes in the 3-room maze: every transition lands in the
/// acting subtask's buffer (checked against room membership of the stored
/// state); a short training run updates critic j only from minibatches of
/// B_j and B_{j-1}; the final bundle's policy update reads no other
/// bundle's critics.
#[test]
fn criterion_4_routing_and_scheduling_audit() {
    let spec = builtin_maze(3, Scale::Desk).unwrap();
    let mut env = MazeEnv::new(spec.clone());
    let sac_cfg = SacConfig { hidden: vec![16, 16], ..SacConfig::default() };
    let ratios = CoopRatios::broadcast(0.1, 3).unwrap();
    let mut trainer = Trainer::new(
        Method::Csac,
        3,
        spec.observation_dim(),
        2,
        spec.observation_scale(),
        &sac_cfg,
        ratios,
        32,
        100_000,
        424,
    )
    .unwrap();
    trainer.warmup = 200;
    let mut env_rng = seeded_rng(425, 0);

    let mut total_steps = 0;
    for _ in 0..100 {
        let log = trainer
            .gather_episode(&mut env, ResetMode::Exploration, &mut env_rng, 150)
            .unwrap();
        total_steps += log.steps;
    }
    let buffered: usize = trainer.bundles.iter().map(|b| b.buffer.len()).sum();
    assert_eq!(buffered, total_steps, "every step stored exactly once");
    let k = spec.laser_beams;
    for bundle in &trainer.bundles {
        for record in bundle.buffer.iter() {
            let (x, y) = (record.state[k], record.state[k + 1]);
            assert_eq!(
                spec.room_of(x, y),
                Some(bundle.index),
                "record in B_{} has state in room {:?}",
                bundle.index,
                spec.room_of(x, y)
            );
        }
    }

    // Short training run, then audit the critic update sources.
    for _ in 0..30 {
        trainer.train_loop_once().unwrap();
    }
    let audit = &trainer.audit.critic_updates;
    let mut trained_any = false;
    for owner in 0..3 {
        for source in 0..3 {
            let count = audit[owner][source];
            trained_any |= count > 0;
            let allowed = source == owner || source + 1 == owner;
            assert!(
                allowed || count == 0,
                "critic {owner} received {count} updates from B_{source}"
            );
        }
    }
    assert!(trained_any, "the audit must witness actual updates");

    // Final bundle independence: perturbing any other bundle's critics
    // leaves its policy loss unchanged.
    let states = {
        let records = trainer.bundles[2].buffer.sample(16, &mut rng(426)).unwrap();
        Batch::from_records(&records).states
    };
    let noise = trainer.bundles[2].agent.draw_noise(16, &mut rng(427));
    let final_loss = |t: &Trainer| {
        let agent = &t.bundles[2].agent;
        let scaled = agent.scale_obs(&states);
        let mut tape = Tape::new();
        let sv = tape.constant(&scaled);
        let (l, _, _) =
            cooperative_policy_loss(&mut tape, agent, None, true, sv, &noise, 1.0).unwrap();
        tape.item(l)
    };
    let before = final_loss(&trainer);
    for foreign in 0..2 {
        for p in trainer.bundles[foreign].agent.critic1.params_mut() {
            for v in p.data_mut() {
                *v += 9.9;
            }
        }
    }
    assert_eq!(before, final_loss(&trainer), "final policy reads no foreign critic");

    println!(
        "ACCEPTANCE 4 routing/scheduling audit: PASS ({total_steps} steps routed, audit {:?})",
        audit
    );
}

// ── criterion 5: equivalence checks ─────────────────────────────────

fn synthetic_records(n_subtasks: usize, count: usize, seed: u64) -> Vec<TransitionRecord> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| TransitionRecord {
            state: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            action: (0..2).map(|_| r.gen_range(-0.9..0.9)).collect(),
            rewards: (0..n_subtasks).map(|_| r.gen_range(-0.2..0.2)).collect(),
            next_state: (0..3).map(|_| r.gen_range(-1.0..1.0)).collect(),
            done: r.gen_bool(0.05),
        })
        .collect()
}

fn assert_agents_equal(a: &SacAgent, b: &SacAgent, what: &str) {
    let pairs = [
        (a.policy.net.params(), b.policy.net.params()),
        (a.critic1.params(), b.critic1.params()),
        (a.critic2.params(), b.critic2.params()),
        (a.target1.params(), b.target1.params()),
        (a.target2.params(), b.target2.params()),
    ];
    for (pa, pb) in pairs {
        for (x, y) in pa.iter().zip(&pb) {
            assert_eq!(x.data(), y.data(), "{what}: parameter mismatch");
        }
    }
    assert_eq!(a.log_alpha.data(), b.log_alpha.data(), "{what}: alpha mismatch");
}

/// (a) A one-subtask CSAC trainer and a one-subtask single-agent trainer
/// must produce bit-identical parameters under lockstep seeds and data.
/// (b) The uncooperative trainer must match independent plain-SAC agents
/// given the same buffers and RNG streams, parameter for parameter.
#[test]
fn criterion_5_equivalence_checks() {
    let sac_cfg = SacConfig { hidden: vec![8, 8], ..SacConfig::default() };

    // (a) N=1: CSAC orchestration vs the single-agent path.
    let build = |method: Method| {
        let ratios = CoopRatios::broadcast(1.0, 1).unwrap();
        let mut t =
            Trainer::new(method, 1, 3, 2, vec![1.0; 3], &sac_cfg, ratios, 16, 10_000, 511)
                .unwrap();
        t.warmup = 16;
        for rec in synthetic_records(1, 200, 512) {
            t.bundles[0].buffer.push(rec).unwrap();
        }
        t
    };
    let mut csac_t = build(Method::Csac);
    let mut single_t = build(Method::Single);
    assert_agents_equal(&csac_t.bundles[0].agent, &single_t.bundles[0].agent, "init");
    for _ in 0..25 {
        csac_t.train_loop_once().unwrap();
        single_t.train_loop_once().unwrap();
    }
    assert_agents_equal(
        &csac_t.bundles[0].agent,
        &single_t.bundles[0].agent,
        "N=1 CSAC vs single-agent SAC",
    );

    // (b) Uncooperative trainer vs independent SAC agents on the same data.
    let spec = builtin_maze(3, Scale::Desk).unwrap();
    let mut env = MazeEnv::new(spec.clone());
    let ratios = CoopRatios::broadcast(1.0, 3).unwrap();
    let mut uncoop = Trainer::new(
        Method::Uncooperative,
        3,
        spec.observation_dim(),
        2,
        spec.observation_scale(),
        &sac_cfg,
        ratios,
        16,
        100_000,
        513,
    )
    .unwrap();
    uncoop.warmup = 64;
    let mut env_rng = seeded_rng(514, 0);
    while uncoop.bundles.iter().any(|b| b.buffer.len() < 64) {
        uncoop.gather_episode(&mut env, ResetMode::Exploration, &mut env_rng, 100).unwrap();
    }
    // Independent copies of each bundle, taken just before training.
    let mut independents: Vec<_> = uncoop
        .bundles
        .iter()
        .map(|b| (b.agent.clone(), b.buffer.clone(), b.sample_rng.clone(), b.noise_rng.clone()))
        .collect();

    for _ in 0..25 {
        uncoop.train_loop_once().unwrap();
        for (i, (agent, buffer, sample_rng, noise_rng)) in independents.iter_mut().enumerate() {
            let records = buffer.sample(16, sample_rng).expect("warm");
            let batch = Batch::from_records(&records);
            let rewards = batch.reward_channel(i);
            agent.update_from_batch(&batch, &rewards, noise_rng).unwrap();
        }
    }
    for (bundle, (agent, _, _, _)) in uncoop.bundles.iter().zip(&independents) {
        assert_agents_equal(
            &bundle.agent,
            agent,
            "uncooperative mode vs independent SAC agents",
        );
    }

    println!("ACCEPTANCE 5 equivalence checks: PASS (N=1 lockstep, uncooperative lockstep)");
}

// ── criteria 6 and 7: scaled headline experiments ───────────────────

fn desk_config(method: Method, rooms: usize, eta: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        method,
        maze: MazeChoice::Rooms(rooms),
        scale: Scale::Desk,
        seed,
        coop_ratios: vec![eta; rooms - 1],
        hyper: Hyper::desk_defaults(),
    }
}

/// Runs each config to completion in its own temp dir, in parallel worker
/// threads, and returns the per-epoch stats per config.
fn run_batch(configs: Vec<TrainConfig>) -> Vec<Vec<EpochStats>> {
    let results: Vec<std::sync::Mutex<Option<Vec<EpochStats>>>> =
        configs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if j >= configs.len() {
                    break;
                }
                let dir = tempfile::tempdir().expect("tempdir");
                let rd = RunDir::create(dir.path()).expect("run dir");
                let run = run_to_completion(configs[j].clone(), &rd, false).expect("run");
                *results[j].lock().unwrap() = Some(run.stats);
            });
        }
    });
    results.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

fn mean_curve(runs: &[Vec<EpochStats>]) -> Vec<f64> {
    let epochs = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| runs.iter().map(|r| r[e].eval_success_rate).sum::<f64>() / runs.len() as f64)
        .collect()
}

fn trailing_mean(curve: &[f64], fraction: f64) -> f64 {
    let window = ((curve.len() as f64 * fraction).ceil() as usize).max(1);
    let tail = &curve[curve.len() - window..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// First epoch (1-based) at which the mean curve reaches `level`, if any.
fn first_reach(curve: &[f64], level: f64) -> Option<usize> {
    curve.iter().position(|&s| s >= level).map(|i| i + 1)
}

struct HeadlineOutcome {
    csac_tail: f64,
    uncoop_tail: f64,
    csac_reach: Option<usize>,
    single_reach: Option<usize>,
}

fn headline_experiment(seeds: &[u64]) -> HeadlineOutcome {
    let mut configs = Vec::new();
    for &s in seeds {
        configs.push(desk_config(Method::Csac, 2, 0.1, s));
    }
    for &s in seeds {
        configs.push(desk_config(Method::Uncooperative, 2, 1.0, s));
    }
    for &s in seeds {
        configs.push(desk_config(Method::Single, 2, 1.0, s));
    }
    let results = run_batch(configs);
    let n = seeds.len();
    let csac = mean_curve(&results[..n]);
    let uncoop = mean_curve(&results[n..2 * n]);
    let single = mean_curve(&results[2 * n..]);
    HeadlineOutcome {
        csac_tail: trailing_mean(&csac, 0.2),
        uncoop_tail: trailing_mean(&uncoop, 0.2),
        csac_reach: first_reach(&csac, 0.8),
        single_reach: first_reach(&single, 0.8),
    }
}

fn headline_holds(o: &HeadlineOutcome) -> (bool, bool) {
    let margin_ok = o.csac_tail >= o.uncoop_tail + 0.15;
    let speed_ok = match (o.csac_reach, o.single_reach) {
        (Some(c), Some(s)) => s >= 3 * c,
        (Some(_), None) => true,
        (None, _) => false,
    };
    (margin_ok, speed_ok)
}

/// Desk-scale substitute for the full-scale headline comparison: on the
/// 2-room maze with 5 seeds each, (a) CSAC's mean success over the final
/// 20% of epochs exceeds the uncooperative baseline's by at least 0.15,
/// and (b) the single agent takes at least 3x as many epochs as CSAC to
/// first reach 80% mean success, or never reaches it in the budget.
/// Flaky-retry policy: on failure the whole experiment reruns once with
/// fresh seeds, and the retry decides.
#[test]
fn criterion_6_headline_two_room_comparison() {
    let outcome = headline_experiment(&[101, 102, 103, 104, 105]);
    let (margin_ok, speed_ok) = headline_holds(&outcome);
    let (outcome, margin_ok, speed_ok, retried) = if margin_ok && speed_ok {
        (outcome, margin_ok, speed_ok, false)
    } else {
        let retry = headline_experiment(&[201, 202, 203, 204, 205]);
        let (m, s) = headline_holds(&retry);
        (retry, m, s, true)
    };
    let detail = format!(
        "csac tail {:.3} vs uncoop tail {:.3}; 80% reach: csac {:?}, single {:?}{}",
        outcome.csac_tail,
        outcome.uncoop_tail,
        outcome.csac_reach,
        outcome.single_reach,
        if retried { " (after one retry with fresh seeds)" } else { "" }
    );
    assert!(margin_ok, "success-rate margin failed: {detail}");
    assert!(speed_ok, "convergence-speed factor failed: {detail}");
    println!("ACCEPTANCE 6 scaled headline experiment: PASS ({detail})");
}

/// Desk-scale 3-room check: the single agent's mean success stays below
/// 10% while CSAC (eta = 0.1) exceeds 50%, both measured over the final
/// 20% of epochs with 3 seeds each. Same flaky-retry policy as criterion 6.
#[test]
fn criterion_7_three_room_single_agent_fails() {
    let run = |seeds: &[u64]| {
        let mut configs = Vec::new();
        for &s in seeds {
            configs.push(desk_config(Method::Csac, 3, 0.1, s));
        }
        for &s in seeds {
            configs.push(desk_config(Method::Single, 3, 1.0, s));
        }
        let results = run_batch(configs);
        let n = seeds.len();
        let csac = trailing_mean(&mean_curve(&results[..n]), 0.2);
        let single = trailing_mean(&mean_curve(&results[n..]), 0.2);
        (csac, single)
    };
    let (mut csac, mut single) = run(&[301, 302, 303]);
    let mut retried = false;
    if !(csac > 0.5 && single < 0.1) {
        (csac, single) = run(&[401, 402, 403]);
        retried = true;
    }
    let detail = format!(
        "csac tail {csac:.3} (> 0.5 required), single tail {single:.3} (< 0.1 required){}",
        if retried { " (after one retry with fresh seeds)" } else { "" }
    );
    assert!(csac > 0.5, "{detail}");
    assert!(single < 0.1, "{detail}");
    println!("ACCEPTANCE 7 scaled 3-room check: PASS ({detail})");
}

// ── criterion 8: determinism ────────────────────────────────────────

/// Two runs with identical config and seed produce byte-identical metrics
/// CSV files.
#[test]
fn criterion_8_determinism() {
    let mut config = desk_config(Method::Csac, 2, 0.1, 777);
    config.hyper.epochs = 5;
    config.hyper.warmup = Some(200);

    let run_once = |config: &TrainConfig| -> Vec<u8> {
        let dir = tempfile::tempdir().unwrap();
        let rd = RunDir::create(dir.path()).unwrap();
        run_to_completion(config.clone(), &rd, false).unwrap();
        std::fs::read(rd.metrics_path()).unwrap()
    };
    let a = run_once(&config);
    let b = run_once(&config);
    assert_eq!(a, b, "metrics CSVs must be byte-identical");
    println!("ACCEPTANCE 8 determinism: PASS ({} identical bytes)", a.len());
}
