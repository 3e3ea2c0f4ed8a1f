//! Cooperative orchestration across sequential sub-agents.
//!
//! One agent bundle (policy, twin critics + targets, replay buffer) per
//! subtask. Data gathering hands control to the bundle of the current
//! subtask and routes every transition to the acting bundle's buffer. In a
//! training pass each bundle `n` samples a minibatch from its own buffer
//! and then:
//!
//! * trains critics `n` and `n + 1` on it, with next actions drawn from
//!   policy `n` (the policy that generated the data);
//! * updates policy `n` against the convex combination
//!   `eta * Q'_n + (1 - eta) * Q'_{n+1}` of batch-normalised critic minima
//!   (the final bundle, which has no successor, takes the plain SAC policy
//!   update);
//! * tunes its entropy temperature and soft-updates its target networks.
//!
//! The uncooperative baseline runs the same routing with plain per-bundle
//! SAC updates and no cross-critic training; the single-agent baseline runs
//! one bundle over the whole task on the summed reward.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::maze::{MazeEnv, MazeError, ResetMode};
use crate::nn::{MlpVars, NnError};
use crate::replay::{Batch, ReplayBuffer, ReplayError, TransitionRecord};
use crate::sac::{SacAgent, SacConfig, SacError};
use crate::seeding::{seeded_rng, STREAM_INIT, STREAM_NOISE, STREAM_SAMPLE};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum CoopError {
    #[error("cooperative ratio {0} is outside [0, 1]")]
    EtaOutOfRange(f64),
    #[error("expected {expected} cooperative ratios (one per non-final policy), got {got}")]
    RatioCount { expected: usize, got: usize },
    #[error("bundle {0} is not final but has no next bundle")]
    MissingNextBundle(usize),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Maze(#[from] MazeError),
}

/// Divisor guard for a constant batch; keeps the normalised output bounded
/// (all zeros) when max == min.
pub const NORM_EPS: f64 = 1e-8;

/// Critic values squeezed to [0, 1] across the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCriticBatch {
    pub values: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

/// `Q' = (Q - min) / (max - min + eps)`, recomputed fresh for every batch.
pub fn normalize_over_batch(q: &[f64]) -> NormalizedCriticBatch {
    assert!(!q.is_empty(), "cannot normalise an empty batch");
    let min = q.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let inv = 1.0 / (max - min + NORM_EPS);
    NormalizedCriticBatch { values: q.iter().map(|&v| (v - min) * inv).collect(), min, max }
}

/// `eta * Q'_self + (1 - eta) * Q'_next`, elementwise; stays in [0, 1].
pub fn convex_combine(
    q_self: &NormalizedCriticBatch,
    q_next: &NormalizedCriticBatch,
    eta: f64,
) -> Result<Vec<f64>, CoopError> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(CoopError::EtaOutOfRange(eta));
    }
    assert_eq!(q_self.values.len(), q_next.values.len(), "batch lengths differ");
    Ok(q_self
        .values
        .iter()
        .zip(&q_next.values)
        .map(|(&a, &b)| eta * a + (1.0 - eta) * b)
        .collect())
}

/// Per-cooperative-policy ratios; policy `N` has none.
#[derive(Debug, Clone, PartialEq)]
pub struct CoopRatios(Vec<f64>);

impl CoopRatios {
    pub fn new(etas: Vec<f64>, subtask_count: usize) -> Result<CoopRatios, CoopError> {
        if etas.len() != subtask_count.saturating_sub(1) {
            return Err(CoopError::RatioCount {
                expected: subtask_count.saturating_sub(1),
                got: etas.len(),
            });
        }
        for &e in &etas {
            if !(0.0..=1.0).contains(&e) {
                return Err(CoopError::EtaOutOfRange(e));
            }
        }
        Ok(CoopRatios(etas))
    }

    /// One shared ratio for every cooperative policy.
    pub fn broadcast(eta: f64, subtask_count: usize) -> Result<CoopRatios, CoopError> {
        CoopRatios::new(vec![eta; subtask_count.saturating_sub(1)], subtask_count)
    }

    pub fn get(&self, policy_index: usize) -> f64 {
        self.0[policy_index]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

// ── cooperative policy loss ─────────────────────────────────────────

/// Batch min/max pairs used to normalise the own and next critic values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConstants {
    pub own: (f64, f64),
    pub next: (f64, f64),
}

/// Records the cooperative policy loss for one agent on the tape:
/// `mean(alpha log pi(a'|s) - C(Q'_n, Q'_{n+1})(s, a'))` with `a'`
/// reparameterised from the agent's policy and each critic term the
/// batch-normalised minimum over that agent's twin critics.
///
/// Normalisation constants are computed from the forward values and held
/// constant in the gradient (min/max are detached). For the final agent
/// (`next_agent` = None with `is_final`) the loss is the plain SAC policy
/// loss on the agent's own critics.
///
/// Returns the loss node, the policy leaves, and the log-density node.
pub fn cooperative_policy_loss(
    tape: &mut Tape,
    agent: &SacAgent,
    next_agent: Option<&SacAgent>,
    is_final: bool,
    scaled_states: Var,
    noise: &Tensor,
    eta: f64,
) -> Result<(Var, MlpVars, Var), CoopError> {
    let (loss, vars, log_prob, _) = cooperative_policy_loss_with(
        tape,
        agent,
        next_agent,
        is_final,
        scaled_states,
        noise,
        eta,
        None,
    )?;
    Ok((loss, vars, log_prob))
}

/// As [`cooperative_policy_loss`], but the normalisation constants can be
/// frozen externally. This is what a finite-difference oracle needs: the
/// loss-with-detached-normalisers is only a fixed differentiable function
/// once the constants stop moving with the parameters.
///
/// Returns the constants that were used alongside the graph nodes.
#[allow(clippy::too_many_arguments)]
pub fn cooperative_policy_loss_with(
    tape: &mut Tape,
    agent: &SacAgent,
    next_agent: Option<&SacAgent>,
    is_final: bool,
    scaled_states: Var,
    noise: &Tensor,
    eta: f64,
    frozen: Option<NormConstants>,
) -> Result<(Var, MlpVars, Var, Option<NormConstants>), CoopError> {
    if next_agent.is_none() && !is_final {
        return Err(CoopError::MissingNextBundle(usize::MAX));
    }
    let Some(next) = next_agent else {
        // Final policy: only its own critic, plain SAC update.
        let (loss, vars, log_prob) = agent.policy_loss_graph(tape, scaled_states, noise)?;
        return Ok((loss, vars, log_prob, None));
    };
    if !(0.0..=1.0).contains(&eta) {
        return Err(CoopError::EtaOutOfRange(eta));
    }

    let (sample, vars) = agent.policy.sample(tape, scaled_states, noise, true)?;
    let input = tape.concat_cols(scaled_states, sample.action);

    let min_q = |tape: &mut Tape, a: &SacAgent| -> Result<Var, CoopError> {
        let (q1, _) = a.critic1.forward(tape, input, false)?;
        let (q2, _) = a.critic2.forward(tape, input, false)?;
        Ok(tape.min_elem(q1, q2))
    };
    let q_own = min_q(tape, agent)?;
    let q_next = min_q(tape, next)?;

    let constants = frozen.unwrap_or_else(|| {
        let own = normalize_over_batch(tape.data(q_own));
        let nxt = normalize_over_batch(tape.data(q_next));
        NormConstants { own: (own.min, own.max), next: (nxt.min, nxt.max) }
    });
    let normalize = |tape: &mut Tape, q: Var, (min, max): (f64, f64)| -> Var {
        let inv = 1.0 / (max - min + NORM_EPS);
        tape.affine(q, inv, -min * inv)
    };
    let qn_own = normalize(tape, q_own, constants.own);
    let qn_next = normalize(tape, q_next, constants.next);

    let own_scaled = tape.affine(qn_own, eta, 0.0);
    let next_scaled = tape.affine(qn_next, 1.0 - eta, 0.0);
    let combined = tape.add(own_scaled, next_scaled);

    let ent = tape.affine(sample.log_prob, agent.alpha(), 0.0);
    let gap = tape.sub(ent, combined);
    let loss = tape.mean_all(gap);
    Ok((loss, vars, sample.log_prob, Some(constants)))
}

// ── bundles and the trainer ─────────────────────────────────────────

/// One subtask's learnable state plus its private RNG streams.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    pub index: usize,
    pub agent: SacAgent,
    pub buffer: ReplayBuffer,
    /// Minibatch index draws.
    pub sample_rng: ChaCha8Rng,
    /// Exploration and reparameterisation noise.
    pub noise_rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Csac,
    Uncooperative,
    Single,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Csac => "csac",
            Method::Uncooperative => "uncooperative",
            Method::Single => "single",
        };
        f.write_str(s)
    }
}

/// Instrumentation: which buffer fed gradient steps into which critic, and
/// how many policy updates each bundle took.
#[derive(Debug, Clone, Default)]
pub struct UpdateAudit {
    /// `critic_updates[owner][source_buffer]` counts twin-pair updates.
    pub critic_updates: Vec<Vec<u64>>,
    pub policy_updates: Vec<u64>,
}

impl UpdateAudit {
    fn new(n: usize) -> UpdateAudit {
        UpdateAudit { critic_updates: vec![vec![0; n]; n], policy_updates: vec![0; n] }
    }
}

/// Per-pass training statistics, aggregated by the harness.
#[derive(Debug, Clone, Default)]
pub struct LoopStats {
    /// Mean critic loss per bundle (over the twin pair and both feeding
    /// minibatches, where applicable).
    pub critic_loss: Vec<f64>,
    pub policy_loss: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Bundles that actually trained this pass.
    pub trained: Vec<bool>,
}

/// One recorded step of a rolled-out episode.
#[derive(Debug, Clone)]
pub struct TrajStep {
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Applied velocities in world units.
    pub v: f64,
    pub omega: f64,
    /// Acting subtask (0-based).
    pub subtask: usize,
    pub rewards: Vec<f64>,
    /// Raw observation and normalised action, kept for critic re-evaluation.
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    pub steps: usize,
    /// Episode ended by the environment (goal or step limit) rather than
    /// by the caller's step budget.
    pub finished: bool,
    pub reached_goal: bool,
    /// Sum of each reward channel over the episode.
    pub subtask_returns: Vec<f64>,
    /// Which bundle acted at each step (audit).
    pub acting: Vec<usize>,
    pub trajectory: Vec<TrajStep>,
}

/// Orchestrates N bundles for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub method: Method,
    pub bundles: Vec<AgentBundle>,
    pub coop_ratios: CoopRatios,
    pub batch_size: usize,
    /// Minimum records per buffer before that bundle trains.
    pub warmup: usize,
    pub audit: UpdateAudit,
    subtask_count: usize,
    record_trajectories: bool,
}

impl Trainer {
    /// Builds the bundles for a method on an environment with `n` subtasks.
    /// All network initialisation and later randomness derives from `seed`
    /// through fixed stream ids, bundle `i` using streams offset by `i`.
    pub fn new(
        method: Method,
        subtask_count: usize,
        obs_dim: usize,
        action_dim: usize,
        obs_scale: Vec<f64>,
        sac_cfg: &SacConfig,
        coop_ratios: CoopRatios,
        batch_size: usize,
        buffer_capacity: usize,
        seed: u64,
    ) -> Result<Trainer, CoopError> {
        let bundle_count = match method {
            Method::Single => 1,
            _ => subtask_count,
        };
        if method == Method::Csac && coop_ratios.as_slice().len() != subtask_count - 1 {
            return Err(CoopError::RatioCount {
                expected: subtask_count - 1,
                got: coop_ratios.as_slice().len(),
            });
        }
        let mut bundles = Vec::with_capacity(bundle_count);
        for i in 0..bundle_count {
            let mut init_rng = seeded_rng(seed, STREAM_INIT + i as u64);
            let agent = SacAgent::new(obs_dim, action_dim, obs_scale.clone(), sac_cfg, &mut init_rng);
            bundles.push(AgentBundle {
                index: i,
                agent,
                buffer: ReplayBuffer::new(buffer_capacity, subtask_count),
                sample_rng: seeded_rng(seed, STREAM_SAMPLE + i as u64),
                noise_rng: seeded_rng(seed, STREAM_NOISE + i as u64),
            });
        }
        Ok(Trainer {
            method,
            bundles,
            coop_ratios,
            batch_size,
            warmup: batch_size.max(1000),
            audit: UpdateAudit::new(bundle_count),
            subtask_count,
            record_trajectories: false,
        })
    }

    pub fn subtask_count(&self) -> usize {
        self.subtask_count
    }

    pub fn set_record_trajectories(&mut self, on: bool) {
        self.record_trajectories = on;
    }

    /// Index of the bundle that acts in the given subtask.
    fn acting_bundle(&self, subtask: usize) -> usize {
        match self.method {
            Method::Single => 0,
            _ => subtask,
        }
    }

    /// Rolls out one episode. Exploration episodes act stochastically and
    /// store transitions in the acting bundle's buffer; evaluation episodes
    /// act deterministically and store nothing. `step_budget` caps the
    /// episode below the environment step limit when the epoch budget is
    /// nearly spent.
    pub fn gather_episode(
        &mut self,
        env: &mut MazeEnv,
        mode: ResetMode,
        env_rng: &mut ChaCha8Rng,
        step_budget: usize,
    ) -> Result<EpisodeLog, CoopError> {
        let (obs, mut subtask) = env.reset(mode, env_rng);
        let mut obs = obs.to_vec();
        let n = self.subtask_count;
        let mut log = EpisodeLog {
            subtask_returns: vec![0.0; n],
            ..EpisodeLog::default()
        };
        let store = mode == ResetMode::Exploration;
        loop {
            if log.steps >= step_budget {
                break;
            }
            let acting = self.acting_bundle(subtask);
            let bundle = &mut self.bundles[acting];
            let action = match mode {
                ResetMode::Evaluation => bundle.agent.act_deterministic(&obs)?,
                ResetMode::Exploration => bundle.agent.act_stochastic(&obs, &mut bundle.noise_rng)?,
            };
            let state_before = env.state();
            let result = env.step((action[0], action[1]))?;
            let next_obs = result.observation.to_vec();
            if store {
                bundle.buffer.push(TransitionRecord {
                    state: obs.clone(),
                    action: action.clone(),
                    rewards: result.rewards.clone(),
                    next_state: next_obs.clone(),
                    done: result.reached_goal,
                })?;
            }
            for (acc, r) in log.subtask_returns.iter_mut().zip(&result.rewards) {
                *acc += r;
            }
            log.acting.push(acting);
            if self.record_trajectories {
                let spec = env.spec();
                log.trajectory.push(TrajStep {
                    t: log.steps,
                    x: state_before.x,
                    y: state_before.y,
                    heading: state_before.heading,
                    v: action[0].clamp(-1.0, 1.0) * spec.v_max,
                    omega: action[1].clamp(-1.0, 1.0) * spec.omega_max,
                    subtask,
                    rewards: result.rewards.clone(),
                    obs: obs.clone(),
                    action: action.clone(),
                });
            }
            log.steps += 1;
            obs = next_obs;
            subtask = result.subtask;
            if result.done {
                log.finished = true;
                log.reached_goal = result.reached_goal;
                break;
            }
        }
        Ok(log)
    }

    /// Critic phase of one bundle iteration: critics `n` and `n + 1` (when
    /// present) each take one gradient step on the minibatch from `B_n`,
    /// with targets built from their own reward channel and next actions
    /// sampled once from policy `n`.
    ///
    /// Returns `(loss on critics n, loss on critics n+1 if any)`.
    pub fn train_critics_from_buffer(
        &mut self,
        n: usize,
        batch: &Batch,
    ) -> Result<(f64, Option<f64>), CoopError> {
        let m = batch.len();
        let noise = {
            let bundle = &mut self.bundles[n];
            bundle.agent.draw_noise(m, &mut bundle.noise_rng)
        };
        let acting_policy = self.bundles[n].agent.policy.clone();
        let cross = self.method == Method::Csac && n + 1 < self.bundles.len();

        let mut losses = (0.0, None);
        let targets_n = self.bundles[n].agent.compute_targets(
            &batch.reward_channel(n),
            &batch.next_states,
            &batch.dones,
            &acting_policy,
            &noise,
        )?;
        let (l1, l2) = self.bundles[n].agent.critic_step(&batch.states, &batch.actions, &targets_n)?;
        self.audit.critic_updates[n][n] += 1;
        losses.0 = (l1 + l2) / 2.0;

        if cross {
            let j = n + 1;
            let targets_j = self.bundles[j].agent.compute_targets(
                &batch.reward_channel(j),
                &batch.next_states,
                &batch.dones,
                &acting_policy,
                &noise,
            )?;
            let (l1, l2) =
                self.bundles[j].agent.critic_step(&batch.states, &batch.actions, &targets_j)?;
            self.audit.critic_updates[j][n] += 1;
            losses.1 = Some((l1 + l2) / 2.0);
        }
        Ok(losses)
    }

    /// One full training pass (Alg. 2): for each bundle in order, sample a
    /// minibatch from its buffer, train critics, update the policy, tune
    /// alpha, soft-update targets. Bundles whose buffers are below warm-up
    /// are skipped.
    pub fn train_loop_once(&mut self) -> Result<LoopStats, CoopError> {
        let count = self.bundles.len();
        let mut stats = LoopStats {
            critic_loss: vec![0.0; count],
            policy_loss: vec![0.0; count],
            alpha: self.bundles.iter().map(|b| b.agent.alpha()).collect(),
            trained: vec![false; count],
        };
        for n in 0..count {
            if self.bundles[n].buffer.len() < self.warmup.max(self.batch_size) {
                continue;
            }
            let batch = {
                let bundle = &mut self.bundles[n];
                let records = bundle
                    .buffer
                    .sample(self.batch_size, &mut bundle.sample_rng)
                    .expect("warmup guarantees enough records");
                Batch::from_records(&records)
            };
            match self.method {
                Method::Csac => {
                    let (own_loss, _) = self.train_critics_from_buffer(n, &batch)?;
                    stats.critic_loss[n] = own_loss;
                    stats.policy_loss[n] = self.csac_policy_update(n, &batch)?;
                }
                Method::Uncooperative | Method::Single => {
                    let rewards = match self.method {
                        Method::Single => batch.reward_sum(),
                        _ => batch.reward_channel(n),
                    };
                    let bundle = &mut self.bundles[n];
                    let (c, p) =
                        bundle.agent.update_from_batch(&batch, &rewards, &mut bundle.noise_rng)?;
                    self.audit.critic_updates[n][n] += 1;
                    stats.critic_loss[n] = c;
                    stats.policy_loss[n] = p;
                }
            }
            self.audit.policy_updates[n] += 1;
            stats.alpha[n] = self.bundles[n].agent.alpha();
            stats.trained[n] = true;
        }
        Ok(stats)
    }

    /// Policy, alpha and target phases of a CSAC bundle iteration.
    fn csac_policy_update(&mut self, n: usize, batch: &Batch) -> Result<f64, CoopError> {
        let is_final = n + 1 == self.bundles.len();
        let noise = {
            let bundle = &mut self.bundles[n];
            bundle.agent.draw_noise(batch.len(), &mut bundle.noise_rng)
        };
        let eta = if is_final { 1.0 } else { self.coop_ratios.get(n) };
        let next_agent = if is_final { None } else { Some(self.bundles[n + 1].agent.clone()) };

        let scaled = self.bundles[n].agent.scale_obs(&batch.states);
        let mut tape = Tape::new();
        let sv = tape.constant(&scaled);
        let (loss, vars, log_prob) = cooperative_policy_loss(
            &mut tape,
            &self.bundles[n].agent,
            next_agent.as_ref(),
            is_final,
            sv,
            &noise,
            eta,
        )?;
        tape.backward(loss).expect("policy loss is scalar");
        let log_pi_mean = tape.value(log_prob).mean();
        let loss_value = tape.item(loss);
        let agent = &mut self.bundles[n].agent;
        vars.write_grads(&tape, &mut agent.policy.net);
        agent.policy_opt.step(&mut agent.policy.net.params_mut())?;
        agent.tune_alpha(log_pi_mean)?;
        agent.soft_target_update();
        Ok(loss_value)
    }
}
