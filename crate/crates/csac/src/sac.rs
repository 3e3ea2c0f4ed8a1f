//! Single-agent Soft Actor-Critic.
//!
//! Twin critics with slowly tracking target copies, an entropy-regularised
//! squashed-Gaussian policy, and an optionally learnable entropy
//! temperature. The Bellman target for a batch is
//!
//! `y = r + gamma * (1 - d) * (min(Q'_1, Q'_2)(s', a') - alpha * log pi(a'|s'))`
//!
//! with `a'` freshly sampled from the acting policy and no gradient flowing
//! into `y`. The critic loss is the mean squared Bellman error; the policy
//! loss is `mean(alpha * log pi(a|s) - min(Q_1, Q_2)(s, a))` with `a`
//! reparameterised.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, Adam, Mlp, MlpVars, NnError, SquashedGaussianPolicy};
use crate::replay::Batch;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {0} in target computation")]
    NonFiniteTarget(String),
    #[error("batch field lengths disagree: {0}")]
    BatchMismatch(String),
}

/// Agent hyperparameters. `Default` carries the standard values; the
/// harness overrides them from its config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Learn alpha by gradient on log-alpha; otherwise alpha stays fixed.
    pub auto_alpha: bool,
    pub init_alpha: f64,
    /// Defaults to `-action_dim` when `None`.
    pub target_entropy: Option<f64>,
    /// Ablation switch: use the literal printed target form
    /// `y = r + (1 - gamma) * (Q - alpha log pi)` with no done mask instead
    /// of the standard discounted, masked form. Off by default.
    pub literal_target_form: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.95,
            tau: 0.005,
            learning_rate: 3e-4,
            hidden: vec![256, 256],
            activation: Activation::Relu,
            auto_alpha: true,
            init_alpha: 1.0,
            target_entropy: None,
            literal_target_form: false,
        }
    }
}

/// Pure Bellman-target arithmetic over batch columns (all M x 1).
///
/// Standard form: `y = r + gamma (1 - d) (q_min - alpha log_pi)`.
/// Literal form (ablation): `y = r + (1 - gamma) (q_min - alpha log_pi)`.
pub fn bellman_targets(
    rewards: &Tensor,
    dones: &Tensor,
    q_min: &Tensor,
    log_pi: &Tensor,
    alpha: f64,
    gamma: f64,
    literal_form: bool,
) -> Tensor {
    let m = rewards.rows();
    assert_eq!(dones.rows(), m);
    assert_eq!(q_min.rows(), m);
    assert_eq!(log_pi.rows(), m);
    let mut y = Vec::with_capacity(m);
    for i in 0..m {
        let soft_value = q_min.data()[i] - alpha * log_pi.data()[i];
        let yi = if literal_form {
            rewards.data()[i] + (1.0 - gamma) * soft_value
        } else {
            rewards.data()[i] + gamma * (1.0 - dones.data()[i]) * soft_value
        };
        y.push(yi);
    }
    Tensor::new(m, 1, y)
}

/// One sub-task's learnable state: policy, twin critics, twin targets,
/// entropy temperature and per-network optimizers.
#[derive(Debug, Clone)]
pub struct SacAgent {
    pub policy: SquashedGaussianPolicy,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    /// Alpha is parameterised as log-alpha so it stays positive.
    pub log_alpha: Tensor,
    pub target_entropy: f64,
    pub auto_alpha: bool,
    pub gamma: f64,
    pub tau: f64,
    pub literal_target_form: bool,
    pub policy_opt: Adam,
    pub critic1_opt: Adam,
    pub critic2_opt: Adam,
    pub alpha_opt: Adam,
    /// Per-feature input normaliser applied to every observation that
    /// enters a network.
    obs_scale: Vec<f64>,
}

impl SacAgent {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        obs_scale: Vec<f64>,
        cfg: &SacConfig,
        rng: &mut impl Rng,
    ) -> SacAgent {
        assert_eq!(obs_scale.len(), obs_dim, "observation scale length");
        let policy =
            SquashedGaussianPolicy::new(obs_dim, action_dim, &cfg.hidden, cfg.activation, rng);
        let mut critic_sizes = vec![obs_dim + action_dim];
        critic_sizes.extend_from_slice(&cfg.hidden);
        critic_sizes.push(1);
        let critic1 = Mlp::new(&critic_sizes, cfg.activation, rng);
        let critic2 = Mlp::new(&critic_sizes, cfg.activation, rng);
        let target1 = critic1.clone();
        let target2 = critic2.clone();
        let log_alpha = Tensor::scalar(cfg.init_alpha.ln());
        let policy_opt = Adam::new(cfg.learning_rate, &policy.net.params());
        let critic1_opt = Adam::new(cfg.learning_rate, &critic1.params());
        let critic2_opt = Adam::new(cfg.learning_rate, &critic2.params());
        let alpha_opt = Adam::new(cfg.learning_rate, &[&log_alpha]);
        SacAgent {
            policy,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha,
            target_entropy: cfg.target_entropy.unwrap_or(-(action_dim as f64)),
            auto_alpha: cfg.auto_alpha,
            gamma: cfg.gamma,
            tau: cfg.tau,
            literal_target_form: cfg.literal_target_form,
            policy_opt,
            critic1_opt,
            critic2_opt,
            alpha_opt,
            obs_scale,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.policy.action_dim()
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.item().exp()
    }

    pub fn obs_scale(&self) -> &[f64] {
        &self.obs_scale
    }

    /// Applies the input normaliser to a batch of raw observations.
    pub fn scale_obs(&self, obs: &Tensor) -> Tensor {
        let d = self.obs_scale.len();
        assert_eq!(obs.cols(), d, "observation width");
        let mut out = obs.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for (v, &s) in row.iter_mut().zip(&self.obs_scale) {
                *v *= s;
            }
        }
        out
    }

    /// Standard-normal noise of shape `rows x action_dim` drawn from `rng`.
    pub fn draw_noise(&self, rows: usize, rng: &mut impl Rng) -> Tensor {
        let d = self.action_dim();
        let data: Vec<f64> = (0..rows * d).map(|_| StandardNormal.sample(rng)).collect();
        Tensor::new(rows, d, data)
    }

    /// Stochastic action for one raw observation (exploration rollouts).
    pub fn act_stochastic(&self, obs: &[f64], rng: &mut impl Rng) -> Result<Vec<f64>, SacError> {
        let o = self.scale_obs(&Tensor::new(1, obs.len(), obs.to_vec()));
        let noise = self.draw_noise(1, rng);
        let (action, _) = self.policy.sample_eval(&o, &noise)?;
        Ok(action.data().to_vec())
    }

    /// Deterministic action `tanh(mean)` (evaluation rollouts).
    pub fn act_deterministic(&self, obs: &[f64]) -> Result<Vec<f64>, SacError> {
        let o = self.scale_obs(&Tensor::new(1, obs.len(), obs.to_vec()));
        let action = self.policy.mean_action(&o)?;
        Ok(action.data().to_vec())
    }

    /// Minimum over the twin *target* critics at raw `(s, a)`, no gradients.
    pub fn min_target_q(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor, SacError> {
        let scaled = self.scale_obs(states);
        let mut tape = Tape::new();
        let sv = tape.constant(&scaled);
        let av = tape.constant(actions);
        let input = tape.concat_cols(sv, av);
        let (q1, _) = self.target1.forward(&mut tape, input, false)?;
        let (q2, _) = self.target2.forward(&mut tape, input, false)?;
        let qmin = tape.min_elem(q1, q2);
        Ok(tape.value(qmin))
    }

    /// Minimum over the twin *online* critics at raw `(s, a)`, no gradients.
    pub fn min_q(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor, SacError> {
        let scaled = self.scale_obs(states);
        let mut tape = Tape::new();
        let sv = tape.constant(&scaled);
        let av = tape.constant(actions);
        let input = tape.concat_cols(sv, av);
        let (q1, _) = self.critic1.forward(&mut tape, input, false)?;
        let (q2, _) = self.critic2.forward(&mut tape, input, false)?;
        let qmin = tape.min_elem(q1, q2);
        Ok(tape.value(qmin))
    }

    /// Bellman batch targets using this agent's target critics, its alpha,
    /// and next actions freshly sampled from `acting_policy` (the policy of
    /// the subtask that generated the data).
    ///
    /// No gradient flows into the result: everything here is evaluated
    /// outside any caller's tape.
    pub fn compute_targets(
        &self,
        rewards: &Tensor,
        next_states: &Tensor,
        dones: &Tensor,
        acting_policy: &SquashedGaussianPolicy,
        noise: &Tensor,
    ) -> Result<Tensor, SacError> {
        let m = rewards.rows();
        if next_states.rows() != m || dones.rows() != m || noise.rows() != m {
            return Err(SacError::BatchMismatch(format!(
                "rewards {m}, next_states {}, dones {}, noise {}",
                next_states.rows(),
                dones.rows(),
                noise.rows()
            )));
        }
        let scaled_next = self.scale_obs(next_states);
        let (next_actions, log_pi) = acting_policy.sample_eval(&scaled_next, noise)?;
        let q_min = self.min_target_q(next_states, &next_actions)?;
        let y = bellman_targets(
            rewards,
            dones,
            &q_min,
            &log_pi,
            self.alpha(),
            self.gamma,
            self.literal_target_form,
        );
        if !y.is_finite() {
            return Err(SacError::NonFiniteTarget("y".into()));
        }
        Ok(y)
    }

    /// Records the mean-squared-Bellman-error loss of one critic on the
    /// tape; gradients reach only that critic's parameters.
    pub fn critic_loss_graph(
        critic: &Mlp,
        tape: &mut Tape,
        scaled_states: Var,
        actions: Var,
        targets: &Tensor,
    ) -> Result<(Var, MlpVars), SacError> {
        let input = tape.concat_cols(scaled_states, actions);
        let (q, vars) = critic.forward(tape, input, true)?;
        let y = tape.constant(targets);
        let diff = tape.sub(q, y);
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq);
        Ok((loss, vars))
    }

    /// One gradient step on both critics toward the given targets, from raw
    /// batch states/actions. Returns the two loss values.
    pub fn critic_step(
        &mut self,
        states: &Tensor,
        actions: &Tensor,
        targets: &Tensor,
    ) -> Result<(f64, f64), SacError> {
        let scaled = self.scale_obs(states);
        let mut losses = [0.0; 2];
        for (idx, (critic, opt)) in [
            (&mut self.critic1, &mut self.critic1_opt),
            (&mut self.critic2, &mut self.critic2_opt),
        ]
        .into_iter()
        .enumerate()
        {
            let mut tape = Tape::new();
            let sv = tape.constant(&scaled);
            let av = tape.constant(actions);
            let (loss, vars) = Self::critic_loss_graph(critic, &mut tape, sv, av, targets)?;
            tape.backward(loss).expect("critic loss is scalar");
            vars.write_grads(&tape, critic);
            opt.step(&mut critic.params_mut())?;
            losses[idx] = tape.item(loss);
        }
        Ok((losses[0], losses[1]))
    }

    /// Records the SAC policy loss `mean(alpha log pi - min(Q1, Q2))` on the
    /// tape with reparameterised actions; critics are bound frozen so only
    /// policy parameters receive gradients. Returns the loss, the policy
    /// leaves, and the log-density node (reused for the alpha update).
    pub fn policy_loss_graph(
        &self,
        tape: &mut Tape,
        scaled_states: Var,
        noise: &Tensor,
    ) -> Result<(Var, MlpVars, Var), SacError> {
        let (sample, vars) = self.policy.sample(tape, scaled_states, noise, true)?;
        let input = tape.concat_cols(scaled_states, sample.action);
        let (q1, _) = self.critic1.forward(tape, input, false)?;
        let (q2, _) = self.critic2.forward(tape, input, false)?;
        let qmin = tape.min_elem(q1, q2);
        let ent = tape.affine(sample.log_prob, self.alpha(), 0.0);
        let gap = tape.sub(ent, qmin);
        let loss = tape.mean_all(gap);
        Ok((loss, vars, sample.log_prob))
    }

    /// One policy gradient step; returns `(loss, mean log pi)`.
    pub fn policy_step(&mut self, states: &Tensor, noise: &Tensor) -> Result<(f64, f64), SacError> {
        let scaled = self.scale_obs(states);
        let mut tape = Tape::new();
        let sv = tape.constant(&scaled);
        let (loss, vars, log_pi) = self.policy_loss_graph(&mut tape, sv, noise)?;
        tape.backward(loss).expect("policy loss is scalar");
        let log_pi_mean = tape.value(log_pi).mean();
        vars.write_grads(&tape, &mut self.policy.net);
        self.policy_opt.step(&mut self.policy.net.params_mut())?;
        Ok((tape.item(loss), log_pi_mean))
    }

    /// Gradient step on log-alpha minimising
    /// `mean(-alpha (log pi + target_entropy))`, holding `log pi` fixed.
    /// No-op in fixed-alpha mode. Returns the new alpha.
    pub fn tune_alpha(&mut self, log_pi_mean: f64) -> Result<f64, SacError> {
        if !self.auto_alpha {
            return Ok(self.alpha());
        }
        let c = log_pi_mean + self.target_entropy;
        let mut tape = Tape::new();
        let la = tape.param(&self.log_alpha);
        let a = tape.exp(la);
        let scaled = tape.affine(a, -c, 0.0);
        let loss = tape.mean_all(scaled);
        tape.backward(loss).expect("alpha loss is scalar");
        tape.write_grad(la, &mut self.log_alpha);
        self.alpha_opt.step(&mut [&mut self.log_alpha])?;
        Ok(self.alpha())
    }

    /// Polyak update: `target <- (1 - tau) target + tau critic`, both twins.
    /// Computed as `t += tau (c - t)` so `target == critic` is a bitwise
    /// fixed point.
    pub fn soft_target_update(&mut self) {
        for (critic, target) in
            [(&self.critic1, &mut self.target1), (&self.critic2, &mut self.target2)]
        {
            for (c, t) in critic.params().into_iter().zip(target.params_mut()) {
                for (tv, &cv) in t.data_mut().iter_mut().zip(c.data()) {
                    *tv += self.tau * (cv - *tv);
                }
            }
        }
    }

    /// Writes the complete learnable state (networks, targets, optimizers,
    /// alpha, hyperparameters) under `prefix`.
    pub fn write_checkpoint(&self, ck: &mut crate::ckpt::Checkpoint, prefix: &str) {
        crate::ckpt::write_mlp(ck, &format!("{prefix}/policy"), &self.policy.net);
        crate::ckpt::write_mlp(ck, &format!("{prefix}/critic1"), &self.critic1);
        crate::ckpt::write_mlp(ck, &format!("{prefix}/critic2"), &self.critic2);
        crate::ckpt::write_mlp(ck, &format!("{prefix}/target1"), &self.target1);
        crate::ckpt::write_mlp(ck, &format!("{prefix}/target2"), &self.target2);
        crate::ckpt::write_adam(ck, &format!("{prefix}/opt/policy"), &self.policy_opt);
        crate::ckpt::write_adam(ck, &format!("{prefix}/opt/critic1"), &self.critic1_opt);
        crate::ckpt::write_adam(ck, &format!("{prefix}/opt/critic2"), &self.critic2_opt);
        crate::ckpt::write_adam(ck, &format!("{prefix}/opt/alpha"), &self.alpha_opt);
        ck.put_tensor(&format!("{prefix}/log_alpha"), &self.log_alpha);
        ck.put_f64(&format!("{prefix}/target_entropy"), self.target_entropy);
        ck.put_u64(&format!("{prefix}/auto_alpha"), self.auto_alpha as u64);
        ck.put_f64(&format!("{prefix}/gamma"), self.gamma);
        ck.put_f64(&format!("{prefix}/tau"), self.tau);
        ck.put_u64(&format!("{prefix}/literal_target_form"), self.literal_target_form as u64);
        ck.put_f64_slice(&format!("{prefix}/obs_scale"), &self.obs_scale);
        ck.put_u64(&format!("{prefix}/action_dim"), self.action_dim() as u64);
    }

    /// Restores an agent written by [`SacAgent::write_checkpoint`];
    /// training resumes bit-exactly.
    pub fn read_checkpoint(
        ck: &crate::ckpt::Checkpoint,
        prefix: &str,
    ) -> Result<SacAgent, crate::ckpt::CkptError> {
        use crate::ckpt as c;
        let net = c::read_mlp(ck, &format!("{prefix}/policy"))?;
        let action_dim = ck.u64(&format!("{prefix}/action_dim"))? as usize;
        let policy = SquashedGaussianPolicy {
            net,
            head: crate::nn::GaussianHead::new(action_dim),
        };
        let critic1 = c::read_mlp(ck, &format!("{prefix}/critic1"))?;
        let critic2 = c::read_mlp(ck, &format!("{prefix}/critic2"))?;
        let target1 = c::read_mlp(ck, &format!("{prefix}/target1"))?;
        let target2 = c::read_mlp(ck, &format!("{prefix}/target2"))?;
        let log_alpha = ck.tensor(&format!("{prefix}/log_alpha"))?.clone();
        let policy_opt = c::read_adam(ck, &format!("{prefix}/opt/policy"), &policy.net.params())?;
        let critic1_opt = c::read_adam(ck, &format!("{prefix}/opt/critic1"), &critic1.params())?;
        let critic2_opt = c::read_adam(ck, &format!("{prefix}/opt/critic2"), &critic2.params())?;
        let alpha_opt = c::read_adam(ck, &format!("{prefix}/opt/alpha"), &[&log_alpha])?;
        Ok(SacAgent {
            policy,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha,
            target_entropy: ck.f64(&format!("{prefix}/target_entropy"))?,
            auto_alpha: ck.u64(&format!("{prefix}/auto_alpha"))? != 0,
            gamma: ck.f64(&format!("{prefix}/gamma"))?,
            tau: ck.f64(&format!("{prefix}/tau"))?,
            literal_target_form: ck.u64(&format!("{prefix}/literal_target_form"))? != 0,
            policy_opt,
            critic1_opt,
            critic2_opt,
            alpha_opt,
            obs_scale: ck.f64_slice(&format!("{prefix}/obs_scale"))?.to_vec(),
        })
    }

    /// One full plain-SAC update from a minibatch with the given reward
    /// column: critics, policy, alpha, soft target update.
    ///
    /// Returns `(critic loss, policy loss)` averaged over the twins.
    pub fn update_from_batch(
        &mut self,
        batch: &Batch,
        rewards: &Tensor,
        rng: &mut impl Rng,
    ) -> Result<(f64, f64), SacError> {
        let m = batch.len();

        let target_noise = self.draw_noise(m, rng);
        let policy = self.policy.clone();
        let targets =
            self.compute_targets(rewards, &batch.next_states, &batch.dones, &policy, &target_noise)?;
        let (l1, l2) = self.critic_step(&batch.states, &batch.actions, &targets)?;

        let policy_noise = self.draw_noise(m, rng);
        let (pi_loss, log_pi_mean) = self.policy_step(&batch.states, &policy_noise)?;
        self.tune_alpha(log_pi_mean)?;
        self.soft_target_update();
        Ok(((l1 + l2) / 2.0, pi_loss))
    }
}
