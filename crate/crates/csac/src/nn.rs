//! Multilayer perceptrons, the Adam optimizer, and the squashed-Gaussian
//! policy head.
//!
//! Networks own their parameters as plain [`Tensor`]s. Each training step
//! binds them into a fresh [`Tape`] (trainably or frozen), runs the forward
//! graph, and after `backward` copies the leaf gradients back into the
//! parameter tensors for the optimizer.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input width {got} does not match network input width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("noise width {got} does not match action dimension {expected}")]
    NoiseWidth { expected: usize, got: usize },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("missing gradient on parameter {index}")]
    MissingGradient { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One dense layer: `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

/// A fully connected network with a fixed hidden nonlinearity and a linear
/// output layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

/// Tape leaves for one bound network, in [`Mlp::params`] order.
#[derive(Debug)]
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    /// Copies tape gradients back into the network's parameter tensors.
    pub fn write_grads(&self, tape: &Tape, net: &mut Mlp) {
        for (var, param) in self.vars.iter().zip(net.params_mut()) {
            tape.write_grad(*var, param);
        }
    }
}

impl Mlp {
    /// Builds a network with the given layer widths (input, hidden..., output).
    ///
    /// Hidden layers use fan-in uniform initialisation; the output layer is
    /// initialised near zero so critics start flat and policies start close
    /// to the zero action.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Mlp {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output widths");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l == sizes.len() - 2;
            let bound = if last { 3e-3 } else { 1.0 / (fan_in as f64).sqrt() };
            let w_data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect();
            layers.push(Dense {
                w: Tensor::new(fan_in, fan_out, w_data),
                b: Tensor::zeros(1, fan_out),
            });
        }
        Mlp { sizes: sizes.to_vec(), activation, layers }
    }

    /// Rebuilds a network from explicit layers (checkpoint loading).
    pub fn from_layers(sizes: Vec<usize>, activation: Activation, layers: Vec<Dense>) -> Mlp {
        assert_eq!(sizes.len(), layers.len() + 1);
        for (l, layer) in layers.iter().enumerate() {
            assert_eq!(layer.w.rows(), sizes[l]);
            assert_eq!(layer.w.cols(), sizes[l + 1]);
            assert_eq!(layer.b.cols(), sizes[l + 1]);
        }
        Mlp { sizes, activation, layers }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Total parameter count: sum of `in*out + out` over layers.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.numel() + l.b.numel()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }

    /// Records the forward pass on `tape`. With `trainable` the parameters
    /// are bound as gradient leaves, otherwise as constants (the graph can
    /// still carry gradients through to `input`).
    pub fn forward(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Var, MlpVars), NnError> {
        let (_, width) = {
            let v = tape.value(input);
            (v.rows(), v.cols())
        };
        if width != self.input_dim() {
            return Err(NnError::InputWidth { expected: self.input_dim(), got: width });
        }
        let mut vars = Vec::with_capacity(self.layers.len() * 2);
        let mut x = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = if trainable { tape.param(&layer.w) } else { tape.constant(&layer.w) };
            let b = if trainable { tape.param(&layer.b) } else { tape.constant(&layer.b) };
            vars.push(w);
            vars.push(b);
            x = tape.matmul(x, w);
            x = tape.add_bias(x, b);
            if l + 1 < self.layers.len() {
                x = match self.activation {
                    Activation::Relu => tape.relu(x),
                    Activation::Tanh => tape.tanh(x),
                };
            }
        }
        Ok((x, MlpVars { vars }))
    }

    /// Plain forward evaluation with no gradient tracking.
    ///
    /// Runs through the same tape kernels as [`Mlp::forward`], so values are
    /// bit-identical between the two paths.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor, NnError> {
        let mut tape = Tape::new();
        let iv = tape.constant(input);
        let (out, _) = self.forward(&mut tape, iv, false)?;
        Ok(tape.value(out))
    }
}

// ── Adam ────────────────────────────────────────────────────────────

/// Adam optimizer state for one network's parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Tensor]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One Adam update from the gradients stored on the parameters.
    ///
    /// A non-finite gradient anywhere rejects the whole step: neither the
    /// parameters nor the optimizer state are touched.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<(), NnError> {
        assert_eq!(params.len(), self.m.len(), "optimizer bound to a different parameter list");
        for (i, p) in params.iter().enumerate() {
            let g = p.grad.as_ref().ok_or(NnError::MissingGradient { index: i })?;
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { what: format!("gradient of parameter {i}") });
            }
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.as_ref().unwrap().clone();
            for (j, &gj) in g.iter().enumerate() {
                let m = &mut self.m[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gj;
                let v = &mut self.v[i][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * gj * gj;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                p.data_mut()[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut Vec<Vec<f64>>, &mut Vec<Vec<f64>>) {
        (&mut self.m, &mut self.v)
    }
}

// ── squashed Gaussian policy ────────────────────────────────────────

/// Splits a network output into mean and log-std halves and clamps the
/// log-std before exponentiation.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub action_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl GaussianHead {
    pub fn new(action_dim: usize) -> GaussianHead {
        GaussianHead { action_dim, log_std_min: -20.0, log_std_max: 2.0 }
    }
}

/// A stochastic policy: an MLP trunk producing `2 * action_dim` outputs,
/// squashed through tanh so sampled actions lie strictly in (-1, 1).
#[derive(Debug, Clone)]
pub struct SquashedGaussianPolicy {
    pub net: Mlp,
    pub head: GaussianHead,
}

/// Graph handles produced by a reparameterised sample.
pub struct PolicySample {
    /// Squashed actions, M x action_dim, each component in (-1, 1).
    pub action: Var,
    /// Log-density of the squashed action, M x 1, including the tanh
    /// change-of-variables correction.
    pub log_prob: Var,
    pub mean: Var,
    pub log_std: Var,
}

impl SquashedGaussianPolicy {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> SquashedGaussianPolicy {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        SquashedGaussianPolicy {
            net: Mlp::new(&sizes, activation, rng),
            head: GaussianHead::new(action_dim),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.head.action_dim
    }

    /// Records a reparameterised sample `a = tanh(mean + std * noise)` and
    /// its log-density on the tape. `noise` must be standard-normal draws of
    /// shape M x action_dim.
    ///
    /// The log-density uses `ln(1 - tanh(u)^2) = 2(ln 2 - u - softplus(-2u))`,
    /// which is exact and numerically stable for saturated actions, and the
    /// gradient flows through the sample pathway (mean and std), which is
    /// what the policy loss differentiates.
    pub fn sample(
        &self,
        tape: &mut Tape,
        obs: Var,
        noise: &Tensor,
        trainable: bool,
    ) -> Result<(PolicySample, MlpVars), NnError> {
        let d = self.head.action_dim;
        if noise.cols() != d {
            return Err(NnError::NoiseWidth { expected: d, got: noise.cols() });
        }
        let (out, vars) = self.net.forward(tape, obs, trainable)?;
        if !tape.value(out).is_finite() {
            return Err(NnError::NonFinite { what: "policy mean/log-std output".into() });
        }
        let mean = tape.slice_cols(out, 0, d);
        let log_std_raw = tape.slice_cols(out, d, d);
        let log_std = tape.clamp(log_std_raw, self.head.log_std_min, self.head.log_std_max);
        let std = tape.exp(log_std);
        let noise_v = tape.constant(noise);
        let scaled = tape.mul(std, noise_v);
        let u = tape.add(mean, scaled);
        let action = tape.tanh(u);

        // ln(1 - tanh(u)^2) per dimension.
        let minus_two_u = tape.affine(u, -2.0, 0.0);
        let sp = tape.softplus(minus_two_u);
        let u_plus_sp = tape.add(u, sp);
        let tanh_corr = tape.affine(u_plus_sp, -2.0, 2.0 * LN_2);

        // Per-dimension Gaussian log-density at the sampled point reduces to
        // -log_std - noise^2/2 - ln(2 pi)/2; the noise terms are constants.
        let neg_log_std = tape.neg(log_std);
        let per_dim = tape.sub(neg_log_std, tanh_corr);
        let summed = tape.row_sum(per_dim);
        let base: Vec<f64> = noise
            .data()
            .chunks_exact(d)
            .map(|row| {
                -0.5 * row.iter().map(|e| e * e).sum::<f64>() - 0.5 * d as f64 * (2.0 * PI).ln()
            })
            .collect();
        let base_v = tape.constant(&Tensor::new(noise.rows(), 1, base));
        let log_prob = tape.add(summed, base_v);

        Ok((PolicySample { action, log_prob, mean, log_std }, vars))
    }

    /// Sample without gradient tracking: returns `(actions, log_probs)`.
    pub fn sample_eval(&self, obs: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor), NnError> {
        let mut tape = Tape::new();
        let ov = tape.constant(obs);
        let (s, _) = self.sample(&mut tape, ov, noise, false)?;
        Ok((tape.value(s.action), tape.value(s.log_prob)))
    }

    /// Deterministic action: `tanh(mean)`, used for evaluation rollouts.
    pub fn mean_action(&self, obs: &Tensor) -> Result<Tensor, NnError> {
        let out = self.net.eval(obs)?;
        if !out.is_finite() {
            return Err(NnError::NonFinite { what: "policy mean/log-std output".into() });
        }
        let d = self.head.action_dim;
        let mut data = Vec::with_capacity(obs.rows() * d);
        for i in 0..out.rows() {
            data.extend(out.row(i)[..d].iter().map(|m| m.tanh()));
        }
        Ok(Tensor::new(obs.rows(), d, data))
    }
}
