//! Soft Actor-Critic: squashed-Gaussian actor, twin critics with target
//! networks (optionally layer-normalized), and a learned entropy temperature.
//!
//! The loss computations are exposed as free functions over explicit
//! parameter sets so gradient checks can drive them directly; `SacAgent`
//! composes them into the usual update step.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{
    self, Activation, AdamState, MlpSpec, OutputActivation, ParamSet, Workspace,
};
use crate::replay::Batch;

/// Pre-squash log-std clamp.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone)]
pub struct SacConfig {
    pub gamma: f64,
    /// Retain fraction: target ← tau·target + (1-tau)·online.
    pub tau: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub updates_per_step: usize,
    pub warmup_steps: usize,
    pub init_alpha: f64,
    /// None: -d_action.
    pub target_entropy: Option<f64>,
    pub critic_layer_norm: bool,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.995,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.5e-4,
            batch: 256,
            updates_per_step: 20,
            warmup_steps: 1000,
            init_alpha: 1.0,
            target_entropy: None,
            critic_layer_norm: false,
            hidden_dims: vec![256, 256],
            activation: Activation::Relu,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Invalid(format!("gamma must be in [0,1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Invalid(format!("tau must be in [0,1], got {}", self.tau)));
        }
        if self.init_alpha <= 0.0 {
            return Err(Error::Invalid("init_alpha must be > 0".into()));
        }
        if self.batch == 0 || self.updates_per_step == 0 {
            return Err(Error::Invalid("batch and updates_per_step must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UpdateMetrics {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub q_mean: f64,
}

/// Log-density of a tanh-squashed Gaussian at pre-squash value `u`, with the
/// change-of-variables term computed through softplus for stability:
/// `ln(1 - tanh²u) = 2(ln2 - u - softplus(-2u))`.
pub fn squashed_gaussian_logp(u: f64, mean: f64, log_std: f64) -> f64 {
    let std = log_std.exp();
    let z = (u - mean) / std;
    let gauss = -0.5 * z * z - log_std - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let squash = 2.0 * (std::f64::consts::LN_2 - u - nn::softplus(-2.0 * u));
    gauss - squash
}

/// Soft Polyak update: `target ← tau·target + (1-tau)·online`.
pub fn polyak(target: &mut ParamSet, online: &ParamSet, tau: f64) -> Result<()> {
    if target.values.len() != online.values.len() {
        return Err(Error::DimMismatch {
            what: "polyak",
            expected: target.values.len(),
            got: online.values.len(),
        });
    }
    for (t, o) in target.values.iter_mut().zip(&online.values) {
        *t = tau * *t + (1.0 - tau) * o;
    }
    Ok(())
}

/// Mean squared Bellman error with optional parameter gradients.
/// `sa_inputs` is row-major `rows × (d_s + d_a)`.
pub fn critic_loss_and_grad(
    spec: &MlpSpec,
    params: &ParamSet,
    ws: &mut Workspace,
    sa_inputs: &[f64],
    targets: &[f64],
    rows: usize,
    grads: Option<&mut ParamSet>,
) -> (f64, Vec<f64>) {
    let q = nn::forward_batch(spec, params, sa_inputs, rows, ws).to_vec();
    let mut loss = 0.0;
    let mut upstream = vec![0.0; rows];
    for r in 0..rows {
        let e = q[r] - targets[r];
        loss += e * e / rows as f64;
        upstream[r] = 2.0 * e / rows as f64;
    }
    if let Some(g) = grads {
        nn::backward_batch(spec, params, ws, &upstream, Some(g), None);
    }
    (loss, q)
}

/// Cached intermediates from one squashed-Gaussian actor evaluation.
pub struct ActorEval {
    pub actions: Vec<f64>,
    pub logps: Vec<f64>,
    sigma_eps: Vec<f64>,
    clamp_mask: Vec<f64>,
}

/// Evaluates the actor on `states` with externally supplied standard-normal
/// draws `eps` (row-major `rows × d_a`); `eps` is ignored in deterministic
/// mode. Keeping the noise explicit makes the reparameterized losses exact
/// functions of the parameters, which is what the finite-difference checks
/// need.
pub fn actor_eval(
    spec: &MlpSpec,
    params: &ParamSet,
    ws: &mut Workspace,
    states: &[f64],
    rows: usize,
    eps: &[f64],
    deterministic: bool,
) -> ActorEval {
    let d_a = spec.output_dim / 2;
    let out = nn::forward_batch(spec, params, states, rows, ws);
    let mut actions = vec![0.0; rows * d_a];
    let mut logps = vec![0.0; rows];
    let mut sigma_eps = vec![0.0; rows * d_a];
    let mut clamp_mask = vec![0.0; rows * d_a];
    for r in 0..rows {
        for j in 0..d_a {
            let mu = out[r * 2 * d_a + j];
            let raw = out[r * 2 * d_a + d_a + j];
            let log_std = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
            let inside = raw > LOG_STD_MIN && raw < LOG_STD_MAX;
            let se = if deterministic {
                0.0
            } else {
                log_std.exp() * eps[r * d_a + j]
            };
            let u = mu + se;
            actions[r * d_a + j] = u.tanh();
            logps[r] += squashed_gaussian_logp(u, mu, log_std);
            sigma_eps[r * d_a + j] = se;
            clamp_mask[r * d_a + j] = if inside { 1.0 } else { 0.0 };
        }
    }
    ActorEval {
        actions,
        logps,
        sigma_eps,
        clamp_mask,
    }
}

/// Actor objective `mean(α·logπ(ã|s) - min(Q₁,Q₂)(s,ã))` under the
/// reparameterization `ã = tanh(μ + σ·ε)`, with exact gradients for the
/// actor parameters. Returns the loss and the mean log-probability (reused
/// by the temperature update).
#[allow(clippy::too_many_arguments)]
pub fn actor_loss_and_grad(
    actor_spec: &MlpSpec,
    actor_params: &ParamSet,
    ws_actor: &mut Workspace,
    critic_spec: &MlpSpec,
    critic1: &ParamSet,
    critic2: &ParamSet,
    ws_c1: &mut Workspace,
    ws_c2: &mut Workspace,
    states: &[f64],
    rows: usize,
    eps: &[f64],
    alpha: f64,
    grads: Option<&mut ParamSet>,
) -> (f64, f64) {
    let d_a = actor_spec.output_dim / 2;
    let d_s = actor_spec.input_dim;
    let ev = actor_eval(actor_spec, actor_params, ws_actor, states, rows, eps, false);

    // q through both critics on (s, ã)
    let mut sa = vec![0.0; rows * (d_s + d_a)];
    for r in 0..rows {
        sa[r * (d_s + d_a)..r * (d_s + d_a) + d_s]
            .copy_from_slice(&states[r * d_s..(r + 1) * d_s]);
        sa[r * (d_s + d_a) + d_s..(r + 1) * (d_s + d_a)]
            .copy_from_slice(&ev.actions[r * d_a..(r + 1) * d_a]);
    }
    let q1 = nn::forward_batch(critic_spec, critic1, &sa, rows, ws_c1).to_vec();
    let q2 = nn::forward_batch(critic_spec, critic2, &sa, rows, ws_c2).to_vec();

    let scale = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut mean_logp = 0.0;
    for r in 0..rows {
        loss += (alpha * ev.logps[r] - q1[r].min(q2[r])) * scale;
        mean_logp += ev.logps[r] * scale;
    }

    if let Some(g) = grads {
        // dL/d(s,a) through the argmin critic only
        let mut up1 = vec![0.0; rows];
        let mut up2 = vec![0.0; rows];
        for r in 0..rows {
            if q1[r] <= q2[r] {
                up1[r] = -scale;
            } else {
                up2[r] = -scale;
            }
        }
        let mut din1 = vec![0.0; rows * (d_s + d_a)];
        let mut din2 = vec![0.0; rows * (d_s + d_a)];
        nn::backward_batch(critic_spec, critic1, ws_c1, &up1, None, Some(&mut din1));
        nn::backward_batch(critic_spec, critic2, ws_c2, &up2, None, Some(&mut din2));

        // assemble d(loss)/d(μ, raw log-std) per action dim
        let mut upstream = vec![0.0; rows * 2 * d_a];
        for r in 0..rows {
            for j in 0..d_a {
                let a = ev.actions[r * d_a + j];
                let dq = din1[r * (d_s + d_a) + d_s + j] + din2[r * (d_s + d_a) + d_s + j];
                let one_m_a2 = 1.0 - a * a;
                let se = ev.sigma_eps[r * d_a + j];
                let dmu = alpha * scale * 2.0 * a + dq * one_m_a2;
                let dls = alpha * scale * (-1.0 + 2.0 * a * se) + dq * one_m_a2 * se;
                upstream[r * 2 * d_a + j] = dmu;
                upstream[r * 2 * d_a + d_a + j] = dls * ev.clamp_mask[r * d_a + j];
            }
        }
        nn::backward_batch(actor_spec, actor_params, ws_actor, &upstream, Some(g), None);
    }
    (loss, mean_logp)
}

/// The SAC agent: actor, twin critics plus targets, learned log-temperature.
pub struct SacAgent {
    pub cfg: SacConfig,
    d_s: usize,
    d_a: usize,
    actor_spec: MlpSpec,
    critic_spec: MlpSpec,
    actor: ParamSet,
    critic1: ParamSet,
    critic2: ParamSet,
    target1: ParamSet,
    target2: ParamSet,
    adam_actor: AdamState,
    adam_c1: AdamState,
    adam_c2: AdamState,
    adam_alpha: AdamState,
    log_alpha: ParamSet,
    target_entropy: f64,
    ws_actor: Workspace,
    ws_c1: Workspace,
    ws_c2: Workspace,
    // scratch
    sa: Vec<f64>,
    eps: Vec<f64>,
    targets: Vec<f64>,
}

impl SacAgent {
    pub fn new(d_s: usize, d_a: usize, cfg: SacConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let actor_spec = MlpSpec::new(
            d_s,
            cfg.hidden_dims.clone(),
            2 * d_a,
            cfg.activation,
            OutputActivation::Identity,
        )?;
        let critic_spec = MlpSpec::new(
            d_s + d_a,
            cfg.hidden_dims.clone(),
            1,
            cfg.activation,
            OutputActivation::Identity,
        )?
        .with_layer_norm(cfg.critic_layer_norm);

        let actor = nn::init_params(&actor_spec, rng);
        let critic1 = nn::init_params(&critic_spec, rng);
        let critic2 = nn::init_params(&critic_spec, rng);
        let target1 = critic1.clone();
        let target2 = critic2.clone();
        let b = cfg.batch;
        Ok(Self {
            adam_actor: AdamState::new(actor_spec.param_count(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            adam_c1: AdamState::new(critic_spec.param_count(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            adam_c2: AdamState::new(critic_spec.param_count(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            adam_alpha: AdamState::new(1, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
            log_alpha: ParamSet {
                values: vec![cfg.init_alpha.ln()],
            },
            target_entropy: cfg.target_entropy.unwrap_or(-(d_a as f64)),
            ws_actor: Workspace::new(&actor_spec, b),
            ws_c1: Workspace::new(&critic_spec, b),
            ws_c2: Workspace::new(&critic_spec, b),
            actor,
            critic1,
            critic2,
            target1,
            target2,
            actor_spec,
            critic_spec,
            cfg,
            d_s,
            d_a,
            sa: Vec::new(),
            eps: Vec::new(),
            targets: Vec::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.values[0].exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy
    }

    pub fn action_dim(&self) -> usize {
        self.d_a
    }

    pub fn state_dim(&self) -> usize {
        self.d_s
    }

    /// Samples an action and its log-probability. Deterministic mode returns
    /// `tanh(μ)` and consumes no randomness.
    pub fn actor_sample(
        &mut self,
        state: &[f64],
        rng: &mut dyn RngCore,
        deterministic: bool,
    ) -> Result<(Vec<f64>, f64)> {
        if state.len() != self.d_s {
            return Err(Error::DimMismatch {
                what: "actor_sample state",
                expected: self.d_s,
                got: state.len(),
            });
        }
        self.eps.clear();
        if !deterministic {
            for _ in 0..self.d_a {
                self.eps.push(rng.sample(StandardNormal));
            }
        } else {
            self.eps.resize(self.d_a, 0.0);
        }
        let ev = actor_eval(
            &self.actor_spec,
            &self.actor,
            &mut self.ws_actor,
            state,
            1,
            &self.eps,
            deterministic,
        );
        Ok((ev.actions, ev.logps[0]))
    }

    /// Soft Bellman backup `y = r + γ(1-d)(min Q̄(s',a') - α·log π(a'|s'))`
    /// with `a'` freshly sampled from the current actor.
    pub fn critic_target(
        &mut self,
        reward: f64,
        terminal: bool,
        next_state: &[f64],
        rng: &mut dyn RngCore,
    ) -> Result<f64> {
        let (a2, logp) = self.actor_sample(next_state, rng, false)?;
        self.sa.clear();
        self.sa.extend_from_slice(next_state);
        self.sa.extend_from_slice(&a2);
        let q1 = nn::forward_batch(&self.critic_spec, &self.target1, &self.sa, 1, &mut self.ws_c1)
            [0];
        let q2 = nn::forward_batch(&self.critic_spec, &self.target2, &self.sa, 1, &mut self.ws_c2)
            [0];
        let d = if terminal { 1.0 } else { 0.0 };
        Ok(reward + self.cfg.gamma * (1.0 - d) * (q1.min(q2) - self.alpha() * logp))
    }

    /// One gradient step on critics, actor, and temperature, then the target
    /// network soft update.
    pub fn update(&mut self, batch: &Batch, rng: &mut dyn RngCore) -> Result<UpdateMetrics> {
        let rows = batch.rows;
        assert!(rows >= 1, "update on empty batch");
        let (d_s, d_a) = (self.d_s, self.d_a);
        let d_in = d_s + d_a;

        // Bellman targets from the target critics (no gradients)
        self.eps.clear();
        for _ in 0..rows * d_a {
            self.eps.push(rng.sample(StandardNormal));
        }
        let ev = actor_eval(
            &self.actor_spec,
            &self.actor,
            &mut self.ws_actor,
            &batch.next_states,
            rows,
            &self.eps,
            false,
        );
        self.sa.clear();
        self.sa.resize(rows * d_in, 0.0);
        for r in 0..rows {
            self.sa[r * d_in..r * d_in + d_s]
                .copy_from_slice(&batch.next_states[r * d_s..(r + 1) * d_s]);
            self.sa[r * d_in + d_s..(r + 1) * d_in]
                .copy_from_slice(&ev.actions[r * d_a..(r + 1) * d_a]);
        }
        let qt1 =
            nn::forward_batch(&self.critic_spec, &self.target1, &self.sa, rows, &mut self.ws_c1)
                .to_vec();
        let qt2 =
            nn::forward_batch(&self.critic_spec, &self.target2, &self.sa, rows, &mut self.ws_c2)
                .to_vec();
        let alpha = self.alpha();
        self.targets.clear();
        for r in 0..rows {
            let not_done = 1.0 - batch.terminals[r];
            self.targets.push(
                batch.rewards[r]
                    + self.cfg.gamma
                        * not_done
                        * (qt1[r].min(qt2[r]) - alpha * ev.logps[r]),
            );
        }

        // critic updates on (s, a)
        self.sa.clear();
        self.sa.resize(rows * d_in, 0.0);
        for r in 0..rows {
            self.sa[r * d_in..r * d_in + d_s]
                .copy_from_slice(&batch.states[r * d_s..(r + 1) * d_s]);
            self.sa[r * d_in + d_s..(r + 1) * d_in]
                .copy_from_slice(&batch.actions[r * d_a..(r + 1) * d_a]);
        }
        let mut g1 = ParamSet::zeros(self.critic_spec.param_count());
        let (loss1, q1) = critic_loss_and_grad(
            &self.critic_spec,
            &self.critic1,
            &mut self.ws_c1,
            &self.sa,
            &self.targets,
            rows,
            Some(&mut g1),
        );
        let mut g2 = ParamSet::zeros(self.critic_spec.param_count());
        let (loss2, q2) = critic_loss_and_grad(
            &self.critic_spec,
            &self.critic2,
            &mut self.ws_c2,
            &self.sa,
            &self.targets,
            rows,
            Some(&mut g2),
        );
        let critic_loss = 0.5 * (loss1 + loss2);
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "critic loss (q1 {:.3e}, q2 {:.3e})",
                loss1, loss2
            )));
        }
        self.adam_c1.adam_step(&mut self.critic1, &g1)?;
        self.adam_c2.adam_step(&mut self.critic2, &g2)?;

        let q_mean = (0..rows).map(|r| q1[r].min(q2[r])).sum::<f64>() / rows as f64;

        // actor update (fresh noise)
        self.eps.clear();
        for _ in 0..rows * d_a {
            self.eps.push(rng.sample(StandardNormal));
        }
        let mut ga = ParamSet::zeros(self.actor_spec.param_count());
        let (actor_loss, mean_logp) = actor_loss_and_grad(
            &self.actor_spec,
            &self.actor,
            &mut self.ws_actor,
            &self.critic_spec,
            &self.critic1,
            &self.critic2,
            &mut self.ws_c1,
            &mut self.ws_c2,
            &batch.states,
            rows,
            &self.eps,
            alpha,
            Some(&mut ga),
        );
        if !actor_loss.is_finite() {
            return Err(Error::NonFinite("actor loss".into()));
        }
        self.adam_actor.adam_step(&mut self.actor, &ga)?;

        // temperature: drive entropy toward the target
        let alpha_grad = ParamSet {
            values: vec![-(mean_logp + self.target_entropy)],
        };
        self.adam_alpha.adam_step(&mut self.log_alpha, &alpha_grad)?;

        // target networks track every update
        polyak(&mut self.target1, &self.critic1, self.cfg.tau)?;
        polyak(&mut self.target2, &self.critic2, self.cfg.tau)?;

        Ok(UpdateMetrics {
            critic_loss,
            actor_loss,
            alpha: self.alpha(),
            q_mean,
        })
    }

    /// Stochastic actions for a batch of states (rollout branching).
    pub fn sample_actions_batch(
        &mut self,
        states: &[f64],
        rows: usize,
        rng: &mut dyn RngCore,
        out: &mut Vec<f64>,
    ) {
        let d_a = self.d_a;
        let cap = self.ws_actor.max_batch();
        out.clear();
        let mut row = 0;
        while row < rows {
            let n = (rows - row).min(cap);
            self.eps.clear();
            for _ in 0..n * d_a {
                self.eps.push(rng.sample(StandardNormal));
            }
            let ev = actor_eval(
                &self.actor_spec,
                &self.actor,
                &mut self.ws_actor,
                &states[row * self.d_s..(row + n) * self.d_s],
                n,
                &self.eps,
                false,
            );
            out.extend_from_slice(&ev.actions);
            row += n;
        }
    }

    /// Mean of `min(Q₁,Q₂)(s, a~π)` over the given states.
    pub fn mean_min_q(&mut self, states: &[f64], rows: usize, rng: &mut dyn RngCore) -> f64 {
        assert!(rows >= 1);
        let (d_s, d_a) = (self.d_s, self.d_a);
        let d_in = d_s + d_a;
        let cap = self.ws_actor.max_batch();
        let mut total = 0.0;
        let mut row = 0;
        while row < rows {
            let n = (rows - row).min(cap);
            let chunk = &states[row * d_s..(row + n) * d_s];
            self.eps.clear();
            for _ in 0..n * d_a {
                self.eps.push(rng.sample(StandardNormal));
            }
            let ev = actor_eval(
                &self.actor_spec,
                &self.actor,
                &mut self.ws_actor,
                chunk,
                n,
                &self.eps,
                false,
            );
            self.sa.clear();
            self.sa.resize(n * d_in, 0.0);
            for r in 0..n {
                self.sa[r * d_in..r * d_in + d_s].copy_from_slice(&chunk[r * d_s..(r + 1) * d_s]);
                self.sa[r * d_in + d_s..(r + 1) * d_in]
                    .copy_from_slice(&ev.actions[r * d_a..(r + 1) * d_a]);
            }
            let q1 = nn::forward_batch(&self.critic_spec, &self.critic1, &self.sa, n, &mut self.ws_c1)
                .to_vec();
            let q2 = nn::forward_batch(&self.critic_spec, &self.critic2, &self.sa, n, &mut self.ws_c2)
                .to_vec();
            for r in 0..n {
                total += q1[r].min(q2[r]);
            }
            row += n;
        }
        total / rows as f64
    }

    // test and gradcheck access
    pub fn actor_spec(&self) -> &MlpSpec {
        &self.actor_spec
    }

    pub fn critic_spec(&self) -> &MlpSpec {
        &self.critic_spec
    }

    pub fn actor_params(&self) -> &ParamSet {
        &self.actor
    }

    pub fn critic_params(&self) -> (&ParamSet, &ParamSet) {
        (&self.critic1, &self.critic2)
    }

    pub fn target_params(&self) -> (&ParamSet, &ParamSet) {
        (&self.target1, &self.target2)
    }

    pub fn actor_params_mut(&mut self) -> &mut ParamSet {
        &mut self.actor
    }

    pub fn critic_params_mut(&mut self) -> (&mut ParamSet, &mut ParamSet) {
        (&mut self.critic1, &mut self.critic2)
    }
}
