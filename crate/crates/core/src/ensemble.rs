//! Probabilistic dynamics ensemble: heteroskedastic Gaussian regression onto
//! `[state-target ‖ reward]` with the two FTFL switches — target mode
//! (residual vs direct next state) and independent target normalization —
//! plus elite selection, one-step prediction, and the variance and
//! reward-bias diagnostics.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{
    self, Activation, AdamState, MlpSpec, OutputActivation, ParamSet, Workspace,
};
use crate::normalization::{self, fit_stats, RunningStats, DEFAULT_EPS_FLOOR};
use crate::replay::{ReplayBuffer, Transition};

/// What the state half of the regression target represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetMode {
    /// Model learns s' - s.
    Residual,
    /// Model learns s' itself.
    Direct,
}

impl TargetMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetMode::Residual => "residual",
            TargetMode::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub n_elites: usize,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub target_mode: TargetMode,
    pub target_norm: bool,
    pub logvar_min: f64,
    pub logvar_max: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub retrain_interval: usize,
    pub holdout_fraction: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub minibatch: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_members: 7,
            n_elites: 5,
            hidden_dims: vec![200, 200],
            activation: Activation::Swish,
            target_mode: TargetMode::Residual,
            target_norm: false,
            logvar_min: -10.0,
            logvar_max: 0.5,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1.5e-4,
            retrain_interval: 250,
            holdout_fraction: 0.1,
            max_epochs: 8,
            patience: 1,
            minibatch: 256,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 || self.n_elites == 0 || self.n_elites > self.n_members {
            return Err(Error::Invalid(format!(
                "need 1 <= n_elites <= n_members, got {}/{}",
                self.n_elites, self.n_members
            )));
        }
        if self.logvar_min >= self.logvar_max {
            return Err(Error::Invalid("logvar_min must be < logvar_max".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return Err(Error::Invalid(
                "holdout_fraction must be in (0, 0.5)".into(),
            ));
        }
        if self.minibatch == 0 || self.max_epochs == 0 {
            return Err(Error::Invalid("minibatch and max_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean and bounded log-variance over `[state-target ‖ reward]`.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// Per-retrain summary.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub holdout_mse: Vec<f64>,
    pub epochs_run: Vec<usize>,
    pub elites: Vec<usize>,
    pub n_rows: usize,
}

/// Smoothly clamps a raw log-variance into `(logvar_min, logvar_max)`:
/// upper softplus bound first, then the lower one.
pub fn bound_logvar(raw: f64, logvar_min: f64, logvar_max: f64) -> f64 {
    let upper = logvar_max - nn::softplus(logvar_max - raw);
    logvar_min + nn::softplus(upper - logvar_min)
}

/// Bounded value together with its derivative d bounded / d raw.
fn bound_logvar_grad(raw: f64, logvar_min: f64, logvar_max: f64) -> (f64, f64) {
    let upper = logvar_max - nn::softplus(logvar_max - raw);
    let bounded = logvar_min + nn::softplus(upper - logvar_min);
    let d = nn::sigmoid(logvar_max - raw) * nn::sigmoid(upper - logvar_min);
    (bounded, d)
}

/// Heteroskedastic Gaussian negative log-likelihood without the 2π constant:
/// mean over dimensions of `(μ - t)² e^{-ℓ} + ℓ`. The `ℓ` term is the
/// variance loss used as a diagnostic.
pub fn gaussian_nll(pred: &EnsemblePrediction, target: &[f64]) -> Result<f64> {
    if pred.mean.len() != target.len() || pred.logvar.len() != target.len() {
        return Err(Error::DimMismatch {
            what: "gaussian_nll",
            expected: target.len(),
            got: pred.mean.len(),
        });
    }
    let ok = pred.mean.iter().all(|v| v.is_finite())
        && pred.logvar.iter().all(|v| v.is_finite())
        && target.iter().all(|v| v.is_finite());
    if !ok {
        return Err(Error::NonFinite("gaussian_nll inputs".into()));
    }
    let d = target.len() as f64;
    let mut loss = 0.0;
    for j in 0..target.len() {
        let e = pred.mean[j] - target[j];
        loss += e * e * (-pred.logvar[j]).exp() + pred.logvar[j];
    }
    Ok(loss / d)
}

/// Builds regression targets `[state_target ‖ r]` for a batch of transitions.
/// `stats` must have been fitted on the same mode's raw targets.
pub fn build_targets(
    batch: &[Transition],
    mode: TargetMode,
    norm: bool,
    state_stats: &RunningStats,
    reward_stats: &RunningStats,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Empty("build_targets on empty batch"));
    }
    let d_s = batch[0].state.len();
    if state_stats.dim() != d_s || reward_stats.dim() != 1 {
        return Err(Error::DimMismatch {
            what: "build_targets stats",
            expected: d_s,
            got: state_stats.dim(),
        });
    }
    let mut out = Vec::with_capacity(batch.len() * (d_s + 1));
    for t in batch {
        for j in 0..d_s {
            let raw = match mode {
                TargetMode::Residual => t.next_state[j] - t.state[j],
                TargetMode::Direct => t.next_state[j],
            };
            out.push(if norm {
                (raw - state_stats.mean[j]) / state_stats.std[j]
            } else {
                raw
            });
        }
        out.push(if norm {
            (t.reward - reward_stats.mean[0]) / reward_stats.std[0]
        } else {
            t.reward
        });
    }
    Ok(out)
}

/// Indices of the k smallest holdout errors, ties broken by lower index.
pub fn select_elites(holdout_mse: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > holdout_mse.len() {
        return Err(Error::Invalid(format!(
            "k={k} exceeds {} members",
            holdout_mse.len()
        )));
    }
    if holdout_mse.iter().any(|m| !m.is_finite()) {
        return Err(Error::NonFinite("holdout MSEs".into()));
    }
    let mut idx: Vec<usize> = (0..holdout_mse.len()).collect();
    idx.sort_by(|&a, &b| {
        holdout_mse[a]
            .partial_cmp(&holdout_mse[b])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut elites = idx[..k].to_vec();
    elites.sort_unstable();
    Ok(elites)
}

/// NLL loss over a batch for one member network, with optional parameter
/// gradient accumulation. Loss is mean over dims and batch rows.
#[allow(clippy::too_many_arguments)]
pub fn nll_loss_and_grad(
    spec: &MlpSpec,
    params: &ParamSet,
    ws: &mut Workspace,
    inputs: &[f64],
    targets: &[f64],
    rows: usize,
    logvar_min: f64,
    logvar_max: f64,
    grads: Option<&mut ParamSet>,
) -> f64 {
    let d_t = spec.output_dim / 2;
    debug_assert_eq!(targets.len(), rows * d_t);
    let out = nn::forward_batch(spec, params, inputs, rows, ws).to_vec();
    let mut loss = 0.0;
    let mut upstream = vec![0.0; rows * 2 * d_t];
    let scale = 1.0 / (d_t as f64 * rows as f64);
    for r in 0..rows {
        let o = &out[r * 2 * d_t..(r + 1) * 2 * d_t];
        let t = &targets[r * d_t..(r + 1) * d_t];
        let up = &mut upstream[r * 2 * d_t..(r + 1) * 2 * d_t];
        for j in 0..d_t {
            let (lv, dlv) = bound_logvar_grad(o[d_t + j], logvar_min, logvar_max);
            let e = o[j] - t[j];
            let inv = (-lv).exp();
            loss += (e * e * inv + lv) * scale;
            up[j] = 2.0 * e * inv * scale;
            up[d_t + j] = (1.0 - e * e * inv) * scale * dlv;
        }
    }
    if let Some(g) = grads {
        nn::backward_batch(spec, params, ws, &upstream, Some(g), None);
    }
    loss
}

struct Member {
    params: ParamSet,
    adam: AdamState,
    rng: ChaCha8Rng,
}

/// The ensemble world model.
pub struct DynamicsEnsemble {
    cfg: EnsembleConfig,
    d_s: usize,
    d_a: usize,
    spec: MlpSpec,
    members: Vec<Member>,
    elites: Vec<usize>,
    input_stats: RunningStats,
    state_target_stats: RunningStats,
    reward_target_stats: RunningStats,
    trained: bool,
    ws: Workspace,
    // reusable training scratch
    xb: Vec<f64>,
    yb: Vec<f64>,
}

impl DynamicsEnsemble {
    pub fn new(d_s: usize, d_a: usize, cfg: EnsembleConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let spec = MlpSpec::new(
            d_s + d_a,
            cfg.hidden_dims.clone(),
            2 * (d_s + 1),
            cfg.activation,
            OutputActivation::Identity,
        )?;
        let n_params = spec.param_count();
        let members = (0..cfg.n_members)
            .map(|_| Member {
                params: nn::init_params(&spec, rng),
                adam: AdamState::new(n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps),
                rng: ChaCha8Rng::seed_from_u64(rng.next_u64()),
            })
            .collect();
        let ws = Workspace::new(&spec, cfg.minibatch.max(256));
        Ok(Self {
            elites: (0..cfg.n_elites).collect(),
            input_stats: RunningStats::identity(d_s + d_a),
            state_target_stats: RunningStats::identity(d_s),
            reward_target_stats: RunningStats::identity(1),
            trained: false,
            members,
            cfg,
            d_s,
            d_a,
            spec,
            ws,
            xb: Vec::new(),
            yb: Vec::new(),
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.cfg
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    pub fn input_stats(&self) -> &RunningStats {
        &self.input_stats
    }

    pub fn state_target_stats(&self) -> &RunningStats {
        &self.state_target_stats
    }

    pub fn reward_target_stats(&self) -> &RunningStats {
        &self.reward_target_stats
    }

    /// Refits all running statistics and trains every member on the
    /// buffer's effective prefix, warm-starting from current parameters.
    pub fn train(&mut self, buffer: &ReplayBuffer, rng: &mut dyn RngCore) -> Result<TrainReport> {
        let n = buffer.effective_len();
        if n < 2 * self.cfg.minibatch {
            return Err(Error::Replay(format!(
                "ensemble training needs at least {} rows, buffer has {n}",
                2 * self.cfg.minibatch
            )));
        }
        let d_in = self.d_s + self.d_a;
        let d_t = self.d_s + 1;

        // design matrices from the effective prefix
        let (mut inputs, mut rewards, mut next_states, mut states) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        buffer.effective_matrices(&mut inputs, &mut rewards, &mut next_states, &mut states);

        // statistics are recomputed from scratch at every retrain
        self.input_stats = fit_stats(&inputs, n, d_in, DEFAULT_EPS_FLOOR)?;
        let mut raw_state_targets = vec![0.0; n * self.d_s];
        for i in 0..n * self.d_s {
            raw_state_targets[i] = match self.cfg.target_mode {
                TargetMode::Residual => next_states[i] - states[i],
                TargetMode::Direct => next_states[i],
            };
        }
        self.state_target_stats = fit_stats(&raw_state_targets, n, self.d_s, DEFAULT_EPS_FLOOR)?;
        self.reward_target_stats = fit_stats(&rewards, n, 1, DEFAULT_EPS_FLOOR)?;

        // normalized inputs always; targets normalized only when switched on
        let mut x = inputs;
        for r in 0..n {
            normalization::normalize_into(&mut x[r * d_in..(r + 1) * d_in], &self.input_stats);
        }
        let mut y = vec![0.0; n * d_t];
        for r in 0..n {
            for j in 0..self.d_s {
                let raw = raw_state_targets[r * self.d_s + j];
                y[r * d_t + j] = if self.cfg.target_norm {
                    (raw - self.state_target_stats.mean[j]) / self.state_target_stats.std[j]
                } else {
                    raw
                };
            }
            y[r * d_t + self.d_s] = if self.cfg.target_norm {
                (rewards[r] - self.reward_target_stats.mean[0]) / self.reward_target_stats.std[0]
            } else {
                rewards[r]
            };
        }

        // holdout split from a shared permutation
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let n_hold = ((n as f64) * self.cfg.holdout_fraction).floor().max(1.0) as usize;
        let (train_idx, hold_idx) = perm.split_at(n - n_hold);

        let steps_per_epoch = train_idx.len().div_ceil(self.cfg.minibatch);
        let mut holdout_mse = vec![0.0; self.cfg.n_members];
        let mut epochs_run = vec![0; self.cfg.n_members];

        for m in 0..self.cfg.n_members {
            let mut best = f64::INFINITY;
            let mut no_improve = 0;
            let mut mse = f64::INFINITY;
            for epoch in 0..self.cfg.max_epochs {
                for _ in 0..steps_per_epoch {
                    self.xb.clear();
                    self.yb.clear();
                    let member = &mut self.members[m];
                    for _ in 0..self.cfg.minibatch {
                        let row = train_idx[member.rng.random_range(0..train_idx.len())];
                        self.xb.extend_from_slice(&x[row * d_in..(row + 1) * d_in]);
                        self.yb.extend_from_slice(&y[row * d_t..(row + 1) * d_t]);
                    }
                    let mut grads = ParamSet::zeros(self.spec.param_count());
                    nll_loss_and_grad(
                        &self.spec,
                        &member.params,
                        &mut self.ws,
                        &self.xb,
                        &self.yb,
                        self.cfg.minibatch,
                        self.cfg.logvar_min,
                        self.cfg.logvar_max,
                        Some(&mut grads),
                    );
                    member.adam.adam_step(&mut member.params, &grads)?;
                }
                epochs_run[m] = epoch + 1;
                mse = self.member_mse(m, &x, &y, hold_idx);
                // early stop: relative improvement below 0.1% for `patience`
                // consecutive epochs
                if best.is_finite() && (best - mse) <= 1e-3 * best {
                    no_improve += 1;
                } else {
                    no_improve = 0;
                }
                best = best.min(mse);
                if no_improve >= self.cfg.patience {
                    break;
                }
            }
            holdout_mse[m] = mse;
        }

        self.elites = select_elites(&holdout_mse, self.cfg.n_elites)?;
        self.trained = true;
        Ok(TrainReport {
            holdout_mse,
            epochs_run,
            elites: self.elites.clone(),
            n_rows: n,
        })
    }

    /// Mean-squared error of the member's mean head over the given rows, in
    /// the (possibly normalized) target space used for training.
    fn member_mse(&mut self, m: usize, x: &[f64], y: &[f64], rows: &[usize]) -> f64 {
        let d_in = self.d_s + self.d_a;
        let d_t = self.d_s + 1;
        let chunk = self.cfg.minibatch.max(1);
        let mut se = 0.0;
        for block in rows.chunks(chunk) {
            self.xb.clear();
            for &row in block {
                self.xb.extend_from_slice(&x[row * d_in..(row + 1) * d_in]);
            }
            let out = nn::forward_batch(
                &self.spec,
                &self.members[m].params,
                &self.xb,
                block.len(),
                &mut self.ws,
            );
            for (k, &row) in block.iter().enumerate() {
                for j in 0..d_t {
                    let e = out[k * 2 * d_t + j] - y[row * d_t + j];
                    se += e * e;
                }
            }
        }
        se / (rows.len() as f64 * d_t as f64)
    }

    /// Raw mean/log-variance heads of one member on a raw `[s ‖ a]` query.
    fn member_prediction(&self, m: usize, input_norm: &[f64]) -> EnsemblePrediction {
        let d_t = self.d_s + 1;
        let mut ws = Workspace::new(&self.spec, 1);
        let out = nn::forward_batch(&self.spec, &self.members[m].params, input_norm, 1, &mut ws);
        EnsemblePrediction {
            mean: out[..d_t].to_vec(),
            logvar: out[d_t..]
                .iter()
                .map(|&raw| bound_logvar(raw, self.cfg.logvar_min, self.cfg.logvar_max))
                .collect(),
        }
    }

    /// One-step prediction through one uniformly chosen elite.
    pub fn predict_step(
        &self,
        s: &[f64],
        a: &[f64],
        rng: &mut dyn RngCore,
        deterministic: bool,
    ) -> Result<(Vec<f64>, f64)> {
        if !self.trained {
            return Err(Error::Invalid(
                "predict_step called before first ensemble training".into(),
            ));
        }
        if s.len() != self.d_s || a.len() != self.d_a {
            return Err(Error::DimMismatch {
                what: "predict_step input",
                expected: self.d_s,
                got: s.len(),
            });
        }
        let mut input: Vec<f64> = s.iter().chain(a.iter()).copied().collect();
        normalization::normalize_into(&mut input, &self.input_stats);
        let elite = self.elites[rng.random_range(0..self.elites.len())];
        let pred = self.member_prediction(elite, &input);
        let d_t = self.d_s + 1;
        let mut z = vec![0.0; d_t];
        for j in 0..d_t {
            z[j] = if deterministic {
                pred.mean[j]
            } else {
                let eps: f64 = rng.sample(StandardNormal);
                pred.mean[j] + (0.5 * pred.logvar[j]).exp() * eps
            };
        }
        Ok(self.compose_prediction(s, &z))
    }

    /// Denormalizes (when target_norm is on) and converts the state part
    /// back to an absolute next state.
    fn compose_prediction(&self, s: &[f64], z: &[f64]) -> (Vec<f64>, f64) {
        let mut state_part = z[..self.d_s].to_vec();
        let mut reward = z[self.d_s];
        if self.cfg.target_norm {
            normalization::denormalize_into(&mut state_part, &self.state_target_stats);
            reward = reward * self.reward_target_stats.std[0] + self.reward_target_stats.mean[0];
        }
        let next_state = match self.cfg.target_mode {
            TargetMode::Residual => s.iter().zip(&state_part).map(|(a, b)| a + b).collect(),
            TargetMode::Direct => state_part,
        };
        (next_state, reward)
    }

    /// Mean predicted variance `exp(ℓ)` over all dimensions, all members
    /// (elites and non-elites), and all batch rows.
    pub fn variance_diagnostic(&self, batch: &[Transition]) -> Result<f64> {
        if !self.trained {
            return Err(Error::Invalid("variance_diagnostic before training".into()));
        }
        if batch.is_empty() {
            return Err(Error::Empty("variance_diagnostic on empty batch"));
        }
        let d_t = self.d_s + 1;
        let mut total = 0.0;
        let mut ws = Workspace::new(&self.spec, batch.len().min(256));
        let mut input = Vec::new();
        for chunk in batch.chunks(256) {
            input.clear();
            for t in chunk {
                let start = input.len();
                input.extend_from_slice(&t.state);
                input.extend_from_slice(&t.action);
                normalization::normalize_into(&mut input[start..], &self.input_stats);
            }
            for m in 0..self.cfg.n_members {
                let out =
                    nn::forward_batch(&self.spec, &self.members[m].params, &input, chunk.len(), &mut ws);
                for r in 0..chunk.len() {
                    for j in 0..d_t {
                        let lv = bound_logvar(
                            out[r * 2 * d_t + d_t + j],
                            self.cfg.logvar_min,
                            self.cfg.logvar_max,
                        );
                        total += lv.exp();
                    }
                }
            }
        }
        Ok(total / (batch.len() * self.cfg.n_members * d_t) as f64)
    }

    /// Samples `n` real transitions and compares deterministic reward
    /// predictions against stored rewards. Returns the mean bias
    /// `mean(r̂ - r)` and the `(real, predicted)` pairs.
    pub fn reward_bias_probe(
        &self,
        buffer: &ReplayBuffer,
        n: usize,
        rng: &mut dyn RngCore,
    ) -> Result<(f64, Vec<(f64, f64)>)> {
        if buffer.effective_len() == 0 {
            return Err(Error::Empty("reward_bias_probe on empty buffer"));
        }
        let batch = buffer.sample_batch(n, rng)?;
        let mut pairs = Vec::with_capacity(n);
        let mut bias = 0.0;
        for t in &batch {
            let (_, r_hat) = self.predict_step(&t.state, &t.action, rng, true)?;
            bias += r_hat - t.reward;
            pairs.push((t.reward, r_hat));
        }
        Ok((bias / n as f64, pairs))
    }
}

/// Anything that can stand in for the learned model when generating
/// synthetic transitions (the ensemble itself, or a true-dynamics oracle in
/// tests).
pub trait OneStepModel {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;

    /// Predicts one step for `rows` (state, action) pairs, appending to
    /// `next` and `rewards`.
    fn predict_rows(
        &mut self,
        states: &[f64],
        actions: &[f64],
        rows: usize,
        rng: &mut dyn RngCore,
        deterministic: bool,
        next: &mut Vec<f64>,
        rewards: &mut Vec<f64>,
    ) -> Result<()>;
}

impl OneStepModel for DynamicsEnsemble {
    fn state_dim(&self) -> usize {
        self.d_s
    }

    fn action_dim(&self) -> usize {
        self.d_a
    }

    fn predict_rows(
        &mut self,
        states: &[f64],
        actions: &[f64],
        rows: usize,
        rng: &mut dyn RngCore,
        deterministic: bool,
        next: &mut Vec<f64>,
        rewards: &mut Vec<f64>,
    ) -> Result<()> {
        if !self.trained {
            return Err(Error::Invalid(
                "predict_rows called before first ensemble training".into(),
            ));
        }
        let d_t = self.d_s + 1;
        let d_in = self.d_s + self.d_a;
        // rng draws happen in row order regardless of the per-elite grouping
        // below: all elite choices first, then per-row noise.
        let choices: Vec<usize> = (0..rows)
            .map(|_| self.elites[rng.random_range(0..self.elites.len())])
            .collect();

        let mut input = vec![0.0; rows * d_in];
        for r in 0..rows {
            let row = &mut input[r * d_in..(r + 1) * d_in];
            row[..self.d_s].copy_from_slice(&states[r * self.d_s..(r + 1) * self.d_s]);
            row[self.d_s..].copy_from_slice(&actions[r * self.d_a..(r + 1) * self.d_a]);
            normalization::normalize_into(row, &self.input_stats);
        }

        let mut mean = vec![0.0; rows * d_t];
        let mut logvar = vec![0.0; rows * d_t];
        let cap = self.ws.max_batch();
        for &m in &self.elites {
            // gather this elite's rows in chunks that fit the workspace
            let rows_for_m: Vec<usize> = (0..rows).filter(|&r| choices[r] == m).collect();
            for block in rows_for_m.chunks(cap) {
                self.xb.clear();
                for &r in block {
                    self.xb.extend_from_slice(&input[r * d_in..(r + 1) * d_in]);
                }
                let out = nn::forward_batch(
                    &self.spec,
                    &self.members[m].params,
                    &self.xb,
                    block.len(),
                    &mut self.ws,
                );
                for (k, &r) in block.iter().enumerate() {
                    mean[r * d_t..(r + 1) * d_t]
                        .copy_from_slice(&out[k * 2 * d_t..k * 2 * d_t + d_t]);
                    for j in 0..d_t {
                        logvar[r * d_t + j] = bound_logvar(
                            out[k * 2 * d_t + d_t + j],
                            self.cfg.logvar_min,
                            self.cfg.logvar_max,
                        );
                    }
                }
            }
        }

        let mut z = vec![0.0; d_t];
        for r in 0..rows {
            for j in 0..d_t {
                z[j] = if deterministic {
                    mean[r * d_t + j]
                } else {
                    let eps: f64 = rng.sample(StandardNormal);
                    mean[r * d_t + j] + (0.5 * logvar[r * d_t + j]).exp() * eps
                };
            }
            let (ns, rw) =
                self.compose_prediction(&states[r * self.d_s..(r + 1) * self.d_s], &z);
            next.extend_from_slice(&ns);
            rewards.push(rw);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg() -> EnsembleConfig {
        EnsembleConfig {
            hidden_dims: vec![32, 32],
            minibatch: 64,
            ..EnsembleConfig::default()
        }
    }

    fn tr(s: Vec<f64>, a: Vec<f64>, r: f64, s2: Vec<f64>) -> Transition {
        Transition {
            state: s,
            action: a,
            reward: r,
            next_state: s2,
            terminal: false,
        }
    }

    #[test]
    fn build_targets_static_residual_is_zero() {
        let batch = vec![
            tr(vec![1.0, -2.0], vec![0.3], 0.5, vec![1.0, -2.0]),
            tr(vec![4.0, 0.1], vec![-0.1], 0.7, vec![4.0, 0.1]),
        ];
        let ss = RunningStats::identity(2);
        let rs = RunningStats::identity(1);
        let y = build_targets(&batch, TargetMode::Residual, false, &ss, &rs).unwrap();
        assert_eq!(y, vec![0.0, 0.0, 0.5, 0.0, 0.0, 0.7]);
    }

    #[test]
    fn build_targets_direct_is_next_state() {
        let batch = vec![tr(vec![1.0, 2.0], vec![0.0], 0.25, vec![3.0, -4.0])];
        let ss = RunningStats::identity(2);
        let rs = RunningStats::identity(1);
        let y = build_targets(&batch, TargetMode::Direct, false, &ss, &rs).unwrap();
        assert_eq!(y, vec![3.0, -4.0, 0.25]);
    }

    #[test]
    fn build_targets_normalization_matches_stats_module() {
        let batch = vec![
            tr(vec![0.0], vec![0.0], 1.0, vec![2.0]),
            tr(vec![0.0], vec![0.0], 2.0, vec![4.0]),
            tr(vec![0.0], vec![0.0], 3.0, vec![6.0]),
        ];
        // direct-mode raw targets: states {2,4,6}, rewards {1,2,3}
        let raw_states = vec![2.0, 4.0, 6.0];
        let raw_rewards = vec![1.0, 2.0, 3.0];
        let ss = fit_stats(&raw_states, 3, 1, DEFAULT_EPS_FLOOR).unwrap();
        let rs = fit_stats(&raw_rewards, 3, 1, DEFAULT_EPS_FLOOR).unwrap();
        let y = build_targets(&batch, TargetMode::Direct, true, &ss, &rs).unwrap();
        for (i, t) in batch.iter().enumerate() {
            let zs = normalization::normalize(&[t.next_state[0]], &ss).unwrap();
            let zr = normalization::normalize(&[t.reward], &rs).unwrap();
            assert!((y[i * 2] - zs[0]).abs() < 1e-12);
            assert!((y[i * 2 + 1] - zr[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_trivial_values() {
        let p = EnsemblePrediction {
            mean: vec![1.0, 2.0],
            logvar: vec![0.0, 0.0],
        };
        assert_eq!(gaussian_nll(&p, &[1.0, 2.0]).unwrap(), 0.0);

        let p = EnsemblePrediction {
            mean: vec![1.0],
            logvar: vec![0.0],
        };
        assert_eq!(gaussian_nll(&p, &[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn nll_matches_scalar_oracle_and_rejects_nonfinite() {
        let mut r = rng(3);
        for _ in 0..50 {
            let d = 4;
            let mean: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let logvar: Vec<f64> = (0..d).map(|_| r.random_range(-3.0..0.5)).collect();
            let target: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let got = gaussian_nll(
                &EnsemblePrediction {
                    mean: mean.clone(),
                    logvar: logvar.clone(),
                },
                &target,
            )
            .unwrap();
            let mut want = 0.0;
            for j in 0..d {
                let e: f64 = mean[j] - target[j];
                want += e.powi(2) / logvar[j].exp() + logvar[j];
            }
            want /= d as f64;
            assert!((got - want).abs() < 1e-10);
        }
        let bad = EnsemblePrediction {
            mean: vec![f64::NAN],
            logvar: vec![0.0],
        };
        assert!(gaussian_nll(&bad, &[0.0]).is_err());
    }

    #[test]
    fn bound_logvar_behavior() {
        // far from both bounds the correction is tiny
        let b = bound_logvar(0.0, -10.0, 10.0);
        assert!(b.abs() < 1e-4, "bound(0) = {b}");
        // asymptotes; the upper one carries the inherent ln(1+e^{min-max})
        // offset of the two-sided softplus clamp (~2.8e-5 at these bounds)
        assert!((bound_logvar(1e6, -10.0, 0.5) - 0.5).abs() < 1e-4);
        assert!((bound_logvar(-1e6, -10.0, 0.5) + 10.0).abs() < 1e-9);
        // in exact arithmetic the result is strictly inside; in f64 the
        // softplus increment is absorbed at the far ends, so the working
        // guarantee is the closed interval (plus the upper offset)
        let slack = (-(0.5f64 - -10.0)).exp().ln_1p();
        for raw in [-100.0, -5.0, 0.0, 5.0, 100.0] {
            let v = bound_logvar(raw, -10.0, 0.5);
            assert!(v >= -10.0 && v <= 0.5 + slack + 1e-12, "v = {v}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut r = rng(11);
        let spec = MlpSpec::new(3, vec![8], 6, Activation::Swish, OutputActivation::Identity)
            .unwrap();
        let mut params = nn::init_params(&spec, &mut r);
        let rows = 4;
        let x: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut ws = Workspace::new(&spec, rows);
        let mut grads = ParamSet::zeros(spec.param_count());
        nll_loss_and_grad(&spec, &params, &mut ws, &x, &y, rows, -10.0, 0.5, Some(&mut grads));

        for _ in 0..50 {
            let i = r.random_range(0..params.values.len());
            let h = 1e-4;
            let orig = params.values[i];
            params.values[i] = orig + h;
            let lp = nll_loss_and_grad(&spec, &params, &mut ws, &x, &y, rows, -10.0, 0.5, None);
            params.values[i] = orig - h;
            let lm = nll_loss_and_grad(&spec, &params, &mut ws, &x, &y, rows, -10.0, 0.5, None);
            params.values[i] = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads.values[i];
            let rel = (analytic - numeric).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn select_elites_cases() {
        assert_eq!(select_elites(&[3.0, 1.0, 2.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_elites(&[5.0, 5.0, 5.0, 5.0], 2).unwrap(), vec![0, 1]);
        assert_eq!(select_elites(&[2.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(select_elites(&[1.0], 2).is_err());
        assert!(select_elites(&[f64::NAN], 1).is_err());
    }

    /// Buffer from a linear-Gaussian system for training tests.
    fn linear_gaussian_buffer(n: usize, seed: u64) -> ReplayBuffer {
        let mut r = rng(seed);
        let mut buf = ReplayBuffer::new(2, 1, n);
        for _ in 0..n {
            let s: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            let a = r.random_range(-1.0..1.0);
            let noise: f64 = r.sample::<f64, _>(StandardNormal) * 0.05;
            let s2 = vec![
                0.9 * s[0] - 0.2 * s[1] + 0.3 * a + noise,
                0.2 * s[0] + 0.9 * s[1] - 0.1 * a,
            ];
            let rew = 0.5 * s[0] + 0.1 * a;
            buf.push(&tr(s, vec![a], rew, s2)).unwrap();
        }
        buf
    }

    /// Least-squares oracle: fits `y ≈ [x,1]·W` by normal equations and
    /// returns the mean squared error over the same rows.
    fn least_squares_mse(x: &[f64], y: &[f64], n: usize, d_in: usize, d_out: usize) -> f64 {
        let k = d_in + 1;
        let mut ata = vec![0.0; k * k];
        let mut atb = vec![0.0; k * d_out];
        let xi = |r: usize, i: usize| if i < d_in { x[r * d_in + i] } else { 1.0 };
        for r in 0..n {
            for i in 0..k {
                for j in 0..k {
                    ata[i * k + j] += xi(r, i) * xi(r, j);
                }
                for o in 0..d_out {
                    atb[i * d_out + o] += xi(r, i) * y[r * d_out + o];
                }
            }
        }
        // Gaussian elimination with partial pivoting
        let mut a = ata;
        let mut b = atb;
        for col in 0..k {
            let piv = (col..k)
                .max_by(|&p, &q| a[p * k + col].abs().partial_cmp(&a[q * k + col].abs()).unwrap())
                .unwrap();
            for j in 0..k {
                a.swap(col * k + j, piv * k + j);
            }
            for o in 0..d_out {
                b.swap(col * d_out + o, piv * d_out + o);
            }
            let diag = a[col * k + col];
            for row in 0..k {
                if row == col || a[row * k + col] == 0.0 {
                    continue;
                }
                let f = a[row * k + col] / diag;
                for j in 0..k {
                    a[row * k + j] -= f * a[col * k + j];
                }
                for o in 0..d_out {
                    b[row * d_out + o] -= f * b[col * d_out + o];
                }
            }
        }
        let w: Vec<f64> = (0..k * d_out)
            .map(|i| b[i] / a[(i / d_out) * k + (i / d_out)])
            .collect();
        let mut se = 0.0;
        for r in 0..n {
            for o in 0..d_out {
                let mut pred = 0.0;
                for i in 0..k {
                    pred += xi(r, i) * w[i * d_out + o];
                }
                let e = pred - y[r * d_out + o];
                se += e * e;
            }
        }
        se / (n * d_out) as f64
    }

    #[test]
    fn training_beats_least_squares_oracle_within_margin() {
        let buf = linear_gaussian_buffer(2000, 21);
        let mut r = rng(22);
        let cfg = EnsembleConfig {
            target_mode: TargetMode::Direct,
            target_norm: true,
            max_epochs: 80,
            patience: 5,
            ..small_cfg()
        };
        let mut ens = DynamicsEnsemble::new(2, 1, cfg, &mut r).unwrap();
        let report = ens.train(&buf, &mut r).unwrap();
        assert_eq!(report.elites.len(), 5);
        assert_eq!(report.holdout_mse.len(), 7);

        // oracle on the same normalized design
        let (mut inputs, mut rewards, mut next_states, mut states) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let n = buf.effective_matrices(&mut inputs, &mut rewards, &mut next_states, &mut states);
        for r_ in 0..n {
            normalization::normalize_into(&mut inputs[r_ * 3..(r_ + 1) * 3], ens.input_stats());
        }
        let mut y = vec![0.0; n * 3];
        for r_ in 0..n {
            for j in 0..2 {
                y[r_ * 3 + j] = (next_states[r_ * 2 + j] - ens.state_target_stats().mean[j])
                    / ens.state_target_stats().std[j];
            }
            y[r_ * 3 + 2] =
                (rewards[r_] - ens.reward_target_stats().mean[0]) / ens.reward_target_stats().std[0];
        }
        let oracle = least_squares_mse(&inputs, &y, n, 3, 3);
        let best = report
            .holdout_mse
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(
            best <= oracle * 1.1,
            "elite holdout MSE {best} vs oracle {oracle}"
        );
    }

    #[test]
    fn training_is_deterministic_and_reports_five_elites() {
        let buf = linear_gaussian_buffer(600, 31);
        let run = |seed: u64| {
            let mut r = rng(seed);
            let mut ens = DynamicsEnsemble::new(2, 1, small_cfg(), &mut r).unwrap();
            let report = ens.train(&buf, &mut r).unwrap();
            (report.holdout_mse, report.epochs_run, report.elites)
        };
        let (m1, e1, el1) = run(40);
        let (m2, e2, el2) = run(40);
        assert_eq!(m1, m2);
        assert_eq!(e1, e2);
        assert_eq!(el1, el2);
        assert_eq!(el1.len(), 5);
    }

    #[test]
    fn training_requires_enough_rows() {
        let buf = linear_gaussian_buffer(100, 32);
        let mut r = rng(33);
        let mut ens = DynamicsEnsemble::new(2, 1, small_cfg(), &mut r).unwrap();
        assert!(ens.train(&buf, &mut r).is_err());
    }

    #[test]
    fn predict_before_training_errors() {
        let mut r = rng(34);
        let ens = DynamicsEnsemble::new(2, 1, small_cfg(), &mut r).unwrap();
        assert!(ens.predict_step(&[0.0, 0.0], &[0.0], &mut r, true).is_err());
    }

    #[test]
    fn deterministic_predictions_compose_modes_correctly() {
        let buf = linear_gaussian_buffer(1500, 41);
        for mode in [TargetMode::Residual, TargetMode::Direct] {
            let mut r = rng(42);
            let cfg = EnsembleConfig {
                target_mode: mode,
                target_norm: true,
                max_epochs: 40,
                patience: 3,
                ..small_cfg()
            };
            let mut ens = DynamicsEnsemble::new(2, 1, cfg, &mut r).unwrap();
            ens.train(&buf, &mut r).unwrap();
            let s = [0.3, -0.2];
            let a = [0.5];
            let (s2, _r_hat) = ens.predict_step(&s, &a, &mut r, true).unwrap();
            // true next state of the generator (noiseless part)
            let want = [
                0.9 * s[0] - 0.2 * s[1] + 0.3 * a[0],
                0.2 * s[0] + 0.9 * s[1] - 0.1 * a[0],
            ];
            for (g, w) in s2.iter().zip(&want) {
                assert!(
                    (g - w).abs() < 0.1,
                    "{mode:?}: predicted {g}, expected near {w}"
                );
            }
        }
    }

    #[test]
    fn stochastic_predictions_center_on_mean() {
        let buf = linear_gaussian_buffer(1500, 51);
        let mut r = rng(52);
        let cfg = EnsembleConfig {
            target_mode: TargetMode::Direct,
            target_norm: true,
            n_members: 2,
            n_elites: 1,
            ..small_cfg()
        };
        let mut ens = DynamicsEnsemble::new(2, 1, cfg, &mut r).unwrap();
        ens.train(&buf, &mut r).unwrap();
        let s = [0.1, 0.4];
        let a = [-0.3];
        let (mu, _) = ens.predict_step(&s, &a, &mut r, true).unwrap();
        let n = 10_000;
        let mut mean = vec![0.0; 2];
        let mut sq = vec![0.0; 2];
        for _ in 0..n {
            let (z, _) = ens.predict_step(&s, &a, &mut r, false).unwrap();
            for j in 0..2 {
                mean[j] += z[j];
                sq[j] += z[j] * z[j];
            }
        }
        for j in 0..2 {
            mean[j] /= n as f64;
            let var = sq[j] / n as f64 - mean[j] * mean[j];
            let se = (var / n as f64).sqrt();
            assert!(
                (mean[j] - mu[j]).abs() <= 3.0 * se.max(1e-12),
                "dim {j}: empirical mean {} vs mu {} (se {se})",
                mean[j],
                mu[j]
            );
        }
    }

    #[test]
    fn variance_diagnostic_trivial_bounds() {
        // construct an untrained-but-marked-trained ensemble with zeroed
        // params: raw logvar output 0 -> bounded near -0.47, so the
        // diagnostic equals exp(bound(0)) exactly
        let mut r = rng(61);
        let mut ens = DynamicsEnsemble::new(2, 1, small_cfg(), &mut r).unwrap();
        for m in &mut ens.members {
            m.params = ParamSet::zeros(ens.spec.param_count());
        }
        ens.trained = true;
        let batch = vec![tr(vec![0.5, -0.5], vec![0.2], 0.0, vec![0.0, 0.0])];
        let got = ens.variance_diagnostic(&batch).unwrap();
        let want = bound_logvar(0.0, ens.cfg.logvar_min, ens.cfg.logvar_max).exp();
        assert!((got - want).abs() < 1e-12);
        assert!(ens.variance_diagnostic(&[]).is_err());
    }

    #[test]
    fn reward_bias_probe_signs() {
        // constant-zero reward predictor on all-positive rewards has bias
        // equal to -mean(r)
        let mut r = rng(62);
        let mut buf = ReplayBuffer::new(1, 1, 64);
        for i in 0..64 {
            buf.push(&tr(vec![0.0], vec![0.0], 1.0 + (i % 3) as f64, vec![0.0]))
                .unwrap();
        }
        let cfg = EnsembleConfig {
            target_norm: false,
            ..small_cfg()
        };
        let mut ens = DynamicsEnsemble::new(1, 1, cfg, &mut r).unwrap();
        for m in &mut ens.members {
            m.params = ParamSet::zeros(ens.spec.param_count());
        }
        ens.trained = true;
        let (bias, pairs) = ens.reward_bias_probe(&buf, 512, &mut r).unwrap();
        let mean_r: f64 = pairs.iter().map(|(real, _)| real).sum::<f64>() / pairs.len() as f64;
        assert!((bias + mean_r).abs() < 1e-9, "bias {bias} vs -mean {mean_r}");
        for (_, pred) in &pairs {
            assert_eq!(*pred, 0.0);
        }
    }

    #[test]
    fn scale_equivariance_of_normalized_targets() {
        // scaling every state dimension by c and refitting stats leaves
        // normalized targets unchanged
        let mut r = rng(63);
        let n = 200;
        let mut states = Vec::new();
        let mut nexts = Vec::new();
        for _ in 0..n {
            states.push(vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
            nexts.push(vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]);
        }
        let build = |scale: f64| {
            let batch: Vec<Transition> = (0..n)
                .map(|i| {
                    tr(
                        states[i].iter().map(|v| v * scale).collect(),
                        vec![0.0],
                        0.5,
                        nexts[i].iter().map(|v| v * scale).collect(),
                    )
                })
                .collect();
            let mut raw = Vec::new();
            for t in &batch {
                raw.push(t.next_state[0] - t.state[0]);
                raw.push(t.next_state[1] - t.state[1]);
            }
            let ss = fit_stats(&raw, n, 2, 1e-12).unwrap();
            let rs = fit_stats(&vec![0.5; n], n, 1, 1e-12).unwrap();
            build_targets(&batch, TargetMode::Residual, true, &ss, &rs).unwrap()
        };
        let y1 = build(1.0);
        let yc = build(137.0);
        for (a, b) in y1.iter().zip(&yc) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn mode_equivalence_on_static_dynamics() {
        // s' = s with a nonlinear reward: both target modes should fit
        // comparably well since the reward dimension carries all the error
        let mut r = rng(64);
        let mut buf = ReplayBuffer::new(2, 1, 1200);
        for _ in 0..1200 {
            let s: Vec<f64> = (0..2).map(|_| r.random_range(-1.0..1.0)).collect();
            let a = r.random_range(-1.0..1.0);
            let rew = (2.0 * s[0] * a).tanh() * 0.5 + 0.5;
            buf.push(&tr(s.clone(), vec![a], rew, s)).unwrap();
        }
        let mse_for = |mode: TargetMode| {
            let mut r = rng(65);
            let cfg = EnsembleConfig {
                target_mode: mode,
                target_norm: true,
                max_epochs: 40,
                patience: 3,
                ..small_cfg()
            };
            let mut ens = DynamicsEnsemble::new(2, 1, cfg, &mut r).unwrap();
            let report = ens.train(&buf, &mut r).unwrap();
            report
                .holdout_mse
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min)
        };
        let res = mse_for(TargetMode::Residual);
        let dir = mse_for(TargetMode::Direct);
        let ratio = (res / dir).max(dir / res);
        assert!(ratio <= 2.0, "residual {res} vs direct {dir} (ratio {ratio})");
    }

    #[test]
    fn elite_set_always_full_size() {
        let buf = linear_gaussian_buffer(700, 71);
        let mut r = rng(72);
        let mut ens = DynamicsEnsemble::new(2, 1, small_cfg(), &mut r).unwrap();
        for _ in 0..3 {
            let report = ens.train(&buf, &mut r).unwrap();
            assert_eq!(report.elites.len(), ens.cfg.n_elites);
            assert!(report.elites.iter().all(|&e| e < ens.cfg.n_members));
        }
    }
}
