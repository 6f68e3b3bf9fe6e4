//! The training loop that distinguishes the model-based runs from plain SAC:
//! scheduled ensemble retrains, one-step synthetic rollouts branched from
//! stored real states, and synthetic/real batch mixing for every
//! actor-critic update. Also hosts the pseudo-online probe, which replays a
//! dumped buffer in growing prefixes through ensemble training alone.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ExperimentConfig;
use crate::ensemble::{DynamicsEnsemble, OneStepModel};
use crate::envs;
use crate::error::{Error, Result};
use crate::eval::critic_probe;
use crate::metrics::MetricsRow;
use crate::replay::{Batch, ReplayBuffer, Transition};
use crate::sac::SacAgent;

/// Independent random streams, split from the master seed in a fixed order.
/// The agent-side streams (init, env, action, batch, update, eval) are
/// consumed identically whether or not a model is attached, which is what
/// makes a synthetic_ratio=0 model-based run reproduce plain SAC update for
/// update.
struct RngStreams {
    init: ChaCha8Rng,
    env: ChaCha8Rng,
    action: ChaCha8Rng,
    batch: ChaCha8Rng,
    update: ChaCha8Rng,
    eval: ChaCha8Rng,
    ensemble: ChaCha8Rng,
    rollout: ChaCha8Rng,
    probe: ChaCha8Rng,
}

impl RngStreams {
    fn from_seed(seed: u64) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || ChaCha8Rng::seed_from_u64(master.next_u64());
        Self {
            init: next(),
            env: next(),
            action: next(),
            batch: next(),
            update: next(),
            eval: next(),
            ensemble: next(),
            rollout: next(),
            probe: next(),
        }
    }
}

/// Branches `n` one-step synthetic rollouts from uniformly drawn stored real
/// states, using the current stochastic policy for actions, and pushes them
/// (never terminal) into the synthetic buffer.
pub fn generate_rollouts(
    model: &mut dyn OneStepModel,
    agent: &mut SacAgent,
    real: &ReplayBuffer,
    synth: &mut ReplayBuffer,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<usize> {
    if real.is_empty() {
        return Err(Error::Empty("generate_rollouts on empty real buffer"));
    }
    let d_s = model.state_dim();
    let d_a = model.action_dim();
    let mut states = Vec::with_capacity(n * d_s);
    for _ in 0..n {
        let slot = real.sample_slot(rng);
        states.extend_from_slice(real.state_row(slot));
    }
    let mut actions = Vec::with_capacity(n * d_a);
    agent.sample_actions_batch(&states, n, rng, &mut actions);
    let mut next = Vec::with_capacity(n * d_s);
    let mut rewards = Vec::with_capacity(n);
    model.predict_rows(&states, &actions, n, rng, false, &mut next, &mut rewards)?;
    for r in 0..n {
        synth.push_raw(
            &states[r * d_s..(r + 1) * d_s],
            &actions[r * d_a..(r + 1) * d_a],
            rewards[r],
            &next[r * d_s..(r + 1) * d_s],
            false,
        );
    }
    Ok(n)
}

/// Mixed batch: floor(ratio·B) synthetic plus the remainder real, shuffled.
/// Falls back to all-real when the synthetic side is empty or the ratio is
/// zero (and consumes no extra randomness in that case).
pub fn mix_batch(
    real: &ReplayBuffer,
    synth: &ReplayBuffer,
    batch_size: usize,
    ratio: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<Transition>> {
    if batch_size == 0 {
        return Err(Error::Invalid("mix_batch with batch_size 0".into()));
    }
    let mut batch = Batch::default();
    mix_batch_into(real, synth, batch_size, ratio, rng, &mut batch);
    let d_s = real.state_dim();
    let d_a = real.action_dim();
    Ok((0..batch.rows)
        .map(|r| Transition {
            state: batch.states[r * d_s..(r + 1) * d_s].to_vec(),
            action: batch.actions[r * d_a..(r + 1) * d_a].to_vec(),
            reward: batch.rewards[r],
            next_state: batch.next_states[r * d_s..(r + 1) * d_s].to_vec(),
            terminal: batch.terminals[r] == 1.0,
        })
        .collect())
}

/// Flat-batch variant used by the update loop.
pub fn mix_batch_into(
    real: &ReplayBuffer,
    synth: &ReplayBuffer,
    batch_size: usize,
    ratio: f64,
    rng: &mut dyn RngCore,
    out: &mut Batch,
) {
    assert!(batch_size > 0, "mix_batch_into with batch_size 0");
    assert!(!real.is_empty(), "mix_batch_into needs real data");
    let n_synth = ((ratio * batch_size as f64).floor() as usize).min(batch_size);
    if n_synth == 0 || synth.is_empty() {
        real.sample_into(batch_size, rng, out);
        return;
    }
    if n_synth == batch_size {
        synth.sample_into(batch_size, rng, out);
        return;
    }
    // draw slots from both sides, then shuffle the combined order
    let mut picks: Vec<(bool, usize)> = Vec::with_capacity(batch_size);
    for _ in 0..n_synth {
        picks.push((true, synth.sample_slot(rng)));
    }
    for _ in 0..batch_size - n_synth {
        picks.push((false, real.sample_slot(rng)));
    }
    for i in (1..picks.len()).rev() {
        let j = rng.random_range(0..=i);
        picks.swap(i, j);
    }
    out.clear();
    for (from_synth, slot) in picks {
        if from_synth {
            synth.append_row(slot, out);
        } else {
            real.append_row(slot, out);
        }
    }
    out.rows = batch_size;
}

/// Everything a finished (or aborted) training run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub label: String,
    pub env_name: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Env steps at which the ensemble was retrained.
    pub retrain_steps: Vec<usize>,
    pub synthetic_generated: usize,
    /// Diagnostic when the run aborted on a non-finite loss; metric rows up
    /// to the abort are retained.
    pub error: Option<String>,
}

/// Runs one full training loop per the configuration. Pure SAC never
/// constructs an ensemble; model-based runs retrain it on the configured
/// cadence and mix synthetic batches into every update.
pub fn run_training(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let mut streams = RngStreams::from_seed(config.dyna.seed);
    let mut env = envs::make_env(&config.env.name, &config.env.params)?;
    let mut eval_env = envs::make_env(&config.env.name, &config.env.params)?;
    let d_s = env.spec().d_s;
    let d_a = env.spec().d_a;

    let mut agent = SacAgent::new(d_s, d_a, config.sac.clone(), &mut streams.init)?;
    let mut ensemble = if config.dyna.algo.uses_model() {
        Some(DynamicsEnsemble::new(
            d_s,
            d_a,
            config.ensemble.clone(),
            &mut streams.ensemble,
        )?)
    } else {
        None
    };
    let mut real = ReplayBuffer::new(d_s, d_a, config.dyna.real_buffer_capacity);
    let mut synth = ReplayBuffer::new(d_s, d_a, config.dyna.synth_buffer_capacity);

    let mut out = RunOutput {
        label: config.label(),
        env_name: config.env.name.clone(),
        seed: config.dyna.seed,
        rows: Vec::new(),
        retrain_steps: Vec::new(),
        synthetic_generated: 0,
        error: None,
    };

    let warmup = config.sac.warmup_steps;
    let batch_size = config.sac.batch;
    let mut obs = env.reset(&mut streams.env);
    let mut batch = Batch::default();
    let mut action_buf = vec![0.0; d_a];
    let mut critic_loss_sum = 0.0;
    let mut updates_since_eval = 0usize;

    for step in 1..=config.dyna.total_env_steps {
        // act
        if step <= warmup {
            for a in action_buf.iter_mut() {
                *a = streams.action.random_range(-1.0..1.0);
            }
        } else {
            let (a, _) = agent.actor_sample(&obs, &mut streams.action, false)?;
            action_buf.copy_from_slice(&a);
        }
        let sr = env.step(&action_buf);
        real.push_raw(&obs, &action_buf, sr.reward, &sr.next_obs, sr.terminal);
        obs = if sr.terminal || sr.truncated {
            env.reset(&mut streams.env)
        } else {
            sr.next_obs
        };

        // model maintenance
        if let Some(ens) = ensemble.as_mut() {
            if step % config.ensemble.retrain_interval == 0
                && step >= warmup
                && real.effective_len() >= 2 * config.ensemble.minibatch
            {
                ens.train(&real, &mut streams.ensemble)?;
                out.retrain_steps.push(step);
            }
            if ens.is_trained() && config.dyna.rollouts_per_step > 0 {
                out.synthetic_generated += generate_rollouts(
                    ens,
                    &mut agent,
                    &real,
                    &mut synth,
                    config.dyna.rollouts_per_step,
                    &mut streams.rollout,
                )?;
            }
        }

        // agent updates
        if step > warmup && real.len() >= batch_size {
            for _ in 0..config.sac.updates_per_step {
                if config.dyna.algo.uses_model() {
                    mix_batch_into(
                        &real,
                        &synth,
                        batch_size,
                        config.dyna.synthetic_ratio,
                        &mut streams.batch,
                        &mut batch,
                    );
                } else {
                    real.sample_into(batch_size, &mut streams.batch, &mut batch);
                }
                match agent.update(&batch, &mut streams.update) {
                    Ok(m) => {
                        critic_loss_sum += m.critic_loss;
                        updates_since_eval += 1;
                    }
                    Err(e) => {
                        out.error = Some(format!("update aborted at step {step}: {e}"));
                        return Ok(out);
                    }
                }
            }
        }

        // evaluation
        if step % config.eval.eval_interval == 0 {
            let mut returns = Vec::with_capacity(config.eval.eval_episodes);
            let mut probe_states = Vec::new();
            for _ in 0..config.eval.eval_episodes {
                let mut eobs = eval_env.reset(&mut streams.eval);
                let mut ep_return = 0.0;
                loop {
                    probe_states.extend_from_slice(&eobs);
                    let (a, _) = agent.actor_sample(&eobs, &mut streams.eval, true)?;
                    let er = eval_env.step(&a);
                    ep_return += er.reward;
                    eobs = er.next_obs;
                    if er.terminal || er.truncated {
                        break;
                    }
                }
                returns.push(ep_return);
            }
            let eval_return = returns.iter().sum::<f64>() / returns.len() as f64;
            let n_probe = probe_states.len() / d_s;
            let q_mean = critic_probe(&mut agent, &probe_states, n_probe, &mut streams.eval)?;

            let (reward_bias, variance_diag) = match ensemble.as_ref() {
                Some(ens) if ens.is_trained() => {
                    let (bias, _) = ens.reward_bias_probe(&real, 256, &mut streams.probe)?;
                    let sample = real.sample_batch(256, &mut streams.probe)?;
                    (bias, ens.variance_diagnostic(&sample)?)
                }
                _ => (f64::NAN, f64::NAN),
            };
            let critic_loss = if updates_since_eval > 0 {
                critic_loss_sum / updates_since_eval as f64
            } else {
                f64::NAN
            };
            out.rows.push(MetricsRow {
                step,
                eval_return,
                q_mean,
                reward_bias,
                variance_diag,
                alpha: agent.alpha(),
                critic_loss,
            });
            critic_loss_sum = 0.0;
            updates_since_eval = 0;
        }
    }
    Ok(out)
}

/// One pseudo-online probe round.
#[derive(Debug, Clone)]
pub struct ProbeRound {
    pub reveal_k: usize,
    pub reward_bias: f64,
    pub variance_diag: f64,
    /// Mean holdout MSE over the elite members; NaN before the first train.
    pub holdout_mse: f64,
}

pub struct ProbeOutput {
    pub rounds: Vec<ProbeRound>,
    pub ensemble: DynamicsEnsemble,
}

/// Replays a dumped buffer in growing prefixes of `reveal_step` rows,
/// retraining the ensemble at each reveal and logging the reward-bias and
/// variance diagnostics. No agent updates, no environment interaction; the
/// dump file is only read.
pub fn run_pseudo_online(
    config: &ExperimentConfig,
    dump_path: &Path,
    reveal_step: usize,
) -> Result<ProbeOutput> {
    if reveal_step == 0 {
        return Err(Error::Invalid("reveal_step must be >= 1".into()));
    }
    let mut buffer = ReplayBuffer::load(dump_path)?;
    let mut streams = RngStreams::from_seed(config.dyna.seed);
    let mut ensemble = DynamicsEnsemble::new(
        buffer.state_dim(),
        buffer.action_dim(),
        config.ensemble.clone(),
        &mut streams.ensemble,
    )?;
    let n_rounds = buffer.len() / reveal_step;
    if n_rounds == 0 {
        return Err(Error::Invalid(format!(
            "buffer has {} rows, fewer than one reveal of {reveal_step}",
            buffer.len()
        )));
    }
    let mut rounds = Vec::with_capacity(n_rounds);
    let mut last_report = None;
    for i in 1..=n_rounds {
        let k = i * reveal_step;
        buffer.reveal_prefix(k)?;
        if buffer.effective_len() >= 2 * config.ensemble.minibatch {
            last_report = Some(ensemble.train(&buffer, &mut streams.ensemble)?);
        }
        if ensemble.is_trained() {
            let (bias, _) = ensemble.reward_bias_probe(&buffer, 256, &mut streams.probe)?;
            let sample = buffer.sample_batch(256, &mut streams.probe)?;
            let var = ensemble.variance_diagnostic(&sample)?;
            let mse = last_report
                .as_ref()
                .map(|rep| {
                    let elites = &rep.elites;
                    elites.iter().map(|&m| rep.holdout_mse[m]).sum::<f64>()
                        / elites.len() as f64
                })
                .unwrap_or(f64::NAN);
            rounds.push(ProbeRound {
                reveal_k: k,
                reward_bias: bias,
                variance_diag: var,
                holdout_mse: mse,
            });
        } else {
            rounds.push(ProbeRound {
                reveal_k: k,
                reward_bias: f64::NAN,
                variance_diag: f64::NAN,
                holdout_mse: f64::NAN,
            });
        }
    }
    Ok(ProbeOutput {
        rounds,
        ensemble,
    })
}
