//! Experiment configuration: a flat INI-style file with sections `[sac]`,
//! `[ensemble]`, `[dyna]`, `[env]`, `[eval]`. Every key has a default;
//! unknown keys are errors; command-line overrides win over file values.
//!
//! The `mbpo` and `ftfl` algorithm names pin the ensemble's target mode and
//! normalization so the headline comparison cannot be misconfigured;
//! `ablation` reads both switches from the `[ensemble]` section.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::ensemble::{EnsembleConfig, TargetMode};
use crate::envs;
use crate::error::{Error, Result};
use crate::nn::Activation;
use crate::sac::SacConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Sac,
    Mbpo,
    Ftfl,
    Ablation,
}

impl Algo {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sac" => Ok(Algo::Sac),
            "mbpo" => Ok(Algo::Mbpo),
            "ftfl" => Ok(Algo::Ftfl),
            "ablation" => Ok(Algo::Ablation),
            other => Err(Error::Config(format!(
                "dyna.algo: unknown value {other:?} (want sac|mbpo|ftfl|ablation)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Sac => "sac",
            Algo::Mbpo => "mbpo",
            Algo::Ftfl => "ftfl",
            Algo::Ablation => "ablation",
        }
    }

    pub fn uses_model(&self) -> bool {
        !matches!(self, Algo::Sac)
    }
}

#[derive(Debug, Clone)]
pub struct DynaConfig {
    pub algo: Algo,
    pub total_env_steps: usize,
    pub seed: u64,
    pub synthetic_ratio: f64,
    pub rollouts_per_step: usize,
    pub model_horizon: usize,
    pub real_buffer_capacity: usize,
    pub synth_buffer_capacity: usize,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub final_window: usize,
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub ensemble: EnsembleConfig,
    pub dyna: DynaConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Label used in output filenames and the aggregate report: the algo
    /// name, or the ablation cell (`res`, `res+norm`, `dir`, `dir+norm`).
    pub fn label(&self) -> String {
        match self.dyna.algo {
            Algo::Sac => "sac".into(),
            Algo::Mbpo => "mbpo".into(),
            Algo::Ftfl => "ftfl".into(),
            Algo::Ablation => {
                let base = match self.ensemble.target_mode {
                    TargetMode::Residual => "res",
                    TargetMode::Direct => "dir",
                };
                if self.ensemble.target_norm {
                    format!("{base}+norm")
                } else {
                    base.into()
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sac.validate()?;
        self.ensemble.validate()?;
        if !(0.0..=1.0).contains(&self.dyna.synthetic_ratio) {
            return Err(Error::Config(format!(
                "dyna.synthetic_ratio must be in [0,1], got {}",
                self.dyna.synthetic_ratio
            )));
        }
        if self.dyna.model_horizon != 1 {
            return Err(Error::Config(
                "dyna.model_horizon: only 1 is supported".into(),
            ));
        }
        if self.dyna.total_env_steps == 0 || self.eval.eval_interval == 0 {
            return Err(Error::Config(
                "dyna.total_env_steps and eval.eval_interval must be >= 1".into(),
            ));
        }
        if self.eval.eval_episodes == 0 || self.eval.final_window == 0 {
            return Err(Error::Config(
                "eval.eval_episodes and eval.final_window must be >= 1".into(),
            ));
        }
        // algo pins the FTFL switches
        match self.dyna.algo {
            Algo::Mbpo => {
                if self.ensemble.target_mode != TargetMode::Residual || self.ensemble.target_norm {
                    return Err(Error::Config(
                        "algo=mbpo requires ensemble.target_mode=residual and \
                         ensemble.target_norm=false"
                            .into(),
                    ));
                }
            }
            Algo::Ftfl => {
                if self.ensemble.target_mode != TargetMode::Direct || !self.ensemble.target_norm {
                    return Err(Error::Config(
                        "algo=ftfl requires ensemble.target_mode=direct and \
                         ensemble.target_norm=true"
                            .into(),
                    ));
                }
            }
            _ => {}
        }
        // env name and params must resolve
        envs::make_env(&self.env.name, &self.env.params)?;
        Ok(())
    }

    /// Fully-resolved INI snapshot sufficient to reproduce the run.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[env]");
        let _ = writeln!(s, "name={}", self.env.name);
        for (k, v) in &self.env.params {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "\n[sac]");
        let _ = writeln!(s, "gamma={}", self.sac.gamma);
        let _ = writeln!(s, "tau={}", self.sac.tau);
        let _ = writeln!(s, "lr={}", self.sac.lr);
        let _ = writeln!(s, "beta1={}", self.sac.beta1);
        let _ = writeln!(s, "beta2={}", self.sac.beta2);
        let _ = writeln!(s, "eps={}", self.sac.eps);
        let _ = writeln!(s, "batch={}", self.sac.batch);
        let _ = writeln!(s, "updates_per_step={}", self.sac.updates_per_step);
        let _ = writeln!(s, "warmup_steps={}", self.sac.warmup_steps);
        let _ = writeln!(s, "init_alpha={}", self.sac.init_alpha);
        match self.sac.target_entropy {
            Some(v) => {
                let _ = writeln!(s, "target_entropy={v}");
            }
            None => {
                let _ = writeln!(s, "target_entropy=auto");
            }
        }
        let _ = writeln!(s, "critic_layer_norm={}", self.sac.critic_layer_norm);
        let _ = writeln!(s, "hidden={}", render_dims(&self.sac.hidden_dims));
        let _ = writeln!(s, "activation={}", render_activation(self.sac.activation));
        let _ = writeln!(s, "\n[ensemble]");
        let e = &self.ensemble;
        let _ = writeln!(s, "n_members={}", e.n_members);
        let _ = writeln!(s, "n_elites={}", e.n_elites);
        let _ = writeln!(s, "hidden={}", render_dims(&e.hidden_dims));
        let _ = writeln!(s, "activation={}", render_activation(e.activation));
        let _ = writeln!(s, "target_mode={}", e.target_mode.as_str());
        let _ = writeln!(s, "target_norm={}", e.target_norm);
        let _ = writeln!(s, "logvar_min={}", e.logvar_min);
        let _ = writeln!(s, "logvar_max={}", e.logvar_max);
        let _ = writeln!(s, "lr={}", e.lr);
        let _ = writeln!(s, "beta1={}", e.beta1);
        let _ = writeln!(s, "beta2={}", e.beta2);
        let _ = writeln!(s, "eps={}", e.eps);
        let _ = writeln!(s, "retrain_interval={}", e.retrain_interval);
        let _ = writeln!(s, "holdout_fraction={}", e.holdout_fraction);
        let _ = writeln!(s, "max_epochs={}", e.max_epochs);
        let _ = writeln!(s, "patience={}", e.patience);
        let _ = writeln!(s, "minibatch={}", e.minibatch);
        let _ = writeln!(s, "\n[dyna]");
        let d = &self.dyna;
        let _ = writeln!(s, "algo={}", d.algo.as_str());
        let _ = writeln!(s, "total_env_steps={}", d.total_env_steps);
        let _ = writeln!(s, "seed={}", d.seed);
        let _ = writeln!(s, "synthetic_ratio={}", d.synthetic_ratio);
        let _ = writeln!(s, "rollouts_per_step={}", d.rollouts_per_step);
        let _ = writeln!(s, "model_horizon={}", d.model_horizon);
        let _ = writeln!(s, "real_buffer_capacity={}", d.real_buffer_capacity);
        let _ = writeln!(s, "synth_buffer_capacity={}", d.synth_buffer_capacity);
        let _ = writeln!(s, "\n[eval]");
        let _ = writeln!(s, "eval_interval={}", self.eval.eval_interval);
        let _ = writeln!(s, "eval_episodes={}", self.eval.eval_episodes);
        let _ = writeln!(s, "final_window={}", self.eval.final_window);
        s
    }
}

fn render_dims(d: &[usize]) -> String {
    d.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn render_activation(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Swish => "swish",
        Activation::Tanh => "tanh",
    }
}

fn parse_activation(key: &str, v: &str) -> Result<Activation> {
    match v {
        "relu" => Ok(Activation::Relu),
        "swish" => Ok(Activation::Swish),
        "tanh" => Ok(Activation::Tanh),
        other => Err(Error::Config(format!(
            "{key}: unknown activation {other:?} (want relu|swish|tanh)"
        ))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected bool, got {other:?}"))),
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected number, got {v:?}")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: expected integer, got {v:?}")))
}

fn parse_dims(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: bad dimension list {v:?}")))
        })
        .collect()
}

/// Raw section/key/value table from INI text.
fn parse_ini(text: &str) -> Result<BTreeMap<(String, String), String>> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got {line:?}",
                lineno + 1
            )));
        };
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {}: key {k:?} before any [section]",
                lineno + 1
            )));
        }
        out.insert(
            (section.clone(), k.trim().to_string()),
            v.trim().to_string(),
        );
    }
    Ok(out)
}

/// Parses a config file plus `section.key=value` overrides into a validated
/// [`ExperimentConfig`]. An empty file yields the full default table.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {path:?}: {e}")))?;
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = parse_ini(text)?;
    for ov in overrides {
        let Some((key, value)) = ov.split_once('=') else {
            return Err(Error::Config(format!(
                "override {ov:?}: expected section.key=value"
            )));
        };
        let Some((section, k)) = key.split_once('.') else {
            return Err(Error::Config(format!(
                "override {ov:?}: expected section.key=value"
            )));
        };
        table.insert(
            (section.trim().to_string(), k.trim().to_string()),
            value.trim().to_string(),
        );
    }
    resolve(table)
}

fn resolve(table: BTreeMap<(String, String), String>) -> Result<ExperimentConfig> {
    let mut sac = SacConfig::default();
    // desk-scale default, documented in the README
    sac.warmup_steps = 1000;
    let mut ensemble = EnsembleConfig::default();
    let mut dyna = DynaConfig {
        algo: Algo::Mbpo,
        total_env_steps: 20_000,
        seed: 0,
        synthetic_ratio: 0.95,
        rollouts_per_step: 400,
        model_horizon: 1,
        real_buffer_capacity: 1_000_000,
        synth_buffer_capacity: 400_000,
    };
    let mut eval = EvalConfig {
        eval_interval: 500,
        eval_episodes: 5,
        final_window: 10,
    };
    let mut env = EnvConfig {
        name: "pendulum_swingup".into(),
        params: BTreeMap::new(),
    };
    let mut critic_ln: Option<bool> = None;
    let mut explicit_mode = false;
    let mut explicit_norm = false;

    for ((section, key), value) in &table {
        let full = format!("{section}.{key}");
        match (section.as_str(), key.as_str()) {
            ("env", "name") => env.name = value.clone(),
            ("env", _) => {
                let v = match value.as_str() {
                    "true" => 1.0,
                    "false" => 0.0,
                    other => parse_f64(&full, other)?,
                };
                env.params.insert(key.clone(), v);
            }
            ("sac", "gamma") => sac.gamma = parse_f64(&full, value)?,
            ("sac", "tau") => sac.tau = parse_f64(&full, value)?,
            ("sac", "lr") => sac.lr = parse_f64(&full, value)?,
            ("sac", "beta1") => sac.beta1 = parse_f64(&full, value)?,
            ("sac", "beta2") => sac.beta2 = parse_f64(&full, value)?,
            ("sac", "eps") => sac.eps = parse_f64(&full, value)?,
            ("sac", "batch") => sac.batch = parse_usize(&full, value)?,
            ("sac", "updates_per_step") => sac.updates_per_step = parse_usize(&full, value)?,
            ("sac", "warmup_steps") => sac.warmup_steps = parse_usize(&full, value)?,
            ("sac", "init_alpha") => sac.init_alpha = parse_f64(&full, value)?,
            ("sac", "target_entropy") => {
                sac.target_entropy = if value == "auto" {
                    None
                } else {
                    Some(parse_f64(&full, value)?)
                }
            }
            ("sac", "critic_layer_norm") => {
                critic_ln = if value == "auto" {
                    None
                } else {
                    Some(parse_bool(&full, value)?)
                }
            }
            ("sac", "hidden") => sac.hidden_dims = parse_dims(&full, value)?,
            ("sac", "activation") => sac.activation = parse_activation(&full, value)?,
            ("ensemble", "n_members") => ensemble.n_members = parse_usize(&full, value)?,
            ("ensemble", "n_elites") => ensemble.n_elites = parse_usize(&full, value)?,
            ("ensemble", "hidden") => ensemble.hidden_dims = parse_dims(&full, value)?,
            ("ensemble", "activation") => ensemble.activation = parse_activation(&full, value)?,
            ("ensemble", "target_mode") => {
                ensemble.target_mode = match value.as_str() {
                    "residual" => TargetMode::Residual,
                    "direct" => TargetMode::Direct,
                    other => {
                        return Err(Error::Config(format!(
                            "{full}: unknown value {other:?} (want residual|direct)"
                        )))
                    }
                };
                explicit_mode = true;
            }
            ("ensemble", "target_norm") => {
                ensemble.target_norm = parse_bool(&full, value)?;
                explicit_norm = true;
            }
            ("ensemble", "logvar_min") => ensemble.logvar_min = parse_f64(&full, value)?,
            ("ensemble", "logvar_max") => ensemble.logvar_max = parse_f64(&full, value)?,
            ("ensemble", "lr") => ensemble.lr = parse_f64(&full, value)?,
            ("ensemble", "beta1") => ensemble.beta1 = parse_f64(&full, value)?,
            ("ensemble", "beta2") => ensemble.beta2 = parse_f64(&full, value)?,
            ("ensemble", "eps") => ensemble.eps = parse_f64(&full, value)?,
            ("ensemble", "retrain_interval") => {
                ensemble.retrain_interval = parse_usize(&full, value)?
            }
            ("ensemble", "holdout_fraction") => {
                ensemble.holdout_fraction = parse_f64(&full, value)?
            }
            ("ensemble", "max_epochs") => ensemble.max_epochs = parse_usize(&full, value)?,
            ("ensemble", "patience") => ensemble.patience = parse_usize(&full, value)?,
            ("ensemble", "minibatch") => ensemble.minibatch = parse_usize(&full, value)?,
            ("dyna", "algo") => dyna.algo = Algo::parse(value)?,
            ("dyna", "total_env_steps") => dyna.total_env_steps = parse_usize(&full, value)?,
            ("dyna", "seed") => {
                dyna.seed = value
                    .parse()
                    .map_err(|_| Error::Config(format!("{full}: expected integer seed")))?
            }
            ("dyna", "synthetic_ratio") => dyna.synthetic_ratio = parse_f64(&full, value)?,
            ("dyna", "rollouts_per_step") => dyna.rollouts_per_step = parse_usize(&full, value)?,
            ("dyna", "model_horizon") => dyna.model_horizon = parse_usize(&full, value)?,
            ("dyna", "real_buffer_capacity") => {
                dyna.real_buffer_capacity = parse_usize(&full, value)?
            }
            ("dyna", "synth_buffer_capacity") => {
                dyna.synth_buffer_capacity = parse_usize(&full, value)?
            }
            ("eval", "eval_interval") => eval.eval_interval = parse_usize(&full, value)?,
            ("eval", "eval_episodes") => eval.eval_episodes = parse_usize(&full, value)?,
            ("eval", "final_window") => eval.final_window = parse_usize(&full, value)?,
            _ => return Err(Error::Config(format!("unknown key {full:?}"))),
        }
    }

    // the algo aliases pin the FTFL switches; explicit conflicting settings
    // are configuration errors rather than silent overrides
    match dyna.algo {
        Algo::Mbpo => {
            if explicit_mode && ensemble.target_mode != TargetMode::Residual {
                return Err(Error::Config(
                    "ensemble.target_mode conflicts with dyna.algo=mbpo (residual)".into(),
                ));
            }
            if explicit_norm && ensemble.target_norm {
                return Err(Error::Config(
                    "ensemble.target_norm conflicts with dyna.algo=mbpo (false)".into(),
                ));
            }
            ensemble.target_mode = TargetMode::Residual;
            ensemble.target_norm = false;
        }
        Algo::Ftfl => {
            if explicit_mode && ensemble.target_mode != TargetMode::Direct {
                return Err(Error::Config(
                    "ensemble.target_mode conflicts with dyna.algo=ftfl (direct)".into(),
                ));
            }
            if explicit_norm && !ensemble.target_norm {
                return Err(Error::Config(
                    "ensemble.target_norm conflicts with dyna.algo=ftfl (true)".into(),
                ));
            }
            ensemble.target_mode = TargetMode::Direct;
            ensemble.target_norm = true;
        }
        _ => {}
    }
    // layer norm between critic layers defaults on for model-based runs
    sac.critic_layer_norm = critic_ln.unwrap_or(dyna.algo.uses_model());

    let cfg = ExperimentConfig {
        env,
        sac,
        ensemble,
        dyna,
        eval,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_full_defaults() {
        let cfg = parse_config_str("", &[]).unwrap();
        assert_eq!(cfg.dyna.algo, Algo::Mbpo);
        assert_eq!(cfg.sac.gamma, 0.99);
        assert_eq!(cfg.sac.tau, 0.995);
        assert_eq!(cfg.sac.lr, 3e-4);
        assert_eq!(cfg.sac.beta1, 0.9);
        assert_eq!(cfg.sac.beta2, 0.999);
        assert_eq!(cfg.sac.eps, 1.5e-4);
        assert_eq!(cfg.sac.batch, 256);
        assert_eq!(cfg.sac.updates_per_step, 20);
        assert_eq!(cfg.sac.init_alpha, 1.0);
        assert_eq!(cfg.sac.hidden_dims, vec![256, 256]);
        assert_eq!(cfg.sac.activation, Activation::Relu);
        assert_eq!(cfg.ensemble.n_members, 7);
        assert_eq!(cfg.ensemble.n_elites, 5);
        assert_eq!(cfg.ensemble.hidden_dims, vec![200, 200]);
        assert_eq!(cfg.ensemble.activation, Activation::Swish);
        assert_eq!(cfg.ensemble.retrain_interval, 250);
        assert_eq!(cfg.ensemble.lr, 3e-4);
        assert_eq!(cfg.dyna.synthetic_ratio, 0.95);
        assert_eq!(cfg.dyna.rollouts_per_step, 400);
        assert_eq!(cfg.dyna.model_horizon, 1);
        assert_eq!(cfg.dyna.real_buffer_capacity, 1_000_000);
        // desk-scale defaults
        assert_eq!(cfg.dyna.total_env_steps, 20_000);
        assert_eq!(cfg.sac.warmup_steps, 1000);
        assert_eq!(cfg.eval.eval_interval, 500);
        assert_eq!(cfg.eval.eval_episodes, 5);
        // mbpo pins the switches and critic layer norm defaults on
        assert_eq!(cfg.ensemble.target_mode, TargetMode::Residual);
        assert!(!cfg.ensemble.target_norm);
        assert!(cfg.sac.critic_layer_norm);
    }

    #[test]
    fn sac_algo_disables_layer_norm_by_default() {
        let cfg = parse_config_str("[dyna]\nalgo=sac\n", &[]).unwrap();
        assert!(!cfg.sac.critic_layer_norm);
        let cfg = parse_config_str(
            "[dyna]\nalgo=sac\n[sac]\ncritic_layer_norm=true\n",
            &[],
        )
        .unwrap();
        assert!(cfg.sac.critic_layer_norm);
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = parse_config_str(
            "[dyna]\nsynthetic_ratio=0.5\n",
            &["dyna.synthetic_ratio=0".into()],
        )
        .unwrap();
        assert_eq!(cfg.dyna.synthetic_ratio, 0.0);
    }

    #[test]
    fn unknown_and_malformed_keys_are_named() {
        let err = parse_config_str("[ensemble]\ntarget_mode=sideways\n", &[]).unwrap_err();
        assert!(err.to_string().contains("target_mode"), "{err}");
        let err = parse_config_str("[sac]\nbogus=1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("sac.bogus"), "{err}");
        let err = parse_config_str("[sac]\ngamma=fast\n", &[]).unwrap_err();
        assert!(err.to_string().contains("sac.gamma"), "{err}");
        let err = parse_config_str("[env]\nname=pendulum_swingup\ngravity=1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("gravity"), "{err}");
    }

    #[test]
    fn algo_aliases_pin_switches() {
        let cfg = parse_config_str("[dyna]\nalgo=ftfl\n", &[]).unwrap();
        assert_eq!(cfg.ensemble.target_mode, TargetMode::Direct);
        assert!(cfg.ensemble.target_norm);
        assert_eq!(cfg.label(), "ftfl");

        let err = parse_config_str(
            "[dyna]\nalgo=ftfl\n[ensemble]\ntarget_mode=residual\n",
            &[],
        )
        .unwrap_err();
        assert!(err.to_string().contains("conflicts"), "{err}");

        let err =
            parse_config_str("[dyna]\nalgo=mbpo\n[ensemble]\ntarget_norm=true\n", &[]).unwrap_err();
        assert!(err.to_string().contains("conflicts"), "{err}");
    }

    #[test]
    fn ablation_labels() {
        for (mode, norm, want) in [
            ("residual", "false", "res"),
            ("residual", "true", "res+norm"),
            ("direct", "false", "dir"),
            ("direct", "true", "dir+norm"),
        ] {
            let text = format!(
                "[dyna]\nalgo=ablation\n[ensemble]\ntarget_mode={mode}\ntarget_norm={norm}\n"
            );
            let cfg = parse_config_str(&text, &[]).unwrap();
            assert_eq!(cfg.label(), want);
        }
    }

    #[test]
    fn env_params_flow_through() {
        let cfg = parse_config_str("[env]\nname=scale_mismatch\nS=40\n", &[]).unwrap();
        assert_eq!(cfg.env.params["S"], 40.0);
        let cfg = parse_config_str(
            "[env]\nname=contact_hopper_lite\ninclude_contact=false\n",
            &[],
        )
        .unwrap();
        assert_eq!(cfg.env.params["include_contact"], 0.0);
    }

    #[test]
    fn model_horizon_pinned_to_one() {
        let err = parse_config_str("[dyna]\nmodel_horizon=3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("model_horizon"), "{err}");
    }

    #[test]
    fn render_roundtrips() {
        let cfg = parse_config_str(
            "[dyna]\nalgo=ftfl\nseed=7\n[env]\nname=scale_mismatch\nS=50\n[sac]\nhidden=32,32\n",
            &[],
        )
        .unwrap();
        let text = cfg.render();
        let back = parse_config_str(&text, &[]).unwrap();
        assert_eq!(back.render(), text);
        assert_eq!(back.dyna.seed, 7);
        assert_eq!(back.sac.hidden_dims, vec![32, 32]);
        assert_eq!(back.env.params["S"], 50.0);
    }
}
