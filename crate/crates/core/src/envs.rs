//! Deterministic desk-scale continuous-control environments.
//!
//! The four tasks span the regimes that matter for the synthetic-data failure
//! modes: bounded [0,1] rewards with non-terminating episodes (pendulum,
//! scale-mismatch, hopper) versus unbounded velocity rewards (runner); a
//! tunable gap between state and reward magnitudes (scale-mismatch); and a
//! discontinuous contact channel (hopper).
//!
//! All dynamics are pure functions of (state, action); randomness lives in
//! `reset` only. Agents observe `obs`, never the internal state.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub name: String,
    pub d_s: usize,
    pub d_a: usize,
    pub horizon: usize,
    pub dt: f64,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> StepResult;
}

fn clip_action(a: f64) -> f64 {
    a.clamp(-1.0, 1.0)
}

/// Merges caller overrides into a default parameter table, rejecting unknown
/// keys.
fn resolve_params(
    env: &str,
    defaults: &[(&str, f64)],
    overrides: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, f64> = defaults
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    for (k, v) in overrides {
        if !out.contains_key(k) {
            return Err(Error::Config(format!(
                "unknown parameter {k:?} for env {env:?}"
            )));
        }
        out.insert(k.clone(), *v);
    }
    Ok(out)
}

pub const ENV_NAMES: [&str; 4] = [
    "pendulum_swingup",
    "scale_mismatch",
    "contact_hopper_lite",
    "gym_like_runner",
];

/// Builds an environment by name with parameter overrides.
pub fn make_env(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Box<dyn Env>> {
    match name {
        "pendulum_swingup" => Ok(Box::new(PendulumSwingup::new(overrides)?)),
        "scale_mismatch" => Ok(Box::new(ScaleMismatch::new(overrides)?)),
        "contact_hopper_lite" => Ok(Box::new(ContactHopperLite::new(overrides)?)),
        "gym_like_runner" => Ok(Box::new(GymLikeRunner::new(overrides)?)),
        other => Err(Error::Config(format!(
            "unknown env {other:?}; known: {}",
            ENV_NAMES.join(", ")
        ))),
    }
}

/// Torque-limited pendulum swing-up. θ = 0 is upright; gravity pulls the
/// pole down and the torque budget is too small to lift it directly.
pub struct PendulumSwingup {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    t: usize,
}

impl PendulumSwingup {
    pub fn new(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let params = resolve_params(
            "pendulum_swingup",
            &[
                ("g", 10.0),
                ("l", 1.0),
                ("m", 1.0),
                ("c", 0.1),
                ("u_max", 2.0),
                ("dt", 0.02),
                ("horizon", 200.0),
                ("reset_noise", 0.1),
            ],
            overrides,
        )?;
        let spec = EnvSpec {
            name: "pendulum_swingup".into(),
            d_s: 3,
            d_a: 1,
            horizon: params["horizon"] as usize,
            dt: params["dt"],
            params,
        };
        Ok(Self {
            spec,
            theta: std::f64::consts::PI,
            theta_dot: 0.0,
            t: 0,
        })
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }

    /// Total mechanical energy; used by the integrator drift check.
    pub fn energy(&self) -> f64 {
        let p = &self.spec.params;
        let (m, l, g) = (p["m"], p["l"], p["g"]);
        0.5 * m * l * l * self.theta_dot * self.theta_dot + m * g * l * self.theta.cos()
    }
}

impl Env for PendulumSwingup {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let noise = self.spec.params["reset_noise"];
        self.theta = std::f64::consts::PI + rng.random_range(-noise..=noise);
        self.theta_dot = 0.0;
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a = clip_action(action[0]);
        let p = &self.spec.params;
        let (g, l, m, c, u_max, dt) = (p["g"], p["l"], p["m"], p["c"], p["u_max"], p["dt"]);
        // semi-implicit Euler: velocity first, then position
        let accel = (g / l) * self.theta.sin() + a * u_max / (m * l * l) - c * self.theta_dot;
        self.theta_dot += dt * accel;
        self.theta += dt * self.theta_dot;
        self.t += 1;
        StepResult {
            next_obs: self.obs(),
            reward: (1.0 + self.theta.cos()) / 2.0,
            terminal: false,
            truncated: self.t >= self.spec.horizon,
        }
    }
}

/// Stable linear system whose state magnitudes are O(S) while rewards stay in
/// (0, 1]: the regression targets for the dynamics dwarf the reward target by
/// a factor of roughly S.
pub struct ScaleMismatch {
    spec: EnvSpec,
    x: [f64; 2],
    a_mat: [[f64; 2]; 2],
    t: usize,
}

impl ScaleMismatch {
    pub fn new(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let params = resolve_params(
            "scale_mismatch",
            &[
                ("S", 100.0),
                ("contraction", 0.95),
                ("rot", 0.3),
                ("b1", 0.13),
                ("b2", -0.18),
                ("bias1", 0.05),
                ("bias2", -0.07),
                ("dt", 0.02),
                ("horizon", 200.0),
                ("reset_noise", 0.01),
            ],
            overrides,
        )?;
        let (rho, th) = (params["contraction"], params["rot"]);
        let a_mat = [
            [rho * th.cos(), -rho * th.sin()],
            [rho * th.sin(), rho * th.cos()],
        ];
        let spec = EnvSpec {
            name: "scale_mismatch".into(),
            d_s: 2,
            d_a: 1,
            horizon: params["horizon"] as usize,
            dt: params["dt"],
            params,
        };
        Ok(Self {
            spec,
            x: [0.0; 2],
            a_mat,
            t: 0,
        })
    }
}

impl ScaleMismatch {
    /// Pins the internal state directly; the true-dynamics oracle used by
    /// rollout tests steps the real transition function from arbitrary
    /// stored states.
    pub fn set_state(&mut self, x: [f64; 2]) {
        self.x = x;
        self.t = 0;
    }
}

impl Env for ScaleMismatch {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.spec.params;
        let noise = p["reset_noise"] * p["S"];
        self.x = [
            rng.random_range(-noise..=noise),
            rng.random_range(-noise..=noise),
        ];
        self.t = 0;
        self.x.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a = clip_action(action[0]);
        let p = &self.spec.params;
        let s = p["S"];
        let x = self.x;
        self.x = [
            self.a_mat[0][0] * x[0] + self.a_mat[0][1] * x[1] + (p["b1"] * a + p["bias1"]) * s,
            self.a_mat[1][0] * x[0] + self.a_mat[1][1] * x[1] + (p["b2"] * a + p["bias2"]) * s,
        ];
        self.t += 1;
        let dev = self.x[0] / s - 1.0;
        StepResult {
            next_obs: self.x.to_vec(),
            reward: (-(dev * dev) / 0.25).exp(),
            terminal: false,
            truncated: self.t >= self.spec.horizon,
        }
    }
}

/// 1-D vertical hopper with a stiff ground spring. The thrust budget is below
/// gravity, so staying near the target height requires bouncing; the contact
/// channel is identically zero in flight and jumps at touchdown.
pub struct ContactHopperLite {
    spec: EnvSpec,
    h: f64,
    v: f64,
    t: usize,
    include_contact: bool,
}

impl ContactHopperLite {
    pub fn new(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let params = resolve_params(
            "contact_hopper_lite",
            &[
                ("g", 10.0),
                ("u_max", 8.0),
                ("k", 1000.0),
                ("damp", 10.0),
                ("h_target", 0.5),
                ("include_contact", 1.0),
                ("dt", 0.02),
                ("horizon", 200.0),
                ("reset_noise", 0.05),
            ],
            overrides,
        )?;
        let include_contact = params["include_contact"] != 0.0;
        let spec = EnvSpec {
            name: "contact_hopper_lite".into(),
            d_s: if include_contact { 3 } else { 2 },
            d_a: 1,
            horizon: params["horizon"] as usize,
            dt: params["dt"],
            params,
        };
        Ok(Self {
            spec,
            h: 0.5,
            v: 0.0,
            t: 0,
            include_contact,
        })
    }

    fn contact(&self) -> f64 {
        self.spec.params["k"] * (-self.h).max(0.0)
    }

    fn obs(&self) -> Vec<f64> {
        if self.include_contact {
            vec![self.h, self.v, self.contact()]
        } else {
            vec![self.h, self.v]
        }
    }
}

impl Env for ContactHopperLite {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let p = &self.spec.params;
        let noise = p["reset_noise"];
        self.h = p["h_target"] + rng.random_range(-noise..=noise);
        self.v = 0.0;
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a = clip_action(action[0]);
        let p = &self.spec.params;
        let (g, u_max, damp, h_target, dt) =
            (p["g"], p["u_max"], p["damp"], p["h_target"], p["dt"]);
        let ground = self.contact(); // spring force from current penetration
        let mut accel = a * u_max - g + ground;
        if self.h < 0.0 {
            accel -= damp * self.v;
        }
        self.v += dt * accel;
        self.h += dt * self.v;
        self.t += 1;
        let dev = self.h - h_target;
        StepResult {
            next_obs: self.obs(),
            reward: (-(dev * dev) / 0.1).exp(),
            terminal: false,
            truncated: self.t >= self.spec.horizon,
        }
    }
}

/// 1-D locomotion with quadratic drag and an unbounded, velocity-proportional
/// reward — the Gym-style regime where synthetic data already works.
pub struct GymLikeRunner {
    spec: EnvSpec,
    x: f64,
    v: f64,
    t: usize,
}

impl GymLikeRunner {
    pub fn new(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let params = resolve_params(
            "gym_like_runner",
            &[
                ("u_max", 2.0),
                ("drag", 0.5),
                ("omega", 1.0),
                ("dt", 0.02),
                ("horizon", 200.0),
            ],
            overrides,
        )?;
        let spec = EnvSpec {
            name: "gym_like_runner".into(),
            d_s: 3,
            d_a: 1,
            horizon: params["horizon"] as usize,
            dt: params["dt"],
            params,
        };
        Ok(Self {
            spec,
            x: 0.0,
            v: 0.0,
            t: 0,
        })
    }

    fn obs(&self) -> Vec<f64> {
        let w = self.spec.params["omega"];
        vec![self.v, (w * self.x).sin(), (w * self.x).cos()]
    }
}

impl Env for GymLikeRunner {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.x = 0.0;
        self.v = 0.0;
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> StepResult {
        let a = clip_action(action[0]);
        let p = &self.spec.params;
        let (u_max, drag, dt) = (p["u_max"], p["drag"], p["dt"]);
        self.v += dt * (a * u_max - drag * self.v * self.v.abs());
        self.x += dt * self.v;
        self.t += 1;
        StepResult {
            next_obs: self.obs(),
            reward: self.v - 0.1 * a * a,
            terminal: false,
            truncated: self.t >= self.spec.horizon,
        }
    }
}
