//! Desk-scale Dyna-style model-based RL laboratory.
//!
//! The crate implements Soft Actor-Critic, the MBPO synthetic-data loop on
//! top of it, and the two FTFL interventions (independent target
//! normalization and direct next-state prediction), together with the
//! diagnostic probes needed to observe the failure modes the interventions
//! repair: reward-model collapse under target scale mismatch and variance
//! inflation under residual targets.
//!
//! Layout:
//! - [`nn`] — feed-forward substrate with exact reverse-mode gradients and Adam
//! - [`normalization`] — per-dimension running unit normalization
//! - [`replay`] — ring buffers, prefix reveal, buffer dump format
//! - [`ensemble`] — probabilistic dynamics ensemble with the FTFL switches
//! - [`sac`] — squashed-Gaussian actor, twin critics, learned temperature
//! - [`envs`] — deterministic desk-scale continuous-control environments
//! - [`dyna`] — the training loop mixing real and synthetic batches
//! - [`eval`] — IQM, bootstrapped CIs, baseline-normalized reporting
//! - [`config`] — INI-style experiment configuration
//! - [`metrics`] — the metrics CSV contract shared by all runs

pub mod config;
pub mod dyna;
pub mod ensemble;
pub mod envs;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod nn;
pub mod normalization;
pub mod replay;
pub mod sac;

pub use error::{Error, Result};
