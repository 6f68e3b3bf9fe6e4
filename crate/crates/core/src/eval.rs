//! Evaluation statistics used for reporting: interquartile mean, bootstrapped
//! confidence intervals, baseline-normalized percentages, plus the online
//! critic probe and final-window performance extraction.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::metrics::MetricsRow;
use crate::sac::SacAgent;

/// Interquartile mean: sort, drop floor(n/4) from each end, average the rest.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("iqm of empty list"));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let trim = v.len() / 4;
    let kept = &v[trim..v.len() - trim];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Percentile bootstrap CI for the IQM.
pub fn bootstrap_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut dyn RngCore,
) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Empty("bootstrap_ci needs n >= 2"));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Invalid(format!("bad CI level {level}")));
    }
    let mut stats = Vec::with_capacity(resamples);
    let mut sample = vec![0.0; values.len()];
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = values[rng.random_range(0..values.len())];
        }
        stats.push(iqm(&sample)?);
    }
    stats.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let idx = (p * (resamples as f64 - 1.0)).round() as usize;
        stats[idx.min(resamples - 1)]
    };
    let lo = (1.0 - level) / 2.0;
    Ok((q(lo), q(1.0 - lo)))
}

/// `100 · x / baseline`, guarding against a vanishing baseline.
pub fn percent_of_baseline(x: f64, baseline: f64) -> Result<f64> {
    if baseline.abs() < 1e-9 {
        return Err(Error::Invalid(
            "percent_of_baseline: baseline too close to zero".into(),
        ));
    }
    Ok(100.0 * x / baseline)
}

/// Mean of `min(Q₁,Q₂)(s, a~π)` over the probe states.
pub fn critic_probe(
    agent: &mut SacAgent,
    eval_states: &[f64],
    rows: usize,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if rows == 0 {
        return Err(Error::Empty("critic_probe needs states"));
    }
    Ok(agent.mean_min_q(eval_states, rows, rng))
}

/// One run's metric series plus its identity.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub algo: String,
    pub env: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        for w in self.rows.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Invalid(format!(
                    "RunRecord steps must strictly increase ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        Ok(())
    }

    pub fn eval_returns(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.eval_return).collect()
    }
}

/// IQM of the last `window` evaluation returns.
pub fn final_performance(record: &RunRecord, window: usize) -> Result<f64> {
    if record.rows.len() < window {
        return Err(Error::Invalid(format!(
            "final_performance needs {window} eval points, run has {}",
            record.rows.len()
        )));
    }
    let returns = record.eval_returns();
    iqm(&returns[returns.len() - window..])
}

/// One aggregate row per (algo, env).
#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub algo: String,
    pub env: String,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub pct_of_baseline: f64,
}

pub const AGGREGATE_HEADER: &str = "algo,env,iqm,ci_low,ci_high,pct_of_sac";

/// Aggregates per-seed final-window performances into per-(algo, env) rows:
/// IQM across seeds with a bootstrap CI, normalized to the `sac` row of the
/// same env when present (NaN otherwise).
pub fn aggregate(
    records: &[RunRecord],
    window: usize,
    resamples: usize,
    level: f64,
    rng: &mut dyn RngCore,
) -> Result<Vec<AggregateRow>> {
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for rec in records {
        rec.validate()?;
        let perf = final_performance(rec, window.min(rec.rows.len()))?;
        groups
            .entry((rec.algo.clone(), rec.env.clone()))
            .or_default()
            .push(perf);
    }
    let mut sac_baseline: BTreeMap<String, f64> = BTreeMap::new();
    for ((algo, env), vals) in &groups {
        if algo == "sac" {
            sac_baseline.insert(env.clone(), iqm(vals)?);
        }
    }
    let mut out = Vec::new();
    for ((algo, env), vals) in &groups {
        let point = iqm(vals)?;
        let (lo, hi) = if vals.len() >= 2 {
            bootstrap_ci(vals, resamples, level, rng)?
        } else {
            (point, point)
        };
        let pct = match sac_baseline.get(env) {
            Some(b) => percent_of_baseline(point, *b).unwrap_or(f64::NAN),
            None => f64::NAN,
        };
        out.push(AggregateRow {
            algo: algo.clone(),
            env: env.clone(),
            iqm: point,
            ci_low: lo,
            ci_high: hi,
            pct_of_baseline: pct,
        });
    }
    Ok(out)
}

pub fn render_aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut out = String::from(AGGREGATE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.algo, r.env, r.iqm, r.ci_low, r.ci_high, r.pct_of_baseline
        ));
    }
    out
}
