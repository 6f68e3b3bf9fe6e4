//! The metrics CSV contract: one row per evaluation point, identical header
//! for every algorithm so the aggregate step can consume any run's output.

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,eval_return,q_mean,reward_bias,variance_diag,alpha,critic_loss";

/// One evaluation-time snapshot of a training run. Model diagnostics are NaN
/// for runs without an ensemble (pure SAC) or before the first retrain.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub eval_return: f64,
    pub q_mean: f64,
    pub reward_bias: f64,
    pub variance_diag: f64,
    pub alpha: f64,
    pub critic_loss: f64,
}

impl MetricsRow {
    fn render(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.eval_return,
            self.q_mean,
            self.reward_bias,
            self.variance_diag,
            self.alpha,
            self.critic_loss
        )
    }
}

/// Renders a full metrics CSV (header + rows, LF line endings).
pub fn render_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.render());
        out.push('\n');
    }
    out
}

/// Parses a metrics CSV produced by [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Invalid(format!(
                "bad metrics header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Invalid(format!(
                "metrics row {} has {} fields",
                i + 2,
                f.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Invalid(format!("bad number {s:?} in metrics row {}", i + 2)))
        };
        rows.push(MetricsRow {
            step: f[0]
                .parse()
                .map_err(|_| Error::Invalid(format!("bad step {:?}", f[0])))?,
            eval_return: num(f[1])?,
            q_mean: num(f[2])?,
            reward_bias: num(f[3])?,
            variance_diag: num(f[4])?,
            alpha: num(f[5])?,
            critic_loss: num(f[6])?,
        });
    }
    Ok(rows)
}
