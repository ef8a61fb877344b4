use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub low: f64,
    pub high: f64,
    #[serde(default)]
    pub log: bool,
}

impl Range {
    pub fn log(low: f64, high: f64) -> Self {
        Range { low, high, log: true }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.low.is_finite() && self.high.is_finite() && self.low <= self.high) || (self.log && self.low <= 0.0) {
            return Err(contract(format!("invalid range for {name}: {self:?}")));
        }
        Ok(())
    }
}

pub type SearchSpace = BTreeMap<String, Range>;
pub type TrialConfig = BTreeMap<String, f64>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub config: TrialConfig,
    /// Validation accuracy, or `None` when the objective failed.
    pub score: Option<f64>,
    pub error: Option<String>,
}

pub struct SearchOutcome {
    pub best: Option<TrialRecord>,
    pub log: Vec<TrialRecord>,
}

impl SearchOutcome {
    /// Trial log as CSV with one column per parameter.
    pub fn log_csv(&self) -> String {
        let names: Vec<&String> = self.log.first().map(|t| t.config.keys().collect()).unwrap_or_default();
        let mut out = String::from("trial");
        for n in &names {
            out.push(',');
            out.push_str(n);
        }
        out.push_str(",score,status\n");
        for t in &self.log {
            out.push_str(&t.trial.to_string());
            for n in &names {
                out.push_str(&format!(",{:e}", t.config[*n]));
            }
            match (&t.score, &t.error) {
                (Some(s), _) => out.push_str(&format!(",{s},ok\n")),
                (None, e) => out.push_str(&format!(",,failed: {}\n", e.as_deref().unwrap_or("").replace([',', '\n'], ";"))),
            }
        }
        out
    }
}

pub fn sample_config(space: &SearchSpace, seed: u64, trial: usize) -> TrialConfig {
    let mut rng = stream(seed, "search", trial as u64);
    space
        .iter()
        .map(|(k, r)| {
            let u: f64 = rng.random();
            let v = if r.log {
                (r.low.ln() + u * (r.high.ln() - r.low.ln())).exp()
            } else {
                r.low + u * (r.high - r.low)
            };
            (k.clone(), v)
        })
        .collect()
}

/// Independent random draws from `space`; keeps the config whose objective
/// is highest. Failed trials are logged and skipped.
pub fn random_search<F>(space: &SearchSpace, trials: usize, seed: u64, mut objective: F) -> Result<SearchOutcome>
where
    F: FnMut(&TrialConfig) -> Result<f64>,
{
    if trials == 0 {
        return Err(contract("random search needs at least one trial"));
    }
    for (k, r) in space {
        r.validate(k)?;
    }
    let mut log = Vec::with_capacity(trials);
    let mut best: Option<usize> = None;
    for trial in 0..trials {
        let config = sample_config(space, seed, trial);
        let rec = match objective(&config) {
            Ok(s) if s.is_finite() => TrialRecord { trial, config, score: Some(s), error: None },
            Ok(s) => TrialRecord { trial, config, score: None, error: Some(format!("non-finite score {s}")) },
            Err(e) => {
                log::warn!("trial {trial} failed: {e}");
                TrialRecord { trial, config, score: None, error: Some(e.to_string()) }
            }
        };
        if let Some(s) = rec.score {
            if best.is_none_or(|b| s > log_score(&log, b)) {
                best = Some(trial);
            }
        }
        log.push(rec);
    }
    Ok(SearchOutcome {
        best: best.map(|b| log[b].clone()),
        log,
    })
}

fn log_score(log: &[TrialRecord], i: usize) -> f64 {
    log[i].score.unwrap_or(f64::NEG_INFINITY)
}
