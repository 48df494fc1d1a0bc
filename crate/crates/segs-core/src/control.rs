//! Supervision controls: the view-similarity classifier stand-in, the
//! adaptive-threshold consistency guard, and the quality-driven guidance
//! weight scheduler.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::mixture::{log_sum_exp, MixturePrior, ViewBin};

/// Posterior probability that `x` belongs to the modes labeled `view`
/// under the clean data mixture. Plays the role of a viewpoint-descriptor
/// similarity in [0, 1].
pub fn view_similarity(prior: &MixturePrior, x: &[f64], view: ViewBin) -> Result<f64> {
    if !prior.has_view(view) {
        return Err(invalid(format!("no modes labeled {view}")));
    }
    let logs = prior.mode_log_densities(x, 1.0);
    let total = log_sum_exp(&logs);
    let selected: Vec<f64> = prior
        .modes()
        .iter()
        .zip(&logs)
        .filter(|(m, _)| m.view == view)
        .map(|(_, &l)| l)
        .collect();
    Ok((log_sum_exp(&selected) - total).exp().clamp(0.0, 1.0))
}

/// Argmax-posterior view classification; exact ties resolve in bin order
/// front < side < back.
pub fn classify_view(prior: &MixturePrior, x: &[f64]) -> ViewBin {
    let logs = prior.mode_log_densities(x, 1.0);
    let mut best = None;
    for view in ViewBin::ALL {
        let selected: Vec<f64> = prior
            .modes()
            .iter()
            .zip(&logs)
            .filter(|(m, _)| m.view == view)
            .map(|(_, &l)| l)
            .collect();
        if selected.is_empty() {
            continue;
        }
        let mass = log_sum_exp(&selected);
        match best {
            None => best = Some((view, mass)),
            Some((_, best_mass)) if mass > best_mass => best = Some((view, mass)),
            _ => {}
        }
    }
    best.expect("prior has at least one mode").0
}

/// Outcome of feeding one similarity observation to the guard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuardDecision {
    Warmup,
    Keep,
    Discard,
}

impl std::fmt::Display for GuardDecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuardDecision::Warmup => "warmup",
            GuardDecision::Keep => "keep",
            GuardDecision::Discard => "discard",
        })
    }
}

/// Consistency guard: logs similarities through a warm-up window, then
/// freezes the threshold `tau = alpha * min + (1 - alpha) * mean` over
/// exactly that window and gates everything afterwards.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GuardState {
    alpha: f64,
    warmup_len: usize,
    log: Vec<f64>,
    threshold: Option<f64>,
}

impl GuardState {
    pub fn new(alpha: f64, warmup_len: usize) -> Result<GuardState> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid("guard alpha must lie in [0, 1]"));
        }
        if warmup_len == 0 {
            return Err(invalid("guard warmup must observe at least one sample"));
        }
        Ok(GuardState { alpha, warmup_len, log: Vec::new(), threshold: None })
    }

    /// Feed one similarity; returns the gating decision for this iteration.
    pub fn observe(&mut self, sigma: f64) -> GuardDecision {
        assert!(sigma.is_finite(), "guard similarity must be finite");
        match self.threshold {
            None => {
                self.log.push(sigma);
                if self.log.len() == self.warmup_len {
                    let min = self.log.iter().copied().fold(f64::INFINITY, f64::min);
                    let mean = self.log.iter().sum::<f64>() / self.log.len() as f64;
                    self.threshold = Some(self.alpha * min + (1.0 - self.alpha) * mean);
                }
                GuardDecision::Warmup
            }
            Some(tau) => {
                if sigma >= tau {
                    GuardDecision::Keep
                } else {
                    GuardDecision::Discard
                }
            }
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }
}

/// Trace of one scheduler update, for run logs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTrace {
    pub b: f64,
    pub ema: f64,
    pub lo: f64,
    pub hi: f64,
    pub q: f64,
    pub lambda: f64,
}

/// Quality-driven guidance-weight scheduler: EMA-smoothed proxy, range
/// normalization against running 5th/95th percentiles of the proxy
/// history, and a linear map onto `[lambda_min, lambda_max]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchedulerState {
    beta: f64,
    lambda_min: f64,
    lambda_max: f64,
    ema: Option<f64>,
    history: Vec<f64>,
    last: Option<ScheduleTrace>,
}

impl SchedulerState {
    pub fn new(beta: f64, lambda_min: f64, lambda_max: f64) -> Result<SchedulerState> {
        if !(0.0..1.0).contains(&beta) {
            return Err(invalid("scheduler beta must lie in [0, 1)"));
        }
        if !(lambda_min >= 0.0 && lambda_max >= lambda_min) {
            return Err(invalid("need 0 <= lambda_min <= lambda_max"));
        }
        Ok(SchedulerState {
            beta,
            lambda_min,
            lambda_max,
            ema: None,
            history: Vec::new(),
            last: None,
        })
    }

    /// Observe one quality proxy value (higher is worse) and emit the
    /// guidance weight for this iteration.
    pub fn schedule_lambda(&mut self, b_t: f64) -> f64 {
        assert!(b_t.is_finite(), "quality proxy must be finite");
        self.history.push(b_t);
        let ema = match self.ema {
            None => b_t,
            Some(prev) => self.beta * prev + (1.0 - self.beta) * b_t,
        };
        self.ema = Some(ema);
        let mut sorted = self.history.clone();
        sorted.sort_by(f64::total_cmp);
        let lo = percentile(&sorted, 5.0);
        let hi = percentile(&sorted, 95.0);
        let q = if hi == lo { 1.0 } else { ((ema - lo) / (hi - lo)).clamp(0.0, 1.0) };
        let lambda = self.lambda_min + (self.lambda_max - self.lambda_min) * q;
        self.last = Some(ScheduleTrace { b: b_t, ema, lo, hi, q, lambda });
        lambda
    }

    pub fn ema(&self) -> Option<f64> {
        self.ema
    }

    pub fn last(&self) -> Option<ScheduleTrace> {
        self.last
    }
}

/// Linearly interpolated percentile of an ascending-sorted slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let rank = (p / 100.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// No-reference quality proxy: negative log-density under the clean data
/// mixture, shifted so the best mode mean sits near zero. Higher means
/// farther from the data manifold, i.e. worse.
pub fn quality_proxy(prior: &MixturePrior, render: &[f64]) -> f64 {
    assert!(render.iter().all(|v| v.is_finite()), "render must be finite");
    let best_mode = prior
        .modes()
        .iter()
        .map(|m| prior.log_density(&m.mean))
        .fold(f64::NEG_INFINITY, f64::max);
    best_mode - prior.log_density(render)
}
