//! Toy score-distillation loop: a shared latent rendered per view through
//! orthogonal transforms, optimized by the SDS gradient against the frozen
//! mixture prior, with optional structural guidance on the
//! underrepresented view and optional supervision guard.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::control::{
    classify_view, quality_proxy, view_similarity, GuardDecision, GuardState, ScheduleTrace,
    SchedulerState,
};
use crate::error::{invalid, Result};
use crate::features::FeatureExtractor;
use crate::guidance::{structural_energy, BasisBank};
use crate::linalg::Matrix;
use crate::metrics::{run_report, MetricsReport};
use crate::mixture::{Condition, MixturePrior, ViewBin};
use crate::sampler::{standard_normal_vec, stream_rng};
use crate::schedule::NoiseSchedule;

/// The optimized representation: one shared latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asset {
    pub theta: Vec<f64>,
}

impl Asset {
    pub fn new(theta: Vec<f64>) -> Asset {
        Asset { theta }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Per-view orthogonal transform and offset: `render = R_v theta + c_v`.
#[derive(Clone, Debug)]
pub struct ViewRig {
    dim: usize,
    transforms: BTreeMap<ViewBin, (Matrix, Vec<f64>)>,
}

impl ViewRig {
    pub fn new(transforms: BTreeMap<ViewBin, (Matrix, Vec<f64>)>) -> Result<ViewRig> {
        if transforms.len() != ViewBin::ALL.len()
            || ViewBin::ALL.iter().any(|v| !transforms.contains_key(v))
        {
            return Err(invalid("rig must define front, side, and back transforms"));
        }
        let dim = transforms[&ViewBin::Front].0.rows();
        for (view, (r, c)) in &transforms {
            if r.rows() != dim || r.cols() != dim || c.len() != dim {
                return Err(invalid(format!("{view} transform has wrong shape")));
            }
            let gram = r.transpose().matmul(r)?;
            for i in 0..dim {
                for j in 0..dim {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    if (gram.get(i, j) - expect).abs() > 1e-10 {
                        return Err(invalid(format!("{view} transform is not orthogonal")));
                    }
                }
            }
        }
        Ok(ViewRig { dim, transforms })
    }

    /// Rotations by 0 / 120 / 240 degrees in the first two coordinates,
    /// zero offsets. Matches the canonical ring prior: the ideal latent
    /// renders each view onto its own mode.
    pub fn symmetric_ring(dim: usize) -> Result<ViewRig> {
        if dim < 2 {
            return Err(invalid("ring rig needs at least 2 dimensions"));
        }
        let mut transforms = BTreeMap::new();
        for (i, view) in ViewBin::ALL.iter().enumerate() {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / 3.0;
            let mut r = Matrix::identity(dim);
            r.set(0, 0, angle.cos());
            r.set(0, 1, -angle.sin());
            r.set(1, 0, angle.sin());
            r.set(1, 1, angle.cos());
            transforms.insert(*view, (r, vec![0.0; dim]));
        }
        ViewRig::new(transforms)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn render(&self, asset: &Asset, view: ViewBin) -> Result<Vec<f64>> {
        let (r, c) = self
            .transforms
            .get(&view)
            .ok_or_else(|| invalid(format!("unknown view {view}")))?;
        if asset.dim() != self.dim {
            return Err(invalid("asset dimension does not match rig"));
        }
        let mut out = c.clone();
        for i in 0..self.dim {
            let row = r.row(i);
            out[i] += row.iter().zip(&asset.theta).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(out)
    }

    /// Pull a render-space vector back through the view Jacobian: `R_v^T u`.
    pub fn apply_transpose(&self, view: ViewBin, u: &[f64]) -> Result<Vec<f64>> {
        let (r, _) = self
            .transforms
            .get(&view)
            .ok_or_else(|| invalid(format!("unknown view {view}")))?;
        if u.len() != self.dim {
            return Err(invalid("vector dimension does not match rig"));
        }
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = r.row(i);
            for (o, rv) in out.iter_mut().zip(row) {
                *o += rv * u[i];
            }
        }
        Ok(out)
    }
}

/// Where the guidance weight comes from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "source", content = "value")]
pub enum LambdaSource {
    Fixed(f64),
    Scheduled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Timestep sampling range as fractions of the schedule length.
    pub t_min_frac: f64,
    pub t_max_frac: f64,
    pub lambda: LambdaSource,
    pub guidance: bool,
    pub guided_view: ViewBin,
    pub guard: bool,
    pub guard_alpha: f64,
    pub guard_warmup: usize,
    pub scheduler_beta: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            iterations: 500,
            learning_rate: 0.01,
            t_min_frac: 0.02,
            t_max_frac: 0.98,
            lambda: LambdaSource::Fixed(10.0),
            guidance: false,
            guided_view: ViewBin::Back,
            guard: false,
            guard_alpha: 0.5,
            guard_warmup: 50,
            scheduler_beta: 0.9,
            lambda_min: 0.0,
            lambda_max: 15.0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.t_min_frac)
            || !(0.0..=1.0).contains(&self.t_max_frac)
            || self.t_min_frac > self.t_max_frac
        {
            return Err(invalid("timestep fractions must satisfy 0 <= min <= max <= 1"));
        }
        let (lo, hi) = self.t_range(schedule);
        if lo > hi {
            return Err(invalid("timestep range is empty for this schedule"));
        }
        if let LambdaSource::Fixed(v) = self.lambda {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid("fixed lambda must be non-negative"));
            }
        }
        GuardState::new(self.guard_alpha, self.guard_warmup)?;
        SchedulerState::new(self.scheduler_beta, self.lambda_min, self.lambda_max)?;
        Ok(())
    }

    pub fn t_range(&self, schedule: &NoiseSchedule) -> (usize, usize) {
        let t = schedule.steps() as f64;
        let lo = ((self.t_min_frac * t).ceil() as usize).max(1);
        let hi = ((self.t_max_frac * t).floor() as usize).min(schedule.steps());
        (lo, hi)
    }
}

/// One logged pseudo-target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub view: ViewBin,
    pub t: usize,
    pub x0_hat: Vec<f64>,
    pub classified: ViewBin,
    pub sigma: f64,
    pub decision: GuardDecision,
    /// Guidance weight emitted this iteration (fixed value or scheduler
    /// output), whether or not it was applied.
    pub lambda: f64,
    /// Structural energy when guidance was applied this iteration.
    pub energy: Option<f64>,
    pub schedule_trace: Option<ScheduleTrace>,
}

/// Append-only log of pseudo-targets and control decisions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoTargetLog {
    records: Vec<LogRecord>,
}

impl PseudoTargetLog {
    pub fn push(&mut self, record: LogRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stream the log (including guard and scheduler traces) to CSV.
    pub fn write_csv<W: std::io::Write>(&self, dim: usize, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["iteration".to_string(), "view".into(), "t".into()];
        header.extend((0..dim).map(|d| format!("x0hat_{d}")));
        header.extend(
            ["classified", "sigma", "decision", "lambda", "energy", "b", "b_ema", "q"]
                .map(String::from),
        );
        wtr.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.iteration.to_string(), r.view.to_string(), r.t.to_string()];
            row.extend(r.x0_hat.iter().map(|v| v.to_string()));
            row.push(r.classified.to_string());
            row.push(r.sigma.to_string());
            row.push(r.decision.to_string());
            row.push(r.lambda.to_string());
            row.push(r.energy.map(|v| v.to_string()).unwrap_or_default());
            match r.schedule_trace {
                Some(tr) => {
                    row.push(tr.b.to_string());
                    row.push(tr.ema.to_string());
                    row.push(tr.q.to_string());
                }
                None => row.extend([String::new(), String::new(), String::new()]),
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// SDS gradient in epsilon form: `omega * R_v^T (eps_hat - eps)`,
/// with `omega = 1`.
pub fn sds_gradient(
    rig: &ViewRig,
    view: ViewBin,
    eps_hat: &[f64],
    eps: &[f64],
) -> Result<Vec<f64>> {
    let resid: Vec<f64> = eps_hat.iter().zip(eps).map(|(a, b)| a - b).collect();
    rig.apply_transpose(view, &resid)
}

/// Equivalent clean-target form: `omega / gamma(t) * R_v^T (x0 - x0_hat)`.
pub fn sds_gradient_from_targets(
    rig: &ViewRig,
    view: ViewBin,
    schedule: &NoiseSchedule,
    t: usize,
    x0: &[f64],
    x0_hat: &[f64],
) -> Result<Vec<f64>> {
    let gamma = schedule.gamma(t);
    let resid: Vec<f64> = x0.iter().zip(x0_hat).map(|(a, b)| (a - b) / gamma).collect();
    rig.apply_transpose(view, &resid)
}

/// Mutable per-run state: guard, scheduler, RNG stream, iteration counter.
pub struct SdsRunState {
    guard: GuardState,
    scheduler: SchedulerState,
    rng: ChaCha8Rng,
    iteration: usize,
}

impl SdsRunState {
    pub fn new(config: &DistillConfig) -> Result<SdsRunState> {
        Ok(SdsRunState {
            guard: GuardState::new(config.guard_alpha, config.guard_warmup)?,
            scheduler: SchedulerState::new(
                config.scheduler_beta,
                config.lambda_min,
                config.lambda_max,
            )?,
            rng: stream_rng(config.seed, 0),
            iteration: 0,
        })
    }

    pub fn guard(&self) -> &GuardState {
        &self.guard
    }

    /// Replace the guard (used to start a run past warmup in tests).
    pub fn set_guard(&mut self, guard: GuardState) {
        self.guard = guard;
    }
}

pub struct SdsStepOutcome {
    pub gradient: Vec<f64>,
    pub record: LogRecord,
}

/// One SDS iteration: draw `(view, t, eps)`, render, noise, predict (with
/// optional structural guidance on the guided view), classify the pseudo
/// target, gate through the guard, and assemble the theta gradient.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    asset: &Asset,
    rig: &ViewRig,
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    fx: &FeatureExtractor,
    bank: Option<&BasisBank>,
    config: &DistillConfig,
    state: &mut SdsRunState,
) -> Result<SdsStepOutcome> {
    let dim = prior.dim();
    let view = ViewBin::ALL[state.rng.random_range(0..ViewBin::ALL.len())];
    let (t_lo, t_hi) = config.t_range(schedule);
    let t = state.rng.random_range(t_lo..=t_hi);
    let eps = standard_normal_vec(&mut state.rng, dim);

    let x0 = rig.render(asset, view)?;
    let lambda = match config.lambda {
        LambdaSource::Fixed(v) => v,
        LambdaSource::Scheduled => state.scheduler.schedule_lambda(quality_proxy(prior, &x0)),
    };

    let x_t = schedule.forward_noise(&x0, t, &eps)?;
    let mut eps_hat = prior.epsilon_pred(schedule, &x_t, t, Condition::Unconditional)?;
    let mut energy = None;
    if config.guidance && view == config.guided_view && lambda > 0.0 {
        let bank = bank.ok_or_else(|| invalid("guidance enabled but no basis bank supplied"))?;
        let report = structural_energy(bank.nearest(t), fx, &x_t, t);
        for (e, g) in eps_hat.iter_mut().zip(&report.gradient) {
            *e += lambda * g;
        }
        energy = Some(report.value);
    }

    let x0_hat = schedule.x0_hat(&x_t, t, &eps_hat)?;
    let classified = classify_view(prior, &x0_hat);
    let sigma = view_similarity(prior, &x0_hat, view)?;
    let decision = if config.guard {
        state.guard.observe(sigma)
    } else {
        GuardDecision::Keep
    };
    let gradient = if decision == GuardDecision::Discard {
        vec![0.0; dim]
    } else {
        sds_gradient(rig, view, &eps_hat, &eps)?
    };

    let record = LogRecord {
        iteration: state.iteration,
        view,
        t,
        x0_hat,
        classified,
        sigma,
        decision,
        lambda,
        energy,
        schedule_trace: match config.lambda {
            LambdaSource::Scheduled => state.scheduler.last(),
            LambdaSource::Fixed(_) => None,
        },
    };
    state.iteration += 1;
    Ok(SdsStepOutcome { gradient, record })
}

pub struct DistillOutcome {
    pub asset: Asset,
    pub log: PseudoTargetLog,
    pub report: MetricsReport,
}

/// Run the full distillation loop with plain gradient descent on theta.
/// Deterministic given the config seed.
pub fn distill(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    rig: &ViewRig,
    fx: &FeatureExtractor,
    bank: Option<&BasisBank>,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    config.validate(schedule)?;
    if rig.dim() != prior.dim() {
        return Err(invalid("rig dimension does not match prior"));
    }
    if config.guidance && bank.is_none() {
        return Err(invalid("guidance enabled but no basis bank supplied"));
    }
    let mut asset = Asset::new(vec![0.0; prior.dim()]);
    let mut state = SdsRunState::new(config)?;
    let mut log = PseudoTargetLog::default();
    for _ in 0..config.iterations {
        let out = sds_step(&asset, rig, prior, schedule, fx, bank, config, &mut state)?;
        for (th, g) in asset.theta.iter_mut().zip(&out.gradient) {
            *th -= config.learning_rate * g;
        }
        log.push(out.record);
    }
    let report = run_report(prior, rig, &asset, &log)?;
    Ok(DistillOutcome { asset, log, report })
}
