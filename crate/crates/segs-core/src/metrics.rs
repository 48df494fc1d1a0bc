//! Quantitative evaluation: the automated Janus-rate and view-alignment
//! analogs, the Fokker-Planck time-reversal verifier, and the top-k /
//! lambda sweep harnesses.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::control::{classify_view, quality_proxy, view_similarity};
use crate::distill::{distill, Asset, DistillConfig, DistillOutcome, LambdaSource, ViewRig};
use crate::error::{invalid, Result};
use crate::exec;
use crate::features::FeatureExtractor;
use crate::guidance::{AuxPool, BasisBank};
use crate::linalg::Matrix;
use crate::mixture::{Condition, MixturePrior, ViewBin};
use crate::sampler::{standard_normal_vec, stream_rng};
use crate::schedule::NoiseSchedule;

/// Per-view similarity scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub front: f64,
    pub side: f64,
    pub back: f64,
}

impl ViewScores {
    pub fn get(&self, view: ViewBin) -> f64 {
        match view {
            ViewBin::Front => self.front,
            ViewBin::Side => self.side,
            ViewBin::Back => self.back,
        }
    }
}

/// Per-view classification counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewCounts {
    pub front: usize,
    pub side: usize,
    pub back: usize,
}

impl ViewCounts {
    pub fn bump(&mut self, view: ViewBin) {
        match view {
            ViewBin::Front => self.front += 1,
            ViewBin::Side => self.side += 1,
            ViewBin::Back => self.back += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.front + self.side + self.back
    }

    pub fn get(&self, view: ViewBin) -> usize {
        match view {
            ViewBin::Front => self.front,
            ViewBin::Side => self.side,
            ViewBin::Back => self.back,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyPoint {
    pub iteration: usize,
    pub value: f64,
}

/// Metric bundle for one distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub jr_analog: f64,
    pub view_cs: ViewScores,
    pub histogram: ViewCounts,
    pub energy_trace: Vec<EnergyPoint>,
}

/// Fraction of assets whose back render is not classified back.
pub fn jr_analog(assets: &[Asset], rig: &ViewRig, prior: &MixturePrior) -> Result<f64> {
    if assets.is_empty() {
        return Err(invalid("jr_analog needs at least one asset"));
    }
    let mut failures = 0;
    for asset in assets {
        let render = rig.render(asset, ViewBin::Back)?;
        if classify_view(prior, &render) != ViewBin::Back {
            failures += 1;
        }
    }
    Ok(failures as f64 / assets.len() as f64)
}

/// Mean per-view alignment: for each bin, the average similarity between
/// that view's render and the bin's descriptor.
pub fn view_cs_analog(assets: &[Asset], rig: &ViewRig, prior: &MixturePrior) -> Result<ViewScores> {
    if assets.is_empty() {
        return Err(invalid("view_cs_analog needs at least one asset"));
    }
    let mut scores = ViewScores::default();
    for view in ViewBin::ALL {
        let mut acc = 0.0;
        for asset in assets {
            let render = rig.render(asset, view)?;
            acc += view_similarity(prior, &render, view)?;
        }
        let mean = acc / assets.len() as f64;
        match view {
            ViewBin::Front => scores.front = mean,
            ViewBin::Side => scores.side = mean,
            ViewBin::Back => scores.back = mean,
        }
    }
    Ok(scores)
}

/// Assemble the per-run metric bundle from the final asset and its log.
pub fn run_report(
    prior: &MixturePrior,
    rig: &ViewRig,
    asset: &Asset,
    log: &crate::distill::PseudoTargetLog,
) -> Result<MetricsReport> {
    let mut histogram = ViewCounts::default();
    let mut energy_trace = Vec::new();
    for rec in log.records() {
        histogram.bump(rec.classified);
        if let Some(value) = rec.energy {
            energy_trace.push(EnergyPoint { iteration: rec.iteration, value });
        }
    }
    Ok(MetricsReport {
        schema_version: 1,
        jr_analog: jr_analog(std::slice::from_ref(asset), rig, prior)?,
        view_cs: view_cs_analog(std::slice::from_ref(asset), rig, prior)?,
        histogram,
        energy_trace,
    })
}

/// Two-sided one-sample Kolmogorov-Smirnov statistic against an exact CDF.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(((i + 1) as f64 / n - f).abs());
        d = d.max((i as f64 / n - f).abs());
    }
    d
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Exact CDF of one coordinate of the clean mixture (each marginal is a
/// weighted sum of univariate normal CDFs).
pub fn mixture_marginal_cdf(prior: &MixturePrior, coord: usize, x: f64) -> f64 {
    prior
        .modes()
        .iter()
        .map(|m| {
            let sd = m.cov.get(coord, coord).sqrt();
            m.weight * Normal::new(m.mean[coord], sd).expect("valid mode marginal").cdf(x)
        })
        .sum()
}

/// Continuous VP-SDE profile matching a discrete schedule's limits:
/// `beta(s) = steps * lerp(beta_1, beta_T, s)` over `s` in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct VpSde {
    beta_min: f64,
    beta_max: f64,
}

impl VpSde {
    pub fn from_schedule(schedule: &NoiseSchedule) -> VpSde {
        let t = schedule.steps() as f64;
        VpSde {
            beta_min: t * schedule.beta(1),
            beta_max: t * schedule.beta(schedule.steps()),
        }
    }

    pub fn beta(&self, s: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * s
    }

    /// `exp(-int_0^s beta)` — the continuous signal level.
    pub fn alpha_bar(&self, s: f64) -> f64 {
        (-(self.beta_min * s + 0.5 * (self.beta_max - self.beta_min) * s * s)).exp()
    }
}

/// Fokker-Planck time-reversal verification report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpeCheckReport {
    pub schema_version: u32,
    /// Max per-coordinate KS distance of the forward terminal marginal
    /// against the standard normal.
    pub forward_terminal_ks: f64,
    /// Max per-coordinate KS distance of the reverse-simulated terminal
    /// against the data marginal.
    pub reverse_data_ks: f64,
    /// Empirical minus analytic per-mode occupancy of reverse particles.
    pub occupancy_deltas: Vec<f64>,
    pub particles: usize,
    pub steps: usize,
}

fn forward_particle(prior: &MixturePrior, sde: &VpSde, steps: usize, seed: u64, p: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, p as u64);
    let mut x = prior.sample_clean(&mut rng);
    let ds = 1.0 / steps as f64;
    for n in 0..steps {
        let s = n as f64 * ds;
        let beta = sde.beta(s);
        let xi = standard_normal_vec(&mut rng, x.len());
        for (xv, z) in x.iter_mut().zip(xi) {
            *xv += -0.5 * beta * *xv * ds + (beta * ds).sqrt() * z;
        }
    }
    x
}

fn reverse_particle(prior: &MixturePrior, sde: &VpSde, steps: usize, seed: u64, p: usize) -> Vec<f64> {
    // Distinct stream namespace from the forward pass.
    let mut rng = stream_rng(seed ^ 0x5851_F42D_4C95_7F2D, p as u64);
    let mut x = standard_normal_vec(&mut rng, prior.dim());
    let ds = 1.0 / steps as f64;
    for n in 0..steps {
        // Reversed time: tau runs from 1 down to ds.
        let tau = 1.0 - n as f64 * ds;
        let beta = sde.beta(tau);
        let ab = sde.alpha_bar(tau);
        let score = prior
            .score_noised(&x, ab, Condition::Unconditional)
            .expect("unconditional score always defined");
        let xi = standard_normal_vec(&mut rng, x.len());
        for ((xv, sc), z) in x.iter_mut().zip(score).zip(xi) {
            *xv += (0.5 * beta * *xv + beta * sc) * ds + (beta * ds).sqrt() * z;
        }
    }
    x
}

fn fpe_check_impl(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    particles: usize,
    steps: usize,
    seed: u64,
    sequential: bool,
) -> Result<FpeCheckReport> {
    if particles < 1000 {
        return Err(invalid("fpe check needs at least 1000 particles"));
    }
    if steps == 0 {
        return Err(invalid("fpe check needs at least one step"));
    }
    let sde = VpSde::from_schedule(schedule);

    let run = |f: &(dyn Fn(usize) -> Vec<f64> + Sync)| -> Vec<Vec<f64>> {
        if sequential {
            exec::map_indexed_seq(particles, f)
        } else {
            exec::map_indexed(particles, f)
        }
    };

    let forward = run(&|p| forward_particle(prior, &sde, steps, seed, p));
    let mut forward_ks = 0.0f64;
    for d in 0..prior.dim() {
        let coord: Vec<f64> = forward.iter().map(|x| x[d]).collect();
        forward_ks = forward_ks.max(ks_statistic(&coord, standard_normal_cdf));
    }

    let reverse = run(&|p| reverse_particle(prior, &sde, steps, seed, p));
    let mut reverse_ks = 0.0f64;
    for d in 0..prior.dim() {
        let coord: Vec<f64> = reverse.iter().map(|x| x[d]).collect();
        reverse_ks = reverse_ks.max(ks_statistic(&coord, |x| mixture_marginal_cdf(prior, d, x)));
    }

    let mut counts = vec![0usize; prior.modes().len()];
    for x in &reverse {
        let logs = prior.mode_log_densities(x, 1.0);
        let mut best = 0;
        for (i, &l) in logs.iter().enumerate() {
            if l > logs[best] {
                best = i;
            }
        }
        counts[best] += 1;
    }
    let occupancy_deltas = counts
        .iter()
        .zip(prior.modes())
        .map(|(&c, m)| c as f64 / particles as f64 - m.weight)
        .collect();

    Ok(FpeCheckReport {
        schema_version: 1,
        forward_terminal_ks: forward_ks,
        reverse_data_ks: reverse_ks,
        occupancy_deltas,
        particles,
        steps,
    })
}

/// Euler-Maruyama simulation of the forward VP-SDE from data and of the
/// score-driven reverse SDE from noise, reporting how closely the two
/// terminal marginals retrace their analytic targets.
pub fn fpe_check(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    particles: usize,
    steps: usize,
    seed: u64,
) -> Result<FpeCheckReport> {
    fpe_check_impl(prior, schedule, particles, steps, seed, false)
}

/// Sequential twin of [`fpe_check`].
pub fn fpe_check_seq(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    particles: usize,
    steps: usize,
    seed: u64,
) -> Result<FpeCheckReport> {
    fpe_check_impl(prior, schedule, particles, steps, seed, true)
}

/// Shared fixtures for the sweep harnesses.
pub struct SweepContext<'a> {
    pub prior: &'a MixturePrior,
    pub schedule: &'a NoiseSchedule,
    pub rig: &'a ViewRig,
    pub fx: &'a FeatureExtractor,
    pub pool: &'a AuxPool,
    pub n_components: usize,
    pub stride: usize,
    pub basis_seed: u64,
    /// Per-row runs override `lambda`, `guidance`, and `seed` on this base.
    pub base: DistillConfig,
    pub seeds: &'a [u64],
}

impl SweepContext<'_> {
    fn run_row(&self, lambda: f64, k: usize) -> Result<Vec<DistillOutcome>> {
        let bank = BasisBank::build(
            self.schedule,
            self.fx,
            self.pool,
            self.n_components,
            k,
            self.stride,
            self.basis_seed,
        )?;
        self.seeds
            .iter()
            .map(|&seed| {
                let config = DistillConfig {
                    lambda: LambdaSource::Fixed(lambda),
                    guidance: true,
                    seed,
                    ..self.base.clone()
                };
                distill(self.prior, self.schedule, self.rig, self.fx, Some(&bank), &config)
            })
            .collect()
    }

    fn mean_render_quality(&self, outcomes: &[DistillOutcome]) -> f64 {
        let mut acc = 0.0;
        let mut count = 0;
        for out in outcomes {
            for view in ViewBin::ALL {
                let render = self
                    .rig
                    .render(&out.asset, view)
                    .expect("rig covers all views");
                acc += quality_proxy(self.prior, &render);
                count += 1;
            }
        }
        acc / count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkRow {
    pub k: usize,
    pub back_view_cs: f64,
}

/// Run the guided distillation pipeline per `k` on shared seeds and report
/// the back-view alignment score for each.
pub fn topk_sweep(ctx: &SweepContext, ks: &[usize]) -> Result<Vec<TopkRow>> {
    if ks.is_empty() {
        return Err(invalid("topk sweep needs at least one k"));
    }
    if ks.iter().any(|&k| k == 0 || k > ctx.pool.len()) {
        return Err(invalid(format!(
            "k values must lie in 1..={}",
            ctx.pool.len()
        )));
    }
    let lambda = match ctx.base.lambda {
        LambdaSource::Fixed(v) => v,
        LambdaSource::Scheduled => {
            return Err(invalid("topk sweep expects a fixed lambda in the base config"))
        }
    };
    let rows = exec::map_indexed(ks.len(), |i| -> Result<TopkRow> {
        let outcomes = ctx.run_row(lambda, ks[i])?;
        let assets: Vec<Asset> = outcomes.into_iter().map(|o| o.asset).collect();
        let scores = view_cs_analog(&assets, ctx.rig, ctx.prior)?;
        Ok(TopkRow { k: ks[i], back_view_cs: scores.back })
    });
    rows.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub jr_analog: f64,
    pub view_cs: ViewScores,
    pub mean_quality: f64,
    pub collapse: bool,
}

/// Paired-seed lambda sweep over guided distillation. The collapse flag
/// fires when a row's mean final-render quality proxy exceeds
/// `collapse_multiple` times the lambda = 0 baseline's.
pub fn lambda_sweep(
    ctx: &SweepContext,
    lambdas: &[f64],
    k: usize,
    collapse_multiple: f64,
) -> Result<Vec<LambdaRow>> {
    if lambdas.is_empty() {
        return Err(invalid("lambda sweep needs at least one lambda"));
    }
    if lambdas.iter().any(|&l| !(l >= 0.0)) {
        return Err(invalid("lambda values must be non-negative"));
    }
    if collapse_multiple <= 0.0 {
        return Err(invalid("collapse multiple must be positive"));
    }
    let baseline = ctx.run_row(0.0, k)?;
    let baseline_quality = ctx.mean_render_quality(&baseline);

    let make_row = |lambda: f64, outcomes: &[DistillOutcome]| -> Result<LambdaRow> {
        let assets: Vec<Asset> = outcomes.iter().map(|o| o.asset.clone()).collect();
        let quality = ctx.mean_render_quality(outcomes);
        Ok(LambdaRow {
            lambda,
            jr_analog: jr_analog(&assets, ctx.rig, ctx.prior)?,
            view_cs: view_cs_analog(&assets, ctx.rig, ctx.prior)?,
            mean_quality: quality,
            collapse: quality > collapse_multiple * baseline_quality,
        })
    };

    let rows = exec::map_indexed(lambdas.len(), |i| -> Result<LambdaRow> {
        let lambda = lambdas[i];
        if lambda == 0.0 {
            // Reuse the baseline runs so the lambda = 0 row is exactly the
            // baseline metrics.
            make_row(0.0, &baseline)
        } else {
            let outcomes = ctx.run_row(lambda, k)?;
            make_row(lambda, &outcomes)
        }
    });
    rows.into_iter().collect()
}

/// Serialize a sample batch to CSV with per-chain view classification.
pub fn write_samples_csv<W: std::io::Write>(
    prior: &MixturePrior,
    samples: &[Vec<f64>],
    w: W,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["chain".to_string()];
    header.extend((0..prior.dim()).map(|d| format!("x{d}")));
    header.push("view_argmax".into());
    wtr.write_record(&header)?;
    for (i, s) in samples.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(s.iter().map(|v| v.to_string()));
        row.push(classify_view(prior, s).to_string());
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-view histogram of classified samples.
pub fn sample_histogram(prior: &MixturePrior, samples: &[Vec<f64>]) -> ViewCounts {
    let mut counts = ViewCounts::default();
    for s in samples {
        counts.bump(classify_view(prior, s));
    }
    counts
}

/// Matrix CSV re-export for run artifacts.
pub fn write_matrix_csv<W: std::io::Write>(m: &Matrix, w: W) -> Result<()> {
    m.write_csv(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring() -> MixturePrior {
        MixturePrior::view_ring(3.0, 0.5, [0.8, 0.1, 0.1])
    }

    fn ideal_asset() -> Asset {
        // Renders each view exactly onto its mode under the symmetric rig.
        Asset::new(vec![3.0, 0.0])
    }

    #[test]
    fn jr_trivial_cases_and_count_oracle() {
        let prior = ring();
        let rig = ViewRig::symmetric_ring(2).unwrap();
        let good = ideal_asset();
        let bad = Asset::new(vec![0.0, 0.0]);
        assert_eq!(jr_analog(&[good.clone()], &rig, &prior).unwrap(), 0.0);
        assert_eq!(jr_analog(&[bad.clone()], &rig, &prior).unwrap(), 1.0);
        // Exhaustive count oracle: 4 failures out of 10.
        let mut assets = vec![good; 6];
        assets.extend(vec![bad; 4]);
        assert!((jr_analog(&assets, &rig, &prior).unwrap() - 0.4).abs() < 1e-12);
        assert!(jr_analog(&[], &rig, &prior).is_err());
    }

    #[test]
    fn view_cs_saturates_for_ideal_assets() {
        let prior = ring();
        let rig = ViewRig::symmetric_ring(2).unwrap();
        let scores = view_cs_analog(&[ideal_asset()], &rig, &prior).unwrap();
        for view in ViewBin::ALL {
            assert!(scores.get(view) > 0.99, "{view}: {}", scores.get(view));
        }
    }

    #[test]
    fn view_cs_detects_front_collapse() {
        let prior = ring();
        let rig = ViewRig::symmetric_ring(2).unwrap();
        // Asset whose back render lands in the front mode: theta chosen so
        // R_back theta = front mean, i.e. theta = R_back^T front_mean.
        let front_mean = prior.modes()[0].mean.clone();
        let theta = rig.apply_transpose(ViewBin::Back, &front_mean).unwrap();
        // apply_transpose computes R^T u, but we need theta with
        // R_back theta = front_mean, i.e. theta = R_back^{-1} front_mean =
        // R_back^T front_mean for orthogonal R. Same thing.
        let asset = Asset::new(theta);
        let scores = view_cs_analog(&[asset], &rig, &prior).unwrap();
        assert!(scores.back < 0.01, "back score {}", scores.back);
    }

    #[test]
    fn view_cs_single_asset_equals_its_similarity() {
        let prior = ring();
        let rig = ViewRig::symmetric_ring(2).unwrap();
        let asset = Asset::new(vec![1.0, 0.5]);
        let scores = view_cs_analog(&[asset.clone()], &rig, &prior).unwrap();
        let render = rig.render(&asset, ViewBin::Side).unwrap();
        let direct = view_similarity(&prior, &render, ViewBin::Side).unwrap();
        assert!((scores.side - direct).abs() < 1e-15);
    }

    #[test]
    fn ks_statistic_known_values() {
        // Empirical CDF of {0.25, 0.75} against U[0,1]: the largest gap is
        // 0.25 at each sample point.
        let d = ks_statistic(&[0.25, 0.75], |x| x.clamp(0.0, 1.0));
        assert!((d - 0.25).abs() < 1e-12);
        // A point mass far in the tail gives KS near 1.
        let d = ks_statistic(&[10.0], standard_normal_cdf);
        assert!(d > 0.999);
    }

    #[test]
    fn mixture_marginal_cdf_limits() {
        let prior = ring();
        assert!(mixture_marginal_cdf(&prior, 0, -100.0) < 1e-12);
        assert!((mixture_marginal_cdf(&prior, 0, 100.0) - 1.0).abs() < 1e-12);
        // Median check against direct Monte Carlo is covered by fpe tests;
        // here just monotonicity on a few points.
        let mut prev = 0.0;
        for i in -10..=10 {
            let v = mixture_marginal_cdf(&prior, 1, i as f64 * 0.7);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn vp_sde_profile_matches_schedule_limits() {
        let schedule = NoiseSchedule::default_linear();
        let sde = VpSde::from_schedule(&schedule);
        assert!((sde.beta(0.0) - 0.1).abs() < 1e-12);
        assert!((sde.beta(1.0) - 20.0).abs() < 1e-12);
        assert_eq!(sde.alpha_bar(0.0), 1.0);
        // Total mass integral: beta_min + (beta_max - beta_min)/2 = 10.05.
        assert!((sde.alpha_bar(1.0) - (-10.05f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn fpe_check_rejects_tiny_particle_counts() {
        let prior = ring();
        let schedule = NoiseSchedule::default_linear();
        assert!(fpe_check(&prior, &schedule, 10, 100, 1).is_err());
        assert!(fpe_check(&prior, &schedule, 1000, 0, 1).is_err());
    }

    #[test]
    fn fpe_standard_normal_is_a_fixed_point() {
        let prior = MixturePrior::standard_normal(2);
        let schedule = NoiseSchedule::default_linear();
        let report = fpe_check(&prior, &schedule, 2000, 300, 7).unwrap();
        assert!(report.forward_terminal_ks < 0.05, "forward {}", report.forward_terminal_ks);
        assert!(report.reverse_data_ks < 0.05, "reverse {}", report.reverse_data_ks);
    }

    #[test]
    fn fpe_parallel_matches_sequential() {
        let prior = ring();
        let schedule = NoiseSchedule::default_linear();
        let a = fpe_check(&prior, &schedule, 1000, 50, 3).unwrap();
        let b = fpe_check_seq(&prior, &schedule, 1000, 50, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn samples_csv_shape() {
        let prior = ring();
        let samples = vec![vec![3.0, 0.0], vec![-1.5, -2.598]];
        let mut buf = Vec::new();
        write_samples_csv(&prior, &samples, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "chain,x0,x1,view_argmax");
        assert!(lines[1].ends_with("front"));
        assert!(lines[2].ends_with("back"));
        let counts = sample_histogram(&prior, &samples);
        assert_eq!(counts.total(), 2);
        assert_eq!(counts.front, 1);
        assert_eq!(counts.back, 1);
    }
}
