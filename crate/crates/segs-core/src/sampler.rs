//! Reverse-chain sampling from the analytic prior.
//!
//! Chains are independent; each draws from its own counter-based RNG stream
//! derived from `(seed, chain index)`, so results are deterministic under
//! any thread schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::exec;
use crate::mixture::{Condition, MixturePrior};
use crate::schedule::{NoiseSchedule, StepKind};

/// RNG stream for one unit of work within a seeded run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Run one reverse chain from Gaussian initialization down to `t = 1`,
/// asking `eps_fn(x, t)` for the (possibly guided) noise prediction.
pub(crate) fn reverse_chain<F>(
    schedule: &NoiseSchedule,
    dim: usize,
    kind: StepKind,
    rng: &mut ChaCha8Rng,
    eps_fn: F,
) -> Vec<f64>
where
    F: Fn(&[f64], usize) -> Vec<f64>,
{
    let mut x = standard_normal_vec(rng, dim);
    for t in (1..=schedule.steps()).rev() {
        let eps = eps_fn(&x, t);
        let noise = match kind {
            StepKind::Ddpm => standard_normal_vec(rng, dim),
            StepKind::Ddim => Vec::new(),
        };
        x = schedule
            .reverse_step(&x, t, &eps, kind, &noise)
            .expect("t stays within range over the chain");
    }
    x
}

/// Sample one chain of the unguided reverse process.
pub fn sample_chain(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    cond: Condition,
    seed: u64,
    chain: u64,
    kind: StepKind,
) -> Result<Vec<f64>> {
    // Surface label errors before entering the chain.
    prior.score_noised(&vec![0.0; prior.dim()], 1.0, cond)?;
    let mut rng = stream_rng(seed, chain);
    Ok(reverse_chain(schedule, prior.dim(), kind, &mut rng, |x, t| {
        prior
            .epsilon_pred(schedule, x, t, cond)
            .expect("validated condition and in-range t")
    }))
}

/// Draw `n` independent reverse-chain samples with the given update rule.
pub fn sample_with(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    cond: Condition,
    n: usize,
    seed: u64,
    kind: StepKind,
) -> Result<Vec<Vec<f64>>> {
    prior.score_noised(&vec![0.0; prior.dim()], 1.0, cond)?;
    Ok(exec::map_indexed(n, |chain| {
        sample_chain(prior, schedule, cond, seed, chain as u64, kind)
            .expect("condition validated up front")
    }))
}

/// Sequential twin of [`sample_with`].
pub fn sample_with_seq(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    cond: Condition,
    n: usize,
    seed: u64,
    kind: StepKind,
) -> Result<Vec<Vec<f64>>> {
    prior.score_noised(&vec![0.0; prior.dim()], 1.0, cond)?;
    Ok(exec::map_indexed_seq(n, |chain| {
        sample_chain(prior, schedule, cond, seed, chain as u64, kind)
            .expect("condition validated up front")
    }))
}

/// DDPM sampling (the distribution-faithful default).
pub fn sample(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    cond: Condition,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    sample_with(prior, schedule, cond, n, seed, StepKind::Ddpm)
}
