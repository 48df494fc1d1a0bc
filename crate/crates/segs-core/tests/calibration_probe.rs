//! Temporary calibration probe - prints steering/descent/janus numbers.

use segs_core::control::{classify_view, quality_proxy};
use segs_core::distill::{distill, DistillConfig, LambdaSource, ViewRig};
use segs_core::features::{FeatureExtractor, FeatureExtractorConfig};
use segs_core::guidance::{guided_sample_with, structural_energy, AuxPool, BasisBank};
use segs_core::metrics::{jr_analog, view_cs_analog};
use segs_core::sampler::{sample_with, stream_rng};
use segs_core::{Condition, MixturePrior, NoiseSchedule, StepKind, ViewBin};
use rand::Rng;
use rand_distr::StandardNormal;

fn back_fraction(prior: &MixturePrior, samples: &[Vec<f64>]) -> f64 {
    samples.iter().filter(|x| classify_view(prior, x) == ViewBin::Back).count() as f64
        / samples.len() as f64
}

#[test]
#[ignore]
fn probe_steering() {
    let prior = MixturePrior::view_ring(3.0, 0.5, [0.8, 0.1, 0.1]);
    let schedule = NoiseSchedule::linear_scaled(100).unwrap();
    let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
    let pool = AuxPool::generate(&prior, &schedule, ViewBin::Back, 20, 1234).unwrap();
    let bank = BasisBank::build(&schedule, &fx, &pool, 16, 3, 1, 1234).unwrap();

    // Baseline DDIM occupancy.
    for kind in [StepKind::Ddim, StepKind::Ddpm] {
        let samples = sample_with(&prior, &schedule, Condition::Unconditional, 1000, 7, kind).unwrap();
        let mut counts = [0usize; 3];
        for s in &samples {
            match classify_view(&prior, s) {
                ViewBin::Front => counts[0] += 1,
                ViewBin::Side => counts[1] += 1,
                ViewBin::Back => counts[2] += 1,
            }
        }
        println!("unguided {kind:?} occupancy: {counts:?}");
    }

    // Lambda sweep on guided sampling.
    for lambda in [0.0, 1.0, 2.0, 5.0, 8.0, 11.0, 15.0, 25.0, 50.0, 100.0, 300.0] {
        let samples = guided_sample_with(
            &prior, &schedule, &bank, &fx, Condition::Unconditional, 300, 7, lambda, StepKind::Ddim,
        )
        .unwrap();
        let bf = back_fraction(&prior, &samples);
        let mq: f64 = samples.iter().map(|s| quality_proxy(&prior, s)).sum::<f64>() / samples.len() as f64;
        println!("lambda {lambda:>6.1}: back fraction {bf:.3}, mean proxy {mq:.2}");
    }
}

#[test]
#[ignore]
fn probe_energy_magnitude() {
    let prior = MixturePrior::view_ring(3.0, 0.5, [0.8, 0.1, 0.1]);
    let schedule = NoiseSchedule::linear_scaled(100).unwrap();
    let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
    let pool = AuxPool::generate(&prior, &schedule, ViewBin::Back, 20, 1234).unwrap();
    let bank = BasisBank::build(&schedule, &fx, &pool, 16, 3, 1, 1234).unwrap();
    for t in [5, 20, 50, 80, 95] {
        let mut rng = stream_rng(55, t as u64);
        let x0 = prior.sample_clean(&mut rng);
        let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = schedule.forward_noise(&x0, t, &noise).unwrap();
        let rep = structural_energy(bank.nearest(t), &fx, &x_t, t);
        let gn = rep.gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
        println!("t {t:>3}: energy {:.4}, |grad| {gn:.4}", rep.value);
    }
}

#[test]
#[ignore]
fn probe_energy_descent() {
    let prior = MixturePrior::view_ring(3.0, 0.5, [0.8, 0.1, 0.1]);
    let schedule = NoiseSchedule::linear_scaled(100).unwrap();
    let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
    let pool = AuxPool::generate(&prior, &schedule, ViewBin::Back, 20, 1234).unwrap();
    let bank = BasisBank::build(&schedule, &fx, &pool, 16, 3, 1, 1234).unwrap();
    for lambda in [5.0, 10.0, 15.0] {
        let mut wins = 0;
        let total = 100;
        for i in 0..total {
            let mut rng = stream_rng(900, i);
            let x0 = prior.sample_clean(&mut rng);
            let t = 2 + (rng.random::<f64>() * 96.0) as usize;
            let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
            let x_t = schedule.forward_noise(&x0, t, &noise).unwrap();
            let eps = prior.epsilon_pred(&schedule, &x_t, t, Condition::Unconditional).unwrap();
            let rep = structural_energy(bank.nearest(t), &fx, &x_t, t);
            let mut eps_g = eps.clone();
            for (e, g) in eps_g.iter_mut().zip(&rep.gradient) {
                *e += lambda * g;
            }
            let base_next = schedule.reverse_step(&x_t, t, &eps, StepKind::Ddim, &[]).unwrap();
            let guid_next = schedule.reverse_step(&x_t, t, &eps_g, StepKind::Ddim, &[]).unwrap();
            let basis = bank.nearest(t - 1);
            let e_base = structural_energy(basis, &fx, &base_next, t - 1).value;
            let e_guid = structural_energy(basis, &fx, &guid_next, t - 1).value;
            if e_guid < e_base {
                wins += 1;
            }
        }
        println!("lambda {lambda}: descent wins {wins}/{total}");
    }
}

#[test]
#[ignore]
fn probe_janus() {
    let prior = MixturePrior::view_ring(3.0, 0.5, [0.8, 0.1, 0.1]);
    let schedule = NoiseSchedule::linear_scaled(100).unwrap();
    let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
    let rig = ViewRig::symmetric_ring(2).unwrap();
    let pool = AuxPool::generate(&prior, &schedule, ViewBin::Back, 20, 1234).unwrap();
    let bank = BasisBank::build(&schedule, &fx, &pool, 16, 3, 1, 1234).unwrap();

    for (label, lambda, iters, lr) in [
        ("base 500 lr.01", 0.0, 500usize, 0.01),
        ("guid10 500 lr.01", 10.0, 500, 0.01),
        ("guid15 500 lr.01", 15.0, 500, 0.01),
        ("guid10 800 lr.02", 10.0, 800, 0.02),
    ] {
        let mut jr_count = 0;
        let mut front_frac_acc = 0.0;
        let mut back_cs_acc = 0.0;
        let seeds: Vec<u64> = (0..20).collect();
        for &seed in &seeds {
            let config = DistillConfig {
                iterations: iters,
                learning_rate: lr,
                lambda: LambdaSource::Fixed(lambda),
                guidance: lambda > 0.0,
                seed,
                ..DistillConfig::default()
            };
            let out = distill(&prior, &schedule, &rig, &fx, Some(&bank), &config).unwrap();
            let jr = jr_analog(std::slice::from_ref(&out.asset), &rig, &prior).unwrap();
            jr_count += jr as usize;
            front_frac_acc += out.report.histogram.front as f64 / out.report.histogram.total() as f64;
            back_cs_acc += view_cs_analog(std::slice::from_ref(&out.asset), &rig, &prior).unwrap().back;
        }
        println!(
            "{label}: jr {jr_count}/20, mean front pseudo-frac {:.3}, mean back cs {:.3}",
            front_frac_acc / 20.0,
            back_cs_acc / 20.0
        );
    }
}

#[test]
#[ignore]
fn probe_topk() {
    let prior = MixturePrior::view_ring(3.0, 0.5, [0.8, 0.1, 0.1]);
    let schedule = NoiseSchedule::linear_scaled(100).unwrap();
    let fx = FeatureExtractor::new(FeatureExtractorConfig::default()).unwrap();
    let rig = ViewRig::symmetric_ring(2).unwrap();
    for jitter in [0.8, 1.5, 2.2] {
        let pool =
            AuxPool::constructed_monotone(&prior, ViewBin::Back, 4, 10, jitter, 99).unwrap();
        print!("jitter {jitter}: ");
        for k in [1usize, 2, 3, 4, 6, 8, 10] {
            let bank = BasisBank::build(&schedule, &fx, &pool, 16, k, 1, 99).unwrap();
            let mut acc = 0.0;
            let seeds = [0u64, 1, 2, 3, 4];
            for &seed in &seeds {
                let config = DistillConfig {
                    iterations: 500,
                    lambda: LambdaSource::Fixed(10.0),
                    guidance: true,
                    seed,
                    ..DistillConfig::default()
                };
                let out = distill(&prior, &schedule, &rig, &fx, Some(&bank), &config).unwrap();
                acc += view_cs_analog(std::slice::from_ref(&out.asset), &rig, &prior)
                    .unwrap()
                    .back;
            }
            print!("k{k}={:.3} ", acc / seeds.len() as f64);
        }
        println!();
    }
}
