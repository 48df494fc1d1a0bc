//! Discrete variance-preserving noise schedule and the forward / reverse
//! diffusion steps built on it.
//!
//! Timesteps are 1-based; `alpha_bar(0) == 1` by convention and every
//! step-indexed operation requires `1 <= t <= steps`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Reverse-update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Ancestral sampling with the posterior-variance noise term.
    Ddpm,
    /// Deterministic update (eta = 0).
    Ddim,
}

impl std::str::FromStr for StepKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<StepKind> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(StepKind::Ddpm),
            "ddim" => Ok(StepKind::Ddim),
            other => Err(invalid(format!("unknown sampler kind {other:?}"))),
        }
    }
}

/// Variance-preserving schedule: betas in (0,1), alphas `1 - beta`, and the
/// cumulative products `alpha_bar`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid("betas must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        // Strictly positive alphas < 1 make alpha_bar strictly decreasing
        // on paper; verify it survived floating point.
        if alpha_bars.windows(2).any(|w| w[1] >= w[0]) || alpha_bars[0] >= 1.0 {
            return Err(invalid("alpha_bar must be strictly decreasing below 1"));
        }
        if alpha_bars.last().copied().unwrap() <= 0.0 {
            return Err(invalid("alpha_bar underflowed to zero; schedule too long"));
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    /// Linearly spaced betas.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        NoiseSchedule::new(betas)
    }

    /// The standard 1000-step linear schedule (1e-4 to 2e-2).
    pub fn default_linear() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }

    /// Linear schedule over `steps` with betas scaled by `1000 / steps`, so
    /// the total noising mass (and terminal signal level) matches
    /// [`NoiseSchedule::default_linear`]. Useful for short desk-scale runs.
    pub fn linear_scaled(steps: usize) -> Result<NoiseSchedule> {
        let scale = 1000.0 / steps as f64;
        NoiseSchedule::linear(steps, 1e-4 * scale, 2e-2 * scale)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `1 <= t <= steps`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} out of range");
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `1 <= t <= steps`.
    pub fn alpha(&self, t: usize) -> f64 {
        assert!(t >= 1 && t <= self.steps(), "timestep {t} out of range");
        self.alphas[t - 1]
    }

    /// Cumulative product for `0 <= t <= steps`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps(), "timestep {t} out of range");
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// Noise-to-signal ratio `sqrt((1 - alpha_bar) / alpha_bar)`, `t >= 1`.
    pub fn gamma(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        assert!(t >= 1, "gamma is undefined at t = 0");
        ((1.0 - ab) / ab).sqrt()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    fn check_dim(a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() {
            return Err(invalid("state and noise dimensions differ"));
        }
        Ok(())
    }

    /// Forward noising: `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        Self::check_dim(x0, noise)?;
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
    }

    /// Clean-state estimate `(x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
    pub fn x0_hat(&self, x_t: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check_step(t)?;
        Self::check_dim(x_t, eps)?;
        let ab = self.alpha_bar(t);
        let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(x_t.iter().zip(eps).map(|(x, e)| (x - n * e) / s).collect())
    }

    /// One reverse step from `t` to `t - 1`.
    ///
    /// DDIM (eta = 0) is deterministic; DDPM adds `sigma_t * noise` with
    /// `sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t)`, except at `t = 1`
    /// where no noise is added. `noise` is only read on the DDPM path for
    /// `t > 1` and may be empty otherwise.
    pub fn reverse_step(
        &self,
        x_t: &[f64],
        t: usize,
        eps_hat: &[f64],
        kind: StepKind,
        noise: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_step(t)?;
        Self::check_dim(x_t, eps_hat)?;
        match kind {
            StepKind::Ddim => {
                let x0 = self.x0_hat(x_t, t, eps_hat)?;
                let ab_prev = self.alpha_bar(t - 1);
                let (s, n) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
                Ok(x0.iter().zip(eps_hat).map(|(x, e)| s * x + n * e).collect())
            }
            StepKind::Ddpm => {
                let beta = self.beta(t);
                let ab = self.alpha_bar(t);
                let ab_prev = self.alpha_bar(t - 1);
                let inv_sqrt_alpha = 1.0 / self.alpha(t).sqrt();
                let coef = beta / (1.0 - ab).sqrt();
                let mut out: Vec<f64> = x_t
                    .iter()
                    .zip(eps_hat)
                    .map(|(x, e)| inv_sqrt_alpha * (x - coef * e))
                    .collect();
                if t > 1 {
                    Self::check_dim(x_t, noise)?;
                    let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
                    for (o, z) in out.iter_mut().zip(noise) {
                        *o += sigma * z;
                    }
                }
                Ok(out)
            }
        }
    }
}
