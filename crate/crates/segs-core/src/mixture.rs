//! Labeled Gaussian mixture prior with analytic densities, scores, and
//! noise predictions along the VP diffusion time-marginals.
//!
//! At noise level `alpha_bar` the marginal of mode `i` is
//! `N(sqrt(ab) mu_i, ab * Sigma_i + (1 - ab) I)`, so scores and epsilon
//! predictions are exact at every timestep — the mixture plays the role of
//! a frozen denoiser whose bias we control.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.8378770664093453;

/// Coarse azimuth bin a mode is labeled with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewBin {
    Front,
    Side,
    Back,
}

impl ViewBin {
    pub const ALL: [ViewBin; 3] = [ViewBin::Front, ViewBin::Side, ViewBin::Back];

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewBin::Front => "front",
            ViewBin::Side => "side",
            ViewBin::Back => "back",
        }
    }
}

impl std::fmt::Display for ViewBin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ViewBin {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<ViewBin> {
        match s.to_ascii_lowercase().as_str() {
            "front" => Ok(ViewBin::Front),
            "side" => Ok(ViewBin::Side),
            "back" => Ok(ViewBin::Back),
            other => Err(invalid(format!("unknown view bin {other:?}"))),
        }
    }
}

/// Conditioning for score / noise-prediction queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Unconditional,
    View(ViewBin),
}

/// One mixture component.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mode {
    pub view: ViewBin,
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

/// Labeled Gaussian mixture over `R^dim`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixturePrior {
    dim: usize,
    modes: Vec<Mode>,
    /// `Some(sigma^2)` when the covariance is exactly isotropic; the scalar
    /// path avoids factorizing a matrix per score query.
    #[serde(skip)]
    iso: Vec<Option<f64>>,
    /// Cached Cholesky factors (row-major lower) of the clean covariances,
    /// used when drawing data samples.
    #[serde(skip)]
    chol: Vec<Vec<f64>>,
}

fn detect_isotropic(cov: &Matrix) -> Option<f64> {
    let n = cov.rows();
    let s = cov.get(0, 0);
    for i in 0..n {
        for j in 0..n {
            let expect = if i == j { s } else { 0.0 };
            if cov.get(i, j) != expect {
                return None;
            }
        }
    }
    Some(s)
}

fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

impl MixturePrior {
    pub fn new(dim: usize, modes: Vec<Mode>) -> Result<MixturePrior> {
        if dim == 0 {
            return Err(invalid("state dimension must be positive"));
        }
        if modes.is_empty() {
            return Err(invalid("prior needs at least one mode"));
        }
        let total: f64 = modes.iter().map(|m| m.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("mode weights sum to {total}, expected 1")));
        }
        let mut iso = Vec::with_capacity(modes.len());
        let mut chol = Vec::with_capacity(modes.len());
        for (idx, mode) in modes.iter().enumerate() {
            if !(mode.weight > 0.0 && mode.weight <= 1.0) {
                return Err(invalid(format!("mode {idx} weight must lie in (0, 1]")));
            }
            if mode.mean.len() != dim {
                return Err(invalid(format!("mode {idx} mean has wrong dimension")));
            }
            if mode.cov.rows() != dim || mode.cov.cols() != dim {
                return Err(invalid(format!("mode {idx} covariance has wrong shape")));
            }
            for i in 0..dim {
                for j in 0..dim {
                    if (mode.cov.get(i, j) - mode.cov.get(j, i)).abs() > 1e-12 {
                        return Err(invalid(format!("mode {idx} covariance is not symmetric")));
                    }
                }
            }
            let factor = to_dmatrix(&mode.cov)
                .cholesky()
                .ok_or_else(|| invalid(format!("mode {idx} covariance is not positive-definite")))?;
            let l = factor.l();
            let mut flat = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..=i {
                    flat[i * dim + j] = l[(i, j)];
                }
            }
            chol.push(flat);
            iso.push(detect_isotropic(&mode.cov));
        }
        Ok(MixturePrior { dim, modes, iso, chol })
    }

    /// Canonical biased 2-D prior: front/side/back modes on a ring of the
    /// given radius (angles 0, 120, 240 degrees), isotropic `sigma^2 I`
    /// covariances, and the supplied weights.
    pub fn view_ring(radius: f64, sigma: f64, weights: [f64; 3]) -> MixturePrior {
        let cov = Matrix::from_vec(2, 2, vec![sigma * sigma, 0.0, 0.0, sigma * sigma])
            .expect("isotropic covariance");
        let modes = ViewBin::ALL
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(i, (&view, weight))| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / 3.0;
                Mode {
                    view,
                    weight,
                    mean: vec![radius * angle.cos(), radius * angle.sin()],
                    cov: cov.clone(),
                }
            })
            .collect();
        MixturePrior::new(2, modes).expect("ring prior is valid")
    }

    /// Single standard-normal mode (used by fixed-point checks).
    pub fn standard_normal(dim: usize) -> MixturePrior {
        MixturePrior::new(
            dim,
            vec![Mode {
                view: ViewBin::Front,
                weight: 1.0,
                mean: vec![0.0; dim],
                cov: Matrix::identity(dim),
            }],
        )
        .expect("standard normal prior is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn has_view(&self, view: ViewBin) -> bool {
        self.modes.iter().any(|m| m.view == view)
    }

    fn selected_indices(&self, cond: Condition) -> Result<Vec<usize>> {
        match cond {
            Condition::Unconditional => Ok((0..self.modes.len()).collect()),
            Condition::View(view) => {
                let sel: Vec<usize> = self
                    .modes
                    .iter()
                    .enumerate()
                    .filter(|(_, m)| m.view == view)
                    .map(|(i, _)| i)
                    .collect();
                if sel.is_empty() {
                    return Err(invalid(format!("no modes labeled {view}")));
                }
                Ok(sel)
            }
        }
    }

    /// Log density and negative-precision-weighted residual of mode `i` at
    /// noise level `alpha_bar`: returns `(ln w_i + ln N_i(x), -S^{-1}(x - m))`.
    fn mode_logpdf_and_pull(&self, i: usize, x: &[f64], alpha_bar: f64) -> (f64, Vec<f64>) {
        let mode = &self.modes[i];
        let scale = alpha_bar.sqrt();
        let diff: Vec<f64> = x
            .iter()
            .zip(&mode.mean)
            .map(|(xv, mv)| xv - scale * mv)
            .collect();
        match self.iso[i] {
            Some(s2) => {
                let var = alpha_bar * s2 + (1.0 - alpha_bar);
                let quad: f64 = diff.iter().map(|d| d * d).sum::<f64>() / var;
                let logdet = self.dim as f64 * var.ln();
                let logpdf = mode.weight.ln() - 0.5 * (self.dim as f64 * LN_2PI + logdet + quad);
                let pull: Vec<f64> = diff.iter().map(|d| -d / var).collect();
                (logpdf, pull)
            }
            None => {
                let mut s = to_dmatrix(&mode.cov) * alpha_bar;
                for d in 0..self.dim {
                    s[(d, d)] += 1.0 - alpha_bar;
                }
                let factor = s
                    .cholesky()
                    .expect("noised covariance of a PD mode stays positive-definite");
                let l = factor.l();
                let logdet: f64 = (0..self.dim).map(|d| 2.0 * l[(d, d)].ln()).sum();
                let rhs = nalgebra::DVector::from_column_slice(&diff);
                let solved = factor.solve(&rhs);
                let quad: f64 = diff.iter().zip(solved.iter()).map(|(d, s)| d * s).sum();
                let logpdf = mode.weight.ln() - 0.5 * (self.dim as f64 * LN_2PI + logdet + quad);
                let pull: Vec<f64> = solved.iter().map(|v| -v).collect();
                (logpdf, pull)
            }
        }
    }

    /// Per-mode `ln w_i + ln N_i(x)` at the given noise level.
    pub fn mode_log_densities(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        (0..self.modes.len())
            .map(|i| self.mode_logpdf_and_pull(i, x, alpha_bar).0)
            .collect()
    }

    /// Log density of the (conditioned, renormalized) mixture at the given
    /// noise level. `alpha_bar = 1` is the clean data distribution.
    pub fn log_density_noised(&self, x: &[f64], alpha_bar: f64, cond: Condition) -> Result<f64> {
        let sel = self.selected_indices(cond)?;
        let logs: Vec<f64> = sel
            .iter()
            .map(|&i| self.mode_logpdf_and_pull(i, x, alpha_bar).0)
            .collect();
        let log_weight_total = sel
            .iter()
            .map(|&i| self.modes[i].weight)
            .sum::<f64>()
            .ln();
        Ok(log_sum_exp(&logs) - log_weight_total)
    }

    /// Clean unconditional log density.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_noised(x, 1.0, Condition::Unconditional)
            .expect("unconditional density always defined")
    }

    /// Score of the (conditioned) mixture at the given noise level.
    pub fn score_noised(&self, x: &[f64], alpha_bar: f64, cond: Condition) -> Result<Vec<f64>> {
        let sel = self.selected_indices(cond)?;
        let mut parts = Vec::with_capacity(sel.len());
        let mut max_log = f64::NEG_INFINITY;
        for &i in &sel {
            let (logpdf, pull) = self.mode_logpdf_and_pull(i, x, alpha_bar);
            max_log = max_log.max(logpdf);
            parts.push((logpdf, pull));
        }
        let mut score = vec![0.0; self.dim];
        let mut total = 0.0;
        for (logpdf, pull) in parts {
            let w = (logpdf - max_log).exp();
            total += w;
            for (s, p) in score.iter_mut().zip(pull) {
                *s += w * p;
            }
        }
        for s in &mut score {
            *s /= total;
        }
        Ok(score)
    }

    /// Analytic noise prediction: `-sqrt(1 - ab_t) * score_t(x_t | cond)`.
    pub fn epsilon_pred(
        &self,
        schedule: &NoiseSchedule,
        x_t: &[f64],
        t: usize,
        cond: Condition,
    ) -> Result<Vec<f64>> {
        if t < 1 || t > schedule.steps() {
            return Err(invalid(format!(
                "timestep {t} outside 1..={}",
                schedule.steps()
            )));
        }
        let ab = schedule.alpha_bar(t);
        let score = self.score_noised(x_t, ab, cond)?;
        let scale = -(1.0 - ab).sqrt();
        Ok(score.into_iter().map(|s| scale * s).collect())
    }

    /// Draw one clean data sample.
    pub fn sample_clean<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.modes.len() - 1;
        for (i, mode) in self.modes.iter().enumerate() {
            acc += mode.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let l = &self.chol[pick];
        let mut x = self.modes[pick].mean.clone();
        for i in 0..self.dim {
            for j in 0..=i {
                x[i] += l[i * self.dim + j] * z[j];
            }
        }
        x
    }
}

pub(crate) fn log_sum_exp(logs: &[f64]) -> f64 {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + logs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}
