//! Differentiable feature extractor: a frozen, seed-derived tanh layer per
//! grid location with a sinusoidal timestep embedding. Stands in for
//! intermediate denoiser activations — nonlinear, deterministic, and with
//! an everywhere-defined Jacobian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub state_dim: usize,
    /// Scale of the per-location weight entries (divided by sqrt(state_dim)).
    pub weight_scale: f64,
    pub bias_scale: f64,
    pub embed_scale: f64,
    pub seed: u64,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            height: 4,
            width: 4,
            channels: 32,
            state_dim: 2,
            weight_scale: 0.5,
            bias_scale: 0.1,
            embed_scale: 0.1,
            seed: 17,
        }
    }
}

/// Frozen feature map `F(x, t)[loc, c] = tanh(W_loc x + b_loc + embed(t))`.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    cfg: FeatureExtractorConfig,
    /// Row-major `[location][channel][state_dim]`.
    weights: Vec<f64>,
    /// `[location][channel]`.
    biases: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureExtractorConfig) -> Result<FeatureExtractor> {
        if cfg.height == 0 || cfg.width == 0 || cfg.channels == 0 || cfg.state_dim == 0 {
            return Err(invalid("feature extractor dimensions must be positive"));
        }
        if !(cfg.weight_scale.is_finite() && cfg.bias_scale.is_finite() && cfg.embed_scale.is_finite())
        {
            return Err(invalid("feature extractor scales must be finite"));
        }
        let locations = cfg.height * cfg.width;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w_sd = cfg.weight_scale / (cfg.state_dim as f64).sqrt();
        let weights = (0..locations * cfg.channels * cfg.state_dim)
            .map(|_| w_sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let biases = (0..locations * cfg.channels)
            .map(|_| cfg.bias_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(FeatureExtractor { cfg, weights, biases })
    }

    pub fn config(&self) -> &FeatureExtractorConfig {
        &self.cfg
    }

    pub fn locations(&self) -> usize {
        self.cfg.height * self.cfg.width
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    /// Sinusoidal timestep embedding in channel space, scaled by
    /// `embed_scale`. Constant with respect to the state.
    pub fn time_embedding(&self, t: usize) -> Vec<f64> {
        let c = self.cfg.channels;
        let half = (c / 2).max(1);
        let mut out = vec![0.0; c];
        for k in 0..c {
            let pair = k / 2;
            let freq = 10_000f64.powf(-(pair as f64) / half as f64);
            let phase = t as f64 * freq;
            out[k] = self.cfg.embed_scale * if k % 2 == 0 { phase.sin() } else { phase.cos() };
        }
        out
    }

    /// Feature map at `(x, t)` as a `locations x channels` matrix, rows in
    /// row-major spatial order.
    pub fn extract(&self, x: &[f64], t: usize) -> Matrix {
        assert_eq!(x.len(), self.cfg.state_dim, "state dimension mismatch");
        assert!(x.iter().all(|v| v.is_finite()), "state must be finite");
        let (locs, c, d) = (self.locations(), self.cfg.channels, self.cfg.state_dim);
        let embed = self.time_embedding(t);
        let mut out = Matrix::zeros(locs, c);
        for loc in 0..locs {
            for ch in 0..c {
                let w = &self.weights[(loc * c + ch) * d..(loc * c + ch + 1) * d];
                let mut z = self.biases[loc * c + ch] + embed[ch];
                for (wv, xv) in w.iter().zip(x) {
                    z += wv * xv;
                }
                out.set(loc, ch, z.tanh());
            }
        }
        out
    }

    /// Pull an upstream gradient on the features back to the state:
    /// `sum_loc W_loc^T (upstream ⊙ (1 - F^2))`.
    pub fn state_grad(&self, feats: &Matrix, upstream: &Matrix) -> Vec<f64> {
        let (locs, c, d) = (self.locations(), self.cfg.channels, self.cfg.state_dim);
        assert_eq!(feats.rows(), locs);
        assert_eq!(feats.cols(), c);
        assert_eq!(upstream.rows(), locs);
        assert_eq!(upstream.cols(), c);
        let mut grad = vec![0.0; d];
        for loc in 0..locs {
            for ch in 0..c {
                let f = feats.get(loc, ch);
                let dz = upstream.get(loc, ch) * (1.0 - f * f);
                if dz == 0.0 {
                    continue;
                }
                let w = &self.weights[(loc * c + ch) * d..(loc * c + ch + 1) * d];
                for (g, wv) in grad.iter_mut().zip(w) {
                    *g += dz * wv;
                }
            }
        }
        grad
    }
}
