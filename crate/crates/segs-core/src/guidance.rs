//! Viewpoint-aware structural guidance: PCA basis and reference
//! construction from auxiliary view-conditioned samples, the structural
//! energy with its analytic state gradient, and the guided noise
//! prediction injected into reverse sampling.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::view_similarity;
use crate::error::{invalid, Result};
use crate::exec;
use crate::features::FeatureExtractor;
use crate::linalg::{Matrix, PcaModel};
use crate::mixture::{Condition, MixturePrior, ViewBin};
use crate::sampler::{self, stream_rng};
use crate::schedule::{NoiseSchedule, StepKind};

/// Structural energy value and its gradient with respect to the state.
#[derive(Clone, Debug)]
pub struct EnergyReport {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Frozen per-timestep guidance target: PCA basis over feature channels
/// plus the top-k reference projections it was distilled from.
#[derive(Clone, Debug)]
pub struct StructuralBasis {
    timestep: usize,
    pca: PcaModel,
    references: Vec<Matrix>,
    source_similarities: Vec<f64>,
}

impl StructuralBasis {
    /// Build from states already noised to `t`: extract features, fit the
    /// channel PCA over all samples, select the top-k by similarity, and
    /// store their projections as references.
    pub fn from_noisy_states(
        fx: &FeatureExtractor,
        states: &[Vec<f64>],
        similarities: &[f64],
        t: usize,
        n_components: usize,
        k: usize,
    ) -> Result<StructuralBasis> {
        let n = states.len();
        if n < 2 {
            return Err(invalid("basis construction needs at least 2 samples"));
        }
        if similarities.len() != n {
            return Err(invalid("one similarity per sample required"));
        }
        if k == 0 || k > n {
            return Err(invalid(format!("top-k {k} outside 1..={n}")));
        }
        if n_components == 0 || n_components > fx.channels() {
            return Err(invalid(format!(
                "component count {} outside 1..={}",
                n_components,
                fx.channels()
            )));
        }

        let features: Vec<Matrix> = states.iter().map(|s| fx.extract(s, t)).collect();
        // Flatten sample-major, then row-major spatial.
        let mut stacked = Matrix::zeros(n * fx.locations(), fx.channels());
        for (i, f) in features.iter().enumerate() {
            for loc in 0..fx.locations() {
                for ch in 0..fx.channels() {
                    stacked.set(i * fx.locations() + loc, ch, f.get(loc, ch));
                }
            }
        }
        let pca = PcaModel::fit(&stacked, n_components)?;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]));
        let top = &order[..k];

        let references: Vec<Matrix> = top
            .iter()
            .map(|&i| pca.project(&features[i]))
            .collect::<Result<_>>()?;
        let source_similarities = top.iter().map(|&i| similarities[i]).collect();
        Ok(StructuralBasis { timestep: t, pca, references, source_similarities })
    }

    /// Assemble from persisted parts, re-validating the invariants.
    pub fn from_parts(
        timestep: usize,
        pca: PcaModel,
        references: Vec<Matrix>,
        source_similarities: Vec<f64>,
    ) -> Result<StructuralBasis> {
        if references.is_empty() {
            return Err(invalid("basis needs at least one reference"));
        }
        if source_similarities.len() != references.len() {
            return Err(invalid("one similarity per reference required"));
        }
        let rows = references[0].rows();
        for r in &references {
            if r.cols() != pca.n_components() || r.rows() != rows || rows == 0 {
                return Err(invalid("reference shape does not match basis"));
            }
        }
        Ok(StructuralBasis { timestep, pca, references, source_similarities })
    }

    pub fn timestep(&self) -> usize {
        self.timestep
    }

    pub fn pca(&self) -> &PcaModel {
        &self.pca
    }

    pub fn references(&self) -> &[Matrix] {
        &self.references
    }

    pub fn source_similarities(&self) -> &[f64] {
        &self.source_similarities
    }

    pub fn k(&self) -> usize {
        self.references.len()
    }

    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let artifact = BasisArtifact::from(self);
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &artifact)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<StructuralBasis> {
        let file = std::fs::File::open(path)?;
        let artifact: BasisArtifact = serde_json::from_reader(file)?;
        artifact.try_into()
    }
}

/// Serialized form of a [`StructuralBasis`].
#[derive(Serialize, Deserialize)]
struct BasisArtifact {
    schema_version: u32,
    timestep: usize,
    mean: Vec<f64>,
    basis: Matrix,
    eigenvalues: Vec<f64>,
    references: Vec<Matrix>,
    source_similarities: Vec<f64>,
}

impl From<&StructuralBasis> for BasisArtifact {
    fn from(b: &StructuralBasis) -> BasisArtifact {
        BasisArtifact {
            schema_version: 1,
            timestep: b.timestep,
            mean: b.pca.mean().to_vec(),
            basis: b.pca.basis().clone(),
            eigenvalues: b.pca.eigenvalues().to_vec(),
            references: b.references.clone(),
            source_similarities: b.source_similarities.clone(),
        }
    }
}

impl TryFrom<BasisArtifact> for StructuralBasis {
    type Error = crate::Error;

    fn try_from(a: BasisArtifact) -> Result<StructuralBasis> {
        let pca = PcaModel::from_parts(a.mean, a.basis, a.eigenvalues)?;
        StructuralBasis::from_parts(a.timestep, pca, a.references, a.source_similarities)
    }
}

/// Auxiliary sample pool: clean target-view samples with their
/// view-similarity scores, shared by every per-timestep basis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuxPool {
    pub states: Vec<Vec<f64>>,
    pub similarities: Vec<f64>,
}

impl AuxPool {
    /// Generate `n` view-conditioned reverse-chain samples and score each
    /// with the view classifier.
    pub fn generate(
        prior: &MixturePrior,
        schedule: &NoiseSchedule,
        view: ViewBin,
        n: usize,
        seed: u64,
    ) -> Result<AuxPool> {
        if n < 2 {
            return Err(invalid("auxiliary pool needs at least 2 samples"));
        }
        let states =
            sampler::sample_with(prior, schedule, Condition::View(view), n, seed, StepKind::Ddpm)?;
        let similarities = states
            .iter()
            .map(|s| view_similarity(prior, s, view))
            .collect::<Result<_>>()?;
        Ok(AuxPool { states, similarities })
    }

    /// Synthetic pool with a monotone quality tail: `aligned` jittered
    /// samples around the target-view mode followed by adversarial samples
    /// parked at the heaviest off-view mode. Used by the top-k shape
    /// experiments.
    pub fn constructed_monotone(
        prior: &MixturePrior,
        view: ViewBin,
        aligned: usize,
        total: usize,
        jitter: f64,
        seed: u64,
    ) -> Result<AuxPool> {
        if aligned == 0 || aligned > total {
            return Err(invalid("need 1 <= aligned <= total"));
        }
        if jitter < 0.0 {
            return Err(invalid("jitter must be non-negative"));
        }
        let target = heaviest_mode_mean(prior, |m| m.view == view)
            .ok_or_else(|| invalid(format!("no modes labeled {view}")))?;
        let decoy = heaviest_mode_mean(prior, |m| m.view != view)
            .ok_or_else(|| invalid("constructed pool needs an off-view mode"))?;
        let mut states = Vec::with_capacity(total);
        for i in 0..total {
            let center = if i < aligned { &target } else { &decoy };
            let mut rng = stream_rng(seed, i as u64);
            let noise = sampler::standard_normal_vec(&mut rng, prior.dim());
            states.push(
                center
                    .iter()
                    .zip(noise)
                    .map(|(c, z)| c + jitter * z)
                    .collect::<Vec<f64>>(),
            );
        }
        let similarities = states
            .iter()
            .map(|s| view_similarity(prior, s, view))
            .collect::<Result<_>>()?;
        Ok(AuxPool { states, similarities })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn heaviest_mode_mean<F: Fn(&crate::mixture::Mode) -> bool>(
    prior: &MixturePrior,
    pred: F,
) -> Option<Vec<f64>> {
    prior
        .modes()
        .iter()
        .filter(|m| pred(m))
        .max_by(|a, b| a.weight.total_cmp(&b.weight))
        .map(|m| m.mean.clone())
}

/// Per-timestep bases at a fixed stride, with nearest lookup in between.
#[derive(Clone, Debug)]
pub struct BasisBank {
    stride: usize,
    bases: BTreeMap<usize, StructuralBasis>,
}

impl BasisBank {
    /// Build bases for timesteps `1, 1 + stride, ...` by renoising the pool
    /// to each covered step with fresh seed-derived noise.
    pub fn build(
        schedule: &NoiseSchedule,
        fx: &FeatureExtractor,
        pool: &AuxPool,
        n_components: usize,
        k: usize,
        stride: usize,
        seed: u64,
    ) -> Result<BasisBank> {
        if stride == 0 {
            return Err(invalid("basis stride must be >= 1"));
        }
        let ts: Vec<usize> = (1..=schedule.steps()).step_by(stride).collect();
        let built = exec::map_indexed(ts.len(), |i| {
            let t = ts[i];
            basis_at(schedule, fx, pool, t, n_components, k, seed)
        });
        let mut bases = BTreeMap::new();
        for (t, b) in ts.into_iter().zip(built) {
            bases.insert(t, b?);
        }
        Ok(BasisBank { stride, bases })
    }

    /// The basis whose timestep is closest to `t` (ties to the lower one).
    pub fn nearest(&self, t: usize) -> &StructuralBasis {
        let below = self.bases.range(..=t).next_back();
        let above = self.bases.range(t + 1..).next();
        match (below, above) {
            (Some((&bt, b)), Some((&at, a))) => {
                if t - bt <= at - t {
                    b
                } else {
                    a
                }
            }
            (Some((_, b)), None) => b,
            (None, Some((_, a))) => a,
            (None, None) => unreachable!("bank is never empty"),
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn timesteps(&self) -> impl Iterator<Item = usize> + '_ {
        self.bases.keys().copied()
    }

    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        #[derive(Serialize)]
        struct BankArtifact {
            schema_version: u32,
            stride: usize,
            bases: Vec<BasisArtifact>,
        }
        let artifact = BankArtifact {
            schema_version: 1,
            stride: self.stride,
            bases: self.bases.values().map(BasisArtifact::from).collect(),
        };
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(file, &artifact)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<BasisBank> {
        #[derive(Deserialize)]
        struct BankArtifact {
            #[allow(dead_code)]
            schema_version: u32,
            stride: usize,
            bases: Vec<BasisArtifact>,
        }
        let file = std::fs::File::open(path)?;
        let artifact: BankArtifact = serde_json::from_reader(file)?;
        if artifact.stride == 0 || artifact.bases.is_empty() {
            return Err(invalid("bank artifact is empty or has zero stride"));
        }
        let mut bases = BTreeMap::new();
        for b in artifact.bases {
            let basis: StructuralBasis = b.try_into()?;
            bases.insert(basis.timestep(), basis);
        }
        Ok(BasisBank { stride: artifact.stride, bases })
    }
}

fn renoise_seed(seed: u64) -> u64 {
    // Separate RNG namespace from the sampling chains.
    seed ^ 0x9E37_79B9_7F4A_7C15
}

fn basis_at(
    schedule: &NoiseSchedule,
    fx: &FeatureExtractor,
    pool: &AuxPool,
    t: usize,
    n_components: usize,
    k: usize,
    seed: u64,
) -> Result<StructuralBasis> {
    let noisy: Vec<Vec<f64>> = pool
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = stream_rng(renoise_seed(seed), (t * pool.len() + i) as u64);
            let noise = sampler::standard_normal_vec(&mut rng, s.len());
            schedule.forward_noise(s, t, &noise)
        })
        .collect::<Result<_>>()?;
    StructuralBasis::from_noisy_states(fx, &noisy, &pool.similarities, t, n_components, k)
}

/// Full single-timestep pipeline: draw `n_aux` view-conditioned samples,
/// renoise them to `t`, fit the channel PCA, and keep the top-`k`
/// projections as references.
#[allow(clippy::too_many_arguments)]
pub fn build_basis(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    fx: &FeatureExtractor,
    view: ViewBin,
    t: usize,
    n_aux: usize,
    n_components: usize,
    k: usize,
    seed: u64,
) -> Result<StructuralBasis> {
    if t < 1 || t > schedule.steps() {
        return Err(invalid(format!("timestep {t} outside 1..={}", schedule.steps())));
    }
    let pool = AuxPool::generate(prior, schedule, view, n_aux, seed)?;
    basis_at(schedule, fx, &pool, t, n_components, k, seed)
}

/// Structural energy at `(x_t, t)`: average per-reference MSE between the
/// projected features and each frozen reference, with the gradient taken
/// analytically through the projection and the tanh features.
pub fn structural_energy(
    basis: &StructuralBasis,
    fx: &FeatureExtractor,
    x_t: &[f64],
    t: usize,
) -> EnergyReport {
    let feats = fx.extract(x_t, t);
    let g = basis
        .pca
        .project(&feats)
        .expect("extractor channels match the basis");
    let (locs, nb) = (g.rows(), g.cols());
    let k = basis.references.len();
    let denom = (locs * nb) as f64;

    // Accumulate per-reference residuals so that a state matching every
    // reference yields an exactly zero value and gradient.
    let mut value = 0.0;
    let mut residual_sum = vec![0.0; locs * nb];
    for r in &basis.references {
        let mut acc = 0.0;
        for ((a, b), s) in g.data().iter().zip(r.data()).zip(residual_sum.iter_mut()) {
            let d = a - b;
            acc += d * d;
            *s += d;
        }
        value += acc / denom;
    }
    value /= k as f64;

    // d value / d G = 2 sum_n (G - S_n) / (k * locs * nb); pull back
    // through the frozen projection and then through tanh.
    let scale = 2.0 / (k as f64 * denom);
    let mut d_feats = Matrix::zeros(locs, fx.channels());
    for loc in 0..locs {
        for ch in 0..fx.channels() {
            let mut acc = 0.0;
            for j in 0..nb {
                acc += scale * residual_sum[loc * nb + j] * basis.pca.basis().get(ch, j);
            }
            d_feats.set(loc, ch, acc);
        }
    }
    let gradient = fx.state_grad(&feats, &d_feats);
    EnergyReport { value, gradient }
}

/// Guided noise prediction: baseline epsilon plus `lambda_v` times the
/// structural energy gradient. `lambda_v = 0` returns the baseline
/// bit-for-bit.
#[allow(clippy::too_many_arguments)]
pub fn guided_epsilon(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    basis: &StructuralBasis,
    fx: &FeatureExtractor,
    x_t: &[f64],
    t: usize,
    cond: Condition,
    lambda_v: f64,
) -> Result<Vec<f64>> {
    if !(lambda_v >= 0.0) {
        return Err(invalid("lambda_v must be non-negative"));
    }
    let mut eps = prior.epsilon_pred(schedule, x_t, t, cond)?;
    if lambda_v == 0.0 {
        return Ok(eps);
    }
    let report = structural_energy(basis, fx, x_t, t);
    for (e, g) in eps.iter_mut().zip(report.gradient) {
        *e += lambda_v * g;
    }
    Ok(eps)
}

fn guided_chain(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    bank: &BasisBank,
    fx: &FeatureExtractor,
    cond: Condition,
    seed: u64,
    chain: u64,
    lambda_v: f64,
    kind: StepKind,
) -> Vec<f64> {
    let mut rng = stream_rng(seed, chain);
    sampler::reverse_chain(schedule, prior.dim(), kind, &mut rng, |x, t| {
        let mut eps = prior
            .epsilon_pred(schedule, x, t, cond)
            .expect("validated condition and in-range t");
        if lambda_v > 0.0 {
            let report = structural_energy(bank.nearest(t), fx, x, t);
            for (e, g) in eps.iter_mut().zip(report.gradient) {
                *e += lambda_v * g;
            }
        }
        eps
    })
}

/// Draw `n` reverse-chain samples with structural guidance applied at every
/// step. RNG consumption matches [`crate::sampler::sample_with`], so
/// `lambda_v = 0` reproduces the unguided samples exactly.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample_with(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    bank: &BasisBank,
    fx: &FeatureExtractor,
    cond: Condition,
    n: usize,
    seed: u64,
    lambda_v: f64,
    kind: StepKind,
) -> Result<Vec<Vec<f64>>> {
    if !(lambda_v >= 0.0) {
        return Err(invalid("lambda_v must be non-negative"));
    }
    prior.score_noised(&vec![0.0; prior.dim()], 1.0, cond)?;
    Ok(exec::map_indexed(n, |chain| {
        guided_chain(prior, schedule, bank, fx, cond, seed, chain as u64, lambda_v, kind)
    }))
}

/// Sequential twin of [`guided_sample_with`].
#[allow(clippy::too_many_arguments)]
pub fn guided_sample_with_seq(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    bank: &BasisBank,
    fx: &FeatureExtractor,
    cond: Condition,
    n: usize,
    seed: u64,
    lambda_v: f64,
    kind: StepKind,
) -> Result<Vec<Vec<f64>>> {
    if !(lambda_v >= 0.0) {
        return Err(invalid("lambda_v must be non-negative"));
    }
    prior.score_noised(&vec![0.0; prior.dim()], 1.0, cond)?;
    Ok(exec::map_indexed_seq(n, |chain| {
        guided_chain(prior, schedule, bank, fx, cond, seed, chain as u64, lambda_v, kind)
    }))
}
