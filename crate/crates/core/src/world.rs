//! Seeded synthetic multimodal world.
//!
//! A world is a set of class means in a latent space plus one fixed
//! observer per modality. An observation of latent `z` in modality `m` is
//!
//! ```text
//! x = act(W_m z + V_m u + b_m) + σ_m ε,   u ~ N(0, s_m² I),  ε ~ N(0, I)
//! ```
//!
//! where `u` is a modality-private nuisance factor that no other modality
//! sees. Training pairs share `z` between the hub and one spoke; evaluation
//! sets draw fresh latents from streams in the `eval/` namespace.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Matrix};
use crate::rng::Stream;

/// Minimum class-mean separation in units of the within-class scale.
pub const SEPARATION_FACTOR: f64 = 4.0;
/// Prompt latents are drawn with this fraction of the within-class scale.
pub const PROMPT_NOISE_FRACTION: f64 = 0.25;

const MAX_SEPARATION_ATTEMPTS: usize = 16;

/// Elementwise map applied by an observer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Tanh,
    Gelu,
    Identity,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => numerics::tanh(x),
            Nonlinearity::Gelu => numerics::gelu(x),
            Nonlinearity::Identity => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModalityId {
    pub id: u32,
    pub name: String,
}

/// How one modality is generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityConfig {
    pub name: String,
    pub obs_dim: usize,
    pub nonlinearity: Nonlinearity,
    pub obs_noise_scale: f64,
    #[serde(default)]
    pub nuisance_dim: usize,
    #[serde(default)]
    pub nuisance_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub num_classes: usize,
    pub within_class_scale: f64,
    /// Per-coordinate standard deviation of the class means before any
    /// separability rescaling.
    pub class_mean_scale: f64,
    pub hub: String,
    pub modalities: Vec<ModalityConfig>,
}

impl WorldConfig {
    /// Ten classes in a 16-d latent space; hub, a low-noise text-like spoke
    /// `T`, and two sensor-like spokes `M1`, `M2`.
    pub fn desk() -> Self {
        let m = |name: &str, obs_dim, noise, nuisance_dim, nuisance_scale| ModalityConfig {
            name: name.into(),
            obs_dim,
            nonlinearity: Nonlinearity::Tanh,
            obs_noise_scale: noise,
            nuisance_dim,
            nuisance_scale,
        };
        Self {
            latent_dim: 16,
            num_classes: 10,
            within_class_scale: 0.5,
            class_mean_scale: 1.0,
            hub: "hub".into(),
            modalities: vec![
                m("hub", 32, 0.05, 4, 1.0),
                m("T", 24, 0.02, 0, 0.0),
                m("M1", 20, 0.05, 4, 1.0),
                m("M2", 16, 0.05, 4, 1.0),
            ],
        }
    }
}

/// One modality's fixed view of the latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityObserver {
    pub modality: ModalityId,
    /// `obs_dim × latent_dim`.
    pub weight: Matrix,
    /// `obs_dim × nuisance_dim`.
    pub nuisance_weight: Matrix,
    pub bias: Vec<f64>,
    pub nonlinearity: Nonlinearity,
    pub obs_noise_scale: f64,
    pub nuisance_scale: f64,
}

impl ModalityObserver {
    pub fn obs_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn name(&self) -> &str {
        &self.modality.name
    }

    /// `act(W z + V u + b)` for a single latent and nuisance draw.
    pub fn observe_clean(&self, latent: &[f64], nuisance: &[f64]) -> Vec<f64> {
        (0..self.obs_dim())
            .map(|o| {
                let pre = numerics::dot(self.weight.row(o), latent)
                    + numerics::dot(self.nuisance_weight.row(o), nuisance)
                    + self.bias[o];
                self.nonlinearity.apply(pre)
            })
            .collect()
    }

    /// Full observation: draws the nuisance factor and observation noise
    /// from `stream`.
    pub fn observe(&self, latent: &[f64], stream: &mut Stream) -> Vec<f64> {
        let nuisance: Vec<f64> = (0..self.nuisance_weight.cols())
            .map(|_| self.nuisance_scale * stream.normal())
            .collect();
        let mut x = self.observe_clean(latent, &nuisance);
        for v in &mut x {
            *v += self.obs_noise_scale * stream.normal();
        }
        x
    }
}

/// The generative ground truth of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub latent_dim: usize,
    pub num_classes: usize,
    /// `num_classes × latent_dim`.
    pub class_means: Matrix,
    pub within_class_scale: f64,
    pub hub: String,
    pub modalities: Vec<ModalityObserver>,
    pub seed: u64,
}

/// Creates a world deterministically from `(config, seed)`.
///
/// Class means are isotropic Gaussian draws, rescaled when needed so the
/// closest pair is at least `4 × within_class_scale` apart.
pub fn make_world(config: &WorldConfig, seed: u64) -> Result<WorldSpec> {
    if config.latent_dim < 2 {
        return Err(Error::InvalidArgument("latent_dim must be at least 2".into()));
    }
    if config.num_classes < 2 {
        return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
    }
    if config.modalities.len() < 2 {
        return Err(Error::InvalidArgument(
            "a world needs the hub and at least one spoke".into(),
        ));
    }
    if !(config.within_class_scale > 0.0 && config.within_class_scale.is_finite()) {
        return Err(Error::InvalidArgument(
            "within_class_scale must be positive".into(),
        ));
    }
    if !(config.class_mean_scale > 0.0 && config.class_mean_scale.is_finite()) {
        return Err(Error::InvalidArgument("class_mean_scale must be positive".into()));
    }
    let mut names: Vec<&str> = config.modalities.iter().map(|m| m.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("modality names must be unique".into()));
    }
    if !names.contains(&config.hub.as_str()) {
        return Err(Error::UnknownModality(config.hub.clone()));
    }

    let class_means = separated_means(config, seed)?;

    let mut modalities = Vec::with_capacity(config.modalities.len());
    for (id, mc) in config.modalities.iter().enumerate() {
        if mc.obs_dim == 0 {
            return Err(Error::InvalidArgument(format!("{}: obs_dim is zero", mc.name)));
        }
        if mc.obs_noise_scale < 0.0 || mc.nuisance_scale < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{}: noise scales must be non-negative",
                mc.name
            )));
        }
        let mut stream = Stream::new(seed, &format!("world/observer/{}", mc.name));
        let w_std = 1.0 / numerics::sqrt(config.latent_dim as f64);
        let weight = gaussian(mc.obs_dim, config.latent_dim, w_std, &mut stream);
        let v_std = if mc.nuisance_dim > 0 {
            1.0 / numerics::sqrt(mc.nuisance_dim as f64)
        } else {
            0.0
        };
        let nuisance_weight = gaussian(mc.obs_dim, mc.nuisance_dim, v_std, &mut stream);
        let bias = (0..mc.obs_dim).map(|_| stream.uniform(-0.5, 0.5)).collect();
        modalities.push(ModalityObserver {
            modality: ModalityId {
                id: id as u32,
                name: mc.name.clone(),
            },
            weight,
            nuisance_weight,
            bias,
            nonlinearity: mc.nonlinearity,
            obs_noise_scale: mc.obs_noise_scale,
            nuisance_scale: mc.nuisance_scale,
        });
    }

    Ok(WorldSpec {
        latent_dim: config.latent_dim,
        num_classes: config.num_classes,
        class_means,
        within_class_scale: config.within_class_scale,
        hub: config.hub.clone(),
        modalities,
        seed,
    })
}

fn gaussian(rows: usize, cols: usize, std: f64, stream: &mut Stream) -> Matrix {
    let data = (0..rows * cols).map(|_| std * stream.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("finite gaussian draws")
}

fn min_pairwise_distance(means: &Matrix) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..means.rows() {
        for j in i + 1..means.rows() {
            let d: f64 = means
                .row(i)
                .iter()
                .zip(means.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(numerics::sqrt(d));
        }
    }
    best
}

fn separated_means(config: &WorldConfig, seed: u64) -> Result<Matrix> {
    let required = SEPARATION_FACTOR * config.within_class_scale;
    let mut stream = Stream::new(seed, "world/class_means");
    for _ in 0..MAX_SEPARATION_ATTEMPTS {
        let mut means = gaussian(
            config.num_classes,
            config.latent_dim,
            config.class_mean_scale,
            &mut stream,
        );
        let dist = min_pairwise_distance(&means);
        if dist <= 1e-9 * config.class_mean_scale {
            continue;
        }
        if dist < required {
            means = means.scale(required / dist);
            // Rounding can leave the rescaled distance a hair short.
            while min_pairwise_distance(&means) < required {
                means = means.scale(1.0 + 1e-12);
            }
        }
        return Ok(means);
    }
    Err(Error::Separability(format!(
        "no draw in {MAX_SEPARATION_ATTEMPTS} attempts had distinct class means"
    )))
}

impl WorldSpec {
    pub fn modality(&self, name: &str) -> Result<&ModalityObserver> {
        self.modalities
            .iter()
            .find(|m| m.modality.name == name)
            .ok_or_else(|| Error::UnknownModality(name.into()))
    }

    pub fn hub_observer(&self) -> &ModalityObserver {
        self.modality(&self.hub).expect("hub exists by construction")
    }

    pub fn is_hub(&self, name: &str) -> bool {
        self.hub == name
    }

    pub fn spokes(&self) -> impl Iterator<Item = &ModalityObserver> {
        self.modalities.iter().filter(move |m| m.modality.name != self.hub)
    }

    /// Class of the `i`-th row of any balanced batch.
    pub fn round_robin_class(&self, i: usize) -> usize {
        i % self.num_classes
    }

    /// `mean_c + scale · N(0, I)`.
    pub fn sample_latent(&self, class: usize, scale: f64, stream: &mut Stream) -> Vec<f64> {
        self.class_means
            .row(class)
            .iter()
            .map(|&m| m + scale * stream.normal())
            .collect()
    }

    /// Nearest class mean by Euclidean distance, lowest index on ties.
    pub fn nearest_class(&self, latent: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.num_classes {
            let d: f64 = self
                .class_means
                .row(c)
                .iter()
                .zip(latent)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }
}

/// Aligned (hub, spoke) observations.
///
/// Class labels and latents are kept for evaluation and tests; training
/// code receives only an [`UnlabeledPairs`] view.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub hub_obs: Matrix,
    pub spoke_obs: Matrix,
    pub spoke: ModalityId,
    latents: Matrix,
    class_labels: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.hub_obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[usize] {
        &self.class_labels
    }

    pub fn latents(&self) -> &Matrix {
        &self.latents
    }

    /// Drops labels and latents.
    pub fn into_unlabeled(self) -> UnlabeledPairs {
        UnlabeledPairs {
            hub_obs: self.hub_obs,
            spoke_obs: self.spoke_obs,
        }
    }
}

/// What the trainer is allowed to see of a [`PairBatch`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPairs {
    pub hub_obs: Matrix,
    pub spoke_obs: Matrix,
}

impl UnlabeledPairs {
    pub fn len(&self) -> usize {
        self.hub_obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> UnlabeledPairs {
        UnlabeledPairs {
            hub_obs: self.hub_obs.select_rows(idx),
            spoke_obs: self.spoke_obs.select_rows(idx),
        }
    }
}

/// Draws `n` aligned pairs with classes assigned round-robin.
pub fn sample_pair_batch(
    world: &WorldSpec,
    spoke: &str,
    n: usize,
    stream: &mut Stream,
) -> Result<PairBatch> {
    sample_pair_batch_with(world, spoke, n, 0.0, stream)
}

/// As [`sample_pair_batch`], but the spoke observes a jittered copy of
/// each latent: `z + misalignment · within_class_scale · N(0, I)`.
/// `misalignment = 0` gives perfectly aligned pairs.
pub fn sample_pair_batch_with(
    world: &WorldSpec,
    spoke: &str,
    n: usize,
    misalignment: f64,
    stream: &mut Stream,
) -> Result<PairBatch> {
    if n == 0 {
        return Err(Error::InvalidArgument("pair batch must be non-empty".into()));
    }
    if !(misalignment >= 0.0 && misalignment.is_finite()) {
        return Err(Error::InvalidArgument(
            "misalignment must be non-negative".into(),
        ));
    }
    if world.is_hub(spoke) {
        return Err(Error::InvalidArgument(format!(
            "`{spoke}` is the hub and cannot be a spoke"
        )));
    }
    let spoke_obs_model = world.modality(spoke)?;
    let hub = world.hub_observer();

    let mut latents = Vec::with_capacity(n * world.latent_dim);
    let mut hub_rows = Vec::with_capacity(n * hub.obs_dim());
    let mut spoke_rows = Vec::with_capacity(n * spoke_obs_model.obs_dim());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = world.round_robin_class(i);
        let z = world.sample_latent(class, world.within_class_scale, stream);
        hub_rows.extend(hub.observe(&z, stream));
        let spoke_z: Vec<f64> = if misalignment > 0.0 {
            let s = misalignment * world.within_class_scale;
            z.iter().map(|&v| v + s * stream.normal()).collect()
        } else {
            z.clone()
        };
        spoke_rows.extend(spoke_obs_model.observe(&spoke_z, stream));
        latents.extend(z);
        labels.push(class);
    }
    Ok(PairBatch {
        hub_obs: Matrix::from_vec(n, hub.obs_dim(), hub_rows)?,
        spoke_obs: Matrix::from_vec(n, spoke_obs_model.obs_dim(), spoke_rows)?,
        spoke: spoke_obs_model.modality.clone(),
        latents: Matrix::from_vec(n, world.latent_dim, latents)?,
        class_labels: labels,
    })
}

/// Prompt-like observations: `P` rows per class, drawn near the class mean.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub modality: ModalityId,
    /// `(C·P) × obs_dim`, grouped by class.
    pub obs: Matrix,
    pub classes: Vec<usize>,
    pub prompts_per_class: usize,
}

/// `P` observations per class of latents drawn with a quarter of the
/// within-class spread.
pub fn class_prototypes(
    world: &WorldSpec,
    modality: &str,
    prompts_per_class: usize,
    stream: &mut Stream,
) -> Result<PromptSet> {
    if prompts_per_class == 0 {
        return Err(Error::InvalidArgument(
            "prompts_per_class must be at least 1".into(),
        ));
    }
    let observer = world.modality(modality)?;
    let scale = world.within_class_scale * PROMPT_NOISE_FRACTION;
    let rows = world.num_classes * prompts_per_class;
    let mut data = Vec::with_capacity(rows * observer.obs_dim());
    let mut classes = Vec::with_capacity(rows);
    for c in 0..world.num_classes {
        for _ in 0..prompts_per_class {
            let z = world.sample_latent(c, scale, stream);
            data.extend(observer.observe(&z, stream));
            classes.push(c);
        }
    }
    Ok(PromptSet {
        modality: observer.modality.clone(),
        obs: Matrix::from_vec(rows, observer.obs_dim(), data)?,
        classes,
        prompts_per_class,
    })
}

/// Balanced, labeled observations of one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEvalSet {
    pub modality: ModalityId,
    pub obs: Matrix,
    pub labels: Vec<usize>,
    pub latents: Matrix,
}

/// Several modalities observing the same held-out latents. Row `i` of
/// every observation matrix shares latent `i`, so row indices double as
/// item ids for cross-modal retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedEvalSet {
    pub modalities: Vec<ModalityId>,
    pub obs: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub latents: Matrix,
}

impl PairedEvalSet {
    pub fn obs_for(&self, name: &str) -> Result<&Matrix> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .map(|i| &self.obs[i])
            .ok_or_else(|| Error::UnknownModality(name.into()))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Balanced held-out set for one modality. Pass a stream from the `eval/`
/// namespace.
pub fn make_eval_set(
    world: &WorldSpec,
    modality: &str,
    n_per_class: usize,
    stream: &mut Stream,
) -> Result<LabeledEvalSet> {
    let mut paired = make_paired_eval_set(world, &[modality], n_per_class, stream)?;
    Ok(LabeledEvalSet {
        modality: paired.modalities.remove(0),
        obs: paired.obs.remove(0),
        labels: paired.labels,
        latents: paired.latents,
    })
}

/// Balanced held-out latents observed through every listed modality.
pub fn make_paired_eval_set(
    world: &WorldSpec,
    modalities: &[&str],
    n_per_class: usize,
    stream: &mut Stream,
) -> Result<PairedEvalSet> {
    if n_per_class == 0 {
        return Err(Error::InvalidArgument("n_per_class must be at least 1".into()));
    }
    let observers = modalities
        .iter()
        .map(|m| world.modality(m))
        .collect::<Result<Vec<_>>>()?;
    let n = n_per_class * world.num_classes;
    let mut latents = Vec::with_capacity(n * world.latent_dim);
    let mut labels = Vec::with_capacity(n);
    let mut rows: Vec<Vec<f64>> = observers
        .iter()
        .map(|o| Vec::with_capacity(n * o.obs_dim()))
        .collect();
    for i in 0..n {
        let class = world.round_robin_class(i);
        let z = world.sample_latent(class, world.within_class_scale, stream);
        for (obs, buf) in observers.iter().zip(rows.iter_mut()) {
            buf.extend(obs.observe(&z, stream));
        }
        latents.extend(z);
        labels.push(class);
    }
    let obs = observers
        .iter()
        .zip(rows)
        .map(|(o, buf)| Matrix::from_vec(n, o.obs_dim(), buf))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedEvalSet {
        modalities: observers.iter().map(|o| o.modality.clone()).collect(),
        obs,
        labels,
        latents: Matrix::from_vec(n, world.latent_dim, latents)?,
    })
}
