//! The hub-and-spoke training loop.
//!
//! Each optimizer step serves one (hub, spoke) pair, chosen round-robin.
//! A step draws a batch of aligned observations, embeds both sides, takes
//! the symmetric InfoNCE (optionally mixed with ℓ2 regression), clips the
//! joint gradient and applies AdamW to the spoke encoder, to the hub
//! encoder unless it is frozen, and to `log τ` when the temperature is
//! learnable.
//!
//! Batches are a pure function of `(world seed, run seed, pair, local
//! step)`, so a run resumed from a checkpoint replays exactly what an
//! uninterrupted run would have seen.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::contrastive::{self, LossOutput, TemperatureMode, TemperatureParam};
use crate::encoder::{self, EncoderArch, EncoderParams, EncoderWeights};
use crate::error::{Error, Result};
use crate::optim::{self, AdamMoments, AdamWHyper, DEFAULT_ADAM_EPS};
use crate::report::MetricsReport;
use crate::rng::{mix_seeds, Stream};
use crate::world::{self, UnlabeledPairs, WorldSpec};

fn one() -> f64 {
    1.0
}

fn tau_min() -> f64 {
    contrastive::DEFAULT_TAU_MIN
}

fn tau_max() -> f64 {
    contrastive::DEFAULT_TAU_MAX
}

/// Temperature as written in a config file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSpec {
    pub mode: TemperatureMode,
    /// Fixed value, or the initial value when learnable.
    pub value: f64,
    #[serde(default = "tau_min")]
    pub clamp_min: f64,
    #[serde(default = "tau_max")]
    pub clamp_max: f64,
}

impl TemperatureSpec {
    pub fn fixed(value: f64) -> Self {
        Self {
            mode: TemperatureMode::Fixed,
            value,
            clamp_min: tau_min(),
            clamp_max: tau_max(),
        }
    }

    pub fn learnable(init: f64) -> Self {
        Self {
            mode: TemperatureMode::Learnable,
            ..Self::fixed(init)
        }
    }

    pub fn build(&self) -> Result<TemperatureParam> {
        if !(self.value > 0.0 && self.clamp_min > 0.0 && self.clamp_min <= self.clamp_max) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} with clamp [{}, {}]",
                self.value, self.clamp_min, self.clamp_max
            )));
        }
        let mut t = match self.mode {
            TemperatureMode::Fixed => TemperatureParam::fixed(self.value),
            TemperatureMode::Learnable => TemperatureParam::learnable(self.value),
        };
        t.clamp_min = self.clamp_min;
        t.clamp_max = self.clamp_max;
        t.set_tau(self.value);
        t.validate()?;
        Ok(t)
    }
}

/// One (hub, spoke) training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub spoke: String,
    pub batch_size: usize,
    pub temperature: TemperatureSpec,
    /// Times the finite pool is cycled before reshuffling. Only meaningful
    /// with `pool_size`.
    #[serde(default = "one")]
    pub replication_factor: f64,
    /// Size of a fixed pre-generated dataset; `None` draws fresh pairs
    /// every step.
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default = "one")]
    pub infonce_weight: f64,
    #[serde(default)]
    pub l2_weight: f64,
    /// Spoke latent jitter in units of the within-class scale.
    #[serde(default)]
    pub misalignment: f64,
}

impl PairConfig {
    pub fn new(spoke: &str, batch_size: usize, temperature: TemperatureSpec) -> Self {
        Self {
            spoke: spoke.into(),
            batch_size,
            temperature,
            replication_factor: 1.0,
            pool_size: None,
            infonce_weight: 1.0,
            l2_weight: 0.0,
            misalignment: 0.0,
        }
    }
}

fn default_warmup() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub pairs: Vec<PairConfig>,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub grad_clip_norm: f64,
    /// Linear learning-rate warmup length, in epochs.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: f64,
    pub hub_frozen: bool,
    /// One temperature for every pair instead of one per pair.
    #[serde(default)]
    pub shared_temperature: bool,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.pairs.is_empty() {
            return bad("at least one training pair is required".into());
        }
        if self.steps_per_epoch == 0 {
            return bad("steps_per_epoch must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning_rate must be positive, weight_decay non-negative".into());
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0) {
            return bad("warmup_epochs must be non-negative".into());
        }
        for p in &self.pairs {
            if p.batch_size == 0 {
                return bad(format!("{}: batch_size must be positive", p.spoke));
            }
            if !(p.replication_factor >= 1.0) {
                return bad(format!("{}: replication_factor must be >= 1", p.spoke));
            }
            if p.pool_size == Some(0) {
                return bad(format!("{}: pool_size must be positive", p.spoke));
            }
            if !(p.infonce_weight >= 0.0 && p.l2_weight >= 0.0)
                || p.infonce_weight + p.l2_weight == 0.0
            {
                return bad(format!("{}: loss weights must be non-negative, not both zero", p.spoke));
            }
            p.temperature.build()?;
        }
        Ok(())
    }

    fn temperature_slot(&self, pair: usize) -> usize {
        if self.shared_temperature {
            0
        } else {
            pair
        }
    }
}

/// AdamW moments of a learnable `log τ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarMoments {
    pub m: f64,
    pub v: f64,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub pair: String,
    pub loss: f64,
    pub tau: f64,
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub encoders: BTreeMap<String, EncoderParams>,
    pub moments: BTreeMap<String, AdamMoments>,
    pub temperatures: Vec<TemperatureParam>,
    pub tau_moments: Vec<ScalarMoments>,
    pub step: u64,
    pub history: Vec<StepRecord>,
    /// `(hub, spoke)` pairs that were trained directly.
    pub trained_pairs: Vec<(String, String)>,
}

impl TrainState {
    /// Fresh encoders for every modality in `archs`, seeded from the run
    /// seed and the modality name.
    pub fn initialize(
        world: &WorldSpec,
        archs: &BTreeMap<String, EncoderArch>,
        config: &TrainConfig,
    ) -> Result<TrainState> {
        config.validate()?;
        validate_archs(world, archs, config)?;
        let mut encoders = BTreeMap::new();
        let mut moments = BTreeMap::new();
        for (name, arch) in archs {
            let seed = Stream::new(config.seed, &format!("init/{name}")).next_u64();
            let mut params = encoder::init_encoder(arch, seed)?;
            params.frozen = world.is_hub(name) && config.hub_frozen;
            moments.insert(name.clone(), AdamMoments::zeros_like(&params.weights));
            encoders.insert(name.clone(), params);
        }
        let slots = if config.shared_temperature { 1 } else { config.pairs.len() };
        let temperatures = (0..slots)
            .map(|i| config.pairs[i].temperature.build())
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainState {
            encoders,
            moments,
            tau_moments: alloc::vec![ScalarMoments::default(); slots],
            temperatures,
            step: 0,
            history: Vec::new(),
            trained_pairs: config
                .pairs
                .iter()
                .map(|p| (world.hub.clone(), p.spoke.clone()))
                .collect(),
        })
    }

    pub fn encoder(&self, name: &str) -> Result<&EncoderParams> {
        self.encoders
            .get(name)
            .ok_or_else(|| Error::UnknownModality(name.into()))
    }

    /// Whether `a` and `b` were ever trained against each other.
    pub fn trained_together(&self, a: &str, b: &str) -> bool {
        self.trained_pairs
            .iter()
            .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    /// Replaces an encoder, e.g. to plug in a pretrained hub.
    pub fn set_encoder(&mut self, name: &str, params: EncoderParams) -> Result<()> {
        let slot = self
            .encoders
            .get(name)
            .ok_or_else(|| Error::UnknownModality(name.into()))?;
        if slot.arch.input_dim != params.arch.input_dim || slot.arch.embed_dim != params.arch.embed_dim {
            return Err(Error::Shape(format!(
                "{name}: replacement encoder maps {}→{}, expected {}→{}",
                params.arch.input_dim, params.arch.embed_dim, slot.arch.input_dim, slot.arch.embed_dim
            )));
        }
        params.validate()?;
        self.moments
            .insert(name.into(), AdamMoments::zeros_like(&params.weights));
        self.encoders.insert(name.into(), params);
        Ok(())
    }

    /// Mean loss per pair per epoch, epochs in order.
    pub fn epoch_means(&self, steps_per_epoch: usize) -> BTreeMap<String, Vec<f64>> {
        let mut sums: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
        for r in &self.history {
            let e = (r.step / steps_per_epoch as u64) as usize;
            let v = sums.entry(r.pair.clone()).or_default();
            if v.len() <= e {
                v.resize(e + 1, (0.0, 0));
            }
            v[e].0 += r.loss;
            v[e].1 += 1;
        }
        sums.into_iter()
            .map(|(k, v)| {
                let means = v
                    .into_iter()
                    .filter(|(_, n)| *n > 0)
                    .map(|(s, n)| s / n as f64)
                    .collect();
                (k, means)
            })
            .collect()
    }
}

fn validate_archs(
    world: &WorldSpec,
    archs: &BTreeMap<String, EncoderArch>,
    config: &TrainConfig,
) -> Result<()> {
    if !archs.contains_key(&world.hub) {
        return Err(Error::InvalidArgument(format!("no encoder for hub `{}`", world.hub)));
    }
    for p in &config.pairs {
        if world.is_hub(&p.spoke) {
            return Err(Error::InvalidArgument(format!("pair spoke `{}` is the hub", p.spoke)));
        }
        world.modality(&p.spoke)?;
        if !archs.contains_key(&p.spoke) {
            return Err(Error::InvalidArgument(format!("no encoder for spoke `{}`", p.spoke)));
        }
    }
    let mut embed = None;
    for (name, arch) in archs {
        arch.validate()?;
        let obs = world.modality(name)?;
        if arch.input_dim != obs.obs_dim() {
            return Err(Error::Shape(format!(
                "{name}: encoder input {} but observations have {} features",
                arch.input_dim,
                obs.obs_dim()
            )));
        }
        match embed {
            None => embed = Some(arch.embed_dim),
            Some(d) if d != arch.embed_dim => {
                return Err(Error::Shape(format!(
                    "{name}: embed_dim {} differs from {d}",
                    arch.embed_dim
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Loss and gradients of one pair objective.
pub struct PairGradients {
    pub loss: f64,
    pub hub: EncoderWeights,
    pub spoke: EncoderWeights,
    pub grad_log_tau: f64,
}

/// `infonce_weight · symmetric InfoNCE + l2_weight · ℓ2` on one batch,
/// differentiated through both encoders.
pub fn pair_objective(
    hub: &EncoderParams,
    spoke: &EncoderParams,
    batch: &UnlabeledPairs,
    temp: &TemperatureParam,
    infonce_weight: f64,
    l2_weight: f64,
) -> Result<PairGradients> {
    let (q, hub_cache) = encoder::encode(hub, &batch.hub_obs)?;
    let (k, spoke_cache) = encoder::encode(spoke, &batch.spoke_obs)?;
    let zero = || LossOutput {
        loss: 0.0,
        grad_q: crate::Matrix::zeros(q.rows(), q.cols()),
        grad_k: crate::Matrix::zeros(k.rows(), k.cols()),
        grad_log_tau: 0.0,
    };
    let nce = if infonce_weight != 0.0 {
        contrastive::symmetric_info_nce(&q, &k, temp)?
    } else {
        zero()
    };
    let l2 = if l2_weight != 0.0 {
        contrastive::l2_regression_loss(&q, &k)?
    } else {
        zero()
    };
    let total = nce.combine(infonce_weight, &l2, l2_weight)?;
    Ok(PairGradients {
        loss: total.loss,
        hub: encoder::encode_backward(hub, &hub_cache, &total.grad_q)?,
        spoke: encoder::encode_backward(spoke, &spoke_cache, &total.grad_k)?,
        grad_log_tau: total.grad_log_tau,
    })
}

/// A finite training set cycled `replication_factor` times per shuffle.
struct Pool {
    pairs: UnlabeledPairs,
    cycle_len: usize,
}

/// Drives [`TrainState`] forward one step at a time.
pub struct Trainer<'a> {
    world: &'a WorldSpec,
    config: &'a TrainConfig,
    state: TrainState,
    run_seed: u64,
    pools: Vec<Option<Pool>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        world: &'a WorldSpec,
        archs: &BTreeMap<String, EncoderArch>,
        config: &'a TrainConfig,
    ) -> Result<Self> {
        let state = TrainState::initialize(world, archs, config)?;
        Self::resume(world, config, state)
    }

    /// Continues from a saved or hand-modified state. Pairs in `config`
    /// that the state has not trained yet are added to its registry.
    pub fn resume(world: &'a WorldSpec, config: &'a TrainConfig, mut state: TrainState) -> Result<Self> {
        config.validate()?;
        let archs: BTreeMap<String, EncoderArch> = state
            .encoders
            .iter()
            .map(|(k, v)| (k.clone(), v.arch.clone()))
            .collect();
        validate_archs(world, &archs, config)?;
        let slots = if config.shared_temperature { 1 } else { config.pairs.len() };
        if state.temperatures.len() != slots || state.tau_moments.len() != slots {
            return Err(Error::InvalidArgument(
                "state temperatures do not match the pair configuration".into(),
            ));
        }
        for (name, params) in &state.encoders {
            params.validate()?;
            let m = state
                .moments
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("no optimizer moments for `{name}`")))?;
            encoder::check_same_shape(&params.weights, &m.m)?;
            encoder::check_same_shape(&params.weights, &m.v)?;
        }
        for p in &config.pairs {
            if !state.trained_together(&world.hub, &p.spoke) {
                state.trained_pairs.push((world.hub.clone(), p.spoke.clone()));
            }
        }
        let run_seed = mix_seeds(world.seed, config.seed);
        let pools = config
            .pairs
            .iter()
            .map(|p| {
                p.pool_size
                    .map(|size| -> Result<Pool> {
                        let mut s = Stream::new(run_seed, &format!("train/{}/pool", p.spoke));
                        let batch =
                            world::sample_pair_batch_with(world, &p.spoke, size, p.misalignment, &mut s)?;
                        let cycle_len = libm::round(size as f64 * p.replication_factor) as usize;
                        Ok(Pool {
                            pairs: batch.into_unlabeled(),
                            cycle_len: cycle_len.max(size),
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            world,
            config,
            state,
            run_seed,
            pools,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps()
    }

    fn learning_rate(&self, step: u64) -> f64 {
        let warmup = self.config.warmup_epochs * self.config.steps_per_epoch as f64;
        if warmup <= 0.0 {
            return self.config.learning_rate;
        }
        self.config.learning_rate * ((step + 1) as f64 / warmup).min(1.0)
    }

    fn batch(&self, pair: usize, local_step: u64) -> Result<UnlabeledPairs> {
        let p = &self.config.pairs[pair];
        match &self.pools[pair] {
            None => {
                let mut s = Stream::new(self.run_seed, &format!("train/{}/step/{local_step}", p.spoke));
                Ok(world::sample_pair_batch_with(self.world, &p.spoke, p.batch_size, p.misalignment, &mut s)?
                    .into_unlabeled())
            }
            Some(pool) => {
                let size = pool.pairs.len();
                let start = local_step as usize * p.batch_size;
                let mut idx = Vec::with_capacity(p.batch_size);
                let mut cached: Option<(usize, Vec<usize>)> = None;
                for pos in start..start + p.batch_size {
                    let cycle = pos / pool.cycle_len;
                    if cached.as_ref().map(|c| c.0) != Some(cycle) {
                        let mut order: Vec<usize> = (0..pool.cycle_len).map(|i| i % size).collect();
                        Stream::new(self.run_seed, &format!("train/{}/cycle/{cycle}", p.spoke))
                            .shuffle(&mut order);
                        cached = Some((cycle, order));
                    }
                    idx.push(cached.as_ref().unwrap().1[pos % pool.cycle_len]);
                }
                Ok(pool.pairs.select(&idx))
            }
        }
    }

    /// Executes one optimizer step.
    pub fn step(&mut self) -> Result<&StepRecord> {
        let t = self.state.step;
        let num_pairs = self.config.pairs.len() as u64;
        let pair = (t % num_pairs) as usize;
        let local_step = t / num_pairs;
        let pc = &self.config.pairs[pair];
        let slot = self.config.temperature_slot(pair);
        let batch = self.batch(pair, local_step)?;
        let hub_name = self.world.hub.clone();
        let temp = self.state.temperatures[slot];

        let mut grads = pair_objective(
            self.state.encoder(&hub_name)?,
            self.state.encoder(&pc.spoke)?,
            &batch,
            &temp,
            pc.infonce_weight,
            pc.l2_weight,
        )
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::Divergence {
                step: t,
                pair: pc.spoke.clone(),
            },
            e => e,
        })?;
        if !grads.loss.is_finite() {
            return Err(Error::Divergence {
                step: t,
                pair: pc.spoke.clone(),
            });
        }

        let hub_trainable = !self.state.encoders[&hub_name].frozen;
        let spoke_trainable = !self.state.encoders[&pc.spoke].frozen;
        let mut tau_grad = [grads.grad_log_tau];
        {
            let mut slices: Vec<&mut [f64]> = Vec::new();
            if hub_trainable {
                slices.extend(grads.hub.blocks_mut().into_iter().map(|b| b.values));
            }
            if spoke_trainable {
                slices.extend(grads.spoke.blocks_mut().into_iter().map(|b| b.values));
            }
            if temp.is_learnable() {
                slices.push(&mut tau_grad);
            }
            optim::clip_global_norm(&mut slices, self.config.grad_clip_norm)?;
        }

        let hp = AdamWHyper {
            lr: self.learning_rate(t),
            beta1: self.config.betas[0],
            beta2: self.config.betas[1],
            eps: DEFAULT_ADAM_EPS,
            weight_decay: self.config.weight_decay,
        };
        let diverged = |_| Error::Divergence {
            step: t,
            pair: pc.spoke.clone(),
        };
        for (name, g, trainable) in [(&hub_name, &grads.hub, hub_trainable), (&pc.spoke, &grads.spoke, spoke_trainable)] {
            if trainable {
                let params = self.state.encoders.get_mut(name).expect("validated");
                let moments = self.state.moments.get_mut(name).expect("validated");
                optim::adamw_encoder(&mut params.weights, g, moments, &hp).map_err(diverged)?;
            }
        }
        if temp.is_learnable() {
            let tm = &mut self.state.tau_moments[slot];
            tm.updates += 1;
            let tau_hp = AdamWHyper { weight_decay: 0.0, ..hp };
            let mut log_tau = [temp.log_tau];
            let (mut m, mut v) = ([tm.m], [tm.v]);
            optim::adamw_step(&mut log_tau, &tau_grad, &mut m, &mut v, &tau_hp, tm.updates, false)
                .map_err(diverged)?;
            tm.m = m[0];
            tm.v = v[0];
            self.state.temperatures[slot].set_log_tau(log_tau[0]);
        }

        self.state.history.push(StepRecord {
            step: t,
            pair: pc.spoke.clone(),
            loss: grads.loss,
            tau: temp.tau(),
        });
        self.state.step += 1;
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// Steps until `total` steps have been executed in this run.
    pub fn run_until(&mut self, total: u64) -> Result<()> {
        while self.state.step < total {
            self.step()?;
        }
        Ok(())
    }

    /// Runs to the configured number of epochs.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.total_steps())
    }
}

/// Summary metrics of a finished (or partial) run.
pub fn training_report(state: &TrainState, config: &TrainConfig) -> Result<MetricsReport> {
    let mut report = MetricsReport::new(config.seed);
    report.insert("train/steps", state.step as f64)?;
    let epochs = state.epoch_means(config.steps_per_epoch);
    for (i, p) in config.pairs.iter().enumerate() {
        let prefix = format!("train/{}", p.spoke);
        let losses: Vec<f64> = state
            .history
            .iter()
            .filter(|r| r.pair == p.spoke)
            .map(|r| r.loss)
            .collect();
        if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
            report.insert(format!("{prefix}/loss_first"), *first)?;
            report.insert(format!("{prefix}/loss_last"), *last)?;
        }
        if let Some(e) = epochs.get(&p.spoke) {
            if let (Some(first), Some(last)) = (e.first(), e.last()) {
                report.insert(format!("{prefix}/epoch_mean_first"), *first)?;
                report.insert(format!("{prefix}/epoch_mean_last"), *last)?;
            }
        }
        let tau = state.temperatures[config.temperature_slot(i)].tau();
        report.insert(format!("{prefix}/tau_final"), tau)?;
    }
    report.flag("train/hub_frozen", config.hub_frozen);
    Ok(report)
}

/// Trains from scratch to completion.
pub fn train_run(
    world: &WorldSpec,
    archs: &BTreeMap<String, EncoderArch>,
    config: &TrainConfig,
) -> Result<(TrainState, MetricsReport)> {
    let mut trainer = Trainer::new(world, archs, config)?;
    trainer.run()?;
    let state = trainer.into_state();
    let report = training_report(&state, config)?;
    Ok((state, report))
}
