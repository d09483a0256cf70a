//! Experiment configuration files.

use std::collections::BTreeMap;
use std::path::Path;

use bind_core::encoder::EncoderArch;
use bind_core::evaluation::EvalPlan;
use bind_core::trainer::TrainConfig;
use bind_core::world::{make_world, WorldConfig, WorldSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BindError, Result};

/// The desk-scale default experiment, bundled with the binary.
pub const DESK_JSON: &str = include_str!("../configs/desk.json");

/// One complete experiment: world, encoders, training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    /// Seed for the world's fixed parameters. Defaults to `seed`.
    #[serde(default)]
    pub world_seed: Option<u64>,
    pub archs: BTreeMap<String, EncoderArch>,
    pub train: TrainConfig,
    pub eval: EvalPlan,
    #[serde(default)]
    pub output_dir: Option<String>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self::from_json(DESK_JSON).expect("bundled desk config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| BindError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BindError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            BindError::Config(m) => BindError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        let world = self.build_world()?;
        let train = self.train_config();
        train.validate()?;
        for m in world.modalities.iter().map(|m| m.name()) {
            if !self.archs.contains_key(m) {
                return Err(BindError::Config(format!("archs: no encoder for modality `{m}`")));
            }
        }
        bind_core::trainer::TrainState::initialize(&world, &self.archs, &train)?;
        let plan = &self.eval;
        let known = |name: &str, field: &str| -> Result<()> {
            world
                .modality(name)
                .map(|_| ())
                .map_err(|_| BindError::Config(format!("eval.{field}: unknown modality `{name}`")))
        };
        for t in &plan.zero_shot {
            known(&t.data, "zero_shot")?;
            known(&t.prompt, "zero_shot")?;
        }
        for t in &plan.retrieval {
            known(&t.query, "retrieval")?;
            known(&t.index, "retrieval")?;
        }
        if let Some(t) = &plan.few_shot {
            known(&t.modality, "few_shot")?;
        }
        if let Some(t) = &plan.arithmetic {
            for m in [&t.first, &t.second, &t.index] {
                known(m, "arithmetic")?;
            }
        }
        if let Some(t) = &plan.ensemble {
            for m in [&t.primary, &t.secondary, &t.index] {
                known(m, "ensemble")?;
            }
        }
        let n_items = plan.retrieval_items_per_class * world.num_classes;
        if let Some(&k) = plan.ks.iter().find(|&&k| k == 0 || k > n_items) {
            return Err(BindError::Config(format!(
                "eval.ks: {k} outside 1..={n_items}"
            )));
        }
        Ok(())
    }

    pub fn world_seed(&self) -> u64 {
        self.world_seed.unwrap_or(self.seed)
    }

    pub fn build_world(&self) -> Result<WorldSpec> {
        Ok(make_world(&self.world, self.world_seed())?)
    }

    /// The training config with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Replaces the seed; the world seed follows unless set explicitly.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_matches_documented_shape() {
        let cfg = ExperimentConfig::desk();
        assert_eq!(cfg.world.num_classes, 10);
        assert_eq!(cfg.world.latent_dim, 16);
        let dims: Vec<usize> = cfg.world.modalities.iter().map(|m| m.obs_dim).collect();
        assert_eq!(dims, vec![32, 24, 20, 16]);
        assert!(cfg.archs.values().all(|a| a.embed_dim == 32 && a.hidden_widths == vec![64]));
        let spokes: Vec<&str> = cfg.train.pairs.iter().map(|p| p.spoke.as_str()).collect();
        assert_eq!(spokes, vec!["T", "M1"]);
        assert!(cfg.train.pairs.iter().all(|p| p.batch_size == 64));
        assert_eq!((cfg.train.epochs, cfg.train.steps_per_epoch), (30, 60));
    }

    #[test]
    fn unknown_and_missing_keys_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(DESK_JSON).unwrap();
        v["train"]["bogus"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");

        let mut v: serde_json::Value = serde_json::from_str(DESK_JSON).unwrap();
        v["train"].as_object_mut().unwrap().remove("epochs");
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let mut cfg = ExperimentConfig::desk();
        cfg.archs.get_mut("M1").unwrap().input_dim = 3;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        let mut cfg = ExperimentConfig::desk();
        cfg.eval.zero_shot[0].prompt = "nope".into();
        assert!(cfg.validate().unwrap_err().to_string().contains("nope"));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        assert_eq!(a.hash(), ExperimentConfig::desk().hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), a.clone().with_seed(99).hash());
        let back = ExperimentConfig::from_json(&a.canonical_json()).unwrap();
        assert_eq!(back, a);
    }
}
