//! What each subcommand does, separated from argument parsing.

use std::path::{Path, PathBuf};

use bind_core::encoder;
use bind_core::evaluation::{self, RetrievalIndex};
use bind_core::rng::{mix_seeds, Stream};
use bind_core::trainer;
use bind_core::world::{self, PairedEvalSet, WorldSpec};
use bind_core::MetricsReport;

use crate::ablation::{self, AblationFile, CellResult};
use crate::artifacts::{self, Checkpoint, RunManifest, WorldFile};
use crate::config::ExperimentConfig;
use crate::error::{BindError, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WORLD_FILE: &str = "world.json";

/// The config at `path`, or the bundled desk config, with an optional
/// seed override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect()
}

pub fn train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let world = cfg.build_world()?;
    let (state, mut report) = trainer::train_run(&world, &cfg.archs, &cfg.train_config())?;
    report.config_hash = cfg.hash();

    let log = out.join(TRAIN_LOG_FILE);
    artifacts::write_text(&log, &artifacts::training_log_csv(&state.history)?)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    Checkpoint::new(cfg.clone(), world, state).save(&ckpt)?;
    let mut files = vec![ckpt, log];
    files.extend(artifacts::save_report(out, "train_report", &report)?);
    let manifest = out.join(MANIFEST_FILE);
    RunManifest::new("train", cfg, file_names(&files)).save(&manifest)?;
    files.push(manifest);
    Ok(files)
}

/// Runs the checkpoint's evaluation plan, or the plan of `plan_from` when
/// given. `seed` picks the evaluation streams and defaults to the run seed.
pub fn eval(
    checkpoint: &Path,
    plan_from: Option<&ExperimentConfig>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(MetricsReport, Vec<PathBuf>)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = ckpt.config.clone();
    if let Some(other) = plan_from {
        cfg.eval = other.eval.clone();
        cfg.validate()?;
    }
    let eval_seed = seed.unwrap_or(cfg.seed);
    let mut report = evaluation::run_eval_plan(&ckpt.world, &ckpt.state, &cfg.eval, eval_seed)?;
    report.config_hash = cfg.hash();
    let mut files = artifacts::save_report(out, "eval_report", &report)?;
    let manifest = out.join(MANIFEST_FILE);
    RunManifest::new("eval", &cfg, file_names(&files)).save(&manifest)?;
    files.push(manifest);
    Ok((report, files))
}

pub fn ablate(suite: &Path, out: &Path) -> Result<(Vec<CellResult>, Vec<PathBuf>)> {
    let specs = AblationFile::load(suite)?;
    let mut cells = Vec::new();
    for spec in &specs {
        cells.extend(ablation::run_suite(spec)?);
    }
    let long = out.join("ablation_long.csv");
    artifacts::write_text(&long, &ablation::long_csv(&cells)?)?;
    let rows = ablation::summarize(&cells);
    let summary = out.join("ablation_summary.csv");
    artifacts::write_text(&summary, &ablation::summary_csv(&rows)?)?;
    let mut files = vec![long, summary];
    if let Some(first) = specs.first() {
        let manifest = out.join(MANIFEST_FILE);
        RunManifest::new("ablate", &first.base, file_names(&files)).save(&manifest)?;
        files.push(manifest);
    }
    Ok((cells, files))
}

pub fn worldgen(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let path = out.join(WORLD_FILE);
    WorldFile::new(cfg.build_world()?, cfg.hash()).save(&path)?;
    Ok(path)
}

/// `modality:item` reference into the retrieval item set.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemRef {
    pub modality: String,
    pub item: usize,
}

impl std::str::FromStr for ItemRef {
    type Err = BindError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || BindError::Config(format!("`{s}`: expected MODALITY:ITEM"));
        let (m, i) = s.split_once(':').ok_or_else(bad)?;
        Ok(ItemRef {
            modality: m.trim().to_string(),
            item: i.trim().parse().map_err(|_| bad())?,
        })
    }
}

/// Parses `M1:3+M2:17`.
pub fn parse_compose(s: &str) -> Result<(ItemRef, ItemRef)> {
    let (a, b) = s
        .split_once('+')
        .ok_or_else(|| BindError::Config(format!("--compose `{s}`: expected A:I+B:J")))?;
    Ok((a.parse()?, b.parse()?))
}

/// How a retrieval query is formed.
#[derive(Clone, Debug, PartialEq)]
pub enum Query {
    Item(ItemRef),
    Compose { first: ItemRef, second: ItemRef, weight: f64 },
}

/// One aligned item per id across every modality of the world, so ids mean
/// the same thing whichever modalities are queried or indexed.
pub fn retrieval_items(world: &WorldSpec, per_class: usize, seed: u64) -> Result<PairedEvalSet> {
    let names: Vec<&str> = world.modalities.iter().map(|m| m.name()).collect();
    let mut s = Stream::new(mix_seeds(world.seed, seed), "eval/retrieve");
    Ok(world::make_paired_eval_set(world, &names, per_class, &mut s)?)
}

/// Top-`k` `(id, similarity)` from the `index` modality.
pub fn retrieve(ckpt: &Checkpoint, index: &str, query: &Query, k: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let per_class = ckpt.config.eval.retrieval_items_per_class.max(1);
    let items = retrieval_items(&ckpt.world, per_class, seed)?;
    let embed_item = |r: &ItemRef| -> Result<Vec<f64>> {
        if r.item >= items.len() {
            return Err(BindError::Config(format!(
                "item {} out of range; the item set has {} items",
                r.item,
                items.len()
            )));
        }
        let obs = items.obs_for(&r.modality)?.select_rows(&[r.item]);
        let e = encoder::embed(ckpt.state.encoder(&r.modality)?, &obs)?;
        Ok(e.row(0).to_vec())
    };
    let q = match query {
        Query::Item(r) => embed_item(r)?,
        Query::Compose { first, second, weight } => {
            evaluation::embed_arithmetic(&embed_item(first)?, &embed_item(second)?, *weight)?
        }
    };
    let emb = encoder::embed(ckpt.state.encoder(index)?, items.obs_for(index)?)?;
    let idx = RetrievalIndex::new(index, emb, (0..items.len()).collect())?;
    Ok(idx.top_k(&q, k)?)
}

/// `rank,id,similarity` lines with a header.
pub fn format_ranking(hits: &[(usize, f64)]) -> String {
    let mut s = String::from("rank,id,similarity\n");
    for (rank, (id, sim)) in hits.iter().enumerate() {
        s.push_str(&format!("{},{id},{sim}\n", rank + 1));
    }
    s
}
