//! On-disk formats. Every artifact carries the hash of the config that
//! produced it, and none carries a timestamp, so equal configs and seeds
//! give byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bind_core::encoder::EncoderArch;
use bind_core::trainer::{StepRecord, TrainState};
use bind_core::world::WorldSpec;
use bind_core::MetricsReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{BindError, Result};

pub const WORLD_FORMAT: &str = "bind-world";
pub const CHECKPOINT_FORMAT: &str = "bind-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| BindError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| BindError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| BindError::io(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| BindError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| BindError::io(path, format!("corrupt file: {e}")))
}

fn check_header(path: &Path, format: &str, version: u32, want_format: &str) -> Result<()> {
    if format != want_format {
        return Err(BindError::io(path, format!("expected a {want_format} file, found {format}")));
    }
    if version != FORMAT_VERSION {
        return Err(BindError::io(
            path,
            format!("format version {version} is not supported (expected {FORMAT_VERSION})"),
        ));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

fn read_versioned<T: DeserializeOwned>(path: &Path, want: &str) -> Result<T> {
    let value: serde_json::Value = read_json(path)?;
    let header = Header {
        format: value["format"].as_str().unwrap_or("unknown").to_string(),
        version: value["version"].as_u64().unwrap_or(0) as u32,
    };
    check_header(path, &header.format, header.version, want)?;
    serde_json::from_value(value).map_err(|e| BindError::io(path, format!("corrupt file: {e}")))
}

/// A generated world, as written by `bind worldgen`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub world: WorldSpec,
}

impl WorldFile {
    pub fn new(world: WorldSpec, config_hash: String) -> Self {
        Self {
            format: WORLD_FORMAT.into(),
            version: FORMAT_VERSION,
            config_hash,
            world,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_versioned(path, WORLD_FORMAT)
    }
}

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub world: WorldSpec,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, world: WorldSpec, state: TrainState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: FORMAT_VERSION,
            config_hash: config.hash(),
            config,
            world,
            state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Reads a checkpoint and checks that its parts agree with each other.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = read_versioned(path, CHECKPOINT_FORMAT)?;
        if ckpt.config.hash() != ckpt.config_hash {
            return Err(BindError::io(path, "corrupt file: config hash mismatch"));
        }
        ckpt.expect_archs(&ckpt.config.archs)
            .map_err(|e| BindError::io(path, e))?;
        for (name, params) in &ckpt.state.encoders {
            params
                .validate()
                .map_err(|e| BindError::io(path, format!("encoder `{name}`: {e}")))?;
        }
        Ok(ckpt)
    }

    /// Fails unless every encoder in the state has exactly `archs`.
    pub fn expect_archs(&self, archs: &BTreeMap<String, EncoderArch>) -> Result<()> {
        let found: BTreeMap<&String, &EncoderArch> =
            self.state.encoders.iter().map(|(k, v)| (k, &v.arch)).collect();
        let want: BTreeMap<&String, &EncoderArch> = archs.iter().collect();
        if found != want {
            return Err(BindError::Config(format!(
                "checkpoint architectures {found:?} do not match {want:?}"
            )));
        }
        Ok(())
    }
}

/// `step,pair,loss,tau` rows.
pub fn training_log_csv(history: &[StepRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "pair", "loss", "tau"])
        .map_err(|e| BindError::Numeric(e.to_string()))?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.pair.clone(),
            r.loss.to_string(),
            r.tau.to_string(),
        ])
        .map_err(|e| BindError::Numeric(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| BindError::Numeric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Run provenance, written next to every training output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub world_seed: u64,
    pub code_version: String,
    pub files: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig, files: Vec<String>) -> Self {
        Self {
            command: command.into(),
            config_hash: config.hash(),
            seed: config.seed,
            world_seed: config.world_seed(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            files,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn report_json(report: &MetricsReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports hold finite numbers");
    s.push('\n');
    s
}

/// One `(metric, value)` row per metric, flags as 0/1.
pub fn report_csv(report: &MetricsReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| BindError::Numeric(e.to_string());
    w.write_record(["metric", "value"]).map_err(err)?;
    w.write_record(["config_hash", report.config_hash.as_str()]).map_err(err)?;
    w.write_record(["seed", &report.seed.to_string()]).map_err(err)?;
    for (k, v) in &report.metrics {
        w.write_record([k.as_str(), &v.to_string()]).map_err(err)?;
    }
    for (k, v) in &report.flags {
        w.write_record([k.as_str(), if *v { "1" } else { "0" }]).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| BindError::Numeric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn save_report(dir: &Path, stem: &str, report: &MetricsReport) -> Result<Vec<PathBuf>> {
    let json = dir.join(format!("{stem}.json"));
    let csv = dir.join(format!("{stem}.csv"));
    write_text(&json, &report_json(report))?;
    write_text(&csv, &report_csv(report)?)?;
    Ok(vec![json, csv])
}

#[cfg(test)]
mod tests {
    use super::*;
    use bind_core::trainer::TrainState;

    fn tiny() -> (ExperimentConfig, WorldSpec, TrainState) {
        let mut cfg = ExperimentConfig::desk();
        cfg.train.epochs = 1;
        cfg.train.steps_per_epoch = 4;
        let world = cfg.build_world().unwrap();
        let (state, _) =
            bind_core::trainer::train_run(&world, &cfg.archs, &cfg.train_config()).unwrap();
        (cfg, world, state)
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, world, state) = tiny();
        let path = dir.path().join("ckpt.json");
        let ckpt = Checkpoint::new(cfg, world, state);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let again = dir.path().join("again.json");
        back.save(&again).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn checkpoint_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, world, state) = tiny();
        let ckpt = Checkpoint::new(cfg.clone(), world, state);

        let path = dir.path().join("v.json");
        let mut v = serde_json::to_value(&ckpt).unwrap();
        v["version"] = serde_json::json!(99);
        write_text(&path, &v.to_string()).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");

        let path = dir.path().join("c.json");
        let text = serde_json::to_string(&ckpt).unwrap();
        write_text(&path, &text[..text.len() / 2]).unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains("corrupt"));

        let mut archs = cfg.archs.clone();
        archs.get_mut("M1").unwrap().hidden_widths = vec![8];
        assert!(ckpt.expect_archs(&archs).is_err());
        assert!(ckpt.expect_archs(&cfg.archs).is_ok());

        let path = dir.path().join("a.json");
        let mut v = serde_json::to_value(&ckpt).unwrap();
        v["state"]["encoders"]["M1"]["arch"]["hidden_widths"] = serde_json::json!([8]);
        write_text(&path, &v.to_string()).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn world_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::desk();
        let wf = WorldFile::new(cfg.build_world().unwrap(), cfg.hash());
        let path = dir.path().join("world.json");
        wf.save(&path).unwrap();
        assert_eq!(WorldFile::load(&path).unwrap(), wf);
        assert!(Checkpoint::load(&path).unwrap_err().to_string().contains(CHECKPOINT_FORMAT));
    }

    #[test]
    fn csv_outputs_parse() {
        let (_, _, state) = tiny();
        let log = training_log_csv(&state.history).unwrap();
        let mut r = csv::Reader::from_reader(log.as_bytes());
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        assert_eq!(&rows[1][1], "M1");
        let loss: f64 = rows[0][2].parse().unwrap();
        assert_eq!(loss, state.history[0].loss);

        let mut report = MetricsReport::new(3);
        report.insert("a", 0.25).unwrap();
        report.flag("b", true);
        let text = report_csv(&report).unwrap();
        assert!(text.contains("a,0.25\n") && text.contains("b,1\n"));
    }
}
