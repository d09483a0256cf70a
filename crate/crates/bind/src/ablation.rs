//! One-axis-at-a-time ablation suites.

use std::collections::BTreeMap;
use std::path::Path;

use bind_core::encoder::HeadKind;
use bind_core::trainer::{self, TemperatureSpec};
use bind_core::{evaluation, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{BindError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Temperature,
    ProjectionHead,
    Epochs,
    BatchSize,
    HubCapacity,
    NoiseStrength,
    Alignment,
    LossMix,
}

impl Axis {
    pub const ALL: [Axis; 8] = [
        Axis::Temperature,
        Axis::ProjectionHead,
        Axis::Epochs,
        Axis::BatchSize,
        Axis::HubCapacity,
        Axis::NoiseStrength,
        Axis::Alignment,
        Axis::LossMix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Temperature => "temperature",
            Axis::ProjectionHead => "projection_head",
            Axis::Epochs => "epochs",
            Axis::BatchSize => "batch_size",
            Axis::HubCapacity => "hub_capacity",
            Axis::NoiseStrength => "noise_strength",
            Axis::Alignment => "alignment",
            Axis::LossMix => "loss_mix",
        }
    }

    pub fn default_grid(self) -> Vec<AxisValue> {
        use AxisValue as V;
        match self {
            Axis::Temperature => vec![
                V::Temperature(TemperatureSpec::learnable(0.07)),
                V::Temperature(TemperatureSpec::fixed(0.05)),
                V::Temperature(TemperatureSpec::fixed(0.07)),
                V::Temperature(TemperatureSpec::fixed(0.2)),
                V::Temperature(TemperatureSpec::fixed(1.0)),
            ],
            Axis::ProjectionHead => vec![V::Head(HeadKind::Linear), V::Head(HeadKind::Mlp)],
            Axis::Epochs => vec![V::Count(10), V::Count(20), V::Count(30)],
            Axis::BatchSize => vec![V::Count(8), V::Count(64), V::Count(256)],
            Axis::HubCapacity => vec![V::Count(16), V::Count(64), V::Count(256)],
            Axis::NoiseStrength => vec![V::Real(0.05), V::Real(0.2), V::Real(0.5)],
            Axis::Alignment => vec![V::Real(0.0), V::Real(0.5), V::Real(1.0)],
            Axis::LossMix => vec![
                V::Mix { infonce: 1.0, l2: 0.0 },
                V::Mix { infonce: 1.0, l2: 1.0 },
                V::Mix { infonce: 0.0, l2: 1.0 },
            ],
        }
    }
}

/// One grid point. Which variant is valid depends on the axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Count(usize),
    Real(f64),
    Head(HeadKind),
    Temperature(TemperatureSpec),
    Mix { infonce: f64, l2: f64 },
}

impl AxisValue {
    pub fn label(&self) -> String {
        match self {
            AxisValue::Count(n) => n.to_string(),
            AxisValue::Real(x) => x.to_string(),
            AxisValue::Head(HeadKind::Linear) => "linear".into(),
            AxisValue::Head(HeadKind::Mlp) => "mlp".into(),
            AxisValue::Temperature(t) if t.mode == bind_core::contrastive::TemperatureMode::Learnable => {
                format!("learnable({})", t.value)
            }
            AxisValue::Temperature(t) => t.value.to_string(),
            AxisValue::Mix { infonce, l2 } => format!("infonce={infonce};l2={l2}"),
        }
    }

    fn real(&self) -> Option<f64> {
        match *self {
            AxisValue::Real(x) => Some(x),
            AxisValue::Count(n) => Some(n as f64),
            _ => None,
        }
    }

    /// `base` with this value applied along `axis`.
    pub fn apply(&self, axis: Axis, base: &ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let wrong = || {
            BindError::Config(format!(
                "grid value {} is not valid on axis {}",
                serde_json::to_string(self).unwrap_or_default(),
                axis.name()
            ))
        };
        match (axis, self) {
            (Axis::Temperature, AxisValue::Temperature(t)) => {
                cfg.train.pairs.iter_mut().for_each(|p| p.temperature = *t)
            }
            (Axis::Temperature, v) => {
                let t = TemperatureSpec::fixed(v.real().ok_or_else(wrong)?);
                cfg.train.pairs.iter_mut().for_each(|p| p.temperature = t)
            }
            (Axis::ProjectionHead, AxisValue::Head(h)) => {
                cfg.archs.values_mut().for_each(|a| a.head = *h)
            }
            (Axis::Epochs, AxisValue::Count(n)) => cfg.train.epochs = *n,
            (Axis::BatchSize, AxisValue::Count(n)) => {
                cfg.train.pairs.iter_mut().for_each(|p| p.batch_size = *n)
            }
            (Axis::HubCapacity, AxisValue::Count(n)) => {
                let hub = cfg.world.hub.clone();
                let arch = cfg
                    .archs
                    .get_mut(&hub)
                    .ok_or_else(|| BindError::Config(format!("no arch for hub `{hub}`")))?;
                arch.hidden_widths.iter_mut().for_each(|w| *w = *n);
            }
            (Axis::NoiseStrength, v) => {
                let x = v.real().ok_or_else(wrong)?;
                let hub = cfg.world.hub.clone();
                cfg.world
                    .modalities
                    .iter_mut()
                    .filter(|m| m.name == hub)
                    .for_each(|m| m.obs_noise_scale = x);
            }
            (Axis::Alignment, v) => {
                let x = v.real().ok_or_else(wrong)?;
                cfg.train.pairs.iter_mut().for_each(|p| p.misalignment = x)
            }
            (Axis::LossMix, AxisValue::Mix { infonce, l2 }) => {
                cfg.train.pairs.iter_mut().for_each(|p| {
                    p.infonce_weight = *infonce;
                    p.l2_weight = *l2;
                })
            }
            _ => return Err(wrong()),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The base config, given inline or as a path relative to the suite file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaseConfig {
    Path(String),
    Inline(Box<ExperimentConfig>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisGrid {
    pub axis: Axis,
    /// Defaults to the axis's standard grid.
    #[serde(default)]
    pub grid: Option<Vec<AxisValue>>,
}

/// A suite file: a base experiment, seeds, and the axes to sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFile {
    pub base: BaseConfig,
    pub seeds: Vec<u64>,
    pub axes: Vec<AxisGrid>,
}

/// One axis to sweep over a base config.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSuiteSpec {
    pub axis: Axis,
    pub grid: Vec<AxisValue>,
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
}

impl AblationSuiteSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(BindError::Config(format!("{}: grid is empty", self.axis.name())));
        }
        if self.seeds.is_empty() {
            return Err(BindError::Config("seeds: at least one seed is required".into()));
        }
        Ok(())
    }
}

impl AblationFile {
    pub fn load(path: &Path) -> Result<Vec<AblationSuiteSpec>> {
        let text = std::fs::read_to_string(path).map_err(|e| BindError::io(path, e))?;
        let file: AblationFile = serde_json::from_str(&text)
            .map_err(|e| BindError::Config(format!("{}: {e}", path.display())))?;
        let base = match file.base {
            BaseConfig::Inline(cfg) => {
                cfg.validate()?;
                *cfg
            }
            BaseConfig::Path(p) if p == "desk" => ExperimentConfig::desk(),
            BaseConfig::Path(p) => {
                let dir = path.parent().unwrap_or(Path::new("."));
                ExperimentConfig::load(&dir.join(p))?
            }
        };
        file.axes
            .into_iter()
            .map(|a| {
                let spec = AblationSuiteSpec {
                    axis: a.axis,
                    grid: a.grid.unwrap_or_else(|| a.axis.default_grid()),
                    base: base.clone(),
                    seeds: file.seeds.clone(),
                };
                spec.validate()?;
                Ok(spec)
            })
            .collect()
    }
}

/// Outcome of one (grid value, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub axis: Axis,
    pub value: String,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// Trains and evaluates one cell.
pub fn run_cell(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    let world = cfg.build_world()?;
    let train = cfg.train_config();
    let (state, train_report) = trainer::train_run(&world, &cfg.archs, &train)?;
    let mut report = evaluation::run_eval_plan(&world, &state, &cfg.eval, cfg.seed)?;
    for (k, v) in train_report.metrics {
        report.metrics.insert(k, v);
    }
    report.config_hash = cfg.hash();
    Ok(report)
}

/// Runs every cell of `spec`. A failing cell is recorded, not fatal.
pub fn run_suite(spec: &AblationSuiteSpec) -> Result<Vec<CellResult>> {
    spec.validate()?;
    let mut out = Vec::new();
    for value in &spec.grid {
        for &seed in &spec.seeds {
            let outcome = value
                .apply(spec.axis, &spec.base.clone().with_seed(seed))
                .and_then(|cfg| run_cell(&cfg))
                .map_err(|e| e.to_string());
            out.push(CellResult {
                axis: spec.axis,
                value: value.label(),
                seed,
                outcome,
            });
        }
    }
    Ok(out)
}

/// Long format: `axis,value,seed,status,metric,value`. A failed cell
/// contributes one row with the error in the metric column.
pub fn long_csv(cells: &[CellResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| BindError::Numeric(e.to_string());
    w.write_record(["axis", "value", "seed", "status", "metric", "metric_value"])
        .map_err(err)?;
    for c in cells {
        let seed = c.seed.to_string();
        match &c.outcome {
            Ok(report) => {
                for (k, v) in &report.metrics {
                    w.write_record([c.axis.name(), &c.value, &seed, "ok", k, &v.to_string()])
                        .map_err(err)?;
                }
            }
            Err(e) => {
                w.write_record([c.axis.name(), &c.value, &seed, "failed", e, ""])
                    .map_err(err)?;
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| BindError::Numeric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Seed-mean of one metric at one grid value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis: Axis,
    pub value: String,
    pub metric: String,
    pub mean: f64,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
}

fn value_key(value: &str) -> (u8, f64, String) {
    match value.parse::<f64>() {
        Ok(x) => (0, x, String::new()),
        Err(_) => (1, 0.0, value.to_string()),
    }
}

/// Seed-averaged summary, keyed by (axis, value, metric) so the order of
/// cells does not matter. Numeric values sort numerically.
pub fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut value_order: Vec<(Axis, String)> = Vec::new();
    let mut sums: BTreeMap<(Axis, String, String), (f64, usize)> = BTreeMap::new();
    let mut failures: BTreeMap<(Axis, String), usize> = BTreeMap::new();
    for c in cells {
        let key = (c.axis, c.value.clone());
        if !value_order.contains(&key) {
            value_order.push(key.clone());
        }
        match &c.outcome {
            Ok(r) => {
                for (m, v) in &r.metrics {
                    let e = sums.entry((c.axis, c.value.clone(), m.clone())).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
            }
            Err(_) => *failures.entry(key).or_default() += 1,
        }
    }
    value_order.sort_by(|a, b| {
        let (ka, kb) = (value_key(&a.1), value_key(&b.1));
        a.0.cmp(&b.0)
            .then(ka.0.cmp(&kb.0))
            .then(ka.1.total_cmp(&kb.1))
            .then(ka.2.cmp(&kb.2))
    });
    let mut rows = Vec::new();
    for (axis, value) in value_order {
        let failed = failures.get(&(axis, value.clone())).copied().unwrap_or(0);
        let mut any = false;
        for ((a, v, m), (sum, n)) in &sums {
            if *a == axis && *v == value {
                any = true;
                rows.push(SummaryRow {
                    axis,
                    value: value.clone(),
                    metric: m.clone(),
                    mean: sum / *n as f64,
                    seeds_ok: *n,
                    seeds_failed: failed,
                });
            }
        }
        if !any {
            rows.push(SummaryRow {
                axis,
                value,
                metric: String::new(),
                mean: f64::NAN,
                seeds_ok: 0,
                seeds_failed: failed,
            });
        }
    }
    rows
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| BindError::Numeric(e.to_string());
    w.write_record(["axis", "value", "metric", "mean", "seeds_ok", "seeds_failed"])
        .map_err(err)?;
    for r in rows {
        let mean = if r.mean.is_finite() { r.mean.to_string() } else { String::new() };
        w.write_record([
            r.axis.name(),
            &r.value,
            &r.metric,
            &mean,
            &r.seeds_ok.to_string(),
            &r.seeds_failed.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| BindError::Numeric(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids_cover_required_values() {
        let labels: Vec<String> = Axis::Temperature.default_grid().iter().map(|v| v.label()).collect();
        assert_eq!(labels, ["learnable(0.07)", "0.05", "0.07", "0.2", "1"]);
        let heads: Vec<String> = Axis::ProjectionHead.default_grid().iter().map(|v| v.label()).collect();
        assert_eq!(heads, ["linear", "mlp"]);
        for (axis, want) in [(Axis::BatchSize, ["8", "64", "256"]), (Axis::HubCapacity, ["16", "64", "256"])] {
            let got: Vec<String> = axis.default_grid().iter().map(|v| v.label()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn apply_changes_only_its_axis() {
        let base = ExperimentConfig::desk();
        for axis in Axis::ALL {
            for v in axis.default_grid() {
                let cfg = v.apply(axis, &base).unwrap();
                assert_eq!(cfg.seed, base.seed);
                assert_eq!(cfg.eval, base.eval);
            }
        }
        let cfg = AxisValue::Count(256).apply(Axis::HubCapacity, &base).unwrap();
        assert_eq!(cfg.archs["hub"].hidden_widths, vec![256]);
        assert_eq!(cfg.archs["M1"], base.archs["M1"]);
        assert!(AxisValue::Head(HeadKind::Mlp).apply(Axis::Epochs, &base).is_err());
    }

    #[test]
    fn grid_values_parse_from_json() {
        let g: Vec<AxisValue> = serde_json::from_str(
            r#"[8, 0.5, "mlp", {"mode": "learnable", "value": 0.07}, {"infonce": 1.0, "l2": 0.5}]"#,
        )
        .unwrap();
        assert_eq!(g[0], AxisValue::Count(8));
        assert_eq!(g[1], AxisValue::Real(0.5));
        assert_eq!(g[2], AxisValue::Head(HeadKind::Mlp));
        assert_eq!(g[3].label(), "learnable(0.07)");
        assert_eq!(g[4], AxisValue::Mix { infonce: 1.0, l2: 0.5 });
    }

    #[test]
    fn summary_averages_and_counts_failures() {
        let report = |x: f64| {
            let mut r = MetricsReport::new(0);
            r.insert("acc", x).unwrap();
            r
        };
        let cell = |value: &str, seed, outcome| CellResult {
            axis: Axis::Epochs,
            value: value.into(),
            seed,
            outcome,
        };
        let cells = vec![
            cell("10", 0, Ok(report(0.2))),
            cell("10", 1, Ok(report(0.4))),
            cell("20", 0, Err("boom".into())),
        ];
        let rows = summarize(&cells);
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mean - 0.3).abs() < 1e-15);
        assert_eq!((rows[0].seeds_ok, rows[0].seeds_failed), (2, 0));
        assert_eq!((rows[1].seeds_ok, rows[1].seeds_failed), (0, 1));
        let mut reversed = cells.clone();
        reversed.reverse();
        assert_eq!(summary_csv(&summarize(&reversed)).unwrap(), summary_csv(&rows).unwrap());
        assert!(long_csv(&cells).unwrap().contains("failed,boom"));
    }
}
