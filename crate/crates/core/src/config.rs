//! Experiment configuration: TOML schema, dotted-key overrides, validation
//! and conversion to linear units.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chanmodel::ChannelParams;
use crate::dataio::CLASSES;
use crate::dcsolver::SolverOptions;
use crate::error::{Error, Result};

pub fn dbw_to_watts(dbw: f64) -> f64 {
    10f64.powf(dbw / 10.0)
}

/// Linear gain of a loss given in dB.
pub fn loss_db_to_gain(db: f64) -> f64 {
    10f64.powf(-db / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Mnist,
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    /// Simulated over-the-air aggregation with receiver noise.
    Aircomp,
    /// Same link with both noise sources switched off.
    Noiseless,
    /// Exact averaging, no channel.
    Ideal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub task: TaskKind,
    pub aggregation: AggregationKind,
    /// K
    pub nodes: usize,
    /// N, used by `run`; `sweep` takes `sweep.antennas`.
    pub antennas: usize,
    /// L
    pub rounds: usize,
    pub eta: f64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads for sweep cells; 0 picks the number of cores.
    pub threads: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            task: TaskKind::Mnist,
            aggregation: AggregationKind::Aircomp,
            nodes: 20,
            antennas: 4,
            rounds: 50,
            eta: 0.01,
            seeds: vec![1],
            output_dir: PathBuf::from("results"),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    /// Server position in metres.
    pub server: [f64; 3],
    /// Axis-aligned node region `[[x0, x1], [y0, y1], [z0, z1]]` in metres.
    pub region: [[f64; 2]; 3],
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            server: [-50.0, 0.0, 10.0],
            region: [[0.0, 20.0], [-10.0, 10.0], [0.0, 0.0]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelSection {
    /// Path loss at the reference distance, in dB.
    pub c0_db: f64,
    pub reference_distance: f64,
    pub kappa: f64,
    pub rician_chi: f64,
    pub reciprocal: bool,
}

impl Default for ChannelSection {
    fn default() -> Self {
        Self {
            c0_db: 30.0,
            reference_distance: 1.0,
            kappa: 2.2,
            rician_chi: 1.0,
            reciprocal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma_s_dbw: f64,
    pub sigma_k_dbw: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            sigma_s_dbw: -50.0,
            sigma_k_dbw: -50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSection {
    pub node_dbw: f64,
    pub server_dbw: f64,
}

impl Default for PowerSection {
    fn default() -> Self {
        Self {
            node_dbw: 0.0,
            server_dbw: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// D, samples per node.
    pub shard_size: usize,
    pub shuffle_within_label: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            shard_size: 3000,
            shuffle_within_label: false,
        }
    }
}

impl DataSection {
    pub fn paths(&self) -> [(&'static str, Option<&PathBuf>); 4] {
        [
            ("data.train_images", self.train_images.as_ref()),
            ("data.train_labels", self.train_labels.as_ref()),
            ("data.test_images", self.test_images.as_ref()),
            ("data.test_labels", self.test_labels.as_ref()),
        ]
    }
}

/// Synthetic strongly convex task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeSection {
    pub samples_per_node: usize,
    pub features: usize,
    pub ridge: f64,
}

impl Default for RidgeSection {
    fn default() -> Self {
        Self {
            samples_per_node: 40,
            features: 10,
            ridge: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub antennas: Vec<usize>,
    pub server_dbw: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            antennas: vec![1, 2, 4],
            server_dbw: vec![10.0, 20.0],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub geometry: GeometrySection,
    pub channel: ChannelSection,
    pub noise: NoiseSection,
    pub power: PowerSection,
    pub data: DataSection,
    pub ridge: RidgeSection,
    pub solver: SolverOptions,
    pub sweep: SweepSection,
}

/// Splits `key=value`; the value is parsed as a TOML value, falling back to
/// a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(vec![format!("override `{spec}` is not of the form key=value")]))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(vec![format!("override `{spec}` has an empty key segment")]));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn apply_override(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut node = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = node
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            Error::Config(vec![format!("override key `{}` is not a table", path[..=depth].join("."))])
        })?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text and applies `key=value` overrides in order.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("invalid config: {e}")]))?;
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            apply_override(&mut table, &path, value)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![format!("invalid config: {}", e.message())]))
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Channel parameters in linear units for `antennas` and `server_dbw`.
    pub fn channel_params(&self, antennas: usize, server_dbw: f64) -> ChannelParams {
        ChannelParams {
            antennas,
            nodes: self.experiment.nodes,
            c0: loss_db_to_gain(self.channel.c0_db),
            reference_distance: self.channel.reference_distance,
            kappa: self.channel.kappa,
            rician_chi: self.channel.rician_chi,
            sigma_s_sq: dbw_to_watts(self.noise.sigma_s_dbw),
            sigma_k_sq: dbw_to_watts(self.noise.sigma_k_dbw),
            node_power: dbw_to_watts(self.power.node_dbw),
            server_power: dbw_to_watts(server_dbw),
            reciprocal: self.channel.reciprocal,
        }
    }

    /// Model dimension d implied by the task.
    pub fn model_dim(&self) -> usize {
        match self.experiment.task {
            TaskKind::Mnist => 784 * CLASSES,
            TaskKind::Ridge => self.ridge.features,
        }
    }
}

/// Outcome of a successful validation: human-readable resolved values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub lines: Vec<String>,
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for line in &self.lines {
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn finite(problems: &mut Vec<String>, key: &str, value: f64) {
    if !value.is_finite() {
        problems.push(format!("{key} must be finite, got {value}"));
    }
}

/// Checks the whole configuration and reports every problem at once.
/// `sweep` selects which antenna/power axes are checked.
pub fn validate_config(config: &ExperimentConfig, sweep: bool) -> Result<ValidationReport> {
    let mut problems = Vec::new();
    let e = &config.experiment;
    let (antennas, powers) = if sweep {
        (config.sweep.antennas.clone(), config.sweep.server_dbw.clone())
    } else {
        (vec![e.antennas], vec![config.power.server_dbw])
    };

    if e.nodes == 0 {
        problems.push("experiment.nodes must be positive".into());
    }
    if antennas.is_empty() || powers.is_empty() {
        problems.push("sweep.antennas and sweep.server_dbw must be non-empty".into());
    }
    for &n in &antennas {
        if n == 0 {
            problems.push("antenna count must be positive".into());
        } else if e.aggregation != AggregationKind::Ideal && n > e.nodes {
            problems.push(format!(
                "N = {n} antennas exceeds K = {} nodes: the rank-one forwarding design requires K >= N",
                e.nodes
            ));
        }
    }
    if e.rounds == 0 {
        problems.push("experiment.rounds must be positive".into());
    }
    if !(e.eta > 0.0 && e.eta.is_finite()) {
        problems.push(format!("experiment.eta must be positive, got {}", e.eta));
    }
    if e.seeds.is_empty() {
        problems.push("experiment.seeds must list at least one seed".into());
    }

    finite(&mut problems, "noise.sigma_s_dbw", config.noise.sigma_s_dbw);
    finite(&mut problems, "noise.sigma_k_dbw", config.noise.sigma_k_dbw);
    finite(&mut problems, "power.node_dbw", config.power.node_dbw);
    for &p in &powers {
        finite(&mut problems, "server power (dBW)", p);
    }
    finite(&mut problems, "channel.c0_db", config.channel.c0_db);
    if !(config.channel.kappa > 0.0 && config.channel.kappa.is_finite()) {
        problems.push("channel.kappa must be positive".into());
    }
    if !(config.channel.rician_chi >= 0.0) {
        problems.push("channel.rician_chi must be non-negative".into());
    }
    if !(config.channel.reference_distance > 0.0) {
        problems.push("channel.reference_distance must be positive".into());
    }
    for (axis, [lo, hi]) in config.geometry.region.iter().enumerate() {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            problems.push(format!("geometry.region axis {axis} must satisfy lo <= hi"));
        }
    }
    if !config.geometry.server.iter().all(|x| x.is_finite()) {
        problems.push("geometry.server must be finite".into());
    }

    match e.task {
        TaskKind::Mnist => {
            for (key, path) in config.data.paths() {
                match path {
                    None => problems.push(format!("{key} is required for the mnist task")),
                    Some(p) if !p.is_file() => problems.push(format!("{key}: file not found: {}", p.display())),
                    Some(_) => {}
                }
            }
            if config.data.shard_size == 0 {
                problems.push("data.shard_size must be positive".into());
            }
        }
        TaskKind::Ridge => {
            let r = &config.ridge;
            if r.samples_per_node == 0 || r.features < 2 {
                problems.push("ridge task needs samples_per_node >= 1 and features >= 2".into());
            }
            if !(r.ridge > 0.0) {
                problems.push("ridge.ridge must be positive".into());
            }
        }
    }
    problems.extend(config.solver.validate());

    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let mut lines = Vec::new();
    let p = config.channel_params(antennas[0], powers[0]);
    lines.push(format!("nodes K = {}, model dimension d = {}", e.nodes, config.model_dim()));
    lines.push(format!("antennas N = {antennas:?}, rounds L = {}, eta = {}", e.rounds, e.eta));
    lines.push(format!("seeds = {:?}", e.seeds));
    lines.push(format!("path-loss gain c0 = {:e} ({} dB loss), kappa = {}", p.c0, config.channel.c0_db, p.kappa));
    lines.push(format!("sigma_s^2 = {:e} W ({} dBW)", p.sigma_s_sq, config.noise.sigma_s_dbw));
    lines.push(format!("sigma_k^2 = {:e} W ({} dBW)", p.sigma_k_sq, config.noise.sigma_k_dbw));
    lines.push(format!("P_k = {:e} W ({} dBW)", p.node_power, config.power.node_dbw));
    let mut servers = String::new();
    for (i, dbw) in powers.iter().enumerate() {
        let sep = if i > 0 { ", " } else { "" };
        let _ = write!(servers, "{sep}{:e} W ({dbw} dBW)", dbw_to_watts(*dbw));
    }
    lines.push(format!("P_s = {servers}"));
    Ok(ValidationReport { lines })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ridge_config(extra: &[&str]) -> ExperimentConfig {
        let mut overrides = vec!["experiment.task=ridge".to_string()];
        overrides.extend(extra.iter().map(|s| s.to_string()));
        ExperimentConfig::from_toml_str("", &overrides).unwrap()
    }

    #[test]
    fn unit_conversions() {
        assert!((dbw_to_watts(-50.0) - 1e-5).abs() < 1e-20);
        assert_eq!(dbw_to_watts(0.0), 1.0);
        assert!((dbw_to_watts(20.0) - 100.0).abs() < 1e-12);
        assert!((loss_db_to_gain(30.0) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn defaults_match_reference_setup() {
        let c = ExperimentConfig::default();
        assert_eq!(c.experiment.nodes, 20);
        assert_eq!(c.experiment.rounds, 50);
        assert_eq!(c.experiment.eta, 0.01);
        assert_eq!(c.data.shard_size, 3000);
        assert_eq!(c.geometry.server, [-50.0, 0.0, 10.0]);
        assert_eq!(c.model_dim(), 7840);
        let p = c.channel_params(4, 20.0);
        assert!((p.sigma_s_sq - 1e-5).abs() < 1e-20 && (p.node_power - 1.0).abs() < 1e-15);
    }

    #[test]
    fn overrides_are_typed_and_nested() {
        let c = ExperimentConfig::from_toml_str(
            "[experiment]\nnodes = 10\n",
            &[
                "experiment.nodes=12".into(),
                "sweep.server_dbw=[5, 15.5]".into(),
                "experiment.output_dir=out/run1".into(),
                "solver.max_outer=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.experiment.nodes, 12);
        assert_eq!(c.sweep.server_dbw, vec![5.0, 15.5]);
        assert_eq!(c.experiment.output_dir, PathBuf::from("out/run1"));
        assert_eq!(c.solver.max_outer, 7);
    }

    #[test]
    fn unknown_keys_and_malformed_overrides_fail() {
        assert!(ExperimentConfig::from_toml_str("[channel]\nkapa = 2\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["experiment.nodes".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["experiment.nodes=many".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["experiment.nodes.x=1".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = ridge_config(&["sweep.antennas=[1,2]"]);
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn more_antennas_than_nodes_is_rejected() {
        let c = ridge_config(&["experiment.nodes=4", "experiment.antennas=8"]);
        let Err(Error::Config(problems)) = validate_config(&c, false) else { panic!("accepted") };
        assert!(problems.iter().any(|p| p.contains("requires K >= N")), "{problems:?}");
    }

    #[test]
    fn resolved_echo_shows_linear_noise() {
        let report = validate_config(&ridge_config(&[]), false).unwrap();
        assert!(report.lines.iter().any(|l| l.starts_with("sigma_s^2 = 1e-5 W")), "{report}");
    }

    #[test]
    fn missing_dataset_path_is_named() {
        let c = ExperimentConfig::from_toml_str("[data]\ntrain_images = \"/nonexistent/train.gz\"\n", &[]).unwrap();
        let Err(Error::Config(problems)) = validate_config(&c, false) else { panic!("accepted") };
        assert!(problems.iter().any(|p| p.starts_with("data.train_images: file not found")));
        assert!(problems.iter().any(|p| p == "data.test_labels is required for the mnist task"));
    }

    #[test]
    fn problems_are_aggregated() {
        let c = ridge_config(&["experiment.seeds=[]", "experiment.eta=0", "experiment.rounds=0"]);
        let Err(Error::Config(problems)) = validate_config(&c, true) else { panic!("accepted") };
        assert_eq!(problems.len(), 3, "{problems:?}");
    }
}
