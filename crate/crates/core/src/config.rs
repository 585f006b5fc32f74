//! Experiment configuration, TOML parsing and grid expansion.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DclError, Result};
use crate::sharing::fed::FedVariant;
use crate::sharing::modmod::{Metric, Selection};
use crate::tasks::SyntheticConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    Data,
    Fedavg,
    Fedprox,
    Fedcurv,
    Fedfish,
    Modmod,
    Hybrid,
}

impl Mode {
    pub fn uses_data(self) -> bool {
        matches!(self, Mode::Data | Mode::Hybrid)
    }

    pub fn uses_modmod(self) -> bool {
        matches!(self, Mode::Modmod | Mode::Hybrid)
    }

    /// Federated variant run by this mode, if any.
    pub fn fed_variant(self, hybrid: FedVariant) -> Option<FedVariant> {
        match self {
            Mode::Fedavg => Some(FedVariant::FedAvg),
            Mode::Fedprox => Some(FedVariant::FedProx),
            Mode::Fedcurv => Some(FedVariant::FedCurv),
            Mode::Fedfish => Some(FedVariant::FedFish),
            Mode::Hybrid => Some(hybrid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    #[default]
    Synthetic,
    Combined,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    #[serde(default)]
    pub kind: StreamKind,
    #[serde(flatten)]
    pub synthetic: SyntheticConfig,
    /// IDX streams only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            kind: StreamKind::Synthetic,
            synthetic: SyntheticConfig::default(),
            images: None,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Complete,
    Ring,
    Server,
    Tree,
    ErdosRenyi,
    Empty,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub p: f64,
    pub path: Option<PathBuf>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        Self {
            kind: TopologyKind::Complete,
            p: 1.0,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetKind {
    Monolithic,
    Modular,
}

/// Conv-lite front end for image-shaped streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub kind: NetKind,
    /// Monolithic trunk widths.
    pub hidden: Vec<usize>,
    /// Modular: module width, depth and basis count.
    pub width: usize,
    pub depth: usize,
    pub basis: usize,
    /// Modular: leading tasks that train the basis modules and encoder
    /// instead of running component dropout.
    pub init_tasks: usize,
    /// Modular: put a frozen encoder in front of the modules even when the
    /// input already has the module width. Always on for conv or mismatched
    /// widths.
    pub encoder: bool,
    pub conv: Option<ConvConfig>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            kind: NetKind::Monolithic,
            hidden: vec![32, 32],
            width: 32,
            depth: 2,
            basis: 4,
            init_tasks: 1,
            encoder: false,
            conv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Replay instances mixed into each minibatch.
    pub replay_batch: usize,
    pub eval_period: usize,
    /// Leading epochs of each task spent in component dropout.
    pub dropout_epochs: usize,
    /// Accuracy points a new module must add to be kept.
    pub keep_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 20,
            lr: 0.1,
            batch_size: 16,
            replay_capacity: 64,
            replay_batch: 16,
            eval_period: 10,
            dropout_epochs: 10,
            keep_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataStrategy {
    /// Recv for flat instances, Simp for image-shaped ones.
    Auto,
    Recv,
    Simp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub strategy: DataStrategy,
    pub q: usize,
    pub k: usize,
    pub frequency: usize,
    /// Instances per edge per round; defaults to `q * k`.
    pub budget: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            strategy: DataStrategy::Auto,
            q: 20,
            k: 5,
            frequency: 16,
            budget: None,
        }
    }
}

impl DataConfig {
    pub fn instance_budget(&self) -> usize {
        self.budget.unwrap_or(self.q * self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    /// Variant used by hybrid mode; the fed* modes fix their own.
    pub variant: FedVariant,
    pub frequency: usize,
    pub mu: f32,
    /// Constant normalized importance replacing the Fisher estimate in FedFish.
    pub importance: Option<f32>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            variant: FedVariant::FedAvg,
            frequency: 5,
            mu: 0.01,
            importance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricChoice {
    /// LEEP on the combined stream, IoU otherwise.
    Auto,
    Leep,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionChoice {
    /// TrustMetric when at most two candidates arrive, TryOut otherwise.
    Auto,
    TrustMetric,
    TryOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModmodConfig {
    pub k: usize,
    pub metric: MetricChoice,
    pub selection: SelectionChoice,
    /// Validation instances sent to each sender for LEEP probing.
    pub probe: usize,
}

impl Default for ModmodConfig {
    fn default() -> Self {
        Self {
            k: 1,
            metric: MetricChoice::Auto,
            selection: SelectionChoice::Auto,
            probe: 32,
        }
    }
}

impl ModmodConfig {
    pub fn metric_for(&self, stream: &StreamKind) -> Metric {
        match (self.metric, stream) {
            (MetricChoice::Leep, _) | (MetricChoice::Auto, StreamKind::Combined) => Metric::Leep,
            _ => Metric::Iou,
        }
    }

    pub fn selection_for(&self, neighbors: usize) -> Selection {
        match self.selection {
            SelectionChoice::TrustMetric => Selection::TrustMetric,
            SelectionChoice::TryOut => Selection::TryOut,
            SelectionChoice::Auto if self.k * neighbors > 2 => Selection::TryOut,
            SelectionChoice::Auto => Selection::TrustMetric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Hard per-edge cap `b * f * C`; otherwise rows are only recorded.
    pub enforce: bool,
    /// Floats per communication `b` on every edge when enforcing.
    pub edge_budget: f64,
    /// Epochs between communications `f` on every edge when enforcing.
    pub edge_frequency: u32,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            enforce: false,
            edge_budget: 1e6,
            edge_frequency: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Seeds {
    pub fn list(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub mode: Mode,
    pub seeds: Seeds,
    pub stream: StreamConfig,
    pub topology: TopologyConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub fed: FedConfig,
    pub modmod: ModmodConfig,
    pub budget: BudgetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            mode: Mode::None,
            seeds: Seeds::Count(1),
            stream: StreamConfig::default(),
            topology: TopologyConfig::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            fed: FedConfig::default(),
            modmod: ModmodConfig::default(),
            budget: BudgetConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DclError::Config(m));
        let t = &self.train;
        if t.epochs_per_task == 0 || t.batch_size == 0 || t.eval_period == 0 {
            return bad("epochs_per_task, batch_size and eval_period must be positive".into());
        }
        if !(t.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", t.lr));
        }
        if self.mode.uses_data() && (self.data.frequency == 0 || self.data.q == 0 || self.data.k == 0) {
            return bad("data sharing needs q, k and frequency >= 1".into());
        }
        if self.mode.fed_variant(self.fed.variant).is_some() {
            if self.fed.frequency == 0 {
                return bad("fed frequency must be >= 1".into());
            }
            if !(self.fed.mu >= 0.0) {
                return bad(format!("mu {} must be >= 0", self.fed.mu));
            }
            if let Some(d) = self.fed.importance {
                if !(0.0..=1.0).contains(&d) {
                    return bad(format!("importance {d} outside [0, 1]"));
                }
            }
        }
        if self.mode.uses_modmod() {
            if self.net.kind != NetKind::Modular {
                return bad(format!("mode {:?} needs a modular net", self.mode));
            }
            if self.modmod.k == 0 {
                return bad("modmod k must be >= 1".into());
            }
        }
        if self.net.kind == NetKind::Modular {
            if self.net.basis == 0 || self.net.depth == 0 || self.net.width == 0 {
                return bad("modular nets need width, depth and basis >= 1".into());
            }
            if t.dropout_epochs >= t.epochs_per_task {
                return bad("dropout_epochs must be shorter than epochs_per_task".into());
            }
        }
        if self.stream.kind == StreamKind::Idx && (self.stream.images.is_none() || self.stream.labels.is_none()) {
            return bad("idx streams need `images` and `labels` paths".into());
        }
        if self.topology.kind == TopologyKind::File && self.topology.path.is_none() {
            return bad("file topologies need `path`".into());
        }
        if self.seeds.list().is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.stream.kind != StreamKind::Idx {
            self.stream
                .synthetic
                .validate()
                .map_err(|e| DclError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A parsed file: the base config plus every grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct RunList {
    pub runs: Vec<ExperimentConfig>,
}

/// Parses a config file. A top-level `[grid]` table maps dotted keys to
/// value lists; the run list is their cross product in key order.
pub fn parse_config(text: &str) -> Result<RunList> {
    let mut root: toml::Table = toml::from_str(text).map_err(|e| DclError::Config(e.to_string()))?;
    let grid = match root.remove("grid") {
        None => BTreeMap::new(),
        Some(toml::Value::Table(t)) => {
            let mut g = BTreeMap::new();
            for (k, v) in t {
                let values = match v {
                    toml::Value::Array(a) if !a.is_empty() => a,
                    toml::Value::Array(_) => return Err(DclError::Config(format!("grid key `{k}` is empty"))),
                    scalar => vec![scalar],
                };
                g.insert(k, values);
            }
            g
        }
        Some(_) => return Err(DclError::Config("`grid` must be a table".into())),
    };
    let mut points: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
    for (key, values) in &grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    let mut runs = Vec::with_capacity(points.len());
    for point in points {
        let mut table = root.clone();
        let mut suffix = String::new();
        for (key, value) in &point {
            set_path(&mut table, key, value.clone())?;
            suffix.push_str(&format!("-{}={}", key, value_label(value)));
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| DclError::Config(e.to_string()))?;
        cfg.name.push_str(&suffix);
        cfg.validate()?;
        runs.push(cfg);
    }
    Ok(RunList { runs })
}

fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().unwrap();
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| DclError::Config(format!("grid key `{path}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses() {
        let runs = parse_config("name = \"base\"\n[stream]\nkind = \"synthetic\"\nn_agents = 2\ntasks_per_agent = 2\n").unwrap();
        assert_eq!(runs.runs.len(), 1);
        assert_eq!(runs.runs[0].stream.synthetic.n_agents, 2);
        assert_eq!(runs.runs[0].mode, Mode::None);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("name = \"x\"\nbogus_key = 3\n").unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
        let err = parse_config("[train]\nepochz = 3\n").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = parse_config("[stream]\nkind = \"synthetic\"\nwat = 1\n").unwrap_err().to_string();
        assert!(err.contains("wat"), "{err}");
    }

    #[test]
    fn grid_is_a_cross_product() {
        let text = "mode = \"fedavg\"\n[grid]\n\"fed.frequency\" = [5, 10]\nmode = [\"fedavg\"]\n";
        let runs = parse_config(text).unwrap().runs;
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].fed.frequency, 5);
        assert_eq!(runs[1].fed.frequency, 10);
        assert_ne!(runs[0].hash(), runs[1].hash());
        assert!(runs[1].name.ends_with("fed.frequency=10-mode=fedavg"));
        let text = "[grid]\n\"topology.p\" = [1.0, 0.5, 0.1]\n\"data.q\" = [10, 20]\n";
        assert_eq!(parse_config(text).unwrap().runs.len(), 6);
    }

    #[test]
    fn modmod_needs_modular_net() {
        assert!(parse_config("mode = \"modmod\"\n").is_err());
        assert!(parse_config("mode = \"modmod\"\n[net]\nkind = \"modular\"\n").is_ok());
    }

    #[test]
    fn hash_is_stable() {
        let a = ExperimentConfig::default();
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
    }
}
