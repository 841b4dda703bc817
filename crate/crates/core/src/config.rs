//! Experiment configuration: presets, file merging and `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bptt::BpttConfig;
use crate::error::{Error, Result};
use crate::esn::{Nonlinearity, ReservoirParams, DEFAULT_WASHOUT};
use crate::network::{NetworkSpec, CHAIN_NODES};
use crate::readout::RidgeConfig;
use crate::search::SearchSpace;
use crate::seeds::{derive_seed, Stream};
use crate::tasks::DEFAULT_SPLIT_LEN;

/// Run indices from this offset are reserved for transfer source networks.
pub const SOURCE_RUN_OFFSET: usize = 1000;
/// Seed indices of transfer networks start here.
pub const TRANSFER_RUN_OFFSET: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            other => Err(Error::Config(format!("unknown scale {other:?}; expected desk or full"))),
        }
    }
}

/// Reservoir hyperparameters without wiring or seed; both are filled in per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirConfig {
    pub size: usize,
    pub spectral_radius: f64,
    pub input_scaling: Vec<f64>,
    pub bias_scaling: f64,
    pub input_sparsity: f64,
    pub recurrent_sparsity: f64,
    pub nonlinearity: Nonlinearity,
}

impl ReservoirConfig {
    pub fn params(&self, seed: u64) -> ReservoirParams {
        ReservoirParams {
            size: self.size,
            spectral_radius: self.spectral_radius,
            input_scaling: self.input_scaling.clone(),
            bias_scaling: self.bias_scaling,
            input_sparsity: self.input_sparsity,
            recurrent_sparsity: self.recurrent_sparsity,
            nonlinearity: self.nonlinearity,
            n_inputs: 1,
            seed,
        }
    }

    pub fn from_params(p: &ReservoirParams) -> Self {
        Self {
            size: p.size,
            spectral_radius: p.spectral_radius,
            input_scaling: p.input_scaling.clone(),
            bias_scaling: p.bias_scaling,
            input_sparsity: p.input_sparsity,
            recurrent_sparsity: p.recurrent_sparsity,
            nonlinearity: p.nonlinearity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub train_len: usize,
    pub val_len: usize,
    pub test_len: usize,
    /// Directory with `train.csv`, `validation.csv`, `test.csv`; generated from the seed when absent.
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Source network or checkpoint JSON. When absent the source is trained.
    pub source: Option<PathBuf>,
    /// Whether source networks may be trained through time when no source is given.
    pub train_source: bool,
    pub source_runs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchTarget {
    Monolithic,
    Engineered,
    Bptt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub target: SearchTarget,
    pub budget: usize,
    /// Separate reservoir dimensions for each chain node.
    pub per_node: bool,
    /// Replaces the default space for the target.
    pub space: Option<SearchSpace>,
}

impl SearchConfig {
    pub fn space(&self) -> SearchSpace {
        if let Some(s) = &self.space {
            return s.clone();
        }
        match self.target {
            SearchTarget::Bptt => SearchSpace::bptt(),
            SearchTarget::Engineered if self.per_node => SearchSpace::reservoir_per_node(&CHAIN_NODES),
            _ => SearchSpace::reservoir(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub regime: String,
    pub repetitions: usize,
    pub washout: usize,
    pub task: TaskConfig,
    pub monolithic: ReservoirConfig,
    pub chain: [ReservoirConfig; 3],
    pub ridge: RidgeConfig,
    pub bptt: BpttConfig,
    pub transfer: TransferConfig,
    pub search: SearchConfig,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        let chain_node = ReservoirConfig {
            size: 100,
            spectral_radius: 0.9,
            input_scaling: vec![0.5],
            bias_scaling: 0.1,
            input_sparsity: 1.0,
            recurrent_sparsity: 0.1,
            nonlinearity: Nonlinearity::Elu,
        };
        let mut cfg = Self {
            seed: 0,
            regime: "engineered".into(),
            repetitions: 10,
            washout: DEFAULT_WASHOUT,
            task: TaskConfig { train_len: DEFAULT_SPLIT_LEN, val_len: DEFAULT_SPLIT_LEN, test_len: DEFAULT_SPLIT_LEN, data_dir: None },
            monolithic: ReservoirConfig {
                size: 300,
                spectral_radius: 0.95,
                input_scaling: vec![0.2],
                bias_scaling: 0.1,
                input_sparsity: 1.0,
                recurrent_sparsity: 0.1,
                nonlinearity: Nonlinearity::Tanh,
            },
            chain: [chain_node.clone(), chain_node.clone(), chain_node],
            ridge: RidgeConfig::default(),
            bptt: BpttConfig { lr0: 5e-3, batch_size: 30, grad_noise_eta: 1e-4, ..BpttConfig::default() },
            transfer: TransferConfig { source: None, train_source: true, source_runs: 10 },
            search: SearchConfig { target: SearchTarget::Engineered, budget: 100, per_node: false, space: None },
        };
        if scale == Scale::Desk {
            cfg.task.train_len = 20_000;
            cfg.task.val_len = 20_000;
            cfg.task.test_len = 20_000;
            cfg.bptt.epochs = 40;
            cfg.bptt.lr_halving_epoch = 20;
            cfg.repetitions = 3;
            cfg.transfer.source_runs = 3;
        }
        cfg
    }

    /// Preset, then the config file merged over it, then `key=value`
    /// overrides with dotted keys. Values parse as JSON, falling back to
    /// plain strings.
    pub fn resolve(scale: Scale, file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::preset(scale))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, patch);
        }
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut doc, key, value)?;
        }
        if let Some(s) = seed {
            doc["seed"] = Value::from(s);
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_fields()?;
        Ok(cfg)
    }

    /// Checks everything except regime-specific requirements.
    pub fn validate_fields(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.repetitions == 0 {
            return cfg_err("repetitions must be >= 1".into());
        }
        let wrap = |e: Error| Error::Config(e.to_string());
        self.monolithic_spec(0).validate().map_err(wrap)?;
        self.chain_spec(0).validate().map_err(wrap)?;
        for p in self.chain_spec(0).nodes.iter().chain(&self.monolithic_spec(0).nodes) {
            p.params.validate().map_err(wrap)?;
        }
        self.ridge.validate().map_err(wrap)?;
        self.bptt.validate().map_err(wrap)?;
        if self.search.budget == 0 {
            return cfg_err("search.budget must be >= 1".into());
        }
        self.search.space().validate().map_err(wrap)
    }

    /// Requirements for training on generated splits.
    pub fn validate_lengths(&self) -> Result<()> {
        let t = &self.task;
        if t.data_dir.is_none() && [t.train_len, t.val_len, t.test_len].iter().any(|&n| n <= self.washout) {
            return Err(Error::Config(format!("split lengths must exceed the washout of {}", self.washout)));
        }
        Ok(())
    }

    /// Reservoir seed of node `k` in run `run`.
    pub fn reservoir_seed(&self, run: usize, k: usize) -> u64 {
        derive_seed(self.seed, Stream::Reservoir, (run * 4 + k) as u64)
    }

    /// Training seed of run `run`.
    pub fn training_seed(&self, run: usize) -> u64 {
        derive_seed(self.seed, Stream::Bptt, run as u64)
    }

    pub fn monolithic_spec(&self, run: usize) -> NetworkSpec {
        let mut s = NetworkSpec::monolithic(self.monolithic.params(self.reservoir_seed(run, 0)));
        s.washout = self.washout;
        s
    }

    pub fn chain_spec(&self, run: usize) -> NetworkSpec {
        let mut s = NetworkSpec::chain3(std::array::from_fn(|k| self.chain[k].params(self.reservoir_seed(run, k))));
        s.washout = self.washout;
        s
    }

    pub fn bptt_config(&self, run: usize) -> BpttConfig {
        BpttConfig { seed: self.training_seed(run), ..self.bptt.clone() }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    for part in key.split('.') {
        cur = match cur {
            Value::Object(m) => m.entry(part).or_insert(Value::Null),
            Value::Array(a) => {
                let i: usize = part.parse().map_err(|_| Error::Config(format!("{key}: {part:?} is not an index")))?;
                let len = a.len();
                a.get_mut(i).ok_or_else(|| Error::Config(format!("{key}: index {i} out of range ({len})")))?
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                match cur {
                    Value::Object(m) => m.entry(part).or_insert(Value::Null),
                    _ => unreachable!(),
                }
            }
            _ => return Err(Error::Config(format!("{key}: cannot descend into a scalar at {part:?}"))),
        };
    }
    *cur = value;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(overrides: &[&str]) -> Result<ExperimentConfig> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::resolve(Scale::Full, None, &o, None)
    }

    #[test]
    fn presets() {
        let full = ExperimentConfig::preset(Scale::Full);
        assert_eq!((full.task.train_len, full.bptt.epochs, full.repetitions), (100_000, 120, 10));
        let desk = ExperimentConfig::preset(Scale::Desk);
        assert_eq!((desk.task.test_len, desk.bptt.epochs, desk.repetitions), (20_000, 40, 3));
        full.validate_fields().unwrap();
        desk.validate_fields().unwrap();
    }

    #[test]
    fn overrides() {
        let c = resolve(&["task.train_len=100", "chain.1.spectral_radius=0.5", "regime=bptt", "bptt.lr0=1e-3"]).unwrap();
        assert_eq!(c.task.train_len, 100);
        assert_eq!(c.chain[1].spectral_radius, 0.5);
        assert_eq!(c.regime, "bptt");
        assert_eq!(c.bptt.lr0, 1e-3);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(resolve(&["task.bogus=1"]), Err(Error::Config(_))));
        assert!(matches!(resolve(&["nonsense=1"]), Err(Error::Config(_))));
        assert!(matches!(resolve(&["chain.5.size=3"]), Err(Error::Config(_))));
        assert!(matches!(resolve(&["repetitions"]), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(resolve(&["repetitions=0"]).is_err());
        assert!(resolve(&["monolithic.spectral_radius=-1"]).is_err());
        assert!(resolve(&["bptt.chunk_washout=100"]).is_err());
        assert!(resolve(&["task.test_len=100"]).unwrap().validate_lengths().is_err());
    }

    #[test]
    fn file_merges_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 9, "bptt": {"epochs": 3}}"#).unwrap();
        let c = ExperimentConfig::resolve(Scale::Desk, Some(&p), &["seed=4".into()], None).unwrap();
        assert_eq!((c.seed, c.bptt.epochs, c.bptt.lr0), (4, 3, 0.005));
        let c = ExperimentConfig::resolve(Scale::Desk, Some(&p), &[], Some(7)).unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn echoed_config_round_trips() {
        let c = resolve(&["seed=3"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("echo.json");
        std::fs::write(&p, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::resolve(Scale::Desk, Some(&p), &[], None).unwrap(), c);
    }

    #[test]
    fn run_seeds_are_distinct() {
        let c = ExperimentConfig::preset(Scale::Full);
        let mut seeds: Vec<u64> = (0..10).flat_map(|r| (0..3).map(move |k| (r, k))).map(|(r, k)| c.reservoir_seed(r, k)).collect();
        seeds.sort();
        seeds.dedup();
        assert_eq!(seeds.len(), 30);
        assert_ne!(c.chain_spec(0), c.chain_spec(1));
    }
}
