//! Seeded random search over reservoir and training hyperparameters,
//! scored on the validation split.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bptt::{bptt_train, BpttConfig};
use crate::error::{Error, Result};
use crate::network::{train_engineered, train_monolithic, Architecture, NetworkSpec};
use crate::readout::RidgeConfig;
use crate::tasks::DatasetSplit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dimension {
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Choice { values: Vec<f64> },
}

impl Dimension {
    fn validate(&self) -> Result<()> {
        match self {
            Dimension::Uniform { lo, hi } if lo < hi => Ok(()),
            Dimension::LogUniform { lo, hi } if *lo > 0.0 && lo < hi => Ok(()),
            Dimension::Choice { values } if !values.is_empty() => Ok(()),
            other => Err(Error::InvalidParameter(format!("bad search dimension {other:?}"))),
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Dimension::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            Dimension::LogUniform { lo, hi } => (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp(),
            Dimension::Choice { values } => values[rng.random_range(0..values.len())],
        }
    }
}

/// A sampled configuration, keyed by dimension name.
pub type Point = BTreeMap<String, f64>;

/// Ordered named dimensions. Order fixes the sampling stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub dims: Vec<(String, Dimension)>,
}

const RESERVOIR_KEYS: [&str; 5] = ["spectral_radius", "input_scaling", "bias_scaling", "input_sparsity", "recurrent_sparsity"];

impl SearchSpace {
    /// Shared reservoir dimensions, applied to every node.
    pub fn reservoir() -> Self {
        Self::reservoir_prefixed(None)
    }

    /// Reservoir dimensions for each named node separately (`esn2.spectral_radius`, ...).
    pub fn reservoir_per_node(nodes: &[&str]) -> Self {
        Self { dims: nodes.iter().flat_map(|n| Self::reservoir_prefixed(Some(n)).dims).collect() }
    }

    fn reservoir_prefixed(prefix: Option<&str>) -> Self {
        let name = |k: &str| prefix.map_or_else(|| k.to_string(), |p| format!("{p}.{k}"));
        Self {
            dims: vec![
                (name("spectral_radius"), Dimension::Uniform { lo: 0.1, hi: 1.4 }),
                (name("input_scaling"), Dimension::LogUniform { lo: 1e-2, hi: 1e1 }),
                (name("bias_scaling"), Dimension::LogUniform { lo: 1e-3, hi: 1e1 }),
                (name("input_sparsity"), Dimension::Uniform { lo: 0.05, hi: 1.0 }),
                (name("recurrent_sparsity"), Dimension::Uniform { lo: 0.05, hi: 1.0 }),
            ],
        }
    }

    pub fn bptt() -> Self {
        Self {
            dims: vec![
                ("lr0".into(), Dimension::LogUniform { lo: 1e-5, hi: 1e-2 }),
                ("weight_decay".into(), Dimension::LogUniform { lo: 1e-6, hi: 1e-2 }),
                ("grad_noise_eta".into(), Dimension::LogUniform { lo: 1e-4, hi: 1e-1 }),
                ("batch_size".into(), Dimension::Choice { values: vec![30.0, 60.0, 120.0] }),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(Error::InvalidParameter("search space has no dimensions".into()));
        }
        self.dims.iter().try_for_each(|(_, d)| d.validate())
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        self.dims.iter().map(|(n, d)| (n.clone(), d.sample(rng))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: usize,
    pub point: Point,
    /// Validation NMSE; NaN when failed.
    pub value: f64,
    pub status: TrialStatus,
    pub seed: u64,
    pub error: Option<String>,
}

/// Objective over a point and a per-trial seed.
pub type Objective<'a> = dyn Fn(&Point, u64) -> Result<f64> + Sync + 'a;

/// Evaluates `budget` points drawn from `space` with `seed`. Failing or
/// non-finite trials are kept in the log and skipped; the best trial is the
/// lowest value, ties to the earliest.
pub fn random_search(space: &SearchSpace, budget: usize, objective: &Objective<'_>, seed: u64) -> Result<(Trial, Vec<Trial>)> {
    space.validate()?;
    if budget == 0 {
        return Err(Error::InvalidParameter("budget must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planned: Vec<(Point, u64)> = (0..budget).map(|_| (space.sample(&mut rng), rng.random::<u64>())).collect();
    let trials: Vec<Trial> = planned
        .into_par_iter()
        .enumerate()
        .map(|(id, (point, tseed))| match objective(&point, tseed) {
            Ok(v) if v.is_finite() => Trial { id, point, value: v, status: TrialStatus::Ok, seed: tseed, error: None },
            Ok(v) => Trial {
                id,
                point,
                value: f64::NAN,
                status: TrialStatus::Failed,
                seed: tseed,
                error: Some(format!("non-finite objective {v}")),
            },
            Err(e) => Trial { id, point, value: f64::NAN, status: TrialStatus::Failed, seed: tseed, error: Some(e.to_string()) },
        })
        .collect();
    let best = trials
        .iter()
        .filter(|t| t.status == TrialStatus::Ok)
        .fold(None::<&Trial>, |acc, t| match acc {
            Some(b) if b.value <= t.value => Some(b),
            _ => Some(t),
        })
        .cloned()
        .ok_or(Error::AllTrialsFailed(budget))?;
    Ok((best, trials))
}

/// Applies reservoir dimensions to `spec`. Bare names hit every node;
/// `node.key` hits one node.
pub fn apply_reservoir_point(spec: &NetworkSpec, point: &Point) -> Result<NetworkSpec> {
    let mut out = spec.clone();
    for (name, &v) in point {
        let (node, key) = match name.split_once('.') {
            Some((n, k)) => (Some(n), k),
            None => (None, name.as_str()),
        };
        if !RESERVOIR_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown reservoir dimension {name}")));
        }
        let mut hit = false;
        for n in out.nodes.iter_mut().filter(|n| node.is_none_or(|want| want == n.name)) {
            hit = true;
            let p = &mut n.params;
            match key {
                "spectral_radius" => p.spectral_radius = v,
                "input_scaling" => p.input_scaling = vec![v],
                "bias_scaling" => p.bias_scaling = v,
                "input_sparsity" => p.input_sparsity = v,
                "recurrent_sparsity" => p.recurrent_sparsity = v,
                _ => unreachable!(),
            }
        }
        if !hit {
            return Err(Error::Config(format!("dimension {name} matches no node")));
        }
    }
    Ok(out)
}

/// Validation NMSE of the ridge-trained network configured by `point`
/// (engineered decomposition for chains).
pub fn evaluate_reservoir_config(point: &Point, spec: &NetworkSpec, data: &DatasetSplit, ridge: &RidgeConfig) -> Result<f64> {
    let spec = apply_reservoir_point(spec, point)?;
    let net = match spec.architecture {
        Architecture::Monolithic => train_monolithic(&spec, data, ridge)?,
        Architecture::Chain3 => train_engineered(&spec, data, ridge)?.0,
    };
    Ok(net.evaluate(&data.validation)?.0)
}

pub fn apply_bptt_point(cfg: &BpttConfig, point: &Point) -> Result<BpttConfig> {
    let mut out = cfg.clone();
    for (name, &v) in point {
        match name.as_str() {
            "lr0" => out.lr0 = v,
            "weight_decay" => out.weight_decay = v,
            "grad_noise_eta" => out.grad_noise_eta = v,
            "grad_clip_norm" => out.grad_clip_norm = v,
            "batch_size" => out.batch_size = v.round().max(1.0) as usize,
            other => return Err(Error::Config(format!("unknown training dimension {other}"))),
        }
    }
    Ok(out)
}

/// Best validation NMSE reached by training through time with `point` applied.
pub fn evaluate_bptt_config(point: &Point, spec: &NetworkSpec, data: &DatasetSplit, cfg: &BpttConfig) -> Result<f64> {
    Ok(bptt_train(spec, data, &apply_bptt_point(cfg, point)?)?.best_val_nmse)
}

/// `trial_id, <dims...>, value, status`
pub fn write_trials_csv(space: &SearchSpace, trials: &[Trial], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let names: Vec<&str> = space.dims.iter().map(|(n, _)| n.as_str()).collect();
    writeln!(w, "trial_id,{},value,status", names.join(","))?;
    for t in trials {
        let vals: Vec<String> = names.iter().map(|n| t.point.get(*n).map_or(String::new(), |v| v.to_string())).collect();
        let status = match t.status {
            TrialStatus::Ok => "ok",
            TrialStatus::Failed => "failed",
        };
        writeln!(w, "{},{},{},{status}", t.id, vals.join(","), t.value)?;
    }
    w.flush()?;
    Ok(())
}
