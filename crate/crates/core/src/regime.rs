//! Training regimes behind one interface, registered by name.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::bptt::{bptt_train, Checkpoint, TrainLog};
use crate::config::{ExperimentConfig, SOURCE_RUN_OFFSET, TRANSFER_RUN_OFFSET};
use crate::error::{Error, Result};
use crate::network::{train_engineered, train_monolithic, train_transfer, Architecture, NetworkSpec, SignalRecord, TrainedNetwork};
use crate::tasks::DatasetSplit;

/// What one repetition produced before test evaluation.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub network: TrainedNetwork,
    pub val_nmse: f64,
    pub log: Option<TrainLog>,
    pub checkpoint: Option<Checkpoint>,
}

/// A repetition after test evaluation.
#[derive(Debug, Clone)]
pub struct EvaluatedRun {
    pub run_id: usize,
    pub spec: NetworkSpec,
    pub training_seed: Option<u64>,
    pub outcome: std::result::Result<(RunOutput, f64, SignalRecord), Error>,
}

impl EvaluatedRun {
    pub fn val_nmse(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|(o, _, _)| o.val_nmse)
    }

    pub fn test_nmse(&self) -> Option<f64> {
        self.outcome.as_ref().ok().map(|(_, t, _)| *t)
    }
}

/// The network whose intermediate signals a transfer copies.
#[derive(Debug, Clone)]
pub struct TransferSource {
    /// Trained candidates; empty when loaded from a file.
    pub candidates: Vec<EvaluatedRun>,
    /// Index into `candidates` of the selected network.
    pub selected: Option<usize>,
    pub loaded_from: Option<PathBuf>,
    pub network: TrainedNetwork,
    /// Signals of `network` on the train input.
    pub record: SignalRecord,
    pub val_nmse: f64,
    pub test_nmse: f64,
}

/// Regime-specific state shared by all repetitions.
#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub source: Option<TransferSource>,
}

pub struct Env<'a> {
    pub cfg: &'a ExperimentConfig,
    pub data: &'a DatasetSplit,
}

impl Env<'_> {
    pub fn spec(&self, arch: Architecture, run: usize) -> NetworkSpec {
        match arch {
            Architecture::Monolithic => self.cfg.monolithic_spec(run),
            Architecture::Chain3 => self.cfg.chain_spec(run),
        }
    }

    /// Trains repetition `run` of `regime` and scores it on the test split.
    ///
    /// Seeds come from index `regime.seed_offset() + run`.
    pub fn execute(&self, regime: &dyn Regime, prepared: &Prepared, run: usize) -> EvaluatedRun {
        let index = regime.seed_offset() + run;
        let spec = self.spec(regime.architecture(), index);
        let training_seed = regime.uses_training_seed().then(|| self.cfg.training_seed(index));
        let outcome = regime.train(self, prepared, &spec, index).and_then(|out| {
            let (nmse, record) = out.network.evaluate(&self.data.test)?;
            if !nmse.is_finite() {
                return Err(Error::NonFiniteState { step: 0 });
            }
            Ok((out, nmse, record))
        });
        EvaluatedRun { run_id: run, spec, training_seed, outcome }
    }
}

pub trait Regime: Send + Sync {
    fn name(&self) -> &'static str;
    fn architecture(&self) -> Architecture;

    fn uses_training_seed(&self) -> bool {
        false
    }

    /// Added to the run index before deriving seeds.
    fn seed_offset(&self) -> usize {
        0
    }

    /// Rejects configurations this regime cannot run. Called before any compute.
    fn validate(&self, _cfg: &ExperimentConfig) -> Result<()> {
        Ok(())
    }

    fn prepare(&self, _env: &Env<'_>) -> Result<Prepared> {
        Ok(Prepared::default())
    }

    fn train(&self, env: &Env<'_>, prepared: &Prepared, spec: &NetworkSpec, run: usize) -> Result<RunOutput>;
}

fn ridge_output(env: &Env<'_>, network: TrainedNetwork) -> Result<RunOutput> {
    let (val_nmse, _) = network.evaluate(&env.data.validation)?;
    Ok(RunOutput { network, val_nmse, log: None, checkpoint: None })
}

pub struct Monolithic;

impl Regime for Monolithic {
    fn name(&self) -> &'static str {
        "monolithic"
    }

    fn architecture(&self) -> Architecture {
        Architecture::Monolithic
    }

    fn train(&self, env: &Env<'_>, _: &Prepared, spec: &NetworkSpec, _: usize) -> Result<RunOutput> {
        ridge_output(env, train_monolithic(spec, env.data, &env.cfg.ridge)?)
    }
}

pub struct Engineered;

impl Regime for Engineered {
    fn name(&self) -> &'static str {
        "engineered"
    }

    fn architecture(&self) -> Architecture {
        Architecture::Chain3
    }

    fn train(&self, env: &Env<'_>, _: &Prepared, spec: &NetworkSpec, _: usize) -> Result<RunOutput> {
        ridge_output(env, train_engineered(spec, env.data, &env.cfg.ridge)?.0)
    }
}

pub struct Bptt;

impl Regime for Bptt {
    fn name(&self) -> &'static str {
        "bptt"
    }

    fn architecture(&self) -> Architecture {
        Architecture::Chain3
    }

    fn uses_training_seed(&self) -> bool {
        true
    }

    fn train(&self, env: &Env<'_>, _: &Prepared, spec: &NetworkSpec, run: usize) -> Result<RunOutput> {
        let out = bptt_train(spec, env.data, &env.cfg.bptt_config(run))?;
        Ok(RunOutput { network: out.network, val_nmse: out.best_val_nmse, log: Some(out.log), checkpoint: Some(out.checkpoint) })
    }
}

/// Fresh reservoirs fitted by ridge regression to the intermediate signals of
/// a source network trained through time.
pub struct Transfer;

impl Transfer {
    fn load_source(path: &std::path::Path) -> Result<TrainedNetwork> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        if doc.get("optimizer").is_some() {
            Checkpoint::load(path)?.network()
        } else {
            TrainedNetwork::from_json(&text)
        }
    }
}

impl Regime for Transfer {
    fn name(&self) -> &'static str {
        "transfer"
    }

    fn architecture(&self) -> Architecture {
        Architecture::Chain3
    }

    /// Keeps transfer reservoirs distinct from every source candidate.
    fn seed_offset(&self) -> usize {
        TRANSFER_RUN_OFFSET
    }

    fn validate(&self, cfg: &ExperimentConfig) -> Result<()> {
        let t = &cfg.transfer;
        if t.source.is_none() && !t.train_source {
            return Err(Error::Config("transfer needs transfer.source or transfer.train_source = true".into()));
        }
        if t.source.is_none() && t.source_runs == 0 {
            return Err(Error::Config("transfer.source_runs must be >= 1 when training the source".into()));
        }
        Ok(())
    }

    /// Loads the source, or trains `source_runs` networks through time and
    /// keeps the one with the lowest validation NMSE (ties to the lowest run).
    fn prepare(&self, env: &Env<'_>) -> Result<Prepared> {
        let t = &env.cfg.transfer;
        let (candidates, selected, loaded_from, network) = match &t.source {
            Some(path) => (Vec::new(), None, Some(path.clone()), Self::load_source(path)?),
            None => {
                let candidates: Vec<EvaluatedRun> = (0..t.source_runs)
                    .into_par_iter()
                    .map(|i| env.execute(&Bptt, &Prepared::default(), SOURCE_RUN_OFFSET + i))
                    .collect();
                let best = candidates
                    .iter()
                    .enumerate()
                    .filter_map(|(i, r)| r.val_nmse().map(|v| (i, v)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .map(|(i, _)| i)
                    .ok_or(Error::AllTrialsFailed(candidates.len()))?;
                let network = candidates[best].outcome.as_ref().expect("selected run succeeded").0.network.clone();
                (candidates, Some(best), None, network)
            }
        };
        if network.spec.architecture != Architecture::Chain3 {
            return Err(Error::Config("transfer source must be a chain3 network".into()));
        }
        let record = network.record_signals(&env.data.train.u)?;
        let (val_nmse, _) = network.evaluate(&env.data.validation)?;
        let (test_nmse, _) = network.evaluate(&env.data.test)?;
        Ok(Prepared { source: Some(TransferSource { candidates, selected, loaded_from, network, record, val_nmse, test_nmse }) })
    }

    fn train(&self, env: &Env<'_>, prepared: &Prepared, spec: &NetworkSpec, _: usize) -> Result<RunOutput> {
        let source = prepared.source.as_ref().ok_or_else(|| Error::Config("transfer source not prepared".into()))?;
        ridge_output(env, train_transfer(spec, &source.record, env.data, &env.cfg.ridge)?)
    }
}

/// Regimes by name.
pub struct RegimeRegistry {
    regimes: BTreeMap<&'static str, Box<dyn Regime>>,
}

impl RegimeRegistry {
    pub fn empty() -> Self {
        Self { regimes: BTreeMap::new() }
    }

    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Monolithic));
        r.register(Box::new(Engineered));
        r.register(Box::new(Bptt));
        r.register(Box::new(Transfer));
        r
    }

    pub fn register(&mut self, regime: Box<dyn Regime>) {
        self.regimes.insert(regime.name(), regime);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Regime> {
        self.regimes.get(name).map(|b| b.as_ref()).ok_or_else(|| {
            Error::Config(format!("unknown regime {name:?}; known: {}", self.names().collect::<Vec<_>>().join(", ")))
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.regimes.keys().copied()
    }
}

impl Default for RegimeRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Scale;

    #[test]
    fn registry_lookup() {
        let r = RegimeRegistry::standard();
        assert_eq!(r.names().collect::<Vec<_>>(), ["bptt", "engineered", "monolithic", "transfer"]);
        assert_eq!(r.get("bptt").unwrap().architecture(), Architecture::Chain3);
        assert!(matches!(r.get("hyperopt"), Err(Error::Config(_))));
    }

    #[test]
    fn transfer_reservoirs_differ_from_sources() {
        let cfg = ExperimentConfig::preset(Scale::Desk);
        let data = DatasetSplit::uniform(300, 0).unwrap();
        let env = Env { cfg: &cfg, data: &data };
        let seeds = |r: &dyn Regime, run: usize| {
            let i = r.seed_offset() + run;
            env.spec(r.architecture(), i).nodes.iter().map(|n| n.params.seed).collect::<Vec<_>>()
        };
        for run in 0..3 {
            assert_ne!(seeds(&Transfer, run), seeds(&Bptt, run));
            assert_ne!(seeds(&Transfer, run), seeds(&Bptt, SOURCE_RUN_OFFSET + run));
        }
    }

    #[test]
    fn transfer_without_source_rejected() {
        let mut cfg = ExperimentConfig::preset(Scale::Desk);
        cfg.transfer.train_source = false;
        assert!(matches!(Transfer.validate(&cfg), Err(Error::Config(_))));
        cfg.transfer.source = Some("net.json".into());
        assert!(Transfer.validate(&cfg).is_ok());
    }
}
