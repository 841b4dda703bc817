//! End-to-end training of the chain readouts through time.

mod batches;
mod model;
mod optim;

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{build_reservoirs, Architecture, NetworkSpec, TrainedNetwork};
use crate::seeds::{derive_seed, Stream};
use crate::tasks::DatasetSplit;

pub use batches::{chunk_starts, make_batches};
pub use model::{backward, forward_train, BatchCache, ChainModel, Layout, Mode, NodeCache, NodeLayout, RunningStats, TrainingSet};
pub use optim::{clip_global_norm, global_norm, learning_rate, Optimizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpttConfig {
    pub epochs: usize,
    /// Subsequences per batch.
    pub batch_size: usize,
    pub lr0: f64,
    /// 0-based epoch from which the learning rate is halved.
    pub lr_halving_epoch: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub grad_noise_eta: f64,
    pub chunk_length: usize,
    pub chunk_washout: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub seed: u64,
}

impl Default for BpttConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            batch_size: 60,
            lr0: 0.0005,
            lr_halving_epoch: 60,
            weight_decay: 1e-4,
            grad_clip_norm: 1.0,
            grad_noise_eta: 0.01,
            chunk_length: 100,
            chunk_washout: 30,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.99,
            bn_eps: 1e-5,
            seed: 0,
        }
    }
}

impl BpttConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.chunk_length <= self.chunk_washout {
            return bad("chunk_length must exceed chunk_washout");
        }
        if !(self.lr0 > 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("lr0 and grad_clip_norm must be positive");
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_noise_eta >= 0.0) {
            return bad("weight_decay and grad_noise_eta must be non-negative");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return bad("bn_momentum must be in [0, 1) and bn_eps positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nmse: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose snapshot was returned.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,train_loss,val_nmse,lr")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, e.val_nmse, e.lr)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Network document plus optimizer state at the end of training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub network: serde_json::Value,
    pub optimizer: Optimizer,
    pub params: Vec<f64>,
    pub step: u64,
    pub log: TrainLog,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn network(&self) -> Result<TrainedNetwork> {
        TrainedNetwork::from_json(&self.network.to_string())
    }
}

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct BpttOutcome {
    /// Best-validation snapshot, batch norm frozen.
    pub network: TrainedNetwork,
    pub log: TrainLog,
    pub best_val_nmse: f64,
    pub checkpoint: Checkpoint,
}

/// Trains the chain readouts jointly with the full recipe and returns the
/// snapshot with the lowest validation NMSE.
pub fn bptt_train(spec: &NetworkSpec, data: &DatasetSplit, cfg: &BpttConfig) -> Result<BpttOutcome> {
    cfg.validate()?;
    if spec.architecture != Architecture::Chain3 {
        return Err(Error::Config("training through time needs a chain3 network".into()));
    }
    let reservoirs = build_reservoirs(spec)?;
    let mut model = ChainModel::new(spec, reservoirs, cfg.bn_momentum, cfg.bn_eps, derive_seed(cfg.seed, Stream::ReadoutInit, 0))?;
    let set = TrainingSet::new(&model, &data.train.u, &data.train.y, cfg.chunk_length, cfg.chunk_washout)?;
    let mut opt = Optimizer::new(model.layout.decay_mask(), derive_seed(cfg.seed, Stream::GradientNoise, 0));
    let mut log = TrainLog::default();
    let mut best: Option<(f64, TrainedNetwork)> = None;
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let batches = make_batches(set.n_chunks(), cfg.batch_size, derive_seed(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let cache = forward_train(&model, &set, batch, Mode::Train)?;
            if !cache.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += cache.loss;
            let mut grads = backward(&model, &cache, 1.0);
            model.update_running(&cache);
            step += 1;
            opt.apply_update(&mut model.params, &mut grads, cfg, step, lr);
        }
        let net = model.to_network();
        let val_nmse = match net.evaluate(&data.validation) {
            Ok((v, _)) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFiniteState { .. }) => f64::INFINITY,
            Err(e) => return Err(e),
        };
        log.epochs.push(EpochLog { epoch, train_loss: loss_sum / batches.len() as f64, val_nmse, lr });
        if best.as_ref().is_none_or(|(b, _)| val_nmse < *b) {
            log.best_epoch = epoch;
            best = Some((val_nmse, net));
        }
    }
    let (best_val_nmse, network) = best.expect("at least one epoch");
    if !best_val_nmse.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: log.best_epoch, batch: 0 });
    }
    let final_doc: serde_json::Value = serde_json::from_str(&model.to_network().to_json()?)?;
    let checkpoint = Checkpoint { network: final_doc, optimizer: opt, params: model.params.clone(), step, log: log.clone() };
    Ok(BpttOutcome { network, log, best_val_nmse, checkpoint })
}
