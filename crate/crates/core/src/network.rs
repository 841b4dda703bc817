//! Networks of reservoirs: the three-node decomposition chain and the
//! single-reservoir baseline.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esn::{init_reservoir_retrying, Nonlinearity, Reservoir, ReservoirParams, DEFAULT_WASHOUT};
use crate::linalg::CsrMatrix;
use crate::readout::{CvResult, FoldedMoments, ReadoutWeights, RidgeConfig};
use crate::tasks::{delay_target, narma_tail_target, nmse, product_target, Dataset, DatasetSplit, Series};

pub const NETWORK_FORMAT: &str = "multiesn-network";
pub const NETWORK_FORMAT_VERSION: u32 = 1;
const SEED_REDRAWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Monolithic,
    Chain3,
}

/// Where a node input channel comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    /// The external input `u`.
    Input,
    /// The scalar readout of another node.
    Node(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub params: ReservoirParams,
    pub inputs: Vec<Source>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub architecture: Architecture,
    pub nodes: Vec<NodeSpec>,
    /// Name of the node whose readout is the network output.
    pub output: String,
    /// Leading steps excluded from fitting and scoring.
    pub washout: usize,
}

pub const CHAIN_NODES: [&str; 3] = ["esn1", "esn2", "esn3"];

fn chain3_routing() -> [Vec<Source>; 3] {
    [
        vec![Source::Input],
        vec![Source::Input, Source::Node(CHAIN_NODES[0].into())],
        vec![Source::Node(CHAIN_NODES[1].into())],
    ]
}
pub const MONOLITHIC_NODE: &str = "esn";

impl NetworkSpec {
    /// Single reservoir driven by `u`.
    pub fn monolithic(mut params: ReservoirParams) -> Self {
        params.n_inputs = 1;
        Self {
            architecture: Architecture::Monolithic,
            nodes: vec![NodeSpec { name: MONOLITHIC_NODE.into(), params, inputs: vec![Source::Input] }],
            output: MONOLITHIC_NODE.into(),
            washout: DEFAULT_WASHOUT,
        }
    }

    /// `esn1 <- u`, `esn2 <- (u, esn1)`, `esn3 <- esn2`.
    pub fn chain3(params: [ReservoirParams; 3]) -> Self {
        let nodes = params
            .into_iter()
            .zip(chain3_routing())
            .zip(CHAIN_NODES)
            .map(|((mut params, inputs), name)| {
                params.n_inputs = inputs.len();
                NodeSpec { name: name.into(), params, inputs }
            })
            .collect();
        Self { architecture: Architecture::Chain3, nodes, output: CHAIN_NODES[2].into(), washout: DEFAULT_WASHOUT }
    }

    pub fn node(&self, name: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        let names: BTreeSet<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        if names.len() != self.nodes.len() {
            return cfg("duplicate node names".into());
        }
        if !names.contains(self.output.as_str()) {
            return cfg(format!("output node {} not declared", self.output));
        }
        for n in &self.nodes {
            n.params.validate()?;
            if n.params.n_inputs != n.inputs.len() {
                return cfg(format!("node {} declares {} inputs but routes {}", n.name, n.params.n_inputs, n.inputs.len()));
            }
            for s in &n.inputs {
                if let Source::Node(src) = s {
                    if !names.contains(src.as_str()) {
                        return cfg(format!("node {} reads unknown node {src}", n.name));
                    }
                }
            }
        }
        self.topological_order()?;
        match self.architecture {
            Architecture::Monolithic => {
                if self.nodes.len() != 1 || self.nodes[0].params.nonlinearity != Nonlinearity::Tanh {
                    return cfg("monolithic networks have one tanh node".into());
                }
            }
            Architecture::Chain3 => {
                let routing = chain3_routing();
                let routed_ok = self.nodes.len() == 3
                    && self.output == CHAIN_NODES[2]
                    && self.nodes.iter().all(|n| {
                        CHAIN_NODES.iter().position(|c| *c == n.name).is_some_and(|k| n.inputs == routing[k])
                    });
                if !routed_ok {
                    return cfg("chain3 routing must be esn1<-u, esn2<-(u, esn1), esn3<-esn2".into());
                }
                if self.nodes.iter().any(|n| n.params.nonlinearity != Nonlinearity::Elu) {
                    return cfg("chain3 nodes use ELU".into());
                }
            }
        }
        Ok(())
    }

    /// Node indices in dependency order; ties resolved by name.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut done: BTreeSet<&str> = BTreeSet::new();
        let mut order = Vec::with_capacity(self.nodes.len());
        while order.len() < self.nodes.len() {
            let ready = self
                .nodes
                .iter()
                .enumerate()
                .filter(|(_, n)| !done.contains(n.name.as_str()))
                .filter(|(_, n)| {
                    n.inputs.iter().all(|s| match s {
                        Source::Input => true,
                        Source::Node(src) => done.contains(src.as_str()),
                    })
                })
                .min_by(|a, b| a.1.name.cmp(&b.1.name));
            match ready {
                Some((i, n)) => {
                    done.insert(n.name.as_str());
                    order.push(i);
                }
                None => return Err(Error::Config("routing contains a cycle".into())),
            }
        }
        Ok(order)
    }

    /// Replaces every node's seed with `seed_of(node_position_in_chain_order)`.
    pub fn reseeded(&self, seed_of: impl Fn(usize) -> u64) -> Self {
        let mut out = self.clone();
        for n in &mut out.nodes {
            let k = CHAIN_NODES.iter().position(|c| *c == n.name).unwrap_or(0);
            n.params.seed = seed_of(k);
        }
        out
    }
}

/// Frozen batch-normalisation affine transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

impl BatchNormStats {
    #[inline]
    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = self.gamma[i] * (x[i] - self.mean[i]) / (self.var[i] + self.eps).sqrt() + self.beta[i];
        }
    }
}

/// Readout stage of a node: optional batch norm followed by an affine map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeReadout {
    pub weights: ReadoutWeights,
    pub batch_norm: Option<BatchNormStats>,
}

impl NodeReadout {
    pub fn plain(weights: ReadoutWeights) -> Self {
        Self { weights, batch_norm: None }
    }

    #[inline]
    pub fn output(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        match &self.batch_norm {
            Some(bn) => {
                bn.normalize_into(x, scratch);
                self.weights.apply(scratch)
            }
            None => self.weights.apply(x),
        }
    }
}

/// Per-node outputs of one forward pass, keyed by node name.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub input: Series,
    pub signals: BTreeMap<String, Series>,
    pub output: String,
}

impl SignalRecord {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }

    pub fn final_output(&self) -> &Series {
        &self.signals[&self.output]
    }

    pub fn node(&self, name: &str) -> Option<&Series> {
        self.signals.get(name)
    }

    /// Output of chain node `k` (1-based).
    pub fn chain_node(&self, k: usize) -> Option<&Series> {
        CHAIN_NODES.get(k.wrapping_sub(1)).and_then(|n| self.signals.get(*n))
    }

    /// Hand-designed intermediate targets on input `u`, with perfect upstream modules.
    pub fn engineered_targets(u: &Series) -> Result<Self> {
        let y1 = delay_target(u);
        let y2 = product_target(u, &y1)?;
        let y3 = narma_tail_target(&y2)?;
        let signals = CHAIN_NODES.iter().map(|s| s.to_string()).zip([y1, y2, y3]).collect();
        Ok(Self { input: u.clone(), signals, output: CHAIN_NODES[2].into() })
    }

    fn column_names(&self) -> Vec<(String, &Series)> {
        let mut cols: Vec<(String, &Series)> = Vec::new();
        for (k, name) in CHAIN_NODES.iter().enumerate() {
            if *name != self.output {
                if let Some(s) = self.signals.get(*name) {
                    cols.push((format!("y{}", k + 1), s));
                }
            }
        }
        for (name, s) in &self.signals {
            if name != &self.output && !CHAIN_NODES.contains(&name.as_str()) {
                cols.push((name.clone(), s));
            }
        }
        cols.push(("yfinal".into(), self.final_output()));
        cols
    }

    /// CSV with columns `index,u,y1,y2,yfinal` (intermediates omitted when absent).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let cols = self.column_names();
        let header: Vec<&str> = cols.iter().map(|(n, _)| n.as_str()).collect();
        writeln!(w, "index,u,{}", header.join(","))?;
        for t in 0..self.len() {
            write!(w, "{t},{}", self.input[t])?;
            for (_, s) in &cols {
                write!(w, ",{}", s[t])?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Format(format!("{}: empty signal file", path.display())))?
            .split(',')
            .map(str::to_string)
            .collect();
        if header.len() < 3 || header[0] != "index" || header[1] != "u" || header.last().map(String::as_str) != Some("yfinal") {
            return Err(Error::Format(format!("{}: unexpected header", path.display())));
        }
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
        for (ln, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != header.len() {
                return Err(Error::Format(format!("{}: line {} has {} columns", path.display(), ln + 2, vals.len())));
            }
            for (c, v) in vals.iter().enumerate() {
                cols[c].push(v.parse().map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)))?);
            }
        }
        let n_inter = header.len() - 3;
        let output = if n_inter == 0 { MONOLITHIC_NODE } else { CHAIN_NODES[2] };
        let mut signals = BTreeMap::new();
        for (c, name) in header.iter().enumerate().skip(2) {
            let key = match name.as_str() {
                "yfinal" => output.to_string(),
                "y1" => CHAIN_NODES[0].to_string(),
                "y2" => CHAIN_NODES[1].to_string(),
                other => other.to_string(),
            };
            signals.insert(key, Series::prediction(std::mem::take(&mut cols[c])));
        }
        Ok(Self { input: Series::input(std::mem::take(&mut cols[1])), signals, output: output.into() })
    }
}

/// A network with fixed reservoirs and fitted readouts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNetwork {
    pub spec: NetworkSpec,
    /// Parallel to `spec.nodes`.
    pub reservoirs: Vec<Reservoir>,
    pub readouts: Vec<NodeReadout>,
}

/// Draws all reservoirs of `spec` (redrawing nilpotent ones with the next seed).
pub fn build_reservoirs(spec: &NetworkSpec) -> Result<Vec<Reservoir>> {
    spec.validate()?;
    spec.nodes.iter().map(|n| init_reservoir_retrying(&n.params, SEED_REDRAWS)).collect()
}

/// Row-major input matrix for `node` given the signals produced so far.
fn node_inputs(node: &NodeSpec, u: &[f64], signals: &BTreeMap<String, Series>) -> Result<Vec<f64>> {
    let cols: Vec<&[f64]> = node
        .inputs
        .iter()
        .map(|s| match s {
            Source::Input => Ok(u),
            Source::Node(n) => signals
                .get(n)
                .map(|s| &s[..])
                .ok_or_else(|| Error::Config(format!("signal {n} not yet computed"))),
        })
        .collect::<Result<_>>()?;
    let m = cols.len();
    let mut out = vec![0.0; u.len() * m];
    for (c, col) in cols.iter().enumerate() {
        if col.len() != u.len() {
            return Err(Error::DimensionMismatch { expected: u.len(), got: col.len() });
        }
        for (t, v) in col.iter().enumerate() {
            out[t * m + c] = *v;
        }
    }
    Ok(out)
}

/// Runs `r` over `inputs` and maps every state through `f`.
fn drive(r: &Reservoir, inputs: &[f64], mut f: impl FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
    let n = r.size();
    let mut x = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for (t, u) in inputs.chunks_exact(r.n_inputs()).enumerate() {
        r.step_in_place(&mut x, u, &mut scratch);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: t });
        }
        f(t, &x)?;
    }
    Ok(())
}

/// Scalar readout output of one node over a whole input sequence.
pub fn node_output(r: &Reservoir, readout: &NodeReadout, inputs: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len() / r.n_inputs());
    let mut scratch = vec![0.0; r.size()];
    drive(r, inputs, |_, x| {
        out.push(readout.output(x, &mut scratch));
        Ok(())
    })?;
    Ok(out)
}

/// Fits a ridge readout for one node, λ chosen by cross-validation.
pub fn fit_node(
    r: &Reservoir,
    inputs: &[f64],
    target: &[f64],
    washout: usize,
    cfg: &RidgeConfig,
) -> Result<(ReadoutWeights, CvResult)> {
    let t_len = inputs.len() / r.n_inputs();
    if target.len() != t_len {
        return Err(Error::DimensionMismatch { expected: t_len, got: target.len() });
    }
    if t_len <= washout {
        return Err(Error::InvalidParameter(format!("sequence length {t_len} must exceed washout {washout}")));
    }
    cfg.validate()?;
    let mut acc = FoldedMoments::new(r.size(), t_len - washout, cfg.folds)?;
    drive(r, inputs, |t, x| if t >= washout { acc.push_row(x, target[t]) } else { Ok(()) })?;
    acc.finish()?.fit_cv(cfg)
}

impl TrainedNetwork {
    /// Simulates nodes in dependency order on input `u`.
    pub fn forward(&self, u: &Series) -> Result<SignalRecord> {
        let mut signals = BTreeMap::new();
        for i in self.spec.topological_order()? {
            let node = &self.spec.nodes[i];
            let inputs = node_inputs(node, u, &signals)?;
            let out = node_output(&self.reservoirs[i], &self.readouts[i], &inputs)?;
            signals.insert(node.name.clone(), Series::prediction(out));
        }
        Ok(SignalRecord { input: Series::input(u.values.clone()), signals, output: self.spec.output.clone() })
    }

    pub fn record_signals(&self, u: &Series) -> Result<SignalRecord> {
        self.forward(u)
    }

    /// Test-style score: NMSE of the final output after washout.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, SignalRecord)> {
        let rec = self.forward(&data.u)?;
        let score = nmse(rec.final_output(), &data.y, self.spec.washout)?;
        Ok((score, rec))
    }

    pub fn node_readout(&self, name: &str) -> Option<&NodeReadout> {
        self.spec.node_index(name).map(|i| &self.readouts[i])
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = NetworkDoc {
            format: NETWORK_FORMAT.into(),
            version: NETWORK_FORMAT_VERSION,
            spec: self.spec.clone(),
            nodes: self
                .spec
                .nodes
                .iter()
                .zip(&self.reservoirs)
                .zip(&self.readouts)
                .map(|((n, r), ro)| NodeDoc {
                    name: n.name.clone(),
                    reservoir: ReservoirDoc {
                        params: r.params().clone(),
                        recurrent: r.recurrent().to_row_major(),
                        input: r.input_weights().to_vec(),
                        bias: r.bias().to_vec(),
                    },
                    readout: ro.weights.clone(),
                    batch_norm: ro.batch_norm.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDoc = serde_json::from_str(text)?;
        if doc.format != NETWORK_FORMAT || doc.version != NETWORK_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported network document {} v{}", doc.format, doc.version)));
        }
        doc.spec.validate()?;
        if doc.nodes.len() != doc.spec.nodes.len() {
            return Err(Error::Format("node count does not match spec".into()));
        }
        let mut reservoirs = Vec::new();
        let mut readouts = Vec::new();
        for (spec_node, nd) in doc.spec.nodes.iter().zip(doc.nodes) {
            if nd.name != spec_node.name {
                return Err(Error::Format(format!("node {} out of order", nd.name)));
            }
            let p = nd.reservoir.params;
            let (n, m) = (p.size, p.n_inputs);
            if nd.reservoir.recurrent.len() != n * n || nd.reservoir.input.len() != n * m || nd.reservoir.bias.len() != n {
                return Err(Error::Format(format!("node {}: weight shapes do not match size {n}", nd.name)));
            }
            if nd.readout.w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: nd.readout.w.len() });
            }
            let w = CsrMatrix::from_row_major(n, n, &nd.reservoir.recurrent);
            reservoirs.push(Reservoir::from_parts(p, w, nd.reservoir.input, nd.reservoir.bias));
            readouts.push(NodeReadout { weights: nd.readout, batch_norm: nd.batch_norm });
        }
        Ok(Self { spec: doc.spec, reservoirs, readouts })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkDoc {
    format: String,
    version: u32,
    spec: NetworkSpec,
    nodes: Vec<NodeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeDoc {
    name: String,
    reservoir: ReservoirDoc,
    readout: ReadoutWeights,
    batch_norm: Option<BatchNormStats>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReservoirDoc {
    params: ReservoirParams,
    /// Row-major `size x size`.
    recurrent: Vec<f64>,
    /// Row-major `size x n_inputs`.
    input: Vec<f64>,
    bias: Vec<f64>,
}

/// Supplies each node's ridge target during incremental training.
///
/// `signals` holds the actual outputs of already-trained upstream nodes.
pub trait NodeTargets {
    fn target(&self, node: &str, u: &Series, signals: &BTreeMap<String, Series>, y: &Series) -> Result<Vec<f64>>;
}

/// The hand-designed decomposition: delay line, product, NARMA output stage.
pub struct EngineeredTargets;

impl NodeTargets for EngineeredTargets {
    fn target(&self, node: &str, u: &Series, signals: &BTreeMap<String, Series>, _y: &Series) -> Result<Vec<f64>> {
        let upstream = |n: &str| signals.get(n).ok_or_else(|| Error::Config(format!("{n} not trained yet")));
        Ok(match node {
            "esn1" => delay_target(u).values,
            "esn2" => product_target(u, upstream("esn1")?)?.values,
            "esn3" => narma_tail_target(upstream("esn2")?)?.values,
            other => return Err(Error::Config(format!("no engineered target for node {other}"))),
        })
    }
}

/// Intermediate targets copied from a recorded source network; the output
/// node is fitted to the task target.
pub struct TransferTargets<'a> {
    pub source: &'a SignalRecord,
}

impl NodeTargets for TransferTargets<'_> {
    fn target(&self, node: &str, u: &Series, _signals: &BTreeMap<String, Series>, y: &Series) -> Result<Vec<f64>> {
        if self.source.input.values != u.values {
            return Err(Error::Config("transfer targets were recorded on a different input series".into()));
        }
        if node == CHAIN_NODES[2] || node == self.source.output {
            return Ok(y.values.clone());
        }
        self.source
            .node(node)
            .map(|s| s.values.clone())
            .ok_or_else(|| Error::Config(format!("source record has no signal for {node}")))
    }
}

/// Every node fitted straight to the task target.
pub struct DirectTargets;

impl NodeTargets for DirectTargets {
    fn target(&self, _node: &str, _u: &Series, _s: &BTreeMap<String, Series>, y: &Series) -> Result<Vec<f64>> {
        Ok(y.values.clone())
    }
}

/// Per-node training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFit {
    pub name: String,
    pub cv: CvResult,
}

/// Trains nodes one at a time in dependency order. Each node is driven by the
/// actual outputs of its already-trained predecessors.
pub fn train_incremental(
    spec: &NetworkSpec,
    reservoirs: Vec<Reservoir>,
    data: &Dataset,
    cfg: &RidgeConfig,
    targets: &dyn NodeTargets,
) -> Result<(TrainedNetwork, SignalRecord, Vec<NodeFit>)> {
    spec.validate()?;
    let mut readouts: Vec<Option<NodeReadout>> = vec![None; spec.nodes.len()];
    let mut signals = BTreeMap::new();
    let mut fits = Vec::new();
    for i in spec.topological_order()? {
        let node = &spec.nodes[i];
        let inputs = node_inputs(node, &data.u, &signals)?;
        let target = targets.target(&node.name, &data.u, &signals, &data.y)?;
        let (weights, cv) = fit_node(&reservoirs[i], &inputs, &target, spec.washout, cfg)?;
        let readout = NodeReadout::plain(weights);
        let out = node_output(&reservoirs[i], &readout, &inputs)?;
        signals.insert(node.name.clone(), Series::prediction(out));
        readouts[i] = Some(readout);
        fits.push(NodeFit { name: node.name.clone(), cv });
    }
    let readouts = readouts.into_iter().map(|r| r.expect("all nodes visited")).collect();
    let net = TrainedNetwork { spec: spec.clone(), reservoirs, readouts };
    let record = SignalRecord { input: data.u.clone(), signals, output: spec.output.clone() };
    Ok((net, record, fits))
}

fn require(spec: &NetworkSpec, arch: Architecture) -> Result<()> {
    if spec.architecture != arch {
        return Err(Error::Config(format!("expected a {arch:?} network, got {:?}", spec.architecture)));
    }
    Ok(())
}

/// Hand-designed decomposition, trained node by node on the train split.
/// Returns the network and its train-split signals.
pub fn train_engineered(spec: &NetworkSpec, data: &DatasetSplit, cfg: &RidgeConfig) -> Result<(TrainedNetwork, SignalRecord)> {
    require(spec, Architecture::Chain3)?;
    let (net, rec, _) = train_incremental(spec, build_reservoirs(spec)?, &data.train, cfg, &EngineeredTargets)?;
    Ok((net, rec))
}

pub fn train_monolithic(spec: &NetworkSpec, data: &DatasetSplit, cfg: &RidgeConfig) -> Result<TrainedNetwork> {
    require(spec, Architecture::Monolithic)?;
    Ok(train_incremental(spec, build_reservoirs(spec)?, &data.train, cfg, &DirectTargets)?.0)
}

/// Fresh reservoirs fitted to the intermediate signals `targets` recorded from
/// a source network on the train input.
pub fn train_transfer(
    spec: &NetworkSpec,
    targets: &SignalRecord,
    data: &DatasetSplit,
    cfg: &RidgeConfig,
) -> Result<TrainedNetwork> {
    require(spec, Architecture::Chain3)?;
    Ok(train_incremental(spec, build_reservoirs(spec)?, &data.train, cfg, &TransferTargets { source: targets })?.0)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_params(size: usize, nl: Nonlinearity, seed: u64) -> ReservoirParams {
        ReservoirParams {
            size,
            spectral_radius: 0.8,
            input_scaling: vec![1.0],
            bias_scaling: 0.2,
            input_sparsity: 1.0,
            recurrent_sparsity: 0.3,
            nonlinearity: nl,
            n_inputs: 1,
            seed,
        }
    }

    pub(crate) fn small_chain(size: usize, seed: u64) -> NetworkSpec {
        let mut s = NetworkSpec::chain3(std::array::from_fn(|k| small_params(size, Nonlinearity::Elu, seed + k as u64)));
        s.washout = 50;
        s
    }

    fn zero_readouts(spec: &NetworkSpec) -> TrainedNetwork {
        let reservoirs = build_reservoirs(spec).unwrap();
        let readouts = spec
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeReadout::plain(ReadoutWeights { w: vec![0.0; n.params.size], b0: 0.1 * (i + 1) as f64 }))
            .collect();
        TrainedNetwork { spec: spec.clone(), reservoirs, readouts }
    }

    #[test]
    fn chain_validates_and_orders() {
        let s = small_chain(10, 1);
        s.validate().unwrap();
        assert_eq!(s.topological_order().unwrap(), vec![0, 1, 2]);
        let mut bad = s.clone();
        bad.nodes[0].inputs = vec![Source::Node("esn3".into())];
        assert!(bad.validate().is_err());
        let mut tanh = s.clone();
        tanh.nodes[1].params.nonlinearity = Nonlinearity::Tanh;
        assert!(tanh.validate().is_err());
    }

    #[test]
    fn zero_readouts_emit_bias_constants() {
        let net = zero_readouts(&small_chain(10, 2));
        let u = crate::tasks::gen_input(120, 1);
        let rec = net.forward(&u).unwrap();
        assert!(rec.chain_node(1).unwrap().iter().all(|v| *v == 0.1));
        assert!(rec.chain_node(2).unwrap().iter().all(|v| (*v - 0.2).abs() < 1e-15));
        assert!(rec.final_output().iter().all(|v| (*v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn declaration_order_does_not_matter() {
        let data = DatasetSplit::uniform(800, 5).unwrap();
        let spec = small_chain(12, 3);
        let (net, _) = train_engineered(&spec, &data, &RidgeConfig::default()).unwrap();
        let mut permuted = net.clone();
        permuted.spec.nodes.reverse();
        permuted.reservoirs.reverse();
        permuted.readouts.reverse();
        let a = net.forward(&data.test.u).unwrap();
        let b = permuted.forward(&data.test.u).unwrap();
        assert_eq!(a, b);
        let mut spec_perm = spec.clone();
        spec_perm.nodes.swap(0, 2);
        let (net2, _) = train_engineered(&spec_perm, &data, &RidgeConfig::default()).unwrap();
        assert_eq!(net2.forward(&data.test.u).unwrap(), a);
    }

    #[test]
    fn recorded_intermediate_reproduces_output_stage() {
        let data = DatasetSplit::uniform(800, 6).unwrap();
        let (net, _) = train_engineered(&small_chain(12, 9), &data, &RidgeConfig::default()).unwrap();
        let rec = net.forward(&data.test.u).unwrap();
        let i3 = net.spec.node_index("esn3").unwrap();
        let isolated = node_output(&net.reservoirs[i3], &net.readouts[i3], rec.chain_node(2).unwrap()).unwrap();
        assert_eq!(&isolated, &rec.final_output().values);
    }

    #[test]
    fn monolithic_forward_is_run_plus_predict() {
        let data = DatasetSplit::uniform(600, 7).unwrap();
        let mut spec = NetworkSpec::monolithic(small_params(20, Nonlinearity::Tanh, 4));
        spec.washout = 50;
        let net = train_monolithic(&spec, &data, &RidgeConfig::default()).unwrap();
        let traj = crate::esn::run(&net.reservoirs[0], &data.test.u, 50).unwrap();
        let direct = crate::readout::predict(&net.readouts[0].weights, traj.as_slice(), 20).unwrap();
        assert_eq!(net.forward(&data.test.u).unwrap().final_output().values, direct);
        let mut no_wash = spec.clone();
        no_wash.washout = 0;
        let other = train_monolithic(&no_wash, &data, &RidgeConfig::default()).unwrap();
        assert_ne!(other.readouts[0].weights, net.readouts[0].weights);
    }

    #[test]
    fn transfer_of_engineered_targets_matches_engineered() {
        let data = DatasetSplit::uniform(800, 8).unwrap();
        let spec = small_chain(12, 21);
        let (eng, rec) = train_engineered(&spec, &data, &RidgeConfig::default()).unwrap();
        let u = &data.train.u;
        let mut targets = rec.clone();
        targets.signals.insert("esn1".into(), delay_target(u));
        targets.signals.insert("esn2".into(), product_target(u, rec.chain_node(1).unwrap()).unwrap());
        let tr = train_transfer(&spec, &targets, &data, &RidgeConfig::default()).unwrap();
        assert_eq!(tr.readouts[0], eng.readouts[0]);
        assert_eq!(tr.readouts[1], eng.readouts[1]);
        // node 3 differs by design: it is fitted to y rather than the tail target
        assert!(transfer_rejects_foreign_input(&spec, &targets, &data));
    }

    fn transfer_rejects_foreign_input(spec: &NetworkSpec, targets: &SignalRecord, data: &DatasetSplit) -> bool {
        let mut other = data.clone();
        other.train = other.validation.clone();
        train_transfer(spec, targets, &other, &RidgeConfig::default()).is_err()
    }

    #[test]
    fn json_roundtrip_is_lossless() {
        let data = DatasetSplit::uniform(500, 9).unwrap();
        let (net, _) = train_engineered(&small_chain(8, 30), &data, &RidgeConfig::default()).unwrap();
        let back = TrainedNetwork::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(back, net);
        assert!(TrainedNetwork::from_json(&net.to_json().unwrap().replace("multiesn-network", "other")).is_err());
    }

    #[test]
    fn signal_csv_roundtrip() {
        let rec = SignalRecord::engineered_targets(&crate::tasks::gen_input(40, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        rec.write_csv(&p).unwrap();
        let header = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "index,u,y1,y2,yfinal");
        let back = SignalRecord::read_csv(&p).unwrap();
        assert_eq!(back.final_output().values, rec.final_output().values);
        assert_eq!(back.chain_node(2).unwrap().values, rec.chain_node(2).unwrap().values);
    }

    #[test]
    fn oracle_nodes_reproduce_task() {
        let u = crate::tasks::gen_input(2_000, 77);
        let rec = SignalRecord::engineered_targets(&u).unwrap();
        let y = crate::tasks::narma10(&u).unwrap();
        for (a, b) in rec.final_output().iter().zip(y.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
