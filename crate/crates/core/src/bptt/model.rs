//! Unrolled forward pass and exact reverse-mode gradients for the three-node
//! chain with batch-normalised readouts.
//!
//! Trainable parameters are, per node, the readout weights and bias and the
//! batch-norm scale and shift. Reservoir weights stay fixed, but gradients
//! still flow through the recurrences of nodes 2 and 3 to reach upstream
//! readouts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::esn::Reservoir;
use crate::network::{BatchNormStats, NetworkSpec, NodeReadout, TrainedNetwork, CHAIN_NODES};
use crate::readout::ReadoutWeights;

/// Offsets of one node's parameters in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeLayout {
    pub size: usize,
    pub w: usize,
    pub b: usize,
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub nodes: [NodeLayout; 3],
    pub len: usize,
}

impl Layout {
    pub fn new(sizes: [usize; 3]) -> Self {
        let mut off = 0;
        let nodes = sizes.map(|n| {
            let l = NodeLayout { size: n, w: off, b: off + n, gamma: off + n + 1, beta: off + 2 * n + 1 };
            off += 3 * n + 1;
            l
        });
        Self { nodes, len: off }
    }

    /// True for readout weights, the entries that receive weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for n in &self.nodes {
            mask[n.w..n.w + n.size].iter_mut().for_each(|m| *m = true);
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

/// Trainable state of a chain network.
#[derive(Debug, Clone)]
pub struct ChainModel {
    pub spec: NetworkSpec,
    /// Chain order: esn1, esn2, esn3.
    pub reservoirs: [Reservoir; 3],
    pub params: Vec<f64>,
    pub layout: Layout,
    pub running: [RunningStats; 3],
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, differentiated through.
    Train,
    /// Frozen running statistics.
    Eval,
}

impl ChainModel {
    /// Readouts drawn from N(0, 1/size) with zero bias; batch norm starts as identity.
    pub fn new(spec: &NetworkSpec, reservoirs: Vec<Reservoir>, momentum: f64, eps: f64, seed: u64) -> Result<Self> {
        let ordered: Vec<Reservoir> = CHAIN_NODES
            .iter()
            .map(|name| {
                spec.node_index(name)
                    .map(|i| reservoirs[i].clone())
                    .ok_or_else(|| Error::Config(format!("chain node {name} missing")))
            })
            .collect::<Result<_>>()?;
        let reservoirs: [Reservoir; 3] = ordered.try_into().expect("three chain nodes");
        let layout = Layout::new([0, 1, 2].map(|k| reservoirs[k].size()));
        let mut params = vec![0.0; layout.len];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for nl in &layout.nodes {
            let dist = Normal::new(0.0, 1.0 / (nl.size as f64).sqrt()).expect("positive std");
            for p in &mut params[nl.w..nl.w + nl.size] {
                *p = dist.sample(&mut rng);
            }
            params[nl.gamma..nl.gamma + nl.size].iter_mut().for_each(|g| *g = 1.0);
        }
        let running = [0, 1, 2].map(|k| RunningStats {
            mean: vec![0.0; layout.nodes[k].size],
            var: vec![1.0; layout.nodes[k].size],
            initialized: false,
        });
        Ok(Self { spec: spec.clone(), reservoirs, params, layout, running, momentum, eps })
    }

    fn node_params(&self, k: usize) -> (&[f64], f64, &[f64], &[f64]) {
        let nl = &self.layout.nodes[k];
        (
            &self.params[nl.w..nl.w + nl.size],
            self.params[nl.b],
            &self.params[nl.gamma..nl.gamma + nl.size],
            &self.params[nl.beta..nl.beta + nl.size],
        )
    }

    /// Frozen network using the running batch-norm statistics.
    pub fn to_network(&self) -> TrainedNetwork {
        let mut readouts = vec![None; self.spec.nodes.len()];
        let mut reservoirs = vec![None; self.spec.nodes.len()];
        for (k, name) in CHAIN_NODES.iter().enumerate() {
            let i = self.spec.node_index(name).expect("validated chain");
            let (w, b, gamma, beta) = self.node_params(k);
            readouts[i] = Some(NodeReadout {
                weights: ReadoutWeights { w: w.to_vec(), b0: b },
                batch_norm: Some(BatchNormStats {
                    mean: self.running[k].mean.clone(),
                    var: self.running[k].var.clone(),
                    gamma: gamma.to_vec(),
                    beta: beta.to_vec(),
                    eps: self.eps,
                }),
            });
            reservoirs[i] = Some(self.reservoirs[k].clone());
        }
        TrainedNetwork {
            spec: self.spec.clone(),
            reservoirs: reservoirs.into_iter().map(Option::unwrap).collect(),
            readouts: readouts.into_iter().map(Option::unwrap).collect(),
        }
    }

    /// Folds batch statistics of a training-mode pass into the running estimates.
    /// The first call copies them.
    pub fn update_running(&mut self, cache: &BatchCache) {
        let m = self.momentum;
        for (k, node) in cache.nodes.iter().enumerate() {
            let rs = &mut self.running[k];
            if rs.initialized {
                for j in 0..rs.mean.len() {
                    rs.mean[j] = m * rs.mean[j] + (1.0 - m) * node.mean[j];
                    rs.var[j] = m * rs.var[j] + (1.0 - m) * node.var[j];
                }
            } else {
                rs.mean.clone_from(&node.mean);
                rs.var.clone_from(&node.var);
                rs.initialized = true;
            }
        }
    }
}

/// Training series cut into chunks, with the (parameter-independent) node-1
/// states precomputed.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub starts: Vec<usize>,
    pub chunk_length: usize,
    pub chunk_washout: usize,
    node1_states: Vec<f64>,
    n1: usize,
}

impl TrainingSet {
    pub fn new(model: &ChainModel, u: &[f64], y: &[f64], chunk_length: usize, chunk_washout: usize) -> Result<Self> {
        if chunk_length <= chunk_washout {
            return Err(Error::InvalidParameter("chunk_length must exceed chunk_washout".into()));
        }
        if u.len() != y.len() || u.len() < chunk_length {
            return Err(Error::InvalidParameter(format!(
                "series of length {} cannot hold a chunk of {chunk_length}",
                u.len()
            )));
        }
        let starts = super::batches::chunk_starts(u.len(), chunk_length);
        let r = &model.reservoirs[0];
        let n1 = r.size();
        let inputs: Vec<f64> = starts.iter().flat_map(|&s| u[s..s + chunk_length].iter().copied()).collect();
        let (node1_states, _) = run_chunks(r, &inputs, starts.len(), chunk_length, false)?;
        Ok(Self { u: u.to_vec(), y: y.to_vec(), starts, chunk_length, chunk_washout, node1_states, n1 })
    }

    pub fn n_chunks(&self) -> usize {
        self.starts.len()
    }
}

/// Activations of one node over a batch; arrays are `[chunk][t][feature]`.
#[derive(Debug, Clone)]
pub struct NodeCache {
    pub states: Vec<f64>,
    /// f'(z) at every state (empty for node 1, which needs no state gradient).
    pub dact: Vec<f64>,
    pub xhat: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// `[chunk][t]`
    pub out: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchCache {
    pub chunks: Vec<usize>,
    pub mode: Mode,
    pub len: usize,
    pub washout: usize,
    pub nodes: [NodeCache; 3],
    pub targets: Vec<f64>,
    pub loss: f64,
}

/// Runs a reservoir from zero state over `b` chunks of `l` steps.
/// `inputs` is `[chunk][t][channel]`.
fn run_chunks(r: &Reservoir, inputs: &[f64], b: usize, l: usize, want_dact: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = r.size();
    let m = r.n_inputs();
    let f = r.nonlinearity();
    let mut states = vec![0.0; b * l * n];
    let mut dact = if want_dact { vec![0.0; b * l * n] } else { Vec::new() };
    let zero = vec![0.0; n];
    let mut z = vec![0.0; n];
    for c in 0..b {
        for t in 0..l {
            let row = (c * l + t) * n;
            let u = &inputs[(c * l + t) * m..(c * l + t + 1) * m];
            let prev = if t == 0 { &zero[..] } else { &states[row - n..row] };
            r.preactivation(prev, u, &mut z);
            for j in 0..n {
                let a = f.apply(z[j]);
                if !a.is_finite() {
                    return Err(Error::NonFiniteState { step: t });
                }
                states[row + j] = a;
                if want_dact {
                    dact[row + j] = f.derivative(z[j]);
                }
            }
        }
    }
    Ok((states, dact))
}

/// Per-feature mean and biased variance over the post-washout samples.
fn batch_stats(x: &[f64], b: usize, l: usize, n: usize, washout: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (b * (l - washout)) as f64;
    let mut mean = vec![0.0; n];
    for c in 0..b {
        for t in washout..l {
            let row = &x[(c * l + t) * n..(c * l + t + 1) * n];
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; n];
    for c in 0..b {
        for t in washout..l {
            let row = &x[(c * l + t) * n..(c * l + t + 1) * n];
            for j in 0..n {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// Normalises every sample and applies the readout.
fn readout_pass(model: &ChainModel, k: usize, states: Vec<f64>, dact: Vec<f64>, mean: Vec<f64>, var: Vec<f64>) -> NodeCache {
    let (w, bias, gamma, beta) = model.node_params(k);
    let n = w.len();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + model.eps).sqrt()).collect();
    let samples = states.len() / n;
    let mut xhat = vec![0.0; states.len()];
    let mut out = vec![0.0; samples];
    for s in 0..samples {
        let x = &states[s * n..(s + 1) * n];
        let xh = &mut xhat[s * n..(s + 1) * n];
        let mut acc = bias;
        for j in 0..n {
            xh[j] = (x[j] - mean[j]) * inv[j];
            // same association as the frozen-network readout
            let h = gamma[j] * (x[j] - mean[j]) / (var[j] + model.eps).sqrt() + beta[j];
            acc += w[j] * h;
        }
        out[s] = acc;
    }
    NodeCache { states, dact, xhat, mean, var, out }
}

/// Unrolled forward pass over the chunks in `batch`. Loss is the mean squared
/// error of the final output against the task target over post-washout steps.
pub fn forward_train(model: &ChainModel, set: &TrainingSet, batch: &[usize], mode: Mode) -> Result<BatchCache> {
    let (b, l, w) = (batch.len(), set.chunk_length, set.chunk_washout);
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let stats = |k: usize, x: &[f64], n: usize| match mode {
        Mode::Train => batch_stats(x, b, l, n, w),
        Mode::Eval => (model.running[k].mean.clone(), model.running[k].var.clone()),
    };

    let n1 = set.n1;
    let mut x1 = Vec::with_capacity(b * l * n1);
    for &c in batch {
        x1.extend_from_slice(&set.node1_states[c * l * n1..(c + 1) * l * n1]);
    }
    let (m1, v1) = stats(0, &x1, n1);
    let node1 = readout_pass(model, 0, x1, Vec::new(), m1, v1);

    let mut in2 = Vec::with_capacity(b * l * 2);
    for (i, &c) in batch.iter().enumerate() {
        let s = set.starts[c];
        for t in 0..l {
            in2.push(set.u[s + t]);
            in2.push(node1.out[i * l + t]);
        }
    }
    let r2 = &model.reservoirs[1];
    let (x2, d2) = run_chunks(r2, &in2, b, l, true)?;
    let (m2, v2) = stats(1, &x2, r2.size());
    let node2 = readout_pass(model, 1, x2, d2, m2, v2);

    let r3 = &model.reservoirs[2];
    let (x3, d3) = run_chunks(r3, &node2.out, b, l, true)?;
    let (m3, v3) = stats(2, &x3, r3.size());
    let node3 = readout_pass(model, 2, x3, d3, m3, v3);

    let mut targets = Vec::with_capacity(b * l);
    for &c in batch {
        let s = set.starts[c];
        targets.extend_from_slice(&set.y[s..s + l]);
    }
    let mut sse = 0.0;
    for c in 0..b {
        for t in w..l {
            let e = node3.out[c * l + t] - targets[c * l + t];
            sse += e * e;
        }
    }
    let loss = sse / (b * (l - w)) as f64;
    Ok(BatchCache { chunks: batch.to_vec(), mode, len: l, washout: w, nodes: [node1, node2, node3], targets, loss })
}

/// Readout and batch-norm backward for node `k`. Accumulates parameter
/// gradients into `grads` and, if `want_states`, returns dL/d(states).
fn readout_backward(
    model: &ChainModel,
    cache: &BatchCache,
    k: usize,
    g_out: &[f64],
    grads: &mut [f64],
    want_states: bool,
) -> Vec<f64> {
    let nl = model.layout.nodes[k];
    let (w, _, gamma, beta) = model.node_params(k);
    let node = &cache.nodes[k];
    let n = nl.size;
    let samples = g_out.len();
    let mut dw = vec![0.0; n];
    let mut db = 0.0;
    let mut dgamma = vec![0.0; n];
    let mut dbeta = vec![0.0; n];
    let mut dxhat = if want_states { vec![0.0; samples * n] } else { Vec::new() };
    for s in 0..samples {
        let g = g_out[s];
        if g == 0.0 {
            continue;
        }
        let xh = &node.xhat[s * n..(s + 1) * n];
        db += g;
        for j in 0..n {
            dw[j] += g * (gamma[j] * xh[j] + beta[j]);
            let dh = g * w[j];
            dgamma[j] += dh * xh[j];
            dbeta[j] += dh;
            if want_states {
                dxhat[s * n + j] = dh * gamma[j];
            }
        }
    }
    for j in 0..n {
        grads[nl.w + j] += dw[j];
        grads[nl.gamma + j] += dgamma[j];
        grads[nl.beta + j] += dbeta[j];
    }
    grads[nl.b] += db;
    if !want_states {
        return Vec::new();
    }

    let inv: Vec<f64> = node.var.iter().map(|v| 1.0 / (v + model.eps).sqrt()).collect();
    let mut dx: Vec<f64> = dxhat.iter().enumerate().map(|(i, h)| h * inv[i % n]).collect();
    if cache.mode == Mode::Train {
        let (l, wash) = (cache.len, cache.washout);
        let b = samples / l;
        let m = (b * (l - wash)) as f64;
        let mut sum_h = vec![0.0; n];
        let mut sum_hc = vec![0.0; n];
        for s in 0..samples {
            for j in 0..n {
                let h = dxhat[s * n + j];
                sum_h[j] += h;
                sum_hc[j] += h * (node.states[s * n + j] - node.mean[j]);
            }
        }
        let dmu: Vec<f64> = (0..n).map(|j| -inv[j] * sum_h[j]).collect();
        let dvar: Vec<f64> = (0..n).map(|j| -0.5 * inv[j].powi(3) * sum_hc[j]).collect();
        for c in 0..b {
            for t in wash..l {
                let s = c * l + t;
                for j in 0..n {
                    dx[s * n + j] += (dmu[j] + 2.0 * dvar[j] * (node.states[s * n + j] - node.mean[j])) / m;
                }
            }
        }
    }
    dx
}

/// Backpropagates dL/d(states) through a reservoir's recurrence and returns
/// dL/d(input channel `channel`) at every step.
fn recurrence_backward(r: &Reservoir, dact: &[f64], dx: &[f64], b: usize, l: usize, channel: usize) -> Vec<f64> {
    let n = r.size();
    let w_in = r.input_column(channel);
    let wt = r.recurrent_transposed();
    let mut d_in = vec![0.0; b * l];
    let mut delta = vec![0.0; n];
    let mut carry = vec![0.0; n];
    for c in 0..b {
        delta.iter_mut().for_each(|d| *d = 0.0);
        for t in (0..l).rev() {
            let row = (c * l + t) * n;
            carry.copy_from_slice(&dx[row..row + n]);
            if t + 1 < l {
                wt.mul_vec_add(&delta, &mut carry);
            }
            let mut acc = 0.0;
            for j in 0..n {
                delta[j] = carry[j] * dact[row + j];
                acc += w_in[j] * delta[j];
            }
            d_in[c * l + t] = acc;
        }
    }
    d_in
}

/// Exact gradient of `scale * loss` with respect to every trainable parameter.
pub fn backward(model: &ChainModel, cache: &BatchCache, scale: f64) -> Vec<f64> {
    let (l, w) = (cache.len, cache.washout);
    let b = cache.chunks.len();
    let m = (b * (l - w)) as f64;
    let mut grads = vec![0.0; model.layout.len];
    let out3 = &cache.nodes[2].out;
    let mut g3 = vec![0.0; b * l];
    for c in 0..b {
        for t in w..l {
            let s = c * l + t;
            g3[s] = scale * 2.0 * (out3[s] - cache.targets[s]) / m;
        }
    }
    let dx3 = readout_backward(model, cache, 2, &g3, &mut grads, true);
    let g2 = recurrence_backward(&model.reservoirs[2], &cache.nodes[2].dact, &dx3, b, l, 0);
    let dx2 = readout_backward(model, cache, 1, &g2, &mut grads, true);
    let g1 = recurrence_backward(&model.reservoirs[1], &cache.nodes[1].dact, &dx2, b, l, 1);
    readout_backward(model, cache, 0, &g1, &mut grads, false);
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_reservoirs;
    use crate::tasks::DatasetSplit;

    fn tiny(seed: u64) -> (ChainModel, TrainingSet) {
        let spec = crate::network::tests::small_chain(6, seed);
        let model = ChainModel::new(&spec, build_reservoirs(&spec).unwrap(), 0.99, 1e-5, seed).unwrap();
        let data = DatasetSplit::uniform(200, seed).unwrap();
        let set = TrainingSet::new(&model, &data.train.u, &data.train.y, 20, 5).unwrap();
        (model, set)
    }

    #[test]
    fn layout_offsets() {
        let l = Layout::new([2, 3, 1]);
        assert_eq!(l.len, 7 + 10 + 4);
        assert_eq!(l.nodes[1].w, 7);
        assert_eq!(l.nodes[2].beta, 7 + 10 + 3);
        assert_eq!(l.decay_mask().iter().filter(|m| **m).count(), 6);
    }

    #[test]
    fn gradient_scales_linearly() {
        let (model, set) = tiny(3);
        let cache = forward_train(&model, &set, &[0, 2, 4], Mode::Train).unwrap();
        let g1 = backward(&model, &cache, 1.0);
        let g2 = backward(&model, &cache, 2.0);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn severed_path_has_zero_gradient() {
        let (mut model, set) = tiny(4);
        // cut esn1 -> esn2 by zeroing the second input column of esn2
        let r2 = model.reservoirs[1].clone();
        let mut w_in = r2.input_weights().to_vec();
        for i in 0..r2.size() {
            w_in[i * 2 + 1] = 0.0;
        }
        model.reservoirs[1] = Reservoir::from_parts(r2.params().clone(), r2.recurrent().clone(), w_in, r2.bias().to_vec());
        let cache = forward_train(&model, &set, &[1, 3], Mode::Train).unwrap();
        let g = backward(&model, &cache, 1.0);
        let n1 = model.layout.nodes[0];
        assert!(g[..n1.beta + n1.size].iter().all(|v| *v == 0.0));
        assert!(g[n1.beta + n1.size..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn eval_mode_is_repeatable_and_batch_independent() {
        let (mut model, set) = tiny(5);
        let c = forward_train(&model, &set, &[0, 1, 2], Mode::Train).unwrap();
        model.update_running(&c);
        let a = forward_train(&model, &set, &[0, 1], Mode::Eval).unwrap();
        let b = forward_train(&model, &set, &[0, 1], Mode::Eval).unwrap();
        assert_eq!(a.loss, b.loss);
        let solo = forward_train(&model, &set, &[0], Mode::Eval).unwrap();
        assert_eq!(&a.nodes[2].out[..20], &solo.nodes[2].out[..]);
    }

    #[test]
    fn eval_forward_matches_frozen_network() {
        let (mut model, set) = tiny(6);
        let c = forward_train(&model, &set, &[0, 1, 2, 3], Mode::Train).unwrap();
        model.update_running(&c);
        let eval = forward_train(&model, &set, &[2], Mode::Eval).unwrap();
        let net = model.to_network();
        let s = set.starts[2];
        let u = crate::tasks::Series::input(set.u[s..s + 20].to_vec());
        let rec = net.forward(&u).unwrap();
        for (a, b) in rec.final_output().iter().zip(&eval.nodes[2].out) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
