//! Post-processing of run sets: NMSE statistics, correlation matrices
//! between intermediate signals, and plotting excerpts.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{SignalRecord, TrainedNetwork};

/// Length of exported signal excerpts.
pub const EXCERPT_LEN: usize = 100;

/// Pearson correlation of two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter("correlation needs at least two samples".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct RunEntry {
    pub run_id: usize,
    pub network: Option<TrainedNetwork>,
    pub record: SignalRecord,
    pub test_nmse: f64,
}

/// Runs evaluated on one shared test input.
#[derive(Debug, Clone, Default)]
pub struct RunSet {
    runs: Vec<RunEntry>,
}

impl RunSet {
    pub fn new(runs: Vec<RunEntry>) -> Result<Self> {
        if let Some(first) = runs.first() {
            if runs.iter().any(|r| r.record.input != first.record.input) {
                return Err(Error::InvalidParameter("run records do not share the same input".into()));
            }
        }
        Ok(Self { runs })
    }

    pub fn runs(&self) -> &[RunEntry] {
        &self.runs
    }

    pub fn len(&self) -> usize {
        self.runs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    /// Row-major, `labels.len()` squared.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.dim() + j]
    }

    /// Header row `label,<labels...>`, then one labelled row per signal.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "label,{}", self.labels.join(","))?;
        for (i, l) in self.labels.iter().enumerate() {
            let row: Vec<String> = (0..self.dim()).map(|j| self.get(i, j).to_string()).collect();
            writeln!(w, "{l},{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Correlation matrix over named signals, each cut at `washout`.
pub fn correlation_matrix(signals: &[(String, &[f64])], washout: usize) -> Result<CorrelationMatrix> {
    let d = signals.len();
    let mut values = vec![0.0; d * d];
    for i in 0..d {
        let a = signals[i].1.get(washout..).unwrap_or(&[]);
        for j in i..d {
            let b = signals[j].1.get(washout..).unwrap_or(&[]);
            let r = if i == j { pearson(a, a).map(|_| 1.0)? } else { pearson(a, b)? };
            values[i * d + j] = r;
            values[j * d + i] = r;
        }
    }
    Ok(CorrelationMatrix { labels: signals.iter().map(|(l, _)| l.clone()).collect(), values })
}

pub fn run_label(run_id: usize) -> String {
    format!("run_{run_id:02}")
}

fn node_signals<'a>(reference: &'a SignalRecord, runs: &'a RunSet, node: usize) -> Result<Vec<(String, &'a [f64])>> {
    if !(1..=2).contains(&node) {
        return Err(Error::InvalidParameter(format!("node index {node} not in 1..=2")));
    }
    let missing = || Error::InvalidParameter(format!("record has no output for node {node}"));
    let mut out = vec![("engineered".to_string(), &reference.chain_node(node).ok_or_else(missing)?[..])];
    for r in runs.runs() {
        out.push((run_label(r.run_id), &r.record.chain_node(node).ok_or_else(missing)?[..]));
    }
    Ok(out)
}

/// Correlations between the reference signal of chain node `node` and each
/// run's corresponding output.
pub fn correlation_table(reference: &SignalRecord, runs: &RunSet, node: usize, washout: usize) -> Result<CorrelationMatrix> {
    correlation_matrix(&node_signals(reference, runs, node)?, washout)
}

/// `timestep,engineered,run_00,...` for `EXCERPT_LEN` steps after washout.
pub fn write_excerpt_csv(reference: &SignalRecord, runs: &RunSet, node: usize, washout: usize, path: &Path) -> Result<()> {
    let signals = node_signals(reference, runs, node)?;
    let len = signals.iter().map(|(_, s)| s.len()).min().unwrap_or(0);
    let end = (washout + EXCERPT_LEN).min(len);
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let labels: Vec<&str> = signals.iter().map(|(l, _)| l.as_str()).collect();
    writeln!(w, "timestep,{}", labels.join(","))?;
    for t in washout..end {
        let row: Vec<String> = signals.iter().map(|(_, s)| s[t].to_string()).collect();
        writeln!(w, "{t},{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub best_run: usize,
    pub best_nmse: f64,
    pub count: usize,
}

/// Summary over `(run_id, nmse)` pairs; `None` when empty.
pub fn summarize_values(values: &[(usize, f64)]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|(_, v)| v).sum::<f64>() / n;
    let var = values.iter().map(|(_, v)| (v - mean).powi(2)).sum::<f64>() / n;
    let &(best_run, best_nmse) = values
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("nonempty");
    Some(Summary { mean, std: var.sqrt(), best_run, best_nmse, count: values.len() })
}

pub fn summarize(runs: &RunSet) -> Option<Summary> {
    summarize_values(&runs.runs().iter().map(|r| (r.run_id, r.test_nmse)).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_input, Series};

    fn record(u: &Series, y1: Vec<f64>, y2: Vec<f64>) -> SignalRecord {
        let y3 = y2.clone();
        SignalRecord {
            input: u.clone(),
            signals: crate::network::CHAIN_NODES
                .iter()
                .map(|s| s.to_string())
                .zip([Series::prediction(y1), Series::prediction(y2), Series::prediction(y3)])
                .collect(),
            output: "esn3".into(),
        }
    }

    fn entry(run_id: usize, record: SignalRecord, test_nmse: f64) -> RunEntry {
        RunEntry { run_id, network: None, record, test_nmse }
    }

    #[test]
    fn pearson_identities() {
        let a = gen_input(500, 1);
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|x| 3.0 - x).collect();
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&a, &[1.0; 500]), Err(Error::ZeroVariance));
        assert!(pearson(&a[..3], &a[..4]).is_err());
    }

    #[test]
    fn summary_arithmetic() {
        let s = summarize_values(&[(0, 0.02), (1, 0.04)]).unwrap();
        assert!((s.mean - 0.03).abs() < 1e-15);
        assert!((s.std - 0.01).abs() < 1e-15);
        assert_eq!(s.best_run, 0);
        let one = summarize_values(&[(4, 0.3)]).unwrap();
        assert_eq!((one.std, one.best_run), (0.0, 4));
        assert_eq!(summarize_values(&[(3, 0.1), (1, 0.1), (2, 0.2)]).unwrap().best_run, 1);
        assert!(summarize_values(&[]).is_none());
    }

    #[test]
    fn self_run_correlates_perfectly() {
        let u = gen_input(400, 2);
        let reference = SignalRecord::engineered_targets(&u).unwrap();
        let runs = RunSet::new(vec![entry(0, reference.clone(), 0.0)]).unwrap();
        for node in [1, 2] {
            let m = correlation_table(&reference, &runs, node, 50).unwrap();
            assert_eq!(m.labels, ["engineered", "run_00"]);
            assert!((m.get(0, 1) - 1.0).abs() < 1e-12);
        }
        assert!(correlation_table(&reference, &runs, 3, 50).is_err());
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let a = SignalRecord::engineered_targets(&gen_input(100, 1)).unwrap();
        let b = SignalRecord::engineered_targets(&gen_input(100, 2)).unwrap();
        assert!(RunSet::new(vec![entry(0, a, 0.1), entry(1, b, 0.1)]).is_err());
    }

    #[test]
    fn permutation_is_consistent() {
        let u = gen_input(300, 3);
        let reference = SignalRecord::engineered_targets(&u).unwrap();
        let runs: Vec<RunEntry> = (0..3)
            .map(|k| {
                let y: Vec<f64> = gen_input(300, 10 + k as u64).iter().zip(u.iter()).map(|(n, x)| x + 0.3 * n).collect();
                entry(k, record(&u, y.clone(), y), 0.1)
            })
            .collect();
        let fwd = correlation_table(&reference, &RunSet::new(runs.clone()).unwrap(), 1, 20).unwrap();
        let rev = correlation_table(&reference, &RunSet::new(runs.into_iter().rev().collect()).unwrap(), 1, 20).unwrap();
        let perm = [0, 3, 2, 1];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(fwd.get(i, j), rev.get(perm[i], perm[j]));
            }
        }
    }
}
