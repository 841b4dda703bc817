//! NARMA-10 data, the decomposed subtask targets, and the NMSE metric.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NARMA_ORDER: usize = 10;
/// |y| above this aborts generation.
pub const DIVERGENCE_THRESHOLD: f64 = 10.0;
pub const DEFAULT_SPLIT_LEN: usize = 100_000;
const MAX_REGENERATIONS: u64 = 100;
const RCDS_MAGIC: &[u8; 4] = b"RCDS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeriesRole {
    Input,
    Target,
    Prediction,
}

/// A scalar time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub values: Vec<f64>,
    pub role: SeriesRole,
}

impl Series {
    pub fn new(values: Vec<f64>, role: SeriesRole) -> Self {
        Self { values, role }
    }

    pub fn input(values: Vec<f64>) -> Self {
        Self::new(values, SeriesRole::Input)
    }

    pub fn target(values: Vec<f64>) -> Self {
        Self::new(values, SeriesRole::Target)
    }

    pub fn prediction(values: Vec<f64>) -> Self {
        Self::new(values, SeriesRole::Prediction)
    }
}

impl Deref for Series {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// I.i.d. uniform samples in [0, 0.5].
pub fn gen_input(len: usize, seed: u64) -> Series {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Series::input((0..len).map(|_| rng.random_range(0.0..=0.5)).collect())
}

/// Shared recursion of the full task and its output stage:
/// `y[n+1] = 0.05 y[n] sum_{k<10} y[n-k] + 0.3 y[n] + drive(n) + 0.1`,
/// zero history, stored so that `out[t] = y[t]`.
fn narma_recursion(len: usize, drive: impl Fn(usize) -> f64) -> Result<Vec<f64>> {
    let mut y = Vec::with_capacity(len);
    // window sum of y[n-9..=n]
    let mut window = 0.0;
    for t in 0..len {
        let next: f64 = if t == 0 {
            0.1
        } else {
            let prev = y[t - 1];
            0.05 * prev * window + 0.3 * prev + drive(t - 1) + 0.1
        };
        if !next.is_finite() || next.abs() > DIVERGENCE_THRESHOLD {
            return Err(Error::DivergentSeries { step: t, value: next });
        }
        y.push(next);
        window += next;
        if t >= NARMA_ORDER {
            window -= y[t - NARMA_ORDER];
        }
    }
    Ok(y)
}

/// NARMA-10 desired signal for input `u`.
pub fn narma10(u: &[f64]) -> Result<Series> {
    narma_recursion(u.len(), |n| if n >= 9 { 1.5 * (u[n - 9] * u[n]) } else { 0.0 }).map(Series::target)
}

/// Delay line target `u[n-9]`, zero-padded.
pub fn delay_target(u: &[f64]) -> Series {
    let d = NARMA_ORDER - 1;
    Series::target((0..u.len()).map(|n| if n >= d { u[n - d] } else { 0.0 }).collect())
}

/// Product target `u[n] * y1_hat[n]`.
pub fn product_target(u: &[f64], y1_hat: &[f64]) -> Result<Series> {
    if u.len() != y1_hat.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: y1_hat.len() });
    }
    Ok(Series::target(u.iter().zip(y1_hat).map(|(a, b)| a * b).collect()))
}

/// Output stage: NARMA recursion driven by `1.5 * y2_hat[n]`.
pub fn narma_tail_target(y2_hat: &[f64]) -> Result<Series> {
    narma_recursion(y2_hat.len(), |n| 1.5 * y2_hat[n]).map(Series::target)
}

/// Normalised mean squared error over samples `washout..`, using the population
/// variance of the desired signal on the same window.
pub fn nmse(y_hat: &[f64], y: &[f64], washout: usize) -> Result<f64> {
    if y_hat.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: y.len(), got: y_hat.len() });
    }
    if washout >= y.len() {
        return Err(Error::InvalidParameter(format!("washout {washout} leaves no samples of {}", y.len())));
    }
    let (p, d) = (&y_hat[washout..], &y[washout..]);
    let n = d.len() as f64;
    if d.iter().all(|v| *v == d[0]) {
        return Err(Error::ZeroVariance);
    }
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mse = p.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(mse / var)
}

/// One input/target pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u: Series,
    pub y: Series,
    /// Seed that produced `u` after any divergence retries.
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Generates input and NARMA-10 target. On divergence the seed is advanced
    /// by `seed_stride` and generation retried.
    pub fn generate(len: usize, seed: u64, seed_stride: u64) -> Result<Self> {
        if len == 0 {
            return Err(Error::InvalidParameter("series length must be >= 1".into()));
        }
        let mut s = seed;
        let mut last = None;
        for _ in 0..MAX_REGENERATIONS {
            let u = gen_input(len, s);
            match narma10(&u) {
                Ok(y) => return Ok(Self { u, y, seed: s }),
                Err(e @ Error::DivergentSeries { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
            s = s.wrapping_add(seed_stride);
        }
        Err(last.unwrap_or(Error::DivergentSeries { step: 0, value: f64::NAN }))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "index,u,y")?;
        for (i, (u, y)) in self.u.iter().zip(self.y.iter()).enumerate() {
            writeln!(w, "{i},{u},{y}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "index,u,y" => {}
            _ => return Err(Error::Format(format!("{}: expected header index,u,y", path.display()))),
        }
        let (mut u, mut y) = (Vec::new(), Vec::new());
        for (ln, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Format(format!("line {}: expected 3 columns", ln + 2)));
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Format(format!("line {}: {e}", ln + 2)));
            u.push(parse(cols[1])?);
            y.push(parse(cols[2])?);
        }
        Ok(Self { u: Series::input(u), y: Series::target(y), seed: 0 })
    }

    /// Little-endian binary: `RCDS`, u32 length, then `(u, y)` f64 pairs.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.encode_binary(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn encode_binary(&self, w: &mut impl Write) -> Result<()> {
        let len = u32::try_from(self.len()).map_err(|_| Error::Format("series too long for RCDS".into()))?;
        w.write_all(RCDS_MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        for (u, y) in self.u.iter().zip(self.y.iter()) {
            w.write_all(&u.to_le_bytes())?;
            w.write_all(&y.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        Self::decode_binary(&mut BufReader::new(std::fs::File::open(path)?))
    }

    pub fn decode_binary(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RCDS_MAGIC {
            return Err(Error::Format("bad RCDS magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len) as usize;
        let (mut u, mut y) = (Vec::with_capacity(len), Vec::with_capacity(len));
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            u.push(f64::from_le_bytes(buf));
            r.read_exact(&mut buf)?;
            y.push(f64::from_le_bytes(buf));
        }
        Ok(Self { u: Series::input(u), y: Series::target(y), seed: 0 })
    }
}

/// Train, validation and test series from seeds `seed`, `seed + 1`, `seed + 2`.
/// A diverging split retries with its seed advanced by 3, so the three seed
/// sequences never collide.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl DatasetSplit {
    pub fn generate(train_len: usize, val_len: usize, test_len: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            train: Dataset::generate(train_len, seed, 3)?,
            validation: Dataset::generate(val_len, seed.wrapping_add(1), 3)?,
            test: Dataset::generate(test_len, seed.wrapping_add(2), 3)?,
        })
    }

    pub fn uniform(len: usize, seed: u64) -> Result<Self> {
        Self::generate(len, len, len, seed)
    }
}
