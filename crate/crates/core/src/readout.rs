//! Ridge-regression readouts with contiguous-fold cross-validation.
//!
//! Fitting works from accumulated moments (`sum s`, `sum s s^T`, `sum s y`, ...)
//! so long trajectories can be streamed row by row. Each fold keeps its own
//! moments; training on "all folds but k" is a sum of moments.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition estimate above which an unregularised system is rejected.
pub const MAX_CONDITION: f64 = 1e12;
const BLOCK_ROWS: usize = 512;

/// Affine map `s . w + b0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutWeights {
    pub w: Vec<f64>,
    pub b0: f64,
}

impl ReadoutWeights {
    pub fn zeros(features: usize) -> Self {
        Self { w: vec![0.0; features], b0: 0.0 }
    }

    #[inline]
    pub fn apply(&self, s: &[f64]) -> f64 {
        self.b0 + self.w.iter().zip(s).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeConfig {
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
}

impl Default for RidgeConfig {
    /// 13 log-spaced strengths from 1e-9 to 1e3, 5 folds.
    fn default() -> Self {
        Self { lambda_grid: (-9..=3).map(|e| 10f64.powi(e)).collect(), folds: 5 }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::InvalidParameter("lambda grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidParameter("lambda values must be finite and >= 0".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("lambda grid must be sorted ascending".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidParameter("need at least 2 folds".into()));
        }
        Ok(())
    }
}

/// Sufficient statistics of a set of rows, in coordinates shifted by a common
/// offset to limit cancellation.
#[derive(Debug, Clone)]
struct Moments {
    n: f64,
    sum_s: DVector<f64>,
    sum_y: f64,
    gram: DMatrix<f64>,
    cross: DVector<f64>,
    sum_yy: f64,
}

impl Moments {
    fn zeros(f: usize) -> Self {
        Self {
            n: 0.0,
            sum_s: DVector::zeros(f),
            sum_y: 0.0,
            gram: DMatrix::zeros(f, f),
            cross: DVector::zeros(f),
            sum_yy: 0.0,
        }
    }

    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.sum_s += &o.sum_s;
        self.sum_y += o.sum_y;
        self.gram += &o.gram;
        self.cross += &o.cross;
        self.sum_yy += o.sum_yy;
    }

    /// Centred Gram, centred cross term, centred `sum (y - ybar)^2`, means.
    fn centred(&self) -> (DMatrix<f64>, DVector<f64>, f64, DVector<f64>, f64) {
        let ms = &self.sum_s / self.n;
        let my = self.sum_y / self.n;
        let c = &self.gram - (&ms * ms.transpose()) * self.n;
        let cy = &self.cross - &ms * (self.n * my);
        let cyy = self.sum_yy - self.n * my * my;
        (c, cy, cyy, ms, my)
    }
}

/// Streams rows into contiguous folds. Row `i` of `total` lands in fold
/// `i * folds / total`.
#[derive(Debug, Clone)]
pub struct FoldedMoments {
    features: usize,
    total: usize,
    folds: Vec<Moments>,
    pushed: usize,
    shift_s: Option<Vec<f64>>,
    shift_y: f64,
    buf_s: Vec<f64>,
    buf_y: Vec<f64>,
    buf_fold: usize,
}

impl FoldedMoments {
    pub fn new(features: usize, total: usize, folds: usize) -> Result<Self> {
        if folds < 1 || total < folds {
            return Err(Error::InvalidParameter(format!("{total} rows cannot fill {folds} folds")));
        }
        Ok(Self {
            features,
            total,
            folds: vec![Moments::zeros(features); folds],
            pushed: 0,
            shift_s: None,
            shift_y: 0.0,
            buf_s: Vec::with_capacity(BLOCK_ROWS * features),
            buf_y: Vec::with_capacity(BLOCK_ROWS),
            buf_fold: 0,
        })
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn folds(&self) -> usize {
        self.folds.len()
    }

    pub fn push_row(&mut self, s: &[f64], y: f64) -> Result<()> {
        if s.len() != self.features {
            return Err(Error::DimensionMismatch { expected: self.features, got: s.len() });
        }
        if self.pushed >= self.total {
            return Err(Error::InvalidParameter("more rows pushed than declared".into()));
        }
        let fold = self.pushed * self.folds.len() / self.total;
        if fold != self.buf_fold || self.buf_y.len() == BLOCK_ROWS {
            self.flush();
            self.buf_fold = fold;
        }
        self.buf_s.extend_from_slice(s);
        self.buf_y.push(y);
        self.pushed += 1;
        Ok(())
    }

    pub fn push_rows(&mut self, rows: &[f64], y: &[f64]) -> Result<()> {
        if rows.len() != y.len() * self.features {
            return Err(Error::DimensionMismatch { expected: y.len() * self.features, got: rows.len() });
        }
        for (s, &t) in rows.chunks_exact(self.features).zip(y) {
            self.push_row(s, t)?;
        }
        Ok(())
    }

    fn flush(&mut self) {
        let k = self.buf_y.len();
        if k == 0 {
            return;
        }
        let f = self.features;
        if self.shift_s.is_none() {
            let mut m = vec![0.0; f];
            for row in self.buf_s.chunks_exact(f) {
                m.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            m.iter_mut().for_each(|a| *a /= k as f64);
            self.shift_y = self.buf_y.iter().sum::<f64>() / k as f64;
            self.shift_s = Some(m);
        }
        let shift = self.shift_s.as_ref().expect("shift set above");
        let block = DMatrix::from_fn(k, f, |r, c| self.buf_s[r * f + c] - shift[c]);
        let ys = DVector::from_iterator(k, self.buf_y.iter().map(|y| y - self.shift_y));
        let m = &mut self.folds[self.buf_fold];
        m.n += k as f64;
        m.gram.gemm_tr(1.0, &block, &block, 1.0);
        m.cross.gemv_tr(1.0, &block, &ys, 1.0);
        for c in 0..f {
            m.sum_s[c] += block.column(c).sum();
        }
        m.sum_y += ys.sum();
        m.sum_yy += ys.dot(&ys);
        self.buf_s.clear();
        self.buf_y.clear();
    }

    /// Closes the stream. All declared rows must have been pushed.
    pub fn finish(mut self) -> Result<FoldStats> {
        if self.pushed != self.total {
            return Err(Error::DimensionMismatch { expected: self.total, got: self.pushed });
        }
        self.flush();
        Ok(FoldStats {
            features: self.features,
            shift_s: DVector::from_vec(self.shift_s.unwrap_or_else(|| vec![0.0; self.features])),
            shift_y: self.shift_y,
            folds: self.folds,
        })
    }
}

/// Per-fold moments ready for fitting and cross-validation.
#[derive(Debug, Clone)]
pub struct FoldStats {
    features: usize,
    shift_s: DVector<f64>,
    shift_y: f64,
    folds: Vec<Moments>,
}

/// Cross-validation outcome: chosen strength and mean validation NMSE per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    /// `(lambda, mean NMSE)`; NaN marks a strength whose fit failed.
    pub scores: Vec<(f64, f64)>,
}

impl FoldStats {
    pub fn from_rows(rows: &[f64], features: usize, y: &[f64], folds: usize) -> Result<Self> {
        let mut acc = FoldedMoments::new(features, y.len(), folds)?;
        acc.push_rows(rows, y)?;
        acc.finish()
    }

    fn combined(&self, skip: Option<usize>) -> Moments {
        let mut m = Moments::zeros(self.features);
        for (i, f) in self.folds.iter().enumerate() {
            if Some(i) != skip {
                m.add(f);
            }
        }
        m
    }

    fn solve(&self, m: &Moments, lambda: f64) -> Result<ReadoutWeights> {
        let (mut c, cy, _, ms, my) = m.centred();
        if lambda == 0.0 {
            let eig = c.clone().symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
            let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            if !(condition <= MAX_CONDITION) {
                return Err(Error::SingularSystem { condition });
            }
        }
        for i in 0..self.features {
            c[(i, i)] += lambda;
        }
        let w = c
            .cholesky()
            .ok_or(Error::SingularSystem { condition: f64::INFINITY })?
            .solve(&cy);
        let b0 = (self.shift_y + my) - w.dot(&(&self.shift_s + ms));
        let out = ReadoutWeights { w: w.iter().copied().collect(), b0 };
        if !out.b0.is_finite() || out.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem { condition: f64::INFINITY });
        }
        Ok(out)
    }

    /// Fit on every fold.
    pub fn fit(&self, lambda: f64) -> Result<ReadoutWeights> {
        self.solve(&self.combined(None), lambda)
    }

    /// Validation NMSE of `w` on fold `k`, evaluated from the fold's moments.
    fn fold_nmse(&self, w: &ReadoutWeights, k: usize) -> Result<f64> {
        let m = &self.folds[k];
        let (c, cy, cyy, ms, my) = m.centred();
        if !(cyy > 0.0) {
            return Err(Error::ZeroVariance);
        }
        let wv = DVector::from_column_slice(&w.w);
        // mean residual on the fold, in original coordinates
        let d = wv.dot(&(&self.shift_s + &ms)) + w.b0 - (self.shift_y + my);
        let sse = (wv.dot(&(&c * &wv)) - 2.0 * wv.dot(&cy) + cyy + m.n * d * d).max(0.0);
        Ok(sse / cyy)
    }

    /// Grid search over `cfg.lambda_grid`, scoring each strength by mean
    /// held-out NMSE. Ties go to the larger strength.
    pub fn cv_select(&self, cfg: &RidgeConfig) -> Result<CvResult> {
        cfg.validate()?;
        let k = self.folds.len();
        if k < 2 {
            return Err(Error::InvalidParameter("cross-validation needs >= 2 folds".into()));
        }
        let train: Vec<Moments> = (0..k).map(|i| self.combined(Some(i))).collect();
        let mut scores = Vec::with_capacity(cfg.lambda_grid.len());
        let mut best: Option<(f64, f64)> = None;
        let mut last_err = None;
        for &lambda in &cfg.lambda_grid {
            let score = (0..k)
                .map(|i| self.solve(&train[i], lambda).and_then(|w| self.fold_nmse(&w, i)))
                .sum::<Result<f64>>()
                .map(|s| s / k as f64);
            match score {
                Ok(s) => {
                    scores.push((lambda, s));
                    if best.is_none_or(|(_, b)| s <= b) {
                        best = Some((lambda, s));
                    }
                }
                Err(e) => {
                    scores.push((lambda, f64::NAN));
                    last_err = Some(e);
                }
            }
        }
        match best {
            Some((best_lambda, _)) => Ok(CvResult { best_lambda, scores }),
            None => Err(last_err.expect("grid is nonempty")),
        }
    }

    /// Cross-validated strength, then a fit on all folds with it.
    pub fn fit_cv(&self, cfg: &RidgeConfig) -> Result<(ReadoutWeights, CvResult)> {
        let cv = self.cv_select(cfg)?;
        Ok((self.fit(cv.best_lambda)?, cv))
    }
}

fn check_rows(rows: &[f64], features: usize, n: usize) -> Result<()> {
    if features == 0 || rows.len() != n * features {
        return Err(Error::DimensionMismatch { expected: n * features, got: rows.len() });
    }
    Ok(())
}

/// Minimises `|S w + b0 - y|^2 + lambda |w|^2` with an unpenalised bias.
/// `rows` is row-major `N x features`.
pub fn ridge_fit(rows: &[f64], features: usize, y: &[f64], lambda: f64) -> Result<ReadoutWeights> {
    check_rows(rows, features, y.len())?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda {lambda}")));
    }
    FoldStats::from_rows(rows, features, y, 1)?.fit(lambda)
}

pub fn predict(w: &ReadoutWeights, rows: &[f64], features: usize) -> Result<Vec<f64>> {
    if w.w.len() != features || !rows.len().is_multiple_of(features) {
        return Err(Error::DimensionMismatch { expected: w.w.len(), got: features });
    }
    Ok(rows.chunks_exact(features).map(|s| w.apply(s)).collect())
}

pub fn cv_select_lambda(rows: &[f64], features: usize, y: &[f64], cfg: &RidgeConfig) -> Result<CvResult> {
    check_rows(rows, features, y.len())?;
    cfg.validate()?;
    FoldStats::from_rows(rows, features, y, cfg.folds)?.cv_select(cfg)
}
