//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use multiesn::bptt::{backward, forward_train, ChainModel, Mode, TrainingSet};
use multiesn::esn::{init_reservoir, run, Nonlinearity, ReservoirParams};
use multiesn::network::{build_reservoirs, NetworkSpec};
use multiesn::tasks::{gen_input, narma10, DatasetSplit};
use nalgebra::{DMatrix, DVector};

/// Reservoir states (row-major, `n x features`) and NARMA-10 targets.
pub fn ridge_instance(n: usize, features: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let params = ReservoirParams {
        size: features,
        spectral_radius: 0.9,
        input_scaling: vec![0.5],
        bias_scaling: 0.2,
        input_sparsity: 1.0,
        recurrent_sparsity: 0.3,
        nonlinearity: Nonlinearity::Tanh,
        n_inputs: 1,
        seed,
    };
    let u = gen_input(n + 50, seed);
    let y = narma10(&u).unwrap();
    let states = run(&init_reservoir(&params).unwrap(), &u, 50).unwrap();
    (states.usable().to_vec(), y[50..].to_vec())
}

/// Augmented normal equations `[S'S + lI, S'1; 1'S, n] [w; b] = [S'y; 1'y]`
/// built with plain loops.
pub fn normal_system(rows: &[f64], f: usize, y: &[f64], lambda: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = y.len();
    let mut a = vec![vec![0.0; f + 1]; f + 1];
    let mut b = vec![0.0; f + 1];
    for t in 0..n {
        let s = &rows[t * f..(t + 1) * f];
        for i in 0..f {
            for j in 0..f {
                a[i][j] += s[i] * s[j];
            }
            a[i][f] += s[i];
            a[f][i] += s[i];
            b[i] += s[i] * y[t];
        }
        a[f][f] += 1.0;
        b[f] += y[t];
    }
    for (i, row) in a.iter_mut().enumerate().take(f) {
        row[i] += lambda;
    }
    (a, b)
}

/// Normwise relative residual `|Ax - b| / (|A| |x| + |b|)` with Frobenius `|A|`.
pub fn normal_residual(rows: &[f64], f: usize, y: &[f64], lambda: f64, w: &[f64], b0: f64) -> f64 {
    let (a, b) = normal_system(rows, f, y, lambda);
    let x: Vec<f64> = w.iter().copied().chain([b0]).collect();
    let r: f64 = a.iter().zip(&b).map(|(row, bi)| (row.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>() - bi).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    r / (na * nx + nb)
}

/// Ridge weights from the augmented system by LU, no centering.
pub fn direct_fit(rows: &[f64], f: usize, y: &[f64], lambda: f64) -> (Vec<f64>, f64) {
    let (a, b) = normal_system(rows, f, y, lambda);
    let m = DMatrix::from_fn(f + 1, f + 1, |i, j| a[i][j]);
    let x = m.lu().solve(&DVector::from_vec(b)).expect("solvable");
    (x.iter().take(f).copied().collect(), x[f])
}

/// Contiguous-fold cross-validation by refitting on each training subset
/// and scoring held-out rows directly. Ties go to the larger strength.
pub fn brute_force_cv(rows: &[f64], f: usize, y: &[f64], folds: usize, grid: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len();
    let fold_of = |t: usize| t * folds / n;
    let mut scores = Vec::new();
    for &lambda in grid {
        let mut total = 0.0;
        for k in 0..folds {
            let (mut tr, mut ty, mut hr, mut hy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for t in 0..n {
                let (r, yy) = if fold_of(t) == k { (&mut hr, &mut hy) } else { (&mut tr, &mut ty) };
                r.extend_from_slice(&rows[t * f..(t + 1) * f]);
                yy.push(y[t]);
            }
            let (w, b0) = direct_fit(&tr, f, &ty, lambda);
            let mean = hy.iter().sum::<f64>() / hy.len() as f64;
            let mut sse = 0.0;
            let mut sst = 0.0;
            for (t, yt) in hy.iter().enumerate() {
                let pred: f64 = hr[t * f..(t + 1) * f].iter().zip(&w).map(|(s, wi)| s * wi).sum::<f64>() + b0;
                sse += (pred - yt).powi(2);
                sst += (yt - mean).powi(2);
            }
            total += sse / sst;
        }
        scores.push(total / folds as f64);
    }
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s <= scores[best] {
            best = i;
        }
    }
    (grid[best], scores)
}

/// Two-pass Pearson correlation.
pub fn naive_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    num / (da * db).sqrt()
}

/// 3-node ELU chain of `size` units per node.
pub fn fd_chain(size: usize, seed: u64) -> NetworkSpec {
    let p = |k: u64| ReservoirParams {
        size,
        spectral_radius: 0.9,
        input_scaling: vec![0.8],
        bias_scaling: 0.3,
        input_sparsity: 1.0,
        recurrent_sparsity: 0.4,
        nonlinearity: Nonlinearity::Elu,
        n_inputs: 1,
        seed: seed * 10 + k,
    };
    NetworkSpec::chain3([p(1), p(2), p(3)])
}

/// Max relative error over all parameters, with a 1e-7 absolute floor.
pub fn fd_worst_error(seed: u64, mode: Mode) -> f64 {
    let spec = fd_chain(10, seed);
    let mut model = ChainModel::new(&spec, build_reservoirs(&spec).unwrap(), 0.99, 1e-5, seed).unwrap();
    let data = DatasetSplit::uniform(400, seed).unwrap();
    let set = TrainingSet::new(&model, &data.train.u, &data.train.y, 20, 5).unwrap();
    let batch = [0, 3, 7, 11];
    if mode == Mode::Eval {
        let warm = forward_train(&model, &set, &[1, 2, 4], Mode::Train).unwrap();
        model.update_running(&warm);
    }
    let cache = forward_train(&model, &set, &batch, mode).unwrap();
    let analytic = backward(&model, &cache, 1.0);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let orig = model.params[i];
        model.params[i] = orig + h;
        let up = forward_train(&model, &set, &batch, mode).unwrap().loss;
        model.params[i] = orig - h;
        let down = forward_train(&model, &set, &batch, mode).unwrap().loss;
        model.params[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}
