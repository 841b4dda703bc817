//! Gradient noise, clipping, decoupled weight decay and Adam.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::BpttConfig;

/// Learning rate for a 0-based epoch: `lr0`, halved once from `lr_halving_epoch` on.
pub fn learning_rate(cfg: &BpttConfig, epoch: usize) -> f64 {
    if epoch < cfg.lr_halving_epoch {
        cfg.lr0
    } else {
        cfg.lr0 / 2.0
    }
}

pub fn global_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `g` so its global norm is at most `max_norm`.
pub fn clip_global_norm(g: &mut [f64], max_norm: f64) {
    let norm = global_norm(g);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        g.iter_mut().for_each(|v| *v *= s);
    }
}

/// Adam moments plus the gradient-noise stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Entries subject to weight decay.
    pub decay_mask: Vec<bool>,
    #[serde(skip, default = "default_rng")]
    noise_rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl Optimizer {
    pub fn new(decay_mask: Vec<bool>, noise_seed: u64) -> Self {
        let n = decay_mask.len();
        Self { m: vec![0.0; n], v: vec![0.0; n], decay_mask, noise_rng: ChaCha8Rng::seed_from_u64(noise_seed) }
    }

    /// One update at 1-based `step` with learning rate `lr`:
    /// noise with variance `eta / (1 + step)^0.55`, global-norm clipping,
    /// decoupled weight decay on masked entries, then Adam.
    pub fn apply_update(&mut self, params: &mut [f64], grads: &mut [f64], cfg: &BpttConfig, step: u64, lr: f64) {
        assert!(step >= 1, "steps are 1-based");
        assert_eq!(params.len(), grads.len());
        if cfg.grad_noise_eta > 0.0 {
            let std = (cfg.grad_noise_eta / (1.0 + step as f64).powf(0.55)).sqrt();
            for g in grads.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut self.noise_rng);
                *g += std * z;
            }
        }
        clip_global_norm(grads, cfg.grad_clip_norm);
        for (p, &decay) in params.iter_mut().zip(&self.decay_mask) {
            if decay {
                *p -= lr * cfg.weight_decay * *p;
            }
        }
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powf(step as f64);
        let c2 = 1.0 - b2.powf(step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> BpttConfig {
        BpttConfig { grad_noise_eta: 0.0, ..BpttConfig::default() }
    }

    #[test]
    fn schedule_halves_once() {
        let c = BpttConfig::default();
        assert_eq!(learning_rate(&c, 0), 0.0005);
        assert_eq!(learning_rate(&c, 59), 0.0005);
        assert_eq!(learning_rate(&c, 60), 0.00025);
        assert_eq!(learning_rate(&c, 119), 0.00025);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let c = cfg();
        let mut opt = Optimizer::new(vec![true, false], 1);
        let mut p = vec![2.0, 3.0];
        opt.apply_update(&mut p, &mut [0.0, 0.0], &c, 1, 0.1);
        assert_eq!(p[0], 2.0 - 0.1 * c.weight_decay * 2.0);
        assert_eq!(p[1], 3.0);
    }

    #[test]
    fn clipping_hits_threshold() {
        let mut g = vec![1.2, -1.6];
        clip_global_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![0.1, 0.1];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.1]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let c = cfg();
        let mut opt = Optimizer::new(vec![false; 2], 1);
        let mut p = vec![0.0, 0.0];
        opt.apply_update(&mut p, &mut [0.3, -0.2], &c, 1, 0.01);
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn noise_is_seeded() {
        let c = BpttConfig { grad_noise_eta: 0.1, ..BpttConfig::default() };
        let run = |seed| {
            let mut opt = Optimizer::new(vec![false; 3], seed);
            let mut p = vec![0.0; 3];
            opt.apply_update(&mut p, &mut [0.0; 3], &c, 1, 0.01);
            p
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }
}
