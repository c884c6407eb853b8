use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub lr_min: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Maximum global gradient norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Training samples whose attention centers are recorded every epoch.
    pub tracked_samples: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 9e-4,
            lr_min: 0.0,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-2,
            epochs: 40,
            batch_size: 32,
            warmup_steps: 0,
            grad_clip: None,
            seed: 0,
            tracked_samples: 3,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.betas;
        let ok = self.lr >= 0.0
            && self.lr_min >= 0.0
            && self.lr_min <= self.lr
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Cosine decay from `lr` to `lr_min` over `total_steps`, after a linear
    /// warmup. `step` counts completed updates.
    pub fn learning_rate(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total_steps.saturating_sub(self.warmup_steps).max(1);
        let s = (step - self.warmup_steps).min(span) as f64;
        let cos = (std::f64::consts::PI * s / span as f64).cos();
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + cos)
    }
}

/// Adam moments per parameter, kept in f64.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new<S: Scalar>(store: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamW {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update: decay `θ ← θ − lr·wd·θ` on weight matrices, then the
    /// bias-corrected Adam step.
    pub fn step<S: Scalar>(&mut self, store: &mut ParamStore<S>, grads: &[Vec<f64>], lr: f64, cfg: &OptimConfig) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} gradients for {} parameters", grads.len(), self.m.len()),
            ));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
        let scale = match cfg.grad_clip {
            Some(c) => {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != p.value.numel() {
                return Err(Error::shape("adamw_step", format!("gradient size mismatch for {}", p.name)));
            }
            let decay = if p.kind == ParamKind::Weight { lr * cfg.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, x) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g[j] * scale;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mut theta = x.f64();
                theta -= decay * theta;
                theta -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
                *x = S::of(theta);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(kind: ParamKind, x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", kind, Tensor::scalar(x));
        s
    }

    fn value(s: &ParamStore<f64>) -> f64 {
        s.iter().next().unwrap().1.value.item()
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut s = single(ParamKind::Weight, 1.5);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut opt = AdamW::new(&s);
        for _ in 0..3 {
            opt.step(&mut s, &[vec![0.0]], 0.1, &cfg).unwrap();
        }
        assert_eq!(value(&s), 1.5);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = OptimConfig {
            weight_decay: 0.1,
            ..OptimConfig::default()
        };
        let mut s = single(ParamKind::Weight, 2.0);
        AdamW::new(&s).step(&mut s, &[vec![0.0]], 1.0, &cfg).unwrap();
        assert_eq!(value(&s), 2.0 * 0.9);
        let mut b = single(ParamKind::Bias, 2.0);
        AdamW::new(&b).step(&mut b, &[vec![0.0]], 1.0, &cfg).unwrap();
        assert_eq!(value(&b), 2.0);
    }

    #[test]
    fn first_step_by_hand() {
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps).
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut s = single(ParamKind::Bias, 1.0);
        AdamW::new(&s).step(&mut s, &[vec![0.5]], 0.01, &cfg).unwrap();
        assert!((value(&s) - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_recurrence() {
        let cfg = OptimConfig {
            weight_decay: 0.05,
            ..OptimConfig::default()
        };
        let mut s = single(ParamKind::Weight, 0.7);
        let mut opt = AdamW::new(&s);
        let mut rng = crate::rng::RngState::new(4);
        let (mut theta, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = rng.normal();
            let lr = 0.01 * t as f64;
            opt.step(&mut s, &[vec![g]], lr, &cfg).unwrap();
            theta *= 1.0 - lr * 0.05;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            theta -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((value(&s) - theta).abs() < 1e-7);
        }
    }

    #[test]
    fn non_finite_gradients_abort() {
        let mut s = single(ParamKind::Bias, 1.0);
        let r = AdamW::new(&s).step(&mut s, &[vec![f64::NAN]], 0.1, &OptimConfig::default());
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cosine_endpoints() {
        let cfg = OptimConfig {
            lr: 1e-3,
            lr_min: 1e-5,
            ..OptimConfig::default()
        };
        assert_eq!(cfg.learning_rate(0, 100), 1e-3);
        assert_eq!(cfg.learning_rate(100, 100), 1e-5);
        assert!((cfg.learning_rate(50, 100) - (1e-5 + 0.5 * (1e-3 - 1e-5))).abs() < 1e-15);
        let warm = OptimConfig {
            warmup_steps: 10,
            ..cfg
        };
        assert_eq!(warm.learning_rate(4, 110), 5e-4);
        assert_eq!(warm.learning_rate(10, 110), 1e-3);
        assert_eq!(warm.learning_rate(110, 110), 1e-5);
    }
}
