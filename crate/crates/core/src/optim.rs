//! Adam with decoupled weight decay, and a cosine learning-rate schedule.

use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u32,
}

impl AdamW {
    pub fn new<'t>(cfg: AdamWConfig, params: impl IntoIterator<Item = &'t Tensor>) -> Self {
        let first: Vec<Vec<f64>> = params
            .into_iter()
            .map(|p| alloc::vec![0.0; p.len()])
            .collect();
        Self {
            cfg,
            second: first.clone(),
            first,
            steps: 0,
        }
    }

    /// One update. `params` and `grads` are in the order given to [`AdamW::new`].
    ///
    /// With `lr == 0` the parameters are left bit-identical.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.steps += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - libm::pow(beta1, f64::from(self.steps));
        let bc2 = 1.0 - libm::pow(beta2, f64::from(self.steps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                if lr == 0.0 {
                    continue;
                }
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (libm::sqrt(vhat) + eps) + weight_decay * *w);
            }
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 after `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step as f64 / total as f64;
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut w = Tensor::vector(alloc::vec![3.0, -2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, [&w]);
        for _ in 0..2000 {
            let g = w.map(|x| 2.0 * x);
            opt.step(&mut [&mut w], &[g], 0.05);
        }
        assert!(w.max_abs() < 1e-2, "{w:?}");
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut w = Tensor::vector(alloc::vec![0.3, 0.7]);
        let before = w.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), [&w]);
        opt.step(&mut [&mut w], &[Tensor::ones(&[2])], 0.0);
        assert_eq!(w, before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-15);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-15);
    }
}
