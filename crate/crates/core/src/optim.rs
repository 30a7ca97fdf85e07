//! Adam, global-norm clipping and the warmup-cosine learning-rate schedule.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::nn::{Param, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.98, eps: 1e-8, clip_norm: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Final learning rate as a fraction of the peak.
    pub min_lr_ratio: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { epochs: 30, warmup_epochs: 5, min_lr_ratio: 0.01 }
    }
}

/// Linear warmup over the first `warmup` steps, then cosine decay to
/// `base * min_ratio` at step `total`. Steps are 0-based.
pub fn warmup_cosine(step: usize, base: f64, warmup: usize, total: usize, min_ratio: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    let floor = base * min_ratio;
    floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug, Default)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: &OptimizerConfig) -> Self {
        Self { beta1: config.beta1, beta2: config.beta2, eps: config.eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Advances the step counter; call once before the [`Adam::update`]s of a step.
    pub fn tick(&mut self) {
        self.t += 1;
    }

    /// Updates parameter number `index`. Indices must follow the same
    /// parameter order on every step.
    pub fn update(&mut self, index: usize, p: &mut Param<F>, lr: f64) {
        if index == self.m.len() {
            self.m.push(Array2::zeros(p.value.raw_dim()));
            self.v.push(Array2::zeros(p.value.raw_dim()));
        }
        assert_eq!(self.m[index].raw_dim(), p.value.raw_dim(), "parameter order changed between steps");
        let t = self.t.max(1) as i32;
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let c1 = F::lit(1.0 - self.beta1.powi(t));
        let c2 = F::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (F::lit(lr), F::lit(self.eps));
        let one = F::one();
        Zip::from(&mut p.value).and(&p.grad).and(&mut self.m[index]).and(&mut self.v[index]).for_each(|w, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    }

    /// One step over every parameter `visit` yields.
    pub fn step(&mut self, visit: &mut Visit<'_, F>, lr: f64) {
        self.tick();
        let mut i = 0;
        visit(&mut |_, p| {
            self.update(i, p, lr);
            i += 1;
        });
    }
}

/// Calls its argument once for every parameter of some group.
pub type Visit<'a, F> = dyn FnMut(&mut dyn FnMut(&str, &mut Param<F>)) + 'a;

/// Global L2 norm of all gradients.
pub fn grad_norm<F: Real>(visit: &mut Visit<'_, F>) -> f64 {
    let mut sq = 0.0;
    visit(&mut |_, p| sq += p.grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>());
    sq.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<F: Real>(visit: &mut Visit<'_, F>, max_norm: f64) -> f64 {
    let norm = grad_norm(visit);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::lit(max_norm / norm);
        visit(&mut |_, p| p.grad.mapv_inplace(|g| g * s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let lr = |s| warmup_cosine(s, 1.0, 10, 110, 0.0);
        assert!((lr(0) - 0.1).abs() < 1e-12);
        assert!((lr(9) - 1.0).abs() < 1e-12);
        assert!((lr(10) - 1.0).abs() < 1e-12);
        assert!((lr(60) - 0.5).abs() < 1e-12);
        assert!(lr(110).abs() < 1e-12);
        assert!((warmup_cosine(500, 2.0, 10, 110, 0.01) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Param::<f64>::zeros(1, 3);
        p.grad = Array2::from_shape_vec((1, 3), vec![0.5, -2.0, 1e-3]).unwrap();
        let mut opt = Adam::new(&OptimizerConfig { eps: 0.0, ..Default::default() });
        opt.step(&mut |f| f("p", &mut p), 0.1);
        for (w, g) in p.value.iter().zip(p.grad.iter()) {
            assert!((w + 0.1 * g.signum()).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = Param::<f64>::new(Array2::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&OptimizerConfig::default());
        for _ in 0..2000 {
            p.grad = p.value.mapv(|v| 2.0 * v);
            opt.step(&mut |f| f("p", &mut p), 0.01);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping() {
        let mut a = Param::<f64>::zeros(1, 2);
        a.grad = Array2::from_shape_vec((1, 2), vec![3.0, 4.0]).unwrap();
        let before = clip_grad_norm(&mut |f| f("a", &mut a), 1.0);
        assert_eq!(before, 5.0);
        assert!((grad_norm(&mut |f| f("a", &mut a)) - 1.0).abs() < 1e-12);
        let untouched = clip_grad_norm(&mut |f| f("a", &mut a), 5.0);
        assert!((untouched - 1.0).abs() < 1e-12);
    }
}
