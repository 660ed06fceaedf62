//! AdamW with linear warmup.

use ndarray::Array2;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr_max: f32,
    pub warmup_steps: usize,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn constant(lr: f32) -> Self {
        Self {
            lr_max: lr,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn with_warmup(lr: f32, warmup_steps: usize, weight_decay: f32) -> Self {
        Self {
            lr_max: lr,
            warmup_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Linear warmup to a constant rate: lr(t) = lr_max * min(1, t / warmup).
pub fn lr_at(cfg: &AdamConfig, step: usize) -> f32 {
    if cfg.warmup_steps == 0 {
        cfg.lr_max
    } else {
        cfg.lr_max * 1.0f32.min(step as f32 / cfg.warmup_steps as f32)
    }
}

pub struct AdamW {
    cfg: AdamConfig,
    step: usize,
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn current_lr(&self) -> f32 {
        lr_at(&self.cfg, self.step)
    }

    /// One update over an aligned parameter/gradient list. The step counter
    /// used for warmup and bias correction starts at 0.
    pub fn step(&mut self, params: &mut [&mut Array2<f32>], grads: &[Array2<f32>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let lr = lr_at(&self.cfg, self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for i in 0..params.len() {
            let g = &grads[i];
            debug_assert_eq!(g.dim(), params[i].dim());
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.cfg.beta1 * *m + (1.0 - self.cfg.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.cfg.beta2 * *v + (1.0 - self.cfg.beta2) * g * g;
            });
            let p = &mut *params[i];
            ndarray::Zip::from(&mut *p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * *p);
                });
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn warmup_schedule_exact_values() {
        let cfg = AdamConfig::with_warmup(1e-4, 1000, 0.0);
        assert_eq!(lr_at(&cfg, 0), 0.0);
        assert_eq!(lr_at(&cfg, 500), 0.5e-4);
        assert_eq!(lr_at(&cfg, 1000), 1e-4);
        assert_eq!(lr_at(&cfg, 2000), 1e-4);
    }

    #[test]
    fn constant_schedule_has_no_warmup() {
        let cfg = AdamConfig::constant(1e-4);
        assert_eq!(lr_at(&cfg, 0), 1e-4);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (x - 3)^2
        let mut x = array![[0.0f32]];
        let cfg = AdamConfig::constant(0.1);
        let mut opt = AdamW::new(cfg, &[(1, 1)]);
        for _ in 0..500 {
            let g = array![[2.0 * (x[[0, 0]] - 3.0)]];
            opt.step(&mut [&mut x], &[g]);
        }
        assert!((x[[0, 0]] - 3.0).abs() < 1e-2, "x = {}", x[[0, 0]]);
    }
}
