//! Adam and AdamW (decoupled weight decay).

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied as `θ ← θ − lr·λ·θ` before the Adam step.
    /// Zero gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn adamw(lr: f64) -> Self {
        Self { weight_decay: 0.01, ..Self::adam(lr) }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must list tensors in the same order.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: Vec<&Tensor>) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lists differ");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((theta, &grad), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                if c.weight_decay != 0.0 {
                    *theta -= c.lr * c.weight_decay * *theta;
                }
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * grad;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * grad * grad;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the first Adam step is lr·g/(|g|+eps)
        let mut p = Tensor { name: "p".into(), shape: vec![2], data: vec![1.0, -1.0] };
        let g = Tensor { name: "g".into(), shape: vec![2], data: vec![0.5, -3.0] };
        let mut opt = Adam::new(AdamConfig::adam(0.1));
        opt.step(vec![&mut p], vec![&g]);
        assert!((p.data[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((p.data[1] - (-1.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adamw_decays_without_gradient() {
        let mut p = Tensor { name: "p".into(), shape: vec![1], data: vec![2.0] };
        let g = Tensor { name: "g".into(), shape: vec![1], data: vec![0.0] };
        let mut opt = Adam::new(AdamConfig::adamw(0.5));
        opt.step(vec![&mut p], vec![&g]);
        assert!((p.data[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor { name: "p".into(), shape: vec![1], data: vec![5.0] };
        let mut opt = Adam::new(AdamConfig::adam(0.1));
        for _ in 0..500 {
            let g = Tensor { name: "g".into(), shape: vec![1], data: vec![2.0 * (p.data[0] - 1.5)] };
            opt.step(vec![&mut p], vec![&g]);
        }
        assert!((p.data[0] - 1.5).abs() < 1e-2);
        assert_eq!(opt.steps_taken(), 500);
    }
}
