//! Adam with coupled L2 weight decay.

use crate::tensor::NdArray;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    no_decay: Vec<bool>,
    m: Vec<NdArray>,
    v: Vec<NdArray>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            no_decay: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Marks parameters (by position) that are exempt from weight decay.
    pub fn with_no_decay(mut self, mask: Vec<bool>) -> Self {
        self.no_decay = mask;
        self
    }

    /// Forgets moment estimates and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` in place. `grads[i]` pairs with `params[i]`;
    /// the parameter list must keep the same order and shapes across calls.
    pub fn step(&mut self, params: &mut [&mut NdArray], grads: &[NdArray]) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient counts differ");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| NdArray::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape for parameter {}", i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let wd = if self.no_decay.get(i).copied().unwrap_or(false) {
                0.0
            } else {
                self.weight_decay
            };
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + wd * *w;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g).
        let mut p = NdArray::row_vector(vec![1.0, -1.0]);
        let g = NdArray::row_vector(vec![0.3, -5.0]);
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = NdArray::row_vector(vec![3.0]);
        let mut opt = Adam::new(0.05, 0.0);
        for _ in 0..2000 {
            let g = p.scale(2.0);
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p.data()[0].abs() < 1e-3);
    }

    #[test]
    fn exempt_parameter_with_zero_gradient_stays_put() {
        let mut a = NdArray::scalar(1.0);
        let mut b = NdArray::scalar(1.0);
        let mut opt = Adam::new(0.1, 0.5).with_no_decay(vec![false, true]);
        opt.step(&mut [&mut a, &mut b], &[NdArray::scalar(0.0), NdArray::scalar(0.0)]);
        assert!(a.item() < 1.0);
        assert_eq!(b.item(), 1.0);
    }

    #[test]
    fn reset_clears_state() {
        let mut p = NdArray::scalar(1.0);
        let mut opt = Adam::new(0.1, 0.0);
        opt.step(&mut [&mut p], &[NdArray::scalar(1.0)]);
        opt.reset();
        assert_eq!(opt.steps(), 0);
    }
}
