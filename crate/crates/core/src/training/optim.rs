use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params.shapes().into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = params.get_mut(i);
            for (((pj, gj), mj), vj) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
                *pj -= self.lr * (*mj / c1) / ((*vj / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale `grads` in place so that their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sum_squares).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Halve the learning rate whenever a validation loss fails to beat the best
/// one seen so far.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr: f64,
    pub best: f64,
    pub halving: bool,
}

impl LrSchedule {
    pub fn new(lr: f64, halving: bool) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            halving,
        }
    }

    /// Returns true when this observation is a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            true
        } else {
            if self.halving {
                self.lr /= 2.0;
            }
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;

    #[test]
    fn halving_rule() {
        let mut s = LrSchedule::new(1.0, true);
        let lrs: Vec<f64> = [2.0, 1.5, 1.6]
            .iter()
            .map(|&v| {
                s.observe(v);
                s.lr
            })
            .collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5]);
        let mut s = LrSchedule::new(1.0, true);
        for v in [3.0, 2.0, 1.0, 0.5] {
            s.observe(v);
        }
        assert_eq!(s.lr, 1.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut b = ParamBuilder::new(0);
        b.constant("x", 1, 2, 0.0);
        let mut p = b.finish();
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &[Matrix::from_vec(1, 2, vec![3.0, -0.5])]);
        assert!((p.get(0).get(0, 0) + 0.1).abs() < 1e-6);
        assert!((p.get(0).get(0, 1) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].sum_squares().sqrt() - 1.0).abs() < 1e-12);
    }
}
