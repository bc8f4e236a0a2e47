use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numgrad::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// `base · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidParameter("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidParameter(format!("step {step} beyond {total_steps}")));
    }
    Ok(base_lr * (1.0 + (PI * step as f64 / total_steps as f64).cos()) / 2.0)
}

/// Adam with L2 weight decay folded into the gradient. A tensor that received
/// no gradient in a step is skipped, moments included.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        Self {
            weight_decay,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            t: vec![0; shapes.len()],
        }
    }

    /// Updates `param` (slot `i`) in place with gradient `grad` at rate `lr`.
    pub fn step(&mut self, i: usize, param: &mut Mat, grad: &Mat, lr: f64) {
        self.t[i] += 1;
        let t = self.t[i] as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (m, v) = (&mut self.m[i], &mut self.v[i]);
        for k in 0..param.data.len() {
            let gk = grad.data[k] + self.weight_decay * param.data[k];
            m.data[k] = BETA1 * m.data[k] + (1.0 - BETA1) * gk;
            v.data[k] = BETA2 * v.data[k] + (1.0 - BETA2) * gk * gk;
            let mh = m.data[k] / c1;
            let vh = v.data[k] / c2;
            param.data[k] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_lr_examples() {
        assert_eq!(cosine_lr(0, 100, 0.5).unwrap(), 0.5);
        assert!(cosine_lr(100, 100, 0.5).unwrap().abs() < 1e-17);
        assert!((cosine_lr(50, 100, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!(matches!(cosine_lr(0, 0, 0.5), Err(Error::InvalidParameter(_))));
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(s, 37, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Adam::new(&[(1, 3)], 0.0);
        let mut p = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let g = Mat::from_vec(1, 3, vec![0.5, -4.0, 0.0]);
        opt.step(0, &mut p, &g, 0.1);
        assert!((p.data[0] - 0.9).abs() < 1e-7);
        assert!((p.data[1] - 2.1).abs() < 1e-7);
        assert_eq!(p.data[2], 3.0);
    }

    #[test]
    fn adam_matches_a_scalar_reference() {
        // f(x) = (x − 3)², reference recurrence written out by hand
        let mut opt = Adam::new(&[(1, 1)], 0.01);
        let mut p = Mat::scalar(0.0);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = 2.0 * (p.data[0] - 3.0);
            opt.step(0, &mut p, &Mat::scalar(g), 0.05);
            let gr = 2.0 * (x - 3.0) + 0.01 * x;
            m = 0.9 * m + 0.1 * gr;
            v = 0.999 * v + 0.001 * gr * gr;
            x -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            assert!((p.data[0] - x).abs() < 1e-12);
        }
    }
}
