//! Adam with bias correction.

use super::params::Params;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// First/second moment accumulators and hyperparameters of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    /// Fresh state with the usual defaults (0.9, 0.999, 1e-8).
    pub fn new(params: &Params) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &Params, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &Params| (0..p.len()).map(|i| Tensor::zeros(p.get(i).shape())).collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// Applies one update with learning rate `lr`.
    pub fn step(&mut self, params: &mut Params, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if lr < 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params.get(i).shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {} {:?}",
                    g.shape(),
                    params.name(i),
                    params.get(i).shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(params.name(i).to_string()));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(i).data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> Params {
        let mut p = Params::new();
        p.push("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = one_param(0.7);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert_eq!(p.get(0).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut p = one_param(0.0);
        let mut adam = Adam::new(&p);
        adam.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.get(0).data()[0] - want).abs() < 1e-15);
        assert!((p.get(0).data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = one_param(1.0);
        let mut adam = Adam::new(&p);
        let err = adam.step(&mut p, &[Tensor::scalar(f64::NAN)], 0.1).unwrap_err();
        assert!(err.to_string().contains("non-finite gradient"));
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut p = Params::new();
        p.push("a", Tensor::new(vec![2], vec![0.3, 0.3]).unwrap());
        let mut adam = Adam::new(&p);
        for k in 0..5 {
            let g = Tensor::new(vec![2], vec![k as f64 - 1.5; 2]).unwrap();
            adam.step(&mut p, &[g], 0.05).unwrap();
        }
        assert_eq!(p.get(0).data()[0], p.get(0).data()[1]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
