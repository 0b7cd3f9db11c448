#![allow(dead_code)]

pub mod pipeline;
pub mod reference;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subword_lm::numcore::{Params, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|, 1e-6)`. The floor keeps
/// gradients that vanish analytically from being compared against
/// finite-difference noise.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

/// Central finite differences of `f` with respect to every entry of
/// `inputs[which]`.
pub fn numeric_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], which: usize) -> Vec<f64> {
    let mut work = inputs.to_vec();
    let n = inputs[which].numel();
    let mut g = vec![0.0; n];
    for i in 0..n {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + FD_STEP;
        let up = f(&work);
        work[which].data_mut()[i] = orig - FD_STEP;
        let down = f(&work);
        work[which].data_mut()[i] = orig;
        g[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Finite differences of `f` over every scalar of a parameter set.
pub fn numeric_param_grads(f: &dyn Fn(&Params) -> f64, params: &Params) -> Vec<Vec<f64>> {
    let mut work = params.clone();
    (0..params.len())
        .map(|p| {
            let n = params.get(p).numel();
            (0..n)
                .map(|i| {
                    let orig = params.get(p).data()[i];
                    work.get_mut(p).data_mut()[i] = orig + FD_STEP;
                    let up = f(&work);
                    work.get_mut(p).data_mut()[i] = orig - FD_STEP;
                    let down = f(&work);
                    work.get_mut(p).data_mut()[i] = orig;
                    (up - down) / (2.0 * FD_STEP)
                })
                .collect()
        })
        .collect()
}
