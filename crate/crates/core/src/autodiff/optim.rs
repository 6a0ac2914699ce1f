use rand::Rng;

use super::DenseArray;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Plain gradient descent: `p <- p - lr * g` for every pair.
pub fn sgd_step<T: Real>(params: &mut [DenseArray<T>], grads: &[DenseArray<T>], lr: T) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", &[params.len()], &[grads.len()]));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv = *pv - lr * *gv;
        }
    }
    Ok(())
}

/// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Real, R: Rng + ?Sized>(
    shape: Vec<usize>,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> DenseArray<T> {
    let a = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| T::lit(rng.gen_range(-a..=a))).collect();
    DenseArray::new(shape, data).expect("length matches shape")
}
