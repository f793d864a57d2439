use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, the usual default for
/// linear and convolution layers.
pub fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    uniform(rng, shape, bound)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f32) -> Tensor {
    let n = shape.iter().product();
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}
