//! Weight initializers. Draws happen in f64 so a given seed produces the same
//! parameters whether the model is instantiated in f32 or f64.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Elem, PTensor};

/// Uniform(−1/√fan_in, 1/√fan_in), the usual default for dense/conv weights.
pub fn uniform_fan_in<E: Elem>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> PTensor<E> {
    let a = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| E::from_f64(rng.gen_range(-a..a)))
        .collect();
    PTensor::new(shape.to_vec(), data)
}

/// Normal(0, std²), used for the recurrent gate matrices.
pub fn normal_scaled<E: Elem>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> PTensor<E> {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
    PTensor::new(shape.to_vec(), data)
}

pub fn zeros<E: Elem>(shape: &[usize]) -> PTensor<E> {
    PTensor::zeros(shape.to_vec())
}

pub fn ones<E: Elem>(shape: &[usize]) -> PTensor<E> {
    PTensor::filled(shape.to_vec(), E::one())
}
