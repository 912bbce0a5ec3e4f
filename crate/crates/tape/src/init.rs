use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Float, Tensor};

/// He-normal initialization for a conv weight `[cout, cin, kh, kw]`.
pub fn he_normal<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: [usize; 4], gain: f64) -> Tensor<T> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    normal(rng, shape.to_vec(), gain * (2.0 / fan_in).sqrt())
}

pub fn normal<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    if std == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}
