//! Parameterized layers shared by the agents.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::Result;
use crate::util::normal_vec;

/// Convolution with per-channel bias; weights He-initialized, biases zero.
pub struct ConvLayer<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> ConvLayer<S> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvLayer<S> {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Tensor::leaf(
            normal_vec(rng, c_out * c_in * k * k, std),
            &[c_out, c_in, k, k],
            true,
        )
        .unwrap();
        let b = Tensor::leaf(vec![S::zero(); c_out], &[c_out], true).unwrap();
        ConvLayer { w, b, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.w, self.stride, self.pad)?.add_channel_bias(&self.b)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Affine layer `x w^T + b`.
pub struct LinearLayer<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> LinearLayer<S> {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> LinearLayer<S> {
        let std = (1.0 / d_in as f64).sqrt();
        let w = Tensor::leaf(normal_vec(rng, d_out * d_in, std), &[d_out, d_in], true).unwrap();
        let b = Tensor::leaf(vec![S::zero(); d_out], &[d_out], true).unwrap();
        LinearLayer { w, b }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.linear(&self.w, &self.b)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<(String, Tensor<S>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}
