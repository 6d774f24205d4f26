//! Weight initialization: convolution kernels from N(0, 0.02), norm scales
//! from N(1, 0.02), everything else zero — the usual pix2pix recipe.

use crate::Arr4;
use rand::RngCore;
use rand_distr::{Distribution, Normal};

pub fn normal_init(shape: (usize, usize, usize, usize), std: f64, rng: &mut dyn RngCore) -> Arr4 {
    let dist = Normal::new(0.0, std).expect("valid std");
    let mut out = Arr4::zeros(shape);
    for v in out.iter_mut() {
        *v = dist.sample(&mut *rng);
    }
    out
}

pub fn conv_weight(shape: (usize, usize, usize, usize), rng: &mut dyn RngCore) -> Arr4 {
    normal_init(shape, 0.02, rng)
}

pub fn norm_gamma(channels: usize, rng: &mut dyn RngCore) -> Arr4 {
    let mut g = normal_init((1, channels, 1, 1), 0.02, rng);
    g.mapv_inplace(|v| v + 1.0);
    g
}

pub fn zeros(shape: (usize, usize, usize, usize)) -> Arr4 {
    Arr4::zeros(shape)
}
