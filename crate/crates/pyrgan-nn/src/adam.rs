//! Adam with bias correction, applied in parameter-registration order.

use crate::params::{ParamRef, ParamSet};
use crate::Arr4;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// One optimizer step over the given gradients. Parameters without a gradient
/// are left untouched; the step counter advances once per call.
pub fn adam_step(params: &mut ParamSet, grads: &[(ParamRef, Arr4)], cfg: &AdamConfig) {
    params.step += 1;
    let t = params.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (r, g) in grads {
        let p = params.get_mut(*r);
        assert_eq!(p.value.raw_dim(), g.raw_dim(), "adam: gradient shape mismatch for {}", p.name);
        ndarray::Zip::from(&mut p.m).and(g).for_each(|m, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        });
        ndarray::Zip::from(&mut p.v).and(g).for_each(|v, &g| {
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        });
        ndarray::Zip::from(&mut p.value)
            .and(&p.m)
            .and(&p.v)
            .for_each(|w, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
}
