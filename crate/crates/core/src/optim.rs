//! Adam and the linear warm-up learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::model::ClassifierParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Learning rate after `progress` epochs (fractional), rising linearly from 0
/// to `base` over `warmup` epochs and constant afterwards.
pub fn warmup_lr(base: f64, warmup: usize, progress: f64) -> f64 {
    if warmup == 0 || progress >= warmup as f64 {
        base
    } else {
        base * progress.max(0.0) / warmup as f64
    }
}

pub struct Adam {
    config: AdamConfig,
    step: u32,
    m: ClassifierParams,
    v: ClassifierParams,
}

fn update<T>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], coef: [f64; 5])
where
    T: Copy + Into<f64> + FromF64,
{
    let [b1, b2, eps, step_size, bias2] = coef;
    for i in 0..p.len() {
        let gi: f64 = g[i].into();
        let mi = b1 * m[i].into() + (1.0 - b1) * gi;
        let vi = b2 * v[i].into() + (1.0 - b2) * gi * gi;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let pi: f64 = p[i].into();
        p[i] = T::from_f64(pi - step_size * mi / ((vi / bias2).sqrt() + eps));
    }
}

trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Adam {
    pub fn new(params: &ClassifierParams, config: AdamConfig) -> Self {
        let mut m = params.clone();
        m.scale(0.0);
        Adam {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    pub fn step(&mut self, params: &mut ClassifierParams, grads: &ClassifierParams, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let coef = [c.beta1, c.beta2, c.eps, lr / bias1, bias2];

        let g32: Vec<&[f32]> = grads.encoder_tensors().into_iter().map(|t| t.2).collect();
        let p32 = params.encoder_tensors_mut();
        let m32 = self.m.encoder_tensors_mut();
        let v32 = self.v.encoder_tensors_mut();
        for (((p, g), m), v) in p32.into_iter().zip(g32).zip(m32).zip(v32) {
            update(p, g, m, v, coef);
        }

        let g64: Vec<&[f64]> = grads
            .attention
            .named_tensors()
            .into_iter()
            .map(|t| t.2)
            .collect();
        let p64 = params.attention.tensors_mut();
        let m64 = self.m.attention.tensors_mut();
        let v64 = self.v.attention.tensors_mut();
        for (((p, g), m), v) in p64.into_iter().zip(g64).zip(m64).zip(v64) {
            update(p, g, m, v, coef);
        }
    }
}
