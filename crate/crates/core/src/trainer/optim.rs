//! Adam with L2 weight decay and the cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{dim, Result};
use crate::models::ParamStore;
use crate::tensor::Tensor;

/// `base · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    base * 0.5 * (1.0 + (PI * epoch as f64 / total.max(1) as f64).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients stored on `params`; missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return dim(format!("optimizer tracks {} tensors, model has {}", self.m.len(), params.len()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g: Vec<f32> = p.grad().map_or_else(|| vec![0.0; p.len()], <[f32]>::to_vec);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g[i] as f64 + self.weight_decay * *x as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *x = (*x as f64 - update) as f32;
            }
        }
        Ok(())
    }

    /// Moment tensors named `adam.m.<param>` / `adam.v.<param>`.
    pub fn named(&self, params: &ParamStore) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
            for ((name, p), data) in params.names().iter().zip(params.tensors()).zip(moments) {
                out.push((format!("adam.{kind}.{name}"), Tensor::new(p.shape(), data.clone()).unwrap()));
            }
        }
        out
    }

    /// Restores moments saved by [`Adam::named`].
    pub fn load_named(&mut self, params: &ParamStore, named: &[(String, Tensor<f32>)], t: u64) -> Result<()> {
        for (kind, moments) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (name, slot) in params.names().iter().zip(moments.iter_mut()) {
                let key = format!("adam.{kind}.{name}");
                match named.iter().find(|(n, _)| *n == key) {
                    Some((_, t)) if t.len() == slot.len() => slot.copy_from_slice(t.data()),
                    Some(_) => return dim(format!("{key} has the wrong size")),
                    None => return dim(format!("checkpoint lacks {key}")),
                }
            }
        }
        self.t = t;
        Ok(())
    }
}
