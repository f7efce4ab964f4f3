//! Adam with decoupled weight decay.

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, ShapedArray};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    step: i32,
    m: Vec<ShapedArray<f32>>,
    v: Vec<ShapedArray<f32>>,
}

impl AdamW {
    pub fn new(ps: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros = || ps.entries().iter().map(|e| ShapedArray::zeros(e.value.shape())).collect();
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            grad_clip: cfg.grad_clip,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Update every trainable entry; returns the gradient norm before
    /// clipping. Non-finite gradients are rejected without touching `ps`.
    pub fn step(&mut self, ps: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<f64> {
        let ids: Vec<_> = ps.ids().filter(|&id| ps.entry(id).trainable).collect();
        let gs: Vec<ShapedArray<f32>> = ids.iter().map(|&id| grads.param(id)).collect();
        let norm = gs.iter().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                op: "adamw",
                location: "gradient norm".into(),
            });
        }
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip { self.grad_clip / norm } else { 1.0 };
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (&id, g) in ids.iter().zip(&gs) {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = ps.get_mut(id);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g as f64 * scale;
                let mn = b1 * *m as f64 + (1.0 - b1) * g;
                let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let upd = (mn / c1) / ((vn / c2).sqrt() + self.eps) + self.weight_decay * *w as f64;
                *w = (*w as f64 - self.lr * upd) as f32;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.add("w", ShapedArray::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            grad_clip: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&ps, &cfg);
        let grads = {
            let mut tape = Tape::new(&ps);
            let w = tape.param(id);
            let s = tape.mul(w, w).unwrap();
            let l = tape.sum(s);
            tape.backward(l).unwrap()
        };
        opt.step(&mut ps, &grads).unwrap();
        let got = ps.get(id).data().to_vec();
        for (g, e) in got.iter().zip([0.9, -1.9, 0.4]) {
            assert!((g - e).abs() < 1e-6, "{got:?}");
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let mut ps = ParamStore::<f32>::new();
        let id = ps.add("w", ShapedArray::full(&[2], 2.0));
        let cfg = TrainConfig {
            lr: 0.5,
            weight_decay: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(&ps, &cfg);
        let grads = {
            let mut tape = Tape::new(&ps);
            let w = tape.param(id);
            let z = tape.scale(w, 0.0);
            let l = tape.sum(z);
            tape.backward(l).unwrap()
        };
        opt.step(&mut ps, &grads).unwrap();
        // zero gradient: only the decay term acts
        assert!((ps.get(id).data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-6);
    }
}
