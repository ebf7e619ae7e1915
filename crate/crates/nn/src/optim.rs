use serde::{Deserialize, Serialize};

use crate::graph::Grads;
use crate::matrix::Matrix;
use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| {
            s.ids().map(|id| Matrix::zeros(s.get(id).rows(), s.get(id).cols())).collect()
        };
        Adam { cfg, m: zeros(store), v: zeros(store), step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update. Parameters without a gradient only receive weight decay
    /// if they have been touched before; untouched moments stay at zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let wd = T::lit(c.lr * c.weight_decay);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = store.get_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps) + wd * *pv;
            }
        }
    }
}
