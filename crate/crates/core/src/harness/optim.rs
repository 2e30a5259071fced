//! Adam and the parameter EMA.

use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::tensor::{Real, Tensor};

use super::config::OptimizerConfig;

/// Adam with bias correction and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub cfg: OptimizerConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Applies one update; `grads` must follow the tree's traversal order.
    pub fn update<M: ParamTree<Tensor<T>>>(&mut self, params: &mut M, grads: &[Tensor<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} optimizer slots",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::cast(c.beta1), T::cast(c.beta2));
        let (ob1, ob2) = (T::cast(1.0 - c.beta1), T::cast(1.0 - c.beta2));
        let lr_t = T::cast(c.learning_rate / bc1);
        let inv_bc2 = T::cast(1.0 / bc2);
        let eps = T::cast(c.eps);
        let decay = T::cast(1.0 - c.learning_rate * c.weight_decay);
        let mut i = 0;
        let mut bad = None;
        params.visit_mut("", &mut |name, p| {
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            i += 1;
            if g.shape() != p.shape() {
                bad.get_or_insert_with(|| format!("gradient shape {:?} for `{name}` {:?}", g.shape(), p.shape()));
                return;
            }
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                *w = *w * decay - lr_t * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        });
        match bad {
            Some(msg) => Err(Error::Contract(msg)),
            None => Ok(()),
        }
    }
}

/// Decay used at EMA update `n` (0-based).
pub fn ema_decay_at(decay: f64, warmup: bool, n: u64) -> f64 {
    if warmup {
        decay.min((1.0 + n as f64) / (10.0 + n as f64))
    } else {
        decay
    }
}

/// `θ_ema ← θ_ema + (1 − d)·(θ − θ_ema)`, exact once the two agree.
pub fn ema_update<T: Real, M: ParamTree<Tensor<T>>>(ema: &mut M, model: &M, decay: f64) {
    let mut src = Vec::new();
    model.visit("", &mut |_, t| src.push(t));
    let mut i = 0;
    let k = T::cast(1.0 - decay);
    ema.visit_mut("", &mut |_, e| {
        for (a, &b) in e.data_mut().iter_mut().zip(src[i].data()) {
            *a = *a + k * (b - *a);
        }
        i += 1;
    });
}
