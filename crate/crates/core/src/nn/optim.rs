use super::params::{ParamGrads, ParamStore};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over `warmup` steps, then constant.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}

/// Adam with bias correction and the warmup-then-constant schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub peak_lr: f64,
    pub warmup: u64,
    /// Number of updates applied so far.
    pub step: u64,
    pub(crate) first: Vec<Option<Tensor>>,
    pub(crate) second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(peak_lr: f64, warmup: u64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            peak_lr,
            warmup,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        lr_at(self.step + 1, self.peak_lr, self.warmup)
    }

    pub fn moments(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        match (self.first.get(index), self.second.get(index)) {
            (Some(Some(m)), Some(Some(v))) => Some((m, v)),
            _ => None,
        }
    }

    pub(crate) fn set_moments(&mut self, index: usize, m: Tensor, v: Tensor) {
        if self.first.len() <= index {
            self.first.resize(index + 1, None);
            self.second.resize(index + 1, None);
        }
        self.first[index] = Some(m);
        self.second[index] = Some(v);
    }

    /// Applies one update to every trainable parameter that has a gradient.
    ///
    /// Gradients are validated before anything is written, so a NaN leaves
    /// both the parameters and the moments untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for (id, param) in store.iter() {
            if let Some(Some(g)) = grads.get(id.index()) {
                if !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient for parameter {}",
                        param.name
                    )));
                }
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let lr = lr_at(self.step, self.peak_lr, self.warmup);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            if !store.param(id).trainable {
                continue;
            }
            let Some(Some(g)) = grads.get(i) else {
                continue;
            };
            let shape = g.shape().to_vec();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(&shape));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.second[i].get_or_insert_with(|| Tensor::zeros(&shape));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.first[i].as_ref().unwrap(), self.second[i].as_ref().unwrap());
            let mut value = store.value(id).clone();
            for ((p, mi), vi) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set_value(id, value);
        }
        Ok(())
    }
}
