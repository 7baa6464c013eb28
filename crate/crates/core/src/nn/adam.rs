use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::params::{ParamId, ParamStore, Side};

/// Serializable optimizer state, stored alongside checkpoints so resumed
/// training continues bit-for-bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam over one parameter side of a [`ParamStore`].
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    ids: Vec<ParamId>,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, side: Side, lr: f64, beta1: f64, beta2: f64) -> Self {
        let ids = store.ids_for_side(side);
        let m = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        let v = ids
            .iter()
            .map(|&id| ArrayD::zeros(store.value(id).raw_dim()))
            .collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            ids,
            t: 0,
            m,
            v,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update. Parameters without a gradient entry are left untouched
    /// (moments included), so a zero-weight objective is a strict no-op.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.ids.iter().all(|&id| grads.get(id).is_none()) {
            return;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let p = store.value_mut(id);
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for ((pi, mi), (vi, gi)) in p
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(g.iter()))
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn export_state(&self) -> AdamState {
        AdamState {
            t: self.t,
            m: self.m.iter().map(|a| a.iter().copied().collect()).collect(),
            v: self.v.iter().map(|a| a.iter().copied().collect()).collect(),
        }
    }

    pub fn import_state(&mut self, state: &AdamState) -> crate::Result<()> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(crate::RiftError::Invalid(
                "optimizer state does not match parameter layout".into(),
            ));
        }
        self.t = state.t;
        for (dst, src) in self.m.iter_mut().zip(&state.m) {
            if dst.len() != src.len() {
                return Err(crate::RiftError::Invalid(
                    "optimizer moment shape mismatch".into(),
                ));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s;
            }
        }
        for (dst, src) in self.v.iter_mut().zip(&state.v) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s;
            }
        }
        Ok(())
    }
}
