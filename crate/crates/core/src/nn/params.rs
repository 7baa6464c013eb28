use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::RiftError;

pub type ParamId = usize;

/// Which alternating-update side a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Generator,
    Discriminator,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub side: Side,
    pub shape: Vec<usize>,
}

/// Flat store of named parameters. Networks reference parameters by id, so
/// two networks that should share weights simply hold the same ids.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    values: Vec<ArrayD<f64>>,
    meta: Vec<ParamMeta>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, side: Side, value: ArrayD<f64>) -> ParamId {
        self.meta.push(ParamMeta {
            name: name.into(),
            side,
            shape: value.shape().to_vec(),
        });
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id]
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id]
    }

    pub fn all_meta(&self) -> &[ParamMeta] {
        &self.meta
    }

    pub fn ids_for_side(&self, side: Side) -> Vec<ParamId> {
        (0..self.len())
            .filter(|&i| self.meta[i].side == side)
            .collect()
    }

    pub fn n_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Serialize all parameter values as a flat little-endian f64 blob in id
    /// order. Byte-exact, so identical stores produce identical blobs.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_elements() * 8);
        for v in &self.values {
            for &x in v.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Overwrite all values from a blob produced by [`to_bytes`] on a store
    /// with the same layout.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> crate::Result<()> {
        if bytes.len() != self.n_elements() * 8 {
            return Err(RiftError::Invalid(format!(
                "parameter blob has {} bytes, store expects {}",
                bytes.len(),
                self.n_elements() * 8
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        Ok(())
    }
}
