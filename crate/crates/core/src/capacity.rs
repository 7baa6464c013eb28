//! Channel capacity of the guided embedding: the closed-form bound
//! dim * log2(1 + L / sigma^2) and a k-nearest-neighbor mutual-information
//! estimator used as its empirical oracle.

use ndarray::{Array2, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Domain, LoadedDataset};
use crate::model::ModelBundle;
use crate::{Result, RiftError};

/// Closed-form information bound for an embedding channel with average
/// power `power` per embedding and additive Gaussian noise `sigma` per
/// element.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CapacityBound {
    pub dim: usize,
    pub power: f64,
    pub sigma: f64,
    pub bits: f64,
}

/// dim * log2(1 + power / sigma^2) bits.
pub fn capacity_bound(dim: usize, power: f64, sigma: f64) -> Result<f64> {
    if dim == 0 {
        return Err(RiftError::Config("capacity bound needs dim >= 1".into()));
    }
    if !(power.is_finite() && power >= 0.0) {
        return Err(RiftError::Config(format!(
            "embedding power must be finite and >= 0, got {power}"
        )));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(RiftError::Config(
            "noise amplitude sigma must be > 0; without noise the channel capacity is unbounded"
                .into(),
        ));
    }
    Ok(dim as f64 * (1.0 + power / (sigma * sigma)).log2())
}

/// Maximum number of dimensions per variable the estimator accepts.
pub const MAX_MI_DIMS: usize = 8;
/// Minimum number of paired samples the estimator accepts.
pub const MIN_MI_SAMPLES: usize = 1000;
const KSG_K: usize = 4;

/// Mutual information estimate in bits between paired samples, rows =
/// observations. Kraskov k-NN estimator (first variant, k = 4) with
/// deterministic tie-breaking jitter; clamped to be nonnegative.
///
/// Bias is roughly O(1/k) plus boundary effects; at >= 1000 samples and
/// <= 8 total dimensions it is well within a few tenths of a bit, which is
/// the tolerance every caller in this crate asserts with.
pub fn estimate_mi(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64> {
    let n = x.nrows();
    if n != y.nrows() {
        return Err(RiftError::Shape(format!(
            "sample counts differ: {} vs {}",
            n,
            y.nrows()
        )));
    }
    if n < MIN_MI_SAMPLES {
        return Err(RiftError::Invalid(format!(
            "MI estimation needs at least {MIN_MI_SAMPLES} pairs, got {n}"
        )));
    }
    let (dx, dy) = (x.ncols(), y.ncols());
    if dx == 0 || dy == 0 || dx > MAX_MI_DIMS || dy > MAX_MI_DIMS {
        return Err(RiftError::Invalid(format!(
            "MI estimation supports 1..={MAX_MI_DIMS} dims per variable, got {dx} and {dy}"
        )));
    }

    let xj = jittered(x, 1);
    let yj = jittered(y, 2);

    let cheb = |a: &Array2<f64>, i: usize, j: usize| -> f64 {
        let (ri, rj) = (a.row(i), a.row(j));
        ri.iter()
            .zip(rj.iter())
            .map(|(&p, &q)| (p - q).abs())
            .fold(0.0, f64::max)
    };

    let stats: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            // distance to the k-th nearest neighbor in the joint space
            let mut dists: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| cheb(&xj, i, j).max(cheb(&yj, i, j)))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let eps = dists[KSG_K - 1];
            let mut nx = 0usize;
            let mut ny = 0usize;
            for j in 0..n {
                if j == i {
                    continue;
                }
                if cheb(&xj, i, j) < eps {
                    nx += 1;
                }
                if cheb(&yj, i, j) < eps {
                    ny += 1;
                }
            }
            (digamma(nx as f64 + 1.0), digamma(ny as f64 + 1.0))
        })
        .collect();

    let mean_psi: f64 = stats.iter().map(|(a, b)| a + b).sum::<f64>() / n as f64;
    let nats = digamma(KSG_K as f64) + digamma(n as f64) - mean_psi;
    Ok((nats / std::f64::consts::LN_2).max(0.0))
}

/// Add a deterministic per-element jitter far below data scale so exact
/// ties (discrete inputs) break reproducibly.
fn jittered(a: &Array2<f64>, salt: u64) -> Array2<f64> {
    let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
    let amp = scale * 1e-10;
    let mut out = a.clone();
    for (idx, v) in out.indexed_iter_mut() {
        let h = splitmix(idx.0 as u64 ^ (idx.1 as u64) << 32 ^ salt << 48);
        // uniform in [-amp, amp)
        *v += ((h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * amp;
    }
    out
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Digamma via upward recurrence into the asymptotic series.
fn digamma(mut x: f64) -> f64 {
    assert!(x > 0.0);
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 / 252.0))
}

/// Empirical capacity bound of a trained encoder: mean squared embedding
/// norm over the dataset's images of `domain`, plugged into the closed
/// form with the model's embedding size and the configured guide noise.
pub fn measured_capacity(
    bundle: &ModelBundle,
    domain: Domain,
    dataset: &LoadedDataset,
    sigma_g: f64,
) -> Result<CapacityBound> {
    let indices = dataset.indices_in(domain);
    if indices.is_empty() {
        return Err(RiftError::EmptyBatch);
    }
    let mut power_sum = 0.0;
    for chunk in indices.chunks(32) {
        let imgs: Vec<&crate::datagen::Image> =
            chunk.iter().map(|&i| &dataset.images[i]).collect();
        let batch = crate::model::stack_images(&imgs);
        let emb = bundle.encode(domain, &batch)?;
        for row in emb.axis_iter(Axis(0)) {
            power_sum += row.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let power = power_sum / indices.len() as f64;
    let dim = bundle.cfg.embedding_dim();
    let bits = capacity_bound(dim, power, sigma_g)?;
    Ok(CapacityBound {
        dim,
        power,
        sigma: sigma_g,
        bits,
    })
}

/// Power and bound for a raw embedding batch; used by reports that already
/// hold encoded arrays.
pub fn bound_for_embeddings(emb: &Array4<f64>, sigma: f64) -> Result<CapacityBound> {
    let n = emb.dim().0;
    if n == 0 {
        return Err(RiftError::EmptyBatch);
    }
    let dim = emb.len() / n;
    let power = emb.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let bits = capacity_bound(dim, power, sigma)?;
    Ok(CapacityBound {
        dim,
        power,
        sigma,
        bits,
    })
}
