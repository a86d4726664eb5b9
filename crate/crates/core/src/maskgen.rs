//! Bernoulli sub-masks and their tiling to full-frame coded-exposure masks.
//!
//! A full-frame mask is the Kronecker product of an all-ones block with a
//! small `m × m` pattern, so each pixel only ever needs the pattern of its
//! position inside the tile.

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::tensor::Tensor;
use crate::types::{MaskStack, SubMaskStack};

pub const DEFAULT_SUBMASK_SIDE: usize = 8;
pub const DEFAULT_RHO: f64 = 0.5;

/// Draw `t` square sub-masks of side `m`, each entry Bernoulli(`rho`).
///
/// Entries are drawn in `(t, i, j)` row-major order, so a longer stack
/// from the same stream extends a shorter one.
pub fn gen_submask(t: usize, m: usize, rho: f64, stream: &mut RandomStream) -> Result<SubMaskStack> {
    if t == 0 || m == 0 {
        return Err(Error::Config(format!(
            "sub-mask needs t >= 1 and m >= 1, got t={t} m={m}"
        )));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("mask density rho={rho} outside (0,1]")));
    }
    if rho <= 0.05 {
        log::warn!("mask density rho={rho} passes almost no light");
    }
    let data = (0..t * m * m).map(|_| u8::from(stream.bernoulli(rho))).collect();
    SubMaskStack::new(Tensor::from_vec(&[t, m, m], data)?, rho)
}

/// Replicate each sub-mask over an `h × w` frame.
pub fn tile_mask(sub: &SubMaskStack, h: usize, w: usize) -> Result<MaskStack> {
    let (mx, my) = (sub.mx(), sub.my());
    if h == 0 || w == 0 || h % mx != 0 || w % my != 0 {
        return Err(Error::Config(format!(
            "frame {h}x{w} is not a multiple of sub-mask {mx}x{my} (height {h} vs {mx}, width {w} vs {my})"
        )));
    }
    let t = sub.t();
    let mut data = Vec::with_capacity(t * h * w);
    for f in 0..t {
        for i in 0..h {
            let row = &sub.tensor().outer(f)[(i % mx) * my..(i % mx + 1) * my];
            for j in 0..w {
                data.push(row[j % my]);
            }
        }
    }
    MaskStack::with_source(Tensor::from_vec(&[t, h, w], data)?, Some(sub.digest()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskStats {
    pub density: f64,
    /// `Σ_t mask[t, i, j]`, shape `(H, W)`.
    pub per_pixel_on: Tensor<u32>,
    pub dead_pixels: usize,
}

pub fn mask_stats(mask: &MaskStack) -> MaskStats {
    let (t, h, w) = (mask.t(), mask.h(), mask.w());
    let mut on = vec![0u32; h * w];
    let mut total = 0u64;
    for f in 0..t {
        for (acc, &v) in on.iter_mut().zip(mask.frame(f)) {
            *acc += v as u32;
            total += v as u64;
        }
    }
    let dead_pixels = on.iter().filter(|&&c| c == 0).count();
    MaskStats {
        density: total as f64 / (t * h * w) as f64,
        per_pixel_on: Tensor::from_vec(&[h, w], on).expect("shape"),
        dead_pixels,
    }
}
