//! Domain types shared across the pipeline.

use std::fmt::Write as _;

use crate::cdt::{self, StoredTensor};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `(T, H, W)` video with every element in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoCube {
    data: Tensor<f32>,
}

impl VideoCube {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.ndim() != 3 || data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "video cube needs (T,H,W) >= 1, got {:?}",
                data.shape()
            )));
        }
        if let Some(bad) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("video value {bad} outside [0,1]")));
        }
        Ok(Self { data })
    }

    pub fn from_vec(t: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Tensor::from_vec(&[t, h, w], data)?)
    }

    pub fn t(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.t(), self.h(), self.w()]
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        self.data.outer(t)
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    /// The first `t` frames.
    pub fn prefix(&self, t: usize) -> Result<Self> {
        if t == 0 || t > self.t() {
            return Err(Error::Shape(format!("cannot take {t} of {} frames", self.t())));
        }
        let n = t * self.h() * self.w();
        Self::from_vec(t, self.h(), self.w(), self.data.data()[..n].to_vec())
    }
}

/// `T` binary sub-masks of side `m_x × m_y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubMaskStack {
    data: Tensor<u8>,
    rho_nominal: f64,
}

impl SubMaskStack {
    pub fn new(data: Tensor<u8>, rho_nominal: f64) -> Result<Self> {
        if data.ndim() != 3 || data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "sub-mask stack needs (T,mx,my), got {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|&v| v > 1) {
            return Err(Error::Data("sub-mask entries must be 0 or 1".into()));
        }
        if !(rho_nominal > 0.0 && rho_nominal <= 1.0) {
            return Err(Error::Config(format!("rho {rho_nominal} outside (0,1]")));
        }
        Ok(Self { data, rho_nominal })
    }

    pub fn t(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn mx(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn my(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn rho_nominal(&self) -> f64 {
        self.rho_nominal
    }

    pub fn tensor(&self) -> &Tensor<u8> {
        &self.data
    }

    pub fn get(&self, t: usize, i: usize, j: usize) -> u8 {
        self.data.data()[(t * self.mx() + i) * self.my() + j]
    }

    pub fn digest(&self) -> u64 {
        cdt::tensor_digest(&StoredTensor::Uint8(self.data.clone()))
    }
}

/// Full-frame `(T, H, W)` binary modulation masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    data: Tensor<u8>,
    source_digest: Option<u64>,
    id: u64,
}

impl MaskStack {
    /// Wrap an arbitrary binary `(T,H,W)` tensor (e.g. one read from disk).
    pub fn new(data: Tensor<u8>) -> Result<Self> {
        Self::with_source(data, None)
    }

    pub(crate) fn with_source(data: Tensor<u8>, source_digest: Option<u64>) -> Result<Self> {
        if data.ndim() != 3 || data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "mask stack needs (T,H,W), got {:?}",
                data.shape()
            )));
        }
        if data.data().iter().any(|&v| v > 1) {
            return Err(Error::Data("mask entries must be 0 or 1".into()));
        }
        let id = cdt::tensor_digest(&StoredTensor::Uint8(data.clone()));
        Ok(Self {
            data,
            source_digest,
            id,
        })
    }

    pub fn t(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn h(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn w(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.t(), self.h(), self.w()]
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        self.data.outer(t)
    }

    pub fn tensor(&self) -> &Tensor<u8> {
        &self.data
    }

    /// Digest of the sub-mask stack this mask was tiled from, if known.
    pub fn source_digest(&self) -> Option<u64> {
        self.source_digest
    }

    /// 64-bit digest of the serialized mask.
    pub fn id(&self) -> u64 {
        self.id
    }
}

/// Poisson-Gaussian photon model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotonModel {
    apc: f64,
    alpha: f64,
    sigma: f64,
}

impl PhotonModel {
    pub fn new(apc: f64, alpha: f64, sigma: f64) -> Result<Self> {
        if !(apc > 0.0 && apc.is_finite()) {
            return Err(Error::Config(format!("APC must be positive and finite, got {apc}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive and finite, got {alpha}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { apc, alpha, sigma })
    }

    pub fn apc(&self) -> f64 {
        self.apc
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// One compressive frame plus the metadata needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub y: Tensor<f32>,
    pub cr: usize,
    pub photon: Option<PhotonModel>,
    pub seed: u64,
    pub mask_id: u64,
}

impl Measurement {
    pub fn h(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.y.shape()[1]
    }

    /// Textual sidecar: one `key = value` per line.
    pub fn sidecar(&self) -> String {
        let mut s = String::new();
        writeln!(s, "cr = {}", self.cr).unwrap();
        match &self.photon {
            Some(p) => {
                writeln!(s, "apc = {}", p.apc).unwrap();
                writeln!(s, "alpha = {}", p.alpha).unwrap();
                writeln!(s, "sigma = {}", p.sigma).unwrap();
            }
            None => writeln!(s, "noiseless = true").unwrap(),
        }
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "mask_id = {:016x}", self.mask_id).unwrap();
        s
    }

    pub fn from_parts(y: Tensor<f32>, sidecar: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(sidecar)?;
        let cr = kv
            .take_parsed("cr")?
            .ok_or_else(|| Error::Config("sidecar missing cr".into()))?;
        let noiseless: bool = kv.take_parsed("noiseless")?.unwrap_or(false);
        let photon = if noiseless {
            None
        } else {
            let get = |kv: &mut KeyValues, k: &str| -> Result<f64> {
                kv.take_parsed(k)?
                    .ok_or_else(|| Error::Config(format!("sidecar missing {k}")))
            };
            let apc = get(&mut kv, "apc")?;
            let alpha = get(&mut kv, "alpha")?;
            let sigma = get(&mut kv, "sigma")?;
            Some(PhotonModel::new(apc, alpha, sigma)?)
        };
        let seed = kv.take_parsed("seed")?.unwrap_or(0);
        let mask_id = match kv.take("mask_id") {
            Some(v) => u64::from_str_radix(&v, 16).map_err(|_| Error::Config(format!("bad mask_id {v:?}")))?,
            None => return Err(Error::Config("sidecar missing mask_id".into())),
        };
        kv.finish()?;
        if y.ndim() != 2 {
            return Err(Error::Shape(format!("measurement must be (H,W), got {:?}", y.shape())));
        }
        Ok(Self {
            y,
            cr,
            photon,
            seed,
            mask_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_range_enforced() {
        assert!(VideoCube::from_vec(1, 1, 2, vec![0.0, 1.0]).is_ok());
        assert!(VideoCube::from_vec(1, 1, 2, vec![0.0, 1.1]).is_err());
        assert!(VideoCube::from_vec(1, 1, 2, vec![f32::NAN, 0.5]).is_err());
        assert!(VideoCube::from_vec(0, 1, 1, vec![]).is_err());
    }

    #[test]
    fn photon_model_invariants() {
        assert!(PhotonModel::new(20.0, 5.0, 0.01).is_ok());
        assert!(PhotonModel::new(0.0, 5.0, 0.01).is_err());
        assert!(PhotonModel::new(20.0, 0.0, 0.01).is_err());
        assert!(PhotonModel::new(20.0, f64::INFINITY, 0.01).is_err());
        assert!(PhotonModel::new(20.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn sidecar_round_trip() {
        let m = Measurement {
            y: Tensor::filled(&[2, 3], 0.5),
            cr: 8,
            photon: Some(PhotonModel::new(20.0, 4.25, 0.01).unwrap()),
            seed: 99,
            mask_id: 0xdead_beef_0102_0304,
        };
        let back = Measurement::from_parts(m.y.clone(), &m.sidecar()).unwrap();
        assert_eq!(back, m);
    }
}
