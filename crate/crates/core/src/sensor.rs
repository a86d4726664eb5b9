//! Coded-exposure forward model and measurement pre-processing.
//!
//! `y = Σ_t X_t ⊙ M_t`, observed through Poisson shot noise at photon scale
//! `α` and additive Gaussian read noise of std `σ`:
//! `y_noisy = max(0, Poisson(α·y)/α + N(0, σ²))`.

use crate::error::{Error, Result};
use crate::maskgen::mask_stats;
use crate::rng::RandomStream;
use crate::tensor::Tensor;
use crate::types::{MaskStack, Measurement, PhotonModel, VideoCube};

/// Upper end of the unified training APC range; the APC input channel is `apc / APC_MAX`.
pub const APC_MAX: f64 = 60.0;

/// Network input: channel 0 signal estimate, 1 Gaussian noise map, 2 APC proxy.
#[derive(Clone, Debug, PartialEq)]
pub struct NetInput {
    pub channels: Tensor<f32>,
}

impl NetInput {
    pub fn t(&self) -> usize {
        self.channels.shape()[1]
    }

    pub fn h(&self) -> usize {
        self.channels.shape()[2]
    }

    pub fn w(&self) -> usize {
        self.channels.shape()[3]
    }

    /// Channel 0 at frame 0, i.e. the per-pixel estimate `E`.
    pub fn estimate(&self) -> &[f32] {
        let hw = self.h() * self.w();
        &self.channels.data()[..hw]
    }
}

fn check_shapes(x: &VideoCube, m: &MaskStack) -> Result<()> {
    if x.shape() != m.shape() {
        return Err(Error::Shape(format!("video {:?} vs mask {:?}", x.shape(), m.shape())));
    }
    Ok(())
}

/// Per-frame Hadamard product `X_t ⊙ M_t`.
pub fn modulate(x: &VideoCube, m: &MaskStack) -> Result<VideoCube> {
    check_shapes(x, m)?;
    let data = x
        .tensor()
        .data()
        .iter()
        .zip(m.tensor().data())
        .map(|(&v, &b)| if b != 0 { v } else { 0.0 })
        .collect();
    VideoCube::new(Tensor::from_vec(&x.shape(), data)?)
}

/// Temporal sum of a cube, frame by frame in order.
pub fn integrate(modulated: &VideoCube) -> Tensor<f32> {
    let (t, h, w) = (modulated.t(), modulated.h(), modulated.w());
    let mut y = vec![0.0f32; h * w];
    for f in 0..t {
        for (acc, &v) in y.iter_mut().zip(modulated.frame(f)) {
            *acc += v;
        }
    }
    Tensor::from_vec(&[h, w], y).expect("shape")
}

/// Noiseless measurement `Σ_t X_t ⊙ M_t`.
pub fn clean_measurement(x: &VideoCube, m: &MaskStack) -> Result<Tensor<f32>> {
    Ok(integrate(&modulate(x, m)?))
}

/// Photon scale that makes the expected mean photon count over the
/// measurement equal `apc`.
pub fn calibrate_alpha(x: &VideoCube, m: &MaskStack, apc: f64) -> Result<f64> {
    if !(apc > 0.0 && apc.is_finite()) {
        return Err(Error::Config(format!("APC must be positive, got {apc}")));
    }
    let y = clean_measurement(x, m)?;
    let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / y.len() as f64;
    if !(mean > 0.0) {
        return Err(Error::Calibration(
            "clean measurement has zero mean; no light reaches the sensor".into(),
        ));
    }
    Ok(apc / mean)
}

/// Sample a noisy measurement; pixels are visited in row-major order, each
/// drawing one Poisson variate and (when `σ > 0`) one normal variate.
pub fn apply_noise(
    x: &VideoCube,
    m: &MaskStack,
    photon: &PhotonModel,
    stream: &mut RandomStream,
) -> Result<Measurement> {
    let clean = clean_measurement(x, m)?;
    let (alpha, sigma) = (photon.alpha(), photon.sigma());
    let mut y = Vec::with_capacity(clean.len());
    for (idx, &s) in clean.data().iter().enumerate() {
        let rate = alpha * s as f64;
        if !rate.is_finite() || rate < 0.0 {
            return Err(Error::Numeric(format!("photon rate {rate} at pixel {idx}")));
        }
        let mut v = stream.poisson(rate) as f64 / alpha;
        if sigma > 0.0 {
            v += sigma * stream.normal();
        }
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite measurement at pixel {idx}")));
        }
        y.push(v.max(0.0) as f32);
    }
    Ok(Measurement {
        y: Tensor::from_vec(&[x.h(), x.w()], y)?,
        cr: x.t(),
        photon: Some(*photon),
        seed: stream.seed(),
        mask_id: m.id(),
    })
}

/// Calibrate `α` for `apc` and sample the measurement.
pub fn simulate(x: &VideoCube, m: &MaskStack, apc: f64, sigma: f64, stream: &mut RandomStream) -> Result<Measurement> {
    let alpha = calibrate_alpha(x, m, apc)?;
    let photon = PhotonModel::new(apc, alpha, sigma)?;
    apply_noise(x, m, &photon, stream)
}

pub fn noiseless(x: &VideoCube, m: &MaskStack, seed: u64) -> Result<Measurement> {
    Ok(Measurement {
        y: clean_measurement(x, m)?,
        cr: x.t(),
        photon: None,
        seed,
        mask_id: m.id(),
    })
}

/// Build the three-channel network input.
///
/// Channel 0 is `y ⊘ max(Σ_t M_t, 1)` broadcast over all frames (pixels
/// never exposed come out as 0). A noiseless measurement gets `σ = 0` and
/// an APC proxy of 1.
pub fn estimate_input(meas: &Measurement, m: &MaskStack) -> Result<NetInput> {
    if meas.mask_id != m.id() {
        return Err(Error::Data(format!(
            "measurement was taken with mask {:016x}, not {:016x}",
            meas.mask_id,
            m.id()
        )));
    }
    let (t, h, w) = (m.t(), m.h(), m.w());
    if meas.y.shape() != [h, w] {
        return Err(Error::Shape(format!(
            "measurement {:?} vs mask frame {:?}",
            meas.y.shape(),
            [h, w]
        )));
    }
    let on = mask_stats(m).per_pixel_on;
    let estimate: Vec<f32> = meas
        .y
        .data()
        .iter()
        .zip(on.data())
        .map(|(&y, &c)| if c == 0 { 0.0 } else { y / c as f32 })
        .collect();
    let (sigma, apc_proxy) = match &meas.photon {
        Some(p) => (p.sigma() as f32, (p.apc() / APC_MAX) as f32),
        None => (0.0, 1.0),
    };
    let hw = h * w;
    let mut data = Vec::with_capacity(3 * t * hw);
    for _ in 0..t {
        data.extend_from_slice(&estimate);
    }
    data.resize(data.len() + t * hw, sigma);
    data.resize(data.len() + t * hw, apc_proxy);
    Ok(NetInput {
        channels: Tensor::from_vec(&[3, t, h, w], data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskgen::{gen_submask, tile_mask};
    use crate::rng::derive_stream;

    fn cube(t: usize, h: usize, w: usize, data: Vec<f32>) -> VideoCube {
        VideoCube::from_vec(t, h, w, data).unwrap()
    }

    fn mask(t: usize, h: usize, w: usize, data: Vec<u8>) -> MaskStack {
        MaskStack::new(Tensor::from_vec(&[t, h, w], data).unwrap()).unwrap()
    }

    fn random_cube(t: usize, h: usize, w: usize, seed: u64) -> VideoCube {
        let mut s = derive_stream(seed, "cube");
        cube(t, h, w, (0..t * h * w).map(|_| s.uniform() as f32).collect())
    }

    #[test]
    fn modulate_hand_cases() {
        let x = cube(1, 2, 2, vec![0.2, 0.4, 0.6, 0.8]);
        let out = modulate(&x, &mask(1, 2, 2, vec![1, 0, 0, 1])).unwrap();
        assert_eq!(out.tensor().data(), &[0.2, 0.0, 0.0, 0.8]);
        assert_eq!(modulate(&x, &mask(1, 2, 2, vec![1; 4])).unwrap(), x);
        let zero = modulate(&x, &mask(1, 2, 2, vec![0; 4])).unwrap();
        assert!(zero.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modulate_shape_mismatch_lists_both() {
        let x = random_cube(2, 4, 4, 1);
        let err = modulate(&x, &mask(2, 4, 8, vec![1; 64])).unwrap_err().to_string();
        assert!(err.contains("[2, 4, 4]") && err.contains("[2, 4, 8]"), "{err}");
    }

    #[test]
    fn integrate_cases() {
        let x = random_cube(1, 3, 3, 2);
        assert_eq!(integrate(&x).data(), x.frame(0));
        let c = cube(8, 2, 2, vec![0.25; 32]);
        assert!(integrate(&c).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn integrate_matches_loop_oracle() {
        let x = random_cube(4, 8, 8, 3);
        let y = integrate(&x);
        for i in 0..8 {
            for j in 0..8 {
                let mut acc = 0.0f32;
                for t in 0..4 {
                    acc += x.tensor().data()[(t * 8 + i) * 8 + j];
                }
                assert_eq!(acc.to_bits(), y.data()[i * 8 + j].to_bits());
            }
        }
    }

    #[test]
    fn alpha_for_half_on_masks() {
        // every pixel on in exactly 4 of 8 frames
        let data: Vec<u8> = (0..8 * 4).map(|k| u8::from((k / 4) % 2 == 0)).collect();
        let m = mask(8, 2, 2, data);
        let x = cube(8, 2, 2, vec![1.0; 32]);
        assert_eq!(calibrate_alpha(&x, &m, 20.0).unwrap(), 5.0);
        assert!(calibrate_alpha(&x, &m, 0.0).is_err());
        let dark = cube(8, 2, 2, vec![0.0; 32]);
        assert!(matches!(calibrate_alpha(&dark, &m, 20.0), Err(Error::Calibration(_))));
    }

    #[test]
    fn huge_alpha_is_noiseless_limit() {
        let x = random_cube(8, 16, 16, 4);
        let sub = gen_submask(8, 8, 0.5, &mut derive_stream(4, "mask")).unwrap();
        let m = tile_mask(&sub, 16, 16).unwrap();
        let photon = PhotonModel::new(1e9, 1e9, 0.0).unwrap();
        let meas = apply_noise(&x, &m, &photon, &mut derive_stream(4, "noise")).unwrap();
        let clean = clean_measurement(&x, &m).unwrap();
        for (a, b) in meas.y.data().iter().zip(clean.data()) {
            assert!((a - b).abs() < 1e-3);
        }
        assert_eq!(meas.cr, 8);
        assert_eq!(meas.mask_id, m.id());
    }

    #[test]
    fn noise_is_deterministic_and_nonnegative() {
        let x = random_cube(8, 16, 16, 5);
        let sub = gen_submask(8, 8, 0.5, &mut derive_stream(5, "mask")).unwrap();
        let m = tile_mask(&sub, 16, 16).unwrap();
        let a = simulate(&x, &m, 2.0, 0.3, &mut derive_stream(5, "noise")).unwrap();
        let b = simulate(&x, &m, 2.0, 0.3, &mut derive_stream(5, "noise")).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.y), bits(&b.y));
        assert!(a.y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn estimate_with_full_masks_is_temporal_mean() {
        let x = random_cube(4, 3, 3, 6);
        let m = mask(4, 3, 3, vec![1; 36]);
        let input = estimate_input(&noiseless(&x, &m, 0).unwrap(), &m).unwrap();
        for p in 0..9 {
            let mean = (0..4).map(|t| x.frame(t)[p]).sum::<f32>() / 4.0;
            for t in 0..4 {
                assert!((input.channels.data()[t * 9 + p] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn estimate_guards_dead_pixels_and_fills_noise_maps() {
        let mut bits = vec![1u8; 2 * 4];
        bits[0] = 0;
        bits[4] = 0; // pixel (0,0) never exposed
        let m = mask(2, 2, 2, bits);
        let x = cube(2, 2, 2, vec![0.5; 8]);
        let meas = simulate(&x, &m, 20.0, 0.01, &mut derive_stream(1, "noise")).unwrap();
        let input = estimate_input(&meas, &m).unwrap();
        assert_eq!(input.estimate()[0], 0.0);
        let hw = 4;
        let t = 2;
        let sigma_map = &input.channels.data()[t * hw..2 * t * hw];
        let apc_map = &input.channels.data()[2 * t * hw..];
        assert!(sigma_map.iter().all(|&v| v == 0.01));
        assert!(apc_map.iter().all(|&v| (v - 0.3333).abs() < 1e-4));
    }

    #[test]
    fn estimate_rejects_foreign_mask() {
        let x = random_cube(2, 2, 2, 7);
        let m1 = mask(2, 2, 2, vec![1; 8]);
        let m2 = mask(2, 2, 2, vec![1, 0, 1, 1, 1, 1, 1, 1]);
        let meas = noiseless(&x, &m1, 0).unwrap();
        assert!(matches!(estimate_input(&meas, &m2), Err(Error::Data(_))));
    }

    #[test]
    fn forward_model_is_linear() {
        let sub = gen_submask(4, 8, 0.5, &mut derive_stream(8, "mask")).unwrap();
        let m = tile_mask(&sub, 8, 8).unwrap();
        let x = random_cube(4, 8, 8, 8);
        let z = random_cube(4, 8, 8, 9);
        let (a, b) = (0.3f32, 0.6f32);
        let combo: Vec<f32> = x
            .tensor()
            .data()
            .iter()
            .zip(z.tensor().data())
            .map(|(&p, &q)| a * p + b * q)
            .collect();
        let lhs = clean_measurement(&cube(4, 8, 8, combo), &m).unwrap();
        let yx = clean_measurement(&x, &m).unwrap();
        let yz = clean_measurement(&z, &m).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(yx.data()).zip(yz.data()) {
            assert!((l - (a * p + b * q)).abs() < 1e-5);
        }
    }

    #[test]
    fn snr_grows_with_apc() {
        let x = random_cube(8, 16, 16, 10);
        let sub = gen_submask(8, 8, 0.5, &mut derive_stream(10, "mask")).unwrap();
        let m = tile_mask(&sub, 16, 16).unwrap();
        let clean = clean_measurement(&x, &m).unwrap();
        let signal: f64 = clean.data().iter().map(|&v| (v as f64).powi(2)).sum();
        let mut last = 0.0;
        for &apc in &[5.0, 10.0, 20.0, 40.0] {
            let mut snr = 0.0;
            for seed in 0..100 {
                let meas = simulate(&x, &m, apc, 0.01, &mut derive_stream(seed, "snr")).unwrap();
                let noise: f64 = meas
                    .y
                    .data()
                    .iter()
                    .zip(clean.data())
                    .map(|(&a, &b)| ((a - b) as f64).powi(2))
                    .sum();
                snr += 10.0 * (signal / noise).log10() / 100.0;
            }
            assert!(snr > last, "apc {apc}: snr {snr} <= {last}");
            last = snr;
        }
    }
}
