//! Finite-difference verification of model gradients in f64.

use serde::Serialize;

use super::model::{HeadKind, Model, ModelConfig};
use crate::error::Result;
use crate::rng::derive_stream;
use crate::sensor::NetInput;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, keeps ~0 gradients meaningful.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub step: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare backward against central differences for every scalar
/// parameter, using the loss `Σ output ⊙ probe`.
pub fn gradcheck_model(model: &mut Model<f64>, input: &NetInput, probe: &Tensor<f64>) -> Result<GradcheckReport> {
    let loss = |m: &Model<f64>| -> Result<f64> {
        let y = m.infer(input)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };
    model.forward(input)?;
    let grads = model.backward(probe)?;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for idx in 0..grads.len() {
        let (name, g) = grads.at(idx);
        let name = name.to_string();
        let analytic = g.tensor.data().to_vec();
        for (e, &a) in analytic.iter().enumerate() {
            let orig = model.params().at(idx).1.tensor.data()[e];
            model.params_mut().at_mut(idx).tensor.data_mut()[e] = orig + FD_STEP;
            let up = loss(model)?;
            model.params_mut().at_mut(idx).tensor.data_mut()[e] = orig - FD_STEP;
            let down = loss(model)?;
            model.params_mut().at_mut(idx).tensor.data_mut()[e] = orig;
            let rel = relative_error(a, (up - down) / (2.0 * FD_STEP));
            if rel > worst.0 || checked == 0 {
                worst = (rel, format!("{name}[{e}]"));
            }
            checked += 1;
        }
    }
    Ok(GradcheckReport {
        max_rel_err: worst.0,
        worst_param: worst.1,
        params_checked: checked,
        step: FD_STEP,
    })
}

/// The tiny configuration used for full-model gradient checks.
pub fn gradcheck_config(head: HeadKind) -> ModelConfig {
    ModelConfig {
        channels: 4,
        encoder_depth: 1,
        decoder_depth: 0,
        heads: 2,
        mlp_ratio: 2,
        cr: 2,
        height: 4,
        width: 4,
        head,
    }
}

/// Full-model check on the tiny configuration. Parameters are
/// randomized so no branch sits at its zero initialization.
pub fn gradcheck(seed: u64, head: HeadKind) -> Result<GradcheckReport> {
    let cfg = gradcheck_config(head);
    let mut model = Model::<f64>::build(cfg.clone(), &mut derive_stream(seed, "gradcheck/init"))?;
    let mut s = derive_stream(seed, "gradcheck/perturb");
    for (_, e) in model.params_mut().iter_mut() {
        for v in e.tensor.data_mut() {
            *v += s.uniform_range(-0.5, 0.5);
        }
    }
    let (t, h, w) = (cfg.cr, cfg.height, cfg.width);
    let channels = (0..3 * t * h * w).map(|_| s.uniform() as f32).collect();
    let input = NetInput {
        channels: Tensor::from_vec(&[3, t, h, w], channels)?,
    };
    let probe = Tensor::from_vec(&[t, h, w], (0..t * h * w).map(|_| s.uniform_range(-1.0, 1.0)).collect())?;
    gradcheck_model(&mut model, &input, &probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_matches_finite_differences() {
        for head in [HeadKind::Reconstruction, HeadKind::Edge, HeadKind::Depth] {
            let r = gradcheck(3, head).unwrap();
            assert_eq!(r.params_checked, crate::nnet::param_count(&gradcheck_config(head)));
            assert!(r.max_rel_err < 1e-4, "{head:?}: {r:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
