//! Quantized activation functions.
//!
//! `qcfs_forward` is the clip-floor-shift staircase whose output grid
//! matches the values an integrate-and-fire layer can reach in `L` time
//! steps. `nq_forward` adds zero-mean Gaussian noise of per-layer
//! intensity `noise_std`, modeling the residual conversion error during
//! source-network training.

use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

/// Per-layer quantized-activation parameters.
///
/// `threshold` is trainable and must stay positive; `steps` is fixed after
/// construction; `noise_std == 0` makes the noisy activation coincide with
/// the plain quantized one bit for bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantActParams {
    /// Trainable activation ceiling; copied to the spiking threshold on
    /// conversion.
    pub threshold: f32,
    /// Number of quantization steps.
    pub steps: u32,
    /// Additive Gaussian noise intensity used in training mode.
    pub noise_std: f32,
}

impl QuantActParams {
    pub fn new(threshold: f32, steps: u32) -> Result<Self> {
        let p = Self {
            threshold,
            steps,
            noise_std: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.threshold.is_finite() || self.threshold <= 0.0 {
            return Err(Error::Config(format!(
                "threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// Scalar staircase: `threshold * clip(floor(z*L/threshold + 0.5)/L, 0, 1)`.
///
/// Exact half-grid inputs follow IEEE floor of the computed f32 value.
#[inline]
pub fn qcfs_scalar(z: f32, threshold: f32, steps: u32) -> f32 {
    let l = steps as f32;
    let q = (z * l / threshold + 0.5).floor() / l;
    threshold * q.clamp(0.0, 1.0)
}

fn check_input_finite(z: &Tensor, op: &str) -> Result<()> {
    match z.data().iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!(
            "{op}: input element {i} is {}",
            z.data()[i]
        ))),
    }
}

/// Elementwise quantized clip-floor-shift activation.
pub fn qcfs_forward(z: &Tensor, p: &QuantActParams) -> Result<Tensor> {
    p.validate()?;
    check_input_finite(z, "qcfs_forward")?;
    z.map(|v| qcfs_scalar(v, p.threshold, p.steps))
}

/// Quantized activation plus fresh i.i.d. Gaussian noise, `noise_std * G`
/// per element per call. With `noise_std == 0` no draws are consumed and
/// the output equals [`qcfs_forward`] exactly.
pub fn nq_forward(z: &Tensor, p: &QuantActParams, rs: &mut RandomSource) -> Result<Tensor> {
    p.validate()?;
    check_input_finite(z, "nq_forward")?;
    if p.noise_std == 0.0 {
        return qcfs_forward(z, p);
    }
    z.map(|v| qcfs_scalar(v, p.threshold, p.steps) + p.noise_std * rs.next_gaussian())
}

/// Straight-through gradients for the quantized activation.
///
/// The quantizer is treated as a clipped identity: the input gradient
/// passes where `0 < z < threshold`, and the threshold collects gradient
/// where `z >= threshold`. Additive noise contributes nothing.
pub fn act_backward(
    z: &Tensor,
    p: &QuantActParams,
    grad_out: &Tensor,
) -> Result<(Tensor, f32)> {
    if z.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch(format!(
            "act_backward: z {:?} vs grad {:?}",
            z.shape(),
            grad_out.shape()
        )));
    }
    let mut grad_z = Tensor::zeros(z.shape());
    let mut grad_threshold = 0f64;
    let gz = grad_z.data_mut();
    for (i, (&zi, &gi)) in z.data().iter().zip(grad_out.data()).enumerate() {
        if zi > 0.0 && zi < p.threshold {
            gz[i] = gi;
        } else if zi >= p.threshold {
            grad_threshold += gi as f64;
        }
    }
    Ok((grad_z, grad_threshold as f32))
}
