//! Lossless mapping from a trained source network to a spiking network.
//!
//! Weights and biases are copied unchanged, each activation threshold
//! becomes the firing threshold of the following layer, initial membrane
//! potentials are set to half the threshold, and the training-time noise
//! intensity is discarded. Biases are injected as a constant per-step
//! current by the linear ops themselves, so the average input matches the
//! source pre-activation.

use crate::ann::{Layer, NetworkDef};
use crate::error::{Error, Result};
use crate::snn::SpikingNetwork;

/// Convert a source network into a spiking network with
/// `theta = threshold` and `v(0) = theta/2`.
pub fn convert(net: &NetworkDef) -> Result<SpikingNetwork> {
    net.validate().map_err(|e| match e {
        Error::Config(msg) => Error::UnfinalizedParams(msg),
        other => other,
    })?;
    let mut parts: Vec<(Vec<Layer>, Option<f32>)> = Vec::new();
    let mut ops: Vec<Layer> = Vec::new();
    for layer in &net.layers {
        match layer {
            Layer::Activation { params } => {
                if !params.threshold.is_finite() || params.threshold <= 0.0 {
                    return Err(Error::UnfinalizedParams(format!(
                        "activation threshold {} is not positive",
                        params.threshold
                    )));
                }
                parts.push((std::mem::take(&mut ops), Some(params.threshold)));
            }
            other => ops.push(other.clone()),
        }
    }
    parts.push((ops, None));
    SpikingNetwork::assemble(parts, net.meta.clone())
}
