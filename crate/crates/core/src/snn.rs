//! Integrate-and-fire simulation.
//!
//! Converted networks are sequences of segments: a run of linear ops
//! (dense/conv/pool/flatten, applied every time step) feeding either a
//! firing layer or, for the last segment, a non-spiking accumulator whose
//! time-averaged potential is the logits readout.
//!
//! Neurons charge, fire when the potential reaches threshold, and reset
//! by subtraction. Spike counts are tracked as integers so the average
//! postsynaptic potential lands exactly on the `theta * k / T` grid.

use crate::ann::{apply_layer, Layer, Mode, NetworkMeta};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Membrane state of one firing layer.
#[derive(Clone, Debug)]
pub struct FireState {
    /// Firing threshold, copied from the source activation threshold.
    pub theta: f32,
    /// Membrane potentials.
    pub v: Tensor,
    /// Spikes emitted per element since the last reset.
    pub spike_count: Vec<u32>,
}

impl FireState {
    pub fn new(theta: f32, shape: &[usize]) -> Self {
        Self {
            theta,
            v: Tensor::full(shape, theta / 2.0),
            spike_count: vec![0; shape.iter().product()],
        }
    }

    /// Restore `v(0) = theta/2` and clear spike counts.
    pub fn reset(&mut self) {
        for v in self.v.data_mut() {
            *v = self.theta / 2.0;
        }
        self.spike_count.fill(0);
    }

    /// Average postsynaptic potential after `steps` ticks:
    /// `theta * spike_count / steps`.
    pub fn phi(&self, steps: usize) -> Tensor {
        let t = steps as f32;
        let data = self
            .spike_count
            .iter()
            .map(|&c| self.theta * (c as f32 / t))
            .collect();
        Tensor::new(self.v.shape().to_vec(), data).expect("phi is finite")
    }
}

/// One charge-fire-reset tick: `u = v + I`; spike where `u >= theta`;
/// `v = u - s*theta`. Returns the 0/1 spike tensor.
pub fn if_step(state: &mut FireState, input_current: &Tensor) -> Result<Tensor> {
    if input_current.shape() != state.v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "if_step: current {:?} vs state {:?}",
            input_current.shape(),
            state.v.shape()
        )));
    }
    if let Some(i) = input_current.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "if_step: input element {i} is {}",
            input_current.data()[i]
        )));
    }
    let theta = state.theta;
    let mut spikes = Tensor::zeros(state.v.shape());
    let sd = spikes.data_mut();
    for (i, (v, &cur)) in state
        .v
        .data_mut()
        .iter_mut()
        .zip(input_current.data())
        .enumerate()
    {
        let u = *v + cur;
        if u >= theta {
            sd[i] = 1.0;
            *v = u - theta;
            state.spike_count[i] += 1;
        } else {
            *v = u;
        }
    }
    Ok(spikes)
}

/// A run of linear ops followed by an optional firing layer. The final
/// segment of a network has `fire = None` and feeds the readout
/// accumulator.
#[derive(Clone, Debug)]
pub struct Segment {
    pub ops: Vec<Layer>,
    pub fire: Option<FireState>,
}

/// A converted spiking network with simulation state.
#[derive(Clone, Debug)]
pub struct SpikingNetwork {
    pub segments: Vec<Segment>,
    pub meta: NetworkMeta,
    readout_sum: Tensor,
    steps_run: usize,
}

/// Result of simulating `T` time steps.
pub struct SnnOutput {
    /// Time-averaged potential of the output accumulator.
    pub mean_logits: Tensor,
    /// Average postsynaptic potential per firing layer.
    pub phi: Vec<Tensor>,
    /// Final membrane potentials per firing layer.
    pub v_final: Vec<Tensor>,
}

fn apply_ops(ops: &[Layer], x: &Tensor) -> Result<Tensor> {
    let mut cur = x.clone();
    let mut unused = RandomSource::new(0, 0);
    for op in ops {
        debug_assert!(!matches!(op, Layer::Activation { .. }));
        cur = apply_layer(op, &cur, Mode::Eval, &mut unused)?;
    }
    Ok(cur)
}

impl SpikingNetwork {
    /// Assemble from per-segment ops and thresholds, computing membrane
    /// shapes from the declared input shape. Every segment except the
    /// last must carry a threshold.
    pub fn assemble(parts: Vec<(Vec<Layer>, Option<f32>)>, meta: NetworkMeta) -> Result<Self> {
        let mut shape = meta.input_shape.clone();
        let mut segments = Vec::with_capacity(parts.len());
        for (idx, (ops, theta)) in parts.iter().enumerate() {
            for op in ops {
                if matches!(op, Layer::Activation { .. }) {
                    return Err(Error::Config(
                        "spiking segments cannot contain activation layers".into(),
                    ));
                }
                shape = crate::ann::layer_output_shape(op, &shape)?;
            }
            match theta {
                Some(t) => {
                    if !t.is_finite() || *t <= 0.0 {
                        return Err(Error::UnfinalizedParams(format!(
                            "segment {idx} threshold {t} must be positive"
                        )));
                    }
                    segments.push(Segment {
                        ops: ops.clone(),
                        fire: Some(FireState::new(*t, &shape)),
                    });
                }
                None => {
                    if idx != parts.len() - 1 {
                        return Err(Error::Config(
                            "only the final segment may omit a firing layer".into(),
                        ));
                    }
                    segments.push(Segment {
                        ops: ops.clone(),
                        fire: None,
                    });
                }
            }
        }
        if shape != [meta.class_count] {
            return Err(Error::ShapeMismatch(format!(
                "readout shape {shape:?} does not match class count {}",
                meta.class_count
            )));
        }
        Ok(Self {
            segments,
            meta,
            readout_sum: Tensor::zeros(&shape),
            steps_run: 0,
        })
    }

    /// Thresholds of the firing layers, in order.
    pub fn thetas(&self) -> Vec<f32> {
        self.segments
            .iter()
            .filter_map(|s| s.fire.as_ref().map(|f| f.theta))
            .collect()
    }

    /// Restore all membrane potentials to `theta/2` and clear counters.
    pub fn reset(&mut self) {
        for seg in &mut self.segments {
            if let Some(fire) = &mut seg.fire {
                fire.reset();
            }
        }
        for v in self.readout_sum.data_mut() {
            *v = 0.0;
        }
        self.steps_run = 0;
    }

    /// Advance every layer one global tick; the analog input is applied
    /// as the constant input current of the first segment.
    pub fn step(&mut self, x: &Tensor) -> Result<()> {
        let mut current = x.clone();
        for seg in &mut self.segments {
            current = apply_ops(&seg.ops, &current)?;
            if let Some(fire) = &mut seg.fire {
                let spikes = if_step(fire, &current)?;
                current = spikes.scale(fire.theta)?;
            }
        }
        self.readout_sum = self.readout_sum.add(&current)?;
        self.steps_run += 1;
        Ok(())
    }

    /// Reset, then simulate `steps` ticks under constant input encoding.
    pub fn run(&mut self, x: &Tensor, steps: usize) -> Result<SnnOutput> {
        if steps < 1 {
            return Err(Error::Config("simulation needs at least one step".into()));
        }
        if x.shape() != self.meta.input_shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match declared shape {:?}",
                x.shape(),
                self.meta.input_shape
            )));
        }
        self.reset();
        for _ in 0..steps {
            self.step(x)?;
        }
        let mean_logits = self.readout_sum.scale(1.0 / steps as f32)?;
        let mut phi = Vec::new();
        let mut v_final = Vec::new();
        for seg in &self.segments {
            if let Some(fire) = &seg.fire {
                phi.push(fire.phi(steps));
                v_final.push(fire.v.clone());
            }
        }
        Ok(SnnOutput {
            mean_logits,
            phi,
            v_final,
        })
    }
}

/// Conservation audit: simulate `steps` ticks and return, per firing
/// layer, `W phi_prev - (v(T) - v(0))/T - phi`. The residual is zero up
/// to f32 rounding for any input and any `T`.
pub fn eq5_audit(net: &mut SpikingNetwork, x: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    let out = net.run(x, steps)?;
    let mut residuals = Vec::new();
    let mut prev_phi = x.clone();
    for (seg, phi) in net.segments.iter().zip(&out.phi) {
        let fire = match &seg.fire {
            Some(fire) => fire,
            None => break,
        };
        let weighted = apply_ops(&seg.ops, &prev_phi)?;
        let v0 = Tensor::full(fire.v.shape(), fire.theta / 2.0);
        let drift = fire.v.sub(&v0)?.scale(1.0 / steps as f32)?;
        residuals.push(weighted.sub(&drift)?.sub(phi)?);
        prev_phi = phi.clone();
    }
    Ok(residuals)
}

/// Closed-form average postsynaptic potential of one layer under constant
/// weighted input: `theta * clip(floor((z*T + v0)/theta)/T, 0, 1)`.
pub fn closed_form_phi(z_hat: &Tensor, theta: f32, v0: f32, steps: usize) -> Result<Tensor> {
    let t = steps as f32;
    z_hat.map(|z| {
        let k = ((z * t + v0) / theta).floor().clamp(0.0, t);
        theta * (k / t)
    })
}

/// Spike count of a single neuron under constant input `z` for `steps`
/// ticks, simulated step by step.
pub fn simulate_constant_scalar(z: f32, theta: f32, v0: f32, steps: usize) -> u32 {
    let mut v = v0;
    let mut count = 0u32;
    for _ in 0..steps {
        let u = v + z;
        if u >= theta {
            count += 1;
            v = u - theta;
        } else {
            v = u;
        }
    }
    count
}

/// True when every element of `phi` satisfies `phi*T/theta` within
/// `1e-5` of an integer in `[0, T]`.
pub fn phi_on_grid(phi: &Tensor, theta: f32, steps: usize) -> bool {
    phi.data().iter().all(|&p| {
        let k = p * steps as f32 / theta;
        let r = k.round();
        (k - r).abs() <= 1e-5 && r >= 0.0 && r <= steps as f32
    })
}

/// Classification accuracy of a spiking network at `steps` time steps.
/// Samples are evaluated in parallel on per-thread state copies.
pub fn snn_accuracy(net: &SpikingNetwork, samples: &[(Tensor, usize)], steps: usize) -> Result<f32> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let hits: Vec<Result<bool>> = samples
        .par_iter()
        .map_init(
            || net.clone(),
            |local, (x, label)| {
                let out = local.run(x, steps)?;
                Ok(crate::ann::argmax(out.mean_logits.data()) == *label)
            },
        )
        .collect();
    let mut correct = 0usize;
    for h in hits {
        correct += h? as usize;
    }
    Ok(correct as f32 / samples.len() as f32)
}
