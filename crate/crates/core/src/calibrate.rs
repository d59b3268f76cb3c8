//! Layer-wise residual-error compensation.
//!
//! After every training epoch the current network is converted, the
//! converted network is run on a held-out validation split at `tau` time
//! steps, and the standard deviation of `phi - a` per activation layer
//! becomes that layer's noise intensity for the next epoch. Checkpoints
//! are selected by converted-network accuracy, not source accuracy.

use crate::ann::{
    build_network, evaluate_accuracy, eval_forward, train_epoch, NetworkDef, NetworkMeta,
    SgdState, TrainConfig,
};
use crate::convert::convert;
use crate::error::{Error, Result};
use crate::io::DatasetHandle;
use crate::rng::RandomSource;
use crate::snn::{snn_accuracy, SpikingNetwork};
use crate::tensor::Tensor;
use rayon::prelude::*;
use std::time::Instant;

/// Pooled residual statistics for one activation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerResidual {
    pub mean: f32,
    /// Population standard deviation over all pooled elements.
    pub std: f32,
    pub sample_count: usize,
}

/// Residual statistics for every activation layer, recomputed from
/// scratch each epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    pub layers: Vec<LayerResidual>,
}

impl ResidualStats {
    pub fn stds(&self) -> Vec<f32> {
        self.layers.iter().map(|l| l.std).collect()
    }
}

/// Noise-induction settings.
#[derive(Clone, Debug)]
pub struct CalibrationConfig {
    /// Time steps used when measuring residuals and evaluating the
    /// converted network during training.
    pub tau: usize,
    pub val_fraction: f32,
    /// Measure residuals every this many epochs.
    pub recalibrate_every: usize,
    /// With calibration off, noise stays pinned to zero (plain
    /// quantized-activation training).
    pub enabled: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            val_fraction: 0.05,
            recalibrate_every: 1,
            enabled: true,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 0.5), got {}",
                self.val_fraction
            )));
        }
        if self.recalibrate_every < 1 {
            return Err(Error::Config("recalibrate_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic stratified split keyed by `seed`. The validation set is
/// disjoint from the training set and holds roughly `fraction` of each
/// class (at least one sample).
pub fn split_validation(
    dataset: &DatasetHandle,
    fraction: f32,
    seed: u64,
) -> Result<(DatasetHandle, DatasetHandle)> {
    if !(fraction > 0.0 && fraction < 0.5) {
        return Err(Error::Config(format!(
            "validation fraction must be in (0, 0.5), got {fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    for (i, (_, label)) in dataset.samples.iter().enumerate() {
        by_class[*label].push(i);
    }
    let mut val_indices = Vec::new();
    let mut train_indices = Vec::new();
    for (class, mut indices) in by_class.into_iter().enumerate() {
        if indices.len() < 2 {
            return Err(Error::EmptyClass(class));
        }
        RandomSource::new(seed, 0x5011u64 + class as u64).shuffle(&mut indices);
        let take = ((fraction * indices.len() as f32).round() as usize)
            .max(1)
            .min(indices.len() - 1);
        val_indices.extend_from_slice(&indices[..take]);
        train_indices.extend_from_slice(&indices[take..]);
    }
    val_indices.sort_unstable();
    train_indices.sort_unstable();
    let pick = |idx: &[usize]| DatasetHandle {
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
        class_count: dataset.class_count,
        input_shape: dataset.input_shape.clone(),
        provenance: dataset.provenance.clone(),
    };
    Ok((pick(&train_indices), pick(&val_indices)))
}

/// Measure `phi - a` per activation layer over a validation set: the
/// source network runs in evaluation mode (no noise), the converted
/// network runs `tau` time steps, and the statistics pool every element
/// of every sample.
pub fn measure_residual(
    ann: &NetworkDef,
    snn: &SpikingNetwork,
    val_set: &[(Tensor, usize)],
    tau: usize,
) -> Result<ResidualStats> {
    if tau < 1 {
        return Err(Error::Config("tau must be >= 1".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let n_layers = ann.activation_params().len();
    if snn.thetas().len() != n_layers {
        return Err(Error::ShapeMismatch(format!(
            "source has {n_layers} activation layers, converted has {}",
            snn.thetas().len()
        )));
    }
    // Per-sample partial sums, reduced in sample order.
    let partials: Vec<Result<Vec<(f64, f64, usize)>>> = val_set
        .par_iter()
        .map_init(
            || snn.clone(),
            |local, (x, _)| {
                let (_, acts) = eval_forward(ann, x)?;
                let out = local.run(x, tau)?;
                let mut layer_sums = Vec::with_capacity(acts.len());
                for (a, phi) in acts.iter().zip(&out.phi) {
                    if a.shape() != phi.shape() {
                        return Err(Error::ShapeMismatch(format!(
                            "activation {:?} vs phi {:?}",
                            a.shape(),
                            phi.shape()
                        )));
                    }
                    let mut sum = 0f64;
                    let mut sumsq = 0f64;
                    for (&av, &pv) in a.data().iter().zip(phi.data()) {
                        let r = (pv - av) as f64;
                        sum += r;
                        sumsq += r * r;
                    }
                    layer_sums.push((sum, sumsq, a.len()));
                }
                Ok(layer_sums)
            },
        )
        .collect();

    let mut totals = vec![(0f64, 0f64, 0usize); n_layers];
    for partial in partials {
        for (t, (s, sq, n)) in totals.iter_mut().zip(partial?) {
            t.0 += s;
            t.1 += sq;
            t.2 += n;
        }
    }
    let layers = totals
        .into_iter()
        .map(|(sum, sumsq, count)| {
            let n = count as f64;
            let mean = sum / n;
            let var = (sumsq / n - mean * mean).max(0.0);
            LayerResidual {
                mean: mean as f32,
                std: var.sqrt() as f32,
                sample_count: count,
            }
        })
        .collect();
    Ok(ResidualStats { layers })
}

/// Pooled mean and population standard deviation of a raw residual pool.
pub fn pooled_stats(residuals: &[f32]) -> LayerResidual {
    let n = residuals.len() as f64;
    let mean = residuals.iter().map(|&r| r as f64).sum::<f64>() / n;
    let var = residuals
        .iter()
        .map(|&r| {
            let d = r as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    LayerResidual {
        mean: mean as f32,
        std: var.sqrt() as f32,
        sample_count: residuals.len(),
    }
}

/// Copy measured standard deviations into the per-layer noise
/// intensities; all other parameters are untouched.
pub fn induce_noise(stats: &ResidualStats, ann: &NetworkDef) -> Result<NetworkDef> {
    let mut out = ann.clone();
    out.set_noise(&stats.stds())?;
    Ok(out)
}

/// One row of the training history.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub ann_acc: f32,
    /// Converted-network test accuracy at `tau` time steps.
    pub snn_acc: f32,
    /// Noise intensity used during this epoch, per activation layer.
    pub deltas: Vec<f32>,
    pub wall_seconds: f64,
    /// Residual standard deviations measured after this epoch, when
    /// calibration ran.
    pub measured_std: Option<Vec<f32>>,
}

/// Result of a compensation training run.
pub struct TrainOutcome {
    /// Checkpoint with the best source-network test accuracy.
    pub best_ann: NetworkDef,
    pub best_ann_epoch: usize,
    pub best_ann_acc: f32,
    /// Checkpoint with the best converted-network test accuracy; this is
    /// the model the protocol keeps.
    pub best_snn: SpikingNetwork,
    pub best_snn_epoch: usize,
    pub best_snn_acc: f32,
    pub final_ann: NetworkDef,
    pub history: Vec<EpochRecord>,
}

/// Index of the epoch with the highest converted-network accuracy;
/// earliest epoch wins ties.
pub fn select_best_epoch(history: &[EpochRecord]) -> usize {
    let mut best = 0;
    for (i, rec) in history.iter().enumerate().skip(1) {
        if rec.snn_acc > history[best].snn_acc {
            best = i;
        }
    }
    best
}

/// Full training loop: epoch 1 runs with zero noise; after each epoch the
/// converted network is evaluated on the test set and residuals measured
/// on the validation split set the next epoch's noise intensities.
pub fn train_with_compensation(
    train: &DatasetHandle,
    test: &DatasetHandle,
    arch: &str,
    cfg: &TrainConfig,
    cal: &CalibrationConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    cal.validate()?;
    if train.input_shape != test.input_shape || train.class_count != test.class_count {
        return Err(Error::ShapeMismatch(format!(
            "train {:?}/{} vs test {:?}/{}",
            train.input_shape, train.class_count, test.input_shape, test.class_count
        )));
    }
    let rs = RandomSource::new(cfg.seed, 0);
    let meta = NetworkMeta {
        dataset: train.provenance.clone(),
        input_shape: train.input_shape.clone(),
        class_count: train.class_count,
    };
    let mut net = build_network(arch, meta, cfg.steps, cfg.threshold_init, &rs)?;
    let (train_set, val_set) = split_validation(train, cal.val_fraction, cfg.seed)?;
    let mut opt = SgdState::new(&net);

    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best_ann: Option<(NetworkDef, usize, f32)> = None;
    let mut best_snn: Option<(SpikingNetwork, usize, f32)> = None;

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let deltas_used: Vec<f32> = net
            .activation_params()
            .iter()
            .map(|p| p.noise_std)
            .collect();
        train_epoch(&mut net, &mut opt, &train_set.samples, cfg, epoch, &rs)?;
        let snn = convert(&net)?;
        let ann_acc = evaluate_accuracy(&net, &test.samples)?;
        let snn_acc = snn_accuracy(&snn, &test.samples, cal.tau)?;

        let mut measured_std = None;
        if cal.enabled && (epoch + 1) % cal.recalibrate_every == 0 {
            let stats = measure_residual(&net, &snn, &val_set.samples, cal.tau)?;
            let stds = stats.stds();
            net.set_noise(&stds)?;
            measured_std = Some(stds);
        }

        if best_ann.as_ref().is_none_or(|(_, _, acc)| ann_acc > *acc) {
            best_ann = Some((net.clone(), epoch + 1, ann_acc));
        }
        if best_snn.as_ref().is_none_or(|(_, _, acc)| snn_acc > *acc) {
            best_snn = Some((snn, epoch + 1, snn_acc));
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            ann_acc,
            snn_acc,
            deltas: deltas_used,
            wall_seconds: t0.elapsed().as_secs_f64(),
            measured_std,
        });
    }

    let (best_ann, best_ann_epoch, best_ann_acc) = best_ann.unwrap();
    let (best_snn, best_snn_epoch, best_snn_acc) = best_snn.unwrap();
    debug_assert!(history.iter().all(|r| r.snn_acc <= best_snn_acc));
    Ok(TrainOutcome {
        best_ann,
        best_ann_epoch,
        best_ann_acc,
        best_snn,
        best_snn_epoch,
        best_snn_acc,
        final_ann: net,
        history,
    })
}

/// Render history as CSV: `epoch,ann_acc,snn_acc,delta_1..delta_n,epoch_wall_seconds`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let n_deltas = history.first().map_or(0, |r| r.deltas.len());
    let mut out = String::from("epoch,ann_acc,snn_acc");
    for i in 1..=n_deltas {
        out.push_str(&format!(",delta_{i}"));
    }
    out.push_str(",epoch_wall_seconds\n");
    for rec in history {
        out.push_str(&format!("{},{},{}", rec.epoch, rec.ann_acc, rec.snn_acc));
        for d in &rec.deltas {
            out.push_str(&format!(",{d}"));
        }
        out.push_str(&format!(",{}\n", rec.wall_seconds));
    }
    out
}
