//! Conversion-error measurement and reporting.
//!
//! Two error views are computed per activation layer: the deterministic
//! observable `phi - a` (what the calibration loop measures) and the
//! stochastic conversion error `phi - (a + delta*G)` with fresh noise
//! draws (whose expectation over bounded uniform inputs is zero). The
//! decomposition report adds clipping and quantization shares plus a
//! residual histogram, and serializes to CSV or JSON with a fixed column
//! order.

use crate::activation::qcfs_scalar;
use crate::ann::{forward_full, Mode, NetworkDef};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::snn::{simulate_constant_scalar, SpikingNetwork};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Histogram bin count used by residual reports.
pub const HIST_BINS: usize = 101;

/// Per-layer conversion-error tensors for one input.
pub struct ConversionError {
    /// `phi - (a + delta*G)` with fresh noise per element.
    pub stochastic: Vec<Tensor>,
    /// `phi - a`.
    pub deterministic: Vec<Tensor>,
}

/// Conversion error per activation layer for a single input.
///
/// The weighted-input-minus-potential-drift term of the definition equals
/// `phi` by the conservation identity (audited separately), so both views
/// are computed from `phi` directly: the deterministic residual is
/// `phi - a`, the stochastic error subtracts a fresh noisy activation.
pub fn conversion_error(
    ann: &NetworkDef,
    snn: &mut SpikingNetwork,
    x: &Tensor,
    steps: usize,
    rs: &mut RandomSource,
) -> Result<ConversionError> {
    let mut unused = RandomSource::new(0, 0);
    let trace = forward_full(ann, x, Mode::Eval, &mut unused)?;
    let out = snn.run(x, steps)?;
    if trace.activations.len() != out.phi.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} activation layers vs {} firing layers",
            trace.activations.len(),
            out.phi.len()
        )));
    }
    let params = ann.activation_params();
    let mut stochastic = Vec::new();
    let mut deterministic = Vec::new();
    for ((a, phi), p) in trace.activations.iter().zip(&out.phi).zip(&params) {
        let det = phi.sub(a)?;
        let stoch = if p.noise_std == 0.0 {
            det.clone()
        } else {
            det.map(|r| r - p.noise_std * rs.next_gaussian())?
        };
        deterministic.push(det);
        stochastic.push(stoch);
    }
    Ok(ConversionError {
        stochastic,
        deterministic,
    })
}

/// Monte Carlo check that the single-neuron conversion error has zero
/// expectation: draws `z ~ U(0, theta)`, simulates `steps` ticks from
/// `v(0) = theta/2`, subtracts the noisy quantized activation, and
/// returns the sample mean and its standard error.
pub fn theorem1_mc(
    theta: f32,
    steps_l: u32,
    steps_t: usize,
    delta: f32,
    n_samples: usize,
    rs: &mut RandomSource,
) -> Result<(f64, f64)> {
    if n_samples < 10_000 {
        return Err(Error::Config(format!(
            "theorem1_mc needs at least 10^4 samples, got {n_samples}"
        )));
    }
    let mut sum = 0f64;
    let mut sumsq = 0f64;
    for _ in 0..n_samples {
        let z = rs.uniform_in(0.0, theta);
        let count = simulate_constant_scalar(z, theta, theta / 2.0, steps_t);
        let phi = theta * (count as f32 / steps_t as f32);
        let mut nq = qcfs_scalar(z, theta, steps_l);
        if delta != 0.0 {
            nq += delta * rs.next_gaussian();
        }
        let eps = (phi - nq) as f64;
        sum += eps;
        sumsq += eps * eps;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = ((sumsq - sum * sum / n) / (n - 1.0)).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Per-layer entry of the decomposition report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerErrorReport {
    pub layer: usize,
    /// Stochastic conversion-error statistics (fresh noise draws).
    pub conversion_error_mean: f32,
    pub conversion_error_std: f32,
    /// Share of pre-activations above the layer threshold.
    pub clip_fraction: f32,
    /// Mean |clipped-identity activation - quantized activation|.
    pub quant_grid_deviation: f32,
    /// Deterministic residual (`phi - a`) statistics.
    pub residual_mean: f32,
    pub residual_std: f32,
    pub hist_lo: f32,
    pub hist_hi: f32,
    /// Residual histogram over `[hist_lo, hist_hi]`; outliers clamp into
    /// the edge bins so counts always sum to the pooled element count.
    pub hist_counts: Vec<u64>,
}

/// Error decomposition over a dataset slice.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorReport {
    pub layers: Vec<LayerErrorReport>,
}

fn histogram(residuals: &[f32], std: f32) -> (f32, f32, Vec<u64>) {
    let mut counts = vec![0u64; HIST_BINS];
    if std == 0.0 {
        counts[HIST_BINS / 2] = residuals.len() as u64;
        return (0.0, 0.0, counts);
    }
    let lo = -3.0 * std;
    let hi = 3.0 * std;
    let width = (hi - lo) / HIST_BINS as f32;
    for &r in residuals {
        let idx = (((r - lo) / width).floor() as i64).clamp(0, HIST_BINS as i64 - 1);
        counts[idx as usize] += 1;
    }
    (lo, hi, counts)
}

/// Decompose the source-vs-converted gap into clipping, quantization,
/// and residual components per activation layer, pooling every element
/// of every sample in `samples`.
pub fn error_decompose(
    ann: &NetworkDef,
    snn: &mut SpikingNetwork,
    samples: &[(Tensor, usize)],
    steps: usize,
    rs: &mut RandomSource,
) -> Result<ErrorReport> {
    if samples.is_empty() {
        return Err(Error::Config("empty dataset slice".into()));
    }
    let params = ann.activation_params();
    let n_layers = params.len();
    let mut residual_pool: Vec<Vec<f32>> = vec![Vec::new(); n_layers];
    let mut stoch_pool: Vec<Vec<f32>> = vec![Vec::new(); n_layers];
    let mut clip_count = vec![0u64; n_layers];
    let mut total_count = vec![0u64; n_layers];
    let mut quant_dev_sum = vec![0f64; n_layers];

    let mut unused = RandomSource::new(0, 0);
    for (x, _) in samples {
        let trace = forward_full(ann, x, Mode::Eval, &mut unused)?;
        let out = snn.run(x, steps)?;
        for l in 0..n_layers {
            let p = &params[l];
            let z = &trace.pre_activations[l];
            let a = &trace.activations[l];
            let phi = &out.phi[l];
            for ((&zv, &av), &pv) in z.data().iter().zip(a.data()).zip(phi.data()) {
                if zv > p.threshold {
                    clip_count[l] += 1;
                }
                total_count[l] += 1;
                let surrogate = zv.clamp(0.0, p.threshold);
                quant_dev_sum[l] += (surrogate - av).abs() as f64;
                let r = pv - av;
                residual_pool[l].push(r);
                let stoch = if p.noise_std == 0.0 {
                    r
                } else {
                    r - p.noise_std * rs.next_gaussian()
                };
                stoch_pool[l].push(stoch);
            }
        }
    }

    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let res = crate::calibrate::pooled_stats(&residual_pool[l]);
        let conv = crate::calibrate::pooled_stats(&stoch_pool[l]);
        let (hist_lo, hist_hi, hist_counts) = histogram(&residual_pool[l], res.std);
        layers.push(LayerErrorReport {
            layer: l + 1,
            conversion_error_mean: conv.mean,
            conversion_error_std: conv.std,
            clip_fraction: clip_count[l] as f32 / total_count[l] as f32,
            quant_grid_deviation: (quant_dev_sum[l] / total_count[l] as f64) as f32,
            residual_mean: res.mean,
            residual_std: res.std,
            hist_lo,
            hist_hi,
            hist_counts,
        });
    }
    Ok(ErrorReport { layers })
}

/// Report serialization formats.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Fixed CSV header of the decomposition report.
pub fn report_csv_header() -> String {
    let mut header = String::from(
        "layer,conversion_error_mean,conversion_error_std,clip_fraction,\
         quant_grid_deviation,residual_mean,residual_std,hist_lo,hist_hi",
    );
    for i in 0..HIST_BINS {
        header.push_str(&format!(",bin_{i:03}"));
    }
    header
}

/// Render a report as CSV with the fixed column order.
pub fn report_to_csv(report: &ErrorReport) -> String {
    let mut out = report_csv_header();
    out.push('\n');
    for l in &report.layers {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}",
            l.layer,
            l.conversion_error_mean,
            l.conversion_error_std,
            l.clip_fraction,
            l.quant_grid_deviation,
            l.residual_mean,
            l.residual_std,
            l.hist_lo,
            l.hist_hi
        ));
        for c in &l.hist_counts {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
    }
    out
}

/// Write a report to disk.
pub fn emit_report(report: &ErrorReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report_to_csv(report),
        ReportFormat::Json => serde_json::to_string_pretty(report)
            .map_err(|e| Error::Format(format!("report serialization failed: {e}")))?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse a report previously written by [`emit_report`].
pub fn parse_report(path: &Path, format: ReportFormat) -> Result<ErrorReport> {
    let text = std::fs::read_to_string(path)?;
    match format {
        ReportFormat::Json => serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("report parse failed: {e}"))),
        ReportFormat::Csv => {
            let mut lines = text.lines();
            let header = lines
                .next()
                .ok_or_else(|| Error::Format("empty report file".into()))?;
            if header != report_csv_header() {
                return Err(Error::Format("unexpected report header".into()));
            }
            let mut layers = Vec::new();
            for (i, line) in lines.enumerate() {
                if line.is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split(',').collect();
                if fields.len() != 9 + HIST_BINS {
                    return Err(Error::Format(format!(
                        "row {}: expected {} fields, got {}",
                        i + 2,
                        9 + HIST_BINS,
                        fields.len()
                    )));
                }
                let pf = |s: &str| -> Result<f32> {
                    s.parse()
                        .map_err(|_| Error::Format(format!("bad float {s:?}")))
                };
                layers.push(LayerErrorReport {
                    layer: fields[0]
                        .parse()
                        .map_err(|_| Error::Format(format!("bad layer {:?}", fields[0])))?,
                    conversion_error_mean: pf(fields[1])?,
                    conversion_error_std: pf(fields[2])?,
                    clip_fraction: pf(fields[3])?,
                    quant_grid_deviation: pf(fields[4])?,
                    residual_mean: pf(fields[5])?,
                    residual_std: pf(fields[6])?,
                    hist_lo: pf(fields[7])?,
                    hist_hi: pf(fields[8])?,
                    hist_counts: fields[9..]
                        .iter()
                        .map(|s| {
                            s.parse()
                                .map_err(|_| Error::Format(format!("bad count {s:?}")))
                        })
                        .collect::<Result<_>>()?,
                });
            }
            Ok(ErrorReport { layers })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::QuantActParams;
    use crate::ann::{build_network, Layer, NetworkMeta};
    use crate::convert::convert;

    fn meta(input: Vec<usize>, classes: usize) -> NetworkMeta {
        NetworkMeta {
            dataset: "test".into(),
            input_shape: input,
            class_count: classes,
        }
    }

    fn single_layer_net(steps: u32) -> NetworkDef {
        NetworkDef {
            layers: vec![
                Layer::Dense {
                    weight: Tensor::new(vec![2, 2], vec![0.6, 0.2, 0.1, 0.5]).unwrap(),
                    bias: Tensor::zeros(&[2]),
                },
                Layer::Activation {
                    params: QuantActParams::new(1.0, steps).unwrap(),
                },
                Layer::Dense {
                    weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                    bias: Tensor::zeros(&[2]),
                },
            ],
            meta: meta(vec![2], 2),
        }
    }

    #[test]
    fn conversion_error_exact_zero_single_layer() {
        // Bounded inputs, T = L, zero noise: identically zero.
        let net = single_layer_net(4);
        let mut snn = convert(&net).unwrap();
        let mut rs = RandomSource::new(3, 0);
        for _ in 0..50 {
            let x = Tensor::uniform(&[2], 0.0, 1.0, &mut rs);
            let err = conversion_error(&net, &mut snn, &x, 4, &mut rs).unwrap();
            for t in &err.deterministic {
                assert!(t.data().iter().all(|&v| v == 0.0), "{:?}", t.data());
            }
            for t in &err.stochastic {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn conversion_error_zero_input() {
        let net = single_layer_net(4);
        let mut snn = convert(&net).unwrap();
        let mut rs = RandomSource::new(4, 0);
        let err =
            conversion_error(&net, &mut snn, &Tensor::zeros(&[2]), 4, &mut rs).unwrap();
        assert!(err.deterministic[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conversion_error_nonzero_for_deep_net_at_short_t() {
        let rs = RandomSource::new(5, 0);
        let net = build_network("mlp-16-16", meta(vec![4], 3), 8, 1.0, &rs).unwrap();
        let mut snn = convert(&net).unwrap();
        let mut xrs = RandomSource::new(6, 0);
        let mut pool = Vec::new();
        for _ in 0..20 {
            let x = Tensor::uniform(&[4], -1.0, 1.0, &mut xrs);
            let err = conversion_error(&net, &mut snn, &x, 2, &mut xrs).unwrap();
            pool.extend_from_slice(err.deterministic[1].data());
        }
        let stats = crate::calibrate::pooled_stats(&pool);
        assert!(stats.std > 0.0);
    }

    #[test]
    fn theorem1_exact_at_matched_steps_zero_noise() {
        let mut rs = RandomSource::new(7, 0);
        let (mean, stderr) = theorem1_mc(1.0, 4, 4, 0.0, 100_000, &mut rs).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(stderr, 0.0);
    }

    #[test]
    fn theorem1_holds_for_mismatched_steps_and_noise() {
        let mut rs = RandomSource::new(8, 0);
        let (mean, stderr) = theorem1_mc(1.0, 4, 8, 0.2, 100_000, &mut rs).unwrap();
        assert!(mean.abs() <= 4.0 * stderr, "mean {mean}, stderr {stderr}");
    }

    #[test]
    fn theorem1_rejects_small_sample_count() {
        let mut rs = RandomSource::new(9, 0);
        assert!(theorem1_mc(1.0, 4, 4, 0.0, 100, &mut rs).is_err());
    }

    #[test]
    fn grid_point_inputs_have_pointwise_zero_error() {
        // z exactly on the quantization grid, T = L, zero noise.
        for k in 0..=4u32 {
            let z = k as f32 / 4.0;
            let count = simulate_constant_scalar(z, 1.0, 0.5, 4);
            let phi = 1.0 * (count as f32 / 4.0);
            assert_eq!(phi, qcfs_scalar(z, 1.0, 4), "k={k}");
        }
    }

    #[test]
    fn decompose_bounded_inputs_have_zero_clip_fraction() {
        let net = single_layer_net(4);
        let mut snn = convert(&net).unwrap();
        let mut rs = RandomSource::new(11, 0);
        let samples: Vec<(Tensor, usize)> = (0..30)
            .map(|_| (Tensor::uniform(&[2], 0.0, 1.0, &mut rs), 0))
            .collect();
        let report = error_decompose(&net, &mut snn, &samples, 4, &mut rs).unwrap();
        // max pre-activation is 0.8 < threshold 1.0
        assert_eq!(report.layers[0].clip_fraction, 0.0);
        // single layer at T = L: residual is exactly zero
        assert_eq!(report.layers[0].residual_std, 0.0);
        let total: u64 = report.layers[0].hist_counts.iter().sum();
        assert_eq!(total, 60);
        assert_eq!(report.layers[0].hist_counts[HIST_BINS / 2], 60);
    }

    #[test]
    fn quant_deviation_shrinks_with_finer_grid() {
        let coarse = single_layer_net(4);
        let fine = single_layer_net(256);
        let mut rs = RandomSource::new(12, 0);
        let samples: Vec<(Tensor, usize)> = (0..50)
            .map(|_| (Tensor::uniform(&[2], 0.0, 1.2, &mut rs), 0))
            .collect();
        let mut snn_c = convert(&coarse).unwrap();
        let mut snn_f = convert(&fine).unwrap();
        let rc = error_decompose(&coarse, &mut snn_c, &samples, 4, &mut rs).unwrap();
        let rf = error_decompose(&fine, &mut snn_f, &samples, 256, &mut rs).unwrap();
        assert!(
            rf.layers[0].quant_grid_deviation < rc.layers[0].quant_grid_deviation,
            "fine {} vs coarse {}",
            rf.layers[0].quant_grid_deviation,
            rc.layers[0].quant_grid_deviation
        );
        assert!(rc.layers[0].quant_grid_deviation >= 0.0);
    }

    #[test]
    fn clip_fraction_monotone_in_threshold() {
        let mut rs = RandomSource::new(13, 0);
        let zs: Vec<f32> = (0..500).map(|_| rs.uniform_in(-1.0, 3.0)).collect();
        let mut prev = f32::INFINITY;
        for threshold in [0.5f32, 1.0, 1.5, 2.0, 2.5] {
            let frac =
                zs.iter().filter(|&&z| z > threshold).count() as f32 / zs.len() as f32;
            assert!(frac <= prev);
            prev = frac;
        }
    }

    #[test]
    fn report_roundtrip_csv_and_json() {
        let report = ErrorReport {
            layers: vec![LayerErrorReport {
                layer: 1,
                conversion_error_mean: -0.0123,
                conversion_error_std: 0.456,
                clip_fraction: 0.25,
                quant_grid_deviation: 0.0625,
                residual_mean: 1.5e-7,
                residual_std: 0.101,
                hist_lo: -0.303,
                hist_hi: 0.303,
                hist_counts: (0..HIST_BINS as u64).collect(),
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            let path = dir.path().join(match format {
                ReportFormat::Csv => "r.csv",
                ReportFormat::Json => "r.json",
            });
            emit_report(&report, &path, format).unwrap();
            let parsed = parse_report(&path, format).unwrap();
            assert_eq!(parsed, report);
        }
    }

    #[test]
    fn empty_report_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit_report(&ErrorReport::default(), &path, ReportFormat::Csv).unwrap();
        let parsed = parse_report(&path, ReportFormat::Csv).unwrap();
        assert!(parsed.layers.is_empty());
    }

    #[test]
    fn csv_header_is_frozen() {
        // Golden header: changing the column order is a format break.
        let header = report_csv_header();
        assert!(header.starts_with(
            "layer,conversion_error_mean,conversion_error_std,clip_fraction,\
             quant_grid_deviation,residual_mean,residual_std,hist_lo,hist_hi,bin_000"
        ));
        assert!(header.ends_with("bin_100"));
        assert_eq!(header.split(',').count(), 9 + HIST_BINS);
    }
}
