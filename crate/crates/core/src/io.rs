//! Model serialization, dataset loading, and synthetic dataset
//! generation.
//!
//! Model files are a `SNNF` magic, a version byte, a JSON manifest, and a
//! blob of little-endian f32 values, so a reload reproduces every
//! parameter bit for bit. See `docs/formats.md` for the layout.

use crate::activation::QuantActParams;
use crate::ann::{Layer, NetworkDef, NetworkMeta};
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::snn::SpikingNetwork;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MODEL_MAGIC: [u8; 4] = *b"SNNF";
pub const MODEL_VERSION: u8 = 1;

/// A loaded dataset: samples, class count, per-sample shape, and where it
/// came from.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub samples: Vec<(Tensor, usize)>,
    pub class_count: usize,
    pub input_shape: Vec<usize>,
    pub provenance: String,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Either kind of saved model.
#[derive(Clone, Debug)]
pub enum Model {
    Ann(NetworkDef),
    Snn(SpikingNetwork),
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    meta: NetworkMeta,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct BlobRef {
    /// Byte offset into the blob section.
    offset: u64,
    /// Element count.
    len: u64,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LayerRecord {
    Dense {
        weight: BlobRef,
        bias: BlobRef,
    },
    Conv2d {
        weight: BlobRef,
        bias: BlobRef,
        stride: usize,
        pad: usize,
    },
    AvgPool {
        size: usize,
    },
    Flatten,
    Activation {
        threshold: f32,
        steps: u32,
        noise_std: f32,
    },
    Fire {
        theta: f32,
    },
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        Self { bytes: Vec::new() }
    }

    fn push(&mut self, t: &Tensor) -> BlobRef {
        let offset = self.bytes.len() as u64;
        for &v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        BlobRef {
            offset,
            len: t.len() as u64,
            shape: t.shape().to_vec(),
        }
    }
}

fn read_blob(blob: &[u8], r: &BlobRef) -> Result<Tensor> {
    let start = r.offset as usize;
    let bytes = (r.len as usize)
        .checked_mul(4)
        .ok_or_else(|| Error::Format("blob length overflow".into()))?;
    let end = start
        .checked_add(bytes)
        .ok_or_else(|| Error::Format("blob offset overflow".into()))?;
    if end > blob.len() {
        return Err(Error::Format(format!(
            "blob reference {start}..{end} exceeds blob length {}",
            blob.len()
        )));
    }
    if r.shape.iter().product::<usize>() != r.len as usize {
        return Err(Error::Format(format!(
            "blob shape {:?} does not match element count {}",
            r.shape, r.len
        )));
    }
    let data: Vec<f32> = blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(r.shape.clone(), data)
        .map_err(|e| Error::Format(format!("invalid blob tensor: {e}")))
}

fn layer_to_record(layer: &Layer, blob: &mut BlobWriter) -> LayerRecord {
    match layer {
        Layer::Dense { weight, bias } => LayerRecord::Dense {
            weight: blob.push(weight),
            bias: blob.push(bias),
        },
        Layer::Conv2d {
            weight,
            bias,
            stride,
            pad,
        } => LayerRecord::Conv2d {
            weight: blob.push(weight),
            bias: blob.push(bias),
            stride: *stride,
            pad: *pad,
        },
        Layer::AvgPool { size } => LayerRecord::AvgPool { size: *size },
        Layer::Flatten => LayerRecord::Flatten,
        Layer::Activation { params } => LayerRecord::Activation {
            threshold: params.threshold,
            steps: params.steps,
            noise_std: params.noise_std,
        },
    }
}

fn record_to_layer(record: &LayerRecord, blob: &[u8]) -> Result<Layer> {
    Ok(match record {
        LayerRecord::Dense { weight, bias } => Layer::Dense {
            weight: read_blob(blob, weight)?,
            bias: read_blob(blob, bias)?,
        },
        LayerRecord::Conv2d {
            weight,
            bias,
            stride,
            pad,
        } => Layer::Conv2d {
            weight: read_blob(blob, weight)?,
            bias: read_blob(blob, bias)?,
            stride: *stride,
            pad: *pad,
        },
        LayerRecord::AvgPool { size } => Layer::AvgPool { size: *size },
        LayerRecord::Flatten => Layer::Flatten,
        LayerRecord::Activation {
            threshold,
            steps,
            noise_std,
        } => Layer::Activation {
            params: QuantActParams {
                threshold: *threshold,
                steps: *steps,
                noise_std: *noise_std,
            },
        },
        LayerRecord::Fire { .. } => {
            return Err(Error::Format(
                "firing layer record outside a spiking model".into(),
            ))
        }
    })
}

fn build_manifest(model: &Model) -> (Manifest, Vec<u8>) {
    let mut blob = BlobWriter::new();
    match model {
        Model::Ann(net) => {
            let layers = net
                .layers
                .iter()
                .map(|l| layer_to_record(l, &mut blob))
                .collect();
            (
                Manifest {
                    kind: "ann".into(),
                    meta: net.meta.clone(),
                    layers,
                },
                blob.bytes,
            )
        }
        Model::Snn(net) => {
            let mut layers = Vec::new();
            for seg in &net.segments {
                for op in &seg.ops {
                    layers.push(layer_to_record(op, &mut blob));
                }
                if let Some(fire) = &seg.fire {
                    layers.push(LayerRecord::Fire { theta: fire.theta });
                }
            }
            (
                Manifest {
                    kind: "snn".into(),
                    meta: net.meta.clone(),
                    layers,
                },
                blob.bytes,
            )
        }
    }
}

fn validate_blob_refs(manifest: &Manifest, blob_len: usize) -> Result<()> {
    let mut spans: Vec<(u64, u64)> = Vec::new();
    let mut push = |r: &BlobRef| {
        spans.push((r.offset, r.offset + r.len * 4));
    };
    for rec in &manifest.layers {
        match rec {
            LayerRecord::Dense { weight, bias } | LayerRecord::Conv2d { weight, bias, .. } => {
                push(weight);
                push(bias);
            }
            _ => {}
        }
    }
    spans.sort_unstable();
    let mut prev_end = 0u64;
    for (start, end) in spans {
        if start < prev_end {
            return Err(Error::Format(format!(
                "overlapping blob references at offset {start}"
            )));
        }
        if end > blob_len as u64 {
            return Err(Error::Format(format!(
                "blob reference ends at {end}, blob is {blob_len} bytes"
            )));
        }
        prev_end = end;
    }
    Ok(())
}

/// Serialize a model. Spiking files record firing thresholds and omit
/// noise intensities.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let (manifest, blob) = build_manifest(model);
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization failed: {e}")))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&MODEL_MAGIC)?;
    file.write_all(&[MODEL_VERSION])?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    file.write_all(&(blob.len() as u64).to_le_bytes())?;
    file.write_all(&blob)?;
    Ok(())
}

/// Load either kind of model, validating magic, version, and blob
/// references. No partial model is ever returned.
pub fn load_model(path: &Path) -> Result<Model> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Format("file too short for magic".into()))?;
    if magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let mut version = [0u8; 1];
    file.read_exact(&mut version)
        .map_err(|_| Error::Format("file too short for version".into()))?;
    if version[0] != MODEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}, expected {MODEL_VERSION}",
            version[0]
        )));
    }
    let mut len8 = [0u8; 8];
    file.read_exact(&mut len8)
        .map_err(|_| Error::Format("file too short for manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len8) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    file.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Format("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("manifest parse failed: {e}")))?;
    file.read_exact(&mut len8)
        .map_err(|_| Error::Format("file too short for blob length".into()))?;
    let blob_len = u64::from_le_bytes(len8) as usize;
    let mut blob = vec![0u8; blob_len];
    file.read_exact(&mut blob)
        .map_err(|_| Error::Format("truncated blob".into()))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after blob".into()));
    }
    validate_blob_refs(&manifest, blob.len())?;

    match manifest.kind.as_str() {
        "ann" => {
            let layers = manifest
                .layers
                .iter()
                .map(|r| record_to_layer(r, &blob))
                .collect::<Result<Vec<_>>>()?;
            let net = NetworkDef {
                layers,
                meta: manifest.meta,
            };
            net.validate()
                .map_err(|e| Error::Format(format!("invalid network: {e}")))?;
            Ok(Model::Ann(net))
        }
        "snn" => {
            let mut parts: Vec<(Vec<Layer>, Option<f32>)> = Vec::new();
            let mut ops: Vec<Layer> = Vec::new();
            for rec in &manifest.layers {
                match rec {
                    LayerRecord::Fire { theta } => {
                        parts.push((std::mem::take(&mut ops), Some(*theta)));
                    }
                    LayerRecord::Activation { .. } => {
                        return Err(Error::Format(
                            "spiking model contains a source activation record".into(),
                        ))
                    }
                    other => ops.push(record_to_layer(other, &blob)?),
                }
            }
            parts.push((ops, None));
            let net = SpikingNetwork::assemble(parts, manifest.meta)
                .map_err(|e| Error::Format(format!("invalid spiking network: {e}")))?;
            Ok(Model::Snn(net))
        }
        other => Err(Error::Format(format!("unknown model kind {other:?}"))),
    }
}

fn read_be_u32(reader: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    reader
        .read_exact(&mut b)
        .map_err(|_| Error::Format(format!("file too short reading {what}")))?;
    Ok(u32::from_be_bytes(b))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label pair. Pixels are scaled to `[0, 1]` and each
/// sample has shape `1 x H x W`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle> {
    let mut img = std::fs::File::open(images_path)?;
    let magic = read_be_u32(&mut img, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(&mut img, "image count")? as usize;
    let rows = read_be_u32(&mut img, "rows")? as usize;
    let cols = read_be_u32(&mut img, "cols")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    img.read_exact(&mut pixels)
        .map_err(|_| Error::Format("truncated image data".into()))?;

    let mut lab = std::fs::File::open(labels_path)?;
    let magic = read_be_u32(&mut lab, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_be_u32(&mut lab, "label count")? as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut labels = vec![0u8; label_count];
    lab.read_exact(&mut labels)
        .map_err(|_| Error::Format("truncated label data".into()))?;

    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let data: Vec<f32> = pixels[i * rows * cols..(i + 1) * rows * cols]
            .iter()
            .map(|&p| p as f32 / 255.0)
            .collect();
        samples.push((
            Tensor::new(vec![1, rows, cols], data)?,
            labels[i] as usize,
        ));
    }
    let class_count = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(DatasetHandle {
        samples,
        class_count,
        input_shape: vec![1, rows, cols],
        provenance: format!("idx:{}", images_path.display()),
    })
}

/// Load a CSV dataset: one sample per line, `label,feature,...`. A
/// non-numeric first line is treated as a header and skipped.
pub fn load_csv(path: &Path) -> Result<DatasetHandle> {
    let text = std::fs::read_to_string(path)?;
    let mut samples: Vec<(Tensor, usize)> = Vec::new();
    let mut width: Option<usize> = None;
    let mut max_label = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        let label: usize = fields[0].parse().map_err(|_| {
            Error::Format(format!("line {}: bad label {:?}", lineno + 1, fields[0]))
        })?;
        let feats: Vec<f32> = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f32>().map_err(|_| {
                    Error::Format(format!("line {}: bad value {f:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(feats.len()),
            Some(w) if w != feats.len() => {
                return Err(Error::Format(format!(
                    "line {}: expected {w} features, got {}",
                    lineno + 1,
                    feats.len()
                )))
            }
            _ => {}
        }
        max_label = max_label.max(label);
        samples.push((Tensor::from_slice(&feats), label));
    }
    if samples.is_empty() {
        return Err(Error::Format("csv contains no samples".into()));
    }
    let width = width.unwrap();
    Ok(DatasetHandle {
        samples,
        class_count: max_label + 1,
        input_shape: vec![width],
        provenance: format!("csv:{}", path.display()),
    })
}

/// 5x7 glyph bitmaps for the synthetic digit set.
const DIGIT_GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

/// Names accepted by [`synth`].
pub const SYNTH_NAMES: [&str; 4] = ["blobs", "spirals", "xor_grid", "digits"];

/// Deterministic synthetic datasets keyed by `(name, n, seed)`.
///
/// `blobs`: two isotropic 2-D Gaussians, means 6 sigma apart.
/// `spirals`: two interleaved spiral arms, not linearly separable.
/// `xor_grid`: four quadrants, two classes.
/// `digits`: jittered 8x8 renderings of the ten digit glyphs.
pub fn synth(name: &str, n: usize, seed: u64) -> Result<DatasetHandle> {
    let mut rs = RandomSource::new(seed, 0x5e7);
    let provenance = format!("synthetic:{name}:{seed}");
    match name {
        "blobs" => {
            if n < 2 {
                return Err(Error::Config("blobs needs at least 2 samples".into()));
            }
            let sigma = 1.0f32;
            let sep = 6.0 * sigma;
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                let cx = if class == 0 { -sep / 2.0 } else { sep / 2.0 };
                let x = cx + sigma * rs.next_gaussian();
                let y = sigma * rs.next_gaussian();
                samples.push((Tensor::from_slice(&[x, y]), class));
            }
            Ok(DatasetHandle {
                samples,
                class_count: 2,
                input_shape: vec![2],
                provenance,
            })
        }
        "spirals" => {
            if n < 2 {
                return Err(Error::Config("spirals needs at least 2 samples".into()));
            }
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 2;
                let t = rs.uniform_in(0.15, 1.0);
                let angle = t * 3.5 * std::f32::consts::PI + class as f32 * std::f32::consts::PI;
                let x = t * angle.cos() + 0.03 * rs.next_gaussian();
                let y = t * angle.sin() + 0.03 * rs.next_gaussian();
                samples.push((Tensor::from_slice(&[x, y]), class));
            }
            Ok(DatasetHandle {
                samples,
                class_count: 2,
                input_shape: vec![2],
                provenance,
            })
        }
        "xor_grid" => {
            if n < 2 {
                return Err(Error::Config("xor_grid needs at least 2 samples".into()));
            }
            let mut samples = Vec::with_capacity(n);
            for _ in 0..n {
                let x = rs.uniform_in(-1.0, 1.0);
                let y = rs.uniform_in(-1.0, 1.0);
                let class = usize::from((x > 0.0) ^ (y > 0.0));
                samples.push((Tensor::from_slice(&[x, y]), class));
            }
            Ok(DatasetHandle {
                samples,
                class_count: 2,
                input_shape: vec![2],
                provenance,
            })
        }
        "digits" => {
            if n < 10 {
                return Err(Error::Config("digits needs at least 10 samples".into()));
            }
            let mut samples = Vec::with_capacity(n);
            for i in 0..n {
                let class = i % 10;
                let glyph = &DIGIT_GLYPHS[class];
                let dx = rs.next_index(4);
                let dy = rs.next_index(2);
                let intensity = rs.uniform_in(0.7, 1.0);
                let mut img = vec![0f32; 64];
                for (gy, row) in glyph.iter().enumerate() {
                    for gx in 0..5 {
                        if row & (1 << (4 - gx)) != 0 {
                            img[(gy + dy) * 8 + gx + dx] = intensity;
                        }
                    }
                }
                for px in &mut img {
                    *px = (*px + rs.uniform_in(0.0, 0.15)).clamp(0.0, 1.0);
                }
                samples.push((Tensor::new(vec![1, 8, 8], img)?, class));
            }
            Ok(DatasetHandle {
                samples,
                class_count: 10,
                input_shape: vec![1, 8, 8],
                provenance,
            })
        }
        other => Err(Error::Config(format!(
            "unknown synthetic dataset {other:?} (expected one of {SYNTH_NAMES:?})"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::build_network;
    use crate::convert::convert;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn toy_ann() -> NetworkDef {
        let rs = RandomSource::new(77, 0);
        let meta = NetworkMeta {
            dataset: "toy".into(),
            input_shape: vec![3],
            class_count: 2,
        };
        let mut net = build_network("mlp-5", meta, 4, 1.0, &rs).unwrap();
        net.set_noise(&[0.1]).unwrap();
        net
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmp();
        let p1 = dir.path().join("a.snnf");
        let p2 = dir.path().join("b.snnf");
        let net = toy_ann();
        save_model(&Model::Ann(net), &p1).unwrap();
        let loaded = load_model(&p1).unwrap();
        save_model(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn reload_preserves_parameters_bit_for_bit() {
        let dir = tmp();
        let path = dir.path().join("m.snnf");
        let net = toy_ann();
        save_model(&Model::Ann(net.clone()), &path).unwrap();
        match load_model(&path).unwrap() {
            Model::Ann(reloaded) => {
                assert_eq!(net.meta, reloaded.meta);
                for (a, b) in net.layers.iter().zip(&reloaded.layers) {
                    assert_eq!(a, b);
                }
            }
            _ => panic!("expected ann"),
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tmp();
        let path = dir.path().join("m.snnf");
        save_model(&Model::Ann(toy_ann()), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        let short = dir.path().join("short.snnf");
        std::fs::write(&short, cut).unwrap();
        assert!(matches!(load_model(&short), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tmp();
        let path = dir.path().join("m.snnf");
        save_model(&Model::Ann(toy_ann()), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        let p = dir.path().join("magic.snnf");
        std::fs::write(&p, &wrong).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format(_))));

        bytes[4] = MODEL_VERSION + 1;
        let p = dir.path().join("ver.snnf");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Format(_))));
    }

    #[test]
    fn snn_file_records_theta_and_omits_noise() {
        let dir = tmp();
        let ann = toy_ann();
        let snn = convert(&ann).unwrap();
        let path = dir.path().join("s.snnf");
        save_model(&Model::Snn(snn), &path).unwrap();
        // Inspect raw manifest text: theta present, noise_std absent.
        let bytes = std::fs::read(&path).unwrap();
        let manifest_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[13..13 + manifest_len]).unwrap();
        assert!(manifest.contains("\"theta\""));
        assert!(!manifest.contains("noise_std"));
        assert!(manifest.contains("\"kind\":\"snn\""));

        match load_model(&path).unwrap() {
            Model::Snn(net) => assert_eq!(net.thetas().len(), 1),
            _ => panic!("expected snn"),
        }
    }

    #[test]
    fn ann_file_records_noise() {
        let dir = tmp();
        let path = dir.path().join("a.snnf");
        save_model(&Model::Ann(toy_ann()), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let manifest_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let manifest = std::str::from_utf8(&bytes[13..13 + manifest_len]).unwrap();
        assert!(manifest.contains("\"noise_std\":0.1"));
    }

    fn write_idx_fixture(dir: &Path, images: &[[u8; 4]], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        // 2x2 images
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        let ip = dir.join("imgs.idx");
        let lp = dir.join("labs.idx");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_roundtrip() {
        let dir = tmp();
        let images = [[0u8, 128, 255, 64], [10, 20, 30, 40], [0, 0, 0, 0], [255, 255, 255, 255]];
        let labels = [0u8, 1, 2, 1];
        let (ip, lp) = write_idx_fixture(dir.path(), &images, &labels);
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.input_shape, vec![1, 2, 2]);
        assert_eq!(ds.class_count, 3);
        assert_eq!(ds.samples[0].0.data()[1], 128.0 / 255.0);
        for (x, _) in &ds.samples {
            assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn idx_wrong_magic_errors() {
        let dir = tmp();
        let (ip, lp) = write_idx_fixture(dir.path(), &[[0, 0, 0, 0]], &[0]);
        // Swap: pass the labels file as images.
        assert!(matches!(load_idx(&lp, &ip), Err(Error::Format(_))));
    }

    #[test]
    fn idx_count_mismatch_errors() {
        let dir = tmp();
        let (ip, _) = write_idx_fixture(dir.path(), &[[0, 0, 0, 0], [1, 1, 1, 1]], &[0, 1]);
        let (_, lp_short) = {
            let d2 = dir.path().join("sub");
            std::fs::create_dir(&d2).unwrap();
            write_idx_fixture(&d2, &[[0, 0, 0, 0]], &[0])
        };
        assert!(matches!(
            load_idx(&ip, &lp_short),
            Err(Error::CountMismatch { images: 2, labels: 1 })
        ));
    }

    #[test]
    fn idx_empty_file_errors() {
        let dir = tmp();
        let p = dir.path().join("empty.idx");
        std::fs::write(&p, b"").unwrap();
        assert!(matches!(load_idx(&p, &p), Err(Error::Format(_))));
    }

    #[test]
    fn synth_is_deterministic() {
        for name in SYNTH_NAMES {
            let a = synth(name, 40, 7).unwrap();
            let b = synth(name, 40, 7).unwrap();
            assert_eq!(a.len(), b.len());
            for ((xa, la), (xb, lb)) in a.samples.iter().zip(&b.samples) {
                assert_eq!(xa, xb);
                assert_eq!(la, lb);
            }
            let c = synth(name, 40, 8).unwrap();
            assert!(a.samples.iter().zip(&c.samples).any(|((xa, _), (xc, _))| xa != xc));
        }
    }

    #[test]
    fn blobs_margin_classifier_reaches_99_percent() {
        // Closed-form margin oracle: classify by the sign of x along the
        // separating axis. With means 6 sigma apart the misclassification
        // probability is Phi(-3) ~ 0.13%.
        let ds = synth("blobs", 200, 3).unwrap();
        let correct = ds
            .samples
            .iter()
            .filter(|(x, label)| usize::from(x.data()[0] > 0.0) == *label)
            .count();
        assert!(correct as f32 / ds.len() as f32 >= 0.99);
    }

    #[test]
    fn spirals_defeat_linear_classifier() {
        // Logistic-regression oracle fit in f64 on the raw points.
        let ds = synth("spirals", 400, 5).unwrap();
        let mut w = [0f64; 3];
        for _ in 0..500 {
            let mut grad = [0f64; 3];
            for (x, label) in &ds.samples {
                let f = [x.data()[0] as f64, x.data()[1] as f64, 1.0];
                let z: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - *label as f64;
                for k in 0..3 {
                    grad[k] += err * f[k];
                }
            }
            for k in 0..3 {
                w[k] -= 0.5 / ds.len() as f64 * grad[k];
            }
        }
        let correct = ds
            .samples
            .iter()
            .filter(|(x, label)| {
                let f = [x.data()[0] as f64, x.data()[1] as f64, 1.0];
                let z: f64 = w.iter().zip(&f).map(|(a, b)| a * b).sum();
                usize::from(z > 0.0) == *label
            })
            .count();
        let acc = correct as f32 / ds.len() as f32;
        assert!(acc <= 0.70, "linear classifier reached {acc}");
    }

    #[test]
    fn digits_are_valid_images() {
        let ds = synth("digits", 100, 11).unwrap();
        assert_eq!(ds.class_count, 10);
        assert_eq!(ds.input_shape, vec![1, 8, 8]);
        for (x, label) in &ds.samples {
            assert!(*label < 10);
            assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let dir = tmp();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "label,x,y\n0,0.5,-1.25\n1,2.0,3.5\n").unwrap();
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_count, 2);
        assert_eq!(ds.samples[0].0.data(), &[0.5, -1.25]);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "0,1.0\n1,2.0,3.0\n").unwrap();
        assert!(matches!(load_csv(&bad), Err(Error::Format(_))));
    }
}
