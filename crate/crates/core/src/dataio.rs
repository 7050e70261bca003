//! File formats: IDX datasets, the `FLIMMD01` model container and result CSVs.
//!
//! Model container layout: ASCII `FLIMMD01`, u32-LE manifest length, UTF-8
//! JSON manifest, payload. Binary weights are bit-packed as in
//! [`crate::bitpack`]; thresholds and directions are little-endian `i32`
//! arrays. Blob offsets are relative to the payload start.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bitpack::BinaryTensor;
use crate::engine::{LayerKind, LayerSpec, MaxPool2d, ModelGraph, Padding};
use crate::error::{Error, Result};
use crate::faultgen::{blob, join_container, split_container, write_atomic};
use crate::scalar::Real;
use crate::tensor::RealTensor;

pub const MODEL_MAGIC: &[u8; 8] = b"FLIMMD01";
pub const MODEL_VERSION: u64 = 1;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Images scaled to `[0, 1]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset<T: Real> {
    pub images: Vec<RealTensor<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledDataset<T> {
    pub fn new(images: Vec<RealTensor<T>>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples (all of them when `n` exceeds the size).
    pub fn subset(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn check_classes(&self, class_count: usize) -> Result<()> {
        match self.labels.iter().position(|&l| l >= class_count) {
            Some(index) => Err(Error::LabelOutOfRange {
                index,
                label: self.labels[index],
                classes: class_count,
            }),
            None => Ok(()),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Truncated {
            what,
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_magic(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::BadMagic {
            expected: format!("{expected:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

/// Parses an IDX3 image file into `[rows][cols][1]` tensors scaled by 1/255.
pub fn parse_idx_images<T: Real>(bytes: &[u8]) -> Result<Vec<RealTensor<T>>> {
    check_magic(be_u32(bytes, 0, "idx header")?, IDX_IMAGES)?;
    let n = be_u32(bytes, 4, "idx header")? as usize;
    let rows = be_u32(bytes, 8, "idx header")? as usize;
    let cols = be_u32(bytes, 12, "idx header")? as usize;
    let px = rows * cols;
    let needed = 16 + n * px;
    let data = bytes.get(16..needed).ok_or(Error::Truncated {
        what: "idx images",
        needed,
        available: bytes.len(),
    })?;
    let scale = T::from_f64(255.0).expect("255 is representable");
    Ok(data
        .chunks_exact(px.max(1))
        .take(n)
        .map(|c| {
            let v = c.iter().map(|&p| T::from_u8(p).expect("u8 fits") / scale).collect();
            RealTensor::new(vec![rows, cols, 1], v).expect("sized chunk")
        })
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(be_u32(bytes, 0, "idx header")?, IDX_LABELS)?;
    let n = be_u32(bytes, 4, "idx header")? as usize;
    let data = bytes.get(8..8 + n).ok_or(Error::Truncated {
        what: "idx labels",
        needed: 8 + n,
        available: bytes.len(),
    })?;
    Ok(data.iter().map(|&l| l as usize).collect())
}

pub fn read_idx<T: Real>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = parse_idx_images(&std::fs::read(ip).map_err(|e| Error::file(ip, e))?)?;
    let labels = parse_idx_labels(&std::fs::read(lp).map_err(|e| Error::file(lp, e))?)?;
    LabeledDataset::new(images, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct BlobRef {
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    kind: String,
    name: String,
    #[serde(default)]
    params: serde_json::Value,
    #[serde(default)]
    blobs: BTreeMap<String, BlobRef>,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    version: u64,
    name: String,
    input_shape: Vec<usize>,
    class_count: usize,
    input_threshold: f64,
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvParams {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenseParams {
    in_features: usize,
    out_features: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThresholdParams {
    channels: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolParams {
    window: [usize; 2],
    stride: [usize; 2],
}

#[derive(Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct BinarizeParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
}

fn params<P: for<'de> Deserialize<'de>>(rec: &LayerRecord) -> Result<P> {
    let v = if rec.params.is_null() {
        serde_json::Value::Object(Default::default())
    } else {
        rec.params.clone()
    };
    serde_json::from_value(v).map_err(|e| Error::model(&rec.name, "params", e.to_string()))
}

fn layer_blob<'a>(rec: &LayerRecord, key: &str, payload: &'a [u8]) -> Result<&'a [u8]> {
    let field = format!("blobs.{key}");
    let b = rec
        .blobs
        .get(key)
        .ok_or_else(|| Error::model(&rec.name, &field, "missing"))?;
    blob(payload, b.offset, b.len, "model blob").map_err(|_| {
        Error::model(
            &rec.name,
            &field,
            format!(
                "bytes {}..{} outside payload of {} bytes",
                b.offset,
                b.offset.saturating_add(b.len),
                payload.len()
            ),
        )
    })
}

fn i32_array(rec: &LayerRecord, key: &str, payload: &[u8], count: usize) -> Result<Vec<i32>> {
    let bytes = layer_blob(rec, key, payload)?;
    if bytes.len() != 4 * count {
        return Err(Error::model(
            &rec.name,
            &format!("blobs.{key}"),
            format!("{} bytes for {count} i32 values", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

fn weights(rec: &LayerRecord, payload: &[u8], shape: Vec<usize>) -> Result<BinaryTensor> {
    BinaryTensor::from_bytes(layer_blob(rec, "weights", payload)?, shape)
        .map_err(|e| Error::model(&rec.name, "blobs.weights", e.to_string()))
}

fn decode_layer(rec: &LayerRecord, payload: &[u8], input_threshold: f64) -> Result<LayerSpec> {
    match rec.kind.as_str() {
        "input_binarize" => {
            let p: BinarizeParams = params(rec)?;
            Ok(LayerSpec::input_binarize(&rec.name, p.threshold.unwrap_or(input_threshold)))
        }
        "binary_conv2d" => {
            let p: ConvParams = params(rec)?;
            let padding = match p.padding.as_str() {
                "valid" => Padding::Valid,
                "same" => Padding::Same,
                other => {
                    return Err(Error::model(&rec.name, "params.padding", format!("unknown padding `{other}`")))
                }
            };
            let shape = vec![p.out_channels, p.kernel[0], p.kernel[1], p.in_channels];
            LayerSpec::conv2d(&rec.name, p.in_channels, p.kernel, p.stride, padding, weights(rec, payload, shape)?)
        }
        "binary_dense" => {
            let p: DenseParams = params(rec)?;
            LayerSpec::dense(&rec.name, weights(rec, payload, vec![p.out_features, p.in_features])?)
        }
        "threshold" => {
            let p: ThresholdParams = params(rec)?;
            let t = i32_array(rec, "thresholds", payload, p.channels)?;
            let d = i32_array(rec, "directions", payload, p.channels)?;
            LayerSpec::threshold(&rec.name, t, d)
        }
        "max_pool2d" => {
            let p: PoolParams = params(rec)?;
            LayerSpec::max_pool2d(&rec.name, p.window, p.stride)
        }
        "flatten" => Ok(LayerSpec::flatten(&rec.name)),
        other => Err(Error::model(&rec.name, "kind", format!("unknown layer kind `{other}`"))),
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let (manifest, payload) = split_container(bytes, MODEL_MAGIC)?;
    let value: serde_json::Value = serde_json::from_slice(manifest)?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(MODEL_VERSION) => {}
        Some(v) => return Err(Error::UnsupportedVersion(v)),
        None => return Err(Error::Inconsistent("manifest lacks a numeric version".into())),
    }
    let m: ModelManifest = serde_json::from_value(value)?;
    let layers = m
        .layers
        .iter()
        .map(|rec| decode_layer(rec, payload, m.input_threshold))
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(m.name, m.input_shape, m.class_count, m.input_threshold, layers)
}

pub fn model_to_bytes(model: &ModelGraph) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut push = |data: &[u8]| {
        let r = BlobRef {
            offset: payload.len(),
            len: data.len(),
        };
        payload.extend_from_slice(data);
        r
    };
    let i32_bytes = |v: &[i32]| -> Vec<u8> { v.iter().flat_map(|x| x.to_le_bytes()).collect() };
    let mut layers = Vec::with_capacity(model.layers().len());
    for l in model.layers() {
        let mut blobs = BTreeMap::new();
        let (kind, params) = match &l.kind {
            LayerKind::InputBinarize { threshold } => (
                "input_binarize",
                serde_json::to_value(BinarizeParams {
                    threshold: Some(*threshold),
                })?,
            ),
            LayerKind::BinaryConv2D(c) => {
                blobs.insert("weights".to_owned(), push(&c.weights().to_bytes()));
                let padding = match c.padding() {
                    Padding::Valid => "valid",
                    Padding::Same => "same",
                };
                (
                    "binary_conv2d",
                    serde_json::to_value(ConvParams {
                        in_channels: c.in_channels(),
                        out_channels: c.out_channels(),
                        kernel: c.kernel(),
                        stride: c.stride(),
                        padding: padding.to_owned(),
                    })?,
                )
            }
            LayerKind::BinaryDense(d) => {
                blobs.insert("weights".to_owned(), push(&d.weights().to_bytes()));
                (
                    "binary_dense",
                    serde_json::to_value(DenseParams {
                        in_features: d.in_features(),
                        out_features: d.out_features(),
                    })?,
                )
            }
            LayerKind::Threshold(t) => {
                let dirs: Vec<i32> = t.directions().iter().map(|d| d.value()).collect();
                blobs.insert("thresholds".to_owned(), push(&i32_bytes(t.thresholds())));
                blobs.insert("directions".to_owned(), push(&i32_bytes(&dirs)));
                (
                    "threshold",
                    serde_json::to_value(ThresholdParams {
                        channels: t.channels(),
                    })?,
                )
            }
            LayerKind::MaxPool2D(MaxPool2d { window, stride }) => (
                "max_pool2d",
                serde_json::to_value(PoolParams {
                    window: *window,
                    stride: *stride,
                })?,
            ),
            LayerKind::Flatten => ("flatten", serde_json::json!({})),
        };
        layers.push(LayerRecord {
            kind: kind.to_owned(),
            name: l.name.clone(),
            params,
            blobs,
        });
    }
    let manifest = serde_json::to_vec(&ModelManifest {
        version: MODEL_VERSION,
        name: model.name().to_owned(),
        input_shape: model.input_shape().to_vec(),
        class_count: model.class_count(),
        input_threshold: model.input_threshold(),
        layers,
    })?;
    join_container(MODEL_MAGIC, &manifest, &payload)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    model_from_bytes(&std::fs::read(path).map_err(|e| Error::file(path, e))?)
}

pub fn write_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model_to_bytes(model)?)
}

pub const RESULTS_HEADER: [&str; 8] = [
    "seed",
    "layer",
    "fault_type",
    "param",
    "rate",
    "accuracy",
    "images",
    "runtime_ms",
];

/// One sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub seed: u64,
    pub layer: String,
    pub fault_type: String,
    /// Period for dynamic faults, line count for row/column faults, else 0.
    pub param: u64,
    pub rate: f64,
    pub accuracy: f64,
    pub images: usize,
    pub runtime_ms: u64,
}

/// Canonical row order: layer, fault type, param, rate, seed.
pub fn sort_results(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.layer
            .cmp(&b.layer)
            .then_with(|| a.fault_type.cmp(&b.fault_type))
            .then(a.param.cmp(&b.param))
            .then(a.rate.total_cmp(&b.rate))
            .then(a.seed.cmp(&b.seed))
    });
}

pub fn results_to_csv(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut rows = rows.to_vec();
    sort_results(&mut rows);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(RESULTS_HEADER)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_results_csv(rows: &[ResultRow], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &results_to_csv(rows)?)
}

pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(Error::Inconsistent(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
