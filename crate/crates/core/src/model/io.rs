//! Model and dataset containers.
//!
//! A model is a directory holding `manifest.json` and `weights.bin`. The blob
//! is little-endian float32; manifest `offset`/`count` pairs are measured in
//! float elements. Conv weights are stored `O, I, kh, kw`; dense weights are
//! row-major unless the layer's `layout` says `column_grouped`.
//!
//! A dataset is a directory holding `data.bin` (sample-major, channel-major
//! float32) and `data.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::network::{DenseLayout, Layer, LayerKind, Network};
use crate::error::{Error, Result};
use crate::tensor::{ConvLayerSpec, DenseLayerSpec, Tensor3};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const DATA_FILE: &str = "data.bin";
pub const DATA_META_FILE: &str = "data.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: usize,
    pub count: usize,
}

impl BlobRef {
    pub fn byte_offset(&self) -> u64 {
        self.offset as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pool: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dim: Option<usize>,
    /// `row_major` (default) or `column_grouped`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BlobRef>,
}

impl ManifestLayer {
    fn field(&self, value: Option<usize>, field: &str) -> Result<usize> {
        value.ok_or_else(|| {
            Error::Format(format!("layer `{}` is missing field `{field}`", self.name))
        })
    }

    pub fn dense_layout(&self) -> Result<DenseLayout> {
        match self.layout.as_deref() {
            None | Some("row_major") => Ok(DenseLayout::RowMajor),
            Some("column_grouped") => Ok(DenseLayout::ColumnGrouped {
                group: self.field(self.group, "group")?,
            }),
            Some(other) => Err(Error::Format(format!(
                "layer `{}` has unknown layout `{other}`",
                self.name
            ))),
        }
    }
}

/// Serialized form of a network: manifest bytes and weight blob bytes.
pub struct EncodedModel {
    pub manifest: Manifest,
    pub manifest_bytes: Vec<u8>,
    pub weight_bytes: Vec<u8>,
}

impl EncodedModel {
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.manifest_bytes, &self.weight_bytes)
    }
}

fn fingerprint_bytes(manifest: &[u8], weights: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(manifest);
    h.update(weights);
    h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_model(net: &Network) -> Result<EncodedModel> {
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |values: &[f32]| {
        let r = BlobRef {
            offset: blob.len(),
            count: values.len(),
        };
        blob.extend_from_slice(values);
        r
    };
    let mut layers = Vec::with_capacity(net.layers().len());
    for layer in net.layers() {
        let mut m = ManifestLayer {
            name: layer.name.clone(),
            kind: layer.kind.tag().to_string(),
            ..Default::default()
        };
        match &layer.kind {
            LayerKind::Conv(c) => {
                m.out_filters = Some(c.out_filters);
                m.in_channels = Some(c.in_channels);
                m.kernel_h = Some(c.kernel_h);
                m.kernel_w = Some(c.kernel_w);
                m.stride = Some(c.stride);
                m.padding = Some(c.padding);
                m.weights = Some(push(&c.weights));
                m.bias = Some(push(&c.bias));
            }
            LayerKind::MaxPool { pool, stride } => {
                m.pool = Some(*pool);
                m.stride = Some(*stride);
            }
            LayerKind::Dense { spec, layout } => {
                m.in_dim = Some(spec.in_dim);
                m.out_dim = Some(spec.out_dim);
                match *layout {
                    DenseLayout::RowMajor => {
                        m.layout = Some("row_major".into());
                        m.weights = Some(push(&spec.weights));
                    }
                    DenseLayout::ColumnGrouped { group } => {
                        m.layout = Some("column_grouped".into());
                        m.group = Some(group);
                        m.weights = Some(push(&to_column_grouped(spec, group)));
                    }
                }
                m.bias = Some(push(&spec.bias));
            }
            LayerKind::Relu | LayerKind::Flatten | LayerKind::Softmax => {}
        }
        layers.push(m);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape(),
        layers,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;
    Ok(EncodedModel {
        manifest,
        manifest_bytes,
        weight_bytes: floats_to_le_bytes(&blob),
    })
}

/// Stable identifier of a network's manifest and weights.
pub fn fingerprint(net: &Network) -> Result<String> {
    Ok(encode_model(net)?.fingerprint())
}

pub fn save_model(net: &Network, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let enc = encode_model(net)?;
    fs::write(dir.join(MANIFEST_FILE), &enc.manifest_bytes)?;
    fs::write(dir.join(WEIGHTS_FILE), &enc.weight_bytes)?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<(Manifest, Vec<u8>)> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let bytes = read_file(&path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, bytes))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Network> {
    Ok(load_model_with_fingerprint(dir)?.0)
}

pub fn load_model_with_fingerprint(dir: impl AsRef<Path>) -> Result<(Network, String)> {
    let dir = dir.as_ref();
    let (manifest, manifest_bytes) = read_manifest(dir)?;
    let weight_bytes = read_file(&dir.join(WEIGHTS_FILE))?;
    let net = decode_model(&manifest, &weight_bytes)?;
    Ok((net, fingerprint_bytes(&manifest_bytes, &weight_bytes)))
}

pub fn decode_model(manifest: &Manifest, weight_bytes: &[u8]) -> Result<Network> {
    if weight_bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "weights blob is {} bytes, not a whole number of float32 values",
            weight_bytes.len()
        )));
    }
    let blob = le_bytes_to_floats(weight_bytes);
    let mut declared_end = 0usize;
    let mut take = |r: Option<BlobRef>, expected: usize, what: String| -> Result<Vec<f32>> {
        let r = r.ok_or_else(|| Error::Format(format!("missing blob reference for {what}")))?;
        if r.count != expected {
            return Err(Error::LengthMismatch {
                what,
                declared: r.count,
                found: expected,
            });
        }
        let end = r.offset + r.count;
        if end > blob.len() {
            return Err(Error::LengthMismatch {
                what: format!("{what} (weights blob)"),
                declared: r.count,
                found: blob.len().saturating_sub(r.offset),
            });
        }
        declared_end = declared_end.max(end);
        Ok(blob[r.offset..end].to_vec())
    };

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for m in &manifest.layers {
        let kind = match m.kind.as_str() {
            "conv" => {
                let (o, i) = (m.field(m.out_filters, "out_filters")?, m.field(m.in_channels, "in_channels")?);
                let (kh, kw) = (m.field(m.kernel_h, "kernel_h")?, m.field(m.kernel_w, "kernel_w")?);
                LayerKind::Conv(ConvLayerSpec {
                    out_filters: o,
                    in_channels: i,
                    kernel_h: kh,
                    kernel_w: kw,
                    stride: m.field(m.stride, "stride")?,
                    padding: m.padding.unwrap_or(0),
                    weights: take(m.weights, o * i * kh * kw, format!("{} weights", m.name))?,
                    bias: take(m.bias, o, format!("{} bias", m.name))?,
                })
            }
            "relu" => LayerKind::Relu,
            "maxpool" => LayerKind::MaxPool {
                pool: m.field(m.pool, "pool")?,
                stride: m.field(m.stride, "stride")?,
            },
            "flatten" => LayerKind::Flatten,
            "dense" => {
                let (i, o) = (m.field(m.in_dim, "in_dim")?, m.field(m.out_dim, "out_dim")?);
                let layout = m.dense_layout()?;
                let stored = take(m.weights, i * o, format!("{} weights", m.name))?;
                let weights = match layout {
                    DenseLayout::RowMajor => stored,
                    DenseLayout::ColumnGrouped { group } => {
                        if group == 0 || i % group != 0 {
                            return Err(Error::ShapeIncompatible {
                                layer: m.name.clone(),
                                detail: format!("column group {group} does not divide in_dim {i}"),
                            });
                        }
                        from_column_grouped(&stored, i, o, group)
                    }
                };
                LayerKind::Dense {
                    spec: DenseLayerSpec {
                        in_dim: i,
                        out_dim: o,
                        weights,
                        bias: take(m.bias, o, format!("{} bias", m.name))?,
                    },
                    layout,
                }
            }
            "softmax" => LayerKind::Softmax,
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        };
        layers.push(Layer::new(m.name.clone(), kind));
    }
    if declared_end != blob.len() {
        return Err(Error::LengthMismatch {
            what: "weights blob".into(),
            declared: declared_end,
            found: blob.len(),
        });
    }
    Network::new(manifest.input_shape, layers)
}

fn to_column_grouped(spec: &DenseLayerSpec, group: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(spec.weights.len());
    for g in 0..spec.in_dim / group {
        for j in 0..spec.out_dim {
            out.extend_from_slice(&spec.row(j)[g * group..(g + 1) * group]);
        }
    }
    out
}

fn from_column_grouped(stored: &[f32], in_dim: usize, out_dim: usize, group: usize) -> Vec<f32> {
    let mut w = vec![0.0f32; in_dim * out_dim];
    let block = out_dim * group;
    for g in 0..in_dim / group {
        for j in 0..out_dim {
            let src = &stored[g * block + j * group..g * block + (j + 1) * group];
            w[j * in_dim + g * group..j * in_dim + (g + 1) * group].copy_from_slice(src);
        }
    }
    w
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

pub fn floats_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_bytes_to_floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Inputs of one shape, optionally labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor3>,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Tensor3>, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::Dimension("dataset inputs differ in shape".into()));
            }
        }
        if let Some(l) = &labels {
            if l.len() != inputs.len() {
                return Err(Error::LengthMismatch {
                    what: "dataset labels".into(),
                    declared: l.len(),
                    found: inputs.len(),
                });
            }
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn shape(&self) -> Option<[usize; 3]> {
        self.inputs.first().map(|t| t.shape())
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn check_against(&self, net: &Network) -> Result<()> {
        if let Some(shape) = self.shape() {
            if shape != net.input_shape() {
                return Err(Error::Dimension(format!(
                    "dataset shape {shape:?} does not match network input {:?}",
                    net.input_shape()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            let classes = net.output_dim();
            if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::Dimension(format!(
                    "label {bad} out of range for {classes} outputs"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub shape: [usize; 3],
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let shape = data
        .shape()
        .ok_or_else(|| Error::Config("cannot save an empty dataset".into()))?;
    let meta = DatasetMeta {
        shape,
        count: data.len(),
        labels: data.labels.clone(),
    };
    let mut bytes = Vec::with_capacity(data.len() * shape.iter().product::<usize>() * 4);
    for t in &data.inputs {
        bytes.extend(floats_to_le_bytes(t.data()));
    }
    fs::write(dir.join(DATA_FILE), bytes)?;
    fs::write(dir.join(DATA_META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: DatasetMeta = serde_json::from_slice(&read_file(&dir.join(DATA_META_FILE))?)?;
    let bytes = read_file(&dir.join(DATA_FILE))?;
    let per = meta.shape.iter().product::<usize>();
    if bytes.len() != meta.count * per * 4 {
        return Err(Error::LengthMismatch {
            what: "data.bin".into(),
            declared: meta.count * per,
            found: bytes.len() / 4,
        });
    }
    let floats = le_bytes_to_floats(&bytes);
    let [c, h, w] = meta.shape;
    let inputs = floats
        .chunks_exact(per.max(1))
        .take(meta.count)
        .map(|chunk| Tensor3::from_vec(c, h, w, chunk.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(inputs, meta.labels)
}
