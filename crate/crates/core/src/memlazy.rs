//! Loading dense weights on demand, one conv-filter group at a time.
//!
//! A dense layer fed by `flatten` of a conv output sees each conv filter as
//! `g = out_h * out_w` consecutive inputs. When the filter was skipped those
//! inputs are zero, so its weight columns never need to leave the disk.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lazy::kept_count;
use crate::model::{DenseLayout, ManifestLayer, read_manifest};
use crate::model::io::WEIGHTS_FILE;
use crate::tensor::FilterMask;

/// Bytes `[offset, offset + len)` of `weights.bin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteExtent {
    pub offset: u64,
    pub len: u64,
}

impl ByteExtent {
    pub fn end(&self) -> u64 {
        self.offset + self.len
    }
}

/// Where each filter group of one dense layer lives on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightIndex {
    pub model_dir: PathBuf,
    pub layer: String,
    /// Conv layer whose filters select the groups.
    pub source_conv: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub group: usize,
    pub filters: usize,
    pub layout: DenseLayout,
    /// Per filter: one extent for column-grouped storage, `out_dim` extents
    /// (one per row) for row-major storage.
    pub extents: Vec<Vec<ByteExtent>>,
    pub bias: ByteExtent,
}

impl WeightIndex {
    pub fn weight_bytes(&self) -> u64 {
        4 * (self.in_dim * self.out_dim) as u64
    }

    /// Checks that the extents are disjoint, stay inside `blob_len` and
    /// together cover exactly `in_dim * out_dim` floats.
    pub fn check_extents(&self, blob_len: u64) -> Result<()> {
        let mut all: Vec<ByteExtent> = self.extents.iter().flatten().copied().collect();
        all.sort_by_key(|e| e.offset);
        let total: u64 = all.iter().map(|e| e.len).sum();
        if total != self.weight_bytes() {
            return Err(Error::Format(format!(
                "index of `{}` covers {total} bytes, expected {}",
                self.layer,
                self.weight_bytes()
            )));
        }
        if all.windows(2).any(|w| w[0].end() > w[1].offset) {
            return Err(Error::Format(format!("index of `{}` has overlapping extents", self.layer)));
        }
        if all.last().is_some_and(|e| e.end() > blob_len) || self.bias.end() > blob_len {
            return Err(Error::LengthMismatch {
                what: format!("{} weights (weights blob)", self.layer),
                declared: (all.last().map_or(0, |e| e.end()).max(self.bias.end()) / 4) as usize,
                found: (blob_len / 4) as usize,
            });
        }
        Ok(())
    }
}

/// Builds the group index of `dense_layer` from the manifest alone; no
/// weights are read.
///
/// The layer must directly follow `flatten`, and the flatten input must come
/// from a conv through any number of `relu` / `maxpool` layers.
pub fn build_weight_index(model_dir: impl AsRef<Path>, dense_layer: &str) -> Result<WeightIndex> {
    let model_dir = model_dir.as_ref();
    let (manifest, _) = read_manifest(model_dir)?;
    let layers = &manifest.layers;
    let pos = layers
        .iter()
        .position(|l| l.name == dense_layer)
        .ok_or_else(|| Error::UnknownLayer(dense_layer.to_string()))?;
    let layer = &layers[pos];
    if layer.kind != "dense" {
        return Err(Error::Contract(format!(
            "`{dense_layer}` is a {} layer, not dense",
            layer.kind
        )));
    }
    let conv = conv_feeding(layers, pos).ok_or_else(|| {
        Error::Contract(format!("`{dense_layer}` is not fed by flatten of a conv output"))
    })?;
    let missing = |f: &str| Error::Format(format!("layer `{}` is missing field `{f}`", layer.name));
    let in_dim = layer.in_dim.ok_or_else(|| missing("in_dim"))?;
    let out_dim = layer.out_dim.ok_or_else(|| missing("out_dim"))?;
    let filters = conv.out_filters.ok_or_else(|| missing("out_filters"))?;
    if filters == 0 || in_dim % filters != 0 {
        return Err(Error::ShapeIncompatible {
            layer: layer.name.clone(),
            detail: format!("in_dim {in_dim} is not a multiple of {filters} filters"),
        });
    }
    let group = in_dim / filters;
    let weights = layer.weights.ok_or_else(|| missing("weights"))?;
    let bias = layer.bias.ok_or_else(|| missing("bias"))?;
    if weights.count != in_dim * out_dim || bias.count != out_dim {
        return Err(Error::LengthMismatch {
            what: format!("{} weights", layer.name),
            declared: weights.count,
            found: in_dim * out_dim,
        });
    }
    let layout = layer.dense_layout()?;
    let base = weights.byte_offset();
    let strip = 4 * group as u64;
    let extents = match layout {
        DenseLayout::ColumnGrouped { group: stored } if stored == group => (0..filters)
            .map(|f| {
                vec![ByteExtent {
                    offset: base + f as u64 * strip * out_dim as u64,
                    len: strip * out_dim as u64,
                }]
            })
            .collect(),
        DenseLayout::ColumnGrouped { group: stored } => {
            return Err(Error::ShapeIncompatible {
                layer: layer.name.clone(),
                detail: format!("stored column group {stored} differs from filter group {group}"),
            });
        }
        DenseLayout::RowMajor => (0..filters)
            .map(|f| {
                (0..out_dim)
                    .map(|j| ByteExtent {
                        offset: base + 4 * (j * in_dim + f * group) as u64,
                        len: strip,
                    })
                    .collect()
            })
            .collect(),
    };
    let index = WeightIndex {
        model_dir: model_dir.to_path_buf(),
        layer: layer.name.clone(),
        source_conv: conv.name.clone(),
        in_dim,
        out_dim,
        group,
        filters,
        layout,
        extents,
        bias: ByteExtent {
            offset: bias.byte_offset(),
            len: 4 * out_dim as u64,
        },
    };
    let blob_len = std::fs::metadata(model_dir.join(WEIGHTS_FILE))
        .map_err(|_| Error::MissingFile(model_dir.join(WEIGHTS_FILE)))?
        .len();
    index.check_extents(blob_len)?;
    Ok(index)
}

fn conv_feeding(layers: &[ManifestLayer], dense_pos: usize) -> Option<&ManifestLayer> {
    if dense_pos == 0 || layers[dense_pos - 1].kind != "flatten" {
        return None;
    }
    layers[..dense_pos - 1]
        .iter()
        .rev()
        .find(|l| !matches!(l.kind.as_str(), "relu" | "maxpool"))
        .filter(|l| l.kind == "conv")
}

/// Read wrapper that counts the bytes delivered to the caller.
#[derive(Debug)]
pub struct CountingReader<R> {
    inner: R,
    bytes_read: u64,
}

impl<R> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, bytes_read: 0 }
    }

    pub fn bytes_read(&self) -> u64 {
        self.bytes_read
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.bytes_read += n as u64;
        Ok(n)
    }
}

impl<R: Seek> Seek for CountingReader<R> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        self.inner.seek(pos)
    }
}

fn read_floats(reader: &mut (impl Read + Seek), extent: ByteExtent, buf: &mut Vec<f32>) -> Result<()> {
    reader.seek(SeekFrom::Start(extent.offset))?;
    let mut bytes = vec![0u8; extent.len as usize];
    reader.read_exact(&mut bytes)?;
    buf.clear();
    buf.extend(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    Ok(())
}

/// Reads the bias vector of the indexed layer.
pub fn load_bias(index: &WeightIndex) -> Result<Vec<f32>> {
    let mut file = open_weights(index)?;
    let mut bias = Vec::new();
    read_floats(&mut file, index.bias, &mut bias)?;
    Ok(bias)
}

/// Reads the `out_dim x group` row-major weight strip of one filter.
pub fn load_group(reader: &mut (impl Read + Seek), index: &WeightIndex, filter: usize) -> Result<Vec<f32>> {
    let g = index.group;
    let mut strip = vec![0.0f32; index.out_dim * g];
    let mut buf = Vec::with_capacity(index.out_dim * g);
    match index.layout {
        DenseLayout::ColumnGrouped { .. } => {
            read_floats(reader, index.extents[filter][0], &mut buf)?;
            strip.copy_from_slice(&buf);
        }
        DenseLayout::RowMajor => {
            for (j, &e) in index.extents[filter].iter().enumerate() {
                read_floats(reader, e, &mut buf)?;
                strip[j * g..(j + 1) * g].copy_from_slice(&buf);
            }
        }
    }
    Ok(strip)
}

fn open_weights(index: &WeightIndex) -> Result<File> {
    let path = index.model_dir.join(WEIGHTS_FILE);
    File::open(&path).map_err(|_| Error::MissingFile(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LazyDenseOutput {
    pub values: Vec<f32>,
    /// Weight bytes read from disk (bias excluded).
    pub bytes_read: u64,
}

/// Dense layer that reads only the weight columns of the filters in `mask`.
///
/// Each output accumulates from zero over the masked filters in ascending
/// order, columns ascending within a filter, then adds the bias. The skipped
/// terms are exact zeros, so this matches the in-memory dense layer.
pub fn dense_lazy(x: &[f32], mask: &FilterMask, index: &WeightIndex, bias: &[f32]) -> Result<LazyDenseOutput> {
    let mut reader = CountingReader::new(open_weights(index)?);
    let values = dense_lazy_with(&mut reader, x, mask, index, bias)?;
    Ok(LazyDenseOutput {
        values,
        bytes_read: reader.bytes_read(),
    })
}

/// [`dense_lazy`] over a caller-supplied reader positioned on `weights.bin`.
pub fn dense_lazy_with(
    reader: &mut (impl Read + Seek),
    x: &[f32],
    mask: &FilterMask,
    index: &WeightIndex,
    bias: &[f32],
) -> Result<Vec<f32>> {
    if x.len() != index.in_dim || bias.len() != index.out_dim {
        return Err(Error::Dimension(format!(
            "dense `{}` expects {} inputs and {} biases, got {} and {}",
            index.layer,
            index.in_dim,
            index.out_dim,
            x.len(),
            bias.len()
        )));
    }
    if mask.layer_size() != index.filters {
        return Err(Error::Dimension(format!(
            "mask over {} filters for a layer fed by {}",
            mask.layer_size(),
            index.filters
        )));
    }
    let g = index.group;
    for f in (0..index.filters).filter(|&f| !mask.contains(f)) {
        if let Some(i) = (f * g..(f + 1) * g).find(|&i| x[i] != 0.0) {
            return Err(Error::Contract(format!(
                "input {i} of `{}` is nonzero but filter {f} is masked out",
                index.layer
            )));
        }
    }
    let mut acc = vec![0.0f32; index.out_dim];
    for &f in mask.active() {
        let strip = load_group(reader, index, f)?;
        let xs = &x[f * g..(f + 1) * g];
        for (a, row) in acc.iter_mut().zip(strip.chunks_exact(g)) {
            for (w, v) in row.iter().zip(xs) {
                *a += w * v;
            }
        }
    }
    Ok(acc.iter().zip(bias).map(|(a, b)| a + b).collect())
}

/// Weight and bias storage of a dense layer when only part of its input
/// groups are loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryFootprint {
    pub in_dim: usize,
    pub out_dim: usize,
    pub group: usize,
    pub active_groups: usize,
    pub weight_params: u64,
    pub bias_params: u64,
    pub weight_bytes: u64,
    pub bias_bytes: u64,
    pub total_bytes: u64,
}

impl MemoryFootprint {
    pub fn params(&self) -> u64 {
        self.weight_params + self.bias_params
    }

    /// Megabytes, counted as 10^6 bytes.
    pub fn megabytes(&self) -> f64 {
        self.total_bytes as f64 / 1e6
    }
}

/// Footprint at `active_fraction` of the input groups, rounded up to whole
/// groups: `4 * out_dim * group * ceil(fraction * in_dim / group)` weight
/// bytes plus the always-resident bias.
pub fn memory_footprint(in_dim: usize, out_dim: usize, active_fraction: f64, group: usize) -> Result<MemoryFootprint> {
    if group == 0 || in_dim % group != 0 {
        return Err(Error::Config(format!("group {group} does not divide in_dim {in_dim}")));
    }
    if !(0.0..=1.0).contains(&active_fraction) {
        return Err(Error::Config(format!("active fraction {active_fraction} outside [0, 1]")));
    }
    let active_groups = kept_count(active_fraction, in_dim / group);
    let weight_params = (out_dim * group * active_groups) as u64;
    let bias_params = out_dim as u64;
    Ok(MemoryFootprint {
        in_dim,
        out_dim,
        group,
        active_groups,
        weight_params,
        bias_params,
        weight_bytes: 4 * weight_params,
        bias_bytes: 4 * bias_params,
        total_bytes: 4 * (weight_params + bias_params),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub layer: String,
    pub source_conv: String,
    pub active_fraction: f64,
    pub active_filters: usize,
    pub filters: usize,
    pub full_bytes: u64,
    pub loaded_bytes: u64,
    pub ratio: f64,
    /// Weight bytes a masked read actually pulled from disk.
    pub measured_weight_bytes: u64,
}

/// Footprint of the indexed layer at `active_fraction`, cross-checked by a
/// masked read of the first `kept` filters.
pub fn memory_report(index: &WeightIndex, active_fraction: f64) -> Result<MemoryReport> {
    let full = memory_footprint(index.in_dim, index.out_dim, 1.0, index.group)?;
    let part = memory_footprint(index.in_dim, index.out_dim, active_fraction, index.group)?;
    let mask = FilterMask::new(index.filters, (0..part.active_groups).collect())?;
    let run = dense_lazy(&vec![0.0; index.in_dim], &mask, index, &vec![0.0; index.out_dim])?;
    Ok(MemoryReport {
        layer: index.layer.clone(),
        source_conv: index.source_conv.clone(),
        active_fraction,
        active_filters: part.active_groups,
        filters: index.filters,
        full_bytes: full.total_bytes,
        loaded_bytes: part.total_bytes,
        ratio: part.total_bytes as f64 / full.total_bytes as f64,
        measured_weight_bytes: run.bytes_read,
    })
}
