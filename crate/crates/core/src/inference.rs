//! Forward propagation and activation-strength traces.
//!
//! A single executor runs every forward pass. Before each conv layer it asks a
//! [`FilterSelector`] which filters to evaluate; the eager pass always answers
//! [`Selection::Full`]. Channels zeroed by a conv mask stay exactly zero through
//! ReLU and max-pooling, so the executor hands the mask to the next conv as its
//! set of live input channels.
//!
//! Strengths are measured on the raw conv output, before the ReLU.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lazy::{activation_strength, select_top_fraction};
use crate::model::io::{floats_to_le_bytes, le_bytes_to_floats, read_file};
use crate::model::{Dataset, LayerKind, Network};
use crate::ops::{conv2d_into, dense, maxpool2d, relu_in_place, softmax};
use crate::tensor::{ConvLayerSpec, FilterMask, Tensor3};

pub const TRACES_FILE: &str = "traces.bin";
pub const TRACES_META_FILE: &str = "traces.json";

/// Which filters of a conv layer to evaluate.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Full,
    /// Evaluate only `mask`; `predicted` carries the scores the mask came from.
    Masked {
        mask: FilterMask,
        predicted: Option<Vec<f32>>,
    },
    /// Evaluate everything, then keep the given fraction of filters with the
    /// largest actual strengths and zero the rest.
    OracleTop(f64),
}

pub trait FilterSelector {
    /// `previous` holds the observed strengths of the preceding conv layer
    /// (zeros for skipped filters), or `None` for the first conv layer.
    fn select(
        &mut self,
        conv_ordinal: usize,
        name: &str,
        layer: &ConvLayerSpec,
        previous: Option<&[f32]>,
    ) -> Result<Selection>;
}

/// Evaluates every filter.
pub struct EagerSelector;

impl FilterSelector for EagerSelector {
    fn select(&mut self, _: usize, _: &str, _: &ConvLayerSpec, _: Option<&[f32]>) -> Result<Selection> {
        Ok(Selection::Full)
    }
}

/// What happened at one conv layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvRecord {
    pub name: String,
    pub mask: FilterMask,
    /// Observed strengths; exactly zero for filters that were not kept.
    pub strengths: Vec<f32>,
    pub predicted: Option<Vec<f32>>,
    /// Input channels that took part in the accumulation.
    pub active_inputs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Vec<f32>,
    pub convs: Vec<ConvRecord>,
    /// Live channels of the volume entering the first flatten, if the last
    /// conv was masked.
    pub flatten_live: Option<FilterMask>,
}

impl ForwardTrace {
    pub fn conv(&self, name: &str) -> Option<&ConvRecord> {
        self.convs.iter().find(|c| c.name == name)
    }
}

enum Activation {
    Volume(Tensor3),
    Vector(Vec<f32>),
}

/// Runs `input` through `net`, consulting `selector` at every conv layer.
pub fn forward_with(
    net: &Network,
    input: &Tensor3,
    selector: &mut dyn FilterSelector,
) -> Result<ForwardTrace> {
    let run = execute(net, input, selector, net.layers().len(), None)?;
    Ok(run.into_trace())
}

/// [`forward_with`] plus the wall-clock time spent in each layer.
pub fn forward_profiled(
    net: &Network,
    input: &Tensor3,
    selector: &mut dyn FilterSelector,
) -> Result<(ForwardTrace, Vec<Duration>)> {
    let mut timings = Vec::with_capacity(net.layers().len());
    let run = execute(net, input, selector, net.layers().len(), Some(&mut timings))?;
    Ok((run.into_trace(), timings))
}

/// Eager activation entering layer `layer_index`.
pub fn activation_before(net: &Network, input: &Tensor3, layer_index: usize) -> Result<Tensor3> {
    match execute(net, input, &mut EagerSelector, layer_index, None)?.act {
        Activation::Volume(t) => Ok(t),
        Activation::Vector(_) => Err(Error::Config(format!(
            "layer {layer_index} does not consume a volume"
        ))),
    }
}

struct Run {
    act: Activation,
    convs: Vec<ConvRecord>,
    flatten_live: Option<FilterMask>,
}

impl Run {
    fn into_trace(self) -> ForwardTrace {
        let logits = match self.act {
            Activation::Vector(v) => v,
            Activation::Volume(t) => t.into_vec(),
        };
        ForwardTrace {
            logits,
            convs: self.convs,
            flatten_live: self.flatten_live,
        }
    }
}

fn execute(
    net: &Network,
    input: &Tensor3,
    selector: &mut dyn FilterSelector,
    stop: usize,
    mut timings: Option<&mut Vec<Duration>>,
) -> Result<Run> {
    net.check_input(input)?;
    let mut act = Activation::Volume(input.clone());
    let mut live: Option<FilterMask> = None;
    let mut flatten_live = None;
    let mut convs: Vec<ConvRecord> = Vec::new();
    let mut scratch = Tensor3::zeros(0, 0, 0);

    for layer in &net.layers()[..stop.min(net.layers().len())] {
        let start = timings.as_ref().map(|_| Instant::now());
        act = match (&layer.kind, act) {
            (LayerKind::Conv(spec), Activation::Volume(x)) => {
                let previous = convs.last().map(|c| c.strengths.as_slice());
                let selection = selector.select(convs.len(), &layer.name, spec, previous)?;
                let live_inputs = live.as_ref().filter(|m| !m.is_full());
                let active_inputs = live_inputs.map_or(spec.in_channels, |m| m.len());
                let (mask, predicted) = match selection {
                    Selection::Full => {
                        conv2d_into(&x, spec, None, live_inputs, &mut scratch)?;
                        (FilterMask::full(spec.out_filters), None)
                    }
                    Selection::Masked { mask, predicted } => {
                        conv2d_into(&x, spec, Some(&mask), live_inputs, &mut scratch)?;
                        (mask, predicted)
                    }
                    Selection::OracleTop(fraction) => {
                        conv2d_into(&x, spec, None, live_inputs, &mut scratch)?;
                        let actual = activation_strength(&scratch);
                        let mask = select_top_fraction(&actual, fraction, spec.out_filters)?;
                        let keep = mask.to_flags();
                        for (c, kept) in keep.iter().enumerate() {
                            if !kept {
                                scratch.channel_mut(c).fill(0.0);
                            }
                        }
                        (mask, None)
                    }
                };
                let strengths = activation_strength(&scratch);
                live = Some(mask.clone());
                convs.push(ConvRecord {
                    name: layer.name.clone(),
                    mask,
                    strengths,
                    predicted,
                    active_inputs,
                });
                let out = std::mem::replace(&mut scratch, x);
                Activation::Volume(out)
            }
            (LayerKind::Relu, Activation::Volume(mut x)) => {
                relu_in_place(&mut x);
                Activation::Volume(x)
            }
            (LayerKind::Relu, Activation::Vector(mut v)) => {
                for e in &mut v {
                    *e = e.max(0.0);
                }
                Activation::Vector(v)
            }
            (LayerKind::MaxPool { pool, stride }, Activation::Volume(x)) => {
                Activation::Volume(maxpool2d(&x, *pool, *stride)?)
            }
            (LayerKind::Flatten, Activation::Volume(x)) => {
                if flatten_live.is_none() {
                    flatten_live = live.take().filter(|m| !m.is_full());
                }
                Activation::Vector(x.into_vec())
            }
            (LayerKind::Flatten, v @ Activation::Vector(_)) => v,
            (LayerKind::Dense { spec, .. }, Activation::Vector(v)) => Activation::Vector(dense(&v, spec)?),
            (LayerKind::Softmax, Activation::Vector(v)) => Activation::Vector(softmax(&v)),
            (kind, _) => {
                return Err(Error::ShapeIncompatible {
                    layer: layer.name.clone(),
                    detail: format!("{} layer received an incompatible activation", kind.tag()),
                });
            }
        };
        if let (Some(t), Some(start)) = (timings.as_deref_mut(), start) {
            t.push(start.elapsed());
        }
    }
    Ok(Run {
        act,
        convs,
        flatten_live,
    })
}

/// Output of an unpruned forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EagerOutput {
    pub logits: Vec<f32>,
    /// `(conv layer name, strengths)` in network order.
    pub strengths: Vec<(String, Vec<f32>)>,
}

/// Evaluates every filter of every layer.
pub fn forward_eager(net: &Network, input: &Tensor3) -> Result<EagerOutput> {
    let trace = forward_with(net, input, &mut EagerSelector)?;
    Ok(EagerOutput {
        logits: trace.logits,
        strengths: trace.convs.into_iter().map(|c| (c.name, c.strengths)).collect(),
    })
}

/// Per-sample strength vectors of every conv layer from unpruned passes.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub fingerprint: String,
    /// `(conv layer name, filter count)` in network order.
    pub layers: Vec<(String, usize)>,
    /// One row per sample: all layers' strengths concatenated in layer order.
    pub records: Vec<Vec<f32>>,
}

impl TraceSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn layer_position(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    fn span(&self, layer: usize) -> std::ops::Range<usize> {
        let start: usize = self.layers[..layer].iter().map(|(_, n)| n).sum();
        start..start + self.layers[layer].1
    }

    pub fn strengths(&self, sample: usize, layer: usize) -> &[f32] {
        &self.records[sample][self.span(layer)]
    }

    /// Strength vectors of one layer, one per sample.
    pub fn layer_rows(&self, name: &str) -> Result<Vec<&[f32]>> {
        let span = self.span(self.layer_position(name)?);
        Ok(self.records.iter().map(|r| &r[span.clone()]).collect())
    }

    /// Consecutive `(source, target)` conv layer pairs.
    pub fn pairs(&self) -> Vec<(String, String)> {
        self.layers
            .windows(2)
            .map(|w| (w[0].0.clone(), w[1].0.clone()))
            .collect()
    }
}

/// Unpruned strengths for every sample, in dataset order.
pub fn collect_traces(net: &Network, data: &Dataset) -> Result<TraceSet> {
    if data.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    data.check_against(net)?;
    let fingerprint = crate::model::fingerprint(net)?;
    let layers = net
        .conv_indices()
        .into_iter()
        .map(|i| match &net.layers()[i].kind {
            LayerKind::Conv(c) => (net.layers()[i].name.clone(), c.out_filters),
            _ => unreachable!(),
        })
        .collect();
    let records = data
        .inputs
        .par_iter()
        .map(|x| {
            forward_eager(net, x).map(|out| out.strengths.into_iter().flat_map(|(_, s)| s).collect())
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    Ok(TraceSet {
        fingerprint,
        layers,
        records,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceLayerMeta {
    name: String,
    size: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceMeta {
    fingerprint: String,
    count: usize,
    layers: Vec<TraceLayerMeta>,
}

pub fn save_traces(traces: &TraceSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let meta = TraceMeta {
        fingerprint: traces.fingerprint.clone(),
        count: traces.len(),
        layers: traces
            .layers
            .iter()
            .map(|(name, size)| TraceLayerMeta {
                name: name.clone(),
                size: *size,
            })
            .collect(),
    };
    let flat: Vec<f32> = traces.records.iter().flatten().copied().collect();
    fs::write(dir.join(TRACES_FILE), floats_to_le_bytes(&flat))?;
    fs::write(dir.join(TRACES_META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_traces(dir: impl AsRef<Path>) -> Result<TraceSet> {
    let dir = dir.as_ref();
    let meta: TraceMeta = serde_json::from_slice(&read_file(&dir.join(TRACES_META_FILE))?)?;
    let bytes = read_file(&dir.join(TRACES_FILE))?;
    let width: usize = meta.layers.iter().map(|l| l.size).sum();
    if bytes.len() != meta.count * width * 4 {
        return Err(Error::LengthMismatch {
            what: "traces.bin".into(),
            declared: meta.count * width,
            found: bytes.len() / 4,
        });
    }
    let flat = le_bytes_to_floats(&bytes);
    let records = if width == 0 {
        vec![Vec::new(); meta.count]
    } else {
        flat.chunks_exact(width).map(<[f32]>::to_vec).collect()
    };
    Ok(TraceSet {
        fingerprint: meta.fingerprint,
        layers: meta.layers.into_iter().map(|l| (l.name, l.size)).collect(),
        records,
    })
}
