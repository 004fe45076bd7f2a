//! Lazy evaluation of convolutional filters.
//!
//! For every conv layer after the first, an affine map predicts the layer's
//! activation strengths from the strengths observed at the previous conv
//! layer. Only the top fraction of filters by predicted strength is evaluated;
//! the others are zero-filled. Non-conv layers run unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{FilterSelector, ForwardTrace, Selection, forward_with};
use crate::model::io::{BlobRef, floats_to_le_bytes, le_bytes_to_floats, read_file};
use crate::model::Network;
use crate::tensor::{ConvLayerSpec, FilterMask, Tensor3};

pub const PREDICTORS_FILE: &str = "predictors.bin";
pub const PREDICTORS_META_FILE: &str = "predictors.json";

/// Sum of absolute values of each channel.
pub fn activation_strength(featmap: &Tensor3) -> Vec<f32> {
    (0..featmap.channels())
        .map(|c| featmap.channel(c).iter().map(|v| v.abs()).sum())
        .collect()
}

/// Number of filters kept for `fraction` of `layer_size`: `ceil(fraction * layer_size)`.
///
/// Products within 1e-9 of an integer count as that integer, so e.g.
/// `0.3 * 10` keeps 3 filters rather than 4.
pub fn kept_count(fraction: f64, layer_size: usize) -> usize {
    let raw = fraction.clamp(0.0, 1.0) * layer_size as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(layer_size)
}

/// Indices of the `kept_count(fraction, layer_size)` largest strengths.
/// Ties go to the lower index; the result is sorted.
pub fn select_top_fraction(strengths: &[f32], fraction: f64, layer_size: usize) -> Result<FilterMask> {
    if strengths.len() != layer_size {
        return Err(Error::Dimension(format!(
            "{} strengths for a layer of {layer_size} filters",
            strengths.len()
        )));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("keep fraction {fraction} outside [0, 1]")));
    }
    let k = kept_count(fraction, layer_size);
    let mut order: Vec<usize> = (0..layer_size).collect();
    order.sort_by(|&a, &b| strengths[b].total_cmp(&strengths[a]).then(a.cmp(&b)));
    order.truncate(k);
    FilterMask::new(layer_size, order)
}

/// Affine strength predictor for one conv layer:
/// `out[j] = sum_i weights[j, i] * (s[i] - mean[i]) / std[i] + bias[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StrengthPredictor {
    pub layer: String,
    pub source: String,
    /// Row-major `m x n` (`m` target filters, `n` source filters).
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl StrengthPredictor {
    pub fn targets(&self) -> usize {
        self.bias.len()
    }

    pub fn sources(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = (self.targets(), self.sources());
        if self.weights.len() != m * n || self.std.len() != n {
            return Err(Error::Dimension(format!(
                "predictor for `{}` has inconsistent dimensions",
                self.layer
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config(format!(
                "predictor for `{}` has a non-positive std",
                self.layer
            )));
        }
        Ok(())
    }

    pub fn predict(&self, s_prev: &[f32]) -> Result<Vec<f32>> {
        let n = self.sources();
        if s_prev.len() != n {
            return Err(Error::Dimension(format!(
                "predictor for `{}` expects {n} source strengths, got {}",
                self.layer,
                s_prev.len()
            )));
        }
        let z: Vec<f32> = s_prev
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&s, (&mu, &sd))| (s - mu) / sd)
            .collect();
        Ok(self
            .weights
            .chunks_exact(n.max(1))
            .take(self.targets())
            .zip(&self.bias)
            .map(|(row, &b)| {
                let mut acc = 0.0f32;
                for (&w, &x) in row.iter().zip(&z) {
                    acc += w * x;
                }
                acc + b
            })
            .collect())
    }

    /// Multiply-add count of one prediction: `2*m*n + m`.
    pub fn flops(&self) -> u64 {
        let (m, n) = (self.targets() as u64, self.sources() as u64);
        2 * m * n + m
    }
}

/// `predict_strengths` under its operational name.
pub fn predict_strengths(pred: &StrengthPredictor, s_prev: &[f32]) -> Result<Vec<f32>> {
    pred.predict(s_prev)
}

/// Predictors for a network, keyed by target layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PredictorSet {
    pub fingerprint: String,
    pub predictors: BTreeMap<String, StrengthPredictor>,
}

impl PredictorSet {
    pub fn new(fingerprint: impl Into<String>) -> Self {
        Self {
            fingerprint: fingerprint.into(),
            predictors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, p: StrengthPredictor) {
        self.predictors.insert(p.layer.clone(), p);
    }

    pub fn get(&self, layer: &str) -> Option<&StrengthPredictor> {
        self.predictors.get(layer)
    }

    pub fn is_empty(&self) -> bool {
        self.predictors.is_empty()
    }
}

/// Per-conv-layer keep fractions. Layers not named keep every filter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeepPolicy(pub BTreeMap<String, f64>);

impl KeepPolicy {
    /// Same fraction for every prunable conv layer of `net`.
    pub fn uniform(net: &Network, fraction: f64) -> Self {
        Self(net.prunable_convs().into_iter().map(|n| (n, fraction)).collect())
    }

    /// Fractions in the order of `net.prunable_convs()`.
    pub fn from_genome(net: &Network, genome: &[f64]) -> Result<Self> {
        let names = net.prunable_convs();
        if genome.len() != names.len() {
            return Err(Error::Dimension(format!(
                "genome has {} entries, network has {} prunable conv layers",
                genome.len(),
                names.len()
            )));
        }
        Ok(Self(names.into_iter().zip(genome.iter().copied()).collect()))
    }

    pub fn fraction(&self, layer: &str) -> f64 {
        self.0.get(layer).copied().unwrap_or(1.0)
    }

    pub fn set(&mut self, layer: impl Into<String>, fraction: f64) {
        self.0.insert(layer.into(), fraction);
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        let prunable = net.prunable_convs();
        for (name, &f) in &self.0 {
            net.conv(name)?;
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "keep fraction {f} for `{name}` outside [0, 1]"
                )));
            }
            if f < 1.0 && !prunable.contains(name) {
                return Err(Error::Config(format!(
                    "`{name}` has no conv predecessor and is always evaluated in full"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }
}

/// Selector implementing the lazy pass: first conv in full, later convs by
/// predicted strengths.
pub struct LazySelector<'a> {
    predictors: &'a PredictorSet,
    policy: &'a KeepPolicy,
    previous_name: Option<String>,
    /// Time spent predicting strengths and selecting filters.
    pub overhead: Duration,
}

impl<'a> LazySelector<'a> {
    pub fn new(predictors: &'a PredictorSet, policy: &'a KeepPolicy) -> Self {
        Self {
            predictors,
            policy,
            previous_name: None,
            overhead: Duration::ZERO,
        }
    }
}

impl FilterSelector for LazySelector<'_> {
    fn select(
        &mut self,
        _: usize,
        name: &str,
        layer: &ConvLayerSpec,
        previous: Option<&[f32]>,
    ) -> Result<Selection> {
        let source = self.previous_name.replace(name.to_string());
        let (Some(previous), Some(source)) = (previous, source) else {
            return Ok(Selection::Full);
        };
        let fraction = self.policy.fraction(name);
        // Keeping every filter needs no prediction.
        if kept_count(fraction, layer.out_filters) == layer.out_filters {
            return Ok(Selection::Full);
        }
        let pred = self
            .predictors
            .get(name)
            .ok_or_else(|| Error::MissingPredictor(name.to_string()))?;
        if pred.source != source {
            return Err(Error::Config(format!(
                "predictor for `{name}` reads `{}`, but the preceding conv is `{source}`",
                pred.source
            )));
        }
        let start = Instant::now();
        let predicted = pred.predict(previous)?;
        let mask = select_top_fraction(&predicted, fraction, layer.out_filters)?;
        self.overhead += start.elapsed();
        Ok(Selection::Masked {
            mask,
            predicted: Some(predicted),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LazyOutput {
    pub logits: Vec<f32>,
    pub diagnostics: ForwardTrace,
    pub overhead: Duration,
}

/// Forward pass that evaluates only the filters predicted to matter.
pub fn forward_lazy(
    net: &Network,
    predictors: &PredictorSet,
    policy: &KeepPolicy,
    input: &Tensor3,
) -> Result<LazyOutput> {
    let mut selector = LazySelector::new(predictors, policy);
    let diagnostics = forward_with(net, input, &mut selector)?;
    Ok(LazyOutput {
        logits: diagnostics.logits.clone(),
        diagnostics,
        overhead: selector.overhead,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictorEntry {
    layer: String,
    source: String,
    targets: usize,
    sources: usize,
    weights: BlobRef,
    bias: BlobRef,
    mean: BlobRef,
    std: BlobRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictorMeta {
    fingerprint: String,
    predictors: Vec<PredictorEntry>,
}

pub fn save_predictors(set: &PredictorSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blob: Vec<f32> = Vec::new();
    let mut push = |v: &[f32]| {
        let r = BlobRef {
            offset: blob.len(),
            count: v.len(),
        };
        blob.extend_from_slice(v);
        r
    };
    let entries = set
        .predictors
        .values()
        .map(|p| PredictorEntry {
            layer: p.layer.clone(),
            source: p.source.clone(),
            targets: p.targets(),
            sources: p.sources(),
            weights: push(&p.weights),
            bias: push(&p.bias),
            mean: push(&p.mean),
            std: push(&p.std),
        })
        .collect();
    let meta = PredictorMeta {
        fingerprint: set.fingerprint.clone(),
        predictors: entries,
    };
    fs::write(dir.join(PREDICTORS_FILE), floats_to_le_bytes(&blob))?;
    fs::write(dir.join(PREDICTORS_META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_predictors(dir: impl AsRef<Path>) -> Result<PredictorSet> {
    let dir = dir.as_ref();
    let meta: PredictorMeta = serde_json::from_slice(&read_file(&dir.join(PREDICTORS_META_FILE))?)?;
    let blob = le_bytes_to_floats(&read_file(&dir.join(PREDICTORS_FILE))?);
    let slice = |r: BlobRef, expected: usize, what: &str| -> Result<Vec<f32>> {
        if r.count != expected || r.offset + r.count > blob.len() {
            return Err(Error::LengthMismatch {
                what: what.to_string(),
                declared: r.count,
                found: expected.min(blob.len().saturating_sub(r.offset)),
            });
        }
        Ok(blob[r.offset..r.offset + r.count].to_vec())
    };
    let mut set = PredictorSet::new(meta.fingerprint);
    for e in meta.predictors {
        let p = StrengthPredictor {
            weights: slice(e.weights, e.targets * e.sources, "predictor weights")?,
            bias: slice(e.bias, e.targets, "predictor bias")?,
            mean: slice(e.mean, e.sources, "predictor mean")?,
            std: slice(e.std, e.sources, "predictor std")?,
            layer: e.layer,
            source: e.source,
        };
        p.validate()?;
        set.insert(p);
    }
    Ok(set)
}
