//! FLOP cost model, wall-clock measurement and the per-layer sweeps.
//!
//! FLOPs count a multiply and an add separately. Conv layers cost
//! `2 * kept * active_inputs * kh * kw * out_h * out_w + kept * out_h * out_w`;
//! dense layers `2 * in * out + out`; ReLU one op per element, max-pooling
//! `pool^2 - 1` comparisons per output, softmax `3 * n`. A predicted layer adds
//! its predictor's `2 * m * n + m`.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{
    EagerSelector, FilterSelector, ForwardTrace, Selection, activation_before, forward_eager,
    forward_profiled, forward_with,
};
use crate::lazy::{KeepPolicy, LazySelector, PredictorSet, activation_strength, select_top_fraction};
use crate::model::{Dataset, LayerKind, Network, Shape};
use crate::ops::{argmax, conv2d_into};
use crate::tensor::{ConvLayerSpec, Tensor3};

/// Shape facts of one conv layer needed to count its FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub out_filters: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(spec: &ConvLayerSpec, out_h: usize, out_w: usize) -> Self {
        Self {
            out_filters: spec.out_filters,
            in_channels: spec.in_channels,
            kernel_h: spec.kernel_h,
            kernel_w: spec.kernel_w,
            out_h,
            out_w,
        }
    }
}

/// FLOPs of a conv layer evaluating `kept` filters over `active_inputs` input channels.
pub fn flops_conv(geom: &ConvGeometry, kept: usize, active_inputs: usize) -> u64 {
    let plane = (geom.out_h * geom.out_w) as u64;
    let (k, a) = (kept as u64, active_inputs as u64);
    2 * k * a * (geom.kernel_h * geom.kernel_w) as u64 * plane + k * plane
}

/// Unpruned per-layer FLOPs of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    names: Vec<String>,
    kinds: Vec<&'static str>,
    eager: Vec<u64>,
    conv_geometry: Vec<Option<ConvGeometry>>,
}

impl CostModel {
    pub fn new(net: &Network) -> Result<Self> {
        let shapes = net.shapes()?;
        let mut model = CostModel {
            names: Vec::new(),
            kinds: Vec::new(),
            eager: Vec::new(),
            conv_geometry: Vec::new(),
        };
        for (layer, &shape) in net.layers().iter().zip(&shapes) {
            let (flops, geom) = match (&layer.kind, shape) {
                (LayerKind::Conv(spec), Shape::Volume([_, h, w])) => {
                    let g = ConvGeometry::new(spec, h, w);
                    (flops_conv(&g, spec.out_filters, spec.in_channels), Some(g))
                }
                (LayerKind::Relu, s) => (s.len() as u64, None),
                (LayerKind::MaxPool { pool, .. }, s) => {
                    (s.len() as u64 * (pool * pool - 1) as u64, None)
                }
                (LayerKind::Dense { spec, .. }, _) => {
                    ((2 * spec.in_dim * spec.out_dim + spec.out_dim) as u64, None)
                }
                (LayerKind::Softmax, s) => (3 * s.len() as u64, None),
                _ => (0, None),
            };
            model.names.push(layer.name.clone());
            model.kinds.push(layer.kind.tag());
            model.eager.push(flops);
            model.conv_geometry.push(geom);
        }
        Ok(model)
    }

    pub fn eager_total(&self) -> u64 {
        self.eager.iter().sum()
    }

    pub fn conv_geometry(&self, name: &str) -> Option<ConvGeometry> {
        let i = self.names.iter().position(|n| n == name)?;
        self.conv_geometry[i]
    }

    /// Per-layer FLOPs of one executed pass, predictor cost listed separately.
    pub fn trace_flops(&self, trace: &ForwardTrace, predictors: &PredictorSet) -> (Vec<u64>, Vec<u64>) {
        let mut layer = self.eager.clone();
        let mut predictor = vec![0u64; self.eager.len()];
        for rec in &trace.convs {
            let Some(i) = self.names.iter().position(|n| *n == rec.name) else {
                continue;
            };
            if let Some(g) = &self.conv_geometry[i] {
                layer[i] = flops_conv(g, rec.mask.len(), rec.active_inputs);
            }
            if rec.predicted.is_some() {
                predictor[i] = predictors.get(&rec.name).map_or(0, |p| p.flops());
            }
        }
        (layer, predictor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    /// Totals over all samples.
    pub eager_flops: u64,
    pub lazy_flops: u64,
    pub predictor_flops: u64,
    /// Median per-sample wall-clock seconds, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eager_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lazy_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub repetitions: usize,
    pub samples: usize,
    /// Median seconds for one pass over the timed samples.
    pub eager_seconds: f64,
    pub lazy_seconds: f64,
    /// Median seconds spent predicting strengths and selecting filters.
    pub overhead_seconds: f64,
    pub speedup: f64,
    /// `overhead_seconds / eager_seconds`.
    pub overhead_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub samples: usize,
    pub layers: Vec<LayerCost>,
    pub eager_total: u64,
    /// Lazy conv/dense/other FLOPs plus predictor FLOPs.
    pub lazy_total: u64,
    pub predictor_total: u64,
    pub eager_per_sample: f64,
    pub lazy_per_sample: f64,
    /// `lazy_total / eager_total`.
    pub ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock: Option<WallClock>,
}

/// Accuracy and model cost of one policy over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub cost: CostReport,
}

/// Labels to score against: the dataset's own, or the eager argmax (fidelity).
pub fn reference_labels(net: &Network, data: &Dataset) -> Result<Vec<usize>> {
    match &data.labels {
        Some(l) => Ok(l.clone()),
        None => data
            .inputs
            .par_iter()
            .map(|x| forward_eager(net, x).map(|o| argmax(&o.logits)))
            .collect(),
    }
}

/// Runs the lazy pass over `data`, counting FLOPs from each sample's actual
/// masks and scoring top-1 accuracy.
pub fn evaluate(
    net: &Network,
    predictors: &PredictorSet,
    policy: &KeepPolicy,
    data: &Dataset,
) -> Result<Evaluation> {
    policy.validate(net)?;
    data.check_against(net)?;
    if data.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let model = CostModel::new(net)?;
    let labels = reference_labels(net, data)?;
    let per_sample = data
        .inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &label)| {
            let mut sel = LazySelector::new(predictors, policy);
            let trace = forward_with(net, x, &mut sel)?;
            let (layer, pred) = model.trace_flops(&trace, predictors);
            Ok((argmax(&trace.logits) == label, layer, pred))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = data.len();
    let mut lazy = vec![0u64; model.eager.len()];
    let mut pred = vec![0u64; model.eager.len()];
    let mut correct = 0usize;
    for (ok, l, p) in &per_sample {
        correct += usize::from(*ok);
        for i in 0..lazy.len() {
            lazy[i] += l[i];
            pred[i] += p[i];
        }
    }
    let layers: Vec<LayerCost> = (0..lazy.len())
        .map(|i| LayerCost {
            name: model.names[i].clone(),
            kind: model.kinds[i].to_string(),
            eager_flops: model.eager[i] * n as u64,
            lazy_flops: lazy[i],
            predictor_flops: pred[i],
            eager_seconds: None,
            lazy_seconds: None,
        })
        .collect();
    let eager_total = model.eager_total() * n as u64;
    let predictor_total: u64 = pred.iter().sum();
    let lazy_total = lazy.iter().sum::<u64>() + predictor_total;
    Ok(Evaluation {
        accuracy: correct as f64 / n as f64,
        cost: CostReport {
            samples: n,
            layers,
            eager_total,
            lazy_total,
            predictor_total,
            eager_per_sample: eager_total as f64 / n as f64,
            lazy_per_sample: lazy_total as f64 / n as f64,
            ratio: lazy_total as f64 / eager_total as f64,
            wall_clock: None,
        },
    })
}

/// Model-based cost of running `policy` over `data`.
pub fn estimate_cost(
    net: &Network,
    predictors: &PredictorSet,
    policy: &KeepPolicy,
    data: &Dataset,
) -> Result<CostReport> {
    Ok(evaluate(net, predictors, policy, data)?.cost)
}

/// Median of `reps` timings of `f`, after one discarded warm-up call.
pub fn median_time<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<Duration> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed());
    }
    times.sort();
    Ok(times[times.len() / 2])
}

fn median_f64(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Single-threaded wall-clock comparison of eager and lazy passes over
/// `inputs`, median of `reps` repetitions. Fills the per-layer seconds of
/// `report` when given.
pub fn measure_wall_clock(
    net: &Network,
    predictors: &PredictorSet,
    policy: &KeepPolicy,
    inputs: &[Tensor3],
    reps: usize,
    report: Option<&mut CostReport>,
) -> Result<WallClock> {
    policy.validate(net)?;
    let reps = reps.max(1);
    let n_layers = net.layers().len();
    let mut eager_runs = Vec::with_capacity(reps);
    let mut lazy_runs = Vec::with_capacity(reps);
    let mut overhead_runs = Vec::with_capacity(reps);
    let mut eager_layer = vec![Vec::with_capacity(reps); n_layers];
    let mut lazy_layer = vec![Vec::with_capacity(reps); n_layers];

    // warm-up
    for x in inputs {
        forward_with(net, x, &mut EagerSelector)?;
        forward_with(net, x, &mut LazySelector::new(predictors, policy))?;
    }
    for _ in 0..reps {
        let mut per_layer = vec![0.0f64; n_layers];
        let start = Instant::now();
        for x in inputs {
            let (_, t) = forward_profiled(net, x, &mut EagerSelector)?;
            for (acc, d) in per_layer.iter_mut().zip(t) {
                *acc += d.as_secs_f64();
            }
        }
        eager_runs.push(start.elapsed().as_secs_f64());
        for (i, v) in per_layer.into_iter().enumerate() {
            eager_layer[i].push(v / inputs.len() as f64);
        }

        let mut per_layer = vec![0.0f64; n_layers];
        let mut overhead = Duration::ZERO;
        let start = Instant::now();
        for x in inputs {
            let mut sel = LazySelector::new(predictors, policy);
            let (_, t) = forward_profiled(net, x, &mut sel)?;
            overhead += sel.overhead;
            for (acc, d) in per_layer.iter_mut().zip(t) {
                *acc += d.as_secs_f64();
            }
        }
        lazy_runs.push(start.elapsed().as_secs_f64());
        overhead_runs.push(overhead.as_secs_f64());
        for (i, v) in per_layer.into_iter().enumerate() {
            lazy_layer[i].push(v / inputs.len() as f64);
        }
    }
    if let Some(report) = report {
        for (i, l) in report.layers.iter_mut().enumerate().take(n_layers) {
            l.eager_seconds = Some(median_f64(eager_layer[i].clone()));
            l.lazy_seconds = Some(median_f64(lazy_layer[i].clone()));
        }
    }
    let eager = median_f64(eager_runs);
    let lazy = median_f64(lazy_runs);
    let overhead = median_f64(overhead_runs);
    Ok(WallClock {
        repetitions: reps,
        samples: inputs.len(),
        eager_seconds: eager,
        lazy_seconds: lazy,
        overhead_seconds: overhead,
        speedup: eager / lazy,
        overhead_fraction: overhead / eager,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub fraction: f64,
    pub median_seconds: f64,
}

/// Times the named conv layer alone at each keep fraction. The mask keeps the
/// filters with the largest strengths in an eager run on `input`; zero-filling
/// the skipped channels is included in the time.
pub fn bench_layer(
    net: &Network,
    layer_name: &str,
    fractions: &[f64],
    input: &Tensor3,
    reps: usize,
) -> Result<Vec<BenchRow>> {
    let spec = net.conv(layer_name)?;
    let index = net.layer_index(layer_name).expect("conv exists");
    let x = activation_before(net, input, index)?;
    let mut full = Tensor3::zeros(0, 0, 0);
    conv2d_into(&x, spec, None, None, &mut full)?;
    let strengths = activation_strength(&full);
    let mut out = Tensor3::zeros(0, 0, 0);
    fractions
        .iter()
        .map(|&fraction| {
            let mask = select_top_fraction(&strengths, fraction, spec.out_filters)?;
            let t = median_time(reps, || conv2d_into(&x, spec, Some(&mask), None, &mut out))?;
            Ok(BenchRow {
                fraction,
                median_seconds: t.as_secs_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    /// Mask by the layer's actual strengths in the same pass.
    Oracle,
    /// Mask by strengths predicted from the previous conv layer.
    Predicted,
}

impl std::str::FromStr for SweepMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(SweepMode::Oracle),
            "predicted" => Ok(SweepMode::Predicted),
            other => Err(Error::Config(format!("unknown sweep mode `{other}`"))),
        }
    }
}

struct SingleLayer<'a> {
    target: &'a str,
    fraction: f64,
    mode: SweepMode,
    predictors: Option<&'a PredictorSet>,
}

impl FilterSelector for SingleLayer<'_> {
    fn select(
        &mut self,
        _: usize,
        name: &str,
        layer: &ConvLayerSpec,
        previous: Option<&[f32]>,
    ) -> Result<Selection> {
        if name != self.target {
            return Ok(Selection::Full);
        }
        match self.mode {
            SweepMode::Oracle => Ok(Selection::OracleTop(self.fraction)),
            SweepMode::Predicted => {
                let prev = previous.ok_or_else(|| {
                    Error::Config(format!("`{name}` has no conv predecessor to predict from"))
                })?;
                let pred = self
                    .predictors
                    .and_then(|p| p.get(name))
                    .ok_or_else(|| Error::MissingPredictor(name.to_string()))?;
                let predicted = pred.predict(prev)?;
                let mask = select_top_fraction(&predicted, self.fraction, layer.out_filters)?;
                Ok(Selection::Masked {
                    mask,
                    predicted: Some(predicted),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub accuracy: f64,
}

/// Accuracy with only `layer_name` pruned to each fraction, all other layers full.
pub fn sensitivity_sweep(
    net: &Network,
    data: &Dataset,
    layer_name: &str,
    fractions: &[f64],
    mode: SweepMode,
    predictors: Option<&PredictorSet>,
) -> Result<Vec<SweepRow>> {
    net.conv(layer_name)?;
    if mode == SweepMode::Predicted && predictors.and_then(|p| p.get(layer_name)).is_none() {
        return Err(Error::MissingPredictor(layer_name.to_string()));
    }
    if data.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    data.check_against(net)?;
    let labels = reference_labels(net, data)?;
    fractions
        .iter()
        .map(|&fraction| {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
            }
            let correct = data
                .inputs
                .par_iter()
                .zip(labels.par_iter())
                .map(|(x, &label)| {
                    let mut sel = SingleLayer {
                        target: layer_name,
                        fraction,
                        mode,
                        predictors,
                    };
                    forward_with(net, x, &mut sel).map(|t| usize::from(argmax(&t.logits) == label))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .sum::<usize>();
            Ok(SweepRow {
                fraction,
                accuracy: correct as f64 / data.len() as f64,
            })
        })
        .collect()
}
