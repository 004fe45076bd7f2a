//! Deterministic synthetic networks and self-labeled datasets.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`; every
//! weighted layer draws from its own stream (`set_stream(1 + layer index)`),
//! the input prototypes from [`PROTOTYPE_STREAM`] and the samples from
//! [`SAMPLE_STREAM`]. Adding a layer never perturbs the draws of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::Dataset;
use super::network::{DenseLayout, Layer, LayerKind, Network, Shape};
use crate::error::{Error, Result};
use crate::inference::forward_eager;
use crate::ops::argmax;
use crate::tensor::{ConvLayerSpec, DenseLayerSpec, Tensor3};

pub const PROTOTYPE_STREAM: u64 = 1 << 32;
pub const SAMPLE_STREAM: u64 = (1 << 32) + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    pub kernel: usize,
    /// Max-pool window (and stride) applied after this conv's ReLU.
    #[serde(default)]
    pub pool_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub input_shape: [usize; 3],
    pub convs: Vec<ConvBlock>,
    /// Output widths of the dense layers; the first input width follows from
    /// the flattened conv volume. The last entry is the class count.
    pub dense: Vec<usize>,
    pub dataset_size: usize,
    pub seed: u64,
    /// Number of mixture prototypes the inputs are drawn from.
    #[serde(default = "default_prototypes")]
    pub prototypes: usize,
}

fn default_prototypes() -> usize {
    8
}

impl SyntheticSpec {
    /// Four 3x3 conv layers (16, 32, 32, 64 filters, padding 1) on 3x32x32
    /// inputs; 2x2 pooling after the second and 4x4 pooling after the fourth,
    /// so the flattened volume is 64x4x4 = 1024 and the head is 1024 -> 64 -> 10.
    pub fn reference() -> Self {
        let conv = |filters, pool_after| ConvBlock {
            filters,
            kernel: 3,
            pool_after,
        };
        Self {
            input_shape: [3, 32, 32],
            convs: vec![conv(16, None), conv(32, Some(2)), conv(32, None), conv(64, Some(4))],
            dense: vec![64, 10],
            dataset_size: 1000,
            seed: 42,
            prototypes: default_prototypes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.convs.is_empty() || self.dense.is_empty() {
            return Err(Error::Config("need at least one conv block and one dense layer".into()));
        }
        if self.convs.iter().any(|c| c.filters == 0 || c.kernel == 0 || c.kernel % 2 == 0) {
            return Err(Error::Geometry("conv filters must be positive and kernels odd".into()));
        }
        if self.dense.iter().any(|&d| d == 0) {
            return Err(Error::Config("dense widths must be positive".into()));
        }
        if self.prototypes == 0 {
            return Err(Error::Config("need at least one prototype".into()));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let normal = Normal::new(0.0f32, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Generates the network only (no dataset).
pub fn gen_network(spec: &SyntheticSpec) -> Result<Network> {
    spec.validate()?;
    let mut layers = Vec::new();
    let [mut channels, _, _] = spec.input_shape;
    let (mut block, mut index) = (1, 1);
    for conv in &spec.convs {
        let mut rng = stream(spec.seed, 1 + layers.len() as u64);
        let fan_in = channels * conv.kernel * conv.kernel;
        let weights = gaussian(&mut rng, conv.filters * fan_in, 1.0 / (fan_in as f32).sqrt());
        let bias = gaussian(&mut rng, conv.filters, 0.1);
        layers.push(Layer::new(
            format!("conv{block}_{index}"),
            LayerKind::Conv(ConvLayerSpec {
                out_filters: conv.filters,
                in_channels: channels,
                kernel_h: conv.kernel,
                kernel_w: conv.kernel,
                stride: 1,
                padding: conv.kernel / 2,
                weights,
                bias,
            }),
        ));
        layers.push(Layer::new(format!("relu{block}_{index}"), LayerKind::Relu));
        channels = conv.filters;
        index += 1;
        if let Some(pool) = conv.pool_after {
            layers.push(Layer::new(
                format!("pool{block}"),
                LayerKind::MaxPool { pool, stride: pool },
            ));
            block += 1;
            index = 1;
        }
    }
    // Geometry of the flattened volume decides the dense input width and group size.
    let probe = Network::new(spec.input_shape, {
        let mut l = layers.clone();
        l.push(Layer::new("flatten", LayerKind::Flatten));
        l
    })?;
    let volume = probe.shapes()?[layers.len() - 1];
    let Shape::Volume([_, h, w]) = volume else {
        unreachable!("conv stack yields a volume")
    };
    layers.push(Layer::new("flatten", LayerKind::Flatten));
    let mut in_dim = volume.len();
    for (k, &out_dim) in spec.dense.iter().enumerate() {
        let mut rng = stream(spec.seed, 1 + layers.len() as u64);
        let weights = gaussian(&mut rng, in_dim * out_dim, 1.0 / (in_dim as f32).sqrt());
        let bias = gaussian(&mut rng, out_dim, 0.01);
        let layout = if k == 0 {
            DenseLayout::ColumnGrouped { group: h * w }
        } else {
            DenseLayout::RowMajor
        };
        layers.push(Layer::new(
            format!("fc{}", k + 1),
            LayerKind::Dense {
                spec: DenseLayerSpec {
                    in_dim,
                    out_dim,
                    weights,
                    bias,
                },
                layout,
            },
        ));
        if k + 1 < spec.dense.len() {
            layers.push(Layer::new(format!("relu_fc{}", k + 1), LayerKind::Relu));
        }
        in_dim = out_dim;
    }
    layers.push(Layer::new("softmax", LayerKind::Softmax));
    Network::new(spec.input_shape, layers)
}

/// Unlabeled inputs: each sample mixes two random smooth prototype patterns
/// with positive weights and adds Gaussian noise.
pub fn gen_inputs(spec: &SyntheticSpec) -> Result<Vec<Tensor3>> {
    spec.validate()?;
    let [c, h, w] = spec.input_shape;
    let mut proto_rng = stream(spec.seed, PROTOTYPE_STREAM);
    let prototypes: Vec<Vec<f32>> = (0..spec.prototypes)
        .map(|_| prototype(&mut proto_rng, c, h, w))
        .collect();
    let mut rng = stream(spec.seed, SAMPLE_STREAM);
    let noise = Normal::new(0.0f32, 0.2).expect("finite std");
    (0..spec.dataset_size)
        .map(|_| {
            let a = rng.random_range(0..spec.prototypes);
            let b = rng.random_range(0..spec.prototypes);
            let wa = rng.random_range(0.5f32..1.5);
            let wb = rng.random_range(0.0f32..1.0);
            let data = prototypes[a]
                .iter()
                .zip(&prototypes[b])
                .map(|(&x, &y)| wa * x + wb * y + noise.sample(&mut rng))
                .collect();
            Tensor3::from_vec(c, h, w, data)
        })
        .collect()
}

fn prototype(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for _ in 0..3 {
            let amp = rng.random_range(-1.0f32..1.0);
            let fy = rng.random_range(0.0f32..0.5);
            let fx = rng.random_range(0.0f32..0.5);
            let phase = rng.random_range(0.0f32..std::f32::consts::TAU);
            for y in 0..h {
                for x in 0..w {
                    let t = std::f32::consts::TAU * (fy * y as f32 + fx * x as f32) + phase;
                    out[(ch * h + y) * w + x] += amp * t.cos();
                }
            }
        }
    }
    out
}

/// Network plus a dataset labeled with the network's own argmax, so eager
/// accuracy on it is exactly 1.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Network, Dataset)> {
    let net = gen_network(spec)?;
    let inputs = gen_inputs(spec)?;
    let labels = inputs
        .iter()
        .map(|x| forward_eager(&net, x).map(|r| argmax(&r.logits)))
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::new(inputs, Some(labels))?;
    Ok((net, data))
}
