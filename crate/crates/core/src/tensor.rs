//! Dense activation tensors, layer parameter blocks and filter masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-image activation volume stored channel-major (`c`, then `h`, then `w`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "{}x{}x{} tensor needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    /// Reshape in place, reusing the allocation. Contents are unspecified afterwards.
    pub(crate) fn reset(&mut self, channels: usize, height: usize, width: usize) {
        self.channels = channels;
        self.height = height;
        self.width = width;
        self.data.resize(channels * height * width, 0.0);
    }

    pub fn scaled(&self, alpha: f32) -> Self {
        Self {
            data: self.data.iter().map(|v| v * alpha).collect(),
            ..self.clone()
        }
    }
}

/// Output filters evaluated for one conv layer on one sample.
///
/// `active` is strictly increasing and bounded by `layer_size`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FilterMask {
    layer_size: usize,
    active: Vec<usize>,
}

impl FilterMask {
    pub fn new(layer_size: usize, mut active: Vec<usize>) -> Result<Self> {
        active.sort_unstable();
        active.dedup();
        if let Some(&last) = active.last() {
            if last >= layer_size {
                return Err(Error::Dimension(format!(
                    "mask index {last} out of range for layer of {layer_size} filters"
                )));
            }
        }
        Ok(Self { layer_size, active })
    }

    pub fn full(layer_size: usize) -> Self {
        Self {
            layer_size,
            active: (0..layer_size).collect(),
        }
    }

    pub fn empty(layer_size: usize) -> Self {
        Self {
            layer_size,
            active: Vec::new(),
        }
    }

    pub fn layer_size(&self) -> usize {
        self.layer_size
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn len(&self) -> usize {
        self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.active.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.active.len() == self.layer_size
    }

    pub fn contains(&self, index: usize) -> bool {
        self.active.binary_search(&index).is_ok()
    }

    /// Dense membership flags, one per filter.
    pub fn to_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.layer_size];
        for &i in &self.active {
            flags[i] = true;
        }
        flags
    }

    pub fn is_subset_of(&self, other: &FilterMask) -> bool {
        self.active.iter().all(|&i| other.contains(i))
    }
}

/// Convolution parameters: `weights` is `O x I x kh x kw`, `bias` has `O` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerSpec {
    pub out_filters: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayerSpec {
    pub fn weight_len(&self) -> usize {
        self.out_filters * self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Geometry("conv stride must be at least 1".into()));
        }
        if self.out_filters == 0 || self.in_channels == 0 || self.kernel_h == 0 || self.kernel_w == 0
        {
            return Err(Error::Geometry("conv dimensions must be positive".into()));
        }
        if self.weights.len() != self.weight_len() {
            return Err(Error::LengthMismatch {
                what: "conv weights".into(),
                declared: self.weight_len(),
                found: self.weights.len(),
            });
        }
        if self.bias.len() != self.out_filters {
            return Err(Error::LengthMismatch {
                what: "conv bias".into(),
                declared: self.out_filters,
                found: self.bias.len(),
            });
        }
        Ok(())
    }

    /// Output spatial size for an `in_h x in_w` input.
    pub fn output_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        let oh = window_output(in_h, self.kernel_h, self.stride, self.padding)?;
        let ow = window_output(in_w, self.kernel_w, self.stride, self.padding)?;
        Ok((oh, ow))
    }

    pub(crate) fn filter(&self, o: usize) -> &[f32] {
        let n = self.in_channels * self.kernel_h * self.kernel_w;
        &self.weights[o * n..(o + 1) * n]
    }
}

/// Fully connected parameters: `weights` is row-major `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.in_dim * self.out_dim {
            return Err(Error::LengthMismatch {
                what: "dense weights".into(),
                declared: self.in_dim * self.out_dim,
                found: self.weights.len(),
            });
        }
        if self.bias.len() != self.out_dim {
            return Err(Error::LengthMismatch {
                what: "dense bias".into(),
                declared: self.out_dim,
                found: self.bias.len(),
            });
        }
        Ok(())
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.weights[j * self.in_dim..(j + 1) * self.in_dim]
    }
}

/// `floor((size + 2*padding - window) / stride) + 1`, or a geometry error when that is < 1.
pub fn window_output(size: usize, window: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Geometry("stride must be at least 1".into()));
    }
    let padded = size + 2 * padding;
    if window == 0 || padded < window {
        return Err(Error::Geometry(format!(
            "window {window} does not fit input {size} with padding {padding}"
        )));
    }
    Ok((padded - window) / stride + 1)
}
