use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvLayerSpec, DenseLayerSpec, Tensor3, window_output};

/// How a dense weight matrix is laid out in `weights.bin`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DenseLayout {
    /// `out_dim` rows of `in_dim` floats.
    #[default]
    RowMajor,
    /// Consecutive blocks of `group` input columns; each block holds all
    /// `out_dim` rows of its `group` columns, row-major within the block.
    /// One block is one contiguous read.
    ColumnGrouped { group: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvLayerSpec),
    Relu,
    MaxPool { pool: usize, stride: usize },
    Flatten,
    Dense { spec: DenseLayerSpec, layout: DenseLayout },
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Volume([usize; 3]),
    Vector(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Volume([c, h, w]) => c * h * w,
            Shape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A sequential classifier: conv / relu / maxpool / flatten / dense / softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
}

impl Network {
    /// Builds and shape-checks a network.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let net = Self {
            input_shape,
            layers,
        };
        net.shapes()?;
        Ok(net)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Output shape of every layer, in order. Fails on the first incompatibility.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let mut seen = HashSet::new();
        let mut shape = Shape::Volume(self.input_shape);
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Geometry("input shape must be positive".into()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if !seen.insert(layer.name.as_str()) {
                return Err(Error::Format(format!("duplicate layer name `{}`", layer.name)));
            }
            let bad = |detail: String| Error::ShapeIncompatible {
                layer: layer.name.clone(),
                detail,
            };
            shape = match (&layer.kind, shape) {
                (LayerKind::Conv(spec), Shape::Volume([c, h, w])) => {
                    spec.validate()?;
                    if spec.in_channels != c {
                        return Err(bad(format!(
                            "conv expects {} channels, previous layer yields {c}",
                            spec.in_channels
                        )));
                    }
                    let (oh, ow) = spec.output_hw(h, w).map_err(|e| bad(e.to_string()))?;
                    Shape::Volume([spec.out_filters, oh, ow])
                }
                (LayerKind::Relu, s) => s,
                (LayerKind::MaxPool { pool, stride }, Shape::Volume([c, h, w])) => {
                    let oh = window_output(h, *pool, *stride, 0).map_err(|e| bad(e.to_string()))?;
                    let ow = window_output(w, *pool, *stride, 0).map_err(|e| bad(e.to_string()))?;
                    Shape::Volume([c, oh, ow])
                }
                (LayerKind::Flatten, s) => Shape::Vector(s.len()),
                (LayerKind::Dense { spec, layout }, Shape::Vector(n)) => {
                    spec.validate()?;
                    if spec.in_dim != n {
                        return Err(bad(format!(
                            "dense expects {} inputs, previous layer yields {n}",
                            spec.in_dim
                        )));
                    }
                    if let DenseLayout::ColumnGrouped { group } = layout {
                        if *group == 0 || spec.in_dim % group != 0 {
                            return Err(bad(format!(
                                "column group {group} does not divide in_dim {}",
                                spec.in_dim
                            )));
                        }
                    }
                    Shape::Vector(spec.out_dim)
                }
                (LayerKind::Softmax, Shape::Vector(n)) => Shape::Vector(n),
                (kind, s) => {
                    return Err(bad(format!("{} layer cannot consume {:?}", kind.tag(), s)));
                }
            };
            out.push(shape);
        }
        if !matches!(shape, Shape::Vector(_)) {
            return Err(Error::ShapeIncompatible {
                layer: self.layers.last().map(|l| l.name.clone()).unwrap_or_default(),
                detail: "network must end in a vector output".into(),
            });
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> usize {
        match self.shapes().ok().and_then(|s| s.last().copied()) {
            Some(Shape::Vector(n)) => n,
            _ => 0,
        }
    }

    /// Layer indices of all conv layers, in order.
    pub fn conv_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_names(&self) -> Vec<String> {
        self.conv_indices()
            .into_iter()
            .map(|i| self.layers[i].name.clone())
            .collect()
    }

    pub fn conv(&self, name: &str) -> Result<&ConvLayerSpec> {
        match self.layer(name).map(|l| &l.kind) {
            Some(LayerKind::Conv(spec)) => Ok(spec),
            Some(_) => Err(Error::Config(format!("layer `{name}` is not a conv layer"))),
            None => Err(Error::UnknownLayer(name.to_string())),
        }
    }

    /// Conv layers that have a conv predecessor, i.e. the ones whose strengths
    /// can be predicted. Each pair is `(source, target)`.
    pub fn conv_pairs(&self) -> Vec<(String, String)> {
        let names = self.conv_names();
        names
            .windows(2)
            .map(|w| (w[0].clone(), w[1].clone()))
            .collect()
    }

    pub fn prunable_convs(&self) -> Vec<String> {
        self.conv_pairs().into_iter().map(|(_, t)| t).collect()
    }

    pub fn check_input(&self, input: &Tensor3) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(Error::Dimension(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }
}
