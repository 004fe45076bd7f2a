//! Network description, on-disk containers and the synthetic generator.

pub mod io;
pub mod network;
pub mod synth;

pub use io::{
    Dataset, Manifest, ManifestLayer, fingerprint, load_dataset, load_model,
    load_model_with_fingerprint, read_manifest, save_dataset, save_model,
};
pub use network::{DenseLayout, Layer, LayerKind, Network, Shape};
pub use synth::{ConvBlock, SyntheticSpec, gen_network, gen_synthetic};
