//! Shared fixtures for the benchmarks.

use lazyconv_core::model::{SyntheticSpec, gen_synthetic};
use lazyconv_core::train::{TrainConfig, train_all};
use lazyconv_core::{Network, PredictorSet, Tensor3, collect_traces};

/// Reference network, one input drawn from its dataset, and predictors
/// trained on a short trace run.
pub struct BenchFixture {
    pub net: Network,
    pub input: Tensor3,
    pub predictors: PredictorSet,
}

pub fn reference_fixture(samples: usize) -> BenchFixture {
    let spec = SyntheticSpec {
        dataset_size: samples,
        ..SyntheticSpec::reference()
    };
    let (net, data) = gen_synthetic(&spec).expect("reference spec is valid");
    let traces = collect_traces(&net, &data).expect("dataset matches the network");
    let cfg = TrainConfig {
        epochs: 40,
        ..TrainConfig::default()
    };
    let (predictors, _) = train_all(&traces, &cfg).expect("enough samples to train");
    BenchFixture {
        input: data.inputs[0].clone(),
        net,
        predictors,
    }
}

/// Keep fractions swept by the benchmarks.
pub const FRACTIONS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];
