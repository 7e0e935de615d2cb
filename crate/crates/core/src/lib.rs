//! Un-pruning lab: remove the influence of deleted training data from both the
//! weights and the mask of a magnitude-pruned network.
//!
//! The pipeline is small MLPs on CPU, generic over the scalar type:
//!
//! * [`data`], [`idx`]: synthetic blobs, IDX ingestion, the seeded deletion split.
//! * [`model`], [`train`]: masked MLPs with hand-written backprop and plain SGD.
//! * [`prune`]: global/layerwise magnitude pruning and structured neuron pruning.
//! * [`unlearn`]: gradient ascent, Fisher forgetting, fine-tuning.
//! * [`unprune`]: the re-activate / unlearn / regrow / re-prune loop.
//! * [`oracle`]: retrain + reprune on the retained data, with a snapshot cache.
//! * [`metrics`], [`mia`]: mask overlap, weight-distribution KL, membership inference.
//! * [`experiment`], [`plot`]: the grid runner and its CSV/JSON/SVG output.
//!
//! All randomness flows through [`rng::SeededRng`], so a seed fixes every result.

pub mod data;
pub mod error;
pub mod experiment;
pub mod idx;
pub mod metrics;
pub mod mia;
pub mod model;
pub mod oracle;
pub mod plot;
pub mod prune;
pub mod rng;
pub mod scalar;
pub mod snapshot;
pub mod tensor;
pub mod train;
pub mod unlearn;
pub mod unprune;

pub use data::{Dataset, DeletionSplit};
pub use error::{Error, Result};
pub use model::{GradientSet, LayerSpec, MaskedModel};
pub use rng::SeededRng;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Model = MaskedModel<f64>;
pub type Dataset64 = Dataset<f64>;
pub type GradientSet64 = GradientSet<f64>;
