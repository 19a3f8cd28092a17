//! Two-stage denoising laboratory for sequential recommendation.
//!
//! The pipeline: ingest interaction logs ([`dataio`]), encode each user's
//! history with an item-embedding + GRU backbone ([`encoder`]) alongside
//! frozen semantic vectors ([`semantic`]), align the two modalities with
//! InfoNCE ([`alignment`]), flag suspect interactions with cosine scores and
//! Gumbel-Sigmoid masks ([`denoiser`]), retrain progressively on the masked
//! input ([`trainer`]), and measure ranking quality plus noise recovery
//! ([`eval`]). All numerics run on a small reverse-mode tape ([`graph`])
//! generic over the scalar type; `f64` is the default precision.

pub mod alignment;
pub mod dataio;
pub mod denoiser;
pub mod encoder;
pub mod eval;
pub mod graph;
pub mod optim;
pub mod scalar;
pub mod semantic;
pub mod tensor;
pub mod trainer;

pub use graph::Var;
pub use scalar::Scalar;

/// Default-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Default-precision gradient tape.
pub type Graph = graph::Graph<f64>;
/// Default-precision parameter store.
pub type ParamStore = optim::ParamStore<f64>;
/// Default-precision Adam state.
pub type AdamState = optim::AdamState<f64>;
