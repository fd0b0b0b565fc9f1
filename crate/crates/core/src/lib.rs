//! Phrase-to-object grounding for 3D scenes: the scan-entity data model,
//! auxiliary listener and speaker losses on a small autodiff engine, and an
//! evaluation harness over synthetic corpora.

pub mod annotation;
pub mod autodiff;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod layers;
pub mod listener;
pub mod metrics;
pub mod relations;
pub mod scalar;
pub mod scene;
pub mod speaker;
pub mod stats;
pub mod vocab;

pub use error::{Error, RecordError, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type Listener64 = listener::Listener<f64>;
pub type Listener32 = listener::Listener<f32>;
pub type Speaker64 = speaker::Speaker<f64>;
pub type Speaker32 = speaker::Speaker<f32>;
