//! Minimal dense reverse-mode automatic differentiation.

pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use nn::{cosine_rows, linear, lstm_cell, scaled_dot_attention, LstmWeights};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{Checkpoint, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
