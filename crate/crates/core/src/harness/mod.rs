//! Corpus generation, training, evaluation and knockout experiments.

pub mod eval;
pub mod generate;
pub mod gradcheck;
pub mod train;

pub use eval::{evaluate, evaluate_with_knockouts, knockout, EvalReport, KnockoutMode, Referrer};
pub use generate::{generate_corpus, lexicon, Corpus, GenConfig};
pub use train::{train_listener, TrainConfig, TrainReport};
