//! Response retrieval with a shared transformer encoder, a multi-attentive
//! decoder and likelihood-plus-grounding candidate scoring.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scoring;
pub mod seed;
pub mod tokenizer;
pub mod training;

/// Any failure from the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),
    #[error(transparent)]
    Tokenizer(#[from] tokenizer::TokenizerError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Scoring(#[from] scoring::ScoringError),
    #[error(transparent)]
    Train(#[from] training::TrainError),
    #[error(transparent)]
    Checkpoint(#[from] training::CheckpointError),
    #[error(transparent)]
    Eval(#[from] evaluation::EvalError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
}
