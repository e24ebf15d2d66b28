pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod image;
pub mod models;
pub mod peft;
pub mod pipeline;
pub mod planner;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

/// Single-precision tensor, the pipeline's working type.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor for gradient checks and oracles.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
