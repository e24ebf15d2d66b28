//! Vision encoder, causal language model, projector and their assembly.

pub mod decode;
pub mod layers;
pub mod llvm;
pub mod lm;
pub mod params;
pub mod vision;

pub use decode::DecodeSession;
pub use layers::Mode;
pub use llvm::{build_prompt, LlvmModel, Projector, Prompt, PromptTemplate};
pub use lm::{LanguageModel, LmConfig};
pub use params::{Binder, GradMap, Param, ParamStore, ParamValue};
pub use vision::{patchify, VisionConfig, VisionEncoder};
