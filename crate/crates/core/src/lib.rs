//! Multi-task neural mention-pair model for bridging reference resolution,
//! trained jointly with coreference.

pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod mentions;
pub mod model;
pub mod scorer;
pub mod synthetic;
pub mod training;

pub use config::{
    ContextualMode, DropoutConfig, EncoderConfig, ModelConfig, ScorerConfig, SharingMode,
    TrainConfig,
};
pub use error::{BridgingError, Result};
pub use model::{CharVocab, Dropout, Features, ForwardOutput, Model, Task};
