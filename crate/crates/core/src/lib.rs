//! Cognitive chains for GUI interaction traces: motor-step grouping,
//! difficulty indices, LLM-driven chain extraction, step-time fitting, and
//! agent success aggregation.

pub mod agent;
pub mod chain;
pub mod demo;
pub mod difficulty;
pub mod extraction;
pub mod fitting;
pub mod synth;
pub mod trace;

pub use chain::{CogParams, CognitiveChain, CognitiveStep, CognitiveType};
pub use difficulty::{BaseDifficulties, ModelConfig};
pub use trace::{MotorStep, RawEvent, Trace};
