//! Topic-switching dialogue system: dialogue-graph preprocessing, a byte-level
//! BPE tokenizer, a small transformer with reverse-mode autodiff, the
//! curriculum trainer, the chat runtime and the evaluation harness.

pub mod calibrate;
pub mod dialogue_graph;
pub mod eval;
pub mod model;
pub mod par;
pub mod runtime;
pub mod synthetic;
pub mod tokenizer;
pub mod trainer;
