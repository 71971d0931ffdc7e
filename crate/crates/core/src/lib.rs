pub mod context_memory;
pub mod engine;
pub mod error;
pub mod harness;
pub mod retriever;
pub mod span_divider;
pub mod span_indexer;
pub mod synth;
pub mod trace;
pub mod tri_attention;

pub use error::{LtriError, Result};
