pub mod classifier;
pub mod detector;
pub mod ingest;
pub mod nn;
pub mod sps;
pub mod llm;
pub mod eval;
pub mod pipeline;
