//! Event-camera streams to LLM-compatible image representations.
//!
//! The crate covers the whole pipeline:
//!
//! - [`events_io`]: N-MNIST binary and CSV event parsing, dataset indexing,
//!   windowing and deterministic 5:1 splits.
//! - [`representation`]: Tencode frames, hand-crafted event frames and PNG export.
//! - [`generator`]: the encoder-decoder network (MBConv / Fused-MBConv stages)
//!   mapping a Tencode frame to a 3-channel representation, plus checkpoints.
//! - [`losses`]: word-set Jaccard semantic loss, Sobel structural fidelity loss
//!   and their weighted combination.
//! - [`llm_client`]: captioning / recognition over HTTP, mock and replay backends.
//! - [`trainer`]: self-supervised training against a frozen LLM backend.
//! - [`eval_harness`]: zero-shot recognition runs and comparison reports.
//!
//! [`autograd`] is the small reverse-mode engine the generator and trainer run on.

pub mod autograd;
pub mod eval_harness;
pub mod events_io;
pub mod generator;
pub mod llm_client;
pub mod losses;
pub mod representation;
pub mod trainer;

mod hashing;

pub use events_io::{DatasetIndex, Event, EventStream, Sample};
pub use generator::{Generator, GeneratorConfig};
pub use losses::{DualLossBreakdown, LossWeights, WordSet};
pub use representation::{RepImage, RepKind, TencodeFrame};
