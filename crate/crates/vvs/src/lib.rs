//! Suppression-weighted video embeddings for content-based video retrieval.
//!
//! Videos are represented as stacks of region-pooled frame features. Three
//! small trainable heads decide, per frame, how much each frame should
//! contribute to the single video-level embedding:
//!
//! - a **discrimination head** that drops "easy" filler frames outright,
//! - a **saliency head** that reads the video's self-similarity structure,
//! - a **guidance head** that softly gates frames against the video's
//!   rough overall topic.
//!
//! The product of the surviving weights drives a weighted average pool, so
//! database search is a single dot product per stored video while the
//! frame-level signal still shapes what got pooled.
//!
//! The crate is organized as a library with one thin CLI binary. Each major
//! capability has a runnable demo under `examples/`:
//!
//! ```text
//! cargo run --release --example synth_corpus      # generate a tiny labeled corpus
//! cargo run --release --example gradient_check    # finite-difference audit of the heads
//! cargo run --release --example train_pipeline    # short end-to-end training run
//! cargo run --release --example embed_and_search  # embed, store, query
//! cargo run --release --example evaluate_map      # tiered mAP evaluation
//! cargo run --release --example oracle_suppression# upper-bound suppression experiment
//! cargo run --release --example direct_weights    # query-conditioned weight experiment
//! cargo run --release --example speed_bench       # video-level vs frame-level cost
//! cargo run --release --example weight_curves     # per-frame weight CSV/SVG dump
//! cargo run --release --example ingest_activations# raw activation stacks -> features
//! ```
//!
//! The same flows are scriptable through the `vvs` binary (`vvs synth`,
//! `vvs train`, `vvs embed`, `vvs search`, `vvs eval`, `vvs bench`,
//! `vvs plot-weights`).

#[cfg(feature = "cli")]
pub mod cli;
pub mod ddm;
pub mod error;
pub mod eval;
pub mod features;
pub mod gemm;
pub mod graph;
pub mod io;
pub mod layers;
pub mod manifest;
pub mod nn;
pub mod tensor;
pub mod tgm;
pub mod trainer;
pub mod tsm;
pub mod video_graph;
pub mod video_ops;

pub use error::{Result, VvsError};
pub use tensor::Tensor;
