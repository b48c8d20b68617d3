//! Deterministic batch toolkit for building geo-aligned image-text datasets
//! from OSM-style vector features, and for scoring multimodal models on a
//! single-choice benchmark.
//!
//! The pipeline runs as resumable stages over newline-delimited record files:
//!
//! 1. [`ingest`] — parse feature extracts, apply source filters, build a
//!    spatially indexed store.
//! 2. [`align`] — pick anchor features, derive square image extents,
//!    associate co-located features, run pluggable image filters.
//! 3. [`tags`] — key filtering (automatic rules + curated whitelist) and
//!    semantic balancing of dominant key-value pairs.
//! 4. [`caption`] / [`instruct`] — prompt assembly and batched calls to a
//!    provider-neutral chat endpoint to produce caption and instruction data.
//! 5. [`bench`] — shuffled multi-trial single-choice evaluation with
//!    per-dimension accuracy reporting.
//!
//! [`pipeline`] wires the stages together behind content-digest manifests;
//! the `vgi-align` binary is a thin CLI over it.

pub mod align;
pub mod bench;
pub mod caption;
pub mod chat;
pub mod geo;
pub mod ingest;
pub mod instruct;
pub mod pipeline;
pub mod rng;
pub mod spatial;
pub mod tags;
