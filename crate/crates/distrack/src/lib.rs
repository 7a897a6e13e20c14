//! Distractor-aware transparent-object tracking at desk scale.
//!
//! The crate bundles four things that normally live in separate repos:
//!
//! - a procedural generator of annotated transparent-object sequences
//!   ([`seqgen`]), with per-frame boxes and masks for the target and an
//!   optional distractor;
//! - a tracking network built from an image encoder, a distractor-aware
//!   attention branch, a pose-aware attention branch, a corner-based
//!   localization head and a score prediction module ([`model`]), written
//!   on a small reverse-mode tape ([`nn`]) so every loss is gradient-checked;
//! - the online tracking loop with score-gated template management
//!   ([`tracker`]) and its two-phase training recipe ([`training`]);
//! - a one-pass evaluation toolkit ([`evalkit`]) producing success and
//!   precision curves, AUC numbers, CSV tables and plots.
//!
//! Start with the runnable examples (`cargo run --release --example ...`)
//! or the `distrack` binary, which exposes `generate`, `train`, `track`,
//! `eval` and `ablation` subcommands.

pub mod cli;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod img;
pub mod model;
pub mod nn;
pub mod seqgen;
pub mod tracker;
pub mod training;

pub use error::{Error, Result};
pub use geom::BoundingBox;
pub use img::Image;
