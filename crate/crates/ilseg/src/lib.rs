//! Class-incremental multi-organ segmentation on partially labeled datasets.
//!
//! A sequence of datasets, each annotating only the organs its builders cared
//! about, is aggregated into one multi-class segmentation model by staged
//! training: each stage adds new classes, loses access to the previous
//! annotations, and distills the previous model's knowledge instead. The
//! crate provides
//!
//! * [`labelspace`] — the staged class universe and the background-remodeling
//!   transforms that keep losses from punishing correct responses on classes
//!   the current ground truth marks as background,
//! * [`losses`] — remodeled cross-entropy and Dice segmentation losses,
//!   soft-target distillation, and the confidence-weighted corrective loss,
//!   all with analytic gradients,
//! * [`model`] — a compact encoder-decoder network with a per-stage
//!   expandable classifier head and frozen-teacher evaluation,
//! * [`phantom`] — a deterministic synthetic-anatomy generator producing
//!   sequential, partially labeled datasets with a controllable
//!   distribution-shift knob,
//! * [`metrics`] — Dice coefficient and 95th-percentile Hausdorff distance,
//! * [`engine`] — stage orchestration: curriculum runs, strategy selection,
//!   the shift study, and report rendering.
//!
//! The `examples/` directory demonstrates each capability end to end; the
//! `ilseg` binary exposes the same operations as subcommands.

pub mod engine;
pub mod error;
pub mod labelspace;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod phantom;

pub use error::{Error, ErrorClass, Result};
