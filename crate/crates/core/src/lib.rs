//! Data model, statistics and evaluation machinery for time-lapse embryo
//! scoring.
//!
//! The crate is organised bottom-up:
//!
//! * [`cohort`] – embryo records, outcome labeling and dataset splits.
//! * [`sequence`] – raw time-lapse containers and model-ready frame sampling.
//! * [`augment`] – two-stage temporal and spatial augmentation.
//! * [`morpho`] – morphokinetic annotations and the surrogate rule scorer.
//! * [`stats`] – ROC/AUC, DeLong inference and Mann–Whitney tests.
//! * [`score`] – scored embryos and the [1.0, 9.9] score scale.
//! * [`experiments`] – cohort, subgroup, hold-out, morphokinetic and
//!   model-comparison reports.
//! * [`synth`] – deterministic synthetic clinics with rendered sequences.

pub mod augment;
pub mod cohort;
pub mod error;
pub mod experiments;
pub mod jsonl;
pub mod morpho;
pub mod score;
pub mod seed;
pub mod sequence;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
