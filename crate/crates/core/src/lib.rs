//! Self-distillation toolkit for error span detection (ESD) in machine
//! translation evaluation.
//!
//! The pipeline turns an unlabeled corpus of source/translation segments into
//! training datasets by sampling many candidate error annotations per segment
//! from an LLM, scoring each candidate by its average utility against the
//! other samples (minimum Bayes risk selection), and emitting the best/worst
//! hypotheses as SFT, DPO, or KTO examples. Fine-tuning itself happens in an
//! external trainer; this crate produces the datasets, the scores, and the
//! evaluation reports.
//!
//! Module map:
//!
//! - [`types`] — segments, severities, error spans, annotations in canonical
//!   form, and MQM-convention segment scores.
//! - [`jsonl`] — streaming JSONL IO for every file the pipeline exchanges.
//! - [`gemba`] — parser/renderer for the line-oriented error-span text format
//!   used for LLM prompts, completions, and dataset targets.
//! - [`utility`] — SoftF1 and exact-match F1 between two annotations.
//! - [`mbr`] — candidate-set scoring and the utility-variance diagnostic.
//! - [`generate`] — candidate generation backends: an HTTP chat-completions
//!   client and a deterministic, adaptive mock for closed-loop runs.
//! - [`distill`] — dataset construction branches and iteration bookkeeping.
//! - [`loss`] — closed-form reference calculators for SFT/DPO/KTO losses.
//! - [`metaeval`] — SPA, pairwise accuracy with tie calibration, corpus
//!   span F1, and permutation/bootstrap significance tests.
//! - [`prompt`] — prompt template registry and rendering.
//! - [`seed`] — stable seed derivation for reproducible sub-streams.

pub mod distill;
pub mod gemba;
pub mod generate;
pub mod jsonl;
pub mod loss;
pub mod mbr;
pub mod metaeval;
pub mod prompt;
pub mod seed;
pub mod types;
pub mod utility;

pub use types::{Annotation, AnnotationRecord, ErrorSpan, Segment, SegmentScore, Severity};
pub use utility::UtilityValue;
