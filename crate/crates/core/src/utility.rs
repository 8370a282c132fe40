//! Utility functions between two annotations.
//!
//! `soft_f1` is the character-level, severity-weighted F1 used both as the
//! MBR utility and as the span-level evaluation metric. Per character
//! position the prediction contributes the weight of the strongest predicted
//! severity covering it (minor = 0.5, major = 1.0); the reference likewise;
//! match credit at a position is the minimum of the two weights. Precision
//! is matched credit over predicted weight, recall over reference weight,
//! and the value is their harmonic mean. Two empty annotations agree
//! perfectly (1.0); exactly one empty scores 0.0.
//!
//! The implementation sweeps span boundaries instead of materializing one
//! cell per character, but accumulates exactly the same sums a per-character
//! array would (all weights are multiples of 0.5, so both routes are exact
//! in f64 and agree bit for bit).

use crate::types::{Annotation, ErrorSpan, InvalidSpan, Severity};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

/// SoftF1 per-character weight of a minor span.
pub const SOFT_MINOR_WEIGHT: f64 = 0.5;
/// SoftF1 per-character weight of a major span.
pub const SOFT_MAJOR_WEIGHT: f64 = 1.0;

/// A utility value in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UtilityValue(f64);

impl UtilityValue {
    /// Wraps a raw value, saturating float dust just outside `[0, 1]`.
    pub fn new(value: f64) -> Self {
        debug_assert!(
            (-1e-9..=1.0 + 1e-9).contains(&value),
            "utility far out of range: {value}"
        );
        Self(value.clamp(0.0, 1.0))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum UtilityError {
    #[error(transparent)]
    InvalidSpan(#[from] InvalidSpan),
    #[error("empty input: nothing to aggregate")]
    EmptyInput,
}

fn soft_weight(severity: Severity) -> f64 {
    match severity {
        Severity::Minor => SOFT_MINOR_WEIGHT,
        Severity::Major => SOFT_MAJOR_WEIGHT,
    }
}

/// Per-character weight of the strongest severity covering `position`.
/// Overlapping spans contribute the maximum weight, never the sum.
fn weight_at(spans: &[ErrorSpan], position: usize) -> f64 {
    let mut weight = 0.0;
    for span in spans {
        if span.start <= position && position < span.end {
            weight = f64::max(weight, soft_weight(span.severity));
        }
    }
    weight
}

/// Character-level severity-weighted F1 between two annotations over a
/// translation of `translation_chars` Unicode scalar values.
pub fn soft_f1(
    pred: &Annotation,
    reference: &Annotation,
    translation_chars: usize,
) -> Result<UtilityValue, UtilityError> {
    for span in pred.spans().iter().chain(reference.spans()) {
        span.validate(translation_chars)?;
    }
    match (pred.is_empty(), reference.is_empty()) {
        (true, true) => return Ok(UtilityValue::new(1.0)),
        (true, false) | (false, true) => return Ok(UtilityValue::new(0.0)),
        _ => {}
    }

    // Coverage is piecewise constant between span boundaries; sweep the
    // boundary set and weight each piece by its length. Lengths multiply
    // weights that are multiples of 0.5, so each piece's contribution equals
    // the per-character sum exactly.
    let mut cuts = BTreeSet::new();
    for span in pred.spans().iter().chain(reference.spans()) {
        cuts.insert(span.start);
        cuts.insert(span.end);
    }
    let cuts: Vec<usize> = cuts.into_iter().collect();

    let mut pred_total = 0.0;
    let mut ref_total = 0.0;
    let mut match_total = 0.0;
    for window in cuts.windows(2) {
        let (piece_start, piece_end) = (window[0], window[1]);
        let piece_len = (piece_end - piece_start) as f64;
        let p = weight_at(pred.spans(), piece_start);
        let r = weight_at(reference.spans(), piece_start);
        pred_total += p * piece_len;
        ref_total += r * piece_len;
        match_total += f64::min(p, r) * piece_len;
    }

    Ok(UtilityValue::new(f1_from_sums(match_total, pred_total, ref_total)))
}

/// Shared final step: precision/recall from credit sums, harmonic mean.
/// Public so independent recomputations combine sums identically.
pub fn f1_from_sums(match_total: f64, pred_total: f64, ref_total: f64) -> f64 {
    let precision = if pred_total > 0.0 { match_total / pred_total } else { 0.0 };
    let recall = if ref_total > 0.0 { match_total / ref_total } else { 0.0 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Strict span-level F1: a predicted span is a true positive iff
/// `(start, end, severity)` match a reference span exactly. Categories are
/// ignored, consistent with annotation equality semantics.
pub fn exact_f1(pred: &Annotation, reference: &Annotation) -> UtilityValue {
    match (pred.is_empty(), reference.is_empty()) {
        (true, true) => return UtilityValue::new(1.0),
        (true, false) | (false, true) => return UtilityValue::new(0.0),
        _ => {}
    }
    let keys = |a: &Annotation| -> BTreeSet<(usize, usize, Severity)> {
        a.spans().iter().map(|s| (s.start, s.end, s.severity)).collect()
    };
    let pred_keys = keys(pred);
    let ref_keys = keys(reference);
    let tp = pred_keys.intersection(&ref_keys).count() as f64;
    let precision = tp / pred_keys.len() as f64;
    let recall = tp / ref_keys.len() as f64;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    UtilityValue::new(f1)
}

/// Corpus-level aggregation: unweighted arithmetic mean over segments.
pub fn corpus_aggregate(per_segment: &[UtilityValue]) -> Result<UtilityValue, UtilityError> {
    if per_segment.is_empty() {
        return Err(UtilityError::EmptyInput);
    }
    let sum: f64 = per_segment.iter().map(|v| v.get()).sum();
    Ok(UtilityValue::new(sum / per_segment.len() as f64))
}

/// Selectable utility function for MBR scoring and bootstrap statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    #[default]
    SoftF1,
    ExactF1,
}

impl UtilityKind {
    pub fn score(
        self,
        pred: &Annotation,
        reference: &Annotation,
        translation_chars: usize,
    ) -> Result<UtilityValue, UtilityError> {
        match self {
            UtilityKind::SoftF1 => soft_f1(pred, reference, translation_chars),
            UtilityKind::ExactF1 => {
                // Bounds still checked so both kinds share the contract.
                for span in pred.spans().iter().chain(reference.spans()) {
                    span.validate(translation_chars)?;
                }
                Ok(exact_f1(pred, reference))
            }
        }
    }
}
