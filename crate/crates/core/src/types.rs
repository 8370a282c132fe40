//! Core domain types: segments, error spans, annotations, and segment scores.
//!
//! Span offsets are Unicode scalar-value indices into the translation
//! (`char` positions, not bytes), half-open `[start, end)`. Byte offsets
//! would silently break on multibyte scripts, and the corpora this tooling
//! targets include CJK translation directions.
//!
//! [`Annotation`] is canonical by construction: spans sorted by
//! `(start, end, severity, category)` with exact duplicates removed. Every
//! constructor and deserializer normalizes, so two annotations covering the
//! same errors compare equal regardless of the order they were written in.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// MQM penalty weight for a minor error span.
pub const MINOR_WEIGHT: f64 = 1.0;
/// MQM penalty weight for a major error span.
pub const MAJOR_WEIGHT: f64 = 5.0;
/// Per-segment cap on the accumulated MQM penalty.
pub const SEGMENT_PENALTY_CAP: f64 = 25.0;

/// A source/translation pair under evaluation.
///
/// `(segment_id, system_id)` is the corpus key: the same source segment
/// translated by two MT systems yields two `Segment`s sharing `segment_id`.
/// An empty `translation` is degenerate but legal input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub system_id: String,
    /// BCP-47 language tag of the source text.
    pub source_lang: String,
    /// BCP-47 language tag of the translation.
    pub target_lang: String,
    pub source: String,
    pub translation: String,
}

impl Segment {
    /// Corpus key: unique within one segments file.
    pub fn key(&self) -> String {
        format!("{}\u{1f}{}", self.segment_id, self.system_id)
    }

    /// Translation length in Unicode scalar values.
    pub fn translation_chars(&self) -> usize {
        self.translation.chars().count()
    }

    /// Translation direction, e.g. `"en-de"`.
    pub fn direction(&self) -> String {
        format!("{}-{}", self.source_lang, self.target_lang)
    }
}

/// Error severity. The set is closed: annotation schemes with a "critical"
/// class are mapped to `Major` at parse time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Minor,
    Major,
}

impl Severity {
    /// MQM penalty weight used by [`segment_score`].
    pub fn mqm_weight(self) -> f64 {
        match self {
            Severity::Minor => MINOR_WEIGHT,
            Severity::Major => MAJOR_WEIGHT,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Severity::Minor => "minor",
            Severity::Major => "major",
        }
    }

    /// Lenient label lookup: case-insensitive, with "critical" mapped to
    /// `Major`. Returns the mapped severity and whether an alias fired.
    pub fn from_label(label: &str) -> Option<(Severity, bool)> {
        let lower = label.trim().to_lowercase();
        match lower.as_str() {
            "minor" => Some((Severity::Minor, label != "minor")),
            "major" => Some((Severity::Major, label != "major")),
            "critical" => Some((Severity::Major, true)),
            _ => None,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl<'de> Deserialize<'de> for Severity {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let raw = String::deserialize(deserializer)?;
        Severity::from_label(&raw)
            .map(|(sev, _)| sev)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown severity label {raw:?}")))
    }
}

/// A span offset violates the bounds of its translation.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid span [{start}, {end}) for translation of {translation_chars} chars")]
pub struct InvalidSpan {
    pub start: usize,
    pub end: usize,
    pub translation_chars: usize,
}

/// One annotated error span over a translation.
///
/// Offsets are `char` indices, half-open; `start < end` always, so the
/// covered substring is non-empty. Field order matters: the derived `Ord`
/// is the canonical sort key `(start, end, severity, category)`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ErrorSpan {
    pub start: usize,
    pub end: usize,
    pub severity: Severity,
    /// MQM category path such as `accuracy/mistranslation`. Carried through
    /// the pipeline but ignored by utilities, and by annotation equality
    /// whenever either side lacks it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl ErrorSpan {
    pub fn new(start: usize, end: usize, severity: Severity) -> Self {
        Self { start, end, severity, category: None }
    }

    pub fn with_category(
        start: usize,
        end: usize,
        severity: Severity,
        category: impl Into<String>,
    ) -> Self {
        Self { start, end, severity, category: Some(category.into()) }
    }

    /// Checks `0 <= start < end <= translation_chars`.
    pub fn validate(&self, translation_chars: usize) -> Result<(), InvalidSpan> {
        if self.start < self.end && self.end <= translation_chars {
            Ok(())
        } else {
            Err(InvalidSpan {
                start: self.start,
                end: self.end,
                translation_chars,
            })
        }
    }

    /// Position+severity match; categories compared only when both present.
    fn matches_lenient(&self, other: &ErrorSpan) -> bool {
        self.start == other.start
            && self.end == other.end
            && self.severity == other.severity
            && match (&self.category, &other.category) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            }
    }
}

/// A set of error spans over one translation; empty means "no error".
///
/// Always in canonical form (sorted, deduplicated). Derived equality is
/// strict structural equality on the canonical form; the Algorithm-style
/// pseudo-label comparison that tolerates missing categories is
/// [`Annotation::matches`].
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "Vec<ErrorSpan>", into = "Vec<ErrorSpan>")]
pub struct Annotation {
    spans: Vec<ErrorSpan>,
}

impl Annotation {
    /// Builds a canonical annotation: sorts by `(start, end, severity,
    /// category)` and drops exact duplicates. Idempotent.
    pub fn new(mut spans: Vec<ErrorSpan>) -> Self {
        spans.sort();
        spans.dedup();
        Self { spans }
    }

    pub fn empty() -> Self {
        Self { spans: Vec::new() }
    }

    pub fn spans(&self) -> &[ErrorSpan] {
        &self.spans
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    /// Validates every span against a translation of the given char length,
    /// returning the (already canonical) annotation.
    pub fn validated(self, translation_chars: usize) -> Result<Self, InvalidSpan> {
        for span in &self.spans {
            span.validate(translation_chars)?;
        }
        Ok(self)
    }

    /// Pseudo-label equality: spans compared pairwise in canonical order on
    /// `(start, end, severity)`, with categories compared only when both
    /// sides carry one. This is the `E+ != E-` test used when deciding
    /// whether a best/worst candidate pair is informative.
    pub fn matches(&self, other: &Annotation) -> bool {
        self.spans.len() == other.spans.len()
            && self
                .spans
                .iter()
                .zip(&other.spans)
                .all(|(a, b)| a.matches_lenient(b))
    }
}

impl From<Vec<ErrorSpan>> for Annotation {
    fn from(spans: Vec<ErrorSpan>) -> Self {
        Annotation::new(spans)
    }
}

impl From<Annotation> for Vec<ErrorSpan> {
    fn from(annotation: Annotation) -> Self {
        annotation.spans
    }
}

impl FromIterator<ErrorSpan> for Annotation {
    fn from_iter<I: IntoIterator<Item = ErrorSpan>>(iter: I) -> Self {
        Annotation::new(iter.into_iter().collect())
    }
}

/// Canonicalizes an annotation after validating it against a translation of
/// `translation_chars` Unicode scalar values.
pub fn canonicalize(
    annotation: Annotation,
    translation_chars: usize,
) -> Result<Annotation, InvalidSpan> {
    // `Annotation` is canonical by construction; only validation remains.
    annotation.validated(translation_chars)
}

/// MQM-convention sentence-level score: 0 is perfect, more negative is
/// worse, floored at -25 by the per-segment penalty cap.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentScore(f64);

impl SegmentScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Scores one annotation: `-min(25, sum of severity weights)` with
/// minor = 1 and major = 5.
pub fn segment_score(annotation: &Annotation) -> SegmentScore {
    let mut total = 0.0;
    for span in annotation.spans() {
        total += span.severity.mqm_weight();
    }
    SegmentScore(-total.min(SEGMENT_PENALTY_CAP))
}

/// One line of an annotations JSONL file: the spans predicted (or humanly
/// annotated) for a `(segment_id, system_id)` pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub segment_id: String,
    pub system_id: String,
    pub spans: Annotation,
}

impl AnnotationRecord {
    pub fn key(&self) -> String {
        format!("{}\u{1f}{}", self.segment_id, self.system_id)
    }
}
