//! MBR scoring of candidate sets and the utility-variance diagnostic.
//!
//! Each candidate annotation is scored by its average utility against every
//! hypothesis in the support set (the candidate set itself by default,
//! duplicates counted with multiplicity, self-utility included). The best
//! and worst candidates by that score become the pseudo-label pair for
//! dataset construction.
//!
//! Summation is plain left-to-right in declared support order, accumulated
//! in f64, so identical inputs produce bit-identical scores run to run.

use crate::types::Segment;
use crate::utility::{UtilityError, UtilityKind};
use crate::Annotation;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MbrError {
    #[error("empty candidate set for segment {segment_id}")]
    EmptyCandidateSet { segment_id: String },
    #[error("utility variance needs >= 2 candidates, segment {segment_id} has {count}")]
    TooFewCandidates { segment_id: String, count: usize },
    #[error("no scored sets to aggregate")]
    EmptyInput,
    #[error("segment {segment_id}: {source}")]
    Utility {
        segment_id: String,
        #[source]
        source: UtilityError,
    },
}

/// Candidate hypotheses for one segment plus the support set they are
/// scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub segment: Segment,
    pub candidates: Vec<Annotation>,
    pub support: Vec<Annotation>,
}

impl CandidateSet {
    /// Default construction: the support set is the candidate set itself,
    /// duplicates preserved.
    pub fn new(segment: Segment, candidates: Vec<Annotation>) -> Result<Self, MbrError> {
        if candidates.is_empty() {
            return Err(MbrError::EmptyCandidateSet { segment_id: segment.segment_id });
        }
        let support = candidates.clone();
        Ok(Self { segment, candidates, support })
    }

    pub fn with_support(
        segment: Segment,
        candidates: Vec<Annotation>,
        support: Vec<Annotation>,
    ) -> Result<Self, MbrError> {
        if candidates.is_empty() || support.is_empty() {
            return Err(MbrError::EmptyCandidateSet { segment_id: segment.segment_id });
        }
        Ok(Self { segment, candidates, support })
    }
}

/// A candidate set with per-candidate MBR scores and the argmax/argmin
/// selections, ties broken toward the lowest candidate index.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidateSet {
    pub base: CandidateSet,
    pub scores: Vec<f64>,
    pub best_index: usize,
    pub worst_index: usize,
}

impl ScoredCandidateSet {
    pub fn best(&self) -> &Annotation {
        &self.base.candidates[self.best_index]
    }

    pub fn worst(&self) -> &Annotation {
        &self.base.candidates[self.worst_index]
    }

    /// Population variance (divide by the candidate count) of this set's
    /// candidate scores.
    pub fn score_variance(&self) -> f64 {
        let n = self.scores.len() as f64;
        let mean = self.scores.iter().sum::<f64>() / n;
        self.scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n
    }
}

/// First index of the maximum / minimum value.
fn argmax_argmin(scores: &[f64]) -> (usize, usize) {
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    (best, worst)
}

/// Scores every candidate as its average utility over the support set.
pub fn mbr_score(set: CandidateSet, utility: UtilityKind) -> Result<ScoredCandidateSet, MbrError> {
    let translation_chars = set.segment.translation_chars();
    let support_size = set.support.len() as f64;
    let mut scores = Vec::with_capacity(set.candidates.len());
    for candidate in &set.candidates {
        let mut total = 0.0;
        for hypothesis in &set.support {
            let value = utility
                .score(candidate, hypothesis, translation_chars)
                .map_err(|source| MbrError::Utility {
                    segment_id: set.segment.segment_id.clone(),
                    source,
                })?;
            total += value.get();
        }
        let score = total / support_size;
        debug_assert!((0.0..=1.0 + 1e-9).contains(&score));
        scores.push(score.min(1.0));
    }
    let (best_index, worst_index) = argmax_argmin(&scores);
    Ok(ScoredCandidateSet { base: set, scores, best_index, worst_index })
}

/// Mean over segments of the population variance of candidate MBR scores.
///
/// Collapsing variance across iterations signals that the model's samples
/// have converged and further MBR distillation has little signal left.
pub fn utility_variance(scored: &[ScoredCandidateSet]) -> Result<f64, MbrError> {
    if scored.is_empty() {
        return Err(MbrError::EmptyInput);
    }
    let mut total = 0.0;
    for set in scored {
        if set.scores.len() < 2 {
            return Err(MbrError::TooFewCandidates {
                segment_id: set.base.segment.segment_id.clone(),
                count: set.scores.len(),
            });
        }
        total += set.score_variance();
    }
    Ok(total / scored.len() as f64)
}

/// One line of a candidates JSONL file: the raw completion texts sampled
/// for a segment, in sampling order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub segment_id: String,
    pub system_id: String,
    pub candidates: Vec<String>,
}

impl CandidateRecord {
    pub fn key(&self) -> String {
        format!("{}\u{1f}{}", self.segment_id, self.system_id)
    }
}

/// One line of a scored JSONL file: candidates plus their MBR scores and
/// the selected best/worst indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub segment_id: String,
    pub system_id: String,
    pub candidates: Vec<String>,
    pub scores: Vec<f64>,
    pub best_index: usize,
    pub worst_index: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ErrorSpan, Severity};

    fn segment(translation: &str) -> Segment {
        Segment {
            segment_id: "seg1".into(),
            system_id: "sysA".into(),
            source_lang: "en".into(),
            target_lang: "de".into(),
            source: "src".into(),
            translation: translation.into(),
        }
    }

    fn ann(spans: Vec<(usize, usize, Severity)>) -> Annotation {
        Annotation::new(spans.into_iter().map(|(s, e, v)| ErrorSpan::new(s, e, v)).collect())
    }

    /// Independent oracle: literal double loop over Eq-style average
    /// utility, left-to-right.
    pub(crate) fn mbr_oracle(set: &CandidateSet, utility: UtilityKind) -> Vec<f64> {
        let chars = set.segment.translation_chars();
        set.candidates
            .iter()
            .map(|c| {
                let mut total = 0.0;
                for s in &set.support {
                    total += utility.score(c, s, chars).unwrap().get();
                }
                total / set.support.len() as f64
            })
            .collect()
    }

    #[test]
    fn singleton_candidate_scores_one() {
        let e = ann(vec![(0, 3, Severity::Major)]);
        let set = CandidateSet::new(segment("abcdef"), vec![e]).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        assert_eq!(scored.scores, vec![1.0]);
        assert_eq!(scored.best_index, 0);
        assert_eq!(scored.worst_index, 0);
    }

    #[test]
    fn duplicates_counted_with_multiplicity() {
        // candidates = support = [E1, E1, E3] with u(E1, E3) = 0:
        // E1 scores (1 + 1 + 0)/3, E3 scores (0 + 0 + 1)/3.
        let e1 = ann(vec![(0, 3, Severity::Major)]);
        let e3 = ann(vec![]);
        let set =
            CandidateSet::new(segment("abcdef"), vec![e1.clone(), e1.clone(), e3]).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        assert_eq!(scored.scores, vec![2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(scored.best_index, 0, "argmax ties break to lowest index");
        assert_eq!(scored.worst_index, 2);
    }

    #[test]
    fn identical_candidates_saturate() {
        let e = ann(vec![(1, 4, Severity::Minor)]);
        let set = CandidateSet::new(segment("abcdef"), vec![e.clone(), e.clone(), e]).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        assert!(scored.scores.iter().all(|&s| s == 1.0));
        assert_eq!((scored.best_index, scored.worst_index), (0, 0));
    }

    #[test]
    fn matches_double_loop_oracle() {
        let candidates = vec![
            ann(vec![(0, 2, Severity::Major)]),
            ann(vec![(0, 2, Severity::Minor)]),
            ann(vec![(3, 5, Severity::Major)]),
            ann(vec![]),
            ann(vec![(0, 2, Severity::Major), (3, 5, Severity::Minor)]),
        ];
        let set = CandidateSet::new(segment("abcdefgh"), candidates).unwrap();
        let expected = mbr_oracle(&set, UtilityKind::SoftF1);
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        assert_eq!(scored.scores, expected, "exact match, no reordering");
    }

    #[test]
    fn tie_break_prefers_lowest_index_for_both() {
        // Two distinct annotations, symmetric utilities: all scores equal.
        let a = ann(vec![(0, 2, Severity::Major)]);
        let b = ann(vec![(3, 5, Severity::Major)]);
        let set = CandidateSet::new(segment("abcdef"), vec![a, b]).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        assert_eq!(scored.scores[0], scored.scores[1]);
        assert_eq!(scored.best_index, 0);
        assert_eq!(scored.worst_index, 0);
    }

    #[test]
    fn empty_candidate_set_is_an_error() {
        let err = CandidateSet::new(segment("abc"), vec![]).unwrap_err();
        assert_eq!(err, MbrError::EmptyCandidateSet { segment_id: "seg1".into() });
    }

    #[test]
    fn variance_of_identical_sets_is_zero() {
        let e = ann(vec![(0, 2, Severity::Major)]);
        let set = CandidateSet::new(segment("abcdef"), vec![e.clone(), e]).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        assert_eq!(utility_variance(&[scored]).unwrap(), 0.0);
    }

    #[test]
    fn variance_hand_computed_example() {
        // Scores [2/3, 2/3, 1/3]: population variance 2/81 = 0.0246913...
        let e1 = ann(vec![(0, 3, Severity::Major)]);
        let e3 = ann(vec![]);
        let set =
            CandidateSet::new(segment("abcdef"), vec![e1.clone(), e1.clone(), e3]).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        let v = utility_variance(&[scored]).unwrap();
        assert!((v - 2.0 / 81.0).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn variance_averages_over_segments() {
        let e1 = ann(vec![(0, 3, Severity::Major)]);
        let e3 = ann(vec![]);
        let spread =
            CandidateSet::new(segment("abcdef"), vec![e1.clone(), e1.clone(), e3]).unwrap();
        let flat = CandidateSet::new(segment("abcdef"), vec![e1.clone(), e1]).unwrap();
        let s1 = mbr_score(spread, UtilityKind::SoftF1).unwrap();
        let s2 = mbr_score(flat, UtilityKind::SoftF1).unwrap();
        let v1 = s1.score_variance();
        let v2 = s2.score_variance();
        let combined = utility_variance(&[s1, s2]).unwrap();
        assert!((combined - (v1 + v2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn variance_rejects_singleton_sets() {
        let e = ann(vec![]);
        let set = CandidateSet::new(segment("abc"), vec![e]).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        let err = utility_variance(&[scored]).unwrap_err();
        assert_eq!(err, MbrError::TooFewCandidates { segment_id: "seg1".into(), count: 1 });
    }

    #[test]
    fn permutation_covariance_of_scores() {
        let candidates = vec![
            ann(vec![(0, 2, Severity::Major)]),
            ann(vec![(2, 4, Severity::Minor)]),
            ann(vec![]),
            ann(vec![(0, 4, Severity::Major)]),
        ];
        let set = CandidateSet::new(segment("abcdefgh"), candidates.clone()).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();

        // Rotate by one: candidate i moves to position (i + 1) % n.
        let mut rotated = candidates.clone();
        rotated.rotate_right(1);
        let set2 = CandidateSet::new(segment("abcdefgh"), rotated).unwrap();
        let scored2 = mbr_score(set2, UtilityKind::SoftF1).unwrap();

        let n = candidates.len();
        for i in 0..n {
            let j = (i + 1) % n;
            assert!(
                (scored.scores[i] - scored2.scores[j]).abs() < 1e-12,
                "score {i} vs rotated {j}: {} vs {}",
                scored.scores[i],
                scored2.scores[j]
            );
        }
        // The selected best annotation is the same annotation by value
        // (the max here is unique).
        assert_eq!(scored.best(), scored2.best());
    }

    mod permutation_properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_candidates() -> impl Strategy<Value = Vec<Annotation>> {
            prop::collection::vec(
                prop::collection::vec((0usize..8, 1usize..4, prop::bool::ANY), 0..3),
                1..8,
            )
            .prop_map(|sets| {
                sets.into_iter()
                    .map(|raw| {
                        Annotation::new(
                            raw.into_iter()
                                .map(|(start, len, major)| {
                                    ErrorSpan::new(
                                        start,
                                        start + len,
                                        if major { Severity::Major } else { Severity::Minor },
                                    )
                                })
                                .collect(),
                        )
                    })
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn scores_covary_with_candidate_permutations(
                candidates in arb_candidates(),
                rotation in 0usize..8,
            ) {
                let translation = "xxxxxxxxxxxx";
                let set = CandidateSet::new(segment(translation), candidates.clone()).unwrap();
                let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();

                let n = candidates.len();
                let mut rotated = candidates;
                rotated.rotate_right(rotation % n);
                let set2 = CandidateSet::new(segment(translation), rotated).unwrap();
                let scored2 = mbr_score(set2, UtilityKind::SoftF1).unwrap();

                for i in 0..n {
                    let j = (i + rotation) % n;
                    prop_assert!(
                        (scored.scores[i] - scored2.scores[j]).abs() < 1e-12,
                        "score {} vs {}", scored.scores[i], scored2.scores[j]
                    );
                    prop_assert!((0.0..=1.0).contains(&scored.scores[i]));
                }
                // When the maximum is unique up to canonical equality, the
                // selected best annotation is permutation-invariant.
                let top = scored.scores[scored.best_index];
                let unique_best = scored
                    .scores
                    .iter()
                    .enumerate()
                    .filter(|&(_, &s)| (s - top).abs() < 1e-12)
                    .all(|(i, _)| scored.base.candidates[i] == *scored.best());
                if unique_best {
                    prop_assert_eq!(scored.best(), scored2.best());
                }
            }
        }
    }

    #[test]
    fn duplicating_best_in_support_never_decreases_its_score() {
        let candidates = vec![
            ann(vec![(0, 2, Severity::Major)]),
            ann(vec![(2, 4, Severity::Minor)]),
            ann(vec![]),
        ];
        let set = CandidateSet::new(segment("abcdef"), candidates.clone()).unwrap();
        let scored = mbr_score(set, UtilityKind::SoftF1).unwrap();
        let best = scored.best().clone();
        let before = scored.scores[scored.best_index];

        let mut support = candidates.clone();
        support.push(best.clone());
        let set2 = CandidateSet::with_support(segment("abcdef"), candidates, support).unwrap();
        let scored2 = mbr_score(set2, UtilityKind::SoftF1).unwrap();
        let after = scored2.scores[scored.best_index];
        assert!(after >= before - 1e-15, "duplicating the best shrank it: {before} -> {after}");
    }
}
