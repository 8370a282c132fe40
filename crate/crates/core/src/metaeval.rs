//! Meta-evaluation of error-span detectors against gold annotations.
//!
//! Three granularities, matching how shared-task results are reported:
//!
//! - system level: Soft Pairwise Accuracy (SPA) between the metric's and
//!   the humans' system rankings, built from one-sided paired permutation
//!   p-values per system pair;
//! - sentence level: pairwise accuracy with tie calibration, maximizing
//!   accuracy over a metric tie threshold ε;
//! - span level: corpus SoftF1 / exact F1 against gold spans.
//!
//! Significance machinery: the PERM-BOTH test (swap two metrics' outputs
//! per segment) for SPA and tie-calibrated accuracy, paired bootstrap
//! resampling for corpus SoftF1. All empirical p-values use add-one
//! smoothing, so p ∈ (0, 1] and a zero is never reported. Resampling
//! derives one RNG stream per resample index from the master seed, so
//! results are bit-identical regardless of worker count.

use crate::seed::derive_seed;
use crate::types::{segment_score, AnnotationRecord, InvalidSpan, Segment};
use crate::utility::{corpus_aggregate, UtilityError, UtilityKind, UtilityValue};
use crate::Annotation;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetaEvalError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("need at least 2 systems, {direction} has {systems}")]
    TooFewSystems { direction: String, systems: usize },
    #[error("no comparable pairs: every group has fewer than 2 entries")]
    NoPairs,
    #[error("missing entry for system {system:?}, segment {segment:?}")]
    MissingEntry { system: String, segment: String },
    #[error("duplicate record for segment {segment_id:?}, system {system_id:?}")]
    DuplicateRecord { segment_id: String, system_id: String },
    #[error("record for segment {segment_id:?}, system {system_id:?} matches no segment")]
    UnknownRecord { segment_id: String, system_id: String },
    #[error("annotation for segment {segment_id:?}, system {system_id:?} is invalid: {source}")]
    InvalidAnnotation {
        segment_id: String,
        system_id: String,
        #[source]
        source: InvalidSpan,
    },
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error("empty input")]
    EmptyInput,
}

// ---------------------------------------------------------------------------
// Score matrix
// ---------------------------------------------------------------------------

/// Dense matrix of sentence-level scores, rows = systems, columns =
/// segments (source items). Every entry must be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    systems: Vec<String>,
    segments: Vec<String>,
    values: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(
        systems: Vec<String>,
        segments: Vec<String>,
        values: Vec<f64>,
    ) -> Result<Self, MetaEvalError> {
        if values.len() != systems.len() * segments.len() {
            return Err(MetaEvalError::ShapeMismatch {
                context: format!(
                    "{} values for {} systems x {} segments",
                    values.len(),
                    systems.len(),
                    segments.len()
                ),
            });
        }
        Ok(Self { systems, segments, values })
    }

    pub fn systems(&self) -> &[String] {
        &self.systems
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn n_systems(&self) -> usize {
        self.systems.len()
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    pub fn value(&self, system: usize, segment: usize) -> f64 {
        self.values[system * self.segments.len() + segment]
    }

    /// Row of one system across all segments.
    pub fn system_row(&self, system: usize) -> &[f64] {
        let n = self.segments.len();
        &self.values[system * n..(system + 1) * n]
    }

    /// System-level scores: unweighted mean over segments.
    pub fn system_means(&self) -> Vec<f64> {
        (0..self.systems.len())
            .map(|i| {
                let row = self.system_row(i);
                row.iter().sum::<f64>() / row.len() as f64
            })
            .collect()
    }

    fn same_shape(&self, other: &ScoreMatrix) -> Result<(), MetaEvalError> {
        if self.systems != other.systems || self.segments != other.segments {
            return Err(MetaEvalError::ShapeMismatch {
                context: "matrices must share systems and segments".into(),
            });
        }
        Ok(())
    }
}

/// Sentence score matrix plus per-system means.
#[derive(Clone, Debug, Serialize)]
pub struct SystemScores {
    pub matrix: ScoreMatrix,
    pub system_means: Vec<(String, f64)>,
}

/// Builds the score matrix from one annotation record per
/// `(system, segment)`. Systems and segments are ordered lexicographically
/// so the result is independent of record order; coverage must be complete.
pub fn system_scores(records: &[AnnotationRecord]) -> Result<SystemScores, MetaEvalError> {
    if records.is_empty() {
        return Err(MetaEvalError::EmptyInput);
    }
    let mut by_key: HashMap<(&str, &str), f64> = HashMap::new();
    let mut systems: BTreeSet<&str> = BTreeSet::new();
    let mut segments: BTreeSet<&str> = BTreeSet::new();
    for record in records {
        systems.insert(&record.system_id);
        segments.insert(&record.segment_id);
        let previous = by_key.insert(
            (record.system_id.as_str(), record.segment_id.as_str()),
            segment_score(&record.spans).value(),
        );
        if previous.is_some() {
            return Err(MetaEvalError::DuplicateRecord {
                segment_id: record.segment_id.clone(),
                system_id: record.system_id.clone(),
            });
        }
    }
    let systems: Vec<String> = systems.into_iter().map(String::from).collect();
    let segments: Vec<String> = segments.into_iter().map(String::from).collect();
    let mut values = Vec::with_capacity(systems.len() * segments.len());
    for system in &systems {
        for segment in &segments {
            match by_key.get(&(system.as_str(), segment.as_str())) {
                Some(&score) => values.push(score),
                None => {
                    return Err(MetaEvalError::MissingEntry {
                        system: system.clone(),
                        segment: segment.clone(),
                    })
                }
            }
        }
    }
    let matrix = ScoreMatrix::new(systems, segments, values)?;
    let system_means =
        matrix.systems.iter().cloned().zip(matrix.system_means()).collect();
    Ok(SystemScores { matrix, system_means })
}

// ---------------------------------------------------------------------------
// SPA
// ---------------------------------------------------------------------------

/// One-sided paired permutation p-value that the first system beats the
/// second, from per-segment score differences and shared sign-flip
/// vectors. Reusing identical flip vectors across score sources makes
/// equal inputs give equal p-values exactly.
fn paired_permutation_p(diffs: &[f64], flips: &[Vec<bool>]) -> f64 {
    let n = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / n;
    let mut count = 0usize;
    for flip in flips {
        let mut total = 0.0;
        for (d, &flipped) in diffs.iter().zip(flip) {
            total += if flipped { -d } else { *d };
        }
        if total / n >= observed {
            count += 1;
        }
    }
    (1 + count) as f64 / (1 + flips.len()) as f64
}

/// Soft Pairwise Accuracy: mean over unordered system pairs of
/// `1 - |p_metric - p_human|`, where each p is the one-sided paired
/// permutation p-value that the first system beats the second under that
/// score source. Identical matrices give exactly 1.0.
pub fn spa(
    metric: &ScoreMatrix,
    human: &ScoreMatrix,
    permutations: usize,
    seed: u64,
) -> Result<f64, MetaEvalError> {
    metric.same_shape(human)?;
    let n_systems = metric.n_systems();
    if n_systems < 2 {
        return Err(MetaEvalError::TooFewSystems {
            direction: "score matrix".into(),
            systems: n_systems,
        });
    }
    let n_segments = metric.n_segments();
    if n_segments == 0 {
        return Err(MetaEvalError::EmptyInput);
    }

    let pairs: Vec<(usize, usize)> = (0..n_systems)
        .flat_map(|a| (a + 1..n_systems).map(move |b| (a, b)))
        .collect();

    // Collected in pair order and folded sequentially: a parallel f64
    // reduction would make the result depend on the worker tree shape.
    let per_pair: Vec<f64> = pairs
        .par_iter()
        .enumerate()
        .map(|(pair_index, &(a, b))| {
            let flips: Vec<Vec<bool>> = (0..permutations)
                .map(|r| {
                    let stream = derive_seed(seed, &["spa"], &[pair_index as u64, r as u64]);
                    let mut rng = ChaCha8Rng::seed_from_u64(stream);
                    (0..n_segments).map(|_| rng.random::<bool>()).collect()
                })
                .collect();
            // Sign flips are iid per position, so sorting the differences
            // changes nothing statistically while making the p-value exactly
            // invariant to segment column order.
            let mut metric_diffs: Vec<f64> =
                (0..n_segments).map(|k| metric.value(a, k) - metric.value(b, k)).collect();
            let mut human_diffs: Vec<f64> =
                (0..n_segments).map(|k| human.value(a, k) - human.value(b, k)).collect();
            metric_diffs.sort_by(f64::total_cmp);
            human_diffs.sort_by(f64::total_cmp);
            let p_metric = paired_permutation_p(&metric_diffs, &flips);
            let p_human = paired_permutation_p(&human_diffs, &flips);
            1.0 - (p_metric - p_human).abs()
        })
        .collect();
    Ok(per_pair.iter().sum::<f64>() / pairs.len() as f64)
}

// ---------------------------------------------------------------------------
// Pairwise accuracy with tie calibration
// ---------------------------------------------------------------------------

/// Result of tie calibration: the maximizing accuracy and its threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TieCalibration {
    pub accuracy: f64,
    pub epsilon: f64,
    pub pairs: usize,
}

/// Pairwise accuracy with tie calibration over grouped sentence scores.
///
/// Pairs are formed within each group (same source item, different
/// systems). Human ties are exact equality; metric ties are `|Δ| <= ε`. A
/// pair counts as correct when it is a correctly predicted tie, or a
/// non-tie the metric orders like the humans. Returns the maximum accuracy
/// over ε ∈ {0} ∪ {distinct |Δ|}, smallest maximizer first; because the
/// tie test is inclusive, those candidates cover every achievable
/// classification.
pub fn acc_eq_star<G: Eq + std::hash::Hash>(
    metric: &[f64],
    human: &[f64],
    groups: &[G],
) -> Result<TieCalibration, MetaEvalError> {
    if metric.len() != human.len() || metric.len() != groups.len() {
        return Err(MetaEvalError::ShapeMismatch {
            context: format!(
                "{} metric scores, {} human scores, {} group labels",
                metric.len(),
                human.len(),
                groups.len()
            ),
        });
    }
    let mut group_members: HashMap<&G, Vec<usize>> = HashMap::new();
    let mut group_order: Vec<&G> = Vec::new();
    for (index, group) in groups.iter().enumerate() {
        let members = group_members.entry(group).or_default();
        if members.is_empty() {
            group_order.push(group);
        }
        members.push(index);
    }

    // (|metric delta|, concordant direction?, human tie?)
    let mut pair_stats: Vec<(f64, bool, bool)> = Vec::new();
    for group in group_order {
        let members = &group_members[group];
        for (position, &a) in members.iter().enumerate() {
            for &b in &members[position + 1..] {
                let delta = metric[a] - metric[b];
                let human_tie = human[a] == human[b];
                let concordant = !human_tie
                    && ((delta > 0.0 && human[a] > human[b])
                        || (delta < 0.0 && human[a] < human[b]));
                pair_stats.push((delta.abs(), concordant, human_tie));
            }
        }
    }
    if pair_stats.is_empty() {
        return Err(MetaEvalError::NoPairs);
    }

    pair_stats.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite scores"));
    let total = pair_stats.len();
    // tie_prefix[k]: human ties among the k smallest-|Δ| pairs;
    // concordant_suffix[k]: concordant pairs among pairs[k..].
    let mut tie_prefix = vec![0usize; total + 1];
    let mut concordant_suffix = vec![0usize; total + 1];
    for (k, &(_, _, human_tie)) in pair_stats.iter().enumerate() {
        tie_prefix[k + 1] = tie_prefix[k] + usize::from(human_tie);
    }
    for (k, &(_, concordant, _)) in pair_stats.iter().enumerate().rev() {
        concordant_suffix[k] = concordant_suffix[k + 1] + usize::from(concordant);
    }

    let mut candidates: Vec<f64> = vec![0.0];
    candidates.extend(pair_stats.iter().map(|&(d, _, _)| d));
    candidates.dedup();

    let mut best = TieCalibration { accuracy: -1.0, epsilon: 0.0, pairs: total };
    for epsilon in candidates {
        // First pair with |Δ| strictly above ε.
        let boundary = pair_stats.partition_point(|&(d, _, _)| d <= epsilon);
        let correct = tie_prefix[boundary] + concordant_suffix[boundary];
        let accuracy = correct as f64 / total as f64;
        if accuracy > best.accuracy {
            best = TieCalibration { accuracy, epsilon, pairs: total };
        }
    }
    Ok(best)
}

/// Tie calibration over score matrices: pairs are within each segment
/// column, across systems.
pub fn acc_eq_star_matrix(
    metric: &ScoreMatrix,
    human: &ScoreMatrix,
) -> Result<TieCalibration, MetaEvalError> {
    metric.same_shape(human)?;
    let mut metric_flat = Vec::new();
    let mut human_flat = Vec::new();
    let mut groups = Vec::new();
    for segment in 0..metric.n_segments() {
        for system in 0..metric.n_systems() {
            metric_flat.push(metric.value(system, segment));
            human_flat.push(human.value(system, segment));
            groups.push(segment);
        }
    }
    acc_eq_star(&metric_flat, &human_flat, &groups)
}

// ---------------------------------------------------------------------------
// PERM-BOTH
// ---------------------------------------------------------------------------

/// Meta-metric whose difference the PERM-BOTH test evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMetric {
    Spa { permutations: usize },
    AccEqStar,
}

fn meta_metric_value(
    meta: MetaMetric,
    metric: &ScoreMatrix,
    human: &ScoreMatrix,
    inner_seed: u64,
) -> Result<f64, MetaEvalError> {
    match meta {
        MetaMetric::Spa { permutations } => spa(metric, human, permutations, inner_seed),
        MetaMetric::AccEqStar => Ok(acc_eq_star_matrix(metric, human)?.accuracy),
    }
}

/// Swaps whole segment columns between two matrices where `flips` is true.
fn swap_columns(a: &ScoreMatrix, b: &ScoreMatrix, flips: &[bool]) -> (ScoreMatrix, ScoreMatrix) {
    let mut a_swapped = a.clone();
    let mut b_swapped = b.clone();
    let n_segments = a.n_segments();
    for system in 0..a.n_systems() {
        for (segment, &flip) in flips.iter().enumerate() {
            if flip {
                let index = system * n_segments + segment;
                std::mem::swap(&mut a_swapped.values[index], &mut b_swapped.values[index]);
            }
        }
    }
    (a_swapped, b_swapped)
}

/// PERM-BOTH significance test for the difference of a meta-metric between
/// two metrics' outputs: per resample, each segment's outputs are swapped
/// between metric A and metric B with probability 1/2 and the meta-metric
/// difference recomputed. Two-sided, add-one smoothed.
pub fn perm_both_test(
    metric_a: &ScoreMatrix,
    metric_b: &ScoreMatrix,
    human: &ScoreMatrix,
    meta: MetaMetric,
    permutations: usize,
    seed: u64,
) -> Result<f64, MetaEvalError> {
    metric_a.same_shape(metric_b)?;
    metric_a.same_shape(human)?;
    let observed_seed = derive_seed(seed, &["perm-both", "observed"], &[]);
    let observed = meta_metric_value(meta, metric_a, human, observed_seed)?
        - meta_metric_value(meta, metric_b, human, observed_seed)?;

    let n_segments = metric_a.n_segments();
    let exceeding = (0..permutations)
        .into_par_iter()
        .map(|resample| -> Result<usize, MetaEvalError> {
            let stream = derive_seed(seed, &["perm-both", "flip"], &[resample as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let flips: Vec<bool> = (0..n_segments).map(|_| rng.random::<bool>()).collect();
            let (a_swapped, b_swapped) = swap_columns(metric_a, metric_b, &flips);
            let inner_seed = derive_seed(seed, &["perm-both", "inner"], &[resample as u64]);
            let delta = meta_metric_value(meta, &a_swapped, human, inner_seed)?
                - meta_metric_value(meta, &b_swapped, human, inner_seed)?;
            Ok(usize::from(delta.abs() >= observed.abs()))
        })
        .try_reduce(|| 0, |x, y| Ok(x + y))?;
    Ok((1 + exceeding) as f64 / (1 + permutations) as f64)
}

// ---------------------------------------------------------------------------
// Paired bootstrap
// ---------------------------------------------------------------------------

/// Paired bootstrap resampling over segments for a corpus-level utility
/// statistic (A claimed better): one-sided p-value that B matches or beats
/// A, ties counting for B.
pub fn paired_bootstrap(
    pred_a: &[Annotation],
    pred_b: &[Annotation],
    gold: &[Annotation],
    translation_chars: &[usize],
    statistic: UtilityKind,
    resamples: usize,
    seed: u64,
) -> Result<f64, MetaEvalError> {
    let n = gold.len();
    if pred_a.len() != n || pred_b.len() != n || translation_chars.len() != n {
        return Err(MetaEvalError::ShapeMismatch {
            context: format!(
                "{} gold, {} pred-a, {} pred-b, {} lengths",
                n,
                pred_a.len(),
                pred_b.len(),
                translation_chars.len()
            ),
        });
    }
    if n == 0 {
        return Err(MetaEvalError::EmptyInput);
    }
    let mut utility_a = Vec::with_capacity(n);
    let mut utility_b = Vec::with_capacity(n);
    for i in 0..n {
        utility_a.push(statistic.score(&pred_a[i], &gold[i], translation_chars[i])?.get());
        utility_b.push(statistic.score(&pred_b[i], &gold[i], translation_chars[i])?.get());
    }

    let b_wins: usize = (0..resamples)
        .into_par_iter()
        .map(|resample| {
            let stream = derive_seed(seed, &["bootstrap"], &[resample as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let mut total_a = 0.0;
            let mut total_b = 0.0;
            for _ in 0..n {
                let index = rng.random_range(0..n);
                total_a += utility_a[index];
                total_b += utility_b[index];
            }
            usize::from(total_b >= total_a)
        })
        .sum();
    Ok((1 + b_wins) as f64 / (1 + resamples) as f64)
}

// ---------------------------------------------------------------------------
// Corpus evaluation report
// ---------------------------------------------------------------------------

/// Per translation-direction metric block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub direction: String,
    pub systems: usize,
    pub segments: usize,
    pub spa: f64,
    pub acc_eq_star: f64,
    pub acc_eq_epsilon: f64,
    pub soft_f1: f64,
    pub exact_f1: f64,
}

/// One significance test outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub comparison: String,
    pub test: String,
    pub p_value: f64,
    pub seed: u64,
}

/// Full evaluation report: overall values are unweighted means of the
/// per-direction values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub spa: f64,
    pub acc_eq_star: f64,
    pub acc_eq_epsilon: f64,
    pub soft_f1: f64,
    pub exact_f1: f64,
    pub per_direction: Vec<DirectionMetrics>,
    pub significance: Vec<SignificanceResult>,
}

impl MetricReport {
    /// Plain-text table, one row per direction plus the average row.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>8} {:>8} {:>8}\n",
            "direction", "SPA", "Acc_eq*", "SoftF1", "F1"
        ));
        for d in &self.per_direction {
            out.push_str(&format!(
                "{:<16} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
                d.direction, d.spa, d.acc_eq_star, d.soft_f1, d.exact_f1
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>8.3} {:>8.3} {:>8.3} {:>8.3}\n",
            "avg", self.spa, self.acc_eq_star, self.soft_f1, self.exact_f1
        ));
        for s in &self.significance {
            out.push_str(&format!("{} [{}]: p = {:.4}\n", s.comparison, s.test, s.p_value));
        }
        out
    }
}

/// Tunables for [`evaluate_corpus`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvaluateOptions {
    pub permutations: usize,
    pub resamples: usize,
    pub seed: u64,
}

impl Default for EvaluateOptions {
    fn default() -> Self {
        Self { permutations: 1000, resamples: 999, seed: 0 }
    }
}

/// Evaluates predictions against gold annotations over a segments corpus.
///
/// `predictions_b`, when given, is a rival metric's output for the same
/// corpus; the report then carries PERM-BOTH significance entries for SPA
/// and tie-calibrated accuracy per direction, and a pooled paired
/// bootstrap for corpus SoftF1.
pub fn evaluate_corpus(
    segments: &[Segment],
    predictions: &[AnnotationRecord],
    gold: &[AnnotationRecord],
    predictions_b: Option<&[AnnotationRecord]>,
    options: EvaluateOptions,
) -> Result<MetricReport, MetaEvalError> {
    if segments.is_empty() {
        return Err(MetaEvalError::EmptyInput);
    }
    let mut segment_index: HashMap<(&str, &str), &Segment> = HashMap::new();
    for segment in segments {
        if segment_index
            .insert((segment.segment_id.as_str(), segment.system_id.as_str()), segment)
            .is_some()
        {
            return Err(MetaEvalError::DuplicateRecord {
                segment_id: segment.segment_id.clone(),
                system_id: segment.system_id.clone(),
            });
        }
    }

    type AnnotationMap = HashMap<(String, String), Annotation>;
    let index_records = |records: &[AnnotationRecord]| -> Result<AnnotationMap, MetaEvalError> {
        let mut map = AnnotationMap::new();
        for record in records {
            let key = (record.segment_id.clone(), record.system_id.clone());
            let Some(segment) =
                segment_index.get(&(record.segment_id.as_str(), record.system_id.as_str()))
            else {
                return Err(MetaEvalError::UnknownRecord {
                    segment_id: record.segment_id.clone(),
                    system_id: record.system_id.clone(),
                });
            };
            record.spans.clone().validated(segment.translation_chars()).map_err(|source| {
                MetaEvalError::InvalidAnnotation {
                    segment_id: record.segment_id.clone(),
                    system_id: record.system_id.clone(),
                    source,
                }
            })?;
            if map.insert(key, record.spans.clone()).is_some() {
                return Err(MetaEvalError::DuplicateRecord {
                    segment_id: record.segment_id.clone(),
                    system_id: record.system_id.clone(),
                });
            }
        }
        Ok(map)
    };
    let pred_map = index_records(predictions)?;
    let pred_b_map = predictions_b.map(index_records).transpose()?;
    let gold_map = index_records(gold)?;

    let lookup = |map: &AnnotationMap, segment: &Segment| -> Result<Annotation, MetaEvalError> {
        map.get(&(segment.segment_id.clone(), segment.system_id.clone()))
            .cloned()
            .ok_or_else(|| MetaEvalError::MissingEntry {
                system: segment.system_id.clone(),
                segment: segment.segment_id.clone(),
            })
    };

    // Group by direction, deterministically ordered.
    let mut directions: BTreeMap<String, Vec<&Segment>> = BTreeMap::new();
    for segment in segments {
        directions.entry(segment.direction()).or_default().push(segment);
    }

    let mut per_direction = Vec::new();
    let mut significance = Vec::new();
    // Pooled per-segment annotations for the corpus-level bootstrap.
    let mut pooled: Vec<(Annotation, Annotation, usize, (String, String))> = Vec::new();

    for (direction, members) in &directions {
        let mut entries = Vec::new();
        for segment in members {
            let pred = lookup(&pred_map, segment)?;
            let gold_annotation = lookup(&gold_map, segment)?;
            entries.push((*segment, pred, gold_annotation));
        }

        let records_for = |select: &dyn Fn(&(&Segment, Annotation, Annotation)) -> Annotation| {
            entries
                .iter()
                .map(|entry| AnnotationRecord {
                    segment_id: entry.0.segment_id.clone(),
                    system_id: entry.0.system_id.clone(),
                    spans: select(entry),
                })
                .collect::<Vec<_>>()
        };
        let metric_matrix = system_scores(&records_for(&|e| e.1.clone()))?.matrix;
        let human_matrix = system_scores(&records_for(&|e| e.2.clone()))?.matrix;
        if metric_matrix.n_systems() < 2 {
            return Err(MetaEvalError::TooFewSystems {
                direction: direction.clone(),
                systems: metric_matrix.n_systems(),
            });
        }

        let direction_seed = derive_seed(options.seed, &["direction", direction], &[]);
        let spa_value = spa(&metric_matrix, &human_matrix, options.permutations, direction_seed)?;
        let tie = acc_eq_star_matrix(&metric_matrix, &human_matrix)?;
        let soft: Vec<UtilityValue> = entries
            .iter()
            .map(|(segment, pred, gold_annotation)| {
                UtilityKind::SoftF1.score(pred, gold_annotation, segment.translation_chars())
            })
            .collect::<Result<_, _>>()?;
        let exact: Vec<UtilityValue> = entries
            .iter()
            .map(|(segment, pred, gold_annotation)| {
                UtilityKind::ExactF1.score(pred, gold_annotation, segment.translation_chars())
            })
            .collect::<Result<_, _>>()?;

        per_direction.push(DirectionMetrics {
            direction: direction.clone(),
            systems: metric_matrix.n_systems(),
            segments: metric_matrix.n_segments(),
            spa: spa_value,
            acc_eq_star: tie.accuracy,
            acc_eq_epsilon: tie.epsilon,
            soft_f1: corpus_aggregate(&soft)?.get(),
            exact_f1: corpus_aggregate(&exact)?.get(),
        });

        if let Some(pred_b_map) = &pred_b_map {
            let mut records_b = Vec::new();
            for segment in members {
                records_b.push(AnnotationRecord {
                    segment_id: segment.segment_id.clone(),
                    system_id: segment.system_id.clone(),
                    spans: lookup(pred_b_map, segment)?,
                });
            }
            let metric_b_matrix = system_scores(&records_b)?.matrix;
            for (meta, label, tag) in [
                (
                    MetaMetric::Spa { permutations: options.permutations },
                    "SPA",
                    "perm-both-spa",
                ),
                (MetaMetric::AccEqStar, "Acc_eq*", "perm-both-acc"),
            ] {
                let test_seed = derive_seed(options.seed, &[tag, direction], &[]);
                let p = perm_both_test(
                    &metric_matrix,
                    &metric_b_matrix,
                    &human_matrix,
                    meta,
                    options.permutations,
                    test_seed,
                )?;
                significance.push(SignificanceResult {
                    comparison: format!("pred-a vs pred-b, {label} [{direction}]"),
                    test: "perm-both".into(),
                    p_value: p,
                    seed: test_seed,
                });
            }
        }

        for (segment, pred, gold_annotation) in entries {
            pooled.push((
                pred,
                gold_annotation,
                segment.translation_chars(),
                (segment.segment_id.clone(), segment.system_id.clone()),
            ));
        }
    }

    // Pooled SoftF1 bootstrap across all directions.
    if let Some(pred_b_map) = &pred_b_map {
        let mut pred_a_all = Vec::new();
        let mut pred_b_all = Vec::new();
        let mut gold_all = Vec::new();
        let mut chars_all = Vec::new();
        for (pred, gold_annotation, chars, key) in &pooled {
            pred_a_all.push(pred.clone());
            pred_b_all.push(pred_b_map.get(key).cloned().ok_or_else(|| {
                MetaEvalError::MissingEntry { system: key.1.clone(), segment: key.0.clone() }
            })?);
            gold_all.push(gold_annotation.clone());
            chars_all.push(*chars);
        }
        let bootstrap_seed = derive_seed(options.seed, &["bootstrap-softf1"], &[]);
        let p = paired_bootstrap(
            &pred_a_all,
            &pred_b_all,
            &gold_all,
            &chars_all,
            UtilityKind::SoftF1,
            options.resamples,
            bootstrap_seed,
        )?;
        significance.push(SignificanceResult {
            comparison: "pred-a vs pred-b, corpus SoftF1 [all]".into(),
            test: "paired-bootstrap".into(),
            p_value: p,
            seed: bootstrap_seed,
        });
    }

    let n_directions = per_direction.len() as f64;
    let mean = |f: &dyn Fn(&DirectionMetrics) -> f64| {
        per_direction.iter().map(f).sum::<f64>() / n_directions
    };
    Ok(MetricReport {
        spa: mean(&|d| d.spa),
        acc_eq_star: mean(&|d| d.acc_eq_star),
        acc_eq_epsilon: mean(&|d| d.acc_eq_epsilon),
        soft_f1: mean(&|d| d.soft_f1),
        exact_f1: mean(&|d| d.exact_f1),
        per_direction,
        significance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ErrorSpan, Severity};
    use rand::RngCore;

    fn matrix(systems: &[&str], segments: &[&str], values: &[f64]) -> ScoreMatrix {
        ScoreMatrix::new(
            systems.iter().map(|s| s.to_string()).collect(),
            segments.iter().map(|s| s.to_string()).collect(),
            values.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn spa_is_one_when_metric_equals_human() {
        let m = matrix(
            &["A", "B", "C"],
            &["s1", "s2", "s3"],
            &[0.0, -1.0, -2.0, -5.0, -1.0, 0.0, -2.0, -2.0, -2.0],
        );
        let value = spa(&m, &m, 200, 7).unwrap();
        assert_eq!(value, 1.0, "identical matrices share identical p-values");
    }

    #[test]
    fn spa_collapses_on_reversed_rankings() {
        // Metric: A beats B on every segment; human: B beats A on every
        // segment. p_m = 1/(N+1) (only the empty flip set keeps the mean at
        // the observed value), p_h = 1.
        let n = 30;
        let metric_values: Vec<f64> =
            std::iter::repeat_n(0.0, n).chain(std::iter::repeat_n(-6.0, n)).collect();
        let human_values: Vec<f64> =
            std::iter::repeat_n(-6.0, n).chain(std::iter::repeat_n(0.0, n)).collect();
        let segments: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
        let segment_names: Vec<&str> = segments.iter().map(|s| s.as_str()).collect();
        let metric = matrix(&["A", "B"], &segment_names, &metric_values);
        let human = matrix(&["A", "B"], &segment_names, &human_values);
        let permutations = 1000;
        let value = spa(&metric, &human, permutations, 13).unwrap();
        let expected = 1.0 / (permutations as f64 + 1.0);
        assert!((value - expected).abs() < 1e-12, "expected ~{expected}, got {value}");
    }

    #[test]
    fn spa_invariant_under_segment_column_order() {
        let metric = matrix(&["A", "B"], &["s1", "s2", "s3"], &[0.0, -2.0, -1.0, -3.0, 0.0, -1.0]);
        let human = matrix(&["A", "B"], &["s1", "s2", "s3"], &[-1.0, 0.0, -2.0, 0.0, -1.0, -5.0]);
        let spa_original = spa(&metric, &human, 500, 3).unwrap();

        // Permute segment columns consistently in both matrices: the diff
        // vectors are sorted internally, so the result is identical.
        let perm = [2usize, 0, 1];
        let permute = |m: &ScoreMatrix| {
            let values: Vec<f64> = (0..2)
                .flat_map(|sys| perm.iter().map(move |&j| (sys, j)))
                .map(|(sys, j)| m.value(sys, j))
                .collect();
            matrix(&["A", "B"], &["x", "y", "z"], &values)
        };
        let spa_permuted = spa(&permute(&metric), &permute(&human), 500, 3).unwrap();
        assert_eq!(spa_original, spa_permuted);
    }

    #[test]
    fn spa_symmetric_under_system_relabeling() {
        let metric = matrix(&["A", "B", "C"], &["s1", "s2"], &[0.0, -1.0, -2.0, -3.0, -1.0, -1.0]);
        let human = matrix(&["A", "B", "C"], &["s1", "s2"], &[-1.0, -1.0, 0.0, -2.0, -3.0, 0.0]);
        let base = spa(&metric, &human, 400, 11).unwrap();

        // Reverse the row order in both matrices. Each pair's differences
        // are negated for both sources, so |p_m - p_h| shifts identically
        // and SPA must be very close (flip vectors re-randomize per pair).
        let relabel = |m: &ScoreMatrix| {
            matrix(
                &["A", "B", "C"],
                &["s1", "s2"],
                &[
                    m.value(2, 0),
                    m.value(2, 1),
                    m.value(1, 0),
                    m.value(1, 1),
                    m.value(0, 0),
                    m.value(0, 1),
                ],
            )
        };
        let relabeled = spa(&relabel(&metric), &relabel(&human), 400, 11).unwrap();
        assert!((base - relabeled).abs() < 0.05, "{base} vs {relabeled}");
    }

    #[test]
    fn spa_needs_two_systems() {
        let m = matrix(&["A"], &["s1"], &[0.0]);
        assert!(matches!(spa(&m, &m, 10, 0), Err(MetaEvalError::TooFewSystems { .. })));
    }

    #[test]
    fn spa_is_independent_of_worker_count() {
        let metric = matrix(
            &["A", "B", "C"],
            &["s1", "s2", "s3"],
            &[0.0, -1.0, -2.0, -5.0, -1.0, 0.0, -2.0, -6.0, -1.0],
        );
        let human = matrix(
            &["A", "B", "C"],
            &["s1", "s2", "s3"],
            &[-1.0, 0.0, -2.0, 0.0, -5.0, -1.0, -1.0, -1.0, -6.0],
        );
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = single.install(|| spa(&metric, &human, 400, 21)).unwrap();
        let b = many.install(|| spa(&metric, &human, 400, 21)).unwrap();
        assert_eq!(a, b, "result must not depend on the thread pool");
    }

    // -- acc_eq_star ---------------------------------------------------------

    /// Exhaustive oracle: brute-force accuracy over a rich candidate set
    /// (zero, values, midpoints, halves, beyond-max).
    fn acc_eq_oracle(metric: &[f64], human: &[f64], groups: &[usize]) -> (f64, f64) {
        let mut pairs = Vec::new();
        for a in 0..metric.len() {
            for b in a + 1..metric.len() {
                if groups[a] == groups[b] {
                    pairs.push((a, b));
                }
            }
        }
        let mut candidates = vec![0.0];
        for &(a, b) in &pairs {
            let d = (metric[a] - metric[b]).abs();
            candidates.push(d);
            candidates.push(d / 2.0);
            candidates.push(d + 0.5);
            for &(c, e) in &pairs {
                let d2 = (metric[c] - metric[e]).abs();
                candidates.push((d + d2) / 2.0);
            }
        }
        let mut best = (-1.0, 0.0);
        for &eps in &candidates {
            let mut correct = 0usize;
            for &(a, b) in &pairs {
                let metric_tie = (metric[a] - metric[b]).abs() <= eps;
                let human_tie = human[a] == human[b];
                let ok = if human_tie {
                    metric_tie
                } else {
                    !metric_tie && ((metric[a] > metric[b]) == (human[a] > human[b]))
                };
                correct += usize::from(ok);
            }
            let acc = correct as f64 / pairs.len() as f64;
            if acc > best.0 {
                best = (acc, eps);
            }
        }
        best
    }

    #[test]
    fn acc_eq_perfect_concordance_without_ties() {
        let metric = [0.0, -1.0, -2.0, -3.0];
        let human = [0.0, -1.0, -2.0, -3.0];
        let groups = [0usize, 0, 1, 1];
        let tie = acc_eq_star(&metric, &human, &groups).unwrap();
        assert_eq!(tie.accuracy, 1.0);
        assert_eq!(tie.epsilon, 0.0, "smallest maximizing epsilon");
    }

    #[test]
    fn acc_eq_calibrates_tie_threshold() {
        // Humans tie, metric differs by 0.1: only eps >= 0.1 predicts it.
        let metric = [1.0, 1.1];
        let human = [2.0, 2.0];
        let groups = [0usize, 0];
        let tie = acc_eq_star(&metric, &human, &groups).unwrap();
        assert_eq!(tie.accuracy, 1.0);
        assert!(tie.epsilon >= 0.1 - 1e-12, "epsilon {} too small", tie.epsilon);
    }

    #[test]
    fn acc_eq_pairs_only_within_groups() {
        let metric = [0.0, -1.0, -10.0, -11.0];
        let human = [0.0, -2.0, -1.0, -3.0];
        let groups = [0usize, 0, 1, 1];
        let tie = acc_eq_star(&metric, &human, &groups).unwrap();
        assert_eq!(tie.pairs, 2);
        assert_eq!(tie.accuracy, 1.0);
    }

    #[test]
    fn acc_eq_no_pairs_is_an_error() {
        let metric = [0.0, 1.0];
        let human = [0.0, 1.0];
        let groups = [0usize, 1];
        assert!(matches!(acc_eq_star(&metric, &human, &groups), Err(MetaEvalError::NoPairs)));
    }

    #[test]
    fn acc_eq_is_one_when_metric_equals_tieless_human() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 200 {
            let n = 2 + (rng.next_u32() as usize % 10);
            // Distinct human scores within each group: no human ties.
            let human: Vec<f64> = (0..n).map(|i| -1.5 * i as f64).collect();
            let groups: Vec<usize> = (0..n).map(|_| rng.next_u32() as usize % 2).collect();
            let Ok(tie) = acc_eq_star(&human, &human, &groups) else {
                continue;
            };
            assert_eq!(tie.accuracy, 1.0);
            assert_eq!(tie.epsilon, 0.0);
            checked += 1;
        }
    }

    #[test]
    fn acc_eq_matches_exhaustive_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 300 {
            let n = 2 + (rng.next_u32() as usize % 12);
            let metric: Vec<f64> =
                (0..n).map(|_| (rng.next_u32() % 8) as f64 * 0.25 - 1.0).collect();
            let human: Vec<f64> = (0..n).map(|_| -((rng.next_u32() % 4) as f64)).collect();
            let groups: Vec<usize> = (0..n).map(|_| rng.next_u32() as usize % 3).collect();
            let Ok(ours) = acc_eq_star(&metric, &human, &groups) else {
                continue; // all groups singleton
            };
            let (oracle_acc, _) = acc_eq_oracle(&metric, &human, &groups);
            assert_eq!(
                ours.accuracy, oracle_acc,
                "metric {metric:?} human {human:?} groups {groups:?}"
            );
            checked += 1;
        }
    }

    // -- perm-both -----------------------------------------------------------

    #[test]
    fn perm_both_identical_metrics_give_p_one() {
        let metric = matrix(&["A", "B"], &["s1", "s2", "s3"], &[0.0, -1.0, -2.0, -1.0, -1.0, 0.0]);
        let human = matrix(&["A", "B"], &["s1", "s2", "s3"], &[-1.0, 0.0, -2.0, 0.0, -2.0, -1.0]);
        let p = perm_both_test(&metric, &metric, &human, MetaMetric::AccEqStar, 200, 5).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn perm_both_is_deterministic_and_in_range() {
        let a = matrix(
            &["A", "B"],
            &["s1", "s2", "s3", "s4"],
            &[0.0, -1.0, -2.0, 0.0, -6.0, -5.0, -1.0, -2.0],
        );
        let b = matrix(
            &["A", "B"],
            &["s1", "s2", "s3", "s4"],
            &[-6.0, 0.0, -1.0, -1.0, 0.0, -1.0, -5.0, 0.0],
        );
        let human = matrix(
            &["A", "B"],
            &["s1", "s2", "s3", "s4"],
            &[0.0, -1.0, -1.0, 0.0, -5.0, -6.0, -1.0, -1.0],
        );
        let p1 = perm_both_test(&a, &b, &human, MetaMetric::AccEqStar, 300, 99).unwrap();
        let p2 = perm_both_test(&a, &b, &human, MetaMetric::AccEqStar, 300, 99).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 <= 1.0);
        let p3 =
            perm_both_test(&a, &b, &human, MetaMetric::Spa { permutations: 50 }, 100, 1).unwrap();
        assert!(p3 > 0.0 && p3 <= 1.0);
    }

    // -- bootstrap -----------------------------------------------------------

    fn ann(spans: Vec<(usize, usize, Severity)>) -> Annotation {
        Annotation::new(spans.into_iter().map(|(s, e, v)| ErrorSpan::new(s, e, v)).collect())
    }

    #[test]
    fn bootstrap_identical_predictions_give_p_one() {
        let gold = vec![ann(vec![(0, 3, Severity::Major)]), ann(vec![])];
        let pred = gold.clone();
        let p =
            paired_bootstrap(&pred, &pred, &gold, &[10, 10], UtilityKind::SoftF1, 200, 3).unwrap();
        assert_eq!(p, 1.0, "ties count for B");
    }

    #[test]
    fn bootstrap_strict_dominance_gives_minimal_p() {
        // A matches gold exactly; B misses every span entirely.
        let gold: Vec<Annotation> = (0..8).map(|i| ann(vec![(i, i + 2, Severity::Major)])).collect();
        let pred_a = gold.clone();
        let pred_b: Vec<Annotation> = (0..8).map(|_| ann(vec![])).collect();
        let chars = vec![20usize; 8];
        let resamples = 999;
        let p =
            paired_bootstrap(&pred_a, &pred_b, &gold, &chars, UtilityKind::SoftF1, resamples, 17)
                .unwrap();
        assert_eq!(p, 1.0 / (resamples as f64 + 1.0));
    }

    #[test]
    fn bootstrap_is_deterministic_under_seed() {
        let gold = vec![
            ann(vec![(0, 2, Severity::Major)]),
            ann(vec![(1, 4, Severity::Minor)]),
            ann(vec![]),
        ];
        let pred_a = vec![ann(vec![(0, 2, Severity::Major)]), ann(vec![]), ann(vec![])];
        let pred_b = vec![
            ann(vec![(0, 2, Severity::Minor)]),
            ann(vec![(1, 4, Severity::Minor)]),
            ann(vec![]),
        ];
        let chars = vec![10, 10, 10];
        let p1 =
            paired_bootstrap(&pred_a, &pred_b, &gold, &chars, UtilityKind::SoftF1, 500, 9).unwrap();
        let p2 =
            paired_bootstrap(&pred_a, &pred_b, &gold, &chars, UtilityKind::SoftF1, 500, 9).unwrap();
        assert_eq!(p1, p2);
    }

    // -- system scores -------------------------------------------------------

    fn record(
        segment: &str,
        system: &str,
        spans: Vec<(usize, usize, Severity)>,
    ) -> AnnotationRecord {
        AnnotationRecord { segment_id: segment.into(), system_id: system.into(), spans: ann(spans) }
    }

    #[test]
    fn system_scores_match_hand_built_fixture() {
        // 2 systems x 2 segments: A scores (0, -6), B scores (-5, -1).
        let records = vec![
            record("s1", "A", vec![]),
            record("s2", "A", vec![(0, 3, Severity::Major), (4, 5, Severity::Minor)]),
            record("s1", "B", vec![(0, 2, Severity::Major)]),
            record("s2", "B", vec![(1, 2, Severity::Minor)]),
        ];
        let scores = system_scores(&records).unwrap();
        assert_eq!(scores.matrix.value(0, 0), 0.0);
        assert_eq!(scores.matrix.value(0, 1), -6.0);
        assert_eq!(scores.matrix.value(1, 0), -5.0);
        assert_eq!(scores.matrix.value(1, 1), -1.0);
        assert_eq!(
            scores.system_means,
            vec![("A".to_string(), -3.0), ("B".to_string(), -3.0)]
        );
    }

    #[test]
    fn system_scores_all_empty_annotations_are_zero() {
        let records = vec![record("s1", "A", vec![]), record("s1", "B", vec![])];
        let scores = system_scores(&records).unwrap();
        assert!(scores.matrix.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn system_scores_reject_missing_entries() {
        let records =
            vec![record("s1", "A", vec![]), record("s2", "A", vec![]), record("s1", "B", vec![])];
        assert!(matches!(system_scores(&records), Err(MetaEvalError::MissingEntry { .. })));
    }

    // -- corpus evaluation ----------------------------------------------------

    fn segment(id: &str, system: &str, translation: &str) -> Segment {
        Segment {
            segment_id: id.into(),
            system_id: system.into(),
            source_lang: "en".into(),
            target_lang: "de".into(),
            source: "src".into(),
            translation: translation.into(),
        }
    }

    #[test]
    fn evaluate_perfect_predictions_score_one_everywhere() {
        let segments = vec![
            segment("s1", "A", "aaaa bbbb"),
            segment("s1", "B", "cccc dddd"),
            segment("s2", "A", "eeee ffff"),
            segment("s2", "B", "gggg hhhh"),
        ];
        let gold = vec![
            record("s1", "A", vec![(0, 4, Severity::Major)]),
            record("s1", "B", vec![]),
            record("s2", "A", vec![(5, 9, Severity::Minor)]),
            record("s2", "B", vec![(0, 4, Severity::Major), (5, 9, Severity::Minor)]),
        ];
        let report =
            evaluate_corpus(&segments, &gold, &gold, None, EvaluateOptions::default()).unwrap();
        assert_eq!(report.spa, 1.0);
        assert_eq!(report.acc_eq_star, 1.0);
        assert_eq!(report.soft_f1, 1.0);
        assert_eq!(report.exact_f1, 1.0);
        assert!(report.significance.is_empty());
    }

    #[test]
    fn evaluate_reports_missing_coverage() {
        let segments = vec![segment("s1", "A", "abc"), segment("s1", "B", "def")];
        let gold = vec![record("s1", "A", vec![]), record("s1", "B", vec![])];
        let partial = vec![record("s1", "A", vec![])];
        let err = evaluate_corpus(&segments, &partial, &gold, None, EvaluateOptions::default())
            .unwrap_err();
        assert!(matches!(err, MetaEvalError::MissingEntry { .. }), "{err:?}");
    }

    #[test]
    fn evaluate_emits_significance_against_rival() {
        let segments = vec![
            segment("s1", "A", "aaaa bbbb"),
            segment("s1", "B", "cccc dddd"),
            segment("s2", "A", "eeee ffff"),
            segment("s2", "B", "gggg hhhh"),
        ];
        let gold = vec![
            record("s1", "A", vec![(0, 4, Severity::Major)]),
            record("s1", "B", vec![]),
            record("s2", "A", vec![(5, 9, Severity::Minor)]),
            record("s2", "B", vec![(0, 4, Severity::Major)]),
        ];
        let rough = vec![
            record("s1", "A", vec![]),
            record("s1", "B", vec![(0, 4, Severity::Minor)]),
            record("s2", "A", vec![]),
            record("s2", "B", vec![]),
        ];
        let options = EvaluateOptions { permutations: 60, resamples: 99, seed: 4 };
        let report = evaluate_corpus(&segments, &gold, &gold, Some(&rough), options).unwrap();
        assert_eq!(report.significance.len(), 3, "SPA + Acc_eq* + bootstrap");
        for s in &report.significance {
            assert!(s.p_value > 0.0 && s.p_value <= 1.0);
        }
        // Determinism end to end.
        let report2 = evaluate_corpus(&segments, &gold, &gold, Some(&rough), options).unwrap();
        assert_eq!(
            serde_json::to_string(&report).unwrap(),
            serde_json::to_string(&report2).unwrap()
        );
    }
}
