//! Dataset construction from scored candidate sets, and the bookkeeping
//! for running the generate → score → emit cycle across iterations.
//!
//! Per segment, the best- and worst-scoring candidates become training
//! material depending on the variant:
//!
//! - SFT: one `(prompt, target)` record with the best candidate,
//!   unconditionally;
//! - DPO: one `(prompt, chosen, rejected)` record only when best and worst
//!   differ as annotations (an uninformative pair is skipped and counted);
//! - KTO: one desirable `(prompt, completion, true)` record always, plus an
//!   undesirable one for the worst candidate when it differs from the best.
//!
//! Target strings are re-rendered from the selected annotation, so every
//! emitted completion parses back to exactly the annotation it encodes.
//!
//! Model weight updates happen in an external trainer. An iteration ends by
//! writing the dataset plus a manifest; the next iteration's generator may
//! point at a newly fine-tuned server (or at the adapted mock), which is
//! the entire handoff contract.

use crate::gemba::{parse_output, render_annotation};
use crate::generate::{AdaptationExample, CandidateGenerator, GenerateError, GenerationConfig};
use crate::jsonl::{JsonlError, JsonlReader, JsonlWriter};
use crate::mbr::{mbr_score, CandidateRecord, CandidateSet, MbrError, ScoredCandidateSet, ScoredRecord};
use crate::prompt::{render_prompt, UnknownTemplate};
use crate::seed::derive_seed;
use crate::types::Segment;
use crate::utility::UtilityKind;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Mbr(#[from] MbrError),
    #[error(transparent)]
    Template(#[from] UnknownTemplate),
    #[error("duplicate segment key (segment_id={segment_id:?}, system_id={system_id:?})")]
    DuplicateSegment { segment_id: String, system_id: String },
    #[error("invalid segment: {reason}")]
    InvalidSegment { reason: String },
    #[error("candidates file out of sync with segments at {key:?}")]
    InconsistentFiles { key: String },
    #[error("iteration {iteration} out of range 1..={total}")]
    IterationOutOfRange { iteration: u32, total: u32 },
}

/// Training objective the emitted dataset feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetVariant {
    Sft,
    Dpo,
    Kto,
}

impl DatasetVariant {
    pub fn label(self) -> &'static str {
        match self {
            DatasetVariant::Sft => "sft",
            DatasetVariant::Dpo => "dpo",
            DatasetVariant::Kto => "kto",
        }
    }
}

/// One training example, before serialization into the variant's line
/// schema.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillRecord {
    pub segment: Segment,
    pub iteration: u32,
    pub payload: DistillPayload,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DistillPayload {
    Sft { target: String },
    Dpo { chosen: String, rejected: String },
    Kto { completion: String, desirable: bool },
}

/// SFT dataset line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftLine {
    pub prompt: String,
    pub target: String,
}

/// DPO dataset line; `chosen != rejected` as annotations by construction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DpoLine {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
}

/// KTO dataset line: one completion with a desirability label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KtoLine {
    pub prompt: String,
    pub completion: String,
    pub label: bool,
}

/// One serialized dataset line, dispatching on the variant's schema.
#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum DatasetLine {
    Sft(SftLine),
    Dpo(DpoLine),
    Kto(KtoLine),
}

impl DatasetLine {
    pub fn new(prompt: &str, payload: &DistillPayload) -> Self {
        match payload {
            DistillPayload::Sft { target } => {
                DatasetLine::Sft(SftLine { prompt: prompt.to_string(), target: target.clone() })
            }
            DistillPayload::Dpo { chosen, rejected } => DatasetLine::Dpo(DpoLine {
                prompt: prompt.to_string(),
                chosen: chosen.clone(),
                rejected: rejected.clone(),
            }),
            DistillPayload::Kto { completion, desirable } => DatasetLine::Kto(KtoLine {
                prompt: prompt.to_string(),
                completion: completion.clone(),
                label: *desirable,
            }),
        }
    }
}

/// Counts from one dataset build.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub segments: usize,
    pub records: usize,
    /// Segments whose best and worst candidates are the same annotation.
    /// DPO skips these outright; KTO emits only the desirable half.
    pub equal_pairs: usize,
}

/// Builds the records one scored segment contributes.
pub fn build_records(
    scored: &ScoredCandidateSet,
    variant: DatasetVariant,
    iteration: u32,
) -> Vec<DistillRecord> {
    let translation = &scored.base.segment.translation;
    let best = scored.best();
    let worst = scored.worst();
    let best_text = render_annotation(best, translation);
    let distinct = !best.matches(worst);
    let record = |payload: DistillPayload| DistillRecord {
        segment: scored.base.segment.clone(),
        iteration,
        payload,
    };
    match variant {
        DatasetVariant::Sft => vec![record(DistillPayload::Sft { target: best_text })],
        DatasetVariant::Dpo => {
            if distinct {
                vec![record(DistillPayload::Dpo {
                    chosen: best_text,
                    rejected: render_annotation(worst, translation),
                })]
            } else {
                Vec::new()
            }
        }
        DatasetVariant::Kto => {
            let mut records =
                vec![record(DistillPayload::Kto { completion: best_text, desirable: true })];
            if distinct {
                records.push(record(DistillPayload::Kto {
                    completion: render_annotation(worst, translation),
                    desirable: false,
                }));
            }
            records
        }
    }
}

/// Builds a whole dataset, counting skips instead of dropping them
/// silently.
pub fn build_dataset(
    scored: impl IntoIterator<Item = ScoredCandidateSet>,
    variant: DatasetVariant,
    iteration: u32,
) -> (Vec<DistillRecord>, BuildReport) {
    let mut records = Vec::new();
    let mut report = BuildReport::default();
    for set in scored {
        report.segments += 1;
        report.equal_pairs += usize::from(set.best().matches(set.worst()));
        records.extend(build_records(&set, variant, iteration));
    }
    report.records = records.len();
    (records, report)
}

/// Converts dataset records into mock-adaptation examples: SFT targets,
/// DPO chosen (plus rejected as undesirable), and KTO completions with
/// their labels.
pub fn adaptation_examples(records: &[DistillRecord]) -> Vec<AdaptationExample> {
    let mut examples = Vec::new();
    for record in records {
        let key = record.segment.key();
        match &record.payload {
            DistillPayload::Sft { target } => {
                examples.push(AdaptationExample {
                    segment_key: key,
                    text: target.clone(),
                    desirable: true,
                });
            }
            DistillPayload::Dpo { chosen, rejected } => {
                examples.push(AdaptationExample {
                    segment_key: key.clone(),
                    text: chosen.clone(),
                    desirable: true,
                });
                examples.push(AdaptationExample {
                    segment_key: key,
                    text: rejected.clone(),
                    desirable: false,
                });
            }
            DistillPayload::Kto { completion, desirable } => {
                examples.push(AdaptationExample {
                    segment_key: key,
                    text: completion.clone(),
                    desirable: *desirable,
                });
            }
        }
    }
    examples
}

// ---------------------------------------------------------------------------
// Iteration state
// ---------------------------------------------------------------------------

/// Everything one iteration needs, and the resume token handed to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    /// 1-based iteration index t.
    pub iteration: u32,
    pub total_iterations: u32,
    pub master_seed: u64,
    pub variant: DatasetVariant,
    pub utility: UtilityKind,
    pub generation: GenerationConfig,
    /// Unlabeled input corpus.
    pub segments_path: PathBuf,
    pub output_dir: PathBuf,
    pub candidates_path: PathBuf,
    pub scored_path: PathBuf,
    pub dataset_path: PathBuf,
    pub manifest_path: PathBuf,
}

impl IterationState {
    /// Lays out file paths for iteration `t` under `output_dir`.
    #[allow(clippy::too_many_arguments)]
    pub fn plan(
        output_dir: &Path,
        segments_path: &Path,
        iteration: u32,
        total_iterations: u32,
        master_seed: u64,
        variant: DatasetVariant,
        utility: UtilityKind,
        generation: GenerationConfig,
    ) -> Result<Self, DistillError> {
        if iteration < 1 || iteration > total_iterations {
            return Err(DistillError::IterationOutOfRange { iteration, total: total_iterations });
        }
        Ok(Self {
            iteration,
            total_iterations,
            master_seed,
            variant,
            utility,
            generation,
            segments_path: segments_path.to_path_buf(),
            output_dir: output_dir.to_path_buf(),
            candidates_path: output_dir.join(format!("candidates_{iteration:03}.jsonl")),
            scored_path: output_dir.join(format!("scored_{iteration:03}.jsonl")),
            dataset_path: output_dir.join(format!("dataset_{iteration:03}.jsonl")),
            manifest_path: output_dir.join(format!("manifest_{iteration:03}.json")),
        })
    }

    /// State for t+1, or `None` after the final iteration.
    pub fn advance(&self) -> Result<Option<IterationState>, DistillError> {
        if self.iteration >= self.total_iterations {
            return Ok(None);
        }
        IterationState::plan(
            &self.output_dir,
            &self.segments_path,
            self.iteration + 1,
            self.total_iterations,
            self.master_seed,
            self.variant,
            self.utility,
            self.generation.clone(),
        )
        .map(Some)
    }

    /// True once every artifact this iteration references exists on disk.
    pub fn is_complete(&self) -> bool {
        [&self.candidates_path, &self.scored_path, &self.dataset_path, &self.manifest_path]
            .iter()
            .all(|p| p.exists())
    }
}

/// Iteration manifest, written next to the dataset. File paths are stored
/// as bare file names relative to the manifest so identical runs in
/// different directories stay byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationManifest {
    pub iteration: u32,
    pub seed: u64,
    pub backend: String,
    pub generator_config: GenerationConfig,
    pub variant: DatasetVariant,
    pub utility: UtilityKind,
    pub counts: ManifestCounts,
    pub file_paths: ManifestPaths,
    /// Mean over segments of the best candidate's MBR score.
    pub mean_best_utility: f64,
    /// Mean over segments of the population variance of candidate scores;
    /// absent when C < 2.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_utility_variance: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub segments: usize,
    pub candidates: usize,
    pub records: usize,
    pub equal_pairs: usize,
    pub parse_issues: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub segments: String,
    pub candidates: String,
    pub scored: String,
    pub dataset: String,
}

/// Result of one iteration: its manifest, the records it emitted (for mock
/// adaptation and reporting), and the resume state for t+1.
#[derive(Clone, Debug)]
pub struct IterationOutcome {
    pub manifest: IterationManifest,
    pub records: Vec<DistillRecord>,
    pub next_state: Option<IterationState>,
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Streaming reader over the segments corpus. Candidate payloads dwarf
/// segment metadata, so every pass pulls segments one at a time; this
/// wrapper adds the corpus invariants (non-empty ids, unique keys, with
/// only the key set kept in memory).
pub struct SegmentStream {
    reader: JsonlReader<Segment>,
    seen: HashSet<String>,
}

impl SegmentStream {
    pub fn open(path: &Path) -> Result<Self, DistillError> {
        Ok(Self { reader: JsonlReader::open(path)?, seen: HashSet::new() })
    }
}

impl Iterator for SegmentStream {
    type Item = Result<Segment, DistillError>;

    fn next(&mut self) -> Option<Self::Item> {
        let segment = match self.reader.next()? {
            Ok(segment) => segment,
            Err(e) => return Some(Err(e.into())),
        };
        if segment.segment_id.is_empty() {
            return Some(Err(DistillError::InvalidSegment {
                reason: "segment_id must be non-empty".into(),
            }));
        }
        if !self.seen.insert(segment.key()) {
            return Some(Err(DistillError::DuplicateSegment {
                segment_id: segment.segment_id,
                system_id: segment.system_id,
            }));
        }
        Some(Ok(segment))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct GenerationPassSummary {
    pub segments: usize,
    pub candidates: usize,
    /// Segments reused from a partial candidates file instead of re-sampled.
    pub resumed: usize,
}

/// Samples C candidates per segment into `out_path`, one record per
/// segment in input order. Complete records left in `out_path` by an
/// interrupted run are reused verbatim, so no segment is ever sampled
/// twice.
pub fn generate_candidates_file(
    segments_path: &Path,
    out_path: &Path,
    generator: &dyn CandidateGenerator,
    generation: &GenerationConfig,
    master_seed: u64,
    iteration: u32,
) -> Result<GenerationPassSummary, DistillError> {
    generation.validate()?;
    // Resumption source: the partial output of an interrupted run, moved
    // aside so the fresh file can be written in place while the old one is
    // streamed. Any run of this function writes a prefix of the same
    // deterministic content, so if a previous resume itself crashed, the
    // longer of the two partials carries strictly more finished work.
    let partial_path = out_path.with_extension("resume-partial");
    if out_path.exists() {
        if partial_path.exists() {
            let records = |p: &Path| {
                JsonlReader::<CandidateRecord>::open(p)
                    .map(|r| r.take_while(Result::is_ok).count())
                    .unwrap_or(0)
            };
            if records(out_path) > records(&partial_path) {
                std::fs::remove_file(&partial_path)
                    .map_err(|e| io_error(&partial_path, e))?;
                std::fs::rename(out_path, &partial_path)
                    .map_err(|e| io_error(out_path, e))?;
            }
        } else {
            std::fs::rename(out_path, &partial_path).map_err(|e| io_error(out_path, e))?;
        }
    }
    let mut resume_reader = if partial_path.exists() {
        Some(JsonlReader::<CandidateRecord>::open(&partial_path)?)
    } else {
        None
    };
    // Completed records form a prefix in segment order; stop reusing at the
    // first truncated or mismatching record.
    let mut next_resumable: Option<CandidateRecord> = None;
    let advance_resume = |reader: &mut Option<JsonlReader<CandidateRecord>>| {
        reader.as_mut().and_then(|r| r.next()).and_then(Result::ok)
    };
    if let Some(record) = advance_resume(&mut resume_reader) {
        next_resumable = Some(record);
    }

    let mut summary = GenerationPassSummary::default();
    let mut writer = JsonlWriter::<CandidateRecord>::create(out_path)?;
    for segment in SegmentStream::open(segments_path)? {
        let segment = segment?;
        let key = segment.key();
        summary.segments += 1;
        let reusable = next_resumable
            .as_ref()
            .is_some_and(|r| r.key() == key && r.candidates.len() == generation.num_candidates);
        if reusable {
            let record = next_resumable.take().expect("checked above");
            summary.candidates += record.candidates.len();
            summary.resumed += 1;
            writer.write(&record)?;
            next_resumable = advance_resume(&mut resume_reader);
            continue;
        }
        // Out of resumable prefix: everything from here is regenerated.
        next_resumable = None;
        resume_reader = None;

        let call_seed = derive_seed(master_seed, &["generate", &key], &[iteration as u64]);
        let outputs = generator.generate(&segment, generation, call_seed)?;
        debug_assert_eq!(outputs.len(), generation.num_candidates);
        let record = CandidateRecord {
            segment_id: segment.segment_id.clone(),
            system_id: segment.system_id.clone(),
            candidates: outputs.into_iter().map(|o| o.text).collect(),
        };
        summary.candidates += record.candidates.len();
        writer.write(&record)?;
    }
    writer.finish()?;
    if partial_path.exists() {
        std::fs::remove_file(&partial_path).map_err(|e| io_error(&partial_path, e))?;
    }
    Ok(summary)
}

fn io_error(path: &Path, source: std::io::Error) -> DistillError {
    DistillError::Jsonl(JsonlError::Io { path: path.to_path_buf(), source })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ScorePassSummary {
    pub segments: usize,
    pub candidates: usize,
    /// Lossy parse issues across all candidate texts (aliased severities
    /// excluded).
    pub parse_issues: usize,
    /// Segments whose best and worst candidates match as annotations.
    pub equal_pairs: usize,
    /// Mean over segments of the best candidate's MBR score.
    pub mean_best_utility: f64,
    /// Mean over segments of the population variance of candidate scores;
    /// `None` when C < 2.
    pub mean_utility_variance: Option<f64>,
}

/// Parses and MBR-scores a candidates file against its segments corpus,
/// writing one [`ScoredRecord`] per segment in input order. Unparseable
/// candidate texts become empty annotations plus counted issues, never
/// failures.
pub fn score_candidates_file(
    segments_path: &Path,
    candidates_path: &Path,
    out_path: &Path,
    utility: UtilityKind,
) -> Result<ScorePassSummary, DistillError> {
    let mut reader = JsonlReader::<CandidateRecord>::open(candidates_path)?;
    let mut writer = JsonlWriter::<ScoredRecord>::create(out_path)?;

    let mut summary = ScorePassSummary::default();
    let mut best_total = 0.0;
    let mut variance_total = 0.0;
    let mut variance_defined = true;

    for segment in SegmentStream::open(segments_path)? {
        let segment = segment?;
        let record = reader
            .next()
            .ok_or_else(|| DistillError::InconsistentFiles { key: segment.key() })??;
        if record.segment_id != segment.segment_id || record.system_id != segment.system_id {
            return Err(DistillError::InconsistentFiles { key: segment.key() });
        }
        summary.segments += 1;
        summary.candidates += record.candidates.len();
        variance_defined &= record.candidates.len() >= 2;

        let annotations: Vec<_> = record
            .candidates
            .iter()
            .map(|text| {
                let (annotation, issues) = parse_output(text, &segment.translation);
                summary.parse_issues += issues.iter().filter(|i| i.is_lossy()).count();
                annotation
            })
            .collect();
        let set = CandidateSet::new(segment, annotations)?;
        let scored = mbr_score(set, utility)?;

        best_total += scored.scores[scored.best_index];
        if variance_defined {
            variance_total += scored.score_variance();
        }
        summary.equal_pairs += usize::from(scored.best().matches(scored.worst()));

        writer.write(&ScoredRecord {
            segment_id: record.segment_id,
            system_id: record.system_id,
            candidates: record.candidates,
            scores: scored.scores,
            best_index: scored.best_index,
            worst_index: scored.worst_index,
        })?;
    }
    if reader.next().is_some() {
        return Err(DistillError::InconsistentFiles { key: "<extra candidate records>".into() });
    }
    writer.finish()?;

    let n = summary.segments.max(1) as f64;
    summary.mean_best_utility = best_total / n;
    summary.mean_utility_variance =
        (variance_defined && summary.segments > 0).then(|| variance_total / n);
    Ok(summary)
}

/// Rebuilds scored candidate sets from a scored file and emits the dataset
/// for `variant`, one JSONL line per record in segment order. Returns the
/// build report and the records themselves (for mock adaptation).
pub fn build_dataset_file(
    segments_path: &Path,
    scored_path: &Path,
    dataset_path: &Path,
    variant: DatasetVariant,
    iteration: u32,
    prompt_template_id: &str,
) -> Result<(BuildReport, Vec<DistillRecord>), DistillError> {
    let mut reader = JsonlReader::<ScoredRecord>::open(scored_path)?;
    let mut writer = JsonlWriter::<DatasetLine>::create(dataset_path)?;

    let mut report = BuildReport::default();
    let mut records = Vec::new();
    for segment in SegmentStream::open(segments_path)? {
        let segment = segment?;
        let scored_record = reader
            .next()
            .ok_or_else(|| DistillError::InconsistentFiles { key: segment.key() })??;
        if scored_record.segment_id != segment.segment_id
            || scored_record.system_id != segment.system_id
            || scored_record.scores.len() != scored_record.candidates.len()
            || scored_record.best_index >= scored_record.scores.len()
            || scored_record.worst_index >= scored_record.scores.len()
        {
            return Err(DistillError::InconsistentFiles { key: segment.key() });
        }
        report.segments += 1;

        let annotations: Vec<_> = scored_record
            .candidates
            .iter()
            .map(|text| parse_output(text, &segment.translation).0)
            .collect();
        let prompt = render_prompt(prompt_template_id, &segment)?;
        let scored = ScoredCandidateSet {
            base: CandidateSet::new(segment, annotations)?,
            scores: scored_record.scores,
            best_index: scored_record.best_index,
            worst_index: scored_record.worst_index,
        };
        report.equal_pairs += usize::from(scored.best().matches(scored.worst()));

        let segment_records = build_records(&scored, variant, iteration);
        for distill_record in &segment_records {
            writer.write(&DatasetLine::new(&prompt, &distill_record.payload))?;
        }
        records.extend(segment_records);
    }
    if reader.next().is_some() {
        return Err(DistillError::InconsistentFiles { key: "<extra scored records>".into() });
    }
    writer.finish()?;
    report.records = records.len();
    Ok((report, records))
}

/// Runs one full iteration — generate, score, build — and writes the
/// manifest. Segments are processed in input order and every output file
/// preserves that order, so identical inputs and seed give byte-identical
/// outputs.
pub fn run_iteration(
    state: &IterationState,
    generator: &dyn CandidateGenerator,
) -> Result<IterationOutcome, DistillError> {
    generate_candidates_file(
        &state.segments_path,
        &state.candidates_path,
        generator,
        &state.generation,
        state.master_seed,
        state.iteration,
    )?;
    let score_summary = score_candidates_file(
        &state.segments_path,
        &state.candidates_path,
        &state.scored_path,
        state.utility,
    )?;
    let (build_report, records) = build_dataset_file(
        &state.segments_path,
        &state.scored_path,
        &state.dataset_path,
        state.variant,
        state.iteration,
        &state.generation.prompt_template_id,
    )?;

    let manifest = IterationManifest {
        iteration: state.iteration,
        seed: state.master_seed,
        backend: generator.backend_name().to_string(),
        generator_config: state.generation.clone(),
        variant: state.variant,
        utility: state.utility,
        counts: ManifestCounts {
            segments: score_summary.segments,
            candidates: score_summary.candidates,
            records: build_report.records,
            equal_pairs: build_report.equal_pairs,
            parse_issues: score_summary.parse_issues,
        },
        file_paths: ManifestPaths {
            segments: file_name(&state.segments_path),
            candidates: file_name(&state.candidates_path),
            scored: file_name(&state.scored_path),
            dataset: file_name(&state.dataset_path),
        },
        mean_best_utility: score_summary.mean_best_utility,
        mean_utility_variance: score_summary.mean_utility_variance,
    };
    std::fs::write(
        &state.manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )
    .map_err(|e| JsonlError::Io { path: state.manifest_path.clone(), source: e })?;

    Ok(IterationOutcome { manifest, records, next_state: state.advance()? })
}
