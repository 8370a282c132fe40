//! Subcommand implementations.

use crate::config::{BackendKind, PipelineConfig};
use crate::error::{CliError, ErrorKind};
use clap::Args;
use esd_distill::distill::{
    adaptation_examples, build_dataset_file, generate_candidates_file, run_iteration,
    score_candidates_file, DatasetVariant, IterationManifest, IterationState, ManifestCounts,
    ManifestPaths,
};
use esd_distill::generate::{adapt_mock, MockGeneratorSpec};
use esd_distill::jsonl::{read_jsonl, write_jsonl, JsonlReader};
use esd_distill::loss::{dpo_loss, kto_loss, kto_value, sft_loss, KtoConfig, PolicyLogProbs};
use esd_distill::metaeval::{evaluate_corpus, EvaluateOptions};
use esd_distill::types::{AnnotationRecord, Segment};
use esd_distill::utility::UtilityKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum UtilityArg {
    #[value(name = "soft_f1")]
    SoftF1,
    #[value(name = "exact_f1")]
    ExactF1,
}

impl From<UtilityArg> for UtilityKind {
    fn from(arg: UtilityArg) -> Self {
        match arg {
            UtilityArg::SoftF1 => UtilityKind::SoftF1,
            UtilityArg::ExactF1 => UtilityKind::ExactF1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum VariantArg {
    Sft,
    Dpo,
    Kto,
}

impl From<VariantArg> for DatasetVariant {
    fn from(arg: VariantArg) -> Self {
        match arg {
            VariantArg::Sft => DatasetVariant::Sft,
            VariantArg::Dpo => DatasetVariant::Dpo,
            VariantArg::Kto => DatasetVariant::Kto,
        }
    }
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Sample candidate annotations for every segment.
#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Segments JSONL (the unlabeled corpus).
    #[arg(long)]
    pub segments: PathBuf,
    /// Output candidates JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Pipeline config JSON; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Candidates per segment (C).
    #[arg(long)]
    pub candidates: Option<usize>,
    /// Master seed; per-segment streams are derived from it.
    #[arg(long)]
    pub seed: u64,
    /// Iteration index used in seed derivation.
    #[arg(long, default_value_t = 1)]
    pub iteration: u32,
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let mut config = PipelineConfig::load(args.config.as_deref())?;
    if let Some(backend) = args.backend {
        config.backend = backend;
    }
    if let Some(candidates) = args.candidates {
        config.generation.num_candidates = candidates;
    }
    let generator = config.build_generator()?;
    let summary = generate_candidates_file(
        &args.segments,
        &args.out,
        generator.as_ref(),
        &config.generation,
        args.seed,
        args.iteration,
    )?;
    println!(
        "generate: {} segments, {} candidates ({} reused) -> {}",
        summary.segments,
        summary.candidates,
        summary.resumed,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

/// MBR-score a candidates file.
#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long)]
    pub candidates: PathBuf,
    /// Output scored JSONL.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "soft_f1")]
    pub utility: UtilityArg,
    /// Also report the mean per-segment variance of candidate scores.
    #[arg(long)]
    pub variance: bool,
}

pub fn score(args: ScoreArgs) -> Result<(), CliError> {
    let summary =
        score_candidates_file(&args.segments, &args.candidates, &args.out, args.utility.into())?;
    println!(
        "score: {} segments, {} candidates, mean best utility {:.6} -> {}",
        summary.segments,
        summary.candidates,
        summary.mean_best_utility,
        args.out.display()
    );
    if args.variance {
        match summary.mean_utility_variance {
            Some(variance) => println!("mean_utility_variance={variance:.10e}"),
            None => println!("mean_utility_variance=undefined (needs C >= 2)"),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// build-dataset
// ---------------------------------------------------------------------------

/// Turn scored candidate sets into a training dataset.
#[derive(Args, Debug)]
pub struct BuildDatasetArgs {
    #[arg(long)]
    pub segments: PathBuf,
    #[arg(long)]
    pub scored: PathBuf,
    /// Output dataset JSONL.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    /// Also write an iteration manifest here.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub iteration: u32,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn build_dataset(args: BuildDatasetArgs) -> Result<(), CliError> {
    let config = PipelineConfig::load(args.config.as_deref())?;
    let variant: DatasetVariant = args.variant.into();
    let (report, _records) = build_dataset_file(
        &args.segments,
        &args.scored,
        &args.out,
        variant,
        args.iteration,
        &config.generation.prompt_template_id,
    )?;
    println!(
        "build-dataset [{}]: {} segments -> {} records ({} equal best/worst pairs) -> {}",
        variant.label(),
        report.segments,
        report.records,
        report.equal_pairs,
        args.out.display()
    );

    if let Some(manifest_path) = &args.manifest {
        // Scores were computed upstream; recover the utility summaries from
        // the scored file so the manifest is self-contained.
        let summary = summarize_scored(&args.scored)?;
        let manifest = IterationManifest {
            iteration: args.iteration,
            seed: args.seed.unwrap_or(config.master_seed),
            backend: "precomputed".into(),
            generator_config: config.generation.clone(),
            variant,
            utility: config.utility,
            counts: ManifestCounts {
                segments: report.segments,
                candidates: summary.candidates,
                records: report.records,
                equal_pairs: report.equal_pairs,
                parse_issues: 0,
            },
            file_paths: ManifestPaths {
                segments: file_name(&args.segments),
                candidates: String::new(),
                scored: file_name(&args.scored),
                dataset: file_name(&args.out),
            },
            mean_best_utility: summary.mean_best_utility,
            mean_utility_variance: summary.mean_utility_variance,
        };
        write_pretty_json(manifest_path, &manifest)?;
        println!("manifest -> {}", manifest_path.display());
    }
    Ok(())
}

struct ScoredSummary {
    candidates: usize,
    mean_best_utility: f64,
    mean_utility_variance: Option<f64>,
}

fn summarize_scored(path: &Path) -> Result<ScoredSummary, CliError> {
    let reader = JsonlReader::<esd_distill::mbr::ScoredRecord>::open(path)?;
    let mut candidates = 0usize;
    let mut segments = 0usize;
    let mut best_total = 0.0;
    let mut variance_total = 0.0;
    let mut variance_defined = true;
    for record in reader {
        let record = record?;
        segments += 1;
        candidates += record.candidates.len();
        best_total += record.scores.get(record.best_index).copied().unwrap_or(0.0);
        let n = record.scores.len();
        if n < 2 {
            variance_defined = false;
        } else {
            let mean = record.scores.iter().sum::<f64>() / n as f64;
            variance_total +=
                record.scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        }
    }
    let n = segments.max(1) as f64;
    Ok(ScoredSummary {
        candidates,
        mean_best_utility: best_total / n,
        mean_utility_variance: (variance_defined && segments > 0).then(|| variance_total / n),
    })
}

// ---------------------------------------------------------------------------
// loop
// ---------------------------------------------------------------------------

/// Run the full generate -> score -> build cycle for T iterations.
#[derive(Args, Debug)]
pub struct LoopArgs {
    /// Pipeline config JSON (backend, generation, paths).
    #[arg(long)]
    pub config: PathBuf,
    /// Resume token written by a previous http-mode run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<u32>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub segments: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    pub utility: Option<UtilityArg>,
}

/// Resume token: the next iteration's state plus, in mock mode, the
/// adapted generator spec that stands in for the fine-tuned weights.
#[derive(Serialize, Deserialize)]
struct LoopToken {
    state: IterationState,
    mock_spec: Option<MockGeneratorSpec>,
}

/// Per-run summary written to `loop_summary.json`.
#[derive(Serialize)]
struct LoopSummary<'a> {
    iterations: &'a [IterationManifest],
}

pub fn run_loop(args: LoopArgs) -> Result<(), CliError> {
    let mut config = PipelineConfig::load(Some(&args.config))?;
    if let Some(variant) = args.variant {
        config.variant = variant.into();
    }
    if let Some(utility) = args.utility {
        config.utility = utility.into();
    }
    if let Some(iterations) = args.iterations {
        config.iterations = iterations;
    }
    if config.iterations < 1 {
        return Err(CliError::validation("iterations must be >= 1"));
    }

    let (mut state, mut mock_spec) = match &args.resume {
        Some(token_path) => {
            let text = std::fs::read_to_string(token_path).map_err(|e| CliError {
                kind: ErrorKind::Io,
                message: format!("{}: {e}", token_path.display()),
            })?;
            let token: LoopToken = serde_json::from_str(&text).map_err(|e| {
                CliError::validation(format!("{}: invalid resume token: {e}", token_path.display()))
            })?;
            let spec = token.mock_spec.unwrap_or_else(|| config.mock.clone());
            (token.state, spec)
        }
        None => {
            let segments = args
                .segments
                .clone()
                .or_else(|| config.segments.clone())
                .ok_or_else(|| CliError::usage("--segments (or config.segments) is required"))?;
            let output_dir = args
                .output_dir
                .clone()
                .or_else(|| config.output_dir.clone())
                .ok_or_else(|| CliError::usage("--output-dir (or config.output_dir) is required"))?;
            let seed = args
                .seed
                .ok_or_else(|| CliError::usage("--seed is required when starting a loop"))?;
            std::fs::create_dir_all(&output_dir)?;
            let state = IterationState::plan(
                &output_dir,
                &segments,
                1,
                config.iterations,
                seed,
                config.variant,
                config.utility,
                config.generation.clone(),
            )?;
            (state, config.mock.clone())
        }
    };

    let mut manifests = Vec::new();
    loop {
        config.mock = mock_spec.clone();
        let generator = config.build_generator()?;
        let outcome = run_iteration(&state, generator.as_ref())?;
        let manifest = outcome.manifest;
        match manifest.mean_utility_variance {
            Some(variance) => println!(
                "iteration {}: {} records, mean best utility {:.6}, utility variance {:.6e}",
                manifest.iteration, manifest.counts.records, manifest.mean_best_utility, variance
            ),
            None => println!(
                "iteration {}: {} records, mean best utility {:.6}",
                manifest.iteration, manifest.counts.records, manifest.mean_best_utility
            ),
        }
        manifests.push(manifest);

        let Some(next_state) = outcome.next_state else {
            break;
        };

        match config.backend {
            BackendKind::Mock => {
                // Stand-in for the external training step: shift the mock
                // toward the dataset it just emitted.
                mock_spec = adapt_mock(&mock_spec, adaptation_examples(&outcome.records));
                state = next_state;
            }
            BackendKind::Http => {
                // External training happens now; hand back a resume token
                // pointing at the next iteration.
                let token = LoopToken { state: next_state.clone(), mock_spec: None };
                let token_path = state
                    .output_dir
                    .join(format!("resume_{:03}.json", next_state.iteration));
                write_pretty_json(&token_path, &token)?;
                write_pretty_json(
                    &state.output_dir.join("loop_summary.json"),
                    &LoopSummary { iterations: &manifests },
                )?;
                println!(
                    "dataset for iteration {} emitted; fine-tune externally, then resume with:",
                    state.iteration
                );
                println!("  --resume {}", token_path.display());
                return Ok(());
            }
        }
    }

    let summary_path = state.output_dir.join("loop_summary.json");
    write_pretty_json(&summary_path, &LoopSummary { iterations: &manifests })?;
    println!("loop complete: {} iterations, summary -> {}", manifests.len(), summary_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Compare predicted annotations against gold at system, sentence, and
/// span level.
#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub segments: PathBuf,
    /// Predicted annotations JSONL.
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold annotations JSONL.
    #[arg(long)]
    pub gold: PathBuf,
    /// Rival predictions for significance tests.
    #[arg(long)]
    pub pred_b: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub permutations: usize,
    #[arg(long, default_value_t = 999)]
    pub resamples: usize,
    /// Write the full JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let segments: Vec<Segment> = read_jsonl(&args.segments)?;
    let predictions: Vec<AnnotationRecord> = read_jsonl(&args.pred)?;
    let gold: Vec<AnnotationRecord> = read_jsonl(&args.gold)?;
    let predictions_b: Option<Vec<AnnotationRecord>> =
        args.pred_b.as_deref().map(read_jsonl).transpose()?;

    let report = evaluate_corpus(
        &segments,
        &predictions,
        &gold,
        predictions_b.as_deref(),
        EvaluateOptions {
            permutations: args.permutations,
            resamples: args.resamples,
            seed: args.seed,
        },
    )?;
    print!("{}", report.table());
    if let Some(out) = &args.out {
        write_pretty_json(out, &report)?;
        println!("report -> {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// verify-loss
// ---------------------------------------------------------------------------

/// Evaluate reference loss cases from a JSONL file.
#[derive(Args, Debug)]
pub struct VerifyLossArgs {
    /// Cases JSONL; each line is one tagged case (op: sft | dpo |
    /// kto_value | kto_loss).
    #[arg(long)]
    pub cases: PathBuf,
    /// Also write results as JSONL here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Deserialize)]
struct KtoItemCase {
    policy: f64,
    reference: f64,
    desirable: bool,
}

#[derive(Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum LossCase {
    Sft {
        token_logprobs: Vec<f64>,
    },
    Dpo {
        policy_chosen: f64,
        policy_rejected: f64,
        reference_chosen: f64,
        reference_rejected: f64,
        lambda: f64,
    },
    KtoValue {
        policy: f64,
        reference: f64,
        beta: f64,
        z_ref: f64,
        desirable: bool,
    },
    KtoLoss {
        items: Vec<KtoItemCase>,
        beta: f64,
        #[serde(default = "default_weight")]
        w_desirable: f64,
        #[serde(default = "default_weight")]
        w_undesirable: f64,
        #[serde(default)]
        z_ref: f64,
    },
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Serialize)]
struct LossResult {
    case: usize,
    op: &'static str,
    value: f64,
}

pub fn verify_loss(args: VerifyLossArgs) -> Result<(), CliError> {
    let cases: Vec<LossCase> = read_jsonl(&args.cases)?;
    let mut results = Vec::with_capacity(cases.len());
    for (index, case) in cases.iter().enumerate() {
        let (op, value) = match case {
            LossCase::Sft { token_logprobs } => ("sft", sft_loss(token_logprobs)?),
            LossCase::Dpo {
                policy_chosen,
                policy_rejected,
                reference_chosen,
                reference_rejected,
                lambda,
            } => {
                let pos = PolicyLogProbs::new(*policy_chosen, *reference_chosen)?;
                let neg = PolicyLogProbs::new(*policy_rejected, *reference_rejected)?;
                ("dpo", dpo_loss(pos, neg, *lambda)?)
            }
            LossCase::KtoValue { policy, reference, beta, z_ref, desirable } => {
                let lp = PolicyLogProbs::new(*policy, *reference)?;
                let config = KtoConfig::new(*beta, 1.0, 1.0, *z_ref)?;
                ("kto_value", kto_value(lp, &config, *desirable))
            }
            LossCase::KtoLoss { items, beta, w_desirable, w_undesirable, z_ref } => {
                let config = KtoConfig::new(*beta, *w_desirable, *w_undesirable, *z_ref)?;
                let pairs = items
                    .iter()
                    .map(|item| {
                        PolicyLogProbs::new(item.policy, item.reference)
                            .map(|lp| (lp, item.desirable))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                ("kto_loss", kto_loss(&pairs, &config)?)
            }
        };
        let result = LossResult { case: index + 1, op, value };
        println!("{}", serde_json::to_string(&result).expect("result serializes"));
        results.push(result);
    }
    if let Some(out) = &args.out {
        write_jsonl(out, results.iter())?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers
// ---------------------------------------------------------------------------

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::validation(format!("serialization failed: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError {
        kind: ErrorKind::Io,
        message: format!("{}: {e}", path.display()),
    })
}
