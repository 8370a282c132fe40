//! Candidate generation backends.
//!
//! [`CandidateGenerator`] produces C raw completions per segment. Two
//! implementations:
//!
//! - [`HttpGenerator`]: a chat-completions-style HTTP client with bounded
//!   concurrency, per-request timeout, and jittered exponential backoff on
//!   retryable failures. Sampling parameters (top_k, temperature) pass
//!   through to the server verbatim; the client never samples tokens
//!   itself. The API key comes from an environment variable and never
//!   appears in config files or manifests.
//! - [`MockGenerator`]: a deterministic stand-in for desk-scale runs and
//!   closed-loop tests. Each segment has a stable latent "belief"
//!   annotation derived from the spec seed; candidates are noisy samples
//!   around the belief (or around a learned anchor), rendered through the
//!   line grammar so every output parses cleanly. Adapting the mock toward
//!   a dataset raises the anchor weight and shrinks the noise rates, which
//!   is what drives candidate diversity down across iterations.

use crate::gemba::{parse_output, render_annotation, RawModelOutput};
use crate::prompt::{render_prompt, UnknownTemplate};
use crate::seed::derive_seed;
use crate::types::{Annotation, ErrorSpan, Segment, Severity};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("invalid generation config: {reason}")]
    InvalidConfig { reason: String },
    #[error(transparent)]
    Template(#[from] UnknownTemplate),
    #[error("generation failed for segment {segment_id}: {cause}")]
    GenerationFailure { segment_id: String, cause: String },
}

/// Sampling and transport parameters for candidate generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    /// Candidates per segment (C).
    pub num_candidates: usize,
    pub top_k: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    pub prompt_template_id: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_candidates: 256,
            top_k: 10,
            temperature: 2.0,
            max_tokens: 512,
            request_timeout_secs: 60,
            max_retries: 3,
            max_concurrent_requests: 8,
            prompt_template_id: crate::prompt::DEFAULT_TEMPLATE_ID.to_string(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerateError> {
        if self.num_candidates < 1 {
            return Err(GenerateError::InvalidConfig { reason: "num_candidates must be >= 1".into() });
        }
        if self.temperature <= 0.0 || self.temperature.is_nan() {
            return Err(GenerateError::InvalidConfig { reason: "temperature must be > 0".into() });
        }
        if self.top_k < 1 {
            return Err(GenerateError::InvalidConfig { reason: "top_k must be >= 1".into() });
        }
        if self.max_concurrent_requests < 1 {
            return Err(GenerateError::InvalidConfig {
                reason: "max_concurrent_requests must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Produces exactly `config.num_candidates` raw outputs for a segment.
/// `seed` selects the sampling sub-stream; HTTP backends ignore it.
pub trait CandidateGenerator: Send + Sync {
    fn generate(
        &self,
        segment: &Segment,
        config: &GenerationConfig,
        seed: u64,
    ) -> Result<Vec<RawModelOutput>, GenerateError>;

    /// Short backend label for manifests.
    fn backend_name(&self) -> &'static str;
}

// ---------------------------------------------------------------------------
// Mock generator
// ---------------------------------------------------------------------------

const CATEGORY_CATALOG: [&str; 6] = [
    "accuracy/mistranslation",
    "accuracy/omission",
    "fluency/grammar",
    "fluency/punctuation",
    "style/awkward",
    "terminology/inappropriate",
];

/// Parameters of the deterministic mock model.
///
/// `anchors` maps a segment key to a rendered annotation the mock has
/// "learned"; a learned anchor replaces the segment's latent belief as the
/// base candidates are sampled around, which is what lets the candidate
/// distribution tighten around dataset targets across iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockGeneratorSpec {
    pub seed: u64,
    /// Probability that a segment's latent belief contains any errors.
    pub error_rate: f64,
    /// Probability that a candidate is corrupted at all; otherwise it
    /// reproduces the base exactly. Keeping this at or below 1/2 makes the
    /// candidate score variance shrink monotonically as it decays, since
    /// the consensus/outlier split contributes ~q(1-q) to the spread.
    pub corruption_rate: f64,
    /// Per-span probability of jittering a boundary by one character.
    pub position_noise: f64,
    /// Per-span probability of flipping the severity.
    pub severity_noise: f64,
    /// Probability of dropping a span (at half this rate) or hallucinating
    /// an extra one.
    pub span_noise: f64,
    /// How strongly one adaptation step moves the spec toward a dataset.
    pub adaptation_rate: f64,
    pub anchors: BTreeMap<String, String>,
}

impl Default for MockGeneratorSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            error_rate: 0.7,
            corruption_rate: 0.5,
            position_noise: 0.35,
            severity_noise: 0.25,
            span_noise: 0.35,
            adaptation_rate: 0.5,
            anchors: BTreeMap::new(),
        }
    }
}

impl MockGeneratorSpec {
    pub fn validate(&self) -> Result<(), GenerateError> {
        for (name, value) in [
            ("error_rate", self.error_rate),
            ("corruption_rate", self.corruption_rate),
            ("position_noise", self.position_noise),
            ("severity_noise", self.severity_noise),
            ("span_noise", self.span_noise),
            ("adaptation_rate", self.adaptation_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(GenerateError::InvalidConfig {
                    reason: format!("{name} must be in [0, 1], got {value}"),
                });
            }
        }
        Ok(())
    }

    /// Stable latent annotation for a segment: a function of the spec seed
    /// and the segment key only, unchanged across iterations.
    fn belief(&self, segment: &Segment) -> Annotation {
        let chars = segment.translation_chars();
        if chars == 0 {
            return Annotation::empty();
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &["belief", &segment.key()], &[]));
        if rng.random::<f64>() >= self.error_rate {
            return Annotation::empty();
        }
        let n_spans = 1 + rng.random_range(0..3usize);
        let spans = (0..n_spans).filter_map(|_| random_span(&mut rng, chars)).collect();
        Annotation::new(spans)
    }

    fn noisy_sample(&self, base: &Annotation, chars: usize, rng: &mut ChaCha8Rng) -> Annotation {
        if rng.random::<f64>() >= self.corruption_rate {
            return base.clone();
        }
        let mut spans = Vec::new();
        for span in base.spans() {
            if rng.random::<f64>() < self.span_noise * 0.5 {
                continue;
            }
            let mut start = span.start;
            let mut end = span.end;
            if rng.random::<f64>() < self.position_noise {
                let left: bool = rng.random();
                if left && start > 0 {
                    start -= 1;
                } else if start + 1 < end {
                    start += 1;
                }
            }
            if rng.random::<f64>() < self.position_noise {
                let grow: bool = rng.random();
                if grow && end < chars {
                    end += 1;
                } else if end > start + 1 {
                    end -= 1;
                }
            }
            let severity = if rng.random::<f64>() < self.severity_noise {
                match span.severity {
                    Severity::Minor => Severity::Major,
                    Severity::Major => Severity::Minor,
                }
            } else {
                span.severity
            };
            spans.push(ErrorSpan { start, end, severity, category: span.category.clone() });
        }
        if chars > 0 && rng.random::<f64>() < self.span_noise {
            if let Some(extra) = random_span(rng, chars) {
                spans.push(extra);
            }
        }
        Annotation::new(spans)
    }
}

fn random_span(rng: &mut ChaCha8Rng, chars: usize) -> Option<ErrorSpan> {
    if chars == 0 {
        return None;
    }
    let start = rng.random_range(0..chars);
    let max_len = (chars - start).min(4);
    let len = 1 + rng.random_range(0..max_len);
    let severity = if rng.random::<bool>() { Severity::Major } else { Severity::Minor };
    let category = if rng.random::<f64>() < 0.8 {
        Some(CATEGORY_CATALOG[rng.random_range(0..CATEGORY_CATALOG.len())].to_string())
    } else {
        None
    };
    Some(ErrorSpan { start, end: start + len, severity, category })
}

/// Deterministic mock backend around a [`MockGeneratorSpec`].
#[derive(Clone, Debug)]
pub struct MockGenerator {
    pub spec: MockGeneratorSpec,
}

impl MockGenerator {
    pub fn new(spec: MockGeneratorSpec) -> Result<Self, GenerateError> {
        spec.validate()?;
        Ok(Self { spec })
    }
}

impl CandidateGenerator for MockGenerator {
    fn generate(
        &self,
        segment: &Segment,
        config: &GenerationConfig,
        seed: u64,
    ) -> Result<Vec<RawModelOutput>, GenerateError> {
        config.validate()?;
        // Prompt rendering is what the real backend would do; resolving it
        // here keeps template errors symmetric across backends.
        render_prompt(&config.prompt_template_id, segment)?;
        let chars = segment.translation_chars();
        // A learned anchor supersedes the latent belief entirely.
        let base = match self.spec.anchors.get(&segment.key()) {
            Some(text) => parse_output(text, &segment.translation).0,
            None => self.spec.belief(segment),
        };

        let mut outputs = Vec::with_capacity(config.num_candidates);
        for candidate in 0..config.num_candidates {
            let stream = derive_seed(
                self.spec.seed,
                &["mock-candidate", &segment.key()],
                &[seed, candidate as u64],
            );
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            let annotation = self.spec.noisy_sample(&base, chars, &mut rng);
            outputs.push(RawModelOutput {
                segment_id: segment.segment_id.clone(),
                system_id: segment.system_id.clone(),
                text: render_annotation(&annotation, &segment.translation),
            });
        }
        Ok(outputs)
    }

    fn backend_name(&self) -> &'static str {
        "mock"
    }
}

/// One dataset example used to adapt the mock.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptationExample {
    pub segment_key: String,
    pub text: String,
    pub desirable: bool,
}

/// Moves a mock spec toward a training dataset: desirable completions
/// become per-segment anchors (superseding the latent belief), undesirable
/// ones evict a matching anchor, and every noise rate shrinks by the
/// adaptation rate. Rate 0 returns the spec unchanged.
pub fn adapt_mock(
    spec: &MockGeneratorSpec,
    examples: impl IntoIterator<Item = AdaptationExample>,
) -> MockGeneratorSpec {
    let mut adapted = spec.clone();
    if spec.adaptation_rate == 0.0 {
        return adapted;
    }
    for example in examples {
        if example.desirable {
            adapted.anchors.insert(example.segment_key, example.text);
        } else if adapted.anchors.get(&example.segment_key).map(String::as_str)
            == Some(example.text.as_str())
        {
            adapted.anchors.remove(&example.segment_key);
        }
    }
    let rate = spec.adaptation_rate;
    adapted.corruption_rate = spec.corruption_rate * (1.0 - rate);
    adapted.position_noise = spec.position_noise * (1.0 - rate);
    adapted.severity_noise = spec.severity_noise * (1.0 - rate);
    adapted.span_noise = spec.span_noise * (1.0 - rate);
    adapted
}

// ---------------------------------------------------------------------------
// HTTP generator
// ---------------------------------------------------------------------------

/// Default environment variable holding the API key.
pub const DEFAULT_API_KEY_ENV: &str = "ESD_API_KEY";

fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

/// Endpoint configuration; safe to serialize into manifests (the key
/// itself stays in the environment).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpGeneratorConfig {
    /// Full chat-completions URL, e.g. `http://host:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_k: u32,
    n: u32,
    max_tokens: u32,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// Chat-completions client issuing one request per candidate under a
/// concurrency bound, reassembling results in request order.
pub struct HttpGenerator {
    config: HttpGeneratorConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpGenerator {
    pub fn new(config: HttpGeneratorConfig) -> Result<Self, GenerateError> {
        let api_key = std::env::var(&config.api_key_env).ok();
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| GenerateError::InvalidConfig { reason: e.to_string() })?;
        Ok(Self { config, client, api_key })
    }

    fn single_request(
        &self,
        prompt: &str,
        config: &GenerationConfig,
        request_index: usize,
    ) -> Result<String, String> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: vec![ChatMessage { role: "user", content: prompt }],
            temperature: config.temperature,
            top_k: config.top_k,
            n: 1,
            max_tokens: config.max_tokens,
        };
        let mut last_error = String::new();
        for attempt in 0..=config.max_retries {
            if attempt > 0 {
                // Exponential backoff with multiplicative jitter. The jitter
                // stream is keyed by request and attempt; it shifts timing
                // only, never content.
                let base_ms = 100u64.saturating_mul(1 << (attempt - 1).min(6));
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    0x6a69_7474,
                    &["backoff"],
                    &[request_index as u64, attempt as u64],
                ));
                let jitter = rng.random_range(0..=base_ms / 2);
                std::thread::sleep(Duration::from_millis(base_ms + jitter));
            }
            let mut request = self
                .client
                .post(&self.config.endpoint)
                .timeout(Duration::from_secs(config.request_timeout_secs))
                .json(&body);
            if let Some(key) = &self.api_key {
                request = request.bearer_auth(key);
            }
            match request.send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return match response.json::<ChatResponse>() {
                            Ok(parsed) => parsed
                                .choices
                                .into_iter()
                                .next()
                                .map(|choice| choice.message.content)
                                .ok_or_else(|| "response carried no choices".to_string()),
                            Err(e) => Err(format!("malformed response body: {e}")),
                        };
                    }
                    last_error = format!("HTTP {status}");
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(last_error);
                    }
                }
                Err(e) => {
                    last_error = format!("transport error: {e}");
                }
            }
        }
        Err(format!("{last_error} (after {} retries)", config.max_retries))
    }
}

impl CandidateGenerator for HttpGenerator {
    fn generate(
        &self,
        segment: &Segment,
        config: &GenerationConfig,
        _seed: u64,
    ) -> Result<Vec<RawModelOutput>, GenerateError> {
        config.validate()?;
        let prompt = render_prompt(&config.prompt_template_id, segment)?;
        let total = config.num_candidates;
        let results: Mutex<Vec<Option<Result<String, String>>>> = Mutex::new(vec![None; total]);
        let next_index = AtomicUsize::new(0);
        let workers = config.max_concurrent_requests.min(total);

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let index = next_index.fetch_add(1, Ordering::SeqCst);
                    if index >= total {
                        break;
                    }
                    let outcome = self.single_request(&prompt, config, index);
                    results.lock().expect("poisoned results")[index] = Some(outcome);
                });
            }
        });

        let results = results.into_inner().expect("poisoned results");
        let mut outputs = Vec::with_capacity(total);
        for slot in results {
            match slot.expect("every request index visited") {
                Ok(text) => outputs.push(RawModelOutput {
                    segment_id: segment.segment_id.clone(),
                    system_id: segment.system_id.clone(),
                    text,
                }),
                Err(cause) => {
                    return Err(GenerateError::GenerationFailure {
                        segment_id: segment.segment_id.clone(),
                        cause,
                    })
                }
            }
        }
        Ok(outputs)
    }

    fn backend_name(&self) -> &'static str {
        "http"
    }
}
