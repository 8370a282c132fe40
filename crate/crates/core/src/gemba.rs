//! Parser and renderer for the line-oriented error-span text format.
//!
//! LLM completions (and dataset target strings) describe error annotations
//! one span per line:
//!
//! ```text
//! <severity>: <category?> - "<quote>"
//! <severity>: <category?> - "<quote>" (context: "<context>")
//! ```
//!
//! with the literal token `no-error` standing for an empty annotation.
//! `quote` is the exact substring of the translation the span covers;
//! `context` is a longer substring containing the quote, emitted whenever
//! the quote alone occurs more than once in the translation. Inside quoted
//! strings, `\\`, `\"`, `\n`, `\r` escape backslash, double quote, newline,
//! and carriage return.
//!
//! Resolution of a mention to character offsets:
//!
//! - no context: the first occurrence of the quote, case-sensitive;
//! - with context: the context window is located at its first occurrence in
//!   the translation, then the quote is picked inside the window by the
//!   first applicable rule: the occurrence at the window's end when the
//!   window ends with the quote; the occurrence at the window's start when
//!   it starts with the quote; the last word-aligned occurrence; else the
//!   first occurrence.
//!
//! The word-aligned branch keeps "the `a` in `sat a mat`" pointing at the
//! freestanding word rather than the `a` inside `sat`. The end-anchor
//! branch makes every span expressible: a window running from the start of
//! the translation to the span's end always ends with the quote, so even
//! spans inside runs of repeated characters resolve exactly. The renderer
//! only ever emits a context after checking, with this same resolver, that
//! parsing recovers the exact span.
//!
//! Parsing is total: arbitrary input never panics and always yields a
//! (possibly empty) annotation plus a list of [`ParseIssue`]s describing
//! anything that could not be used.

use crate::types::{Annotation, ErrorSpan, Severity};
use serde::Serialize;

/// Literal line standing for an empty annotation.
pub const NO_ERROR_TOKEN: &str = "no-error";

/// One raw LLM completion for a segment, before parsing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawModelOutput {
    pub segment_id: String,
    pub system_id: String,
    pub text: String,
}

/// One parsed line before offset resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMention {
    pub severity: Severity,
    pub category: Option<String>,
    /// Substring claimed to appear in the translation; non-empty.
    pub quote: String,
    /// Longer substring containing the quote, for disambiguation.
    pub context: Option<String>,
}

/// Non-fatal problem encountered while parsing one output.
///
/// Line numbers are 1-based over the raw completion text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseIssue {
    /// Line did not match the grammar at all.
    MalformedLine { line: usize, content: String },
    /// Unknown severity label; line skipped.
    BadSeverityLabel { line: usize, label: String },
    /// Severity label accepted through an alias (e.g. "critical" -> major).
    SeverityAliased { line: usize, label: String },
    /// Quote was the empty string; mention dropped.
    EmptyQuote { line: usize },
    /// Quote does not occur in the translation; mention dropped.
    UnmatchedQuote { line: usize, quote: String },
    /// Context clause present but the context never occurs in the
    /// translation; resolution fell back to the quote alone.
    ContextNotFound { line: usize, context: String },
    /// Context found, but the quote does not occur inside its window;
    /// resolution fell back to the quote alone.
    QuoteOutsideContext { line: usize, quote: String },
    /// The quote occurs several times and the context clause could not pin
    /// it down; resolved by the first-occurrence rule.
    AmbiguousQuote { line: usize, quote: String, occurrences: usize, resolved_start: usize },
}

impl ParseIssue {
    /// Aliased severities and similar notes do not affect the resolved
    /// annotation; everything else signals content that was reinterpreted
    /// or dropped.
    pub fn is_lossy(&self) -> bool {
        !matches!(self, ParseIssue::SeverityAliased { .. })
    }
}

// ---------------------------------------------------------------------------
// Char-indexed text
// ---------------------------------------------------------------------------

/// Translation text addressed by Unicode scalar values.
struct CharText {
    chars: Vec<char>,
}

impl CharText {
    fn new(text: &str) -> Self {
        Self { chars: text.chars().collect() }
    }

    fn len(&self) -> usize {
        self.chars.len()
    }

    fn slice(&self, start: usize, end: usize) -> &[char] {
        &self.chars[start..end]
    }

    /// All start indices of `needle`, overlapping matches included.
    fn occurrences(&self, needle: &[char]) -> Vec<usize> {
        if needle.is_empty() || needle.len() > self.chars.len() {
            return Vec::new();
        }
        (0..=self.chars.len() - needle.len())
            .filter(|&i| &self.chars[i..i + needle.len()] == needle)
            .collect()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// An occurrence `[start, end)` is word-aligned when both neighbours (in
/// the full translation) are absent or non-alphanumeric.
fn word_aligned(chars: &[char], start: usize, end: usize) -> bool {
    (start == 0 || !is_word_char(chars[start - 1]))
        && (end == chars.len() || !is_word_char(chars[end]))
}

// ---------------------------------------------------------------------------
// Quoted-string escaping
// ---------------------------------------------------------------------------

fn escape_quoted(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            other => out.push(other),
        }
    }
    out
}

/// Scans a quoted string starting just after the opening `"`. Returns the
/// unescaped content and the index one past the closing quote, or `None`
/// when the quote never closes.
fn scan_quoted(chars: &[char], mut i: usize) -> Option<(String, usize)> {
    let mut out = String::new();
    while i < chars.len() {
        match chars[i] {
            '"' => return Some((out, i + 1)),
            '\\' if i + 1 < chars.len() => {
                match chars[i + 1] {
                    '"' => out.push('"'),
                    '\\' => out.push('\\'),
                    'n' => out.push('\n'),
                    'r' => out.push('\r'),
                    't' => out.push('\t'),
                    other => {
                        // Unknown escape: keep both characters verbatim.
                        out.push('\\');
                        out.push(other);
                    }
                }
                i += 2;
            }
            other => {
                out.push(other);
                i += 1;
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Mention resolution
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ResolvedSpan {
    start: usize,
    end: usize,
}

/// Picks the occurrence of the quote inside a located context window
/// `[window_start, window_end)`. `candidates` holds the global start
/// indices of every quote occurrence fully inside the window, ascending.
fn pick_within_window(
    translation: &CharText,
    quote_len: usize,
    window_start: usize,
    window_end: usize,
    candidates: &[usize],
) -> usize {
    debug_assert!(!candidates.is_empty());
    // End-anchored: the window was cut to end exactly at the span.
    if candidates.contains(&(window_end - quote_len)) {
        return window_end - quote_len;
    }
    // Start-anchored, symmetrically.
    if candidates.contains(&window_start) {
        return window_start;
    }
    // Prefer occurrences that look like standalone words.
    if let Some(&aligned) = candidates
        .iter()
        .rev()
        .find(|&&s| word_aligned(&translation.chars, s, s + quote_len))
    {
        return aligned;
    }
    candidates[0]
}

fn resolve_mention(
    translation: &CharText,
    quote: &[char],
    context: Option<&[char]>,
    line: usize,
    issues: &mut Vec<ParseIssue>,
) -> Option<ResolvedSpan> {
    let occurrences = translation.occurrences(quote);
    if occurrences.is_empty() {
        issues.push(ParseIssue::UnmatchedQuote {
            line,
            quote: quote.iter().collect(),
        });
        return None;
    }

    let mut context_failed = false;
    if let Some(ctx) = context {
        let ctx_occurrences = translation.occurrences(ctx);
        if let Some(&window_start) = ctx_occurrences.first() {
            let window_end = window_start + ctx.len();
            let inside: Vec<usize> = occurrences
                .iter()
                .copied()
                .filter(|&s| s >= window_start && s + quote.len() <= window_end)
                .collect();
            if inside.is_empty() {
                issues.push(ParseIssue::QuoteOutsideContext {
                    line,
                    quote: quote.iter().collect(),
                });
                context_failed = true;
            } else {
                let start =
                    pick_within_window(translation, quote.len(), window_start, window_end, &inside);
                return Some(ResolvedSpan { start, end: start + quote.len() });
            }
        } else {
            issues.push(ParseIssue::ContextNotFound {
                line,
                context: ctx.iter().collect(),
            });
            context_failed = true;
        }
    }

    // No usable context: first occurrence, case-sensitive.
    let start = occurrences[0];
    if context_failed && occurrences.len() > 1 {
        issues.push(ParseIssue::AmbiguousQuote {
            line,
            quote: quote.iter().collect(),
            occurrences: occurrences.len(),
            resolved_start: start,
        });
    }
    Some(ResolvedSpan { start, end: start + quote.len() })
}

// ---------------------------------------------------------------------------
// Line parsing
// ---------------------------------------------------------------------------

fn parse_line(line: &str, line_no: usize, issues: &mut Vec<ParseIssue>) -> Option<SpanMention> {
    let trimmed = line.trim();
    let chars: Vec<char> = trimmed.chars().collect();

    let colon = match chars.iter().position(|&c| c == ':') {
        Some(colon) => colon,
        None => {
            issues.push(ParseIssue::MalformedLine { line: line_no, content: trimmed.to_string() });
            return None;
        }
    };
    let label: String = chars[..colon].iter().collect();
    let severity = match Severity::from_label(&label) {
        Some((severity, aliased)) => {
            if aliased {
                issues.push(ParseIssue::SeverityAliased { line: line_no, label: label.trim().to_string() });
            }
            severity
        }
        None => {
            issues.push(ParseIssue::BadSeverityLabel { line: line_no, label: label.trim().to_string() });
            return None;
        }
    };

    let rest = &chars[colon + 1..];
    let open = match rest.iter().position(|&c| c == '"') {
        Some(open) => open,
        None => {
            issues.push(ParseIssue::MalformedLine { line: line_no, content: trimmed.to_string() });
            return None;
        }
    };
    let before: String = rest[..open].iter().collect();
    let category = {
        let trimmed_before = before.trim();
        let without_dash = trimmed_before.strip_suffix('-').unwrap_or(trimmed_before).trim();
        if without_dash.is_empty() { None } else { Some(without_dash.to_string()) }
    };

    let (quote, after_quote) = match scan_quoted(rest, open + 1) {
        Some(parsed) => parsed,
        None => {
            issues.push(ParseIssue::MalformedLine { line: line_no, content: trimmed.to_string() });
            return None;
        }
    };
    if quote.is_empty() {
        issues.push(ParseIssue::EmptyQuote { line: line_no });
        return None;
    }

    // Optional ` (context: "...")` clause; anything else trailing is noise
    // and ignored.
    let mut context = None;
    let tail: String = rest[after_quote..].iter().collect();
    let tail_trimmed = tail.trim_start();
    if let Some(clause) = tail_trimmed.strip_prefix('(') {
        let clause = clause.trim_start();
        if let Some(after_kw) = clause.strip_prefix("context") {
            if let Some(after_colon) = after_kw.trim_start().strip_prefix(':') {
                let ctx_chars: Vec<char> = after_colon.chars().collect();
                if let Some(ctx_open) = ctx_chars.iter().position(|&c| c == '"') {
                    if let Some((ctx, _)) = scan_quoted(&ctx_chars, ctx_open + 1) {
                        if !ctx.is_empty() {
                            context = Some(ctx);
                        }
                    }
                }
            }
        }
    }

    Some(SpanMention { severity, category, quote, context })
}

// ---------------------------------------------------------------------------
// Public parse entry point
// ---------------------------------------------------------------------------

/// Parses one LLM completion into a canonical annotation over `translation`.
///
/// Total over arbitrary input: never panics, never fails. Every mention
/// that cannot be resolved is reported through the issue list rather than
/// silently dropped.
pub fn parse_output(text: &str, translation: &str) -> (Annotation, Vec<ParseIssue>) {
    let mut issues = Vec::new();
    let translation = CharText::new(translation);

    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();

    let is_no_error = |l: &str| l.trim().eq_ignore_ascii_case(NO_ERROR_TOKEN);
    if lines.is_empty() || (lines.len() == 1 && is_no_error(lines[0].1)) {
        return (Annotation::empty(), issues);
    }

    let mut spans = Vec::new();
    for (line_no, line) in lines {
        if is_no_error(line) {
            // A no-error token mixed in with error lines is contradictory.
            issues.push(ParseIssue::MalformedLine { line: line_no, content: line.trim().to_string() });
            continue;
        }
        let Some(mention) = parse_line(line, line_no, &mut issues) else {
            continue;
        };
        let quote: Vec<char> = mention.quote.chars().collect();
        let context: Option<Vec<char>> = mention.context.as_ref().map(|c| c.chars().collect());
        if let Some(resolved) =
            resolve_mention(&translation, &quote, context.as_deref(), line_no, &mut issues)
        {
            spans.push(ErrorSpan {
                start: resolved.start,
                end: resolved.end,
                severity: mention.severity,
                category: mention.category,
            });
        }
    }
    (Annotation::new(spans), issues)
}

impl RawModelOutput {
    pub fn parse(&self, translation: &str) -> (Annotation, Vec<ParseIssue>) {
        parse_output(&self.text, translation)
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Candidate context windows around a span, smallest plausible first:
/// word-by-word extensions (up to 10 words per side), the whole
/// translation, then character-granular extensions for adversarial texts
/// the word ladder cannot pin down.
fn context_candidates(chars: &CharText, start: usize, end: usize) -> Vec<(usize, usize)> {
    let len = chars.len();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |a: usize, b: usize, quote_len: usize, out: &mut Vec<(usize, usize)>| {
        if b - a > quote_len && b <= len && seen.insert((a, b)) {
            out.push((a, b));
        }
    };
    let quote_len = end - start;

    // Snap outward to the surrounding non-whitespace runs.
    let mut a = start;
    while a > 0 && !chars.chars[a - 1].is_whitespace() {
        a -= 1;
    }
    let mut b = end;
    while b < len && !chars.chars[b].is_whitespace() {
        b += 1;
    }
    push(a, b, quote_len, &mut out);

    // Extend one whitespace-separated word per side per step.
    let (mut wa, mut wb) = (a, b);
    for _ in 0..10 {
        while wa > 0 && chars.chars[wa - 1].is_whitespace() {
            wa -= 1;
        }
        while wa > 0 && !chars.chars[wa - 1].is_whitespace() {
            wa -= 1;
        }
        while wb < len && chars.chars[wb].is_whitespace() {
            wb += 1;
        }
        while wb < len && !chars.chars[wb].is_whitespace() {
            wb += 1;
        }
        push(wa, wb, quote_len, &mut out);
        if wa == 0 && wb == len {
            break;
        }
    }

    push(0, len, quote_len, &mut out);

    // Character-granular fallbacks. Windows ending exactly at the span end
    // make the span the last quote occurrence inside the window, which the
    // resolver prefers, so these almost always terminate the search.
    for left in 1..=start {
        push(start - left, end, quote_len, &mut out);
    }
    for right in 1..=len - end {
        push(start, end + right, quote_len, &mut out);
    }
    // Exhaustive two-sided scan, ascending total size; adversarial inputs
    // only, so skip for long texts.
    if len <= 2048 {
        for extra in 2..=start + (len - end) {
            for left in 1..extra.min(start + 1) {
                let right = extra - left;
                if right >= 1 && right <= len - end {
                    push(start - left, end + right, quote_len, &mut out);
                }
            }
        }
    }
    out
}

fn render_line(severity: Severity, category: Option<&str>, quote: &str, context: Option<&str>) -> String {
    let mut line = match category {
        Some(category) => format!("{}: {} - \"{}\"", severity.label(), category, escape_quoted(quote)),
        None => format!("{}: - \"{}\"", severity.label(), escape_quoted(quote)),
    };
    if let Some(context) = context {
        line.push_str(&format!(" (context: \"{}\")", escape_quoted(context)));
    }
    line
}

/// Renders a canonical annotation back to the line format, one span per
/// line in canonical order, `no-error` for the empty annotation.
///
/// A disambiguation context is attached whenever the quoted substring
/// occurs more than once in the translation. Candidate windows are checked
/// by running the parser's own resolver, so for every span the emitted line
/// parses back to exactly that span.
pub fn render_annotation(annotation: &Annotation, translation: &str) -> String {
    if annotation.is_empty() {
        return NO_ERROR_TOKEN.to_string();
    }
    let chars = CharText::new(translation);
    let mut lines = Vec::with_capacity(annotation.len());
    for span in annotation.spans() {
        if span.end > chars.len() || span.start >= span.end {
            debug_assert!(false, "render_annotation called with invalid span {span:?}");
            continue;
        }
        let quote_chars = chars.slice(span.start, span.end);
        let quote: String = quote_chars.iter().collect();
        let occurrences = chars.occurrences(quote_chars);
        let context = if occurrences.len() <= 1 {
            None
        } else {
            let target = ResolvedSpan { start: span.start, end: span.end };
            context_candidates(&chars, span.start, span.end)
                .into_iter()
                .find(|&(a, b)| {
                    let mut probe_issues = Vec::new();
                    let resolved = resolve_mention(
                        &chars,
                        quote_chars,
                        Some(chars.slice(a, b)),
                        0,
                        &mut probe_issues,
                    );
                    probe_issues.is_empty() && resolved == Some(target)
                })
                .map(|(a, b)| chars.slice(a, b).iter().collect::<String>())
        };
        // No verifying window exists only when the span is the first
        // occurrence of its quote, which the bare quote already resolves to.
        lines.push(render_line(span.severity, span.category.as_deref(), &quote, context.as_deref()));
    }
    lines.join("\n")
}
