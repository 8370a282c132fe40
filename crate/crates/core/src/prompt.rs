//! Prompt templates for candidate generation.
//!
//! Templates are data, not logic: a registry of named template strings with
//! `{source_lang}`, `{target_lang}`, `{source}`, and `{translation}`
//! placeholders. Dataset prompt fields and LLM requests are rendered from
//! the same template, so the id recorded in a run manifest pins the exact
//! prompt text.

use crate::types::Segment;
use thiserror::Error;

/// Default template id.
pub const DEFAULT_TEMPLATE_ID: &str = "gemba-mqm-v1";

/// Error-span annotation prompt in the MQM style: identify spans, grade
/// severity, quote exactly, add context when the quote repeats.
const GEMBA_MQM_V1: &str = r#"You are an annotator for the quality of machine translation. Your task is to identify errors and assess the quality of the translation.

{source_lang} source:
```{source}```
{target_lang} translation:
```{translation}```

Based on the source segment and machine translation surrounded with triple backticks, identify error spans in the translation. Each error has a severity (minor or major) and an MQM category such as accuracy/mistranslation, accuracy/omission, fluency/grammar, fluency/punctuation, style/awkward, or terminology/inappropriate.

Report one error per line in exactly this format:
<severity>: <category> - "<exact substring of the translation>"

If the quoted substring appears more than once in the translation, append a disambiguating clause: (context: "<longer substring containing the quote>")

If the translation contains no errors, reply with the single line:
no-error"#;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown prompt template id {id:?}")]
pub struct UnknownTemplate {
    pub id: String,
}

/// Looks up a built-in template by id.
pub fn template_by_id(id: &str) -> Result<&'static str, UnknownTemplate> {
    match id {
        DEFAULT_TEMPLATE_ID => Ok(GEMBA_MQM_V1),
        _ => Err(UnknownTemplate { id: id.to_string() }),
    }
}

/// Fills a template's placeholders from a segment.
pub fn fill_template(template: &str, segment: &Segment) -> String {
    template
        .replace("{source_lang}", &segment.source_lang)
        .replace("{target_lang}", &segment.target_lang)
        .replace("{source}", &segment.source)
        .replace("{translation}", &segment.translation)
}

/// Renders the prompt for a segment from a registered template id.
pub fn render_prompt(template_id: &str, segment: &Segment) -> Result<String, UnknownTemplate> {
    Ok(fill_template(template_by_id(template_id)?, segment))
}
