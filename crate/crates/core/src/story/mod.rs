//! Story generation: prompt construction, pluggable generation backends and
//! parsing of the POI markup in generated text.
//!
//! Every place a story mentions is wrapped as `[[POI: name]]`. Mentions are
//! recorded with byte offsets of the whole markup span.

mod remote;
mod template;

use std::fmt::Write as _;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gazetteer::Poi;
use crate::geo::GeoPoint;

pub use remote::{RemoteBackend, RemoteBackendConfig, DEFAULT_TOKEN_ENV};
pub use template::{minimal_template_words, TemplateBackend};

pub const MARKUP_OPEN: &str = "[[POI:";
pub const MARKUP_CLOSE: &str = "]]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoryMode {
    Heatmap,
    SingleTrajectory,
}

impl FromStr for StoryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "heatmap" => Ok(StoryMode::Heatmap),
            "single_trajectory" => Ok(StoryMode::SingleTrajectory),
            other => Err(format!("unknown mode {other:?} (expected heatmap or single_trajectory)")),
        }
    }
}

impl std::fmt::Display for StoryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StoryMode::Heatmap => "heatmap",
            StoryMode::SingleTrajectory => "single_trajectory",
        })
    }
}

/// The constraint contract a story is generated under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrativeSpec {
    pub mode: StoryMode,
    pub audience: String,
    pub max_words: usize,
    pub min_pois: usize,
    pub tone: String,
    pub include_blurbs: bool,
    /// Appended verbatim at the end of the prompt; retry feedback goes here.
    pub extra_instructions: Vec<String>,
}

impl NarrativeSpec {
    pub fn new(mode: StoryMode) -> Self {
        NarrativeSpec {
            mode,
            audience: "a professional analyst".to_string(),
            max_words: 150,
            min_pois: 15,
            tone: "neutral professional".to_string(),
            include_blurbs: false,
            extra_instructions: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_words == 0 {
            return Err("max_words must be positive".into());
        }
        Ok(())
    }
}

/// A located label the template uses for the hero (Act I) and the
/// resolution (Act III).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub label: String,
    pub location: GeoPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryContext {
    pub data_summary: String,
    pub candidate_pois: Vec<Poi>,
    pub region_name: String,
    pub hero: Option<Anchor>,
    pub finale: Option<Anchor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub name: String,
    /// Byte range of the full `[[POI: ...]]` span in the story text.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Story {
    pub text: String,
    pub mentions: Vec<Mention>,
    pub word_count: usize,
    pub spec: NarrativeSpec,
    pub backend_id: String,
}

impl Story {
    /// Parses `text` and fills in mentions and word count.
    pub fn from_text(text: String, spec: NarrativeSpec, backend_id: &str) -> Result<Self, MarkupError> {
        let mentions = extract_mentions(&text)?;
        Ok(Story {
            word_count: count_words(&text),
            mentions,
            text,
            spec,
            backend_id: backend_id.to_string(),
        })
    }

    pub fn plain_text(&self) -> String {
        strip_markup(&self.text).map(|s| s.plain).unwrap_or_else(|_| self.text.clone())
    }

    /// Structured sidecar for export next to the story text.
    pub fn sidecar(&self) -> StorySidecar {
        StorySidecar {
            mentions: self.mentions.clone(),
            word_count: self.word_count,
            backend_id: self.backend_id.clone(),
            spec: self.spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorySidecar {
    pub mentions: Vec<Mention>,
    pub word_count: usize,
    pub backend_id: String,
    pub spec: NarrativeSpec,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MarkupError {
    #[error("unclosed POI markup starting at byte {offset}")]
    Unclosed { offset: usize },
    #[error("POI markup nested inside another span at byte {offset}")]
    Nested { offset: usize },
    #[error("empty POI name at byte {offset}")]
    EmptyName { offset: usize },
}

impl MarkupError {
    pub fn offset(&self) -> usize {
        match self {
            MarkupError::Unclosed { offset } | MarkupError::Nested { offset } | MarkupError::EmptyName { offset } => {
                *offset
            }
        }
    }
}

/// Every `[[POI: name]]` span in document order.
pub fn extract_mentions(text: &str) -> Result<Vec<Mention>, MarkupError> {
    let mut mentions = Vec::new();
    let mut pos = 0;
    while let Some(rel) = text[pos..].find(MARKUP_OPEN) {
        let start = pos + rel;
        let body_start = start + MARKUP_OPEN.len();
        let close = text[body_start..]
            .find(MARKUP_CLOSE)
            .map(|r| body_start + r)
            .ok_or(MarkupError::Unclosed { offset: start })?;
        if let Some(inner) = text[body_start..close].find(MARKUP_OPEN) {
            return Err(MarkupError::Nested {
                offset: body_start + inner,
            });
        }
        let name = text[body_start..close].trim();
        if name.is_empty() {
            return Err(MarkupError::EmptyName { offset: start });
        }
        let end = close + MARKUP_CLOSE.len();
        mentions.push(Mention {
            name: name.to_string(),
            span: start..end,
        });
        pos = end;
    }
    Ok(mentions)
}

/// Wraps a name in POI markup.
pub fn markup(name: &str) -> String {
    format!("{MARKUP_OPEN} {name}{MARKUP_CLOSE}")
}

/// Story text with markup replaced by bare names, plus what is needed to put
/// the markup back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrippedText {
    pub plain: String,
    /// (range of the bare name in `plain`, original markup text)
    pub spans: Vec<(Range<usize>, String)>,
}

impl StrippedText {
    /// Re-inserts the recorded markup, reproducing the original text.
    pub fn restore(&self) -> String {
        let mut out = String::with_capacity(self.plain.len() + self.spans.len() * 10);
        let mut pos = 0;
        for (range, original) in &self.spans {
            out.push_str(&self.plain[pos..range.start]);
            out.push_str(original);
            pos = range.end;
        }
        out.push_str(&self.plain[pos..]);
        out
    }
}

pub fn strip_markup(text: &str) -> Result<StrippedText, MarkupError> {
    let mentions = extract_mentions(text)?;
    let mut plain = String::with_capacity(text.len());
    let mut spans = Vec::with_capacity(mentions.len());
    let mut pos = 0;
    for m in mentions {
        plain.push_str(&text[pos..m.span.start]);
        let start = plain.len();
        plain.push_str(&m.name);
        spans.push((start..plain.len(), text[m.span.clone()].to_string()));
        pos = m.span.end;
    }
    plain.push_str(&text[pos..]);
    Ok(StrippedText { plain, spans })
}

/// Whitespace-token count after removing the markup delimiters (together
/// with the padding just inside them). Hyphenated tokens count once.
pub fn count_words(text: &str) -> usize {
    let mut cleaned = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find(MARKUP_OPEN) {
        cleaned.push_str(&rest[..i]);
        rest = rest[i + MARKUP_OPEN.len()..].trim_start();
    }
    cleaned.push_str(rest);
    let mut out = String::with_capacity(cleaned.len());
    let mut rest = cleaned.as_str();
    while let Some(i) = rest.find(MARKUP_CLOSE) {
        out.push_str(rest[..i].trim_end());
        rest = &rest[i + MARKUP_CLOSE.len()..];
    }
    out.push_str(rest);
    out.split_whitespace().count()
}

/// Renders the generation prompt. Deterministic for equal inputs.
pub fn build_prompt(spec: &NarrativeSpec, ctx: &StoryContext) -> String {
    let mut p = String::new();
    let subject = match spec.mode {
        StoryMode::Heatmap => "a heat map of taxi trip endpoints",
        StoryMode::SingleTrajectory => "the trajectory of a single taxi trip",
    };
    let region = if ctx.region_name.is_empty() {
        "the city".to_string()
    } else {
        format!("the city of {}", ctx.region_name)
    };
    let _ = writeln!(
        p,
        "I will provide a data summary that describes {subject} in {region}. \
         Write a story about the data using cinematic storytelling techniques."
    );
    let _ = writeln!(p, "Your target audience is {}.", spec.audience);
    let _ = writeln!(p, "Use a {} tone.", spec.tone);
    if spec.mode == StoryMode::SingleTrajectory {
        let _ = writeln!(
            p,
            "Mention explicitly major road names, intersections, neighborhoods and local POIs along the route."
        );
    }
    let _ = writeln!(p, "Include at least {} POIs.", spec.min_pois);
    let _ = writeln!(
        p,
        "Highlight the POIs: wrap every POI exactly as {}, for example {}.",
        markup("name"),
        markup(ctx.candidate_pois.first().map_or("Example Square", |poi| poi.name.as_str()))
    );
    if spec.include_blurbs {
        let _ = writeln!(p, "Include some useful information about the POIs.");
    }
    let _ = writeln!(p, "Use at most {} words.", spec.max_words);
    p.push('\n');
    p.push_str("Cinematic structure:\n");
    let hero = ctx.hero.as_ref().map_or("the densest part of the data", |h| h.label.as_str());
    let _ = writeln!(
        p,
        "- Characters come from the data: the hero is {hero}; sidekicks are places that add context; \
         antagonists are factors that work against the hero."
    );
    p.push_str("- Plot in three acts. Act I: introduce the hero and their goal. Act II: present the challenges. Act III: resolve the story with its insights and implications.\n");
    p.push_str("- Only mention places that lie close to the locations in the data summary.\n");
    p.push('\n');
    p.push_str("Data summary:\n");
    p.push_str(ctx.data_summary.trim_end());
    p.push('\n');
    if !ctx.candidate_pois.is_empty() {
        p.push('\n');
        p.push_str("Candidate POIs near the data (name; lon, lat; category; note):\n");
        for poi in &ctx.candidate_pois {
            let _ = writeln!(
                p,
                "- {}; {:.4}, {:.4}; {}; {}",
                poi.name,
                poi.location.lon,
                poi.location.lat,
                poi.category.as_deref().unwrap_or("-"),
                poi.blurb.as_deref().unwrap_or("-")
            );
        }
    }
    if !spec.extra_instructions.is_empty() {
        p.push('\n');
        p.push_str("Additional instructions:\n");
        for extra in &spec.extra_instructions {
            let _ = writeln!(p, "{extra}");
        }
    }
    p
}

/// Everything a backend may draw on: the rendered prompt for text-completion
/// backends, and the structured inputs for the template backend.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub spec: NarrativeSpec,
    pub context: StoryContext,
}

impl GenerationRequest {
    pub fn new(spec: NarrativeSpec, context: StoryContext) -> Self {
        GenerationRequest {
            prompt: build_prompt(&spec, &context),
            spec,
            context,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("story backend transport failure: {0}")]
    Transport(String),
    #[error("story backend protocol error: {0}")]
    Protocol(String),
    #[error("story backend cannot satisfy request: {0}")]
    Precondition(String),
    #[error("story backend misconfigured: {0}")]
    Config(String),
    #[error("scripted backend exhausted after {0} responses")]
    ScriptExhausted(usize),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

/// A story generator.
pub trait StoryBackend: Send + Sync {
    fn id(&self) -> &str;

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError>;

    /// Whether one instance may serve independent requests concurrently.
    fn is_shareable(&self) -> bool {
        true
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoryError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("generated story has malformed markup: {0}")]
    Markup(#[from] MarkupError),
    #[error("generated story has no [[POI: name]] markup")]
    NoMarkup,
}

/// Runs the backend and parses its output.
pub fn generate_story(request: &GenerationRequest, backend: &dyn StoryBackend) -> Result<Story, StoryError> {
    let raw = backend.generate(request)?;
    let story = Story::from_text(raw, request.spec.clone(), backend.id())?;
    if story.mentions.is_empty() && request.spec.min_pois > 0 {
        return Err(StoryError::NoMarkup);
    }
    Ok(story)
}
