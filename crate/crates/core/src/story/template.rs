//! Deterministic three-act story writer used for offline runs and tests.
//!
//! Act I introduces the hero (the top hotspot or the trip origin) beside the
//! nearest candidate place. Act II walks the remaining candidates in order of
//! distance from the hero. Act III resolves at the last candidate, next to
//! the final endpoint. Blurbs are added while the word budget allows and are
//! cut word by word to fit.

use std::collections::HashSet;

use super::{count_words, markup, BackendError, GenerationRequest, NarrativeSpec, StoryBackend, StoryContext};
use crate::gazetteer::{normalize_name, Poi};
use crate::geo::haversine_distance;

#[derive(Debug, Clone, Default)]
pub struct TemplateBackend;

impl TemplateBackend {
    pub fn new() -> Self {
        TemplateBackend
    }

    /// Writes the story for `ctx` under `spec`.
    pub fn write(&self, ctx: &StoryContext, spec: &NarrativeSpec) -> Result<String, BackendError> {
        let ordered = ordered_candidates(ctx);
        if ordered.len() < spec.min_pois {
            return Err(BackendError::Precondition(format!(
                "only {} candidate POIs for a minimum of {}; widen the discovery radius",
                ordered.len(),
                spec.min_pois
            )));
        }
        let minimal = render(ctx, &ordered[..spec.min_pois], &[]);
        if count_words(&minimal) > spec.max_words {
            return Err(BackendError::Precondition(format!(
                "{} POIs need at least {} words, above the cap of {}",
                spec.min_pois,
                count_words(&minimal),
                spec.max_words
            )));
        }
        // Most places that still fit without blurbs.
        let mut n = ordered.len();
        while n > spec.min_pois && count_words(&render(ctx, &ordered[..n], &[])) > spec.max_words {
            n -= 1;
        }
        let chosen = &ordered[..n];
        if !spec.include_blurbs {
            return Ok(render(ctx, chosen, &[]));
        }
        let mut budget = spec.max_words - count_words(&render(ctx, chosen, &[]));
        let blurbs: Vec<String> = chosen
            .iter()
            .map(|poi| {
                let words: Vec<&str> = poi.blurb.as_deref().unwrap_or("").split_whitespace().collect();
                let take = words.len().min(budget);
                budget -= take;
                words[..take].join(" ")
            })
            .collect();
        let text = render(ctx, chosen, &blurbs);
        debug_assert!(count_words(&text) <= spec.max_words);
        Ok(text)
    }
}

impl StoryBackend for TemplateBackend {
    fn id(&self) -> &str {
        "template"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        self.write(&request.context, &request.spec)
    }
}

/// Words of the shortest story the template can write for `min_pois`
/// places taken from `ctx`, or `None` when there are too few candidates.
pub fn minimal_template_words(ctx: &StoryContext, min_pois: usize) -> Option<usize> {
    let ordered = ordered_candidates(ctx);
    (ordered.len() >= min_pois).then(|| count_words(&render(ctx, &ordered[..min_pois], &[])))
}

fn ordered_candidates(ctx: &StoryContext) -> Vec<&Poi> {
    let mut seen = HashSet::new();
    let mut pois: Vec<&Poi> = ctx
        .candidate_pois
        .iter()
        .filter(|p| seen.insert(normalize_name(&p.name)))
        .collect();
    if let Some(hero) = &ctx.hero {
        pois.sort_by(|a, b| {
            haversine_distance(hero.location, a.location)
                .total_cmp(&haversine_distance(hero.location, b.location))
                .then_with(|| a.name.cmp(&b.name))
        });
    }
    pois
}

fn mention(poi: &Poi, blurb: Option<&String>) -> String {
    match blurb {
        Some(b) if !b.is_empty() => format!("{} ({b})", markup(&poi.name)),
        _ => markup(&poi.name),
    }
}

fn render(ctx: &StoryContext, pois: &[&Poi], blurbs: &[String]) -> String {
    let region = if ctx.region_name.is_empty() { "the city" } else { ctx.region_name.as_str() };
    let hero = ctx.hero.as_ref().map_or("the busiest place in the data", |h| h.label.as_str());
    let finale = ctx.finale.as_ref().map_or("the final endpoint", |f| f.label.as_str());
    let m = |i: usize| mention(pois[i], blurbs.get(i));

    let act1 = match pois.len() {
        0 => format!("Act I: In {region}, our hero is {hero}."),
        _ => format!("Act I: In {region}, our hero is {hero}, starting beside {}.", m(0)),
    };
    let act2 = match pois.len() {
        0..=2 => "Act II: The route stays quiet and close to home.".to_string(),
        n => {
            let middle: Vec<String> = (1..n - 1).map(m).collect();
            format!("Act II: The plot moves past {}.", join_list(&middle))
        }
    };
    let act3 = match pois.len() {
        0 | 1 => format!("Act III: It resolves at {finale}."),
        n => format!("Act III: It resolves at {}, near {finale}.", m(n - 1)),
    };
    format!("{act1} {act2} {act3}")
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [rest @ .., last] => format!("{} and {last}", rest.join(", ")),
    }
}
