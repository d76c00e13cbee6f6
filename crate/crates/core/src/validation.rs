//! Hallucination check for generated stories.
//!
//! Every distinct place a story mentions is geocoded and measured against
//! the data the story is about: the trajectory polyline, or the nearest
//! hotspot centre. Places farther than the policy threshold are flagged as
//! spatial hallucinations. Structural constraints (POI count, word cap,
//! markup) are checked alongside.
//!
//! Factual claims in the prose are not checked.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gazetteer::{normalize_name, Gazetteer, GazetteerError};
use crate::geo::{haversine_distance, point_to_polyline_distance, GeoPoint};
use crate::story::{count_words, extract_mentions, markup, Story, StoryMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingPolicy {
    pub trajectory_threshold_m: f64,
    pub hotspot_threshold_m: f64,
    pub require_geocode: bool,
    pub min_grounded_fraction: f64,
}

impl Default for GroundingPolicy {
    fn default() -> Self {
        GroundingPolicy {
            trajectory_threshold_m: 500.0,
            hotspot_threshold_m: 1_000.0,
            require_geocode: true,
            min_grounded_fraction: 1.0,
        }
    }
}

impl GroundingPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if !(self.trajectory_threshold_m >= 0.0) {
            problems.push("trajectory_threshold_m must be >= 0");
        }
        if !(self.hotspot_threshold_m >= 0.0) {
            problems.push("hotspot_threshold_m must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.min_grounded_fraction) {
            problems.push("min_grounded_fraction must lie in [0, 1]");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }

    pub fn threshold_for(&self, mode: StoryMode) -> f64 {
        match mode {
            StoryMode::Heatmap => self.hotspot_threshold_m,
            StoryMode::SingleTrajectory => self.trajectory_threshold_m,
        }
    }
}

/// The data a story must stay close to.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundingContext {
    Trajectory(Vec<GeoPoint>),
    Hotspots(Vec<GeoPoint>),
}

impl GroundingContext {
    pub fn mode(&self) -> StoryMode {
        match self {
            GroundingContext::Trajectory(_) => StoryMode::SingleTrajectory,
            GroundingContext::Hotspots(_) => StoryMode::Heatmap,
        }
    }

    /// Distance from `p` to the data, `None` when the context is empty.
    pub fn distance(&self, p: GeoPoint) -> Option<f64> {
        match self {
            GroundingContext::Trajectory(line) => point_to_polyline_distance(p, line).ok(),
            GroundingContext::Hotspots(centers) => centers
                .iter()
                .map(|c| haversine_distance(p, *c))
                .reduce(f64::min),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Grounded,
    Ungeocodable,
    SpatialHallucination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoiVerdict {
    pub display_name: String,
    pub verdict: Verdict,
    pub distance_m: Option<f64>,
    pub location: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuralCheck {
    pub check_name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub mode: StoryMode,
    pub threshold_m: f64,
    pub per_poi: Vec<PoiVerdict>,
    pub structural: Vec<StructuralCheck>,
    pub grounded_fraction: f64,
    pub overall: Outcome,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.overall == Outcome::Pass
    }

    pub fn flagged(&self) -> impl Iterator<Item = &PoiVerdict> {
        self.per_poi.iter().filter(|v| v.verdict != Verdict::Grounded)
    }

    pub fn hallucinated_names(&self) -> Vec<&str> {
        self.per_poi
            .iter()
            .filter(|v| v.verdict == Verdict::SpatialHallucination)
            .map(|v| v.display_name.as_str())
            .collect()
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Validation: {} ({} mode, threshold {:.0} m)",
            match self.overall {
                Outcome::Pass => "PASS",
                Outcome::Fail => "FAIL",
            },
            self.mode,
            self.threshold_m
        );
        let _ = writeln!(s, "Grounded fraction: {:.3}", self.grounded_fraction);
        let _ = writeln!(s, "POIs:");
        for v in &self.per_poi {
            let dist = v.distance_m.map_or("-".to_string(), |d| format!("{d:.0} m"));
            let verdict = match v.verdict {
                Verdict::Grounded => "grounded",
                Verdict::Ungeocodable => "ungeocodable",
                Verdict::SpatialHallucination => "HALLUCINATION",
            };
            let _ = writeln!(s, "  {:<14} {:>8}  {}", verdict, dist, v.display_name);
        }
        let _ = writeln!(s, "Structural checks:");
        for c in &self.structural {
            let _ = writeln!(s, "  [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.check_name, c.detail);
        }
        s
    }
}

#[derive(Debug, Error)]
pub enum ValidationError {
    #[error("grounding context is for {context} stories but the story is {story}")]
    ContextMismatch { story: StoryMode, context: StoryMode },
    #[error("invalid grounding policy: {0}")]
    Policy(String),
    #[error("gazetteer failure while validating {name:?}: {source}")]
    Infrastructure {
        name: String,
        #[source]
        source: GazetteerError,
    },
    #[error("feedback requested for a passing report")]
    PassingReport,
}

impl ValidationError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ValidationError::Infrastructure { source, .. } if source.is_retryable())
    }
}

pub fn validate_story(
    story: &Story,
    ctx: &GroundingContext,
    policy: &GroundingPolicy,
    gazetteer: &Gazetteer,
) -> Result<ValidationReport, ValidationError> {
    policy.validate().map_err(ValidationError::Policy)?;
    if ctx.mode() != story.spec.mode {
        return Err(ValidationError::ContextMismatch {
            story: story.spec.mode,
            context: ctx.mode(),
        });
    }
    let threshold = policy.threshold_for(story.spec.mode);

    let mut seen = HashSet::new();
    let distinct: Vec<&str> = story
        .mentions
        .iter()
        .map(|m| m.name.as_str())
        .filter(|n| seen.insert(normalize_name(n)))
        .collect();
    let names: Vec<String> = distinct.iter().map(|n| n.to_string()).collect();
    let mut resolved = gazetteer.bulk_geocode(&names);

    let mut per_poi = Vec::with_capacity(distinct.len());
    for name in &distinct {
        let outcome = resolved.remove(*name).unwrap_or(Ok(None));
        let poi = outcome.map_err(|source| ValidationError::Infrastructure {
            name: name.to_string(),
            source,
        })?;
        let entry = match poi {
            None => PoiVerdict {
                display_name: name.to_string(),
                verdict: Verdict::Ungeocodable,
                distance_m: None,
                location: None,
            },
            Some(poi) => {
                let distance = ctx.distance(poi.location);
                let grounded = distance.is_some_and(|d| d <= threshold);
                PoiVerdict {
                    display_name: name.to_string(),
                    verdict: if grounded { Verdict::Grounded } else { Verdict::SpatialHallucination },
                    distance_m: distance,
                    location: Some(poi.location),
                }
            }
        };
        per_poi.push(entry);
    }

    let considered: Vec<&PoiVerdict> = per_poi
        .iter()
        .filter(|v| policy.require_geocode || v.verdict != Verdict::Ungeocodable)
        .collect();
    let grounded = considered.iter().filter(|v| v.verdict == Verdict::Grounded).count();
    let grounded_fraction = if considered.is_empty() {
        1.0
    } else {
        grounded as f64 / considered.len() as f64
    };

    let words = count_words(&story.text);
    let markup_check = match extract_mentions(&story.text) {
        Ok(m) if m == story.mentions => StructuralCheck {
            check_name: "markup".into(),
            passed: true,
            detail: format!("{} well-formed spans", m.len()),
        },
        Ok(_) => StructuralCheck {
            check_name: "markup".into(),
            passed: false,
            detail: "recorded mentions do not match the text".into(),
        },
        Err(e) => StructuralCheck {
            check_name: "markup".into(),
            passed: false,
            detail: e.to_string(),
        },
    };
    let structural = vec![
        StructuralCheck {
            check_name: "min_pois".into(),
            passed: distinct.len() >= story.spec.min_pois,
            detail: format!("{} distinct POIs, required {}", distinct.len(), story.spec.min_pois),
        },
        StructuralCheck {
            check_name: "max_words".into(),
            passed: words <= story.spec.max_words,
            detail: format!("{} words, limit {}", words, story.spec.max_words),
        },
        markup_check,
    ];

    let overall = if grounded_fraction >= policy.min_grounded_fraction && structural.iter().all(|c| c.passed) {
        Outcome::Pass
    } else {
        Outcome::Fail
    };
    Ok(ValidationReport {
        mode: story.spec.mode,
        threshold_m: threshold,
        per_poi,
        structural,
        grounded_fraction,
        overall,
    })
}

/// Revision instructions for a failing report, one line per problem, in
/// story order followed by structural checks.
pub fn feedback_text(report: &ValidationReport) -> Result<String, ValidationError> {
    if report.passed() {
        return Err(ValidationError::PassingReport);
    }
    let mut s = String::from("Revise the previous draft:");
    for v in &report.per_poi {
        match v.verdict {
            Verdict::Grounded => {}
            Verdict::SpatialHallucination => {
                let _ = match v.distance_m {
                    Some(d) => write!(
                        s,
                        "\n- Remove \"{}\": it lies {:.0} m from the data, beyond the {:.0} m limit. Replace it with a place near the data.",
                        v.display_name, d, report.threshold_m
                    ),
                    None => write!(
                        s,
                        "\n- Remove \"{}\": there is no data to ground it against.",
                        v.display_name
                    ),
                };
            }
            Verdict::Ungeocodable => {
                let _ = write!(
                    s,
                    "\n- Remove \"{}\": the place could not be located. Use real, named places only.",
                    v.display_name
                );
            }
        }
    }
    for c in report.structural.iter().filter(|c| !c.passed) {
        let _ = match c.check_name.as_str() {
            "min_pois" => write!(s, "\n- Include more POIs ({}).", c.detail),
            "max_words" => write!(s, "\n- Shorten the story ({}).", c.detail),
            "markup" => write!(s, "\n- Fix the POI markup: wrap every POI exactly as {} ({}).", markup("name"), c.detail),
            other => write!(s, "\n- Fix check {other}: {}.", c.detail),
        };
    }
    Ok(s)
}
