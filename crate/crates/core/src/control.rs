//! The orchestrator: turns a request into a fixed plan of agent steps, runs
//! them, and loops generate/validate with feedback until the story passes
//! or the attempt budget is spent.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gazetteer::{normalize_name, Gazetteer, GazetteerConfig, GazetteerError, Poi};
use crate::geo::GeoPoint;
use crate::heat::{build_grid_parallel, summarize_for_story, top_hotspots, HeatError, DEFAULT_CELL_SIZE_M};
use crate::ingest::{parse_file, select_trajectory, trip_endpoints, Dataset, IngestError, Schema, Selection, Trajectory};
use crate::map::{emit_map, MapDocument, MapError, DEFAULT_CLUSTER_DISTANCE_M};
use crate::story::{
    generate_story, markup, BackendError, GenerationRequest, NarrativeSpec, Story, StoryBackend, StoryContext, StoryError,
    StoryMode, Anchor,
};
use crate::validation::{feedback_text, validate_story, GroundingContext, GroundingPolicy, ValidationError, ValidationReport, Verdict};

pub const DEFAULT_MAX_RETRIES: usize = 3;
pub const DEFAULT_HOTSPOT_K: usize = 10;
/// Approximate number of trajectory points used as discovery centres.
pub const TRAJECTORY_SAMPLES: usize = 20;
const MAX_CANDIDATES: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct StoryRequest {
    pub dataset_path: PathBuf,
    pub schema: Schema,
    pub mode: StoryMode,
    pub spec: NarrativeSpec,
    pub policy: GroundingPolicy,
    pub gazetteer: GazetteerConfig,
    /// Required in single-trajectory mode.
    pub selection: Option<Selection>,
    /// Required in heatmap mode.
    pub hotspot_k: Option<usize>,
    pub max_retries: usize,
    /// Defaults to a radius that keeps discovered places inside the
    /// grounding threshold.
    pub discovery_radius_m: Option<f64>,
    pub cell_size_m: f64,
    pub cluster_distance_m: f64,
    pub region_name: String,
    pub workers: usize,
}

impl StoryRequest {
    pub fn new(dataset_path: impl Into<PathBuf>, mode: StoryMode, gazetteer: GazetteerConfig) -> Self {
        StoryRequest {
            dataset_path: dataset_path.into(),
            schema: match mode {
                StoryMode::Heatmap => Schema::KagglePorto,
                StoryMode::SingleTrajectory => Schema::PointList,
            },
            mode,
            spec: NarrativeSpec::new(mode),
            policy: GroundingPolicy::default(),
            gazetteer,
            selection: (mode == StoryMode::SingleTrajectory).then_some(Selection::LongestByPoints),
            hotspot_k: (mode == StoryMode::Heatmap).then_some(DEFAULT_HOTSPOT_K),
            max_retries: DEFAULT_MAX_RETRIES,
            discovery_radius_m: None,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            cluster_distance_m: DEFAULT_CLUSTER_DISTANCE_M,
            region_name: "Porto".to_string(),
            workers: 4,
        }
    }

    pub fn effective_discovery_radius(&self) -> f64 {
        self.discovery_radius_m.unwrap_or(match self.mode {
            StoryMode::Heatmap => self.policy.hotspot_threshold_m,
            StoryMode::SingleTrajectory => 0.8 * self.policy.trajectory_threshold_m,
        })
    }

    fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.dataset_path.as_os_str().is_empty() {
            v.push("dataset_path is empty".to_string());
        }
        if self.max_retries < 1 {
            v.push("max_retries must be at least 1".to_string());
        }
        if self.spec.mode != self.mode {
            v.push(format!("narrative spec is for {} but the request mode is {}", self.spec.mode, self.mode));
        }
        if let Err(e) = self.spec.validate() {
            v.push(e);
        }
        if let Err(e) = self.policy.validate() {
            v.push(e);
        }
        if let Err(e) = self.gazetteer.validate() {
            v.push(e.to_string());
        }
        match self.mode {
            StoryMode::Heatmap => match self.hotspot_k {
                None => v.push("heatmap mode needs hotspot_k".to_string()),
                Some(0) => v.push("hotspot_k must be at least 1".to_string()),
                Some(_) => {}
            },
            StoryMode::SingleTrajectory => {
                if self.selection.is_none() {
                    v.push("single_trajectory mode needs a trajectory selection".to_string());
                }
            }
        }
        if !(self.cell_size_m > 0.0 && self.cell_size_m.is_finite()) {
            v.push(format!("cell_size_m must be positive, got {}", self.cell_size_m));
        }
        if !(self.cluster_distance_m >= 0.0) {
            v.push(format!("cluster_distance_m must be >= 0, got {}", self.cluster_distance_m));
        }
        if let Some(r) = self.discovery_radius_m {
            if !(r >= 0.0) {
                v.push(format!("discovery_radius_m must be >= 0, got {r}"));
            }
        }
        if self.workers == 0 {
            v.push("workers must be at least 1".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Ingest,
    Analytics,
    Discovery,
    Generate,
    Validate,
    Emit,
}

impl std::fmt::Display for StepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepKind::Ingest => "ingest",
            StepKind::Analytics => "analytics",
            StepKind::Discovery => "discovery",
            StepKind::Generate => "generate",
            StepKind::Validate => "validate",
            StepKind::Emit => "emit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub kind: StepKind,
    pub operations: Vec<String>,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPlan {
    pub mode: StoryMode,
    pub steps: Vec<PlanStep>,
}

impl AgentPlan {
    pub fn kinds(&self) -> Vec<StepKind> {
        self.steps.iter().map(|s| s.kind).collect()
    }

    pub fn has_operation(&self, op: &str) -> bool {
        self.steps.iter().any(|s| s.operations.iter().any(|o| o == op))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: String,
    pub attempt: Option<usize>,
    pub detail: String,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryResult {
    pub story: Story,
    pub report: ValidationReport,
    pub map: MapDocument,
    pub attempts: usize,
    pub trace: Vec<TraceEntry>,
    /// Trajectory the story was grounded on, in single-trajectory mode.
    pub trajectory: Option<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryFailure {
    pub attempts: usize,
    pub last_story: Option<Story>,
    pub last_report: Option<ValidationReport>,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Error)]
pub enum StepFailure {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Heat(#[from] HeatError),
    #[error(transparent)]
    Gazetteer(#[from] GazetteerError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error(transparent)]
    Map(#[from] MapError),
}

impl StepFailure {
    pub fn is_retryable(&self) -> bool {
        match self {
            StepFailure::Gazetteer(e) => e.is_retryable(),
            StepFailure::Backend(e) => e.is_retryable(),
            StepFailure::Validation(e) => e.is_retryable(),
            _ => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid request: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{step} step failed: {source}")]
    Step {
        step: StepKind,
        #[source]
        source: StepFailure,
    },
    #[error("story still failed validation after {} attempts", .0.attempts)]
    RetriesExhausted(Box<RetryFailure>),
}

fn step_err<E: Into<StepFailure>>(step: StepKind) -> impl FnOnce(E) -> ControlError {
    move |e| ControlError::Step {
        step,
        source: e.into(),
    }
}

pub fn plan(req: &StoryRequest) -> Result<AgentPlan, ControlError> {
    let violations = req.violations();
    if !violations.is_empty() {
        return Err(ControlError::Config(violations));
    }
    let p = |pairs: &[(&str, String)]| -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    };
    let ops = |names: &[&str]| names.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let radius = req.effective_discovery_radius();
    let mut steps = vec![PlanStep {
        kind: StepKind::Ingest,
        operations: ops(&["parse_dataset"]),
        params: p(&[
            ("dataset_path", req.dataset_path.display().to_string()),
            ("schema", req.schema.to_string()),
        ]),
    }];
    match req.mode {
        StoryMode::Heatmap => {
            let k = req.hotspot_k.expect("checked by violations");
            steps.push(PlanStep {
                kind: StepKind::Analytics,
                operations: ops(&["trip_endpoints", "build_grid", "top_hotspots", "summarize_for_story"]),
                params: p(&[("cell_size_m", req.cell_size_m.to_string()), ("hotspot_k", k.to_string())]),
            });
            steps.push(PlanStep {
                kind: StepKind::Discovery,
                operations: ops(&["pois_near(hotspot centers)"]),
                params: p(&[("radius_m", radius.to_string())]),
            });
        }
        StoryMode::SingleTrajectory => {
            let sel = req.selection.as_ref().expect("checked by violations");
            steps.push(PlanStep {
                kind: StepKind::Analytics,
                operations: ops(&["select_trajectory", "trajectory_digest"]),
                params: p(&[("selection", sel.to_string())]),
            });
            steps.push(PlanStep {
                kind: StepKind::Discovery,
                operations: ops(&["pois_near(sampled trajectory points)"]),
                params: p(&[("radius_m", radius.to_string()), ("samples", TRAJECTORY_SAMPLES.to_string())]),
            });
        }
    }
    steps.push(PlanStep {
        kind: StepKind::Generate,
        operations: ops(&["build_prompt", "generate_story"]),
        params: p(&[
            ("max_words", req.spec.max_words.to_string()),
            ("min_pois", req.spec.min_pois.to_string()),
            ("max_retries", req.max_retries.to_string()),
        ]),
    });
    steps.push(PlanStep {
        kind: StepKind::Validate,
        operations: ops(&["validate_story"]),
        params: p(&[("threshold_m", req.policy.threshold_for(req.mode).to_string())]),
    });
    steps.push(PlanStep {
        kind: StepKind::Emit,
        operations: ops(&["emit_map"]),
        params: p(&[("cluster_distance_m", req.cluster_distance_m.to_string())]),
    });
    Ok(AgentPlan { mode: req.mode, steps })
}

struct Tracer {
    entries: Vec<TraceEntry>,
}

impl Tracer {
    fn record<T>(&mut self, step: &str, attempt: Option<usize>, f: impl FnOnce() -> (T, String)) -> T {
        let start = Instant::now();
        let (value, detail) = f();
        log::info!("{step}: {detail}");
        self.entries.push(TraceEntry {
            step: step.to_string(),
            attempt,
            detail,
            duration_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        value
    }
}

/// Plans the request, opens the gazetteer, loads the dataset and runs it.
pub fn execute(req: &StoryRequest, backend: &dyn StoryBackend) -> Result<StoryResult, ControlError> {
    plan(req)?;
    let gazetteer = Gazetteer::open(req.gazetteer.clone()).map_err(step_err(StepKind::Discovery))?;
    let mut tracer = Tracer { entries: Vec::new() };
    let ds = tracer.record("ingest", None, || {
        let r = parse_file(&req.dataset_path, req.schema);
        let detail = match &r {
            Ok(ds) => format!(
                "{} trajectories, {} skipped rows from {}",
                ds.trajectories.len(),
                ds.skipped_rows,
                req.dataset_path.display()
            ),
            Err(e) => e.to_string(),
        };
        (r, detail)
    });
    let ds = ds.map_err(step_err(StepKind::Ingest))?;
    run(req, &ds, &gazetteer, backend, tracer)
}

/// Runs the plan on an already loaded dataset with a caller-owned gazetteer.
pub fn execute_on(
    req: &StoryRequest,
    ds: &Dataset,
    gazetteer: &Gazetteer,
    backend: &dyn StoryBackend,
) -> Result<StoryResult, ControlError> {
    plan(req)?;
    let mut tracer = Tracer { entries: Vec::new() };
    tracer.record("ingest", None, || {
        ((), format!("{} trajectories supplied by caller", ds.trajectories.len()))
    });
    run(req, ds, gazetteer, backend, tracer)
}

struct Analysis {
    summary: String,
    grounding: GroundingContext,
    centers: Vec<GeoPoint>,
    hero: Anchor,
    finale: Anchor,
    trajectory: Option<Trajectory>,
}

fn analyse(req: &StoryRequest, ds: &Dataset) -> Result<Analysis, ControlError> {
    match req.mode {
        StoryMode::Heatmap => {
            let endpoints = trip_endpoints(ds);
            let grid = build_grid_parallel(&endpoints, req.cell_size_m, None, req.workers)
                .map_err(step_err(StepKind::Analytics))?;
            let hotspots = top_hotspots(&grid, req.hotspot_k.unwrap_or(DEFAULT_HOTSPOT_K));
            let (first, last) = match (hotspots.first(), hotspots.last()) {
                (Some(f), Some(l)) => (f, l),
                _ => {
                    return Err(ControlError::Step {
                        step: StepKind::Analytics,
                        source: StepFailure::Heat(HeatError::NoExtent),
                    })
                }
            };
            let centers: Vec<GeoPoint> = hotspots.iter().map(|h| h.center).collect();
            Ok(Analysis {
                summary: summarize_for_story(&grid, &hotspots),
                grounding: GroundingContext::Hotspots(centers.clone()),
                hero: Anchor {
                    label: format!("the top hotspot, where {} trips end", first.count),
                    location: first.center,
                },
                finale: Anchor {
                    label: format!("hotspot {}", last.rank),
                    location: last.center,
                },
                centers,
                trajectory: None,
            })
        }
        StoryMode::SingleTrajectory => {
            let sel = req.selection.as_ref().expect("checked by plan");
            let traj = select_trajectory(ds, sel).map_err(step_err(StepKind::Analytics))?.clone();
            let (Some(start), Some(end)) = (traj.points.first().copied(), traj.points.last().copied()) else {
                return Err(ControlError::Step {
                    step: StepKind::Analytics,
                    source: StepFailure::Ingest(IngestError::EmptyDataset),
                });
            };
            let centers = sample_points(&traj.points, TRAJECTORY_SAMPLES);
            Ok(Analysis {
                summary: trajectory_digest(&traj, &centers),
                grounding: GroundingContext::Trajectory(traj.points.clone()),
                hero: Anchor {
                    label: format!("taxi trip {}", traj.id),
                    location: start,
                },
                finale: Anchor {
                    label: "the drop-off point".to_string(),
                    location: end,
                },
                centers,
                trajectory: Some(traj),
            })
        }
    }
}

/// The grounding context the request would validate against, and the
/// selected trajectory in single-trajectory mode.
pub fn grounding_for(req: &StoryRequest, ds: &Dataset) -> Result<(GroundingContext, Option<Trajectory>), ControlError> {
    plan(req)?;
    let a = analyse(req, ds)?;
    Ok((a.grounding, a.trajectory))
}

/// About `n` evenly spaced points, always including the first and last.
pub fn sample_points(points: &[GeoPoint], n: usize) -> Vec<GeoPoint> {
    if points.is_empty() {
        return Vec::new();
    }
    let step = points.len().div_ceil(n.max(1)).max(1);
    let mut out: Vec<GeoPoint> = points.iter().step_by(step).copied().collect();
    if (points.len() - 1) % step != 0 {
        out.push(*points.last().expect("non-empty"));
    }
    out
}

/// Plain-text digest of one trip for prompt context.
pub fn trajectory_digest(traj: &Trajectory, samples: &[GeoPoint]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Dataset: a single taxi trip");
    let _ = writeln!(s, "Trip id: {}", traj.id);
    match traj.sample_interval {
        Some(dt) => {
            let _ = writeln!(s, "Points: {} (one every {} s)", traj.points.len(), dt);
        }
        None => {
            let _ = writeln!(s, "Points: {}", traj.points.len());
        }
    }
    let _ = writeln!(s, "Length: {:.0} m", traj.length_m());
    if let (Some(a), Some(b)) = (traj.points.first(), traj.points.last()) {
        let _ = writeln!(s, "Start: ({:.4}, {:.4})", a.lon, a.lat);
        let _ = writeln!(s, "End: ({:.4}, {:.4})", b.lon, b.lat);
    }
    let _ = writeln!(s, "Route samples (lon, lat):");
    for (i, p) in samples.iter().enumerate() {
        let _ = writeln!(s, "{}. ({:.4}, {:.4})", i + 1, p.lon, p.lat);
    }
    s
}

fn discover(gazetteer: &Gazetteer, centers: &[GeoPoint], radius_m: f64) -> Result<Vec<Poi>, GazetteerError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in centers {
        for poi in gazetteer.pois_near(*c, radius_m)? {
            if seen.insert(normalize_name(&poi.name)) {
                out.push(poi);
            }
        }
    }
    out.truncate(MAX_CANDIDATES);
    Ok(out)
}

fn run(
    req: &StoryRequest,
    ds: &Dataset,
    gazetteer: &Gazetteer,
    backend: &dyn StoryBackend,
    mut tracer: Tracer,
) -> Result<StoryResult, ControlError> {
    let analysis = tracer.record("analytics", None, || {
        let r = analyse(req, ds);
        let detail = match &r {
            Ok(a) => format!("{} discovery centres", a.centers.len()),
            Err(e) => e.to_string(),
        };
        (r, detail)
    })?;

    let radius = req.effective_discovery_radius();
    let candidates = tracer.record("discovery", None, || {
        let r = discover(gazetteer, &analysis.centers, radius);
        let detail = match &r {
            Ok(c) => format!("{} candidate POIs within {radius:.0} m", c.len()),
            Err(e) => e.to_string(),
        };
        (r, detail)
    });
    let candidates = candidates.map_err(step_err(StepKind::Discovery))?;

    let ctx = StoryContext {
        data_summary: analysis.summary.clone(),
        candidate_pois: candidates,
        region_name: req.region_name.clone(),
        hero: Some(analysis.hero.clone()),
        finale: Some(analysis.finale.clone()),
    };
    let mut spec = req.spec.clone();
    let mut last_story = None;
    let mut last_report = None;

    for attempt in 1..=req.max_retries {
        let request = GenerationRequest::new(spec.clone(), ctx.clone());
        let generated = tracer.record("generate", Some(attempt), || {
            let r = generate_story(&request, backend);
            let detail = match &r {
                Ok(s) => format!("{} words, {} mentions from {}", s.word_count, s.mentions.len(), s.backend_id),
                Err(e) => e.to_string(),
            };
            (r, detail)
        });
        let story = match generated {
            Ok(s) => s,
            Err(StoryError::Backend(e)) => return Err(step_err(StepKind::Generate)(e)),
            Err(e @ (StoryError::Markup(_) | StoryError::NoMarkup)) => {
                let fb = format!(
                    "Revise the previous draft:\n- The POI markup was unusable ({e}). Wrap every POI exactly as {}.",
                    markup("name")
                );
                tracer.record("feedback", Some(attempt), || ((), "markup feedback appended".to_string()));
                spec.extra_instructions.push(fb);
                continue;
            }
        };

        let report = tracer.record("validate", Some(attempt), || {
            let r = validate_story(&story, &analysis.grounding, &req.policy, gazetteer);
            let detail = match &r {
                Ok(rep) => format!(
                    "{}: grounded fraction {:.3}, {} flagged",
                    if rep.passed() { "pass" } else { "fail" },
                    rep.grounded_fraction,
                    rep.flagged().count()
                ),
                Err(e) => e.to_string(),
            };
            (r, detail)
        });
        let report = report.map_err(step_err(StepKind::Validate))?;

        if report.passed() {
            let grounded: Vec<Poi> = report
                .per_poi
                .iter()
                .filter(|v| v.verdict == Verdict::Grounded)
                .filter_map(|v| {
                    let location = v.location?;
                    let known = ctx.candidate_pois.iter().find(|p| normalize_name(&p.name) == normalize_name(&v.display_name));
                    Some(Poi {
                        name: v.display_name.clone(),
                        location,
                        category: known.and_then(|p| p.category.clone()),
                        source: known.map_or(crate::gazetteer::PoiSource::Fixture, |p| p.source),
                        blurb: known.and_then(|p| p.blurb.clone()),
                    })
                })
                .collect();
            let path = analysis.trajectory.as_ref().map(|t| t.points.as_slice());
            let map = tracer.record("emit", None, || {
                let r = emit_map(&grounded, path, req.cluster_distance_m);
                let detail = match &r {
                    Ok(m) => format!("{} features, {} legend entries", m.features.len(), m.legend.len()),
                    Err(e) => e.to_string(),
                };
                (r, detail)
            });
            let map = map.map_err(step_err(StepKind::Emit))?;
            return Ok(StoryResult {
                story,
                report,
                map,
                attempts: attempt,
                trace: tracer.entries,
                trajectory: analysis.trajectory,
            });
        }

        let fb = feedback_text(&report).map_err(step_err(StepKind::Validate))?;
        tracer.record("feedback", Some(attempt), || {
            ((), format!("{} lines of feedback appended", fb.lines().count()))
        });
        spec.extra_instructions.push(fb);
        last_story = Some(story);
        last_report = Some(report);
    }

    Err(ControlError::RetriesExhausted(Box::new(RetryFailure {
        attempts: req.max_retries,
        last_story,
        last_report,
        trace: tracer.entries,
    })))
}
