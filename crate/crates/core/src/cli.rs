//! Command-line front end. Each command is a thin wrapper over the library.
//!
//! Settings come from an optional flat TOML file (`--config`) with flags
//! taking precedence. The backend token is read from the environment only.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::control::{self, ControlError, RetryFailure, StepFailure, StoryRequest, StoryResult, TraceEntry};
use crate::gazetteer::{normalize_name, Gazetteer, GazetteerConfig, GazetteerError};
use crate::harness::{porto_fixture_path, ScriptedBackend};
use crate::heat::{build_grid_parallel, summarize_for_story, top_hotspots, DEFAULT_CELL_SIZE_M};
use crate::ingest::{parse_file, trip_endpoints, IngestError, Schema, Selection};
use crate::map::{emit_map, render_geojson, render_html, DEFAULT_CLUSTER_DISTANCE_M};
use crate::story::{
    BackendError, NarrativeSpec, RemoteBackend, RemoteBackendConfig, Story, StoryBackend, StoryMode, TemplateBackend,
    DEFAULT_TOKEN_ENV,
};
use crate::validation::{validate_story, GroundingPolicy, ValidationError, ValidationReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_INFRA: i32 = 4;
pub const EXIT_VALIDATION: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "geostory", version, about = "Spatially grounded stories from taxi trajectory data")]
pub struct Cli {
    /// Never contact the remote gazetteer.
    #[arg(long, global = true)]
    pub offline: bool,
    /// Flat TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a dataset and print its statistics.
    Ingest(IngestArgs),
    /// Build the endpoint heat grid and list hotspots.
    Heatmap(HeatmapArgs),
    /// Run the full pipeline and write a result bundle.
    Story(StoryArgs),
    /// Check a story file against a dataset.
    Validate(ValidateArgs),
    /// Draw the numbered POI map for a story file.
    Map(MapArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub schema: Option<String>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long)]
    pub cell_size: Option<f64>,
    #[arg(long)]
    pub hotspot_k: Option<usize>,
}

/// Options shared by the commands that need a dataset and grounding.
#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<String>,
    /// heatmap or single_trajectory
    #[arg(long)]
    pub mode: Option<String>,
    /// longest_by_points, longest_by_length or by_id:ID
    #[arg(long)]
    pub selection: Option<String>,
    #[arg(long)]
    pub hotspot_k: Option<usize>,
    #[arg(long)]
    pub cell_size: Option<f64>,
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct StoryArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// template, remote or scripted
    #[arg(long)]
    pub backend: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    /// JSON array of story texts for the scripted backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub max_retries: Option<usize>,
    #[arg(long)]
    pub min_pois: Option<usize>,
    #[arg(long)]
    pub max_words: Option<usize>,
    #[arg(long)]
    pub audience: Option<String>,
    #[arg(long)]
    pub discovery_radius: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Story text with [[POI: name]] markup.
    pub story: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub min_pois: Option<usize>,
    #[arg(long)]
    pub max_words: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    pub story: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub cluster_distance: Option<f64>,
}

/// Every setting a run can take, as read from the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub schema: Option<Schema>,
    pub mode: StoryMode,
    pub selection: String,
    pub hotspot_k: usize,
    pub cell_size_m: f64,
    pub discovery_radius_m: Option<f64>,
    pub cluster_distance_m: f64,
    pub region: String,

    pub backend: String,
    pub backend_endpoint: Option<String>,
    pub backend_script: Option<PathBuf>,
    pub backend_max_tokens: u32,
    pub backend_temperature: f64,
    pub backend_timeout_s: u64,

    pub audience: String,
    pub tone: String,
    pub max_words: usize,
    pub min_pois: usize,
    pub include_blurbs: bool,
    pub extra_instructions: Vec<String>,
    pub max_retries: usize,

    pub trajectory_threshold_m: f64,
    pub hotspot_threshold_m: f64,
    pub require_geocode: bool,
    pub min_grounded_fraction: f64,

    pub fixture: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub gazetteer_url: String,
    pub rate_limit: f64,
    pub offline: bool,

    pub output_dir: PathBuf,
    pub verbose: u8,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = NarrativeSpec::new(StoryMode::Heatmap);
        let policy = GroundingPolicy::default();
        let gaz = GazetteerConfig::default();
        RunConfig {
            dataset: None,
            schema: None,
            mode: StoryMode::Heatmap,
            selection: "longest_by_points".to_string(),
            hotspot_k: control::DEFAULT_HOTSPOT_K,
            cell_size_m: DEFAULT_CELL_SIZE_M,
            discovery_radius_m: None,
            cluster_distance_m: DEFAULT_CLUSTER_DISTANCE_M,
            region: "Porto".to_string(),
            backend: "template".to_string(),
            backend_endpoint: None,
            backend_script: None,
            backend_max_tokens: RemoteBackendConfig::default().max_tokens,
            backend_temperature: RemoteBackendConfig::default().temperature,
            backend_timeout_s: RemoteBackendConfig::default().timeout_s,
            audience: spec.audience,
            tone: spec.tone,
            max_words: spec.max_words,
            min_pois: spec.min_pois,
            include_blurbs: spec.include_blurbs,
            extra_instructions: Vec::new(),
            max_retries: control::DEFAULT_MAX_RETRIES,
            trajectory_threshold_m: policy.trajectory_threshold_m,
            hotspot_threshold_m: policy.hotspot_threshold_m,
            require_geocode: policy.require_geocode,
            min_grounded_fraction: policy.min_grounded_fraction,
            fixture: None,
            cache: None,
            gazetteer_url: gaz.base_url,
            rate_limit: gaz.rate_limit,
            offline: false,
            output_dir: PathBuf::from("geostory-out"),
            verbose: 0,
            workers: 4,
        }
    }
}

/// A failed command: process exit code plus message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::new(EXIT_CONFIG, e.to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(EXIT_INFRA, format!("{}: {e}", path.display()))
}

pub fn ingest_code(e: &IngestError) -> i32 {
    match e {
        IngestError::UnknownSchema(_) | IngestError::UnknownSelection(_) | IngestError::TrajectoryNotFound(_) => {
            EXIT_CONFIG
        }
        _ => EXIT_PARSE,
    }
}

pub fn gazetteer_code(e: &GazetteerError) -> i32 {
    match e {
        GazetteerError::Config(_) | GazetteerError::Fixture { .. } | GazetteerError::EmptyName => EXIT_CONFIG,
        GazetteerError::Transport(_) | GazetteerError::Protocol(_) | GazetteerError::Cache { .. } => EXIT_INFRA,
    }
}

pub fn backend_code(e: &BackendError) -> i32 {
    match e {
        BackendError::Precondition(_) | BackendError::Config(_) => EXIT_CONFIG,
        BackendError::Transport(_) | BackendError::Protocol(_) | BackendError::ScriptExhausted(_) => EXIT_INFRA,
    }
}

pub fn validation_code(e: &ValidationError) -> i32 {
    match e {
        ValidationError::Infrastructure { .. } => EXIT_INFRA,
        _ => EXIT_CONFIG,
    }
}

/// Exit code for a pipeline failure.
pub fn control_code(e: &ControlError) -> i32 {
    match e {
        ControlError::Config(_) => EXIT_CONFIG,
        ControlError::RetriesExhausted(_) => EXIT_VALIDATION,
        ControlError::Step { source, .. } => match source {
            StepFailure::Ingest(e) => ingest_code(e),
            StepFailure::Heat(_) | StepFailure::Map(_) => EXIT_PARSE,
            StepFailure::Gazetteer(e) => gazetteer_code(e),
            StepFailure::Backend(e) => backend_code(e),
            StepFailure::Validation(e) => validation_code(e),
        },
    }
}

fn resolve(base: Option<&Path>, p: PathBuf) -> PathBuf {
    match base {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p,
    }
}

/// Reads a config file. Relative input paths resolve against the file's
/// directory. Keys that look like secrets are refused.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if let Some(key) = table.keys().find(|k| {
        let k = k.to_ascii_lowercase();
        k.contains("token") || k.contains("secret") || k.contains("api_key") || k.contains("password")
    }) {
        return Err(config_err(format!(
            "{}: key {key:?} looks like a secret; set {DEFAULT_TOKEN_ENV} in the environment instead",
            path.display()
        )));
    }
    let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let base = path.parent();
    cfg.dataset = cfg.dataset.map(|p| resolve(base, p));
    cfg.fixture = cfg.fixture.map(|p| resolve(base, p));
    cfg.cache = cfg.cache.map(|p| resolve(base, p));
    cfg.backend_script = cfg.backend_script.map(|p| resolve(base, p));
    Ok(cfg)
}

impl RunConfig {
    fn apply_data(&mut self, d: &DataArgs) -> Result<(), CliError> {
        if let Some(p) = &d.dataset {
            self.dataset = Some(p.clone());
        }
        if let Some(s) = &d.schema {
            self.schema = Some(s.parse().map_err(config_err)?);
        }
        if let Some(m) = &d.mode {
            self.mode = m.parse().map_err(config_err)?;
        }
        if let Some(s) = &d.selection {
            self.selection = s.clone();
        }
        if let Some(k) = d.hotspot_k {
            self.hotspot_k = k;
        }
        if let Some(c) = d.cell_size {
            self.cell_size_m = c;
        }
        if let Some(f) = &d.fixture {
            self.fixture = Some(f.clone());
        }
        if let Some(c) = &d.cache {
            self.cache = Some(c.clone());
        }
        if let Some(t) = d.threshold {
            match self.mode {
                StoryMode::Heatmap => self.hotspot_threshold_m = t,
                StoryMode::SingleTrajectory => self.trajectory_threshold_m = t,
            }
        }
        Ok(())
    }

    pub fn schema_or_default(&self) -> Schema {
        self.schema.unwrap_or(match self.mode {
            StoryMode::Heatmap => Schema::KagglePorto,
            StoryMode::SingleTrajectory => Schema::PointList,
        })
    }

    pub fn gazetteer_config(&self) -> GazetteerConfig {
        let bundled = porto_fixture_path();
        GazetteerConfig {
            base_url: self.gazetteer_url.clone(),
            rate_limit: self.rate_limit,
            offline_only: self.offline,
            fixture_path: self.fixture.clone().or_else(|| bundled.exists().then_some(bundled)),
            cache_path: self.cache.clone(),
            ..GazetteerConfig::default()
        }
    }

    pub fn narrative_spec(&self) -> NarrativeSpec {
        NarrativeSpec {
            mode: self.mode,
            audience: self.audience.clone(),
            max_words: self.max_words,
            min_pois: self.min_pois,
            tone: self.tone.clone(),
            include_blurbs: self.include_blurbs,
            extra_instructions: self.extra_instructions.clone(),
        }
    }

    pub fn policy(&self) -> GroundingPolicy {
        GroundingPolicy {
            trajectory_threshold_m: self.trajectory_threshold_m,
            hotspot_threshold_m: self.hotspot_threshold_m,
            require_geocode: self.require_geocode,
            min_grounded_fraction: self.min_grounded_fraction,
        }
    }

    /// The library request this configuration describes.
    pub fn to_request(&self) -> Result<StoryRequest, CliError> {
        let dataset = self
            .dataset
            .clone()
            .ok_or_else(|| config_err("no dataset given (use --dataset or set dataset in the config file)"))?;
        let selection: Selection = self.selection.parse().map_err(config_err)?;
        let mut req = StoryRequest::new(dataset, self.mode, self.gazetteer_config());
        req.schema = self.schema_or_default();
        req.spec = self.narrative_spec();
        req.policy = self.policy();
        req.max_retries = self.max_retries;
        req.discovery_radius_m = self.discovery_radius_m;
        req.cell_size_m = self.cell_size_m;
        req.cluster_distance_m = self.cluster_distance_m;
        req.region_name = self.region.clone();
        req.workers = self.workers;
        match self.mode {
            StoryMode::Heatmap => req.hotspot_k = Some(self.hotspot_k),
            StoryMode::SingleTrajectory => req.selection = Some(selection),
        }
        Ok(req)
    }

    pub fn backend(&self) -> Result<Box<dyn StoryBackend>, CliError> {
        match self.backend.as_str() {
            "template" => Ok(Box::new(TemplateBackend::new())),
            "remote" => {
                let cfg = RemoteBackendConfig {
                    endpoint: self.backend_endpoint.clone().unwrap_or_default(),
                    max_tokens: self.backend_max_tokens,
                    temperature: self.backend_temperature,
                    timeout_s: self.backend_timeout_s,
                    ..RemoteBackendConfig::default()
                };
                Ok(Box::new(RemoteBackend::new(cfg).map_err(config_err)?))
            }
            "scripted" => {
                let path = self
                    .backend_script
                    .as_ref()
                    .ok_or_else(|| config_err("the scripted backend needs --script"))?;
                let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                let responses: Vec<String> =
                    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                Ok(Box::new(ScriptedBackend::new(responses)))
            }
            other => Err(config_err(format!("unknown backend {other:?} (template, remote or scripted)"))),
        }
    }
}

/// Builds the effective configuration: defaults, then the config file, then
/// global flags.
pub fn base_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if cli.offline {
        cfg.offline = true;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    cfg.verbose = cfg.verbose.max(cli.verbose);
    Ok(cfg)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

/// Entry point: runs the command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = base_config(&cli).and_then(|cfg| {
        init_logging(cfg.verbose);
        dispatch(&cli.command, cfg)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: &Command, mut cfg: RunConfig) -> Result<(), CliError> {
    match cmd {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Heatmap(a) => cmd_heatmap(a, &cfg),
        Command::Story(a) => {
            cfg.apply_data(&a.data)?;
            if let Some(b) = &a.backend {
                cfg.backend = b.clone();
            }
            if let Some(e) = &a.endpoint {
                cfg.backend_endpoint = Some(e.clone());
            }
            if let Some(s) = &a.script {
                cfg.backend_script = Some(s.clone());
            }
            if let Some(n) = a.max_retries {
                cfg.max_retries = n;
            }
            if let Some(n) = a.min_pois {
                cfg.min_pois = n;
            }
            if let Some(n) = a.max_words {
                cfg.max_words = n;
            }
            if let Some(s) = &a.audience {
                cfg.audience = s.clone();
            }
            if let Some(r) = a.discovery_radius {
                cfg.discovery_radius_m = Some(r);
            }
            cmd_story(&cfg)
        }
        Command::Validate(a) => {
            cfg.apply_data(&a.data)?;
            if let Some(n) = a.min_pois {
                cfg.min_pois = n;
            }
            if let Some(n) = a.max_words {
                cfg.max_words = n;
            }
            cmd_validate(&a.story, &cfg)
        }
        Command::Map(a) => {
            cfg.apply_data(&a.data)?;
            if let Some(d) = a.cluster_distance {
                cfg.cluster_distance_m = d;
            }
            cmd_map(&a.story, &cfg)
        }
    }
}

fn cmd_ingest(a: &IngestArgs) -> Result<(), CliError> {
    let schema: Schema = match &a.schema {
        Some(s) => s.parse().map_err(|e: IngestError| CliError::new(ingest_code(&e), e.to_string()))?,
        None => Schema::KagglePorto,
    };
    let ds = parse_file(&a.dataset, schema).map_err(|e| CliError::new(ingest_code(&e), e.to_string()))?;
    println!("source: {}", ds.source_path);
    println!("schema: {schema}");
    println!("trajectories: {}", ds.trajectories.len());
    println!("skipped_rows: {}", ds.skipped_rows);
    for (reason, n) in &ds.skip_reasons {
        println!("  {}: {n}", serde_json::to_value(reason).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
    }
    if ds.skipped_points > 0 {
        println!("skipped_points: {}", ds.skipped_points);
    }
    println!("endpoints: {}", trip_endpoints(&ds).len());
    println!("points: {}", ds.trajectories.iter().map(|t| t.points.len()).sum::<usize>());
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn cmd_heatmap(a: &HeatmapArgs, cfg: &RunConfig) -> Result<(), CliError> {
    let schema: Schema = match &a.schema {
        Some(s) => s.parse().map_err(|e: IngestError| CliError::new(ingest_code(&e), e.to_string()))?,
        None => Schema::KagglePorto,
    };
    let ds = parse_file(&a.dataset, schema).map_err(|e| CliError::new(ingest_code(&e), e.to_string()))?;
    let cell = a.cell_size.unwrap_or(cfg.cell_size_m);
    let grid = build_grid_parallel(&trip_endpoints(&ds), cell, None, cfg.workers.max(1))
        .map_err(|e| CliError::new(EXIT_PARSE, e.to_string()))?;
    let hotspots = top_hotspots(&grid, a.hotspot_k.unwrap_or(cfg.hotspot_k));
    let summary = summarize_for_story(&grid, &hotspots);
    ensure_dir(&cfg.output_dir)?;
    let mut csv = Vec::new();
    grid.write_csv(&mut csv).expect("writing to memory");
    write_file(&cfg.output_dir.join("grid.csv"), &String::from_utf8(csv).expect("csv is utf-8"))?;
    write_file(&cfg.output_dir.join("grid.json"), &to_json(&grid.sidecar()))?;
    write_file(&cfg.output_dir.join("hotspots.json"), &to_json(&hotspots))?;
    write_file(&cfg.output_dir.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Files of a result bundle.
pub const BUNDLE_FILES: [&str; 7] = [
    "story.txt",
    "story.json",
    "report.json",
    "report.txt",
    "map.geojson",
    "map.html",
    "trace.json",
];

fn write_story(dir: &Path, story: &Story) -> Result<(), CliError> {
    write_file(&dir.join("story.txt"), &format!("{}\n", story.text.trim_end()))?;
    write_file(&dir.join("story.json"), &to_json(&story.sidecar()))
}

fn write_report(dir: &Path, report: &ValidationReport) -> Result<(), CliError> {
    write_file(&dir.join("report.json"), &to_json(report))?;
    write_file(&dir.join("report.txt"), &report.summary())
}

fn write_trace(dir: &Path, trace: &[TraceEntry]) -> Result<(), CliError> {
    write_file(&dir.join("trace.json"), &to_json(&trace))
}

/// Writes every bundle file for a successful run.
pub fn write_bundle(dir: &Path, result: &StoryResult, region: &str) -> Result<(), CliError> {
    ensure_dir(dir)?;
    write_story(dir, &result.story)?;
    write_report(dir, &result.report)?;
    write_file(&dir.join("map.geojson"), &render_geojson(&result.map))?;
    write_file(&dir.join("map.html"), &render_html(&result.map, &format!("{region} story map")))?;
    write_trace(dir, &result.trace)
}

fn write_failure(dir: &Path, f: &RetryFailure) -> Result<(), CliError> {
    ensure_dir(dir)?;
    if let Some(s) = &f.last_story {
        write_story(dir, s)?;
    }
    if let Some(r) = &f.last_report {
        write_report(dir, r)?;
    }
    write_trace(dir, &f.trace)
}

fn cmd_story(cfg: &RunConfig) -> Result<(), CliError> {
    let req = cfg.to_request()?;
    let backend = cfg.backend()?;
    match control::execute(&req, backend.as_ref()) {
        Ok(result) => {
            write_bundle(&cfg.output_dir, &result, &cfg.region)?;
            println!("{}", result.story.text.trim_end());
            println!();
            print!("{}", result.report.summary());
            println!("attempts: {}", result.attempts);
            println!("bundle: {}", cfg.output_dir.display());
            Ok(())
        }
        Err(ControlError::RetriesExhausted(f)) => {
            write_failure(&cfg.output_dir, &f)?;
            if let Some(r) = &f.last_report {
                print!("{}", r.summary());
            }
            Err(CliError::new(
                EXIT_VALIDATION,
                format!(
                    "story failed validation after {} attempts; see {}",
                    f.attempts,
                    cfg.output_dir.display()
                ),
            ))
        }
        Err(e) => Err(CliError::new(control_code(&e), e.to_string())),
    }
}

fn read_story(path: &Path, spec: NarrativeSpec) -> Result<Story, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", path.display())))?;
    if text.trim().is_empty() {
        return Err(CliError::new(EXIT_PARSE, format!("{}: story file is empty", path.display())));
    }
    Story::from_text(text, spec, "file").map_err(|e| CliError::new(EXIT_PARSE, format!("{}: {e}", path.display())))
}

fn open_gazetteer(cfg: &RunConfig) -> Result<Gazetteer, CliError> {
    Gazetteer::open(cfg.gazetteer_config()).map_err(|e| CliError::new(gazetteer_code(&e), e.to_string()))
}

fn cmd_validate(story_path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let story = read_story(story_path, cfg.narrative_spec())?;
    let req = cfg.to_request()?;
    let ds = parse_file(&req.dataset_path, req.schema).map_err(|e| CliError::new(ingest_code(&e), e.to_string()))?;
    let (grounding, _) = control::grounding_for(&req, &ds).map_err(|e| CliError::new(control_code(&e), e.to_string()))?;
    let gazetteer = open_gazetteer(cfg)?;
    let report = validate_story(&story, &grounding, &req.policy, &gazetteer)
        .map_err(|e| CliError::new(validation_code(&e), e.to_string()))?;
    ensure_dir(&cfg.output_dir)?;
    write_report(&cfg.output_dir, &report)?;
    print!("{}", report.summary());
    if report.passed() {
        Ok(())
    } else {
        let flagged: Vec<&str> = report.flagged().map(|v| v.display_name.as_str()).collect();
        Err(CliError::new(
            EXIT_VALIDATION,
            if flagged.is_empty() {
                "story failed structural checks".to_string()
            } else {
                format!("flagged POIs: {}", flagged.join(", "))
            },
        ))
    }
}

fn cmd_map(story_path: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let story = read_story(story_path, cfg.narrative_spec())?;
    let gazetteer = open_gazetteer(cfg)?;
    let mut seen = std::collections::HashSet::new();
    let mut pois = Vec::new();
    for m in &story.mentions {
        if !seen.insert(normalize_name(&m.name)) {
            continue;
        }
        match gazetteer.geocode(&m.name) {
            Ok(Some(mut poi)) => {
                poi.name = m.name.clone();
                pois.push(poi);
            }
            Ok(None) => log::warn!("could not locate {:?}; left off the map", m.name),
            Err(e) => return Err(CliError::new(gazetteer_code(&e), e.to_string())),
        }
    }
    let trajectory = match (&cfg.dataset, cfg.mode) {
        (Some(_), StoryMode::SingleTrajectory) => {
            let req = cfg.to_request()?;
            let ds = parse_file(&req.dataset_path, req.schema)
                .map_err(|e| CliError::new(ingest_code(&e), e.to_string()))?;
            control::grounding_for(&req, &ds)
                .map_err(|e| CliError::new(control_code(&e), e.to_string()))?
                .1
        }
        _ => None,
    };
    let doc = emit_map(&pois, trajectory.as_ref().map(|t| t.points.as_slice()), cfg.cluster_distance_m)
        .map_err(|e| CliError::new(EXIT_PARSE, e.to_string()))?;
    ensure_dir(&cfg.output_dir)?;
    write_file(&cfg.output_dir.join("map.geojson"), &render_geojson(&doc))?;
    write_file(&cfg.output_dir.join("map.html"), &render_html(&doc, &format!("{} story map", cfg.region)))?;
    for e in &doc.legend {
        println!("{}. {}", e.number, e.name);
    }
    println!("markers: {}", doc.markers().count());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "# sample\ndataset = \"trips.csv\"\nmode = \"single_trajectory\"\nmax_words = 120\nmin_pois = 4\n",
        )
        .unwrap();
        let cli = Cli::parse_from(["geostory", "--config", path.to_str().unwrap(), "--offline", "story", "--min-pois", "6"]);
        let mut cfg = base_config(&cli).unwrap();
        let Command::Story(a) = &cli.command else { panic!() };
        cfg.apply_data(&a.data).unwrap();
        assert!(cfg.offline);
        assert_eq!(cfg.dataset, Some(dir.path().join("trips.csv")));
        assert_eq!(cfg.max_words, 120);
        let req = cfg.to_request().unwrap();
        assert_eq!(req.mode, StoryMode::SingleTrajectory);
        assert_eq!(req.schema, Schema::PointList);
        assert!(req.gazetteer.offline_only);
    }

    #[test]
    fn secrets_in_config_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "backend_token = \"abc\"\n").unwrap();
        let err = load_config(&path).unwrap_err();
        assert_eq!(err.code, EXIT_CONFIG);
        assert!(err.message.contains(DEFAULT_TOKEN_ENV));
    }

    #[test]
    fn unknown_keys_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "max_wordz = 3\n").unwrap();
        assert_eq!(load_config(&path).unwrap_err().code, EXIT_CONFIG);
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [EXIT_OK, EXIT_CONFIG, EXIT_PARSE, EXIT_INFRA, EXIT_VALIDATION];
        let mut sorted = codes.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
        assert_eq!(backend_code(&BackendError::Transport("x".into())), EXIT_INFRA);
        assert_eq!(gazetteer_code(&GazetteerError::Transport("x".into())), EXIT_INFRA);
        assert_eq!(control_code(&ControlError::Config(vec![])), EXIT_CONFIG);
    }
}
