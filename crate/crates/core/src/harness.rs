//! Test scaffolding that is also handy for demos: a scripted story backend,
//! seeded synthetic taxi data, and a hallucination injector. Everything here
//! produces ordinary pipeline inputs.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::gazetteer::Poi;
use crate::geo::{haversine_distance, BoundingBox, GeoPoint, METERS_PER_DEGREE};
use crate::ingest::{format_polyline, kaggle_row, Dataset, Trajectory, KAGGLE_COLUMNS, PORTO_SAMPLE_INTERVAL_S};
use crate::story::{markup, BackendError, GenerationRequest, MarkupError, Story, StoryBackend};

/// Extent of the Porto taxi data used as the default synthetic area.
pub const PORTO_BBOX: BoundingBox = BoundingBox {
    min_lon: -8.70,
    min_lat: 41.10,
    max_lon: -8.50,
    max_lat: 41.25,
};

/// Path of the bundled Porto gazetteer fixture.
pub fn porto_fixture_path() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/data/porto_pois.csv"))
}

/// Replays canned responses in order and records every prompt it receives.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    responses: Vec<String>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ScriptedBackend {
            responses: responses.into_iter().map(Into::into).collect(),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.prompts.lock().expect("prompts poisoned").len()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompts poisoned").clone()
    }
}

impl StoryBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let mut prompts = self.prompts.lock().expect("prompts poisoned");
        let i = prompts.len();
        prompts.push(request.prompt.clone());
        self.responses.get(i).cloned().ok_or(BackendError::ScriptExhausted(self.responses.len()))
    }

    fn is_shareable(&self) -> bool {
        false
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointCluster {
    pub center: GeoPoint,
    pub weight: f64,
    pub stddev_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_trajectories: usize,
    pub bbox: BoundingBox,
    pub endpoint_clusters: Vec<EndpointCluster>,
    /// Inclusive range of points per trajectory.
    pub points_per_trajectory: (usize, usize),
    pub step_m: f64,
}

impl SyntheticSpec {
    /// Four endpoint clusters around central Porto.
    pub fn porto(seed: u64, n_trajectories: usize) -> Self {
        let c = |lon, lat, weight| EndpointCluster {
            center: GeoPoint { lon, lat },
            weight,
            stddev_m: 120.0,
        };
        SyntheticSpec {
            seed,
            n_trajectories,
            bbox: PORTO_BBOX,
            endpoint_clusters: vec![
                c(-8.6110, 41.1465, 0.4),
                c(-8.5855, 41.1487, 0.25),
                c(-8.6300, 41.1585, 0.2),
                c(-8.6130, 41.1410, 0.15),
            ],
            points_per_trajectory: (8, 40),
            step_m: 120.0,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut problems = Vec::new();
        if self.endpoint_clusters.is_empty() {
            problems.push("at least one endpoint cluster is required".to_string());
        }
        let total: f64 = self.endpoint_clusters.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            problems.push(format!("cluster weights sum to {total}, not 1"));
        }
        for (i, c) in self.endpoint_clusters.iter().enumerate() {
            if !(c.weight >= 0.0) || !(c.stddev_m >= 0.0) || !c.center.is_valid() {
                problems.push(format!("cluster {i} has a negative weight, negative stddev or invalid centre"));
            }
        }
        let (lo, hi) = self.points_per_trajectory;
        if lo < 2 || hi < lo {
            problems.push(format!("points_per_trajectory ({lo}, {hi}) must satisfy 2 <= min <= max"));
        }
        if !(self.step_m >= 0.0) {
            problems.push("step_m must be >= 0".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::InvalidSpec(problems.join("; ")))
        }
    }
}

fn offset(p: GeoPoint, east_m: f64, north_m: f64) -> GeoPoint {
    let lat = p.lat + north_m / METERS_PER_DEGREE;
    let lon = p.lon + east_m / (METERS_PER_DEGREE * p.lat.to_radians().cos());
    GeoPoint {
        lon: lon.clamp(-180.0, 180.0),
        lat: lat.clamp(-90.0, 90.0),
    }
}

/// Seeded random walks, each ending at a point drawn from one of the
/// endpoint clusters. Walks are generated backwards from the endpoint and
/// reversed, and are kept inside the spec bbox where possible.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset, HarnessError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = WeightedIndex::new(spec.endpoint_clusters.iter().map(|c| c.weight))
        .map_err(|e| HarnessError::InvalidSpec(e.to_string()))?;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    for i in 0..spec.n_trajectories {
        let cluster = &spec.endpoint_clusters[weights.sample(&mut rng)];
        let end = offset(
            cluster.center,
            cluster.stddev_m * unit.sample(&mut rng),
            cluster.stddev_m * unit.sample(&mut rng),
        );
        let n = rng.random_range(spec.points_per_trajectory.0..=spec.points_per_trajectory.1);
        let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut points = vec![end];
        let mut cur = end;
        for _ in 1..n {
            heading += 0.5 * unit.sample(&mut rng);
            let mut next = offset(cur, spec.step_m * heading.sin(), spec.step_m * heading.cos());
            if !spec.bbox.contains(next) && spec.bbox.contains(cur) {
                heading += std::f64::consts::PI;
                next = offset(cur, spec.step_m * heading.sin(), spec.step_m * heading.cos());
            }
            points.push(next);
            cur = next;
        }
        points.reverse();
        trajectories.push(Trajectory {
            id: format!("synthetic-{i:06}"),
            start_time: Some(1_372_636_800 + 60 * i as i64),
            points,
            sample_interval: Some(PORTO_SAMPLE_INTERVAL_S),
        });
    }
    Ok(Dataset {
        trajectories,
        source_path: format!("synthetic:seed={}", spec.seed),
        ..Dataset::default()
    })
}

/// A trajectory through `waypoints` with a point every `spacing_m` or so.
pub fn synthetic_route(id: &str, waypoints: &[GeoPoint], spacing_m: f64) -> Trajectory {
    let mut points = Vec::new();
    for pair in waypoints.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let steps = (haversine_distance(a, b) / spacing_m.max(1.0)).ceil().max(1.0) as usize;
        for s in 0..steps {
            let t = s as f64 / steps as f64;
            points.push(GeoPoint {
                lon: a.lon + t * (b.lon - a.lon),
                lat: a.lat + t * (b.lat - a.lat),
            });
        }
    }
    if let Some(last) = waypoints.last() {
        points.push(*last);
    }
    Trajectory {
        id: id.to_string(),
        start_time: Some(1_372_636_800),
        points,
        sample_interval: Some(PORTO_SAMPLE_INTERVAL_S),
    }
}

/// Appends one sentence per place, each with POI markup, and re-parses.
pub fn inject_hallucinations(story: &Story, far_pois: &[Poi]) -> Result<Story, MarkupError> {
    let mut text = story.text.clone();
    for poi in far_pois {
        if !text.is_empty() && !text.ends_with(char::is_whitespace) {
            text.push(' ');
        }
        text.push_str(&format!("The journey also passes {}.", markup(&poi.name)));
    }
    Story::from_text(text, story.spec.clone(), &story.backend_id)
}

/// Counts of what [`write_synthetic_kaggle`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KaggleFixture {
    pub good_rows: usize,
    pub bad_rows: usize,
}

/// Writes `rows` Kaggle-layout rows of which exactly `bad` cannot be used
/// (missing data flag, empty, malformed, out-of-range or single-point
/// polylines, in rotation). Bad rows are scattered by a seeded shuffle.
pub fn write_synthetic_kaggle<W: Write>(out: W, rows: usize, bad: usize, seed: u64) -> Result<KaggleFixture, csv::Error> {
    assert!(bad <= rows, "more bad rows than rows");
    let mut ds_spec = SyntheticSpec::porto(seed, rows);
    ds_spec.points_per_trajectory = (3, 12);
    let ds = generate_dataset(&ds_spec).expect("built-in spec is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut bad_mask = vec![false; rows];
    bad_mask[..bad].iter_mut().for_each(|b| *b = true);
    bad_mask.shuffle(&mut rng);

    let mut w = csv::WriterBuilder::new().quote_style(csv::QuoteStyle::NonNumeric).from_writer(out);
    w.write_record(KAGGLE_COLUMNS)?;
    let mut kind = 0usize;
    for (t, is_bad) in ds.trajectories.iter().zip(bad_mask) {
        let poly = format_polyline(&t.points);
        let row = if !is_bad {
            kaggle_row(t, false, &poly)
        } else {
            kind += 1;
            match kind % 5 {
                0 => kaggle_row(t, true, &poly),
                1 => kaggle_row(t, false, "[]"),
                2 => kaggle_row(t, false, &poly[..poly.len() / 2]),
                3 => kaggle_row(t, false, "[[-200.5,41.15],[-8.61,41.15]]"),
                _ => kaggle_row(t, false, &format_polyline(&t.points[..1])),
            }
        };
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(KaggleFixture {
        good_rows: rows - bad,
        bad_rows: bad,
    })
}
