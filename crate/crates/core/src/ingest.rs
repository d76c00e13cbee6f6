//! Trajectory dataset parsing.
//!
//! Two input schemas are supported:
//!
//! * `kaggle_porto`: the taxi-service CSV export with a `POLYLINE` column
//!   holding `[[lon, lat], ...]`. Only `TRIP_ID`, `TIMESTAMP`,
//!   `MISSING_DATA` and `POLYLINE` are read.
//! * `point_list`: one `lon,lat` pair per line with an optional header. The
//!   whole file is a single trajectory.
//!
//! Bad rows are never dropped silently: every source row ends up either as a
//! trajectory or in `Dataset::skipped_rows`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{path_length, GeoPoint};

/// Sampling interval of the Porto taxi export, in seconds.
pub const PORTO_SAMPLE_INTERVAL_S: u32 = 15;

pub const KAGGLE_COLUMNS: [&str; 9] = [
    "TRIP_ID",
    "CALL_TYPE",
    "ORIGIN_CALL",
    "ORIGIN_STAND",
    "TAXI_ID",
    "TIMESTAMP",
    "DAY_TYPE",
    "MISSING_DATA",
    "POLYLINE",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown schema {0:?} (expected kaggle_porto or point_list)")]
    UnknownSchema(String),
    #[error("unknown trajectory selection {0:?}")]
    UnknownSelection(String),
    #[error("input has no header row")]
    MissingHeader,
    #[error("header is missing required column {0}")]
    MissingColumn(String),
    #[error("line {line}: {detail}")]
    Malformed { line: u64, detail: String },
    #[error("dataset contains no trajectories")]
    EmptyDataset,
    #[error("no trajectory with id {0:?}")]
    TrajectoryNotFound(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    KagglePorto,
    PointList,
}

impl FromStr for Schema {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "kaggle_porto" => Ok(Schema::KagglePorto),
            "point_list" => Ok(Schema::PointList),
            other => Err(IngestError::UnknownSchema(other.to_string())),
        }
    }
}

impl std::fmt::Display for Schema {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Schema::KagglePorto => "kaggle_porto",
            Schema::PointList => "point_list",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub start_time: Option<i64>,
    pub points: Vec<GeoPoint>,
    pub sample_interval: Option<u32>,
}

impl Trajectory {
    pub fn length_m(&self) -> f64 {
        path_length(&self.points)
    }

    pub fn endpoint(&self) -> Option<GeoPoint> {
        self.points.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MissingData,
    EmptyPolyline,
    MalformedPolyline,
    TooFewPoints,
    OutOfRange,
    BadRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub source_path: String,
    pub skipped_rows: usize,
    pub skip_reasons: BTreeMap<SkipReason, usize>,
    /// Individual points dropped from `point_list` input for being outside
    /// the WGS84 range.
    pub skipped_points: usize,
}

impl Dataset {
    pub fn total_rows(&self) -> usize {
        self.trajectories.len() + self.skipped_rows
    }

    fn skip(&mut self, reason: SkipReason) {
        self.skipped_rows += 1;
        *self.skip_reasons.entry(reason).or_default() += 1;
    }
}

/// How a single trajectory is picked out of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    LongestByPoints,
    LongestByLength,
    ById(String),
}

impl FromStr for Selection {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "longest_by_points" => Ok(Selection::LongestByPoints),
            "longest_by_length" => Ok(Selection::LongestByLength),
            _ => match s.split_once(':') {
                Some(("by_id" | "id", id)) if !id.is_empty() => Ok(Selection::ById(id.to_string())),
                _ => Err(IngestError::UnknownSelection(s.to_string())),
            },
        }
    }
}

impl std::fmt::Display for Selection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Selection::LongestByPoints => f.write_str("longest_by_points"),
            Selection::LongestByLength => f.write_str("longest_by_length"),
            Selection::ById(id) => write!(f, "by_id:{id}"),
        }
    }
}

/// Opens and parses a dataset file.
pub fn parse_file(path: &Path, schema: Schema) -> Result<Dataset, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut ds = parse_dataset(file, schema, &path.display().to_string())?;
    if schema == Schema::PointList {
        if let (Some(t), Some(stem)) = (ds.trajectories.first_mut(), path.file_stem()) {
            t.id = stem.to_string_lossy().into_owned();
        }
    }
    Ok(ds)
}

pub fn parse_dataset<R: Read>(source: R, schema: Schema, source_path: &str) -> Result<Dataset, IngestError> {
    match schema {
        Schema::KagglePorto => parse_kaggle(source, source_path),
        Schema::PointList => parse_point_list(source, source_path),
    }
}

fn parse_kaggle<R: Read>(source: R, source_path: &str) -> Result<Dataset, IngestError> {
    let io_err = |source: std::io::Error| IngestError::Io {
        path: source_path.to_string(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(source);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) => return Err(csv_fatal(e, source_path)),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(IngestError::MissingHeader);
    }
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let trip_col = col("TRIP_ID").ok_or_else(|| IngestError::MissingColumn("TRIP_ID".into()))?;
    let ts_col = col("TIMESTAMP").ok_or_else(|| IngestError::MissingColumn("TIMESTAMP".into()))?;
    let poly_col = col("POLYLINE").ok_or_else(|| IngestError::MissingColumn("POLYLINE".into()))?;
    let missing_col = col("MISSING_DATA");

    let mut ds = Dataset {
        source_path: source_path.to_string(),
        ..Dataset::default()
    };
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => {
                    return Err(match e.into_kind() {
                        csv::ErrorKind::Io(io) => io_err(io),
                        _ => unreachable!(),
                    })
                }
                _ => {
                    ds.skip(SkipReason::BadRecord);
                    continue;
                }
            },
        }
        if record.len() == 1 && record[0].trim().is_empty() {
            // blank line
            continue;
        }
        if missing_col
            .and_then(|c| record.get(c))
            .is_some_and(|v| v.trim().eq_ignore_ascii_case("true"))
        {
            ds.skip(SkipReason::MissingData);
            continue;
        }
        let (Some(id), Some(poly)) = (record.get(trip_col), record.get(poly_col)) else {
            ds.skip(SkipReason::BadRecord);
            continue;
        };
        let points = match parse_polyline(poly) {
            Ok(p) => p,
            Err(reason) => {
                ds.skip(reason);
                continue;
            }
        };
        let start_time = record.get(ts_col).and_then(|t| t.trim().parse::<i64>().ok());
        ds.trajectories.push(Trajectory {
            id: id.trim().to_string(),
            start_time,
            points,
            sample_interval: Some(PORTO_SAMPLE_INTERVAL_S),
        });
    }
    Ok(ds)
}

fn csv_fatal(e: csv::Error, source_path: &str) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(1);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => IngestError::Io {
            path: source_path.to_string(),
            source,
        },
        other => IngestError::Malformed {
            line,
            detail: format!("{other:?}"),
        },
    }
}

/// Parses a `[[lon, lat], ...]` polyline, enforcing the two-point minimum
/// and the WGS84 range.
pub fn parse_polyline(text: &str) -> Result<Vec<GeoPoint>, SkipReason> {
    let text = text.trim();
    if text.is_empty() || text == "[]" {
        return Err(SkipReason::EmptyPolyline);
    }
    let pairs: Vec<[f64; 2]> = serde_json::from_str(text).map_err(|_| SkipReason::MalformedPolyline)?;
    if pairs.is_empty() {
        return Err(SkipReason::EmptyPolyline);
    }
    let points: Vec<GeoPoint> = pairs.iter().map(|[lon, lat]| GeoPoint { lon: *lon, lat: *lat }).collect();
    if points.iter().any(|p| !p.is_valid()) {
        return Err(SkipReason::OutOfRange);
    }
    if points.len() < 2 {
        return Err(SkipReason::TooFewPoints);
    }
    Ok(points)
}

fn parse_point_list<R: Read>(source: R, source_path: &str) -> Result<Dataset, IngestError> {
    let mut ds = Dataset {
        source_path: source_path.to_string(),
        ..Dataset::default()
    };
    let mut points = Vec::new();
    let mut seen_content = false;
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line.map_err(|source| IngestError::Io {
            path: source_path.to_string(),
            source,
        })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let first = !seen_content;
        seen_content = true;
        let parsed = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse::<f64>().ok()?, b.trim().parse::<f64>().ok()?)));
        match parsed {
            Some((lon, lat)) => match GeoPoint::new(lon, lat) {
                Ok(p) => points.push(p),
                Err(_) => ds.skipped_points += 1,
            },
            None if first => {} // header
            None => {
                return Err(IngestError::Malformed {
                    line: line_no,
                    detail: format!("expected \"lon,lat\", got {line:?}"),
                })
            }
        }
    }
    if points.len() >= 2 {
        ds.trajectories.push(Trajectory {
            id: "trajectory".to_string(),
            start_time: None,
            points,
            sample_interval: None,
        });
    } else if points.is_empty() {
        ds.skip(SkipReason::EmptyPolyline);
    } else {
        ds.skip(SkipReason::TooFewPoints);
    }
    Ok(ds)
}

/// Final point of every trajectory, in dataset order.
pub fn trip_endpoints(ds: &Dataset) -> Vec<GeoPoint> {
    ds.trajectories
        .iter()
        .filter(|t| t.points.len() >= 2)
        .filter_map(Trajectory::endpoint)
        .collect()
}

pub fn select_trajectory<'a>(ds: &'a Dataset, criterion: &Selection) -> Result<&'a Trajectory, IngestError> {
    if ds.trajectories.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    let best_by = |key: &dyn Fn(&Trajectory) -> f64| {
        ds.trajectories
            .iter()
            .map(|t| (key(t), t))
            .reduce(|best, cur| {
                let better = cur.0 > best.0 || (cur.0 == best.0 && cur.1.id < best.1.id);
                if better {
                    cur
                } else {
                    best
                }
            })
            .map(|(_, t)| t)
            .expect("non-empty")
    };
    match criterion {
        Selection::LongestByPoints => Ok(best_by(&|t| t.points.len() as f64)),
        Selection::LongestByLength => Ok(best_by(&|t| t.length_m())),
        Selection::ById(id) => ds
            .trajectories
            .iter()
            .find(|t| &t.id == id)
            .ok_or_else(|| IngestError::TrajectoryNotFound(id.clone())),
    }
}

/// Writes a trajectory as `lon,lat` lines with a header. Coordinates use the
/// shortest round-trip representation, so re-parsing is lossless.
pub fn write_point_list<W: Write>(traj: &Trajectory, mut out: W) -> std::io::Result<()> {
    writeln!(out, "lon,lat")?;
    for p in &traj.points {
        writeln!(out, "{},{}", p.lon, p.lat)?;
    }
    Ok(())
}

/// Renders a polyline in the Kaggle `[[lon,lat],...]` notation.
pub fn format_polyline(points: &[GeoPoint]) -> String {
    let mut s = String::from("[");
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("[{},{}]", p.lon, p.lat));
    }
    s.push(']');
    s
}

/// Writes trajectories in the Kaggle column layout.
pub fn write_kaggle_csv<W: Write>(trajectories: &[Trajectory], out: W) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().quote_style(csv::QuoteStyle::NonNumeric).from_writer(out);
    w.write_record(KAGGLE_COLUMNS)?;
    for t in trajectories {
        w.write_record(kaggle_row(t, false, &format_polyline(&t.points)))?;
    }
    w.flush()?;
    Ok(())
}

/// One row in Kaggle column order with an arbitrary polyline payload, used to
/// write deliberately bad rows as well as good ones.
pub fn kaggle_row(t: &Trajectory, missing_data: bool, polyline: &str) -> [String; 9] {
    [
        t.id.clone(),
        "B".to_string(),
        String::new(),
        String::new(),
        "20000000".to_string(),
        t.start_time.unwrap_or(0).to_string(),
        "A".to_string(),
        if missing_data { "True" } else { "False" }.to_string(),
        polyline.to_string(),
    ]
}
