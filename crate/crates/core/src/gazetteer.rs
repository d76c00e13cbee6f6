//! Discovery agent: resolves place names to coordinates and finds places
//! near a location.
//!
//! Lookups go cache, then fixture, then remote. The remote service speaks a
//! Nominatim-style `search` protocol (see `docs/PROTOCOLS.md`); it is never
//! contacted when `offline_only` is set. Remote hits are appended to a
//! JSON-lines cache journal so later runs resolve them without network.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use crate::geo::{haversine_distance, BoundingBox, GeoPoint};

pub const DEFAULT_BASE_URL: &str = "https://nominatim.openstreetmap.org";
const USER_AGENT: &str = concat!("geostory/", env!("CARGO_PKG_VERSION"));
const MAX_CONCURRENT_LOOKUPS: usize = 4;

#[derive(Debug, Error)]
pub enum GazetteerError {
    #[error("empty place name")]
    EmptyName,
    #[error("gazetteer transport failure: {0}")]
    Transport(String),
    #[error("malformed gazetteer response: {0}")]
    Protocol(String),
    #[error("fixture {path}: {detail}")]
    Fixture { path: String, detail: String },
    #[error("cache journal {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid gazetteer configuration: {0}")]
    Config(String),
}

impl GazetteerError {
    /// Transport failures may succeed when retried; everything else won't.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GazetteerError::Transport(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoiSource {
    Remote,
    Fixture,
    Cache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub name: String,
    pub location: GeoPoint,
    pub category: Option<String>,
    pub source: PoiSource,
    pub blurb: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazetteerConfig {
    pub base_url: String,
    pub region_bias: Option<BoundingBox>,
    /// Remote requests per second.
    pub rate_limit: f64,
    pub offline_only: bool,
    pub fixture_path: Option<PathBuf>,
    pub cache_path: Option<PathBuf>,
    /// Free-text query sent for proximity searches.
    pub nearby_query: String,
    pub timeout_s: u64,
}

impl Default for GazetteerConfig {
    fn default() -> Self {
        GazetteerConfig {
            base_url: DEFAULT_BASE_URL.to_string(),
            region_bias: None,
            rate_limit: 1.0,
            offline_only: false,
            fixture_path: None,
            cache_path: None,
            nearby_query: "attraction".to_string(),
            timeout_s: 10,
        }
    }
}

impl GazetteerConfig {
    pub fn offline(fixture: impl Into<PathBuf>) -> Self {
        GazetteerConfig {
            offline_only: true,
            fixture_path: Some(fixture.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GazetteerError> {
        let mut problems = Vec::new();
        if self.offline_only && self.fixture_path.is_none() {
            problems.push("offline_only requires fixture_path".to_string());
        }
        if !(self.rate_limit > 0.0 && self.rate_limit.is_finite()) {
            problems.push(format!("rate_limit must be positive, got {}", self.rate_limit));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GazetteerError::Config(problems.join("; ")))
        }
    }
}

/// Case-folded, trimmed, whitespace-collapsed, diacritic-free form used for
/// matching. Display names are kept separately.
pub fn normalize_name(name: &str) -> String {
    let stripped: String = name.nfd().filter(|c| !is_combining_mark(*c)).collect();
    stripped
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone)]
struct FixtureEntry {
    poi: Poi,
}

/// Offline gazetteer loaded from a delimited table with columns
/// `name, aliases, lon, lat, category, blurb`. Aliases are `|`-separated.
#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    entries: Vec<FixtureEntry>,
    index: HashMap<String, usize>,
}

impl FixtureStore {
    pub fn load(path: &Path) -> Result<Self, GazetteerError> {
        let file = File::open(path).map_err(|e| GazetteerError::Fixture {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Self::from_reader(file, &path.display().to_string())
    }

    pub fn from_reader<R: std::io::Read>(reader: R, label: &str) -> Result<Self, GazetteerError> {
        let err = |detail: String| GazetteerError::Fixture {
            path: label.to_string(),
            detail,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
        let col = |n: &str| headers.iter().position(|h| h == n);
        let name_c = col("name").ok_or_else(|| err("missing column name".into()))?;
        let lon_c = col("lon").ok_or_else(|| err("missing column lon".into()))?;
        let lat_c = col("lat").ok_or_else(|| err("missing column lat".into()))?;
        let (alias_c, cat_c, blurb_c) = (col("aliases"), col("category"), col("blurb"));

        let mut store = FixtureStore::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| err(e.to_string()))?;
            let line = i + 2;
            let field = |c: Option<usize>| c.and_then(|c| rec.get(c)).filter(|s| !s.is_empty()).map(str::to_string);
            let name = rec.get(name_c).unwrap_or("").to_string();
            if name.is_empty() {
                return Err(err(format!("line {line}: empty name")));
            }
            let num = |c: usize| rec.get(c).and_then(|v| v.parse::<f64>().ok());
            let (Some(lon), Some(lat)) = (num(lon_c), num(lat_c)) else {
                return Err(err(format!("line {line}: bad coordinates")));
            };
            let location = GeoPoint::new(lon, lat).map_err(|e| err(format!("line {line}: {e}")))?;
            let idx = store.entries.len();
            let mut keys = vec![normalize_name(&name)];
            if let Some(aliases) = field(alias_c) {
                keys.extend(aliases.split('|').map(normalize_name).filter(|k| !k.is_empty()));
            }
            for key in keys {
                if store.index.insert(key.clone(), idx).is_some() {
                    return Err(err(format!("line {line}: duplicate name or alias {key:?}")));
                }
            }
            store.entries.push(FixtureEntry {
                poi: Poi {
                    name,
                    location,
                    category: field(cat_c),
                    source: PoiSource::Fixture,
                    blurb: field(blurb_c),
                },
            });
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Option<&Poi> {
        self.index.get(&normalize_name(name)).map(|&i| &self.entries[i].poi)
    }

    pub fn pois(&self) -> impl Iterator<Item = &Poi> {
        self.entries.iter().map(|e| &e.poi)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One line of the cache journal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub query: String,
    pub resolved_at: u64,
    pub poi: CachedPoi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedPoi {
    pub name: String,
    pub lon: f64,
    pub lat: f64,
    pub category: Option<String>,
    pub blurb: Option<String>,
}

impl CachedPoi {
    fn to_poi(&self) -> Poi {
        Poi {
            name: self.name.clone(),
            location: GeoPoint {
                lon: self.lon,
                lat: self.lat,
            },
            category: self.category.clone(),
            source: PoiSource::Cache,
            blurb: self.blurb.clone(),
        }
    }
}

/// Append-only journal; the last record for a key wins on reload.
#[derive(Debug, Default)]
struct CacheJournal {
    path: Option<PathBuf>,
    entries: BTreeMap<String, CachedPoi>,
}

impl CacheJournal {
    fn open(path: Option<&Path>) -> Result<Self, GazetteerError> {
        let mut journal = CacheJournal {
            path: path.map(Path::to_path_buf),
            entries: BTreeMap::new(),
        };
        let Some(path) = path else { return Ok(journal) };
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(journal),
            Err(source) => {
                return Err(GazetteerError::Cache {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|source| GazetteerError::Cache {
                path: path.display().to_string(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheRecord>(&line) {
                Ok(rec) => {
                    journal.entries.insert(rec.key, rec.poi);
                }
                Err(e) => log::warn!("ignoring unreadable cache line in {}: {e}", path.display()),
            }
        }
        Ok(journal)
    }

    fn get(&self, key: &str) -> Option<Poi> {
        self.entries.get(key).map(CachedPoi::to_poi)
    }

    fn append(&mut self, key: String, query: &str, poi: &Poi) -> Result<(), GazetteerError> {
        let cached = CachedPoi {
            name: poi.name.clone(),
            lon: poi.location.lon,
            lat: poi.location.lat,
            category: poi.category.clone(),
            blurb: poi.blurb.clone(),
        };
        if let Some(path) = &self.path {
            let rec = CacheRecord {
                key: key.clone(),
                query: query.to_string(),
                resolved_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
                poi: cached.clone(),
            };
            let mut line = serde_json::to_string(&rec).expect("cache record serializes");
            line.push('\n');
            let io = |source| GazetteerError::Cache {
                path: path.display().to_string(),
                source,
            };
            // A single write of a whole line keeps concurrent appenders from interleaving.
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
            f.write_all(line.as_bytes()).map_err(io)?;
        }
        self.entries.insert(key, cached);
        Ok(())
    }
}

struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    fn new(per_second: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / per_second),
            next: Mutex::new(None),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot.saturating_duration_since(now)
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

pub type GeocodeOutcome = Result<Option<Poi>, GazetteerError>;

/// The discovery agent. Shareable across threads.
pub struct Gazetteer {
    cfg: GazetteerConfig,
    fixture: FixtureStore,
    cache: Mutex<CacheJournal>,
    agent: ureq::Agent,
    limiter: RateLimiter,
    remote_requests: AtomicUsize,
}

impl std::fmt::Debug for Gazetteer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gazetteer")
            .field("cfg", &self.cfg)
            .field("fixture_entries", &self.fixture.len())
            .finish()
    }
}

impl Gazetteer {
    pub fn open(cfg: GazetteerConfig) -> Result<Self, GazetteerError> {
        cfg.validate()?;
        let fixture = match &cfg.fixture_path {
            Some(p) => FixtureStore::load(p)?,
            None => FixtureStore::default(),
        };
        let cache = CacheJournal::open(cfg.cache_path.as_deref())?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Gazetteer {
            limiter: RateLimiter::new(cfg.rate_limit),
            fixture,
            cache: Mutex::new(cache),
            agent,
            remote_requests: AtomicUsize::new(0),
            cfg,
        })
    }

    pub fn config(&self) -> &GazetteerConfig {
        &self.cfg
    }

    pub fn fixture(&self) -> &FixtureStore {
        &self.fixture
    }

    /// Number of HTTP requests issued so far.
    pub fn remote_requests(&self) -> usize {
        self.remote_requests.load(Ordering::SeqCst)
    }

    fn cache_key(&self, name: &str) -> String {
        match &self.cfg.region_bias {
            Some(b) => format!("{}|{},{},{},{}", normalize_name(name), b.min_lon, b.min_lat, b.max_lon, b.max_lat),
            None => format!("{}|", normalize_name(name)),
        }
    }

    pub fn geocode(&self, name: &str) -> GeocodeOutcome {
        if name.trim().is_empty() {
            return Err(GazetteerError::EmptyName);
        }
        let key = self.cache_key(name);
        if let Some(poi) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(Some(poi));
        }
        if let Some(poi) = self.fixture.get(name) {
            return Ok(Some(poi.clone()));
        }
        if self.cfg.offline_only {
            return Ok(None);
        }
        let mut candidates = self.remote_search(name.trim(), 5, self.cfg.region_bias)?;
        if let Some(bias) = &self.cfg.region_bias {
            candidates.retain(|p| bias.contains(p.location));
        }
        let Some(hit) = candidates.into_iter().next() else {
            return Ok(None);
        };
        self.cache.lock().expect("cache poisoned").append(key, name, &hit)?;
        Ok(Some(hit))
    }

    /// All known places within `radius_m` of `center`, nearest first, ties
    /// by name.
    pub fn pois_near(&self, center: GeoPoint, radius_m: f64) -> Result<Vec<Poi>, GazetteerError> {
        if !(radius_m >= 0.0) {
            return Err(GazetteerError::Config(format!("negative search radius {radius_m}")));
        }
        let mut found: BTreeMap<String, Poi> = BTreeMap::new();
        {
            let cache = self.cache.lock().expect("cache poisoned");
            for cached in cache.entries.values() {
                let poi = cached.to_poi();
                found.entry(normalize_name(&poi.name)).or_insert(poi);
            }
        }
        for poi in self.fixture.pois() {
            found.entry(normalize_name(&poi.name)).or_insert_with(|| poi.clone());
        }
        if !self.cfg.offline_only {
            let area = BoundingBox::around(center, radius_m);
            for poi in self.remote_search(&self.cfg.nearby_query, 50, Some(area))? {
                if haversine_distance(center, poi.location) <= radius_m {
                    let key = normalize_name(&poi.name);
                    if !found.contains_key(&key) {
                        self.cache
                            .lock()
                            .expect("cache poisoned")
                            .append(self.cache_key(&poi.name), &poi.name, &poi)?;
                        found.insert(key, poi);
                    }
                }
            }
        }
        let mut near: Vec<(f64, Poi)> = found
            .into_values()
            .map(|p| (haversine_distance(center, p.location), p))
            .filter(|(d, _)| *d <= radius_m)
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.name.cmp(&b.1.name)));
        Ok(near.into_iter().map(|(_, p)| p).collect())
    }

    /// Geocodes every name; one failure does not abort the batch. Keys are
    /// the input names verbatim.
    pub fn bulk_geocode(&self, names: &[String]) -> BTreeMap<String, GeocodeOutcome> {
        let mut unique: Vec<&String> = names.iter().collect();
        unique.sort();
        unique.dedup();
        let next = AtomicUsize::new(0);
        let results: Mutex<BTreeMap<String, GeocodeOutcome>> = Mutex::new(BTreeMap::new());
        let workers = unique.len().min(MAX_CONCURRENT_LOOKUPS);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(name) = unique.get(i) else { break };
                    let outcome = self.geocode(name);
                    results.lock().expect("results poisoned").insert((*name).clone(), outcome);
                });
            }
        });
        results.into_inner().expect("results poisoned")
    }

    fn remote_search(&self, query: &str, limit: usize, viewbox: Option<BoundingBox>) -> Result<Vec<Poi>, GazetteerError> {
        self.limiter.acquire();
        self.remote_requests.fetch_add(1, Ordering::SeqCst);
        let url = format!("{}/search", self.cfg.base_url.trim_end_matches('/'));
        let mut req = self
            .agent
            .get(&url)
            .header("User-Agent", USER_AGENT)
            .header("Accept", "application/json")
            .query("q", query)
            .query("format", "jsonv2")
            .query("limit", limit.to_string());
        if let Some(b) = viewbox {
            req = req
                .query("viewbox", format!("{},{},{},{}", b.min_lon, b.max_lat, b.max_lon, b.min_lat))
                .query("bounded", "1");
        }
        log::debug!("gazetteer search {query:?}");
        let mut resp = req.call().map_err(|e| GazetteerError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| GazetteerError::Transport(e.to_string()))?;
        match status {
            200..=299 => parse_search_response(&body),
            429 | 500..=599 => Err(GazetteerError::Transport(format!("HTTP {status}"))),
            _ => Err(GazetteerError::Protocol(format!("HTTP {status}: {}", truncate(&body, 200)))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Deserialize)]
struct SearchHit {
    lat: Coord,
    lon: Coord,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    display_name: Option<String>,
    #[serde(default)]
    category: Option<String>,
    #[serde(default, rename = "type")]
    kind: Option<String>,
}

// Nominatim sends coordinates as strings; accept numbers too.
#[derive(Deserialize)]
#[serde(untagged)]
enum Coord {
    Text(String),
    Num(f64),
}

impl Coord {
    fn value(&self) -> Option<f64> {
        match self {
            Coord::Text(s) => s.trim().parse().ok(),
            Coord::Num(v) => Some(*v),
        }
    }
}

/// Parses a search response body into remote POIs.
pub fn parse_search_response(body: &str) -> Result<Vec<Poi>, GazetteerError> {
    let hits: Vec<SearchHit> = serde_json::from_str(body).map_err(|e| GazetteerError::Protocol(e.to_string()))?;
    hits.into_iter()
        .map(|h| {
            let (Some(lon), Some(lat)) = (h.lon.value(), h.lat.value()) else {
                return Err(GazetteerError::Protocol("non-numeric coordinate".into()));
            };
            let location = GeoPoint::new(lon, lat).map_err(|e| GazetteerError::Protocol(e.to_string()))?;
            let name = h
                .name
                .filter(|n| !n.trim().is_empty())
                .or_else(|| {
                    h.display_name
                        .as_deref()
                        .and_then(|d| d.split(',').next())
                        .map(|s| s.trim().to_string())
                })
                .filter(|n| !n.is_empty())
                .ok_or_else(|| GazetteerError::Protocol("result without a name".into()))?;
            Ok(Poi {
                name,
                location,
                category: h.kind.or(h.category),
                source: PoiSource::Remote,
                blurb: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "\
name,aliases,lon,lat,category,blurb
Clérigos Tower,Torre dos Clérigos,-8.6146,41.1458,tower,Baroque bell tower
Avenida dos Aliados,Aliados Avenue,-8.6112,41.1478,avenue,
São Bento Station,,-8.6106,41.1456,station,
";

    fn store() -> FixtureStore {
        FixtureStore::from_reader(FIXTURE.as_bytes(), "mem").unwrap()
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_name("  Clérigos   TOWER "), "clerigos tower");
        assert_eq!(normalize_name("São\tBento"), "sao bento");
        assert_ne!(normalize_name("Avenida dos Aliados"), normalize_name("Aliados Avenue"));
    }

    #[test]
    fn fixture_lookup_and_aliases() {
        let s = store();
        assert_eq!(s.len(), 3);
        assert_eq!(s.get("clerigos tower").unwrap().name, "Clérigos Tower");
        assert_eq!(s.get("Torre dos Clerigos").unwrap().name, "Clérigos Tower");
        assert_eq!(s.get("Aliados Avenue").unwrap().name, "Avenida dos Aliados");
        assert!(s.get("Foz do Douro").is_none());
        assert_eq!(s.get("São Bento Station").unwrap().blurb, None);
    }

    #[test]
    fn fixture_rejects_duplicates_and_bad_rows() {
        let dup = "name,aliases,lon,lat\nA,B,0,0\nB,,1,1\n";
        assert!(FixtureStore::from_reader(dup.as_bytes(), "d").is_err());
        let bad = "name,lon,lat\nA,abc,0\n";
        assert!(FixtureStore::from_reader(bad.as_bytes(), "d").is_err());
        let no_lat = "name,lon\nA,0\n";
        assert!(FixtureStore::from_reader(no_lat.as_bytes(), "d").is_err());
    }

    #[test]
    fn config_invariants() {
        let cfg = GazetteerConfig {
            offline_only: true,
            ..GazetteerConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(GazetteerError::Config(_))));
        let cfg = GazetteerConfig {
            rate_limit: 0.0,
            ..GazetteerConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(GazetteerConfig::default().validate().is_ok());
    }

    #[test]
    fn search_response_parsing() {
        let body = r#"[{"place_id":1,"lat":"41.1458","lon":"-8.6146","display_name":"Torre dos Clérigos, Rua, Porto","category":"tourism","type":"attraction"},
                       {"lat":41.0,"lon":-8.0,"name":"X"}]"#;
        let pois = parse_search_response(body).unwrap();
        assert_eq!(pois[0].name, "Torre dos Clérigos");
        assert_eq!(pois[0].category.as_deref(), Some("attraction"));
        assert_eq!(pois[1].location, GeoPoint { lon: -8.0, lat: 41.0 });
        assert!(matches!(parse_search_response("{\"error\":1}"), Err(GazetteerError::Protocol(_))));
        assert!(matches!(
            parse_search_response(r#"[{"lat":"x","lon":"1","name":"a"}]"#),
            Err(GazetteerError::Protocol(_))
        ));
        assert!(parse_search_response("[]").unwrap().is_empty());
    }

    #[test]
    fn retryable_classification() {
        assert!(GazetteerError::Transport("x".into()).is_retryable());
        assert!(!GazetteerError::Protocol("x".into()).is_retryable());
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let rl = RateLimiter::new(50.0);
        let start = Instant::now();
        for _ in 0..4 {
            rl.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(55));
    }
}
