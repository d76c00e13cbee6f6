//! Numbered POI maps: clustered markers, a legend, an optional route line.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::gazetteer::Poi;
use crate::geo::{bbox_of, haversine_distance, BoundingBox, GeoPoint};

pub const DEFAULT_CLUSTER_DISTANCE_M: f64 = 150.0;
const BBOX_PAD_FRACTION: f64 = 0.1;
const BBOX_MIN_PAD_DEG: f64 = 0.002;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("nothing to draw: no POIs and no trajectory")]
    Empty,
    #[error("cluster distance must be >= 0, got {0}")]
    InvalidClusterDistance(f64),
    #[error("invalid coordinates for {0:?}")]
    InvalidLocation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MapFeature {
    Marker { center: GeoPoint, numbers: Vec<usize> },
    Path { points: Vec<GeoPoint> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub number: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDocument {
    pub features: Vec<MapFeature>,
    pub legend: Vec<LegendEntry>,
    pub bbox: BoundingBox,
}

impl MapDocument {
    pub fn markers(&self) -> impl Iterator<Item = (&GeoPoint, &[usize])> {
        self.features.iter().filter_map(|f| match f {
            MapFeature::Marker { center, numbers } => Some((center, numbers.as_slice())),
            MapFeature::Path { .. } => None,
        })
    }

    pub fn legend_name(&self, number: usize) -> Option<&str> {
        self.legend.iter().find(|e| e.number == number).map(|e| e.name.as_str())
    }
}

/// Groups indices of `points` into single-linkage clusters: two points share
/// a cluster when a chain of hops no longer than `distance_m` joins them.
/// Clusters are ordered by their smallest index, members ascending.
pub fn single_linkage(points: &[GeoPoint], distance_m: f64) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..points.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            if haversine_distance(points[i], points[j]) <= distance_m {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot = vec![usize::MAX; points.len()];
    for i in 0..points.len() {
        let root = find(&mut parent, i);
        if slot[root] == usize::MAX {
            slot[root] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[slot[root]].push(i);
    }
    clusters
}

/// Builds the map for `pois` in story order. POI `i` gets number `i + 1`.
pub fn emit_map(pois: &[Poi], trajectory: Option<&[GeoPoint]>, cluster_distance_m: f64) -> Result<MapDocument, MapError> {
    if !(cluster_distance_m >= 0.0) {
        return Err(MapError::InvalidClusterDistance(cluster_distance_m));
    }
    let route = trajectory.filter(|t| !t.is_empty());
    if pois.is_empty() && route.is_none() {
        return Err(MapError::Empty);
    }
    if let Some(bad) = pois.iter().find(|p| !p.location.is_valid()) {
        return Err(MapError::InvalidLocation(bad.name.clone()));
    }

    let locations: Vec<GeoPoint> = pois.iter().map(|p| p.location).collect();
    let mut features = Vec::new();
    for cluster in single_linkage(&locations, cluster_distance_m) {
        let n = cluster.len() as f64;
        let center = GeoPoint {
            lon: cluster.iter().map(|&i| locations[i].lon).sum::<f64>() / n,
            lat: cluster.iter().map(|&i| locations[i].lat).sum::<f64>() / n,
        };
        features.push(MapFeature::Marker {
            center,
            numbers: cluster.iter().map(|i| i + 1).collect(),
        });
    }
    let mut extent = locations.clone();
    if let Some(points) = route {
        features.push(MapFeature::Path { points: points.to_vec() });
        extent.extend_from_slice(points);
    }
    let bbox = bbox_of(&extent)
        .map_err(|_| MapError::Empty)?
        .padded(BBOX_PAD_FRACTION, BBOX_MIN_PAD_DEG);
    let legend = pois
        .iter()
        .enumerate()
        .map(|(i, p)| LegendEntry {
            number: i + 1,
            name: p.name.clone(),
        })
        .collect();
    Ok(MapDocument { features, legend, bbox })
}

fn label(doc: &MapDocument, numbers: &[usize]) -> String {
    numbers
        .iter()
        .map(|n| match doc.legend_name(*n) {
            Some(name) => format!("{n}. {name}"),
            None => n.to_string(),
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// GeoJSON FeatureCollection. Keys are emitted in sorted order.
pub fn render_geojson(doc: &MapDocument) -> String {
    let features: Vec<serde_json::Value> = doc
        .features
        .iter()
        .map(|f| match f {
            MapFeature::Marker { center, numbers } => json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [center.lon, center.lat] },
                "properties": {
                    "kind": "poi",
                    "numbers": numbers,
                    "label": label(doc, numbers),
                },
            }),
            MapFeature::Path { points } => json!({
                "type": "Feature",
                "geometry": {
                    "type": "LineString",
                    "coordinates": points.iter().map(|p| [p.lon, p.lat]).collect::<Vec<_>>(),
                },
                "properties": { "kind": "trajectory" },
            }),
        })
        .collect();
    let b = &doc.bbox;
    let fc = json!({
        "type": "FeatureCollection",
        "bbox": [b.min_lon, b.min_lat, b.max_lon, b.max_lat],
        "features": features,
    });
    let mut out = serde_json::to_string_pretty(&fc).expect("json value serializes");
    out.push('\n');
    out
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Self-contained Leaflet page over OpenStreetMap tiles, with the GeoJSON
/// embedded and a legend panel.
pub fn render_html(doc: &MapDocument, title: &str) -> String {
    let geojson = render_geojson(doc).replace("</", "<\\/");
    let mut legend = String::new();
    for e in &doc.legend {
        let _ = writeln!(legend, "      <li value=\"{}\">{}</li>", e.number, escape_html(&e.name));
    }
    let b = &doc.bbox;
    format!(
        r#"<!DOCTYPE html>
<html>
<head>
  <meta charset="utf-8">
  <title>{title}</title>
  <link rel="stylesheet" href="https://unpkg.com/leaflet@1.9.4/dist/leaflet.css">
  <script src="https://unpkg.com/leaflet@1.9.4/dist/leaflet.js"></script>
  <style>
    html, body, #map {{ height: 100%; margin: 0; }}
    .num {{ background: #c0392b; color: #fff; border-radius: 12px; padding: 2px 6px;
            font: bold 12px sans-serif; white-space: nowrap; text-align: center; }}
    #legend {{ position: absolute; top: 10px; right: 10px; z-index: 1000; background: #fff;
               padding: 6px 12px; font: 13px sans-serif; max-height: 90%; overflow: auto; }}
  </style>
</head>
<body>
  <div id="map"></div>
  <div id="legend">
    <ol>
{legend}    </ol>
  </div>
  <script>
    const data = {geojson};
    const map = L.map('map');
    L.tileLayer('https://tile.openstreetmap.org/{{z}}/{{x}}/{{y}}.png', {{
      maxZoom: 19,
      attribution: '&copy; OpenStreetMap contributors'
    }}).addTo(map);
    L.geoJSON(data, {{
      style: {{ color: '#2c3e50', weight: 3 }},
      pointToLayer: (f, latlng) => L.marker(latlng, {{
        icon: L.divIcon({{ className: '', html: '<div class="num">' + f.properties.numbers.join(',') + '</div>' }})
      }}).bindTooltip(f.properties.label)
    }}).addTo(map);
    map.fitBounds([[{min_lat}, {min_lon}], [{max_lat}, {max_lon}]]);
  </script>
</body>
</html>
"#,
        title = escape_html(title),
        min_lat = b.min_lat,
        min_lon = b.min_lon,
        max_lat = b.max_lat,
        max_lon = b.max_lon,
    )
}
