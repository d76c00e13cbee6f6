mod common;

use std::fs;

use common::MockServer;
use geostory::gazetteer::{Gazetteer, GazetteerConfig, GazetteerError, PoiSource};
use geostory::geo::{BoundingBox, GeoPoint};
use geostory::harness::porto_fixture_path;
use geostory::story::{NarrativeSpec, Story, StoryMode};
use geostory::validation::{validate_story, GroundingContext, GroundingPolicy, ValidationError};

const SERRA: &str = r#"[{"lat":"41.1376","lon":"-8.6091","name":"Mosteiro da Serra do Pilar","display_name":"Mosteiro da Serra do Pilar, Vila Nova de Gaia","type":"attraction"}]"#;

fn online(server: &MockServer) -> GazetteerConfig {
    GazetteerConfig {
        base_url: server.url.clone(),
        rate_limit: 1000.0,
        ..GazetteerConfig::default()
    }
}

#[test]
fn remote_lookup_follows_nominatim_conventions() {
    let server = MockServer::start(|_| (200, SERRA.to_string()));
    let g = Gazetteer::open(GazetteerConfig {
        region_bias: Some(BoundingBox::new(-8.70, 41.10, -8.50, 41.25).unwrap()),
        ..online(&server)
    })
    .unwrap();
    let poi = g.geocode("Serra do Pilar").unwrap().unwrap();
    assert_eq!(poi.name, "Mosteiro da Serra do Pilar");
    assert_eq!(poi.source, PoiSource::Remote);
    assert_eq!(poi.location, GeoPoint { lon: -8.6091, lat: 41.1376 });

    let reqs = server.requests();
    assert_eq!(reqs.len(), 1);
    let r = &reqs[0];
    assert_eq!(r.method, "GET");
    assert!(r.target.starts_with("/search?"));
    assert_eq!(r.query("q").as_deref(), Some("Serra do Pilar"));
    assert_eq!(r.query("format").as_deref(), Some("jsonv2"));
    assert_eq!(r.query("viewbox").as_deref(), Some("-8.7,41.25,-8.5,41.1"));
    assert_eq!(r.query("bounded").as_deref(), Some("1"));
    assert!(r.header("User-Agent").is_some_and(|ua| ua.starts_with("geostory/")));
}

#[test]
fn fixture_answers_before_remote() {
    let server = MockServer::start(|_| (200, "[]".to_string()));
    let g = Gazetteer::open(GazetteerConfig {
        fixture_path: Some(porto_fixture_path()),
        ..online(&server)
    })
    .unwrap();
    assert_eq!(g.geocode("Torre dos Clérigos").unwrap().unwrap().name, "Clérigos Tower");
    assert_eq!(server.request_count(), 0);
    assert!(g.geocode("Nowhere In Particular").unwrap().is_none());
    assert_eq!(server.request_count(), 1);
}

#[test]
fn cache_makes_repeat_lookups_free_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache.jsonl");
    let server = MockServer::start(|_| (200, SERRA.to_string()));
    let cfg = GazetteerConfig {
        cache_path: Some(cache.clone()),
        ..online(&server)
    };
    let first = Gazetteer::open(cfg.clone()).unwrap().geocode("Serra do Pilar").unwrap().unwrap();
    assert_eq!(server.request_count(), 1);
    let journal = fs::read_to_string(&cache).unwrap();
    assert_eq!(journal.lines().count(), 1);

    // A fresh process (new handle) reads the journal and never calls out.
    let again = Gazetteer::open(cfg.clone()).unwrap();
    let second = again.geocode("  serra DO pilar ").unwrap().unwrap();
    assert_eq!(again.remote_requests(), 0);
    assert_eq!(server.request_count(), 1);
    assert_eq!(second.location, first.location);
    assert_eq!(second.source, PoiSource::Cache);
    assert_eq!(fs::read_to_string(&cache).unwrap(), journal);
}

#[test]
fn server_errors_are_transport_client_errors_are_protocol() {
    let server = MockServer::start(|r| {
        if r.query("q").as_deref() == Some("busy") {
            (503, "overloaded".to_string())
        } else if r.query("q").as_deref() == Some("garbage") {
            (200, "{not json".to_string())
        } else {
            (400, "bad request".to_string())
        }
    });
    let g = Gazetteer::open(online(&server)).unwrap();
    let busy = g.geocode("busy").unwrap_err();
    assert!(matches!(busy, GazetteerError::Transport(_)) && busy.is_retryable());
    assert!(matches!(g.geocode("garbage"), Err(GazetteerError::Protocol(_))));
    let bad = g.geocode("anything").unwrap_err();
    assert!(matches!(bad, GazetteerError::Protocol(_)) && !bad.is_retryable());
}

#[test]
fn unreachable_server_is_transport() {
    let url = {
        let s = MockServer::start(|_| (200, "[]".to_string()));
        s.url.clone()
    };
    let g = Gazetteer::open(GazetteerConfig {
        base_url: url,
        timeout_s: 2,
        rate_limit: 1000.0,
        ..GazetteerConfig::default()
    })
    .unwrap();
    assert!(matches!(g.geocode("x"), Err(GazetteerError::Transport(_))));
}

#[test]
fn offline_never_touches_the_network() {
    let server = MockServer::start(|_| (200, SERRA.to_string()));
    let g = Gazetteer::open(GazetteerConfig {
        base_url: server.url.clone(),
        ..GazetteerConfig::offline(porto_fixture_path())
    })
    .unwrap();
    assert!(g.geocode("Serra do Pilar").unwrap().is_none());
    let near = g.pois_near(GeoPoint { lon: -8.6112, lat: 41.1478 }, 300.0).unwrap();
    assert!(!near.is_empty());
    assert_eq!(server.request_count(), 0);
}

#[test]
fn nearby_search_merges_remote_results_and_caches_them() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("near.jsonl");
    let server = MockServer::start(|_| (200, SERRA.to_string()));
    let g = Gazetteer::open(GazetteerConfig {
        cache_path: Some(cache.clone()),
        fixture_path: Some(porto_fixture_path()),
        ..online(&server)
    })
    .unwrap();
    let center = GeoPoint { lon: -8.6094, lat: 41.1399 };
    let near = g.pois_near(center, 400.0).unwrap();
    let names: Vec<&str> = near.iter().map(|p| p.name.as_str()).collect();
    assert!(names.contains(&"Mosteiro da Serra do Pilar"), "{names:?}");
    assert!(names.contains(&"Dom Luís I Bridge"));
    let r = &server.requests()[0];
    assert_eq!(r.query("q").as_deref(), Some("attraction"));
    assert_eq!(r.query("bounded").as_deref(), Some("1"));

    let offline = Gazetteer::open(GazetteerConfig {
        cache_path: Some(cache),
        ..GazetteerConfig::offline(porto_fixture_path())
    })
    .unwrap();
    assert!(offline.geocode("Mosteiro da Serra do Pilar").unwrap().is_some());
}

#[test]
fn bulk_failures_stay_per_name() {
    let server = MockServer::start(|r| match r.query("q").as_deref() {
        Some("Serra do Pilar") => (200, SERRA.to_string()),
        Some("nothing") => (200, "[]".to_string()),
        _ => (502, String::new()),
    });
    let g = Gazetteer::open(online(&server)).unwrap();
    let names: Vec<String> = ["Serra do Pilar", "nothing", "down", "Serra do Pilar"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let out = g.bulk_geocode(&names);
    assert_eq!(out.len(), 3);
    assert!(out["Serra do Pilar"].as_ref().unwrap().is_some());
    assert!(out["nothing"].as_ref().unwrap().is_none());
    assert!(matches!(out["down"], Err(GazetteerError::Transport(_))));
}

#[test]
fn validation_surfaces_gazetteer_outage_as_retryable_error() {
    let server = MockServer::start(|_| (503, String::new()));
    let g = Gazetteer::open(online(&server)).unwrap();
    let story = Story::from_text(
        "Past [[POI: Somewhere Unknown]].".into(),
        NarrativeSpec::new(StoryMode::SingleTrajectory),
        "t",
    )
    .unwrap();
    let ctx = GroundingContext::Trajectory(vec![GeoPoint { lon: -8.61, lat: 41.14 }, GeoPoint { lon: -8.60, lat: 41.15 }]);
    let err = validate_story(&story, &ctx, &GroundingPolicy::default(), &g).unwrap_err();
    assert!(matches!(err, ValidationError::Infrastructure { .. }));
    assert!(err.is_retryable());
}
