//! Grounded data storytelling over taxi trajectory data.
//!
//! The pipeline ingests trips, aggregates endpoints into a heat grid or
//! picks a single trip, discovers nearby places, asks a story backend for a
//! short three-act narrative with `[[POI: name]]` markup, checks every
//! mentioned place against the data, and emits a numbered map.

pub mod cli;
pub mod control;
pub mod gazetteer;
pub mod geo;
pub mod harness;
pub mod heat;
pub mod ingest;
pub mod map;
pub mod story;
pub mod validation;

pub use control::{execute, execute_on, plan, StoryRequest, StoryResult};
pub use geo::{BoundingBox, GeoPoint};
