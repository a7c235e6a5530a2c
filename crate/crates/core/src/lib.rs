//! Joint daily minimum/maximum temperature seasonal-cycle model.
//!
//! Each location-year carries eight harmonic coefficients (annual and
//! semi-annual cosine/sine terms for tmin and tmax). Coefficients follow a
//! spatially correlated random walk across years, with the spatial
//! innovations represented by a knot-based predictive process. The crate
//! provides the harmonic algebra, the spatial basis, a Gibbs sampler,
//! a forward simulator, data ingestion and posterior summaries.

pub mod analysis;
pub mod draws;
pub mod error;
pub mod gibbs;
pub mod harmonic;
pub mod ingest;
pub mod rng;
pub mod spatial;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
