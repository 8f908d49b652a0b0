//! Phase-wise risk metrics: attribute-distribution bias, fabrication (FEF)
//! and contradiction (LC) rates, popularity gap, and embedding polarization.

use thiserror::Error;

pub mod kmeans;
pub mod metrics;
pub mod polarization;
pub mod report;

pub use kmeans::{kmeans, KMeansParams, KMeansResult};
pub use metrics::{
    attribute_distribution, catalog_fef_rate, distribution_divergence, fef_rate, lc_rate,
    popularity_gap, table_distribution, Divergence, GapStats, Histogram, Observation,
    ObservationSet, PopularityIndex, Summary,
};
pub use polarization::{polarization_trace, PolarizationTrace};
pub use report::{build_report, DiagnosticsConfig, PopularityIndexMode, RiskReport};

#[derive(Debug, Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("alignment error: {0}")]
    Alignment(String),
}
