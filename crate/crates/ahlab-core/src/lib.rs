//! Numerical laboratory for asymptotically hyperbolic static metrics in the
//! rotationally symmetric reduction: radial grids, warped-product curvature,
//! approximate and exact potentials, the renormalised expander entropy with
//! its weighted ADM mass, conformal positive-mass certificates, and the
//! associated gradient / Ricci-DeTurck flows.

pub mod conformal;
pub mod entropy;
pub mod fit;
pub mod flow;
pub mod geometry;
pub mod grid;
pub mod linalg;
pub mod potential;

pub use conformal::{PmtCertificate, YamabeResult};
pub use entropy::{EntropyReport, StaticBackground};
pub use flow::{FlowConfig, FlowState, FlowTrace};
pub use geometry::{AuxTriple, Curvature, DiffFields, RadialMetric, RadialSymTensor};
pub use grid::{Clustering, RadialGrid};
pub use potential::ExpansionSeries;

use thiserror::Error;

/// Errors shared by all modules.
#[derive(Debug, Error)]
pub enum AhError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("gauge error: {0}")]
    Gauge(String),
    #[error("asymptotics error: {0}")]
    Asymptotics(String),
    #[error("resonance at order {order} (coefficient l(n+1-l) vanishes for n = {n})")]
    Resonance { order: usize, n: usize },
    #[error("solver failed: {context}; residual trace {trace:?}")]
    Solver { context: String, trace: Vec<f64> },
    #[error("renormalised limit diverges: {0}")]
    Divergence(String),
    #[error("flow failed: {0}")]
    Flow(String),
}

pub type Result<T> = std::result::Result<T, AhError>;
