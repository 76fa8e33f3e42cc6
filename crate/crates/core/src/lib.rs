//! Spatio-temporal Bayesian beta regression for areal compliance-rate
//! panels: journey-event ingestion, queen-contiguity graphs, Moran
//! autocorrelation diagnostics, a BYM + temporal + interaction model family
//! fitted by MCMC, and model comparison scores (DIC, CPO, RMSE/MAE, PIT,
//! spatial fraction, residual Moran).

pub mod error;
pub mod eval;
pub mod graph;
pub mod mcmc;
pub mod model;
pub mod moran;
pub mod oracle;
pub mod panel;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use graph::{RegionGraph, WeightMatrix, WeightStyle};
pub use mcmc::{McmcConfig, PosteriorFit};
pub use model::{HyperParams, LatentState, ModelSpec, Priors};
pub use panel::{Panel, PanelObservation};
