//! Shared fixtures for the pipeline benchmarks.

use beltfield_core::graph::RegionGraph;
use beltfield_core::model::ModelSpec;
use beltfield_core::panel::Panel;
use beltfield_core::synth::{simulate_panel, CovariateSource, GenTruth, TruthParams};

/// The benchmark workload: a full-size synthetic panel on the bundled
/// 99-region graph.
pub fn iowa_panel() -> (Panel, RegionGraph, ModelSpec, GenTruth) {
    let graph = RegionGraph::iowa99();
    let spec = ModelSpec::parse_code("S_BYM.T_AR1.ST_1.B").unwrap();
    let truth = TruthParams::default();
    let (panel, gen_truth) =
        simulate_panel(&graph, &spec, &truth, &CovariateSource::Synthetic, 12, 2024).unwrap();
    (panel, graph, spec, gen_truth)
}
