//! Single-replicate synthetic-recovery checks on the full-size panel.
//! The broader multi-replicate studies live in the acceptance suite.

use beltfield_core::graph::RegionGraph;
use beltfield_core::mcmc::{fit, summarize, McmcConfig};
use beltfield_core::model::{HyperParams, ModelSpec, Priors};
use beltfield_core::synth::{simulate_panel, CovariateSource, TruthParams};

#[test]
fn model5_recovers_fixed_effects_on_iowa_panel() {
    let graph = RegionGraph::iowa99();
    let spec = ModelSpec::parse_code("S_BYM.T_AR1.ST_1.B").unwrap();
    let truth = TruthParams::default();
    let (panel, _) =
        simulate_panel(&graph, &spec, &truth, &CovariateSource::Synthetic, 12, 420).unwrap();
    assert_eq!(panel.n_observed(), 1188);

    let config = McmcConfig {
        n_iter: 3000,
        n_burnin: 1500,
        n_thin: 3,
        n_chains: 1,
        seed: 420,
        adaptation_window: 1500,
    };
    let start = std::time::Instant::now();
    let fit = fit(&panel, &graph, &spec, &Priors::default(), &config).unwrap();
    eprintln!("model 5 fit (3000 iters, 99x12): {:.2?}", start.elapsed());
    eprintln!("acceptance: {:?}", fit.acceptance);

    let table = summarize(
        &fit,
        Some(&["alpha", "beta[per_capita_income]", "beta[vmt]", "tau_b", "rho"]),
    )
    .unwrap();
    for row in &table.rows {
        eprintln!(
            "{:<28} mean {:>8.4} sd {:>7.4} [{:>8.4}, {:>8.4}]",
            row.name, row.mean, row.sd, row.q025, row.q975
        );
    }
    let by_name = |n: &str| table.rows.iter().find(|r| r.name == n).unwrap();
    let checks = [
        ("alpha", truth.alpha),
        ("beta[per_capita_income]", truth.beta[0]),
        ("beta[vmt]", truth.beta[1]),
    ];
    for (name, target) in checks {
        let row = by_name(name);
        assert!(
            (row.mean - target).abs() < 3.0 * row.sd.max(1e-6),
            "{name}: mean {} vs truth {target} (sd {})",
            row.mean,
            row.sd
        );
    }
    // The wall-time contract for a single fit.
    assert!(fit.wall_time_s < 600.0, "fit took {}s", fit.wall_time_s);
}

#[test]
fn hyperparameters_land_in_range() {
    let graph = RegionGraph::queen_lattice(5, 6);
    let spec = ModelSpec::parse_code("S_BYM.T_AR1.ST_1.B").unwrap();
    let truth = TruthParams {
        beta: vec![],
        hyper: HyperParams {
            tau_b: 80.0,
            tau_u: 4.0,
            tau_v: 40.0,
            tau_phi: 25.0,
            tau_eta: 150.0,
            rho: 0.6,
        },
        ..TruthParams::default()
    };
    let (panel, _) = simulate_panel(&graph, &spec, &truth, &CovariateSource::None, 12, 77).unwrap();
    let config = McmcConfig {
        n_iter: 2400,
        n_burnin: 1200,
        n_thin: 3,
        n_chains: 1,
        seed: 8,
        adaptation_window: 1200,
    };
    let fit = fit(&panel, &graph, &spec, &Priors::default(), &config).unwrap();
    let table = summarize(&fit, Some(&["tau_b", "rho"])).unwrap();
    let tau_b = &table.rows[0];
    assert!(
        tau_b.q025 < 80.0 && 80.0 < tau_b.q975 * 1.5,
        "tau_b interval [{}, {}] far from 80",
        tau_b.q025,
        tau_b.q975
    );
    let rho = &table.rows[1];
    assert!(rho.mean > 0.0, "rho mean {} should be positive", rho.mean);
}
