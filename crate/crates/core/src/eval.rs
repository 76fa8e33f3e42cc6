//! Fit scoring and diagnostics: DIC, CPO/LPML, RMSE/MAE, PIT histograms,
//! the structured-spatial variance fraction, per-month residual Moran tests
//! and the exponentiated spatial-effect export.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{weight_matrix, RegionGraph, WeightStyle};
use crate::mcmc::PosteriorFit;
use crate::model::beta_loglik;
use crate::moran::{moran_test_normal, MoranResult};
use crate::panel::Panel;

/// Deviance information criterion decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Dic {
    pub dic: f64,
    pub p_d: f64,
    pub d_bar: f64,
}

/// `D_bar` is the posterior mean of the per-draw deviance
/// `-2 sum_j loglik_j`; `D(theta_bar)` is one extra likelihood pass at the
/// posterior-mean fitted values and precision; `p_D = D_bar - D(theta_bar)`
/// and `DIC = D_bar + p_D`.
pub fn dic(fit: &PosteriorFit) -> Result<Dic> {
    let m = fit.n_samples();
    if m < 2 {
        return Err(Error::Validation(format!("DIC needs >= 2 retained samples, got {m}")));
    }
    let mut d_bar = 0.0;
    for s in 0..m {
        let total: f64 = fit.loglik_row(s).iter().sum();
        d_bar += -2.0 * total;
    }
    d_bar /= m as f64;

    let mu_bar = fit.posterior_mean_mu();
    let tau_col = fit.param_column(fit.layout.tau_b);
    let tau_bar = tau_col.iter().sum::<f64>() / m as f64;
    let mut d_hat = 0.0;
    for (y, mu) in fit.obs_y.iter().zip(&mu_bar) {
        d_hat += -2.0 * beta_loglik(*y, *mu, tau_bar)?;
    }
    let p_d = d_bar - d_hat;
    Ok(Dic { dic: d_bar + p_d, p_d, d_bar })
}

#[derive(Debug, Clone, Serialize)]
pub struct CpoResult {
    /// Per-observation conditional predictive ordinate.
    pub cpo: Vec<f64>,
    pub mean_cpo: f64,
    /// Sum of log CPOs (log pseudo marginal likelihood).
    pub lpml: f64,
    /// Observations whose harmonic-mean estimate was not finite.
    pub flagged: Vec<usize>,
}

/// Harmonic-mean CPO estimator,
/// `CPO_j = M / sum_m exp(-loglik_jm)`, evaluated through log-sum-exp.
pub fn cpo(fit: &PosteriorFit) -> Result<CpoResult> {
    let m = fit.n_samples();
    if m == 0 {
        return Err(Error::Validation("CPO needs retained samples".into()));
    }
    let n = fit.n_obs();
    let ln_m = (m as f64).ln();
    let mut cpo = vec![0.0; n];
    let mut flagged = Vec::new();
    for j in 0..n {
        // log-sum-exp of the negated log likelihoods.
        let mut max = f64::NEG_INFINITY;
        for s in 0..m {
            max = max.max(-fit.loglik_row(s)[j]);
        }
        let ln_cpo = if max.is_finite() {
            let sum: f64 = (0..m).map(|s| (-fit.loglik_row(s)[j] - max).exp()).sum();
            ln_m - (max + sum.ln())
        } else {
            f64::NEG_INFINITY
        };
        cpo[j] = ln_cpo.exp();
        if !cpo[j].is_finite() || cpo[j] <= 0.0 {
            flagged.push(j);
        }
    }
    let mean_cpo = cpo.iter().sum::<f64>() / n as f64;
    let lpml = cpo.iter().map(|c| c.ln()).sum();
    Ok(CpoResult { cpo, mean_cpo, lpml, flagged })
}

/// Root-mean-square and mean-absolute error between observed values and
/// posterior-mean fitted values.
pub fn rmse_mae(observed: &[f64], fitted: &[f64]) -> Result<(f64, f64)> {
    if observed.len() != fitted.len() {
        return Err(Error::Validation(format!(
            "rmse_mae length mismatch: {} observed vs {} fitted",
            observed.len(),
            fitted.len()
        )));
    }
    if observed.is_empty() {
        return Err(Error::Validation("rmse_mae needs at least one observation".into()));
    }
    let n = observed.len() as f64;
    let mut sq = 0.0;
    let mut ab = 0.0;
    for (o, p) in observed.iter().zip(fitted) {
        let d = o - p;
        sq += d * d;
        ab += d.abs();
    }
    Ok(((sq / n).sqrt(), ab / n))
}

#[derive(Debug, Clone, Serialize)]
pub struct PitResult {
    pub values: Vec<f64>,
    /// `(bin_left, bin_right, count)` over equal-width bins.
    pub histogram: Vec<(f64, f64, u64)>,
}

/// Probability integral transform per observation: the posterior-predictive
/// CDF at the observed value, estimated by averaging the beta CDF over
/// retained `(mu, tau_b)` draws.
pub fn pit(fit: &PosteriorFit, n_bins: usize) -> Result<PitResult> {
    let m = fit.n_samples();
    if m == 0 {
        return Err(Error::Validation("PIT needs retained samples".into()));
    }
    let n = fit.n_obs();
    let tau_col = fit.param_column(fit.layout.tau_b);
    let mut values = vec![0.0; n];
    for s in 0..m {
        let mus = fit.fitted_mu_row(s);
        let tau = tau_col[s];
        for j in 0..n {
            let a = mus[j] * tau;
            let b = (1.0 - mus[j]) * tau;
            values[j] += statrs::function::beta::beta_reg(a, b, fit.obs_y[j]);
        }
    }
    for v in &mut values {
        *v /= m as f64;
    }
    let bins = n_bins.max(1);
    let mut histogram: Vec<(f64, f64, u64)> = (0..bins)
        .map(|k| (k as f64 / bins as f64, (k + 1) as f64 / bins as f64, 0))
        .collect();
    for &v in &values {
        let k = ((v * bins as f64) as usize).min(bins - 1);
        histogram[k].2 += 1;
    }
    Ok(PitResult { values, histogram })
}

/// Posterior mean of `sigma_u^2 / (sigma_u^2 + sigma_v^2)` computed per
/// draw, together with the ratio-of-posterior-means variant. Only defined
/// for BYM specifications.
pub fn spatial_fraction(fit: &PosteriorFit) -> Result<(f64, f64)> {
    let (Some(tau_u_idx), Some(tau_v_idx)) = (fit.layout.tau_u, fit.layout.tau_v) else {
        return Err(Error::NotApplicable(format!(
            "spatial fraction requires a BYM spatial component; spec is {}",
            fit.spec.code()
        )));
    };
    let tau_u = fit.param_column(tau_u_idx);
    let tau_v = fit.param_column(tau_v_idx);
    let m = tau_u.len() as f64;
    let mut mean_of_ratio = 0.0;
    let mut su2_sum = 0.0;
    let mut sv2_sum = 0.0;
    for (tu, tv) in tau_u.iter().zip(&tau_v) {
        let su2 = 1.0 / tu;
        let sv2 = 1.0 / tv;
        mean_of_ratio += su2 / (su2 + sv2);
        su2_sum += su2;
        sv2_sum += sv2;
    }
    Ok((mean_of_ratio / m, su2_sum / (su2_sum + sv2_sum)))
}

/// One month of the residual Moran diagnostic. `result` is absent when the
/// month was skipped (fewer than 3 observed regions) or the statistic was
/// undefined (zero residual variance); `note` says which.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualMoranRow {
    pub month_label: u32,
    pub n_regions_used: usize,
    pub result: Option<MoranResult>,
    pub note: Option<String>,
}

/// Month-by-month Moran test of the response residuals
/// `y_it - posterior-mean mu_it`, on the subgraph of observed regions.
pub fn residual_moran(
    fit: &PosteriorFit,
    panel: &Panel,
    graph: &RegionGraph,
    style: WeightStyle,
) -> Result<Vec<ResidualMoranRow>> {
    if graph.n_regions() != panel.n_regions() {
        return Err(Error::Validation("graph/panel region mismatch".into()));
    }
    let mu_bar = fit.posterior_mean_mu();
    let mut rows = Vec::with_capacity(panel.n_months());
    for t in 0..panel.n_months() {
        let mut regions = Vec::new();
        let mut residuals = Vec::new();
        for (j, &(i, tt)) in fit.obs_index.iter().enumerate() {
            if tt == t {
                regions.push(i);
                residuals.push(fit.obs_y[j] - mu_bar[j]);
            }
        }
        let month_label = panel.month_labels[t];
        if regions.len() < 3 {
            rows.push(ResidualMoranRow {
                month_label,
                n_regions_used: regions.len(),
                result: None,
                note: Some(format!("skipped: only {} observed regions", regions.len())),
            });
            continue;
        }
        let sub = graph.subgraph(&regions)?;
        let weights = weight_matrix(&sub, style);
        match moran_test_normal(&residuals, &weights) {
            Ok(result) => rows.push(ResidualMoranRow {
                month_label,
                n_regions_used: regions.len(),
                result: Some(result),
                note: None,
            }),
            Err(Error::UndefinedStatistic(msg)) => rows.push(ResidualMoranRow {
                month_label,
                n_regions_used: regions.len(),
                result: None,
                note: Some(format!("undefined: {msg}")),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplianceClass {
    /// `exp(mean u_i) >= 1`: compliance above the adjusted baseline.
    AboveOne,
    BelowOne,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpatialEffectRow {
    pub region_id: String,
    pub exp_mean_u: f64,
    pub class: ComplianceClass,
}

/// Exponentiated posterior means of the structured spatial effect, one row
/// per region, classified against the boundary-inclusive threshold 1.
pub fn spatial_effect_export(fit: &PosteriorFit) -> Result<Vec<SpatialEffectRow>> {
    let Some(u_range) = fit.layout.u.clone() else {
        return Err(Error::NotApplicable(format!(
            "spatial effects require a BYM spatial component; spec is {}",
            fit.spec.code()
        )));
    };
    let m = fit.n_samples() as f64;
    Ok(u_range
        .enumerate()
        .map(|(i, idx)| {
            let mean = fit.param_column(idx).iter().sum::<f64>() / m;
            let exp_mean_u = mean.exp();
            SpatialEffectRow {
                region_id: fit.region_ids[i].clone(),
                exp_mean_u,
                class: if exp_mean_u >= 1.0 {
                    ComplianceClass::AboveOne
                } else {
                    ComplianceClass::BelowOne
                },
            }
        })
        .collect())
}

/// Full evaluation bundle for one fit.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub spec_code: String,
    pub dic: f64,
    pub p_d: f64,
    pub d_bar: f64,
    pub mean_cpo: f64,
    pub lpml: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Present only for BYM specs: (mean-of-ratio, ratio-of-means).
    pub spatial_fraction: Option<f64>,
    pub spatial_fraction_ratio_of_means: Option<f64>,
    pub pit_values: Vec<f64>,
    pub pit_histogram: Vec<(f64, f64, u64)>,
    pub residual_moran: Vec<ResidualMoranRow>,
    pub cpo_flagged: Vec<usize>,
}

pub fn evaluate(fit: &PosteriorFit, panel: &Panel, graph: &RegionGraph) -> Result<EvalReport> {
    let d = dic(fit)?;
    let c = cpo(fit)?;
    let fitted = fit.posterior_mean_mu();
    let (rmse, mae) = rmse_mae(&fit.obs_y, &fitted)?;
    let p = pit(fit, 10)?;
    let fraction = match spatial_fraction(fit) {
        Ok(f) => Some(f),
        Err(Error::NotApplicable(_)) => None,
        Err(e) => return Err(e),
    };
    let residual = residual_moran(fit, panel, graph, WeightStyle::Binary)?;
    Ok(EvalReport {
        spec_code: fit.spec.code(),
        dic: d.dic,
        p_d: d.p_d,
        d_bar: d.d_bar,
        mean_cpo: c.mean_cpo,
        lpml: c.lpml,
        rmse,
        mae,
        spatial_fraction: fraction.map(|f| f.0),
        spatial_fraction_ratio_of_means: fraction.map(|f| f.1),
        pit_values: p.values,
        pit_histogram: p.histogram,
        residual_moran: residual,
        cpo_flagged: c.flagged,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    /// 1-based position in the input list.
    pub input_index: usize,
    pub spec_code: String,
    pub dic: f64,
    pub rmse: f64,
    pub mae: f64,
    pub mean_cpo: f64,
    pub spatial_fraction: Option<f64>,
    pub selected: bool,
}

/// Ranks reports by DIC ascending (ties broken by RMSE, then MAE) and marks
/// the winner.
pub fn compare(reports: &[EvalReport]) -> Result<Vec<ComparisonRow>> {
    if reports.is_empty() {
        return Err(Error::Validation("compare needs at least one report".into()));
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = &reports[a];
        let rb = &reports[b];
        ra.dic
            .partial_cmp(&rb.dic)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ra.rmse.partial_cmp(&rb.rmse).unwrap_or(std::cmp::Ordering::Equal))
            .then(ra.mae.partial_cmp(&rb.mae).unwrap_or(std::cmp::Ordering::Equal))
    });
    Ok(order
        .iter()
        .enumerate()
        .map(|(rank, &idx)| {
            let r = &reports[idx];
            ComparisonRow {
                input_index: idx + 1,
                spec_code: r.spec_code.clone(),
                dic: r.dic,
                rmse: r.rmse,
                mae: r.mae,
                mean_cpo: r.mean_cpo,
                spatial_fraction: r.spatial_fraction,
                selected: rank == 0,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RegionGraph;
    use crate::mcmc::{fit, McmcConfig};
    use crate::model::{HyperParams, ModelSpec, Priors};
    use crate::synth::{simulate_panel, CovariateSource, TruthParams};
    use approx::assert_relative_eq;

    fn small_fit() -> (crate::panel::Panel, RegionGraph, PosteriorFit) {
        let graph = RegionGraph::queen_lattice(3, 3);
        let spec = ModelSpec::parse_code("S_BYM.T_AR1.ST_1.B").unwrap();
        let truth = TruthParams {
            beta: vec![],
            hyper: HyperParams {
                tau_b: 60.0,
                tau_u: 6.0,
                tau_v: 30.0,
                tau_phi: 30.0,
                tau_eta: 150.0,
                rho: 0.5,
            },
            ..TruthParams::default()
        };
        let (panel, _) =
            simulate_panel(&graph, &spec, &truth, &CovariateSource::None, 5, 31).unwrap();
        let config = McmcConfig {
            n_iter: 600,
            n_burnin: 300,
            n_thin: 2,
            n_chains: 1,
            seed: 8,
            adaptation_window: 300,
        };
        let f = fit(&panel, &graph, &spec, &Priors::default(), &config).unwrap();
        (panel, graph, f)
    }

    #[test]
    fn dic_identity_holds() {
        let (_, _, f) = small_fit();
        let d = dic(&f).unwrap();
        assert_relative_eq!(d.dic, d.d_bar + d.p_d, epsilon = 1e-9);
    }

    #[test]
    fn rmse_mae_cases() {
        assert_eq!(rmse_mae(&[0.5, 0.7], &[0.5, 0.7]).unwrap(), (0.0, 0.0));
        let (rmse, mae) = rmse_mae(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert_relative_eq!(rmse, 1.0);
        assert_relative_eq!(mae, 1.0);
        let (rmse, mae) = rmse_mae(&[0.5, 0.7], &[0.6, 0.6]).unwrap();
        assert_relative_eq!(rmse, 0.1, epsilon = 1e-12);
        assert_relative_eq!(mae, 0.1, epsilon = 1e-12);
        assert!(rmse_mae(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn cpo_two_term_harmonic_mean() {
        // Doctor a fit's loglik storage through a tiny real fit, then check
        // the estimator arithmetic on its own: densities {1, 3} give
        // CPO = 2 / (1 + 1/3) = 1.5. We verify via the same log-sum-exp
        // path by constructing the numbers directly.
        let lls = [1.0f64.ln(), 3.0f64.ln()];
        let max = lls.iter().map(|l| -l).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = lls.iter().map(|l| (-l - max).exp()).sum();
        let ln_cpo = (2.0f64).ln() - (max + sum.ln());
        assert_relative_eq!(ln_cpo.exp(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn cpo_constant_density_is_identity() {
        let (_, _, f) = small_fit();
        let c = cpo(&f).unwrap();
        assert!(c.flagged.is_empty());
        assert!(c.mean_cpo.is_finite());
        // Beta densities routinely exceed 1, so mean CPO above 1 is legal.
        assert!(c.mean_cpo > 0.0);
        assert_relative_eq!(
            c.lpml,
            c.cpo.iter().map(|x| x.ln()).sum::<f64>(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn pit_values_in_unit_interval() {
        let (_, _, f) = small_fit();
        let p = pit(&f, 10).unwrap();
        assert_eq!(p.values.len(), f.n_obs());
        assert!(p.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let total: u64 = p.histogram.iter().map(|h| h.2).sum();
        assert_eq!(total as usize, f.n_obs());
    }

    #[test]
    fn spatial_fraction_in_unit_interval() {
        let (_, _, f) = small_fit();
        let (frac, ratio) = spatial_fraction(&f).unwrap();
        assert!((0.0..=1.0).contains(&frac));
        assert!((0.0..=1.0).contains(&ratio));
    }

    #[test]
    fn spatial_fraction_not_applicable_without_bym() {
        let graph = RegionGraph::queen_lattice(2, 2);
        let spec = ModelSpec::parse_code("S_0.T_0.ST_0.B").unwrap();
        let truth = TruthParams {
            alpha: 0.1,
            beta: vec![],
            delta: 0.0,
            hyper: HyperParams { tau_b: 40.0, ..Default::default() },
        };
        let (panel, _) =
            simulate_panel(&graph, &spec, &truth, &CovariateSource::None, 3, 2).unwrap();
        let config = McmcConfig {
            n_iter: 100,
            n_burnin: 50,
            n_thin: 1,
            n_chains: 1,
            seed: 4,
            adaptation_window: 50,
        };
        let f = fit(&panel, &graph, &spec, &Priors::default(), &config).unwrap();
        assert!(matches!(spatial_fraction(&f), Err(Error::NotApplicable(_))));
        assert!(matches!(spatial_effect_export(&f), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn spatial_effect_export_geometric_mean_one() {
        let (_, _, f) = small_fit();
        let rows = spatial_effect_export(&f).unwrap();
        assert_eq!(rows.len(), 9);
        // Sum-to-zero posterior means -> geometric mean of exports is 1.
        let log_sum: f64 = rows.iter().map(|r| r.exp_mean_u.ln()).sum();
        assert!((log_sum / 9.0).abs() < 1e-6);
        for r in &rows {
            let above = r.exp_mean_u >= 1.0;
            assert_eq!(above, r.class == ComplianceClass::AboveOne);
        }
    }

    #[test]
    fn residual_moran_months_and_skips() {
        let (panel, graph, f) = small_fit();
        let rows = residual_moran(&f, &panel, &graph, WeightStyle::Binary).unwrap();
        assert_eq!(rows.len(), panel.n_months());
        for row in &rows {
            assert!(row.result.is_some(), "month {} unexpectedly skipped", row.month_label);
        }
    }

    #[test]
    fn compare_sorts_and_breaks_ties() {
        let mk = |dic: f64, rmse: f64, mae: f64| EvalReport {
            spec_code: format!("dic{dic}"),
            dic,
            p_d: 1.0,
            d_bar: dic - 1.0,
            mean_cpo: 1.0,
            lpml: 0.0,
            rmse,
            mae,
            spatial_fraction: None,
            spatial_fraction_ratio_of_means: None,
            pit_values: vec![],
            pit_histogram: vec![],
            residual_moran: vec![],
            cpo_flagged: vec![],
        };
        let reports = vec![mk(-10.0, 0.3, 0.2), mk(-12.0, 0.5, 0.4), mk(-12.0, 0.2, 0.1)];
        let rows = compare(&reports).unwrap();
        assert_eq!(rows[0].input_index, 3); // DIC tie broken by RMSE
        assert!(rows[0].selected);
        assert_eq!(rows[1].input_index, 2);
        assert_eq!(rows[2].input_index, 1);

        let single = compare(&reports[..1]).unwrap();
        assert!(single[0].selected);
    }

    #[test]
    fn dic_toy_arithmetic() {
        // Deviances {10, 14} with D(theta_bar) = 11: D_bar = 12, p_D = 1,
        // DIC = 13. Checked against the same arithmetic the estimator uses.
        let d_m = [10.0, 14.0];
        let d_bar = d_m.iter().sum::<f64>() / 2.0;
        let d_hat = 11.0;
        let p_d = d_bar - d_hat;
        assert_relative_eq!(d_bar + p_d, 13.0);
        assert_relative_eq!(d_hat + 2.0 * p_d, 13.0);
    }
}
