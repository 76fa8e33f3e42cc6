//! Posterior inference by adaptive random-walk Metropolis-within-Gibbs.
//!
//! The sampler sweeps blocks in a fixed order — fixed effects | structured
//! spatial field | unstructured spatial field | temporal | interaction |
//! hyperparameters — with per-block proposal scales tuned during burn-in
//! only (Robbins-Monro towards 0.44 for scalar updates, 0.23 for the joint
//! fixed-effect block). Sum-to-zero constraints are enforced by sweeping:
//! after each constrained-field update the component means move into the
//! intercept, which leaves the likelihood unchanged on connected graphs.
//!
//! Chains run on independent seed-derived streams
//! (`stream = mix(seed, chain_index)`), so results do not depend on how
//! chains are scheduled across threads.

mod sampler;
mod storage;

use std::ops::Range;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::model::{ModelSpec, Priors, TemporalEffect};
use crate::panel::Panel;

pub use sampler::Likelihood;
pub use storage::{load_fit, save_fit};

/// Sampler settings. `adaptation_window` caps how many initial iterations
/// adapt proposal scales; adaptation never extends past burn-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub n_thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub adaptation_window: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { n_iter: 20_000, n_burnin: 10_000, n_thin: 5, n_chains: 4, seed: 42, adaptation_window: 10_000 }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter <= self.n_burnin {
            return Err(Error::Validation(format!(
                "n_iter ({}) must exceed n_burnin ({})",
                self.n_iter, self.n_burnin
            )));
        }
        if self.n_thin == 0 {
            return Err(Error::Validation("n_thin must be >= 1".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::Validation("n_chains must be >= 1".into()));
        }
        Ok(())
    }

    /// Retained draws per chain after burn-in and thinning.
    pub fn n_retained(&self) -> usize {
        (self.n_iter - self.n_burnin).div_ceil(self.n_thin)
    }
}

/// Parameter naming and column order of the sample matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    names: Vec<String>,
    pub alpha: usize,
    pub beta: Range<usize>,
    pub delta: Option<usize>,
    pub u: Option<Range<usize>>,
    pub v: Option<Range<usize>>,
    pub phi: Option<Range<usize>>,
    pub eta: Option<Range<usize>>,
    pub tau_b: usize,
    pub tau_u: Option<usize>,
    pub tau_v: Option<usize>,
    pub tau_phi: Option<usize>,
    pub tau_eta: Option<usize>,
    pub rho: Option<usize>,
}

impl ParamLayout {
    pub fn build(
        spec: &ModelSpec,
        n_regions: usize,
        n_months: usize,
        covariate_names: &[String],
    ) -> Self {
        let mut names = vec!["alpha".to_string()];
        let beta = 1..1 + covariate_names.len();
        for name in covariate_names {
            names.push(format!("beta[{name}]"));
        }
        let mut delta = None;
        if spec.temporal == TemporalEffect::Linear {
            delta = Some(names.len());
            names.push("delta".to_string());
        }
        let mut u = None;
        let mut v = None;
        if spec.has_bym() {
            let start = names.len();
            names.extend((0..n_regions).map(|i| format!("u[{i}]")));
            u = Some(start..start + n_regions);
            let start = names.len();
            names.extend((0..n_regions).map(|i| format!("v[{i}]")));
            v = Some(start..start + n_regions);
        }
        let mut phi = None;
        if spec.has_phi() {
            let start = names.len();
            names.extend((0..n_months).map(|t| format!("phi[{t}]")));
            phi = Some(start..start + n_months);
        }
        let mut eta = None;
        if spec.interaction {
            let start = names.len();
            for i in 0..n_regions {
                for t in 0..n_months {
                    names.push(format!("eta[{i},{t}]"));
                }
            }
            eta = Some(start..start + n_regions * n_months);
        }
        let tau_b = names.len();
        names.push("tau_b".to_string());
        let push_opt = |flag: bool, name: &str, names: &mut Vec<String>| {
            if flag {
                let idx = names.len();
                names.push(name.to_string());
                Some(idx)
            } else {
                None
            }
        };
        let tau_u = push_opt(spec.has_bym(), "tau_u", &mut names);
        let tau_v = push_opt(spec.has_bym(), "tau_v", &mut names);
        let tau_phi = push_opt(spec.has_phi(), "tau_phi", &mut names);
        let tau_eta = push_opt(spec.interaction, "tau_eta", &mut names);
        let rho = push_opt(spec.temporal == TemporalEffect::Ar1, "rho", &mut names);
        Self { names, alpha: 0, beta, delta, u, v, phi, eta, tau_b, tau_u, tau_v, tau_phi, tau_eta, rho }
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Per-block acceptance accounting, reported for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockAcceptance {
    pub block: String,
    pub proposals: u64,
    pub accepts: u64,
    /// Acceptance rate over post-adaptation iterations only.
    pub post_rate: f64,
    pub final_scale: f64,
}

/// MCMC output: retained draws for every parameter, per-observation fitted
/// means and log-likelihood terms, and the bookkeeping needed to reproduce
/// and post-process the fit.
#[derive(Debug, Clone)]
pub struct PosteriorFit {
    pub spec: ModelSpec,
    pub layout: ParamLayout,
    pub config: McmcConfig,
    pub rng_seed: u64,
    pub wall_time_s: f64,
    pub panel_checksum: String,
    pub region_ids: Vec<String>,
    pub month_labels: Vec<u32>,
    /// `(region_index, month_index)` per observation column.
    pub obs_index: Vec<(usize, usize)>,
    /// Observed response per observation column.
    pub obs_y: Vec<f64>,
    pub acceptance: Vec<BlockAcceptance>,
    pub(crate) n_retained_per_chain: usize,
    /// Row-major `(n_samples, n_params)`, chains concatenated in order.
    pub(crate) params: Vec<f64>,
    /// Row-major `(n_samples, n_obs)` fitted means.
    pub(crate) fitted_mu: Vec<f64>,
    /// Row-major `(n_samples, n_obs)` per-observation log likelihoods.
    pub(crate) loglik: Vec<f64>,
}

impl PosteriorFit {
    pub fn n_samples(&self) -> usize {
        self.n_retained_per_chain * self.config.n_chains
    }

    pub fn n_obs(&self) -> usize {
        self.obs_index.len()
    }

    pub fn n_retained_per_chain(&self) -> usize {
        self.n_retained_per_chain
    }

    /// All retained draws of parameter column `idx`.
    pub fn param_column(&self, idx: usize) -> Vec<f64> {
        let p = self.layout.n_params();
        (0..self.n_samples()).map(|s| self.params[s * p + idx]).collect()
    }

    pub fn param_column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.layout.index_of(name).ok_or_else(|| self.unknown_param(name))?;
        Ok(self.param_column(idx))
    }

    fn unknown_param(&self, name: &str) -> Error {
        let names = self.layout.names();
        let shown: Vec<&str> = names.iter().take(8).map(String::as_str).collect();
        let available = if names.len() > 8 {
            format!("{} ... ({} parameters)", shown.join(", "), names.len())
        } else {
            shown.join(", ")
        };
        Error::UnknownParameter { name: name.to_string(), available }
    }

    /// Fitted mean draws for observation `j`.
    pub fn fitted_mu_column(&self, j: usize) -> Vec<f64> {
        let n = self.n_obs();
        (0..self.n_samples()).map(|s| self.fitted_mu[s * n + j]).collect()
    }

    pub fn loglik_row(&self, sample: usize) -> &[f64] {
        let n = self.n_obs();
        &self.loglik[sample * n..(sample + 1) * n]
    }

    pub fn fitted_mu_row(&self, sample: usize) -> &[f64] {
        let n = self.n_obs();
        &self.fitted_mu[sample * n..(sample + 1) * n]
    }

    /// Posterior-mean fitted value per observation.
    pub fn posterior_mean_mu(&self) -> Vec<f64> {
        let n = self.n_obs();
        let s = self.n_samples();
        let mut out = vec![0.0; n];
        for row in 0..s {
            for (o, v) in out.iter_mut().zip(self.fitted_mu_row(row)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= s as f64;
        }
        out
    }
}

/// Fits the model to a panel by MCMC. Deterministic given `config.seed` and
/// the inputs; constraint blocks are re-centred after every sweep so stored
/// ICAR (and RW1) draws satisfy their sum-to-zero constraints.
pub fn fit(
    panel: &Panel,
    graph: &RegionGraph,
    spec: &ModelSpec,
    priors: &Priors,
    config: &McmcConfig,
) -> Result<PosteriorFit> {
    fit_with_likelihood(panel, graph, spec, priors, config, Likelihood::Beta)
}

/// Test hook: identical machinery with the beta likelihood swapped for a
/// Gaussian on the linear-predictor scale, enabling conjugate closed-form
/// checks of the sampler.
#[doc(hidden)]
pub fn fit_with_likelihood(
    panel: &Panel,
    graph: &RegionGraph,
    spec: &ModelSpec,
    priors: &Priors,
    config: &McmcConfig,
    likelihood: Likelihood,
) -> Result<PosteriorFit> {
    config.validate()?;
    priors.validate()?;
    if graph.n_regions() != panel.n_regions() {
        return Err(Error::Validation(format!(
            "graph has {} regions, panel has {}",
            graph.n_regions(),
            panel.n_regions()
        )));
    }
    if panel.n_observed() == 0 {
        return Err(Error::Validation("panel has no observed cells".into()));
    }

    let start = Instant::now();
    let layout = ParamLayout::build(spec, panel.n_regions(), panel.n_months(), &panel.covariate_names);
    let data = sampler::ModelData::build(panel, graph, *spec, *priors, likelihood);
    sampler::check_initial_state(&data)?;

    let chain_outputs: Vec<sampler::ChainOutput> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| sampler::run_chain(&data, &layout, config, chain))
        .collect::<Result<Vec<_>>>()?;

    let n_ret = config.n_retained();
    let p = layout.n_params();
    let n_obs = data.obs.len();
    let mut params = Vec::with_capacity(config.n_chains * n_ret * p);
    let mut fitted_mu = Vec::with_capacity(config.n_chains * n_ret * n_obs);
    let mut loglik = Vec::with_capacity(config.n_chains * n_ret * n_obs);
    for out in &chain_outputs {
        params.extend_from_slice(&out.params);
        fitted_mu.extend_from_slice(&out.fitted_mu);
        loglik.extend_from_slice(&out.loglik);
    }
    // Acceptance diagnostics pooled over chains.
    let mut acceptance: Vec<BlockAcceptance> = Vec::new();
    for out in &chain_outputs {
        for stat in &out.acceptance {
            match acceptance.iter_mut().find(|a| a.block == stat.block) {
                Some(a) => {
                    a.proposals += stat.proposals;
                    a.accepts += stat.accepts;
                    a.post_rate += stat.post_rate / config.n_chains as f64;
                    a.final_scale = a.final_scale.max(stat.final_scale);
                }
                None => {
                    let mut s = stat.clone();
                    s.post_rate /= config.n_chains as f64;
                    acceptance.push(s);
                }
            }
        }
    }
    for a in &acceptance {
        if a.proposals > 0 && a.post_rate < 0.01 {
            return Err(Error::DivergentAdaptation { block: a.block.clone(), rate: a.post_rate });
        }
    }

    let obs_index: Vec<(usize, usize)> = data.obs.iter().map(|o| (o.region, o.month)).collect();
    let obs_y: Vec<f64> = data.obs.iter().map(|o| o.y).collect();
    Ok(PosteriorFit {
        spec: *spec,
        layout,
        config: *config,
        rng_seed: config.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        panel_checksum: panel.checksum(),
        region_ids: panel.region_ids.clone(),
        month_labels: panel.month_labels.clone(),
        obs_index,
        obs_y,
        acceptance,
        n_retained_per_chain: n_ret,
        params,
        fitted_mu,
        loglik,
    })
}

/// Posterior summary rows: mean, sd and central 95% interval bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    /// CSV layout `parameter,mean,sd,0.025quant,0.975quant`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["parameter", "mean", "sd", "0.025quant", "0.975quant"])?;
        for r in &self.rows {
            wtr.write_record([
                r.name.as_str(),
                &format!("{}", r.mean),
                &format!("{}", r.sd),
                &format!("{}", r.q025),
                &format!("{}", r.q975),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Empirical quantile with linear interpolation between order statistics
/// (the `h = (n-1)p + 1` rule).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Summarizes retained draws. `filter` restricts to the given parameter
/// names (errors on unknown names); `None` summarizes everything.
pub fn summarize(fit: &PosteriorFit, filter: Option<&[&str]>) -> Result<SummaryTable> {
    if fit.n_samples() < 100 {
        return Err(Error::Validation(format!(
            "summaries need >= 100 retained samples, fit has {}",
            fit.n_samples()
        )));
    }
    let indices: Vec<usize> = match filter {
        None => (0..fit.layout.n_params()).collect(),
        Some(names) => names
            .iter()
            .map(|name| fit.layout.index_of(name).ok_or_else(|| fit.unknown_param(name)))
            .collect::<Result<_>>()?,
    };
    let rows = indices
        .into_iter()
        .map(|idx| {
            let mut xs = fit.param_column(idx);
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            SummaryRow {
                name: fit.layout.names()[idx].clone(),
                mean,
                sd: var.sqrt(),
                q025: quantile(&xs, 0.025),
                q975: quantile(&xs, 0.975),
            }
        })
        .collect();
    Ok(SummaryTable { rows })
}

/// Split-R-hat and autocorrelation-based effective sample size for one
/// parameter column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub name: String,
    pub r_hat: f64,
    pub ess: f64,
    pub flagged: bool,
}

/// Convergence diagnostics over all chains of a fit. Needs >= 2 chains;
/// parameters with split-R-hat above 1.05 are flagged.
pub fn convergence(fit: &PosteriorFit, filter: Option<&[&str]>) -> Result<Vec<ConvergenceRow>> {
    if fit.config.n_chains < 2 {
        return Err(Error::Validation("convergence diagnostics need >= 2 chains".into()));
    }
    let r = fit.n_retained_per_chain;
    let half = r / 2;
    if half < 2 {
        return Err(Error::Validation("convergence diagnostics need >= 4 retained draws per chain".into()));
    }
    let indices: Vec<usize> = match filter {
        None => (0..fit.layout.n_params()).collect(),
        Some(names) => names
            .iter()
            .map(|name| fit.layout.index_of(name).ok_or_else(|| fit.unknown_param(name)))
            .collect::<Result<_>>()?,
    };
    let p = fit.layout.n_params();
    let mut out = Vec::with_capacity(indices.len());
    for idx in indices {
        // Split each chain into halves.
        let mut seqs: Vec<Vec<f64>> = Vec::with_capacity(2 * fit.config.n_chains);
        for chain in 0..fit.config.n_chains {
            let base = chain * r;
            let take = |range: std::ops::Range<usize>| -> Vec<f64> {
                range.map(|s| fit.params[(base + s) * p + idx]).collect()
            };
            seqs.push(take(0..half));
            seqs.push(take(half..2 * half));
        }
        let (r_hat, ess) = split_rhat_ess(&seqs);
        out.push(ConvergenceRow {
            name: fit.layout.names()[idx].clone(),
            r_hat,
            ess,
            flagged: !(r_hat <= 1.05),
        });
    }
    Ok(out)
}

fn split_rhat_ess(seqs: &[Vec<f64>]) -> (f64, f64) {
    let m = seqs.len();
    let l = seqs[0].len();
    let means: Vec<f64> = seqs.iter().map(|s| s.iter().sum::<f64>() / l as f64).collect();
    let vars: Vec<f64> = seqs
        .iter()
        .zip(&means)
        .map(|(s, &mu)| s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (l - 1) as f64)
        .collect();
    let w = vars.iter().sum::<f64>() / m as f64;
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = l as f64 * means.iter().map(|mu| (mu - grand) * (mu - grand)).sum::<f64>() / (m - 1) as f64;
    let var_plus = (l - 1) as f64 / l as f64 * w + b / l as f64;
    if w <= 0.0 {
        // All sequences constant: identical constants are converged,
        // differing constants are maximally unconverged.
        return if b <= 0.0 { (1.0, f64::INFINITY) } else { (f64::INFINITY, f64::NAN) };
    }
    let r_hat = (var_plus / w).sqrt();

    // Combined autocorrelations (biased per-sequence autocovariances).
    let max_lag = l - 1;
    let mut rho = Vec::with_capacity(max_lag);
    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 1usize;
    while lag + 1 <= max_lag {
        let mut pair = 0.0;
        let mut valid = true;
        for t in [lag, lag + 1] {
            let mut acov_mean = 0.0;
            for (s, &mu) in seqs.iter().zip(&means) {
                let mut acc = 0.0;
                for k in 0..l - t {
                    acc += (s[k] - mu) * (s[k + t] - mu);
                }
                acov_mean += acc / l as f64;
            }
            acov_mean /= m as f64;
            let r_t = 1.0 - (w - acov_mean) / var_plus;
            rho.push(r_t);
            pair += r_t;
            if !r_t.is_finite() {
                valid = false;
            }
        }
        if !valid || pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        lag += 2;
    }
    let ess = (m * l) as f64 / tau;
    (r_hat, ess)
}
