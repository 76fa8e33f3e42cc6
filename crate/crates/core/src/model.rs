//! The model family and its log joint density: beta likelihood with a logit
//! link plus structured spatial (BYM), temporal (linear/AR1/RW1) and iid
//! interaction random effects.
//!
//! The observation model is `y_it ~ Beta(mu_it * tau_b, (1 - mu_it) * tau_b)`
//! (mean-precision parametrization) with
//! `logit(mu_it) = alpha + beta'x_it + u_i + v_i + phi_t + eta_it`,
//! components gated by the [`ModelSpec`].
//!
//! Convention for improper GMRF priors (ICAR, RW1): log densities carry only
//! the precision-dependent pseudo-determinant part `(rank/2) ln tau` and the
//! quadratic form; graph-dependent constants (including the `2 pi` factor)
//! are dropped. Proper densities (iid normal, AR1, hyperpriors) are complete
//! log pdfs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{icar_precision, RegionGraph};
use crate::panel::Panel;

/// Spatial random-effect structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialEffect {
    None,
    /// Besag-York-Mollie: structured ICAR field plus an unstructured iid
    /// field.
    Bym,
}

/// Temporal random-effect structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalEffect {
    None,
    /// Centered linear trend `delta * (t - (T-1)/2)`.
    Linear,
    /// Stationary first-order autoregressive process.
    Ar1,
    /// First-order random walk, identified by a sum-to-zero constraint.
    Rw1,
}

/// One member of the model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub spatial: SpatialEffect,
    pub temporal: TemporalEffect,
    pub interaction: bool,
}

impl ModelSpec {
    pub fn new(spatial: SpatialEffect, temporal: TemporalEffect, interaction: bool) -> Result<Self> {
        if interaction && temporal == TemporalEffect::None {
            return Err(Error::Validation(
                "an interaction effect requires a temporal component".into(),
            ));
        }
        Ok(Self { spatial, temporal, interaction })
    }

    /// Canonical code string, e.g. `S_BYM.T_AR1.ST_1.B`.
    pub fn code(&self) -> String {
        let s = match self.spatial {
            SpatialEffect::None => "S_0",
            SpatialEffect::Bym => "S_BYM",
        };
        let t = match self.temporal {
            TemporalEffect::None => "T_0",
            TemporalEffect::Linear => "T_L",
            TemporalEffect::Ar1 => "T_AR1",
            TemporalEffect::Rw1 => "T_RW1",
        };
        let st = if self.interaction { "ST_1" } else { "ST_0" };
        format!("{s}.{t}.{st}.B")
    }

    /// Parses a code string. Dots separate the four fields; the final field
    /// must be `B` (the beta base model is the only one supported).
    pub fn parse_code(code: &str) -> Result<Self> {
        let parts: Vec<&str> = code.split('.').collect();
        let bad = || {
            Error::Validation(format!(
                "unknown model code {code:?}; valid codes are the model family {}",
                Self::family_codes().join(", ")
            ))
        };
        if parts.len() != 4 || parts[3] != "B" {
            return Err(bad());
        }
        let spatial = match parts[0] {
            "S_0" => SpatialEffect::None,
            "S_BYM" => SpatialEffect::Bym,
            _ => return Err(bad()),
        };
        let temporal = match parts[1] {
            "T_0" => TemporalEffect::None,
            "T_L" => TemporalEffect::Linear,
            "T_AR1" => TemporalEffect::Ar1,
            "T_RW1" => TemporalEffect::Rw1,
            _ => return Err(bad()),
        };
        let interaction = match parts[2] {
            "ST_0" => false,
            "ST_1" => true,
            _ => return Err(bad()),
        };
        Self::new(spatial, temporal, interaction).map_err(|_| bad())
    }

    /// The six canonical configurations, in table order.
    pub fn family() -> [ModelSpec; 6] {
        use TemporalEffect::{Ar1, Linear, Rw1};
        let none = ModelSpec {
            spatial: SpatialEffect::None,
            temporal: TemporalEffect::None,
            interaction: false,
        };
        let bym = |temporal, interaction| ModelSpec { spatial: SpatialEffect::Bym, temporal, interaction };
        [
            none,
            bym(TemporalEffect::None, false),
            bym(Linear, false),
            bym(Linear, true),
            bym(Ar1, true),
            bym(Rw1, true),
        ]
    }

    pub fn family_codes() -> Vec<String> {
        Self::family().iter().map(ModelSpec::code).collect()
    }

    pub fn has_bym(&self) -> bool {
        self.spatial == SpatialEffect::Bym
    }

    pub fn has_phi(&self) -> bool {
        matches!(self.temporal, TemporalEffect::Ar1 | TemporalEffect::Rw1)
    }
}

/// All latent quantities of the linear predictor. Fields not active in a
/// spec are identically zero and contribute nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Structured (ICAR) spatial field, sum-to-zero per component.
    pub u: Vec<f64>,
    /// Unstructured iid spatial field.
    pub v: Vec<f64>,
    /// Temporal field for AR1/RW1 (RW1 sum-to-zero).
    pub phi: Vec<f64>,
    /// Linear-trend slope (temporal = linear only).
    pub delta: f64,
    /// Interaction field, row-major `i * n_months + t`, over all grid cells.
    pub eta: Vec<f64>,
    pub n_regions: usize,
    pub n_months: usize,
}

impl LatentState {
    pub fn zeros(n_regions: usize, n_months: usize, n_covariates: usize) -> Self {
        Self {
            alpha: 0.0,
            beta: vec![0.0; n_covariates],
            u: vec![0.0; n_regions],
            v: vec![0.0; n_regions],
            phi: vec![0.0; n_months],
            delta: 0.0,
            eta: vec![0.0; n_regions * n_months],
            n_regions,
            n_months,
        }
    }

    pub fn eta_at(&self, i: usize, t: usize) -> f64 {
        self.eta[i * self.n_months + t]
    }
}

/// Hyperparameters: the beta-likelihood precision, component precisions and
/// the AR1 autocorrelation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub tau_b: f64,
    pub tau_u: f64,
    pub tau_v: f64,
    pub tau_phi: f64,
    pub tau_eta: f64,
    pub rho: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self { tau_b: 10.0, tau_u: 10.0, tau_v: 10.0, tau_phi: 10.0, tau_eta: 10.0, rho: 0.0 }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [
            ("tau_b", self.tau_b),
            ("tau_u", self.tau_u),
            ("tau_v", self.tau_v),
            ("tau_phi", self.tau_phi),
            ("tau_eta", self.tau_eta),
        ] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::Domain(format!("{name} must be a positive real, got {tau}")));
            }
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::Domain(format!("rho must lie strictly in (-1,1), got {}", self.rho)));
        }
        Ok(())
    }
}

/// Prior configuration. Fixed effects (and the linear-trend slope) get
/// `N(0, fixed_sd^2)`; precisions get `Gamma(shape, rate)`; the AR1
/// autocorrelation gets a normal prior on `log((1+rho)/(1-rho))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub fixed_sd: f64,
    pub precision_shape: f64,
    pub precision_rate: f64,
    pub rho_sd: f64,
}

impl Default for Priors {
    fn default() -> Self {
        // Fixed-effect variance 1000 and the flat Gamma(1, 5e-5) on
        // precisions are the conventional defaults for this model class.
        Self {
            fixed_sd: 1000f64.sqrt(),
            precision_shape: 1.0,
            precision_rate: 5e-5,
            rho_sd: 2.5,
        }
    }
}

impl Priors {
    pub fn validate(&self) -> Result<()> {
        if !(self.fixed_sd > 0.0 && self.precision_shape > 0.0 && self.precision_rate > 0.0 && self.rho_sd > 0.0)
        {
            return Err(Error::Domain("prior hyperparameters must all be positive".into()));
        }
        Ok(())
    }
}

/// Numerically safe inverse logit.
pub fn invlogit(x: f64) -> f64 {
    if x >= 0.0 {
        let z = (-x).exp();
        1.0 / (1.0 + z)
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Linear predictor `logit(mu_it)` for one cell, honouring the spec's
/// component gates.
pub fn linear_predictor(
    state: &LatentState,
    spec: &ModelSpec,
    x_it: &[f64],
    i: usize,
    t: usize,
) -> f64 {
    let mut lp = state.alpha;
    for (b, x) in state.beta.iter().zip(x_it) {
        lp += b * x;
    }
    if spec.has_bym() {
        lp += state.u[i] + state.v[i];
    }
    match spec.temporal {
        TemporalEffect::None => {}
        TemporalEffect::Linear => {
            lp += state.delta * centered_month(t, state.n_months);
        }
        TemporalEffect::Ar1 | TemporalEffect::Rw1 => lp += state.phi[t],
    }
    if spec.interaction {
        lp += state.eta_at(i, t);
    }
    lp
}

/// `t - (T-1)/2`: month index centered so the trend is orthogonal to the
/// intercept.
pub fn centered_month(t: usize, n_months: usize) -> f64 {
    t as f64 - (n_months as f64 - 1.0) / 2.0
}

/// Log density of `Beta(mu * tau_b, (1-mu) * tau_b)` at `y`.
pub fn beta_loglik(y: f64, mu: f64, tau_b: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::Domain(format!("beta_loglik: y must lie in (0,1), got {y}")));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::Domain(format!("beta_loglik: mu must lie in (0,1), got {mu}")));
    }
    if !(tau_b > 0.0) || !tau_b.is_finite() {
        return Err(Error::Domain(format!("beta_loglik: tau_b must be positive, got {tau_b}")));
    }
    Ok(beta_loglik_unchecked(y, y.ln(), (1.0 - y).ln(), mu, tau_b))
}

/// Hot path used by the sampler: `ln y` and `ln(1-y)` precomputed, domains
/// already verified.
#[inline]
pub(crate) fn beta_loglik_unchecked(y: f64, ln_y: f64, ln_1my: f64, mu: f64, tau_b: f64) -> f64 {
    debug_assert!(y > 0.0 && y < 1.0 && mu > 0.0 && mu < 1.0 && tau_b > 0.0);
    let a = mu * tau_b;
    let b = (1.0 - mu) * tau_b;
    ln_gamma(tau_b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * ln_y + (b - 1.0) * ln_1my
}

pub(crate) fn ln_gamma(x: f64) -> f64 {
    // Gamma(1) = Gamma(2) = 1 exactly; the Lanczos series returns ~9e-16
    // there, which matters for densities built from differences of these.
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    statrs::function::gamma::ln_gamma(x)
}

fn check_sum_to_zero(label: &str, sum: f64) -> Result<()> {
    if sum.abs() > 1e-8 {
        return Err(Error::ConstraintViolated(format!(
            "{label} must sum to zero (within 1e-8); found component sum {sum:e}"
        )));
    }
    Ok(())
}

/// ICAR log density `(rank/2) ln tau - (tau/2) u'Qu` (pseudo-determinant
/// convention; graph constants dropped). Requires the per-component
/// sum-to-zero constraint to hold within 1e-8.
pub fn icar_logdensity(u: &[f64], tau_u: f64, graph: &RegionGraph) -> Result<f64> {
    if u.len() != graph.n_regions() {
        return Err(Error::Validation(format!(
            "icar_logdensity: field length {} != {} regions",
            u.len(),
            graph.n_regions()
        )));
    }
    if !(tau_u > 0.0) || !tau_u.is_finite() {
        return Err(Error::Domain(format!("icar_logdensity: tau must be positive, got {tau_u}")));
    }
    for comp in graph.components() {
        check_sum_to_zero("ICAR field", comp.iter().map(|&i| u[i]).sum())?;
    }
    let q = icar_precision(graph);
    Ok(0.5 * q.rank() as f64 * tau_u.ln() - 0.5 * tau_u * q.quad_form(u))
}

/// Stationary AR1 log density:
/// `phi_1 ~ N(0, 1/(tau (1 - rho^2)))`, `phi_t | phi_{t-1} ~ N(rho phi_{t-1}, 1/tau)`.
/// Proper, so the full normalizing constant is included.
pub fn ar1_logdensity(phi: &[f64], rho: f64, tau_phi: f64) -> Result<f64> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::Domain(format!("ar1_logdensity: |rho| must be < 1, got {rho}")));
    }
    if !(tau_phi > 0.0) || !tau_phi.is_finite() {
        return Err(Error::Domain(format!("ar1_logdensity: tau must be positive, got {tau_phi}")));
    }
    if phi.is_empty() {
        return Err(Error::Validation("ar1_logdensity: empty field".into()));
    }
    let t_len = phi.len() as f64;
    let quad = ar1_quad_form(phi, rho);
    Ok(0.5 * t_len * tau_phi.ln() + 0.5 * (1.0 - rho * rho).ln()
        - 0.5 * t_len * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * tau_phi * quad)
}

/// `(1-rho^2) phi_1^2 + sum_{t>=2} (phi_t - rho phi_{t-1})^2`.
pub(crate) fn ar1_quad_form(phi: &[f64], rho: f64) -> f64 {
    let mut quad = (1.0 - rho * rho) * phi[0] * phi[0];
    for t in 1..phi.len() {
        let d = phi[t] - rho * phi[t - 1];
        quad += d * d;
    }
    quad
}

/// RW1 log density `((T-1)/2) ln tau - (tau/2) sum (phi_t - phi_{t-1})^2`
/// (improper; pseudo-determinant convention as for ICAR). Requires the
/// sum-to-zero constraint within 1e-8.
pub fn rw1_logdensity(phi: &[f64], tau_phi: f64) -> Result<f64> {
    if !(tau_phi > 0.0) || !tau_phi.is_finite() {
        return Err(Error::Domain(format!("rw1_logdensity: tau must be positive, got {tau_phi}")));
    }
    if phi.len() < 2 {
        return Err(Error::Validation("rw1_logdensity: field needs length >= 2".into()));
    }
    check_sum_to_zero("RW1 field", phi.iter().sum())?;
    Ok(0.5 * (phi.len() - 1) as f64 * tau_phi.ln() - 0.5 * tau_phi * rw1_quad_form(phi))
}

pub(crate) fn rw1_quad_form(phi: &[f64]) -> f64 {
    phi.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum()
}

pub(crate) fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `Gamma(shape, rate)` log pdf at `tau`.
pub(crate) fn gamma_logpdf(tau: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * tau.ln() - rate * tau
}

/// Prior log density of `rho` induced by `N(0, rho_sd^2)` on the Fisher
/// transform `z = log((1+rho)/(1-rho))` (Jacobian included).
pub(crate) fn rho_logprior(rho: f64, rho_sd: f64) -> f64 {
    let z = ((1.0 + rho) / (1.0 - rho)).ln();
    normal_logpdf(z, 0.0, rho_sd) + (2.0 / (1.0 - rho * rho)).ln()
}

/// Full log joint density: observed-cell beta log likelihoods, the active
/// component log priors, fixed-effect priors, and the hyperpriors of active
/// precisions (plus `rho` under AR1). Missing cells have no likelihood term;
/// their interaction effects still carry prior mass.
pub fn log_joint(
    panel: &Panel,
    graph: &RegionGraph,
    spec: &ModelSpec,
    state: &LatentState,
    hyper: &HyperParams,
    priors: &Priors,
) -> Result<f64> {
    hyper.validate()?;
    priors.validate()?;
    if state.n_regions != panel.n_regions() || state.n_months != panel.n_months() {
        return Err(Error::Validation("state dimensions do not match panel".into()));
    }
    if graph.n_regions() != panel.n_regions() {
        return Err(Error::Validation(format!(
            "graph has {} regions, panel has {}",
            graph.n_regions(),
            panel.n_regions()
        )));
    }

    let mut total = 0.0;
    for obs in panel.observed() {
        let lp = linear_predictor(state, spec, &obs.covariates, obs.region_index, obs.month_index);
        total += beta_loglik(obs.rate, invlogit(lp), hyper.tau_b)?;
    }

    total += normal_logpdf(state.alpha, 0.0, priors.fixed_sd);
    for &b in &state.beta {
        total += normal_logpdf(b, 0.0, priors.fixed_sd);
    }
    total += gamma_logpdf(hyper.tau_b, priors.precision_shape, priors.precision_rate);

    if spec.has_bym() {
        total += icar_logdensity(&state.u, hyper.tau_u, graph)?;
        let sd_v = hyper.tau_v.sqrt().recip();
        total += state.v.iter().map(|&v| normal_logpdf(v, 0.0, sd_v)).sum::<f64>();
        total += gamma_logpdf(hyper.tau_u, priors.precision_shape, priors.precision_rate);
        total += gamma_logpdf(hyper.tau_v, priors.precision_shape, priors.precision_rate);
    }

    match spec.temporal {
        TemporalEffect::None => {}
        TemporalEffect::Linear => {
            total += normal_logpdf(state.delta, 0.0, priors.fixed_sd);
        }
        TemporalEffect::Ar1 => {
            total += ar1_logdensity(&state.phi, hyper.rho, hyper.tau_phi)?;
            total += gamma_logpdf(hyper.tau_phi, priors.precision_shape, priors.precision_rate);
            total += rho_logprior(hyper.rho, priors.rho_sd);
        }
        TemporalEffect::Rw1 => {
            total += rw1_logdensity(&state.phi, hyper.tau_phi)?;
            total += gamma_logpdf(hyper.tau_phi, priors.precision_shape, priors.precision_rate);
        }
    }

    if spec.interaction {
        let sd_eta = hyper.tau_eta.sqrt().recip();
        total += state.eta.iter().map(|&e| normal_logpdf(e, 0.0, sd_eta)).sum::<f64>();
        total += gamma_logpdf(hyper.tau_eta, priors.precision_shape, priors.precision_rate);
    }

    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelBuilder;
    use approx::assert_relative_eq;

    #[test]
    fn model_codes_round_trip() {
        let expected = [
            "S_0.T_0.ST_0.B",
            "S_BYM.T_0.ST_0.B",
            "S_BYM.T_L.ST_0.B",
            "S_BYM.T_L.ST_1.B",
            "S_BYM.T_AR1.ST_1.B",
            "S_BYM.T_RW1.ST_1.B",
        ];
        for (spec, code) in ModelSpec::family().iter().zip(expected) {
            assert_eq!(spec.code(), code);
            assert_eq!(&ModelSpec::parse_code(code).unwrap(), spec);
        }
        assert!(ModelSpec::parse_code("S_WILD.T_0.ST_0.B").is_err());
        // Interaction without a temporal component is invalid.
        assert!(ModelSpec::parse_code("S_BYM.T_0.ST_1.B").is_err());
    }

    #[test]
    fn predictor_zero_state_gives_half() {
        let spec = ModelSpec::parse_code("S_BYM.T_AR1.ST_1.B").unwrap();
        let state = LatentState::zeros(3, 2, 2);
        let lp = linear_predictor(&state, &spec, &[1.0, 2.0], 1, 1);
        assert_eq!(lp, 0.0);
        assert_eq!(invlogit(lp), 0.5);
    }

    #[test]
    fn predictor_at_reported_posterior_means() {
        // Intercept -0.210, coefficients (0.165, 0.021) at covariate means
        // (3.55, 3.33): predictor ~0.446, mean ~0.610.
        let spec = ModelSpec::parse_code("S_0.T_0.ST_0.B").unwrap();
        let mut state = LatentState::zeros(1, 1, 2);
        state.alpha = -0.210;
        state.beta = vec![0.165, 0.021];
        let lp = linear_predictor(&state, &spec, &[3.55, 3.33], 0, 0);
        assert_relative_eq!(lp, 0.44568, epsilon = 1e-5);
        assert_relative_eq!(invlogit(lp), 0.60961, epsilon = 1e-4);
    }

    #[test]
    fn predictor_gates_inactive_components() {
        let spec = ModelSpec::parse_code("S_0.T_0.ST_0.B").unwrap();
        let mut state = LatentState::zeros(2, 2, 0);
        state.u = vec![5.0, -5.0];
        state.v = vec![1.0, 1.0];
        state.phi = vec![3.0, 3.0];
        state.eta = vec![9.0; 4];
        state.delta = 2.0;
        assert_eq!(linear_predictor(&state, &spec, &[], 0, 0), 0.0);
    }

    #[test]
    fn beta_loglik_uniform_case() {
        assert_eq!(beta_loglik(0.5, 0.5, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn beta_loglik_symmetric_beta22() {
        // Beta(2,2) density at 1/2 is 1.5.
        assert_relative_eq!(beta_loglik(0.5, 0.5, 4.0).unwrap(), 1.5f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn beta_loglik_reflection_symmetry() {
        for (y, mu, tau) in [(0.3, 0.6, 7.0), (0.9, 0.2, 3.0), (0.01, 0.5, 40.0)] {
            let a = beta_loglik(y, mu, tau).unwrap();
            let b = beta_loglik(1.0 - y, 1.0 - mu, tau).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn beta_loglik_domain_errors() {
        assert!(beta_loglik(0.0, 0.5, 2.0).is_err());
        assert!(beta_loglik(0.5, 1.0, 2.0).is_err());
        assert!(beta_loglik(0.5, 0.5, 0.0).is_err());
    }

    fn path3() -> RegionGraph {
        RegionGraph::from_adjacency_list(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn icar_zero_field() {
        let g = path3();
        for tau in [0.5, 1.0, 4.0] {
            assert_relative_eq!(
                icar_logdensity(&[0.0; 3], tau, &g).unwrap(),
                (2.0 / 2.0) * tau.ln(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn icar_hand_value() {
        // u = (-1, 0, 1) on the path graph: u'Qu = 2, rank 2, tau 1.
        let g = path3();
        assert_relative_eq!(icar_logdensity(&[-1.0, 0.0, 1.0], 1.0, &g).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn icar_tau_scaling() {
        let g = path3();
        let u = [-1.0, 0.0, 1.0];
        let d1 = icar_logdensity(&u, 1.0, &g).unwrap();
        let d2 = icar_logdensity(&u, 2.0, &g).unwrap();
        // quad = 2: difference is (rank/2) ln 2 - (2-1)/2 * quad.
        assert_relative_eq!(d2 - d1, 2.0f64.ln() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn icar_rejects_unconstrained_field() {
        let g = path3();
        assert!(matches!(
            icar_logdensity(&[1.0, 1.0, 1.0], 1.0, &g),
            Err(Error::ConstraintViolated(_))
        ));
    }

    #[test]
    fn ar1_zero_field_closed_form() {
        let (t_len, rho, tau) = (6usize, 0.6f64, 2.5f64);
        let phi = vec![0.0; t_len];
        let expected = 0.5 * t_len as f64 * tau.ln() + 0.5 * (1.0 - rho * rho).ln()
            - 0.5 * t_len as f64 * (2.0 * std::f64::consts::PI).ln();
        assert_relative_eq!(ar1_logdensity(&phi, rho, tau).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn ar1_rho_zero_is_iid() {
        let phi = [0.3, -0.2, 0.5, 0.1];
        let sd = 2.0f64.sqrt().recip();
        let iid: f64 = phi.iter().map(|&p| normal_logpdf(p, 0.0, sd)).sum();
        assert_relative_eq!(ar1_logdensity(&phi, 0.0, 2.0).unwrap(), iid, epsilon = 1e-12);
    }

    #[test]
    fn ar1_small_rho_near_iid() {
        // The gap is linear in rho through the cross terms, so a
        // modest-amplitude field sits well inside 1e-8 at rho = 1e-6.
        let phi = [0.03, -0.02, 0.05, 0.01, -0.04, 0.02];
        let sd = 1.0;
        let iid: f64 = phi.iter().map(|&p| normal_logpdf(p, 0.0, sd)).sum();
        let near = ar1_logdensity(&phi, 1e-6, 1.0).unwrap();
        assert!((near - iid).abs() < 1e-8, "difference {}", (near - iid).abs());
    }

    #[test]
    fn rw1_hand_value() {
        // increments (1,1): quadratic 2; tau = 1 so the ln tau term is 0.
        assert_relative_eq!(rw1_logdensity(&[-1.0, 0.0, 1.0], 1.0).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn rw1_zero_field() {
        let phi = vec![0.0; 5];
        assert_relative_eq!(rw1_logdensity(&phi, 3.0).unwrap(), 2.0 * 3.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn rw1_shifted_field_violates_constraint() {
        assert!(matches!(
            rw1_logdensity(&[0.0, 1.0, 2.0], 1.0),
            Err(Error::ConstraintViolated(_))
        ));
    }

    fn toy_panel() -> Panel {
        let mut b = PanelBuilder::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1, 2],
            vec!["x1".into()],
        );
        b.set(0, 0, 0.6, 10, vec![0.5]);
        b.set(0, 1, 0.55, 10, vec![0.5]);
        b.set(1, 0, 0.7, 10, vec![-0.2]);
        b.set(2, 1, 0.4, 10, vec![1.0]);
        b.build()
    }

    #[test]
    fn log_joint_row1_single_observation() {
        let mut b = PanelBuilder::new(vec!["a".into()], vec![1], vec![]);
        b.set(0, 0, 0.6, 10, vec![]);
        let panel = b.build();
        let graph = RegionGraph::from_adjacency_list(1, &[]).unwrap();
        let spec = ModelSpec::parse_code("S_0.T_0.ST_0.B").unwrap();
        let mut state = LatentState::zeros(1, 1, 0);
        state.alpha = 0.3;
        let hyper = HyperParams { tau_b: 5.0, ..Default::default() };
        let priors = Priors::default();
        let lj = log_joint(&panel, &graph, &spec, &state, &hyper, &priors).unwrap();
        let expected = beta_loglik(0.6, invlogit(0.3), 5.0).unwrap()
            + normal_logpdf(0.3, 0.0, priors.fixed_sd)
            + gamma_logpdf(5.0, priors.precision_shape, priors.precision_rate);
        assert_relative_eq!(lj, expected, epsilon = 1e-12);
    }

    #[test]
    fn log_joint_term_by_term_oracle() {
        // 3 regions x 2 months, full model: rebuild the sum independently.
        let panel = toy_panel();
        let graph = path3();
        let spec = ModelSpec::parse_code("S_BYM.T_AR1.ST_1.B").unwrap();
        let mut state = LatentState::zeros(3, 2, 1);
        state.alpha = -0.1;
        state.beta = vec![0.2];
        state.u = vec![0.3, -0.1, -0.2];
        state.v = vec![0.05, -0.02, 0.1];
        state.phi = vec![0.1, -0.05];
        state.eta = vec![0.01, -0.02, 0.03, 0.0, -0.01, 0.02];
        let hyper = HyperParams { tau_b: 30.0, tau_u: 4.0, tau_v: 9.0, tau_phi: 16.0, tau_eta: 25.0, rho: 0.5 };
        let priors = Priors::default();
        let lj = log_joint(&panel, &graph, &spec, &state, &hyper, &priors).unwrap();

        let mut expected = 0.0;
        for obs in panel.observed() {
            let lp = state.alpha
                + state.beta[0] * obs.covariates[0]
                + state.u[obs.region_index]
                + state.v[obs.region_index]
                + state.phi[obs.month_index]
                + state.eta_at(obs.region_index, obs.month_index);
            expected += beta_loglik(obs.rate, invlogit(lp), hyper.tau_b).unwrap();
        }
        expected += normal_logpdf(state.alpha, 0.0, priors.fixed_sd);
        expected += normal_logpdf(state.beta[0], 0.0, priors.fixed_sd);
        expected += icar_logdensity(&state.u, hyper.tau_u, &graph).unwrap();
        for &v in &state.v {
            expected += normal_logpdf(v, 0.0, hyper.tau_v.sqrt().recip());
        }
        expected += ar1_logdensity(&state.phi, hyper.rho, hyper.tau_phi).unwrap();
        for &e in &state.eta {
            expected += normal_logpdf(e, 0.0, hyper.tau_eta.sqrt().recip());
        }
        for tau in [hyper.tau_b, hyper.tau_u, hyper.tau_v, hyper.tau_phi, hyper.tau_eta] {
            expected += gamma_logpdf(tau, priors.precision_shape, priors.precision_rate);
        }
        expected += rho_logprior(hyper.rho, priors.rho_sd);
        assert_relative_eq!(lj, expected, epsilon = 1e-10);
    }

    #[test]
    fn log_joint_additive_in_observations() {
        let panel = toy_panel();
        let graph = path3();
        let spec = ModelSpec::parse_code("S_BYM.T_0.ST_0.B").unwrap();
        let mut state = LatentState::zeros(3, 2, 1);
        state.alpha = 0.2;
        state.beta = vec![0.1];
        state.u = vec![0.1, 0.1, -0.2];
        let hyper = HyperParams::default();
        let priors = Priors::default();
        let full = log_joint(&panel, &graph, &spec, &state, &hyper, &priors).unwrap();

        // Remove the (2, 1) observation and compare.
        let mut b = PanelBuilder::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![1, 2],
            vec!["x1".into()],
        );
        b.set(0, 0, 0.6, 10, vec![0.5]);
        b.set(0, 1, 0.55, 10, vec![0.5]);
        b.set(1, 0, 0.7, 10, vec![-0.2]);
        let smaller = b.build();
        let partial = log_joint(&smaller, &graph, &spec, &state, &hyper, &priors).unwrap();
        let lp = state.alpha + state.beta[0] * 1.0 + state.u[2] + state.v[2];
        let removed = beta_loglik(0.4, invlogit(lp), hyper.tau_b).unwrap();
        assert_relative_eq!(full - partial, removed, epsilon = 1e-12);
    }

    #[test]
    fn log_joint_gating_contributes_zero() {
        // Row 1 vs row 1 with junk in the gated fields: identical density.
        let panel = toy_panel();
        let graph = path3();
        let spec = ModelSpec::parse_code("S_0.T_0.ST_0.B").unwrap();
        let mut state = LatentState::zeros(3, 2, 1);
        state.alpha = 0.1;
        state.beta = vec![-0.3];
        let hyper = HyperParams::default();
        let priors = Priors::default();
        let clean = log_joint(&panel, &graph, &spec, &state, &hyper, &priors).unwrap();
        state.u = vec![0.4, -0.1, -0.3];
        state.v = vec![1.0, -1.0, 0.5];
        state.phi = vec![2.0, -2.0];
        state.eta = vec![3.0; 6];
        state.delta = 4.0;
        let junk = log_joint(&panel, &graph, &spec, &state, &hyper, &priors).unwrap();
        assert_eq!(clean, junk);
    }

    #[test]
    fn log_joint_decreases_for_extreme_alpha() {
        let panel = toy_panel();
        let graph = path3();
        let spec = ModelSpec::parse_code("S_0.T_0.ST_0.B").unwrap();
        let hyper = HyperParams::default();
        let priors = Priors::default();
        let at = |alpha: f64| {
            let mut state = LatentState::zeros(3, 2, 1);
            state.alpha = alpha;
            log_joint(&panel, &graph, &spec, &state, &hyper, &priors).unwrap()
        };
        // |alpha| = 30 keeps invlogit strictly inside (0,1) in f64.
        assert!(at(0.0) > at(15.0));
        assert!(at(15.0) > at(30.0));
        assert!(at(0.0) > at(-15.0));
        assert!(at(-15.0) > at(-30.0));
        assert!(at(30.0).is_finite());
    }

    #[test]
    fn log_joint_invariant_under_region_relabeling() {
        let panel = toy_panel();
        let graph = path3();
        let spec = ModelSpec::parse_code("S_BYM.T_AR1.ST_1.B").unwrap();
        let mut state = LatentState::zeros(3, 2, 1);
        state.alpha = -0.1;
        state.beta = vec![0.2];
        state.u = vec![0.3, -0.1, -0.2];
        state.v = vec![0.05, -0.02, 0.1];
        state.phi = vec![0.1, -0.05];
        state.eta = vec![0.01, -0.02, 0.03, 0.0, -0.01, 0.02];
        let hyper = HyperParams { tau_b: 30.0, tau_u: 4.0, tau_v: 9.0, tau_phi: 16.0, tau_eta: 25.0, rho: 0.5 };
        let priors = Priors::default();
        let base = log_joint(&panel, &graph, &spec, &state, &hyper, &priors).unwrap();

        // Permutation sigma: new index k holds old region perm[k].
        let perm = [2usize, 0, 1];
        let graph_p = {
            let mut pos = [0usize; 3];
            for (k, &old) in perm.iter().enumerate() {
                pos[old] = k;
            }
            let pairs: Vec<(usize, usize)> = graph.edges().map(|(i, j)| (pos[i], pos[j])).collect();
            RegionGraph::from_adjacency_list(3, &pairs).unwrap()
        };
        let mut b = PanelBuilder::new(
            vec!["p0".into(), "p1".into(), "p2".into()],
            vec![1, 2],
            vec!["x1".into()],
        );
        for obs in panel.observed() {
            let new_region = perm.iter().position(|&old| old == obs.region_index).unwrap();
            b.set(new_region, obs.month_index, obs.rate, obs.n_journeys, obs.covariates.clone());
        }
        let panel_p = b.build();
        let mut state_p = state.clone();
        for (k, &old) in perm.iter().enumerate() {
            state_p.u[k] = state.u[old];
            state_p.v[k] = state.v[old];
            for t in 0..2 {
                state_p.eta[k * 2 + t] = state.eta[old * 2 + t];
            }
        }
        let permuted = log_joint(&panel_p, &graph_p, &spec, &state_p, &hyper, &priors).unwrap();
        assert_relative_eq!(base, permuted, epsilon = 1e-10);
    }
}
