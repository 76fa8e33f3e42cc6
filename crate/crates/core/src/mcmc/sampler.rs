//! Chain internals: blocked adaptive random-walk Metropolis-within-Gibbs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::RegionGraph;
use crate::model::{
    ar1_quad_form, beta_loglik_unchecked, invlogit, normal_logpdf, rw1_quad_form, ModelSpec,
    Priors, TemporalEffect,
};
use crate::panel::Panel;
use crate::rng::mix_seed;

use super::{BlockAcceptance, McmcConfig, ParamLayout};

/// Observation model used by the sampler. The Gaussian variant exists for
/// conjugate closed-form validation of the MCMC machinery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    Beta,
    GaussianLinear { sd: f64 },
}

pub(crate) struct ObsData {
    pub region: usize,
    pub month: usize,
    pub y: f64,
    ln_y: f64,
    ln_1my: f64,
    pub x: Vec<f64>,
}

pub(crate) struct ModelData<'a> {
    pub spec: ModelSpec,
    pub priors: Priors,
    pub likelihood: Likelihood,
    pub n_regions: usize,
    pub n_months: usize,
    pub k_cov: usize,
    pub obs: Vec<ObsData>,
    pub obs_by_region: Vec<Vec<usize>>,
    pub obs_by_month: Vec<Vec<usize>>,
    /// Observation index per grid cell (`i * n_months + t`), if observed.
    pub cell_to_obs: Vec<Option<usize>>,
    pub graph: &'a RegionGraph,
    pub components: Vec<Vec<usize>>,
    pub rank_u: usize,
    /// Centered month values for the linear trend.
    pub tc: Vec<f64>,
}

impl<'a> ModelData<'a> {
    pub fn build(
        panel: &Panel,
        graph: &'a RegionGraph,
        spec: ModelSpec,
        priors: Priors,
        likelihood: Likelihood,
    ) -> Self {
        let n_regions = panel.n_regions();
        let n_months = panel.n_months();
        let mut obs = Vec::with_capacity(panel.n_observed());
        let mut obs_by_region = vec![Vec::new(); n_regions];
        let mut obs_by_month = vec![Vec::new(); n_months];
        let mut cell_to_obs = vec![None; n_regions * n_months];
        for o in panel.observed() {
            let j = obs.len();
            obs_by_region[o.region_index].push(j);
            obs_by_month[o.month_index].push(j);
            cell_to_obs[o.region_index * n_months + o.month_index] = Some(j);
            obs.push(ObsData {
                region: o.region_index,
                month: o.month_index,
                y: o.rate,
                ln_y: o.rate.ln(),
                ln_1my: (1.0 - o.rate).ln(),
                x: o.covariates.clone(),
            });
        }
        let tc = (0..n_months).map(|t| crate::model::centered_month(t, n_months)).collect();
        ModelData {
            spec,
            priors,
            likelihood,
            n_regions,
            n_months,
            k_cov: panel.n_covariates(),
            obs,
            obs_by_region,
            obs_by_month,
            cell_to_obs,
            graph,
            components: graph.components().to_vec(),
            rank_u: graph.n_regions() - graph.n_components(),
            tc,
        }
    }

    #[inline]
    fn obs_loglik(&self, obs: &ObsData, lin: f64, tau_b: f64) -> f64 {
        match self.likelihood {
            Likelihood::Beta => {
                let mu = invlogit(lin);
                if mu <= 0.0 || mu >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                beta_loglik_unchecked(obs.y, obs.ln_y, obs.ln_1my, mu, tau_b)
            }
            Likelihood::GaussianLinear { sd } => normal_logpdf(obs.y, lin, sd),
        }
    }

    #[inline]
    fn fitted(&self, lin: f64) -> f64 {
        match self.likelihood {
            Likelihood::Beta => invlogit(lin),
            Likelihood::GaussianLinear { .. } => lin,
        }
    }
}

/// Verifies that every initial likelihood term is finite, naming the first
/// offender otherwise.
pub(crate) fn check_initial_state(data: &ModelData) -> Result<()> {
    let tau0 = 10.0;
    for (j, obs) in data.obs.iter().enumerate() {
        let ll = data.obs_loglik(obs, 0.0, tau0);
        if !ll.is_finite() {
            return Err(Error::NonFiniteInit {
                term: format!(
                    "likelihood[obs {j}] (region {}, month {}, y = {})",
                    obs.region, obs.month, obs.y
                ),
            });
        }
    }
    Ok(())
}

struct State {
    alpha: f64,
    beta: Vec<f64>,
    delta: f64,
    u: Vec<f64>,
    v: Vec<f64>,
    phi: Vec<f64>,
    eta: Vec<f64>,
    ln_tau_b: f64,
    ln_tau_u: f64,
    ln_tau_v: f64,
    ln_tau_phi: f64,
    ln_tau_eta: f64,
    z_rho: f64,
    lin: Vec<f64>,
    ll: Vec<f64>,
    sum_ll: f64,
    scratch_lin: Vec<f64>,
    scratch_ll: Vec<f64>,
    site_scratch: Vec<(usize, f64, f64)>,
}

impl State {
    fn init(data: &ModelData) -> Self {
        let n_obs = data.obs.len();
        let ln10 = 10f64.ln();
        let mut st = State {
            alpha: 0.0,
            beta: vec![0.0; data.k_cov],
            delta: 0.0,
            u: vec![0.0; data.n_regions],
            v: vec![0.0; data.n_regions],
            phi: vec![0.0; data.n_months],
            eta: vec![0.0; data.n_regions * data.n_months],
            ln_tau_b: ln10,
            ln_tau_u: ln10,
            ln_tau_v: ln10,
            ln_tau_phi: ln10,
            ln_tau_eta: ln10,
            z_rho: 0.0,
            lin: vec![0.0; n_obs],
            ll: vec![0.0; n_obs],
            sum_ll: 0.0,
            scratch_lin: vec![0.0; n_obs],
            scratch_ll: vec![0.0; n_obs],
            site_scratch: Vec::new(),
        };
        st.refresh(data);
        st
    }

    fn tau_b(&self) -> f64 {
        self.ln_tau_b.exp()
    }

    fn rho(&self) -> f64 {
        (self.z_rho / 2.0).tanh()
    }

    fn predictor(&self, data: &ModelData, obs: &ObsData) -> f64 {
        let mut lp = self.alpha;
        for (b, x) in self.beta.iter().zip(&obs.x) {
            lp += b * x;
        }
        if data.spec.has_bym() {
            lp += self.u[obs.region] + self.v[obs.region];
        }
        match data.spec.temporal {
            TemporalEffect::None => {}
            TemporalEffect::Linear => lp += self.delta * data.tc[obs.month],
            TemporalEffect::Ar1 | TemporalEffect::Rw1 => lp += self.phi[obs.month],
        }
        if data.spec.interaction {
            lp += self.eta[obs.region * data.n_months + obs.month];
        }
        lp
    }

    /// Rebuilds the predictor and likelihood caches from the current state,
    /// resetting accumulated float drift.
    fn refresh(&mut self, data: &ModelData) {
        let tau_b = self.tau_b();
        let mut total = 0.0;
        for (j, obs) in data.obs.iter().enumerate() {
            let lp = self.predictor(data, obs);
            self.lin[j] = lp;
            self.ll[j] = data.obs_loglik(obs, lp, tau_b);
            total += self.ll[j];
        }
        self.sum_ll = total;
    }
}

struct Block {
    name: &'static str,
    ln_s: f64,
    target: f64,
    adapt_k: u64,
    prop: u64,
    acc: u64,
    post_prop: u64,
    post_acc: u64,
}

impl Block {
    fn new(name: &'static str, initial: f64, target: f64) -> Self {
        Block { name, ln_s: initial.ln(), target, adapt_k: 0, prop: 0, acc: 0, post_prop: 0, post_acc: 0 }
    }

    fn sd(&self) -> f64 {
        self.ln_s.exp()
    }

    fn record(&mut self, accepted: u64, proposed: u64, post_adaptation: bool) {
        self.prop += proposed;
        self.acc += accepted;
        if post_adaptation {
            self.post_prop += proposed;
            self.post_acc += accepted;
        }
    }

    /// Robbins-Monro step on the log scale, diminishing with block age.
    fn adapt(&mut self, acc_rate: f64) {
        self.adapt_k += 1;
        let gamma = (self.adapt_k as f64).powf(-0.6);
        self.ln_s = (self.ln_s + gamma * (acc_rate - self.target)).clamp(-12.0, 4.0);
    }

    fn stats(&self) -> BlockAcceptance {
        BlockAcceptance {
            block: self.name.to_string(),
            proposals: self.prop,
            accepts: self.acc,
            post_rate: if self.post_prop > 0 {
                self.post_acc as f64 / self.post_prop as f64
            } else {
                1.0
            },
            final_scale: self.sd(),
        }
    }
}

pub(crate) struct ChainOutput {
    pub params: Vec<f64>,
    pub fitted_mu: Vec<f64>,
    pub loglik: Vec<f64>,
    pub acceptance: Vec<BlockAcceptance>,
}

const REFRESH_EVERY: usize = 200;

pub(crate) fn run_chain(
    data: &ModelData,
    layout: &ParamLayout,
    config: &McmcConfig,
    chain_idx: usize,
) -> Result<ChainOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, chain_idx as u64));
    let mut st = State::init(data);

    let fixed_dim = 1 + data.k_cov;
    let fixed_target = if fixed_dim > 1 { 0.23 } else { 0.44 };
    let mut b_fixed = Block::new("fixed", 0.1, fixed_target);
    let mut b_u = Block::new("u", 0.1, 0.44);
    let mut b_v = Block::new("v", 0.1, 0.44);
    let mut b_temporal = Block::new("temporal", 0.1, 0.44);
    let mut b_eta = Block::new("eta", 0.1, 0.44);
    let mut b_tau_b = Block::new("tau_b", 0.5, 0.44);
    let mut b_tau_u = Block::new("tau_u", 0.5, 0.44);
    let mut b_tau_v = Block::new("tau_v", 0.5, 0.44);
    let mut b_tau_phi = Block::new("tau_phi", 0.5, 0.44);
    let mut b_tau_eta = Block::new("tau_eta", 0.5, 0.44);
    let mut b_rho = Block::new("rho", 0.5, 0.44);
    let mut b_phi_shift = Block::new("phi_shift", 0.2, 0.44);
    let mut b_v_shift = Block::new("v_shift", 0.1, 0.44);
    let mut b_eta_shift = Block::new("eta_shift", 0.05, 0.44);

    let n_ret = config.n_retained();
    let n_obs = data.obs.len();
    let mut out = ChainOutput {
        params: Vec::with_capacity(n_ret * layout.n_params()),
        fitted_mu: Vec::with_capacity(n_ret * n_obs),
        loglik: Vec::with_capacity(n_ret * n_obs),
        acceptance: Vec::new(),
    };
    let adapt_end = config.adaptation_window.min(config.n_burnin);

    for iter in 0..config.n_iter {
        let adapting = iter < adapt_end;
        let post = iter >= config.n_burnin;

        update_fixed(data, &mut st, &mut b_fixed, &mut rng, adapting, post);
        if data.spec.has_bym() {
            update_u(data, &mut st, &mut b_u, &mut rng, adapting, post);
            update_v(data, &mut st, &mut b_v, &mut rng, adapting, post);
        }
        match data.spec.temporal {
            TemporalEffect::None => {}
            TemporalEffect::Linear => {
                update_delta(data, &mut st, &mut b_temporal, &mut rng, adapting, post)
            }
            TemporalEffect::Ar1 | TemporalEffect::Rw1 => {
                update_phi(data, &mut st, &mut b_temporal, &mut rng, adapting, post)
            }
        }
        if data.spec.interaction {
            update_eta(data, &mut st, &mut b_eta, &mut rng, adapting, post);
        }
        update_tau_b(data, &mut st, &mut b_tau_b, &mut rng, adapting, post);
        if data.spec.has_bym() {
            update_tau_u(data, &mut st, &mut b_tau_u, &mut rng, adapting, post);
            update_tau_v(data, &mut st, &mut b_tau_v, &mut rng, adapting, post);
        }
        if data.spec.has_phi() {
            update_tau_phi(data, &mut st, &mut b_tau_phi, &mut rng, adapting, post);
        }
        if data.spec.interaction {
            update_tau_eta(data, &mut st, &mut b_tau_eta, &mut rng, adapting, post);
        }
        if data.spec.temporal == TemporalEffect::Ar1 {
            update_rho(data, &mut st, &mut b_rho, &mut rng, adapting, post);
        }

        if (iter + 1) % REFRESH_EVERY == 0 {
            st.refresh(data);
        }
        if iter >= config.n_burnin && (iter - config.n_burnin) % config.n_thin == 0 {
            push_snapshot(data, &st, out_vecs(&mut out));
        }
    }

    let mut blocks = vec![b_fixed.stats()];
    if data.spec.has_bym() {
        blocks.push(b_u.stats());
        blocks.push(b_v.stats());
    }
    if data.spec.temporal != TemporalEffect::None {
        blocks.push(b_temporal.stats());
    }
    if data.spec.interaction {
        blocks.push(b_eta.stats());
        blocks.push(b_tau_eta.stats());
    }
    blocks.push(b_tau_b.stats());
    if data.spec.has_bym() {
        blocks.push(b_tau_u.stats());
        blocks.push(b_tau_v.stats());
    }
    if data.spec.has_phi() {
        blocks.push(b_tau_phi.stats());
    }
    if data.spec.temporal == TemporalEffect::Ar1 {
        blocks.push(b_rho.stats());
    }
    out.acceptance = blocks;
    Ok(out)
}

fn out_vecs(out: &mut ChainOutput) -> (&mut Vec<f64>, &mut Vec<f64>, &mut Vec<f64>) {
    (&mut out.params, &mut out.fitted_mu, &mut out.loglik)
}

fn push_snapshot(
    data: &ModelData,
    st: &State,
    (params, fitted, loglik): (&mut Vec<f64>, &mut Vec<f64>, &mut Vec<f64>),
) {
    params.push(st.alpha);
    params.extend_from_slice(&st.beta);
    if data.spec.temporal == TemporalEffect::Linear {
        params.push(st.delta);
    }
    if data.spec.has_bym() {
        params.extend_from_slice(&st.u);
        params.extend_from_slice(&st.v);
    }
    if data.spec.has_phi() {
        params.extend_from_slice(&st.phi);
    }
    if data.spec.interaction {
        params.extend_from_slice(&st.eta);
    }
    params.push(st.tau_b());
    if data.spec.has_bym() {
        params.push(st.ln_tau_u.exp());
        params.push(st.ln_tau_v.exp());
    }
    if data.spec.has_phi() {
        params.push(st.ln_tau_phi.exp());
    }
    if data.spec.interaction {
        params.push(st.ln_tau_eta.exp());
    }
    if data.spec.temporal == TemporalEffect::Ar1 {
        params.push(st.rho());
    }
    for &lp in &st.lin {
        fitted.push(data.fitted(lp));
    }
    loglik.extend_from_slice(&st.ll);
}

#[inline]
fn accept(rng: &mut ChaCha8Rng, ln_ratio: f64) -> bool {
    ln_ratio >= 0.0 || rng.random::<f64>().ln() < ln_ratio
}

#[inline]
fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn update_fixed(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let d_alpha: f64 = s * std_normal(rng);
    let d_beta: Vec<f64> = (0..data.k_cov).map(|_| s * std_normal(rng)).collect();
    let tau_b = st.tau_b();
    let mut new_sum = 0.0;
    for (j, obs) in data.obs.iter().enumerate() {
        let mut dl = d_alpha;
        for (db, x) in d_beta.iter().zip(&obs.x) {
            dl += db * x;
        }
        let nl = st.lin[j] + dl;
        let nll = data.obs_loglik(obs, nl, tau_b);
        st.scratch_lin[j] = nl;
        st.scratch_ll[j] = nll;
        new_sum += nll;
    }
    let sd0 = data.priors.fixed_sd;
    let mut d_prior =
        normal_logpdf(st.alpha + d_alpha, 0.0, sd0) - normal_logpdf(st.alpha, 0.0, sd0);
    for (b, db) in st.beta.iter().zip(&d_beta) {
        d_prior += normal_logpdf(b + db, 0.0, sd0) - normal_logpdf(*b, 0.0, sd0);
    }
    let accepted = accept(rng, new_sum - st.sum_ll + d_prior);
    if accepted {
        st.alpha += d_alpha;
        for (b, db) in st.beta.iter_mut().zip(&d_beta) {
            *b += db;
        }
        std::mem::swap(&mut st.lin, &mut st.scratch_lin);
        std::mem::swap(&mut st.ll, &mut st.scratch_ll);
        st.sum_ll = new_sum;
    }
    block.record(accepted as u64, 1, post);
    if adapting {
        block.adapt(accepted as u64 as f64);
    }
}

/// Shared machinery for single-site field updates: evaluates the likelihood
/// delta over the observations touched by a site shift `d` and applies it
/// on acceptance.
fn site_move(
    data: &ModelData,
    st: &mut State,
    obs_indices: &[usize],
    d: f64,
    d_prior: f64,
    rng: &mut ChaCha8Rng,
) -> bool {
    let tau_b = st.tau_b();
    let mut d_ll = 0.0;
    let mut scratch = std::mem::take(&mut st.site_scratch);
    scratch.clear();
    for &j in obs_indices {
        let nl = st.lin[j] + d;
        let nll = data.obs_loglik(&data.obs[j], nl, tau_b);
        d_ll += nll - st.ll[j];
        scratch.push((j, nl, nll));
    }
    let accepted = accept(rng, d_ll + d_prior);
    if accepted {
        for &(j, nl, nll) in &scratch {
            st.lin[j] = nl;
            st.ll[j] = nll;
        }
        st.sum_ll += d_ll;
    }
    st.site_scratch = scratch;
    accepted
}

fn update_u(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let tau_u = st.ln_tau_u.exp();
    let mut accepted = 0u64;
    for i in 0..data.n_regions {
        let du: f64 = s * std_normal(rng);
        let deg = data.graph.degree(i) as f64;
        let nbr_sum: f64 = data.graph.neighbors(i).iter().map(|&j| st.u[j]).sum();
        // Delta of u'Qu for a single-site shift.
        let d_quad = deg * (2.0 * st.u[i] * du + du * du) - 2.0 * du * nbr_sum;
        let d_prior = -0.5 * tau_u * d_quad;
        if site_move(data, st, &data.obs_by_region[i], du, d_prior, rng) {
            st.u[i] += du;
            accepted += 1;
        }
    }
    block.record(accepted, data.n_regions as u64, post);
    if adapting {
        block.adapt(accepted as f64 / data.n_regions as f64);
    }
    // Sweep the component means into the intercept; on a connected graph
    // this leaves every predictor (and u'Qu) unchanged.
    let mut shift_total = 0.0;
    for comp in &data.components {
        let m = comp.iter().map(|&i| st.u[i]).sum::<f64>() / comp.len() as f64;
        for &i in comp {
            st.u[i] -= m;
        }
        shift_total += m * comp.len() as f64;
    }
    st.alpha += shift_total / data.n_regions as f64;
    if data.components.len() > 1 {
        st.refresh(data);
    }
}

fn update_v(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let tau_v = st.ln_tau_v.exp();
    let mut accepted = 0u64;
    for i in 0..data.n_regions {
        let dv: f64 = s * std_normal(rng);
        let d_prior = -0.5 * tau_v * (2.0 * st.v[i] * dv + dv * dv);
        if site_move(data, st, &data.obs_by_region[i], dv, d_prior, rng) {
            st.v[i] += dv;
            accepted += 1;
        }
    }
    block.record(accepted, data.n_regions as u64, post);
    if adapting {
        block.adapt(accepted as f64 / data.n_regions as f64);
    }
}

fn update_delta(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let dd: f64 = s * std_normal(rng);
    let tau_b = st.tau_b();
    let mut new_sum = 0.0;
    for (j, obs) in data.obs.iter().enumerate() {
        let nl = st.lin[j] + dd * data.tc[obs.month];
        let nll = data.obs_loglik(obs, nl, tau_b);
        st.scratch_lin[j] = nl;
        st.scratch_ll[j] = nll;
        new_sum += nll;
    }
    let sd0 = data.priors.fixed_sd;
    let d_prior = normal_logpdf(st.delta + dd, 0.0, sd0) - normal_logpdf(st.delta, 0.0, sd0);
    let accepted = accept(rng, new_sum - st.sum_ll + d_prior);
    if accepted {
        st.delta += dd;
        std::mem::swap(&mut st.lin, &mut st.scratch_lin);
        std::mem::swap(&mut st.ll, &mut st.scratch_ll);
        st.sum_ll = new_sum;
    }
    block.record(accepted as u64, 1, post);
    if adapting {
        block.adapt(accepted as u64 as f64);
    }
}

fn update_phi(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let tau_phi = st.ln_tau_phi.exp();
    let rho = st.rho();
    let t_len = data.n_months;
    let ar1 = data.spec.temporal == TemporalEffect::Ar1;
    let mut accepted = 0u64;
    for t in 0..t_len {
        let dp: f64 = s * std_normal(rng);
        let local = |phi_t: f64| -> f64 {
            let mut q = 0.0;
            if ar1 {
                if t == 0 {
                    q += (1.0 - rho * rho) * phi_t * phi_t;
                } else {
                    let d = phi_t - rho * st.phi[t - 1];
                    q += d * d;
                }
                if t + 1 < t_len {
                    let d = st.phi[t + 1] - rho * phi_t;
                    q += d * d;
                }
            } else {
                if t > 0 {
                    let d = phi_t - st.phi[t - 1];
                    q += d * d;
                }
                if t + 1 < t_len {
                    let d = st.phi[t + 1] - phi_t;
                    q += d * d;
                }
            }
            q
        };
        let d_prior = -0.5 * tau_phi * (local(st.phi[t] + dp) - local(st.phi[t]));
        if site_move(data, st, &data.obs_by_month[t], dp, d_prior, rng) {
            st.phi[t] += dp;
            accepted += 1;
        }
    }
    block.record(accepted, t_len as u64, post);
    if adapting {
        block.adapt(accepted as f64 / t_len as f64);
    }
    if data.spec.temporal == TemporalEffect::Rw1 {
        // Constraint sweep: the mean moves into the intercept, leaving every
        // predictor and the RW1 increments unchanged.
        let m = st.phi.iter().sum::<f64>() / t_len as f64;
        for p in &mut st.phi {
            *p -= m;
        }
        st.alpha += m;
    }
}

fn update_eta(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let tau_eta = st.ln_tau_eta.exp();
    let sd_eta = tau_eta.sqrt().recip();
    let tau_b = st.tau_b();
    let mut accepted = 0u64;
    let mut proposed = 0u64;
    for cell in 0..data.cell_to_obs.len() {
        match data.cell_to_obs[cell] {
            Some(j) => {
                proposed += 1;
                let de: f64 = s * std_normal(rng);
                let e = st.eta[cell];
                let d_prior = -0.5 * tau_eta * (2.0 * e * de + de * de);
                let nl = st.lin[j] + de;
                let nll = data.obs_loglik(&data.obs[j], nl, tau_b);
                if accept(rng, nll - st.ll[j] + d_prior) {
                    st.eta[cell] = e + de;
                    st.sum_ll += nll - st.ll[j];
                    st.lin[j] = nl;
                    st.ll[j] = nll;
                    accepted += 1;
                }
            }
            None => {
                // No likelihood term: the full conditional is the prior.
                st.eta[cell] = sd_eta * std_normal(rng);
            }
        }
    }
    block.record(accepted, proposed, post);
    if adapting && proposed > 0 {
        block.adapt(accepted as f64 / proposed as f64);
    }
}

/// Log prior of a precision in log scale (Gamma on tau, Jacobian included):
/// `shape * l - rate * exp(l)` up to a constant.
#[inline]
fn log_tau_prior(l: f64, priors: &Priors) -> f64 {
    priors.precision_shape * l - priors.precision_rate * l.exp()
}

fn update_tau_b(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let l_new = st.ln_tau_b + s * std_normal(rng);
    let tau_new = l_new.exp();
    let mut new_sum = 0.0;
    for (j, obs) in data.obs.iter().enumerate() {
        let nll = data.obs_loglik(obs, st.lin[j], tau_new);
        st.scratch_ll[j] = nll;
        new_sum += nll;
    }
    let d_prior = log_tau_prior(l_new, &data.priors) - log_tau_prior(st.ln_tau_b, &data.priors);
    let accepted = accept(rng, new_sum - st.sum_ll + d_prior);
    if accepted {
        st.ln_tau_b = l_new;
        std::mem::swap(&mut st.ll, &mut st.scratch_ll);
        st.sum_ll = new_sum;
    }
    block.record(accepted as u64, 1, post);
    if adapting {
        block.adapt(accepted as u64 as f64);
    }
}

/// Scalar log-scale precision update against a quadratic-form prior term
/// `(half_rank) * l - (exp(l)/2) * quad`.
fn update_tau_quad(
    st_ln_tau: &mut f64,
    half_rank: f64,
    quad: f64,
    priors: &Priors,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let l_old = *st_ln_tau;
    let l_new = l_old + s * std_normal(rng);
    let logdens = |l: f64| half_rank * l - 0.5 * l.exp() * quad + log_tau_prior(l, priors);
    let accepted = accept(rng, logdens(l_new) - logdens(l_old));
    if accepted {
        *st_ln_tau = l_new;
    }
    block.record(accepted as u64, 1, post);
    if adapting {
        block.adapt(accepted as u64 as f64);
    }
}

fn update_tau_u(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let quad: f64 = data
        .graph
        .edges()
        .map(|(i, j)| (st.u[i] - st.u[j]) * (st.u[i] - st.u[j]))
        .sum();
    update_tau_quad(
        &mut st.ln_tau_u,
        data.rank_u as f64 / 2.0,
        quad,
        &data.priors,
        block,
        rng,
        adapting,
        post,
    );
}

fn update_tau_v(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let quad: f64 = st.v.iter().map(|v| v * v).sum();
    update_tau_quad(
        &mut st.ln_tau_v,
        data.n_regions as f64 / 2.0,
        quad,
        &data.priors,
        block,
        rng,
        adapting,
        post,
    );
}

fn update_tau_phi(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let (half_rank, quad) = match data.spec.temporal {
        TemporalEffect::Ar1 => (data.n_months as f64 / 2.0, ar1_quad_form(&st.phi, st.rho())),
        TemporalEffect::Rw1 => ((data.n_months - 1) as f64 / 2.0, rw1_quad_form(&st.phi)),
        _ => unreachable!("tau_phi updated only for AR1/RW1"),
    };
    update_tau_quad(&mut st.ln_tau_phi, half_rank, quad, &data.priors, block, rng, adapting, post);
}

fn update_tau_eta(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let quad: f64 = st.eta.iter().map(|e| e * e).sum();
    update_tau_quad(
        &mut st.ln_tau_eta,
        st.eta.len() as f64 / 2.0,
        quad,
        &data.priors,
        block,
        rng,
        adapting,
        post,
    );
}

fn update_rho(
    data: &ModelData,
    st: &mut State,
    block: &mut Block,
    rng: &mut ChaCha8Rng,
    adapting: bool,
    post: bool,
) {
    let s = block.sd();
    let z_new = st.z_rho + s * std_normal(rng);
    let tau_phi = st.ln_tau_phi.exp();
    // In z space the prior is exactly N(0, rho_sd^2); the AR1 density keeps
    // its rho-dependent determinant term.
    let logdens = |z: f64| -> f64 {
        let rho = (z / 2.0).tanh();
        0.5 * (1.0 - rho * rho).ln() - 0.5 * tau_phi * ar1_quad_form(&st.phi, rho)
            + normal_logpdf(z, 0.0, data.priors.rho_sd)
    };
    let accepted = accept(rng, logdens(z_new) - logdens(st.z_rho));
    if accepted {
        st.z_rho = z_new;
    }
    block.record(accepted as u64, 1, post);
    if adapting {
        block.adapt(accepted as u64 as f64);
    }
}
