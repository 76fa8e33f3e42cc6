//! Fit-artifact persistence: a manifest JSON plus raw little-endian f64
//! column files for samples, fitted means and log likelihoods.
//!
//! Layout of a fit directory:
//! - `manifest.json` — spec code, seed, config, panel checksum, dimensions,
//!   parameter names and observation metadata (sample row-major layout is
//!   `(chains * retained, n_params)` with chains concatenated in order).
//! - `params.bin`, `fitted_mu.bin`, `loglik.bin` — f64 little-endian,
//!   row-major.
//!
//! Wall time is intentionally not persisted: artifacts must be byte-stable
//! across reruns with the same seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

use super::{BlockAcceptance, McmcConfig, ParamLayout, PosteriorFit};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const FITTED_MU_FILE: &str = "fitted_mu.bin";
pub const LOGLIK_FILE: &str = "loglik.bin";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec_code: String,
    seed: u64,
    config: McmcConfig,
    panel_checksum: String,
    n_chains: usize,
    n_retained_per_chain: usize,
    n_params: usize,
    n_obs: usize,
    covariate_names: Vec<String>,
    param_names: Vec<String>,
    obs_index: Vec<(usize, usize)>,
    obs_y: Vec<f64>,
    region_ids: Vec<String>,
    month_labels: Vec<u32>,
    acceptance: Vec<BlockAcceptance>,
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Validation(format!(
            "{}: expected {} f64 values ({} bytes), found {} bytes",
            path.display(),
            expected,
            expected * 8,
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes a fit artifact directory (created if absent).
pub fn save_fit<P: AsRef<Path>>(fit: &PosteriorFit, dir: P) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let covariate_names: Vec<String> = fit
        .layout
        .names()
        .iter()
        .filter_map(|n| n.strip_prefix("beta[").and_then(|s| s.strip_suffix(']')))
        .map(str::to_string)
        .collect();
    let manifest = Manifest {
        format_version: 1,
        spec_code: fit.spec.code(),
        seed: fit.rng_seed,
        config: fit.config,
        panel_checksum: fit.panel_checksum.clone(),
        n_chains: fit.config.n_chains,
        n_retained_per_chain: fit.n_retained_per_chain,
        n_params: fit.layout.n_params(),
        n_obs: fit.n_obs(),
        covariate_names,
        param_names: fit.layout.names().to_vec(),
        obs_index: fit.obs_index.clone(),
        obs_y: fit.obs_y.clone(),
        region_ids: fit.region_ids.clone(),
        month_labels: fit.month_labels.clone(),
        acceptance: fit.acceptance.clone(),
    };
    let file = std::fs::File::create(dir.join(MANIFEST_FILE))?;
    serde_json::to_writer_pretty(file, &manifest)?;
    write_f64s(&dir.join(PARAMS_FILE), &fit.params)?;
    write_f64s(&dir.join(FITTED_MU_FILE), &fit.fitted_mu)?;
    write_f64s(&dir.join(LOGLIK_FILE), &fit.loglik)?;
    Ok(())
}

/// Loads a fit artifact. The loaded fit reports zero wall time (runtime is
/// not part of the artifact).
pub fn load_fit<P: AsRef<Path>>(dir: P) -> Result<PosteriorFit> {
    let dir = dir.as_ref();
    let manifest: Manifest =
        serde_json::from_reader(std::fs::File::open(dir.join(MANIFEST_FILE))?)?;
    if manifest.format_version != 1 {
        return Err(Error::Validation(format!(
            "unsupported fit format version {}",
            manifest.format_version
        )));
    }
    let spec = ModelSpec::parse_code(&manifest.spec_code)?;
    let layout = ParamLayout::build(
        &spec,
        manifest.region_ids.len(),
        manifest.month_labels.len(),
        &manifest.covariate_names,
    );
    if layout.names() != manifest.param_names.as_slice() {
        return Err(Error::Validation(
            "fit manifest parameter names do not match the reconstructed layout".into(),
        ));
    }
    let n_samples = manifest.n_chains * manifest.n_retained_per_chain;
    let params = read_f64s(&dir.join(PARAMS_FILE), n_samples * manifest.n_params)?;
    let fitted_mu = read_f64s(&dir.join(FITTED_MU_FILE), n_samples * manifest.n_obs)?;
    let loglik = read_f64s(&dir.join(LOGLIK_FILE), n_samples * manifest.n_obs)?;
    Ok(PosteriorFit {
        spec,
        layout,
        config: manifest.config,
        rng_seed: manifest.seed,
        wall_time_s: 0.0,
        panel_checksum: manifest.panel_checksum,
        region_ids: manifest.region_ids,
        month_labels: manifest.month_labels,
        obs_index: manifest.obs_index,
        obs_y: manifest.obs_y,
        acceptance: manifest.acceptance,
        n_retained_per_chain: manifest.n_retained_per_chain,
        params,
        fitted_mu,
        loglik,
    })
}
