//! Global Moran's I with normal-approximation inference and a permutation
//! test.
//!
//! The statistic is
//! `I = n * sum_ij w_ij (y_i - ybar)(y_j - ybar) / (sum_{i!=j} w_ij * sum_i (y_i - ybar)^2)`
//! with expectation `-1/(n-1)` under the no-autocorrelation null. The
//! analytic variance uses the classical normality-assumption moments built
//! from the weight sums S0, S1, S2; the permutation test is the robustness
//! companion for skewed data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::WeightMatrix;
use crate::rng::mix_seed;

/// Alternative hypothesis for the normal test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Alternative {
    /// Positive spatial autocorrelation (upper tail). The default, matching
    /// the usual reading of monthly compliance clustering.
    #[default]
    Greater,
    TwoSided,
}

/// Moran test output. `z` and `p_one_sided` come from the normal
/// approximation; `p_perm` is present when a permutation test ran.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct MoranResult {
    pub i: f64,
    pub expected_i: f64,
    pub variance_i: f64,
    pub z: f64,
    pub p_one_sided: f64,
    pub p_perm: Option<f64>,
    pub n_used: usize,
}

fn deviations(values: &[f64], weights: &WeightMatrix) -> Result<(Vec<f64>, f64, f64)> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Validation(format!("Moran's I needs at least 2 values, got {n}")));
    }
    if weights.n() != n {
        return Err(Error::Validation(format!(
            "weights dimension {} does not match {} values",
            weights.n(),
            n
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite value passed to Moran's I".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    if ss <= 0.0 {
        return Err(Error::UndefinedStatistic(
            "Moran's I undefined: values have zero sample variance".into(),
        ));
    }
    let s0 = weights.s0();
    if s0 <= 0.0 {
        return Err(Error::UndefinedStatistic("Moran's I undefined: all weights are zero".into()));
    }
    Ok((dev, ss, s0))
}

fn moran_from_deviations(dev: &[f64], ss: f64, s0: f64, weights: &WeightMatrix) -> f64 {
    let n = dev.len() as f64;
    let cross: f64 = weights.entries().map(|(i, j, w)| w * dev[i] * dev[j]).sum();
    n * cross / (s0 * ss)
}

/// Global Moran's I of `values` under the given spatial weights.
pub fn morans_i(values: &[f64], weights: &WeightMatrix) -> Result<f64> {
    let (dev, ss, s0) = deviations(values, weights)?;
    Ok(moran_from_deviations(&dev, ss, s0, weights))
}

/// Moran's I with expectation, normality-assumption variance, z score and
/// normal-tail p value.
pub fn moran_test_normal(values: &[f64], weights: &WeightMatrix) -> Result<MoranResult> {
    moran_test_normal_with(values, weights, Alternative::Greater)
}

pub fn moran_test_normal_with(
    values: &[f64],
    weights: &WeightMatrix,
    alternative: Alternative,
) -> Result<MoranResult> {
    let (dev, ss, s0) = deviations(values, weights)?;
    let i = moran_from_deviations(&dev, ss, s0, weights);
    let n = values.len() as f64;
    let expected = -1.0 / (n - 1.0);
    let s1 = weights.s1();
    let s2 = weights.s2();
    // Normality-assumption second moment (Cliff-Ord):
    //   Var(I) = (n^2 S1 - n S2 + 3 S0^2) / ((n^2 - 1) S0^2) - E[I]^2
    let variance =
        (n * n * s1 - n * s2 + 3.0 * s0 * s0) / ((n * n - 1.0) * s0 * s0) - expected * expected;
    if !(variance > 0.0) {
        return Err(Error::Numerical(format!(
            "Moran variance not positive ({variance}); weights too degenerate for the normal test"
        )));
    }
    let z = (i - expected) / variance.sqrt();
    let upper = normal_upper_tail(z);
    let p = match alternative {
        Alternative::Greater => upper,
        Alternative::TwoSided => (2.0 * upper.min(1.0 - upper)).min(1.0),
    };
    Ok(MoranResult {
        i,
        expected_i: expected,
        variance_i: variance,
        z,
        p_one_sided: p,
        p_perm: None,
        n_used: values.len(),
    })
}

/// Adds a Monte Carlo permutation p value to the normal test.
///
/// `p_perm = (1 + #{I_perm >= I_obs}) / (n_perm + 1)`; the result is a pure
/// function of `(values, weights, n_perm, seed)` regardless of how many
/// worker threads evaluate the permutations.
pub fn moran_test_perm(
    values: &[f64],
    weights: &WeightMatrix,
    n_perm: usize,
    seed: u64,
) -> Result<MoranResult> {
    moran_test_perm_with(values, weights, n_perm, seed, Alternative::Greater)
}

pub fn moran_test_perm_with(
    values: &[f64],
    weights: &WeightMatrix,
    n_perm: usize,
    seed: u64,
    alternative: Alternative,
) -> Result<MoranResult> {
    if n_perm < 99 {
        return Err(Error::Validation(format!("n_perm must be >= 99, got {n_perm}")));
    }
    let mut result = moran_test_normal_with(values, weights, alternative)?;
    let (dev, ss, s0) = deviations(values, weights)?;
    let i_obs = result.i;

    // Each permutation draws from its own seed-derived stream, so the set of
    // permutations (and therefore the exceedance count) does not depend on
    // evaluation order.
    let exceed: usize = (0..n_perm)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, k as u64));
            let mut perm = dev.clone();
            perm.shuffle(&mut rng);
            let i_perm = moran_from_deviations(&perm, ss, s0, weights);
            usize::from(i_perm >= i_obs)
        })
        .sum();
    result.p_perm = Some((1 + exceed) as f64 / (n_perm + 1) as f64);
    Ok(result)
}

/// Upper-tail standard normal probability `P(Z > z)`.
fn normal_upper_tail(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{weight_matrix, RegionGraph, WeightStyle};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn path3_binary() -> WeightMatrix {
        let g = RegionGraph::from_adjacency_list(3, &[(0, 1), (1, 2)]).unwrap();
        weight_matrix(&g, WeightStyle::Binary)
    }

    #[test]
    fn path_graph_hand_value() {
        // ybar = 5/3, deviations (-2/3, -2/3, 4/3); cross sum = -8/9 doubled
        // over symmetric entries; I = 3 * (-8/9) / (4 * 8/3) = -1/4.
        let i = morans_i(&[1.0, 1.0, 3.0], &path3_binary()).unwrap();
        assert_relative_eq!(i, -0.25, epsilon = 1e-15);
    }

    #[test]
    fn expected_value_n3() {
        let r = moran_test_normal(&[1.0, 1.0, 3.0], &path3_binary()).unwrap();
        assert_relative_eq!(r.expected_i, -0.5, epsilon = 1e-15);
        assert_relative_eq!(r.z, (r.i - r.expected_i) / r.variance_i.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn zero_variance_is_undefined() {
        let err = morans_i(&[2.0, 2.0, 2.0], &path3_binary()).unwrap_err();
        assert!(matches!(err, Error::UndefinedStatistic(_)));
    }

    #[test]
    fn all_zero_weights_rejected() {
        let g = RegionGraph::from_adjacency_list(3, &[]).unwrap();
        let w = weight_matrix(&g, WeightStyle::Binary);
        let err = morans_i(&[1.0, 2.0, 3.0], &w).unwrap_err();
        assert!(matches!(err, Error::UndefinedStatistic(_)));
    }

    #[test]
    fn checkerboard_is_negative() {
        // 2x2 lattice rook pattern: bipartite path-square with alternating
        // values must exhibit negative autocorrelation.
        let g = RegionGraph::from_adjacency_list(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap();
        let w = weight_matrix(&g, WeightStyle::Binary);
        let i = morans_i(&[1.0, -1.0, 1.0, -1.0], &w).unwrap();
        assert!(i < 0.0, "checkerboard I = {i}");
    }

    #[test]
    fn affine_invariance() {
        let g = RegionGraph::queen_lattice(3, 3);
        let w = weight_matrix(&g, WeightStyle::Binary);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
        let y2: Vec<f64> = y.iter().map(|v| -3.5 * v + 11.0).collect();
        let i1 = morans_i(&y, &w).unwrap();
        let i2 = morans_i(&y2, &w).unwrap();
        assert_relative_eq!(i1, i2, epsilon = 1e-12);
    }

    #[test]
    fn perm_test_deterministic() {
        let g = RegionGraph::queen_lattice(4, 4);
        let w = weight_matrix(&g, WeightStyle::Binary);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..16).map(|_| rng.random::<f64>()).collect();
        let a = moran_test_perm(&y, &w, 199, 42).unwrap();
        let b = moran_test_perm(&y, &w, 199, 42).unwrap();
        assert_eq!(a.p_perm, b.p_perm);
        assert!(a.p_perm.unwrap() > 0.0 && a.p_perm.unwrap() <= 1.0);
    }

    #[test]
    fn perm_test_requires_99() {
        let y = [1.0, 2.0, 3.0];
        assert!(moran_test_perm(&y, &path3_binary(), 50, 1).is_err());
    }

    #[test]
    fn clustered_lattice_is_significant_and_methods_agree() {
        // Smooth ramp over the Iowa lattice plus small noise: strongly
        // clustered, so both tests must reject at alpha = 0.05.
        let g = RegionGraph::iowa99();
        let w = weight_matrix(&g, WeightStyle::Binary);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<f64> = (0..99)
            .map(|k| {
                let (r, c) = (k / 11, k % 11);
                0.1 * r as f64 + 0.05 * c as f64 + 0.02 * rng.random::<f64>()
            })
            .collect();
        let r = moran_test_perm(&y, &w, 999, 11).unwrap();
        assert!(r.z > 1.645, "z = {}", r.z);
        assert!(r.p_one_sided < 0.05);
        assert!(r.p_perm.unwrap() < 0.05);
    }

    #[test]
    fn iid_values_rarely_significant() {
        // Monte Carlo calibration: under the null the permutation p value
        // should exceed 0.05 most of the time.
        let g = RegionGraph::iowa99();
        let w = weight_matrix(&g, WeightStyle::Binary);
        let mut ok = 0;
        let trials = 40;
        for t in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
            let y: Vec<f64> = (0..99).map(|_| rng.random::<f64>()).collect();
            let r = moran_test_perm(&y, &w, 199, 77 + t).unwrap();
            if r.p_perm.unwrap() > 0.05 {
                ok += 1;
            }
        }
        assert!(ok * 10 >= trials * 9, "only {ok}/{trials} null trials had p_perm > 0.05");
    }
}
