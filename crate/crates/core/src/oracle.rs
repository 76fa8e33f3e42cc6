//! Independent reference implementations used to validate the main code
//! paths in tests: dense brute-force Moran's I, exhaustive permutation
//! moments, dense Gaussian log densities (proper and pseudo-determinant),
//! double-exponential quadrature and a Kolmogorov-Smirnov distance.
//!
//! Nothing here is used by the production paths; the point is that these
//! routes share no code with what they check.

use nalgebra::DMatrix;

/// Brute-force Moran's I over a dense weight matrix (double loop, no
/// sparsity assumptions).
pub fn dense_morans_i(values: &[f64], weights: &[Vec<f64>]) -> f64 {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let dev: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let mut cross = 0.0;
    let mut s0 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cross += weights[i][j] * dev[i] * dev[j];
                s0 += weights[i][j];
            }
        }
    }
    let ss: f64 = dev.iter().map(|d| d * d).sum();
    n as f64 * cross / (s0 * ss)
}

/// Mean of Moran's I over all `n!` value permutations (feasible for n <= 8).
pub fn exhaustive_permutation_mean_i(values: &[f64], weights: &[Vec<f64>]) -> f64 {
    let mut vals = values.to_vec();
    let n = vals.len();
    let mut sum = 0.0;
    let mut count = 0u64;
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    sum += dense_morans_i(&vals, weights);
    count += 1;
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                vals.swap(0, i);
            } else {
                vals.swap(c[i], i);
            }
            sum += dense_morans_i(&vals, weights);
            count += 1;
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    sum / count as f64
}

/// Full multivariate normal log density at `x` for a (proper) precision
/// matrix, via dense Cholesky.
pub fn dense_mvn_logpdf(precision: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let chol = precision.clone().cholesky().expect("precision must be positive definite");
    let ln_det: f64 = (0..n).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
    let xv = nalgebra::DVector::from_column_slice(x);
    let quad = (&xv.transpose() * precision * &xv)[(0, 0)];
    -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * ln_det - 0.5 * quad
}

/// Rank of a symmetric PSD matrix via dense eigendecomposition.
pub fn dense_rank(matrix: &DMatrix<f64>) -> usize {
    let eig = matrix.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if max == 0.0 {
        return 0;
    }
    eig.eigenvalues.iter().filter(|&&l| l.abs() > 1e-9 * max).count()
}

/// Log density of an improper GMRF in the pseudo-determinant convention:
/// `(rank/2) ln tau - (tau/2) x'Sx`, with the rank taken from a dense
/// eigendecomposition of the structure matrix `S` and the quadratic form
/// evaluated densely.
pub fn dense_improper_gmrf_logpdf(structure: &DMatrix<f64>, tau: f64, x: &[f64]) -> f64 {
    let rank = dense_rank(structure);
    let xv = nalgebra::DVector::from_column_slice(x);
    let quad = (&xv.transpose() * structure * &xv)[(0, 0)];
    0.5 * rank as f64 * tau.ln() - 0.5 * tau * quad
}

/// Dense ICAR structure matrix `D - A` built from raw adjacency pairs.
pub fn dense_icar_structure(n: usize, pairs: &[(usize, usize)]) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    for &(i, j) in pairs {
        if q[(i, j)] == 0.0 {
            q[(i, j)] = -1.0;
            q[(j, i)] = -1.0;
            q[(i, i)] += 1.0;
            q[(j, j)] += 1.0;
        }
    }
    q
}

/// Dense precision of the stationary AR1 process with autocorrelation `rho`
/// and innovation precision `tau` (tridiagonal).
pub fn dense_ar1_precision(t_len: usize, rho: f64, tau: f64) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(t_len, t_len);
    for t in 0..t_len {
        let d = if t == 0 || t == t_len - 1 {
            if t_len == 1 {
                1.0 - rho * rho
            } else {
                1.0
            }
        } else {
            1.0 + rho * rho
        };
        p[(t, t)] = tau * d;
    }
    if t_len == 1 {
        p[(0, 0)] = tau * (1.0 - rho * rho);
    } else {
        p[(0, 0)] = tau;
        p[(t_len - 1, t_len - 1)] = tau;
        for t in 1..t_len - 1 {
            p[(t, t)] = tau * (1.0 + rho * rho);
        }
        for t in 0..t_len - 1 {
            p[(t, t + 1)] = -tau * rho;
            p[(t + 1, t)] = -tau * rho;
        }
        // With the stationary start the first diagonal entry is tau
        // (1 - rho^2 from the marginal plus rho^2 from the first transition).
        p[(0, 0)] = tau * (1.0 - rho * rho) + tau * rho * rho;
    }
    p
}

/// Dense RW1 structure matrix (second-difference / path-graph Laplacian).
pub fn dense_rw1_structure(t_len: usize) -> DMatrix<f64> {
    let pairs: Vec<(usize, usize)> = (0..t_len - 1).map(|t| (t, t + 1)).collect();
    dense_icar_structure(t_len, &pairs)
}

/// Integrates `f(x, 1 - x)` over (0,1) by tanh-sinh (double-exponential)
/// quadrature. The integrand receives both `x` and `1 - x` computed in a
/// cancellation-free way, so densities with endpoint structure evaluate
/// accurately. Levels are refined until successive estimates agree to `tol`.
pub fn tanh_sinh_01<F: Fn(f64, f64) -> f64>(f: F, tol: f64) -> f64 {
    let t_max = 3.5f64;
    let mut prev = f64::NAN;
    for level in 2..=10 {
        let h = 0.5f64.powi(level);
        let steps = (t_max / h).ceil() as i64;
        let mut sum = 0.0;
        for k in -steps..=steps {
            let t = k as f64 * h;
            let u = std::f64::consts::FRAC_PI_2 * t.sinh();
            // x = (1 + tanh u)/2 and 1-x computed without cancellation.
            let e = (-2.0 * u.abs()).exp();
            let (x, omx) = if u >= 0.0 {
                (1.0 / (1.0 + e), e / (1.0 + e))
            } else {
                (e / (1.0 + e), 1.0 / (1.0 + e))
            };
            // dx/dt = (pi/2) cosh t / cosh^2(u); written via e to avoid
            // overflow of cosh^2 for large |u|.
            let sech2 = 4.0 * e / ((1.0 + e) * (1.0 + e));
            let w = std::f64::consts::FRAC_PI_2 * t.cosh() * sech2 / 2.0;
            if x <= 0.0 || omx <= 0.0 || w < 1e-290 {
                continue;
            }
            let v = f(x, omx);
            if v.is_finite() {
                sum += w * v;
            }
        }
        let estimate = sum * h;
        if (estimate - prev).abs() <= tol * estimate.abs().max(1.0) {
            return estimate;
        }
        prev = estimate;
    }
    prev
}

/// Kolmogorov-Smirnov distance between a sample and the Uniform(0,1) CDF.
pub fn ks_uniform_distance(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        let hi = (i as f64 + 1.0) / n - x;
        let lo = x - i as f64 / n;
        d = d.max(hi.abs()).max(lo.abs());
    }
    d
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tanh_sinh_polynomial() {
        // int_0^1 3x^2 dx = 1
        let v = tanh_sinh_01(|x, _| 3.0 * x * x, 1e-12);
        assert_relative_eq!(v, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn tanh_sinh_endpoint_weighted() {
        // int_0^1 x^4 (1-x)^2 dx = B(5,3) = 4!2!/7! = 1/105
        let v = tanh_sinh_01(|x, omx| x.powi(4) * omx * omx, 1e-12);
        assert_relative_eq!(v, 1.0 / 105.0, epsilon = 1e-10);
    }

    #[test]
    fn ar1_precision_matches_factored_density() {
        // Quadratic form of the dense precision equals the sequential AR1
        // quadratic for random vectors.
        let (t_len, rho, tau) = (6usize, 0.55, 2.0);
        let p = dense_ar1_precision(t_len, rho, tau);
        let phi: Vec<f64> = (0..t_len).map(|t| (t as f64 * 0.7).sin()).collect();
        let xv = nalgebra::DVector::from_column_slice(&phi);
        let quad_dense = (&xv.transpose() * &p * &xv)[(0, 0)];
        let mut quad_seq = tau * (1.0 - rho * rho) * phi[0] * phi[0];
        for t in 1..t_len {
            let d = phi[t] - rho * phi[t - 1];
            quad_seq += tau * d * d;
        }
        assert_relative_eq!(quad_dense, quad_seq, epsilon = 1e-12);
    }

    #[test]
    fn ks_distance_of_grid_is_small() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform_distance(&v) < 0.001);
    }

    #[test]
    fn rank_of_path_laplacian() {
        let q = dense_rw1_structure(5);
        assert_eq!(dense_rank(&q), 4);
    }
}
