//! Ground-truth marginals: closed-form Gaussian inversion, brute-force spin
//! enumeration and grid quadrature for tiny continuous models.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::factor_graph::{Family, FactorGraph, GraphError};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("expected a {expected} graph, got {got}")]
    WrongFamily { expected: Family, got: Family },
    #[error("{n} variables exceeds the cap of {cap}")]
    TooLarge { n: usize, cap: usize },
    #[error("density at the grid boundary is {ratio:e} of its peak; widen the grid")]
    TailMass { ratio: f64 },
    #[error("invalid quadrature settings: {0}")]
    InvalidGrid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub const ENUMERATION_CAP: usize = 20;
pub const QUADRATURE_CAP: usize = 3;
pub const QUADRATURE_HALF_WIDTH: f64 = 6.0;
/// Boundary-to-peak density ratio above which the grid is considered too
/// narrow.
pub const TAIL_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMarginals {
    pub variances: Vec<f64>,
    pub precisions: Vec<f64>,
}

/// Marginal variances `(J⁻¹)_ii` via Cholesky inversion.
pub fn ggm_marginals(precision: &DMatrix<f64>) -> Result<GaussianMarginals, OracleError> {
    let chol = precision.clone().cholesky().ok_or(OracleError::NotPositiveDefinite)?;
    let cov = chol.inverse();
    let variances: Vec<f64> = (0..cov.nrows()).map(|i| cov[(i, i)]).collect();
    let precisions = variances.iter().map(|v| 1.0 / v).collect();
    Ok(GaussianMarginals { variances, precisions })
}

pub fn ggm_marginals_of(g: &FactorGraph) -> Result<GaussianMarginals, OracleError> {
    if g.family() != Family::Gaussian {
        return Err(OracleError::WrongFamily { expected: Family::Gaussian, got: g.family() });
    }
    ggm_marginals(&g.precision_matrix()?)
}

/// Exact `p(s_i = +1)` by summing over all `2ⁿ` spin configurations.
pub fn enumerate_binary(g: &FactorGraph) -> Result<Vec<f64>, OracleError> {
    if g.family() != Family::Spin {
        return Err(OracleError::WrongFamily { expected: Family::Spin, got: g.family() });
    }
    let n = g.n_variables();
    if n > ENUMERATION_CAP {
        return Err(OracleError::TooLarge { n, cap: ENUMERATION_CAP });
    }
    let total = 1usize << n;
    let mut s = vec![-1.0; n];
    let mut logw = Vec::with_capacity(total);
    for bits in 0..total {
        for (i, si) in s.iter_mut().enumerate() {
            *si = if bits >> i & 1 == 1 { 1.0 } else { -1.0 };
        }
        logw.push(g.factors().iter().map(|f| f.log_term(&s, g.beta())).sum::<f64>());
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut plus = vec![0.0; n];
    for (bits, lw) in logw.iter().enumerate() {
        let w = (lw - max).exp();
        z += w;
        for (i, p) in plus.iter_mut().enumerate() {
            if bits >> i & 1 == 1 {
                *p += w;
            }
        }
    }
    Ok(plus.into_iter().map(|p| p / z).collect())
}

/// Default grid resolution per dimension for an `n`-variable model.
pub fn default_points_per_dim(n: usize) -> usize {
    match n {
        0 | 1 => 2001,
        2 => 401,
        _ => 121,
    }
}

/// Per-variable `(mean, m₂, m₃, m₄)` by trapezoid quadrature on
/// `[-half_width, half_width]ⁿ`.
pub fn quadrature_moments(
    g: &FactorGraph,
    half_width: f64,
    points_per_dim: usize,
) -> Result<Vec<[f64; 4]>, OracleError> {
    if g.family() != Family::Continuous {
        return Err(OracleError::WrongFamily { expected: Family::Continuous, got: g.family() });
    }
    let n = g.n_variables();
    if n > QUADRATURE_CAP {
        return Err(OracleError::TooLarge { n, cap: QUADRATURE_CAP });
    }
    if points_per_dim < 3 || !(half_width > 0.0) {
        return Err(OracleError::InvalidGrid(format!("{points_per_dim} points over ±{half_width}")));
    }
    let h = 2.0 * half_width / (points_per_dim - 1) as f64;
    let axis: Vec<f64> = (0..points_per_dim).map(|i| -half_width + h * i as f64).collect();
    let total = points_per_dim.pow(n as u32);

    let mut x = vec![0.0; n];
    let mut idx = vec![0usize; n];
    let mut logw = Vec::with_capacity(total);
    let mut on_boundary = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        for d in 0..n {
            idx[d] = rem % points_per_dim;
            rem /= points_per_dim;
            x[d] = axis[idx[d]];
        }
        let edge_count = idx.iter().filter(|&&i| i == 0 || i == points_per_dim - 1).count();
        logw.push(g.factors().iter().map(|f| f.log_term(&x, g.beta())).sum::<f64>() - edge_count as f64 * 2f64.ln());
        on_boundary.push(edge_count > 0);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let boundary = logw
        .iter()
        .zip(&on_boundary)
        .filter(|(_, &b)| b)
        .map(|(lw, _)| (lw - max).exp())
        .fold(0.0, f64::max)
        * 2.0;
    if boundary > TAIL_TOLERANCE {
        return Err(OracleError::TailMass { ratio: boundary });
    }
    let weights: Vec<f64> = logw.iter().map(|lw| (lw - max).exp()).collect();
    let z: f64 = weights.iter().sum();

    let coord = |flat: usize, d: usize| axis[(flat / points_per_dim.pow(d as u32)) % points_per_dim];
    let mut out = vec![[0.0; 4]; n];
    for (d, slot) in out.iter_mut().enumerate() {
        let mean = weights.iter().enumerate().map(|(f, w)| w * coord(f, d)).sum::<f64>() / z;
        let mut m = [0.0; 3];
        for (f, w) in weights.iter().enumerate() {
            let c = coord(f, d) - mean;
            let c2 = c * c;
            m[0] += w * c2;
            m[1] += w * c2 * c;
            m[2] += w * c2 * c2;
        }
        *slot = [mean, m[0] / z, m[1] / z, m[2] / z];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{build_continuous, build_spin};

    #[test]
    fn hand_inverted_covariances() {
        let m = ggm_marginals(&DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0])).unwrap();
        assert!((m.variances[0] - 0.5).abs() < 1e-15 && (m.variances[1] - 1.0 / 3.0).abs() < 1e-15);
        let m = ggm_marginals(&DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert!(m.precisions.iter().all(|p| (p - 1.5).abs() < 1e-14));
        let tri = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let m = ggm_marginals(&tri).unwrap();
        for (got, want) in m.variances.iter().zip([0.75, 1.0, 0.75]) {
            assert!((got - want).abs() < 1e-14);
        }
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(ggm_marginals(&bad), Err(OracleError::NotPositiveDefinite));
    }

    #[test]
    fn closed_form_single_spins() {
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let g = build_spin(&[[0.0; 3]; 4], &[(0, 1, 2, 0.0)], 0.5).unwrap();
        assert!(enumerate_binary(&g).unwrap().iter().all(|p| (p - 0.5).abs() < 1e-15));
        let g = build_spin(&[[1.0, 0.5, -1.0]], &[], 0.5).unwrap();
        assert!((enumerate_binary(&g).unwrap()[0] - 0.5).abs() < 1e-15);
        let g = build_spin(&[[1.0, 0.0, 0.0]; 2], &[], 0.5).unwrap();
        for p in enumerate_binary(&g).unwrap() {
            assert!((p - sigmoid(1.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn enumeration_cap() {
        let g = build_spin(&[[0.0; 3]; 21], &[], 0.5).unwrap();
        assert_eq!(enumerate_binary(&g), Err(OracleError::TooLarge { n: 21, cap: 20 }));
    }

    #[test]
    fn quartic_grid_refinement_and_symmetry() {
        let g = build_continuous(&[[0.0; 3]], &[], &[], 1.0, 0.3).unwrap();
        let a = quadrature_moments(&g, 6.0, 2001).unwrap()[0];
        let b = quadrature_moments(&g, 6.0, 4001).unwrap()[0];
        assert!((a[1] - b[1]).abs() < 1e-8);
        assert!(a[0].abs() < 1e-12 && a[2].abs() < 1e-12);
    }

    #[test]
    fn independent_pair_factorises() {
        let b = [[0.3, -0.2, 0.1], [-0.5, 0.4, 0.0]];
        let pair = build_continuous(&b, &[(0, 1, 0.0)], &[], 1.0, 0.3).unwrap();
        let joint = quadrature_moments(&pair, 6.0, 401).unwrap();
        for i in 0..2 {
            let single = build_continuous(&[b[i]], &[], &[], 1.0, 0.3).unwrap();
            let m = quadrature_moments(&single, 6.0, 401).unwrap()[0];
            for k in 0..4 {
                assert!((joint[i][k] - m[k]).abs() < 1e-12, "{i} {k}");
            }
        }
    }
}
