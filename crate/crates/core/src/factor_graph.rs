//! Bipartite factor graphs with exponential-family factors.
//!
//! Three model families are supported:
//!
//! * **gaussian**: `p(x) ∝ exp(-½ xᵀJx)` with one singleton factor per
//!   diagonal entry `J_ii` and one pair factor per non-zero `J_ij`, `i < j`.
//! * **spin**: `p(s) ∝ exp(β(Σ_i Σ_p b_ip s_i^p + Σ J_ijk s_i s_j s_k))`,
//!   `s ∈ {-1, +1}`.
//! * **continuous**: `p(x) ∝ exp(-β(Σ_i Σ_p b_ip x_i^p + Σ K_ij x_i x_j +
//!   Σ J_ijk x_i x_j x_k + α Σ_i x_i⁴))`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("factor {ftype} expects {expected} members, got {got}")]
    Arity { ftype: FactorType, expected: usize, got: usize },
    #[error("factor {ftype} expects {expected} natural parameters, got {got}")]
    EtaLength { ftype: FactorType, expected: usize, got: usize },
    #[error("variable index {index} out of range for {n} variables")]
    OutOfRange { index: usize, n: usize },
    #[error("factor {ftype} repeats variable {index}")]
    RepeatedMember { ftype: FactorType, index: usize },
    #[error("duplicate factor {ftype} over {members:?}")]
    DuplicateFactor { ftype: FactorType, members: Vec<usize> },
    #[error("factor type {ftype} does not belong to the {family} family")]
    FamilyMismatch { ftype: FactorType, family: Family },
    #[error("operation requires a {expected} graph, got {got}")]
    WrongFamily { expected: &'static str, got: Family },
    #[error("precision matrix is not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },
    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("state has length {got}, graph has {expected} variables")]
    StateLength { expected: usize, got: usize },
    #[error("invalid spin value {0}; spins must be -1 or +1")]
    InvalidSpin(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Spin,
    Continuous,
}

impl Family {
    pub fn factor_types(self) -> &'static [FactorType] {
        use FactorType::*;
        match self {
            Family::Gaussian => &[GaussianSingleton, GaussianPair],
            Family::Spin => &[SpinSingleton, SpinTriple],
            Family::Continuous => &[ContSingleton, ContPair, ContTriple],
        }
    }

    pub fn singleton_type(self) -> FactorType {
        self.factor_types()[0]
    }

    /// Width of the per-variable inference target.
    pub fn target_width(self) -> usize {
        match self {
            Family::Gaussian | Family::Spin => 1,
            Family::Continuous => 4,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Spin => "spin",
            Family::Continuous => "continuous",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorType {
    GaussianSingleton,
    GaussianPair,
    SpinSingleton,
    SpinTriple,
    ContSingleton,
    ContPair,
    ContTriple,
}

impl FactorType {
    pub const ALL: [FactorType; 7] = [
        FactorType::GaussianSingleton,
        FactorType::GaussianPair,
        FactorType::SpinSingleton,
        FactorType::SpinTriple,
        FactorType::ContSingleton,
        FactorType::ContPair,
        FactorType::ContTriple,
    ];

    pub fn arity(self) -> usize {
        use FactorType::*;
        match self {
            GaussianSingleton | SpinSingleton | ContSingleton => 1,
            GaussianPair | ContPair => 2,
            SpinTriple | ContTriple => 3,
        }
    }

    pub fn eta_len(self) -> usize {
        use FactorType::*;
        match self {
            GaussianSingleton | GaussianPair | SpinTriple | ContPair | ContTriple => 1,
            SpinSingleton => 3,
            ContSingleton => 4,
        }
    }

    pub fn family(self) -> Family {
        use FactorType::*;
        match self {
            GaussianSingleton | GaussianPair => Family::Gaussian,
            SpinSingleton | SpinTriple => Family::Spin,
            ContSingleton | ContPair | ContTriple => Family::Continuous,
        }
    }

    pub fn is_singleton(self) -> bool {
        self.arity() == 1
    }

    pub fn name(self) -> &'static str {
        use FactorType::*;
        match self {
            GaussianSingleton => "gaussian_singleton",
            GaussianPair => "gaussian_pair",
            SpinSingleton => "spin_singleton",
            SpinTriple => "spin_triple",
            ContSingleton => "cont_singleton",
            ContPair => "cont_pair",
            ContTriple => "cont_triple",
        }
    }
}

impl fmt::Display for FactorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    #[serde(rename = "type")]
    pub ftype: FactorType,
    /// Sorted, distinct variable indices.
    pub members: Vec<usize>,
    /// Natural parameters; layout depends on `ftype`.
    pub eta: Vec<f64>,
}

impl Factor {
    pub fn new(ftype: FactorType, members: Vec<usize>, eta: Vec<f64>) -> Self {
        Self { ftype, members, eta }
    }

    /// Contribution of this factor to the log of the unnormalised joint.
    pub fn log_term(&self, x: &[f64], beta: f64) -> f64 {
        use FactorType::*;
        let m = &self.members;
        let e = &self.eta;
        match self.ftype {
            GaussianSingleton => -0.5 * e[0] * x[m[0]] * x[m[0]],
            GaussianPair => -e[0] * x[m[0]] * x[m[1]],
            SpinSingleton => {
                let s = x[m[0]];
                beta * (e[0] * s + e[1] * s * s + e[2] * s * s * s)
            }
            SpinTriple => beta * e[0] * x[m[0]] * x[m[1]] * x[m[2]],
            ContSingleton => {
                let v = x[m[0]];
                let v2 = v * v;
                -beta * (e[0] * v + e[1] * v2 + e[2] * v2 * v + e[3] * v2 * v2)
            }
            ContPair => -beta * e[0] * x[m[0]] * x[m[1]],
            ContTriple => -beta * e[0] * x[m[0]] * x[m[1]] * x[m[2]],
        }
    }

    fn add_grad(&self, x: &[f64], beta: f64, grad: &mut [f64]) {
        use FactorType::*;
        let m = &self.members;
        let e = &self.eta;
        match self.ftype {
            GaussianSingleton => grad[m[0]] -= e[0] * x[m[0]],
            GaussianPair => {
                grad[m[0]] -= e[0] * x[m[1]];
                grad[m[1]] -= e[0] * x[m[0]];
            }
            ContSingleton => {
                let v = x[m[0]];
                grad[m[0]] -= beta * (e[0] + 2.0 * e[1] * v + 3.0 * e[2] * v * v + 4.0 * e[3] * v * v * v);
            }
            ContPair => {
                grad[m[0]] -= beta * e[0] * x[m[1]];
                grad[m[1]] -= beta * e[0] * x[m[0]];
            }
            ContTriple => {
                let (a, b, c) = (x[m[0]], x[m[1]], x[m[2]]);
                grad[m[0]] -= beta * e[0] * b * c;
                grad[m[1]] -= beta * e[0] * a * c;
                grad[m[2]] -= beta * e[0] * a * b;
            }
            SpinSingleton | SpinTriple => unreachable!("spin factors have no gradient"),
        }
    }
}

/// Immutable factor graph. Factors are kept sorted by type, then members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct FactorGraph {
    family: Family,
    beta: f64,
    n_variables: usize,
    factors: Vec<Factor>,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    family: Family,
    beta: f64,
    n_variables: usize,
    factors: Vec<Factor>,
}

impl TryFrom<RawGraph> for FactorGraph {
    type Error = GraphError;
    fn try_from(raw: RawGraph) -> Result<Self, GraphError> {
        FactorGraph::new(raw.family, raw.beta, raw.n_variables, raw.factors)
    }
}

impl From<FactorGraph> for RawGraph {
    fn from(g: FactorGraph) -> Self {
        RawGraph { family: g.family, beta: g.beta, n_variables: g.n_variables, factors: g.factors }
    }
}

impl FactorGraph {
    /// Validates and canonicalises a factor list.
    pub fn new(family: Family, beta: f64, n_variables: usize, factors: Vec<Factor>) -> Result<Self, GraphError> {
        if !beta.is_finite() {
            return Err(GraphError::InvalidParameter(format!("beta {beta}")));
        }
        let mut canon = Vec::with_capacity(factors.len());
        for mut f in factors {
            if f.ftype.family() != family {
                return Err(GraphError::FamilyMismatch { ftype: f.ftype, family });
            }
            if f.members.len() != f.ftype.arity() {
                return Err(GraphError::Arity { ftype: f.ftype, expected: f.ftype.arity(), got: f.members.len() });
            }
            if f.eta.len() != f.ftype.eta_len() {
                return Err(GraphError::EtaLength { ftype: f.ftype, expected: f.ftype.eta_len(), got: f.eta.len() });
            }
            if let Some(&index) = f.members.iter().find(|&&i| i >= n_variables) {
                return Err(GraphError::OutOfRange { index, n: n_variables });
            }
            if f.eta.iter().any(|v| !v.is_finite()) {
                return Err(GraphError::InvalidParameter(format!("non-finite eta in {}", f.ftype)));
            }
            f.members.sort_unstable();
            if let Some(w) = f.members.windows(2).find(|w| w[0] == w[1]) {
                return Err(GraphError::RepeatedMember { ftype: f.ftype, index: w[0] });
            }
            canon.push(f);
        }
        canon.sort_by(|a, b| (a.ftype, &a.members).cmp(&(b.ftype, &b.members)));
        if let Some(w) = canon.windows(2).find(|w| w[0].ftype == w[1].ftype && w[0].members == w[1].members) {
            return Err(GraphError::DuplicateFactor { ftype: w[0].ftype, members: w[0].members.clone() });
        }
        Ok(Self { family, beta, n_variables, factors: canon })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_variables(&self) -> usize {
        self.n_variables
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn count_of(&self, ftype: FactorType) -> usize {
        self.factors.iter().filter(|f| f.ftype == ftype).count()
    }

    /// Factor indices incident to each variable.
    pub fn variable_factors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_variables];
        for (fi, f) in self.factors.iter().enumerate() {
            for &v in &f.members {
                out[v].push(fi);
            }
        }
        out
    }

    fn check_state(&self, x: &[f64]) -> Result<(), GraphError> {
        if x.len() != self.n_variables {
            return Err(GraphError::StateLength { expected: self.n_variables, got: x.len() });
        }
        if self.family == Family::Spin {
            if let Some(&bad) = x.iter().find(|&&s| s != 1.0 && s != -1.0) {
                return Err(GraphError::InvalidSpin(bad));
            }
        }
        Ok(())
    }

    /// Unnormalised log joint density (or mass) at `x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, GraphError> {
        self.check_state(x)?;
        Ok(self.factors.iter().map(|f| f.log_term(x, self.beta)).sum())
    }

    /// Analytic gradient of [`Self::log_density`]; continuous families only.
    pub fn grad_log_density(&self, x: &[f64]) -> Result<Vec<f64>, GraphError> {
        let mut grad = vec![0.0; self.n_variables];
        self.grad_log_density_into(x, &mut grad)?;
        Ok(grad)
    }

    pub fn grad_log_density_into(&self, x: &[f64], grad: &mut [f64]) -> Result<(), GraphError> {
        if self.family == Family::Spin {
            return Err(GraphError::WrongFamily { expected: "gaussian or continuous", got: self.family });
        }
        self.check_state(x)?;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for f in &self.factors {
            f.add_grad(x, self.beta, grad);
        }
        Ok(())
    }

    /// Copy keeping only single-variable factors.
    pub fn singleton_projection(&self) -> FactorGraph {
        FactorGraph {
            family: self.family,
            beta: self.beta,
            n_variables: self.n_variables,
            factors: self.factors.iter().filter(|f| f.ftype.is_singleton()).cloned().collect(),
        }
    }

    /// Relabels variable `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<FactorGraph, GraphError> {
        if perm.len() != self.n_variables {
            return Err(GraphError::StateLength { expected: self.n_variables, got: perm.len() });
        }
        let factors = self
            .factors
            .iter()
            .map(|f| Factor::new(f.ftype, f.members.iter().map(|&m| perm[m]).collect(), f.eta.clone()))
            .collect();
        FactorGraph::new(self.family, self.beta, self.n_variables, factors)
    }

    /// Reassembles the precision matrix of a Gaussian graph.
    pub fn precision_matrix(&self) -> Result<DMatrix<f64>, GraphError> {
        if self.family != Family::Gaussian {
            return Err(GraphError::WrongFamily { expected: "gaussian", got: self.family });
        }
        let n = self.n_variables;
        let mut j = DMatrix::zeros(n, n);
        for f in &self.factors {
            match f.ftype {
                FactorType::GaussianSingleton => j[(f.members[0], f.members[0])] = f.eta[0],
                FactorType::GaussianPair => {
                    j[(f.members[0], f.members[1])] = f.eta[0];
                    j[(f.members[1], f.members[0])] = f.eta[0];
                }
                _ => unreachable!(),
            }
        }
        Ok(j)
    }

    /// Distinct variable pairs that share at least one multi-variable factor.
    pub fn interaction_pairs(&self) -> BTreeSet<(usize, usize)> {
        let mut pairs = BTreeSet::new();
        for f in self.factors.iter().filter(|f| !f.ftype.is_singleton()) {
            for a in 0..f.members.len() {
                for b in a + 1..f.members.len() {
                    pairs.insert((f.members[a], f.members[b]));
                }
            }
        }
        pairs
    }
}

/// Gaussian graph from a symmetric positive definite precision matrix.
pub fn build_ggm(precision: &DMatrix<f64>) -> Result<FactorGraph, GraphError> {
    let n = precision.nrows();
    if precision.ncols() != n {
        return Err(GraphError::InvalidParameter(format!("{}x{} precision", n, precision.ncols())));
    }
    let scale = precision.amax().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (precision[(i, j)] - precision[(j, i)]).abs() > 1e-12 * scale {
                return Err(GraphError::NotSymmetric { i, j });
            }
        }
    }
    if precision.clone().cholesky().is_none() {
        return Err(GraphError::NotPositiveDefinite);
    }
    let mut factors = Vec::new();
    for i in 0..n {
        factors.push(Factor::new(FactorType::GaussianSingleton, vec![i], vec![precision[(i, i)]]));
        for j in i + 1..n {
            if precision[(i, j)] != 0.0 {
                factors.push(Factor::new(FactorType::GaussianPair, vec![i, j], vec![precision[(i, j)]]));
            }
        }
    }
    FactorGraph::new(Family::Gaussian, 1.0, n, factors)
}

/// Binary spin glass with singleton biases `b[i] = (b_i1, b_i2, b_i3)` and
/// third-order couplings `(i, j, k, J)`.
pub fn build_spin(b: &[[f64; 3]], triples: &[(usize, usize, usize, f64)], beta: f64) -> Result<FactorGraph, GraphError> {
    let mut factors: Vec<Factor> =
        b.iter().enumerate().map(|(i, bi)| Factor::new(FactorType::SpinSingleton, vec![i], bi.to_vec())).collect();
    factors.extend(triples.iter().map(|&(i, j, k, c)| Factor::new(FactorType::SpinTriple, vec![i, j, k], vec![c])));
    FactorGraph::new(Family::Spin, beta, b.len(), factors)
}

/// Continuous third-order model with quartic base measure strength `alpha`.
pub fn build_continuous(
    b: &[[f64; 3]],
    pairs: &[(usize, usize, f64)],
    triples: &[(usize, usize, usize, f64)],
    alpha: f64,
    beta: f64,
) -> Result<FactorGraph, GraphError> {
    if !(alpha > 0.0) {
        return Err(GraphError::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    if !(beta > 0.0) {
        return Err(GraphError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let mut factors: Vec<Factor> = b
        .iter()
        .enumerate()
        .map(|(i, bi)| Factor::new(FactorType::ContSingleton, vec![i], vec![bi[0], bi[1], bi[2], alpha]))
        .collect();
    factors.extend(pairs.iter().map(|&(i, j, k)| Factor::new(FactorType::ContPair, vec![i, j], vec![k])));
    factors.extend(triples.iter().map(|&(i, j, k, c)| Factor::new(FactorType::ContTriple, vec![i, j, k], vec![c])));
    FactorGraph::new(Family::Continuous, beta, b.len(), factors)
}
