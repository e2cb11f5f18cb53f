//! Loopy belief propagation baselines with a flooding schedule.
//!
//! Gaussian BP runs in information form on zero-mean models, so each message
//! is a single precision contribution. Discrete BP passes normalised
//! probability pairs over `s ∈ {-1, +1}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_graph::{Family, FactorGraph, FactorType};

#[derive(Debug, Error, PartialEq)]
pub enum BpError {
    #[error("belief propagation needs a {expected} graph, got {got}")]
    WrongFamily { expected: Family, got: Family },
    #[error("damping must lie in [0, 1), got {0}")]
    InvalidDamping(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BpOptions {
    pub tol: f64,
    pub max_cycles: usize,
    pub damping: f64,
}

impl Default for BpOptions {
    fn default() -> Self {
        Self { tol: 1e-5, max_cycles: 1000, damping: 0.0 }
    }
}

impl BpOptions {
    fn validate(&self) -> Result<(), BpError> {
        if !(0.0..1.0).contains(&self.damping) {
            return Err(BpError::InvalidDamping(self.damping));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub cycles_run: usize,
    pub final_delta: f64,
    /// Non-finite messages or a non-positive belief precision.
    pub divergent: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BpResult {
    pub beliefs: Vec<f64>,
    pub report: ConvergenceReport,
}

/// Edge list between interaction factors and their member variables.
struct Edges {
    /// `(factor position, variable)` per edge, grouped by factor.
    ends: Vec<(usize, usize)>,
    /// Edges incident to each variable.
    by_var: Vec<Vec<usize>>,
    /// Edges of each interaction factor.
    by_factor: Vec<Vec<usize>>,
}

impl Edges {
    fn new(g: &FactorGraph) -> (Self, Vec<usize>) {
        let interactions: Vec<usize> =
            g.factors().iter().enumerate().filter(|(_, f)| !f.ftype.is_singleton()).map(|(i, _)| i).collect();
        let mut ends = Vec::new();
        let mut by_var = vec![Vec::new(); g.n_variables()];
        let mut by_factor = Vec::with_capacity(interactions.len());
        for (pos, &fi) in interactions.iter().enumerate() {
            let mut mine = Vec::new();
            for &v in &g.factors()[fi].members {
                by_var[v].push(ends.len());
                mine.push(ends.len());
                ends.push((pos, v));
            }
            by_factor.push(mine);
        }
        (Self { ends, by_var, by_factor }, interactions)
    }
}

/// Gaussian BP state; exposed so a converged state can be probed with a
/// further undamped update.
pub struct GaussianBp<'g> {
    g: &'g FactorGraph,
    edges: Edges,
    coupling: Vec<f64>,
    diag: Vec<f64>,
    /// Factor-to-variable precision contributions, one per edge.
    msgs: Vec<f64>,
    beliefs: Vec<f64>,
}

impl<'g> GaussianBp<'g> {
    pub fn new(g: &'g FactorGraph) -> Result<Self, BpError> {
        if g.family() != Family::Gaussian {
            return Err(BpError::WrongFamily { expected: Family::Gaussian, got: g.family() });
        }
        let (edges, interactions) = Edges::new(g);
        let coupling = interactions.iter().map(|&fi| g.factors()[fi].eta[0]).collect();
        let mut diag = vec![0.0; g.n_variables()];
        for f in g.factors().iter().filter(|f| f.ftype == FactorType::GaussianSingleton) {
            diag[f.members[0]] += f.eta[0];
        }
        let msgs = vec![0.0; edges.ends.len()];
        let beliefs = diag.clone();
        Ok(Self { g, edges, coupling, diag, msgs, beliefs })
    }

    fn cavity(&self, edge: usize) -> f64 {
        let v = self.edges.ends[edge].1;
        let mut p = self.diag[v];
        for &e in &self.edges.by_var[v] {
            if e != edge {
                p += self.msgs[e];
            }
        }
        p
    }

    /// One flooding cycle; returns the max absolute change in marginal
    /// precision.
    pub fn step(&mut self, damping: f64) -> f64 {
        let mut next = vec![0.0; self.msgs.len()];
        for (pos, edges) in self.edges.by_factor.iter().enumerate() {
            let (a, b) = (edges[0], edges[1]);
            let j = self.coupling[pos];
            next[a] = -j * j / self.cavity(b);
            next[b] = -j * j / self.cavity(a);
        }
        for (m, n) in self.msgs.iter_mut().zip(next) {
            *m = damping * *m + (1.0 - damping) * n;
        }
        let mut delta: f64 = 0.0;
        for v in 0..self.g.n_variables() {
            let b = self.diag[v] + self.edges.by_var[v].iter().map(|&e| self.msgs[e]).sum::<f64>();
            let d = (b - self.beliefs[v]).abs();
            delta = if d.is_nan() { f64::INFINITY } else { delta.max(d) };
            self.beliefs[v] = b;
        }
        delta
    }

    pub fn beliefs(&self) -> &[f64] {
        &self.beliefs
    }
}

/// Marginal precisions by Gaussian BP.
pub fn gaussian_bp(g: &FactorGraph, opts: BpOptions) -> Result<BpResult, BpError> {
    opts.validate()?;
    let mut bp = GaussianBp::new(g)?;
    let mut report = ConvergenceReport { converged: false, cycles_run: 0, final_delta: f64::INFINITY, divergent: false };
    for cycle in 1..=opts.max_cycles {
        let delta = bp.step(opts.damping);
        report.cycles_run = cycle;
        report.final_delta = delta;
        if !delta.is_finite() || bp.beliefs.iter().any(|b| !b.is_finite()) {
            report.divergent = true;
            break;
        }
        if delta <= opts.tol {
            report.converged = true;
            break;
        }
    }
    if bp.beliefs.iter().any(|&b| !(b > 0.0)) {
        report.divergent = true;
        report.converged = false;
    }
    Ok(BpResult { beliefs: bp.beliefs, report })
}

/// Normalised pair `[p(-1), p(+1)]` from unnormalised log weights.
fn normalise_log(lm: f64, lp: f64) -> [f64; 2] {
    let m = lm.max(lp);
    let (a, b) = ((lm - m).exp(), (lp - m).exp());
    [a / (a + b), b / (a + b)]
}

fn normalise(p: [f64; 2]) -> [f64; 2] {
    let s = p[0] + p[1];
    [p[0] / s, p[1] / s]
}

/// Sum-product state for spin graphs.
pub struct DiscreteBp<'g> {
    g: &'g FactorGraph,
    edges: Edges,
    interactions: Vec<usize>,
    local: Vec<[f64; 2]>,
    /// Factor-to-variable messages, one per edge.
    msgs: Vec<[f64; 2]>,
    beliefs: Vec<f64>,
}

impl<'g> DiscreteBp<'g> {
    pub fn new(g: &'g FactorGraph) -> Result<Self, BpError> {
        if g.family() != Family::Spin {
            return Err(BpError::WrongFamily { expected: Family::Spin, got: g.family() });
        }
        let (edges, interactions) = Edges::new(g);
        let mut log_local = vec![[0.0; 2]; g.n_variables()];
        for f in g.factors().iter().filter(|f| f.ftype.is_singleton()) {
            let v = f.members[0];
            let mut s = vec![0.0; g.n_variables()];
            for (slot, spin) in [-1.0, 1.0].into_iter().enumerate() {
                s[v] = spin;
                log_local[v][slot] += f.log_term(&s, g.beta());
            }
        }
        let local: Vec<[f64; 2]> = log_local.iter().map(|l| normalise_log(l[0], l[1])).collect();
        let beliefs = local.iter().map(|p| p[1]).collect();
        let msgs = vec![[0.5, 0.5]; edges.ends.len()];
        Ok(Self { g, edges, interactions, local, msgs, beliefs })
    }

    fn var_to_factor(&self, edge: usize) -> [f64; 2] {
        let v = self.edges.ends[edge].1;
        let mut p = self.local[v];
        for &e in &self.edges.by_var[v] {
            if e != edge {
                p = normalise([p[0] * self.msgs[e][0], p[1] * self.msgs[e][1]]);
            }
        }
        p
    }

    /// One flooding cycle; returns the max absolute change in `p(+1)`.
    pub fn step(&mut self, damping: f64) -> f64 {
        let incoming: Vec<[f64; 2]> = (0..self.msgs.len()).map(|e| self.var_to_factor(e)).collect();
        let mut next = vec![[0.0; 2]; self.msgs.len()];
        for (pos, edges) in self.edges.by_factor.iter().enumerate() {
            let f = &self.g.factors()[self.interactions[pos]];
            let arity = edges.len();
            let mut s = vec![0.0; self.g.n_variables()];
            // Shift by the largest possible exponent to keep weights bounded.
            let shift = self.g.beta().abs() * f.eta.iter().map(|e| e.abs()).sum::<f64>();
            for (slot, &target) in edges.iter().enumerate() {
                let mut out = [0.0; 2];
                for config in 0..1usize << arity {
                    let mut w = 1.0;
                    for (k, &e) in edges.iter().enumerate() {
                        let bit = config >> k & 1;
                        s[self.edges.ends[e].1] = if bit == 1 { 1.0 } else { -1.0 };
                        if k != slot {
                            w *= incoming[e][bit];
                        }
                    }
                    out[config >> slot & 1] += w * (f.log_term(&s, self.g.beta()) - shift).exp();
                }
                next[target] = normalise(out);
            }
        }
        for (m, n) in self.msgs.iter_mut().zip(next) {
            *m = normalise([damping * m[0] + (1.0 - damping) * n[0], damping * m[1] + (1.0 - damping) * n[1]]);
        }
        let mut delta: f64 = 0.0;
        for v in 0..self.g.n_variables() {
            let mut p = self.local[v];
            for &e in &self.edges.by_var[v] {
                p = normalise([p[0] * self.msgs[e][0], p[1] * self.msgs[e][1]]);
            }
            let d = (p[1] - self.beliefs[v]).abs();
            delta = if d.is_nan() { f64::INFINITY } else { delta.max(d) };
            self.beliefs[v] = p[1];
        }
        delta
    }

    pub fn beliefs(&self) -> &[f64] {
        &self.beliefs
    }
}

/// Per-variable `p(s = +1)` by sum-product BP; on non-convergence the last
/// cycle's beliefs are returned.
pub fn discrete_bp(g: &FactorGraph, opts: BpOptions) -> Result<BpResult, BpError> {
    opts.validate()?;
    let mut bp = DiscreteBp::new(g)?;
    let mut report = ConvergenceReport { converged: false, cycles_run: 0, final_delta: f64::INFINITY, divergent: false };
    for cycle in 1..=opts.max_cycles {
        let delta = bp.step(opts.damping);
        report.cycles_run = cycle;
        report.final_delta = delta;
        if !delta.is_finite() {
            report.divergent = true;
            break;
        }
        if delta <= opts.tol {
            report.converged = true;
            break;
        }
    }
    Ok(BpResult { beliefs: bp.beliefs, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_oracles::{enumerate_binary, ggm_marginals};
    use crate::factor_graph::{build_ggm, build_spin};
    use nalgebra::DMatrix;

    #[test]
    fn diagonal_gaussian_converges_immediately() {
        let g = build_ggm(&DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0])).unwrap();
        let r = gaussian_bp(&g, BpOptions::default()).unwrap();
        assert_eq!(r.beliefs, vec![2.0, 3.0]);
        assert!(r.report.converged);
        assert_eq!(r.report.cycles_run, 1);
    }

    #[test]
    fn chain_matches_inversion() {
        let j = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let r = gaussian_bp(&build_ggm(&j).unwrap(), BpOptions::default()).unwrap();
        let exact = ggm_marginals(&j).unwrap();
        for (b, v) in r.beliefs.iter().zip(&exact.variances) {
            assert!((1.0 / b - v).abs() < 1e-12);
        }
        assert!(r.report.converged && r.report.cycles_run <= 3 + 1);
    }

    #[test]
    fn uncoupled_spins_are_closed_form() {
        let b = [[1.0, 0.5, -0.2], [-0.3, 0.0, 0.7], [0.4, 2.0, 0.1]];
        let g = build_spin(&b, &[(0, 1, 2, 0.0)], 0.5).unwrap();
        let r = discrete_bp(&g, BpOptions::default()).unwrap();
        assert!(r.report.converged);
        assert_eq!(r.report.cycles_run, 1);
        for (p, bi) in r.beliefs.iter().zip(&b) {
            let want = 1.0 / (1.0 + (-2.0 * 0.5 * (bi[0] + bi[2])).exp());
            assert!((p - want).abs() < 1e-14);
        }
    }

    #[test]
    fn single_triple_matches_enumeration() {
        let g = build_spin(&[[0.3, 0.1, -0.6], [1.2, 0.0, 0.4], [-0.9, 0.5, 0.2]], &[(0, 1, 2, 1.3)], 0.5).unwrap();
        let r = discrete_bp(&g, BpOptions::default()).unwrap();
        let exact = enumerate_binary(&g).unwrap();
        for (a, b) in r.beliefs.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn symmetric_spins_stay_at_half() {
        let g = build_spin(&[[0.0; 3]; 4], &[(0, 1, 2, 1.0), (1, 2, 3, -2.0), (0, 2, 3, 0.5)], 0.5).unwrap();
        let mut bp = DiscreteBp::new(&g).unwrap();
        for _ in 0..10 {
            bp.step(0.0);
            assert!(bp.beliefs().iter().all(|&p| (p - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_wrong_family_and_damping() {
        let g = build_spin(&[[0.0; 3]], &[], 0.5).unwrap();
        assert!(gaussian_bp(&g, BpOptions::default()).is_err());
        let opts = BpOptions { damping: 1.0, ..Default::default() };
        assert_eq!(discrete_bp(&g, opts), Err(BpError::InvalidDamping(1.0)));
    }
}
