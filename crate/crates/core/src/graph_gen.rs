//! Random structure and instance generators.
//!
//! Structures come from WS-flex small-world graphs, a three-variable-factor
//! variant of the same ring construction, or uniformly random labelled trees.
//! Gaussian instances get a precision matrix with a prescribed spectrum and
//! sparsity pattern, synthesised by Jacobi rotations.

use std::collections::{BTreeSet, HashSet};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_graph::{build_continuous, build_ggm, build_spin, FactorGraph, GraphError};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("infeasible structure: {0}")]
    Infeasible(String),
    #[error("precision synthesis did not converge after {restarts} restarts")]
    SynthesisFailed { restarts: usize },
    #[error("could not synthesise a precision matrix for any of {attempts} sampled structures")]
    StructureExhausted { attempts: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Undirected simple graph as a set of `(u, v)` pairs with `u < v`.
pub type EdgeSet = BTreeSet<(usize, usize)>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WsFlexParams {
    pub n: usize,
    pub k: f64,
    pub p: f64,
}

impl WsFlexParams {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.n < 3 || !(2.0..=(self.n - 1) as f64).contains(&self.k) {
            return Err(GenError::InvalidParams(format!(
                "WS-flex needs n >= 3 and 2 <= k <= n-1, got n={} k={}",
                self.n, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(GenError::InvalidParams(format!("rewiring probability {} outside [0, 1]", self.p)));
        }
        Ok(())
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// WS-flex random graph with `floor(n k / 2)` edges.
pub fn ws_flex<R: Rng + ?Sized>(params: WsFlexParams, rng: &mut R) -> Result<EdgeSet, GenError> {
    params.validate()?;
    let n = params.n;
    let n_edges = (n as f64 * params.k / 2.0).floor() as usize;
    let half = (params.k / 2.0).floor() as usize;

    let mut adj = vec![vec![false; n]; n];
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(n_edges);
    let add = |adj: &mut Vec<Vec<bool>>, order: &mut Vec<(usize, usize)>, u: usize, v: usize| {
        adj[u][v] = true;
        adj[v][u] = true;
        order.push(ordered(u, v));
    };
    for d in 1..=half {
        for u in 0..n {
            add(&mut adj, &mut order, u, (u + d) % n);
        }
    }

    // Leftover edges: visit nodes in random order, each linking to its
    // nearest ring neighbour it is not yet connected to.
    let mut remaining = n_edges - order.len();
    while remaining > 0 {
        let mut nodes: Vec<usize> = (0..n).collect();
        nodes.shuffle(rng);
        let before = remaining;
        for &u in &nodes {
            if remaining == 0 {
                break;
            }
            let target = (half + 1..n).find_map(|d| {
                [(u + d) % n, (u + n - d % n) % n].into_iter().find(|&v| v != u && !adj[u][v])
            });
            if let Some(v) = target {
                add(&mut adj, &mut order, u, v);
                remaining -= 1;
            }
        }
        if remaining == before {
            return Err(GenError::Infeasible(format!("cannot place {n_edges} edges on {n} nodes")));
        }
    }

    if params.p > 0.0 {
        for edge in order.iter_mut() {
            if rng.random::<f64>() >= params.p {
                continue;
            }
            let (u, v) = *edge;
            let free: Vec<usize> = (0..n).filter(|&w| w != u && !adj[u][w]).collect();
            if free.is_empty() {
                continue;
            }
            let w = free[rng.random_range(0..free.len())];
            adj[u][v] = false;
            adj[v][u] = false;
            adj[u][w] = true;
            adj[w][u] = true;
            *edge = ordered(u, w);
        }
    }
    Ok(order.into_iter().collect())
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn sorted3(a: usize, b: usize, c: usize) -> [usize; 3] {
    let mut t = [a, b, c];
    t.sort_unstable();
    t
}

/// Triples containing `center`, nearest ring neighbours first.
fn centered_candidates(n: usize, center: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for span in 2..n {
        for a in 1..span {
            let b = span - a;
            out.push(sorted3((center + n - a) % n, center, (center + b) % n));
        }
    }
    out
}

/// Ring-based generator of `floor(n k3 / 3)` distinct variable triples with
/// per-triple rewiring probability `p`.
pub fn ws_flex_3factor<R: Rng + ?Sized>(n: usize, k3: f64, p: f64, rng: &mut R) -> Result<Vec<[usize; 3]>, GenError> {
    if n < 3 {
        return Err(GenError::InvalidParams(format!("triples need n >= 3, got {n}")));
    }
    if !(k3 >= 0.0) || !(0.0..=1.0).contains(&p) {
        return Err(GenError::InvalidParams(format!("k3={k3} p={p}")));
    }
    let f = (n as f64 * k3 / 3.0).floor() as usize;
    if f > binomial(n, 3) {
        return Err(GenError::Infeasible(format!("{f} distinct triples requested on {n} variables")));
    }
    let candidates: Vec<Vec<[usize; 3]>> = (0..n).map(|c| centered_candidates(n, c)).collect();
    let mut cursor = vec![0usize; n];
    let mut used: HashSet<[usize; 3]> = HashSet::with_capacity(f);
    let mut triples: Vec<[usize; 3]> = Vec::with_capacity(f);

    let mut take = |center: usize, used: &mut HashSet<[usize; 3]>, triples: &mut Vec<[usize; 3]>| {
        let list = &candidates[center];
        while cursor[center] < list.len() {
            let t = list[cursor[center]];
            cursor[center] += 1;
            if used.insert(t) {
                triples.push(t);
                return true;
            }
        }
        false
    };
    let fallback = |used: &mut HashSet<[usize; 3]>, triples: &mut Vec<[usize; 3]>| {
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    if used.insert([a, b, c]) {
                        triples.push([a, b, c]);
                        return;
                    }
                }
            }
        }
    };

    for _rank in 0..f / n {
        for center in 0..n {
            if !take(center, &mut used, &mut triples) {
                fallback(&mut used, &mut triples);
            }
        }
    }
    for center in sample(rng, n, f % n).into_vec() {
        if !take(center, &mut used, &mut triples) {
            fallback(&mut used, &mut triples);
        }
    }

    if p > 0.0 {
        for slot in triples.iter_mut() {
            if rng.random::<f64>() >= p {
                continue;
            }
            for _ in 0..100 {
                let pick = sample(rng, n, 3).into_vec();
                let t = sorted3(pick[0], pick[1], pick[2]);
                if !used.contains(&t) {
                    used.remove(slot);
                    used.insert(t);
                    *slot = t;
                    break;
                }
            }
        }
    }
    Ok(triples)
}

/// Decodes a Prüfer sequence over `0..n` into the edges of a labelled tree.
pub fn prufer_decode(seq: &[usize], n: usize) -> Result<EdgeSet, GenError> {
    if n < 2 || seq.len() != n - 2 || seq.iter().any(|&x| x >= n) {
        return Err(GenError::InvalidParams(format!("Prüfer sequence {seq:?} for n={n}")));
    }
    let mut degree = vec![1usize; n];
    for &x in seq {
        degree[x] += 1;
    }
    let mut leaves: BTreeSet<usize> = (0..n).filter(|&i| degree[i] == 1).collect();
    let mut edges = EdgeSet::new();
    for &x in seq {
        let leaf = *leaves.iter().next().expect("a tree always has a leaf");
        leaves.remove(&leaf);
        edges.insert(ordered(leaf, x));
        degree[x] -= 1;
        if degree[x] == 1 {
            leaves.insert(x);
        }
    }
    let mut last = leaves.into_iter();
    let (a, b) = (last.next().unwrap(), last.next().unwrap());
    edges.insert(ordered(a, b));
    Ok(edges)
}

/// Uniformly random labelled tree on `n` nodes.
pub fn random_tree<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<EdgeSet, GenError> {
    match n {
        0 => Err(GenError::InvalidParams("tree needs at least one node".into())),
        1 => Ok(EdgeSet::new()),
        _ => {
            let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
            prufer_decode(&seq, n)
        }
    }
}

/// Symmetric boolean adjacency (diagonal always allowed).
#[derive(Clone, Debug, PartialEq)]
pub struct PrecisionSpec {
    pub allowed: Vec<Vec<bool>>,
    pub eigenvalues: Vec<f64>,
}

impl PrecisionSpec {
    pub fn from_edges(n: usize, edges: &EdgeSet, eigenvalues: Vec<f64>) -> Self {
        let mut allowed = vec![vec![false; n]; n];
        for (i, row) in allowed.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(u, v) in edges {
            allowed[u][v] = true;
            allowed[v][u] = true;
        }
        Self { allowed, eigenvalues }
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    fn validate(&self) -> Result<(), GenError> {
        let n = self.n();
        if n == 0 || self.allowed.len() != n || self.allowed.iter().any(|r| r.len() != n) {
            return Err(GenError::InvalidParams("structure and spectrum sizes differ".into()));
        }
        for i in 0..n {
            if !self.allowed[i][i] {
                return Err(GenError::InvalidParams(format!("diagonal entry {i} must be allowed")));
            }
            for j in 0..n {
                if self.allowed[i][j] != self.allowed[j][i] {
                    return Err(GenError::InvalidParams("structure must be symmetric".into()));
                }
            }
        }
        if self.eigenvalues.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(GenError::InvalidParams("eigenvalues must be positive and finite".into()));
        }
        Ok(())
    }

    fn forbidden_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| !self.allowed[i][j]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub tol: f64,
    pub max_rotations: usize,
    pub max_restarts: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_rotations: 20_000, max_restarts: 10 }
    }
}

#[derive(Clone, Debug)]
pub struct SynthResult {
    pub matrix: DMatrix<f64>,
    pub restarts: usize,
    pub rotations: usize,
}

/// Haar-distributed orthogonal matrix from the QR decomposition of a
/// Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Applies the similarity rotation in plane `(i, j)` that zeroes `a[(i, j)]`.
fn jacobi_annihilate(a: &mut DMatrix<f64>, i: usize, j: usize) {
    let n = a.nrows();
    let theta = 0.5 * (2.0 * a[(i, j)]).atan2(a[(j, j)] - a[(i, i)]);
    let (s, c) = theta.sin_cos();
    for k in 0..n {
        let (ai, aj) = (a[(i, k)], a[(j, k)]);
        a[(i, k)] = c * ai - s * aj;
        a[(j, k)] = s * ai + c * aj;
    }
    for k in 0..n {
        let (ai, aj) = (a[(k, i)], a[(k, j)]);
        a[(k, i)] = c * ai - s * aj;
        a[(k, j)] = s * ai + c * aj;
    }
    a[(i, j)] = 0.0;
    a[(j, i)] = 0.0;
}

/// Symmetric positive definite matrix with the given spectrum whose
/// forbidden off-diagonal entries are zero.
pub fn synth_precision<R: Rng + ?Sized>(
    spec: &PrecisionSpec,
    rng: &mut R,
    opts: SynthOptions,
) -> Result<SynthResult, GenError> {
    spec.validate()?;
    let n = spec.n();
    let forbidden = spec.forbidden_pairs();
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&spec.eigenvalues));
    let mut rotations = 0;
    for restart in 0..=opts.max_restarts {
        let q = random_orthogonal(n, rng);
        let mut a = &q * &diag * q.transpose();
        a = (&a + a.transpose()) * 0.5;
        let mut done = false;
        for _ in 0..=opts.max_rotations {
            let worst = forbidden
                .iter()
                .copied()
                .max_by(|&(i, j), &(k, l)| a[(i, j)].abs().total_cmp(&a[(k, l)].abs()));
            match worst {
                Some((i, j)) if a[(i, j)].abs() > opts.tol => {
                    jacobi_annihilate(&mut a, i, j);
                    rotations += 1;
                }
                _ => {
                    done = true;
                    break;
                }
            }
        }
        if done {
            for &(i, j) in &forbidden {
                a[(i, j)] = 0.0;
                a[(j, i)] = 0.0;
            }
            return Ok(SynthResult { matrix: a, restarts: restart, rotations });
        }
    }
    Err(GenError::SynthesisFailed { restarts: opts.max_restarts })
}

/// Structural parameters recorded alongside each generated instance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub shrink: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tree: Option<bool>,
    /// Structures discarded because precision synthesis failed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub resampled_structures: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub synth_restarts: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub graph: FactorGraph,
    pub params: GeneratorParams,
}

pub const EIGEN_RANGE: (f64, f64) = (0.1, 10.0);
pub const SPIN_BETA: f64 = 0.5;
pub const CONT_ALPHA: f64 = 1.0;
pub const CONT_BETA: f64 = 0.3;
const MAX_STRUCTURES: usize = 100;

fn ggm_from_structure<R: Rng + ?Sized>(
    n: usize,
    mut structure: impl FnMut(&mut R) -> Result<(EdgeSet, GeneratorParams), GenError>,
    rng: &mut R,
) -> Result<Instance, GenError> {
    for attempt in 0..MAX_STRUCTURES {
        let (edges, mut params) = structure(rng)?;
        let eigenvalues: Vec<f64> = (0..n).map(|_| rng.random_range(EIGEN_RANGE.0..=EIGEN_RANGE.1)).collect();
        let spec = PrecisionSpec::from_edges(n, &edges, eigenvalues);
        match synth_precision(&spec, rng, SynthOptions::default()) {
            Ok(res) => {
                params.resampled_structures = Some(attempt);
                params.synth_restarts = Some(res.restarts);
                return Ok(Instance { graph: build_ggm(&res.matrix)?, params });
            }
            Err(GenError::SynthesisFailed { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(GenError::StructureExhausted { attempts: MAX_STRUCTURES })
}

/// GGM on a WS-flex structure with `k ~ U[2, n-1]`, `p ~ U[0, 1]` and
/// eigenvalues uniform in [`EIGEN_RANGE`].
pub fn sample_ggm_instance<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Instance, GenError> {
    if n < 3 {
        return Err(GenError::InvalidParams(format!("WS-flex GGMs need n >= 3, got {n}")));
    }
    ggm_from_structure(
        n,
        |rng: &mut R| {
            let k = rng.random_range(2.0..=(n - 1) as f64);
            let p = rng.random_range(0.0..=1.0);
            let edges = ws_flex(WsFlexParams { n, k, p }, rng)?;
            Ok((edges, GeneratorParams { k: Some(k), p: Some(p), ..Default::default() }))
        },
        rng,
    )
}

/// GGM on a uniformly random labelled tree.
pub fn sample_ggm_tree_instance<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Instance, GenError> {
    ggm_from_structure(
        n,
        |rng: &mut R| Ok((random_tree(n, rng)?, GeneratorParams { tree: Some(true), ..Default::default() })),
        rng,
    )
}

/// Samples `k3` for a triple structure. Below five variables the usual range
/// is empty, so every possible triple is used instead.
fn sample_k3<R: Rng + ?Sized>(n: usize, rng: &mut R) -> f64 {
    let hi = ((n - 1) * (n - 2) / 6) as f64;
    if hi < 2.0 {
        3.0 * binomial(n, 3) as f64 / n as f64
    } else {
        rng.random_range(2.0..=hi)
    }
}

fn all_pairs(n: usize) -> EdgeSet {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

fn gaussian_triplet<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// Structure of a spin or continuous instance before parameters are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionStructure {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
    pub triples: Vec<[usize; 3]>,
    pub params: GeneratorParams,
}

pub fn sample_spin_structure<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<InteractionStructure, GenError> {
    if n == 0 {
        return Err(GenError::InvalidParams("spin instance needs n >= 1".into()));
    }
    let mut params = GeneratorParams::default();
    let triples = if n >= 3 {
        let k3 = sample_k3(n, rng);
        let p = rng.random_range(0.0..=1.0);
        params.k3 = Some(k3);
        params.p = Some(p);
        ws_flex_3factor(n, k3, p, rng)?
    } else {
        Vec::new()
    };
    Ok(InteractionStructure { n, pairs: Vec::new(), triples, params })
}

pub fn sample_continuous_structure<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<InteractionStructure, GenError> {
    if n == 0 {
        return Err(GenError::InvalidParams("continuous instance needs n >= 1".into()));
    }
    let mut params = GeneratorParams::default();
    let p = rng.random_range(0.0..=1.0);
    let pairs = if n >= 3 {
        let k2 = rng.random_range(2.0..=(n - 1) as f64);
        params.k2 = Some(k2);
        ws_flex(WsFlexParams { n, k: k2, p }, rng)?
    } else {
        all_pairs(n)
    };
    let triples = if n >= 3 {
        let k3 = sample_k3(n, rng);
        params.k3 = Some(k3);
        ws_flex_3factor(n, k3, p, rng)?
    } else {
        Vec::new()
    };
    params.p = Some(p);
    Ok(InteractionStructure { n, pairs: pairs.into_iter().collect(), triples, params })
}

/// Draws spin parameters on a fixed structure: `b, J ~ N(0, 1)`.
pub fn spin_parameters<R: Rng + ?Sized>(s: &InteractionStructure, rng: &mut R) -> Result<FactorGraph, GenError> {
    let b: Vec<[f64; 3]> = (0..s.n).map(|_| gaussian_triplet(rng)).collect();
    let triples: Vec<_> = s.triples.iter().map(|t| (t[0], t[1], t[2], rng.sample(StandardNormal))).collect();
    Ok(build_spin(&b, &triples, SPIN_BETA)?)
}

/// Draws continuous parameters on a fixed structure: `b, K, J ~ N(0, 1)`
/// with interactions divided by `shrink`.
pub fn continuous_parameters<R: Rng + ?Sized>(
    s: &InteractionStructure,
    shrink: f64,
    rng: &mut R,
) -> Result<FactorGraph, GenError> {
    if !(shrink > 0.0) {
        return Err(GenError::InvalidParams(format!("shrink must be positive, got {shrink}")));
    }
    let b: Vec<[f64; 3]> = (0..s.n).map(|_| gaussian_triplet(rng)).collect();
    let pairs: Vec<_> =
        s.pairs.iter().map(|&(i, j)| (i, j, rng.sample::<f64, _>(StandardNormal) / shrink)).collect();
    let triples: Vec<_> =
        s.triples.iter().map(|t| (t[0], t[1], t[2], rng.sample::<f64, _>(StandardNormal) / shrink)).collect();
    Ok(build_continuous(&b, &pairs, &triples, CONT_ALPHA, CONT_BETA)?)
}

pub fn sample_spin_instance<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Instance, GenError> {
    let s = sample_spin_structure(n, rng)?;
    let graph = spin_parameters(&s, rng)?;
    Ok(Instance { graph, params: s.params })
}

pub fn sample_continuous_instance<R: Rng + ?Sized>(n: usize, rng: &mut R, shrink: f64) -> Result<Instance, GenError> {
    let s = sample_continuous_structure(n, rng)?;
    let graph = continuous_parameters(&s, shrink, rng)?;
    let mut params = s.params;
    params.shrink = Some(shrink);
    Ok(Instance { graph, params })
}
