//! Structural statistics on the variable-variable graph and binned
//! bootstrap summaries of per-graph errors.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::factor_graph::FactorGraph;

/// Undirected simple graph stored as sorted adjacency lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimpleGraph {
    adj: Vec<Vec<usize>>,
}

impl SimpleGraph {
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adj = vec![Vec::new(); n];
        for (u, v) in edges {
            if u != v {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        Self { adj }
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.adj[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.adj[u].binary_search(&v).is_ok()
    }

    fn bfs(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n()];
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let d = dist[u].unwrap();
            for &v in &self.adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(d + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Connected components, each sorted, ordered by smallest member.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.n()];
        let mut out = Vec::new();
        for s in 0..self.n() {
            if seen[s] {
                continue;
            }
            let mut comp: Vec<usize> =
                self.bfs(s).iter().enumerate().filter(|(_, d)| d.is_some()).map(|(i, _)| i).collect();
            comp.iter().for_each(|&i| seen[i] = true);
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }
}

/// Variables are adjacent iff they share a multi-variable factor.
pub fn variable_adjacency(g: &FactorGraph) -> SimpleGraph {
    SimpleGraph::from_edges(g.n_variables(), g.interaction_pairs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathLength {
    pub aspl: f64,
    /// Set when the graph has more than one component; `aspl` then refers
    /// to the largest one.
    pub disconnected: bool,
}

/// Mean BFS hop distance over unordered node pairs of the largest component.
pub fn avg_shortest_path(graph: &SimpleGraph) -> PathLength {
    let comps = graph.components();
    let disconnected = comps.len() > 1;
    let Some(largest) = comps.iter().max_by(|a, b| a.len().cmp(&b.len()).then(b[0].cmp(&a[0]))) else {
        return PathLength { aspl: 0.0, disconnected };
    };
    if largest.len() < 2 {
        return PathLength { aspl: 0.0, disconnected };
    }
    let mut total = 0usize;
    for &s in largest {
        let dist = graph.bfs(s);
        total += largest.iter().filter(|&&t| t > s).map(|&t| dist[t].unwrap()).sum::<usize>();
    }
    let pairs = largest.len() * (largest.len() - 1) / 2;
    PathLength { aspl: total as f64 / pairs as f64, disconnected }
}

/// Mean local clustering coefficient; nodes of degree < 2 contribute 0.
pub fn clustering_coefficient(graph: &SimpleGraph) -> f64 {
    let n = graph.n();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for u in 0..n {
        let nb = graph.neighbors(u);
        let d = nb.len();
        if d < 2 {
            continue;
        }
        let mut links = 0usize;
        for (a, &x) in nb.iter().enumerate() {
            links += nb[a + 1..].iter().filter(|&&y| graph.has_edge(x, y)).count();
        }
        total += 2.0 * links as f64 / (d * (d - 1)) as f64;
    }
    total / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub aspl: f64,
    pub cc: f64,
    pub disconnected: bool,
}

pub fn graph_metrics(g: &FactorGraph) -> MetricRecord {
    let adj = variable_adjacency(g);
    let path = avg_shortest_path(&adj);
    MetricRecord { aspl: path.aspl, cc: clustering_coefficient(&adj), disconnected: path.disconnected }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub mean: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub count: usize,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap confidence interval of the mean.
pub fn bootstrap_mean_ci<R: Rng + ?Sized>(values: &[f64], n_resamples: usize, ci: f64, rng: &mut R) -> (f64, f64) {
    if values.is_empty() || n_resamples == 0 {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len();
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - ci) / 2.0;
    (quantile_sorted(&means, tail), quantile_sorted(&means, 1.0 - tail))
}

/// Groups `(metric, error)` records into `n_bins` equal-width bins over the
/// observed metric range and bootstraps each bin's mean error. Empty bins
/// are omitted.
pub fn bin_and_bootstrap<R: Rng + ?Sized>(
    records: &[(f64, f64)],
    n_bins: usize,
    n_resamples: usize,
    ci: f64,
    rng: &mut R,
) -> Vec<BinSummary> {
    let records: Vec<(f64, f64)> = records.iter().copied().filter(|(m, e)| m.is_finite() && e.is_finite()).collect();
    if records.is_empty() || n_bins == 0 {
        return Vec::new();
    }
    let lo = records.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / n_bins as f64;
    let mut bins: Vec<Vec<f64>> = vec![Vec::new(); n_bins];
    for &(m, e) in &records {
        let idx = if width > 0.0 { (((m - lo) / width) as usize).min(n_bins - 1) } else { 0 };
        bins[idx].push(e);
    }
    let mut out = Vec::new();
    for (b, errs) in bins.iter().enumerate() {
        if errs.is_empty() {
            continue;
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let (ci_lo, ci_hi) = bootstrap_mean_ci(errs, n_resamples, ci, rng);
        let bin_lo = lo + width * b as f64;
        let bin_hi = if b + 1 == n_bins { hi } else { lo + width * (b + 1) as f64 };
        out.push(BinSummary { bin_lo, bin_hi, mean, ci_lo, ci_hi, count: errs.len() });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn complete(n: usize) -> SimpleGraph {
        SimpleGraph::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
    }

    fn cycle(n: usize) -> SimpleGraph {
        SimpleGraph::from_edges(n, (0..n).map(|i| (i, (i + 1) % n)))
    }

    #[test]
    fn hand_computed_path_lengths() {
        assert_eq!(avg_shortest_path(&complete(10)).aspl, 1.0);
        assert_eq!(avg_shortest_path(&cycle(5)).aspl, 1.5);
        let path = SimpleGraph::from_edges(3, [(0, 1), (1, 2)]);
        assert!((avg_shortest_path(&path).aspl - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disconnected_uses_largest_component() {
        let g = SimpleGraph::from_edges(5, [(0, 1), (2, 3), (3, 4)]);
        let r = avg_shortest_path(&g);
        assert!(r.disconnected);
        assert!((r.aspl - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_clustering() {
        assert_eq!(clustering_coefficient(&complete(10)), 1.0);
        assert_eq!(clustering_coefficient(&cycle(6)), 0.0);
        let g = SimpleGraph::from_edges(4, [(0, 1), (1, 2), (0, 2), (2, 3)]);
        assert!((clustering_coefficient(&g) - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn constant_errors_have_zero_width_ci() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs: Vec<(f64, f64)> = (0..50).map(|i| (i as f64, 0.25)).collect();
        let bins = bin_and_bootstrap(&recs, 10, 100, 0.95, &mut rng);
        assert_eq!(bins.len(), 10);
        for b in bins {
            assert_eq!((b.mean, b.ci_lo, b.ci_hi), (0.25, 0.25, 0.25));
        }
    }

    #[test]
    fn empty_bins_are_absent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let recs = [(0.0, 1.0), (0.01, 2.0), (1.0, 3.0)];
        let bins = bin_and_bootstrap(&recs, 10, 100, 0.95, &mut rng);
        assert_eq!(bins.len(), 2);
        assert_eq!((bins[0].count, bins[0].mean), (2, 1.5));
        assert_eq!((bins[1].count, bins[1].bin_hi), (1, 1.0));
        assert!(bin_and_bootstrap(&[], 10, 100, 0.95, &mut rng).is_empty());
    }
}
