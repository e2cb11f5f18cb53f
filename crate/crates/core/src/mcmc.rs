//! Hamiltonian Monte Carlo ground truth for continuous models, with split
//! Gelman-Rubin diagnostics and central-moment extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factor_graph::{Family, FactorGraph, GraphError};
use crate::graph_gen::{continuous_parameters, GenError, InteractionStructure};

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("HMC needs a gaussian or continuous graph, got {0}")]
    WrongFamily(Family),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("no parameter draw passed the PSRF gate in {attempts} attempts")]
    GateFailed { attempts: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gen(#[from] GenError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub n_chains: usize,
    pub warmup: usize,
    pub samples: usize,
    /// Initial step size; adapted during warmup.
    pub step_size: f64,
    pub n_leapfrog: usize,
    pub target_accept: f64,
    /// Relative uniform jitter applied to the step size of each trajectory.
    pub jitter: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self { n_chains: 4, warmup: 2000, samples: 5000, step_size: 0.1, n_leapfrog: 20, target_accept: 0.8, jitter: 0.1 }
    }
}

impl HmcConfig {
    fn validate(&self) -> Result<(), McmcError> {
        if self.n_chains == 0 || self.samples == 0 || self.n_leapfrog == 0 {
            return Err(McmcError::InvalidConfig("chains, samples and leapfrog steps must be positive".into()));
        }
        if !(self.step_size > 0.0) || !(0.0..1.0).contains(&self.jitter) {
            return Err(McmcError::InvalidConfig(format!("step {} jitter {}", self.step_size, self.jitter)));
        }
        if !(0.0..1.0).contains(&self.target_accept) || self.target_accept == 0.0 {
            return Err(McmcError::InvalidConfig(format!("target acceptance {}", self.target_accept)));
        }
        Ok(())
    }
}

/// Draws stored chain-major: `samples[(c * n_samples + t) * n_vars + v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainSet {
    pub n_chains: usize,
    pub n_samples: usize,
    pub n_vars: usize,
    pub samples: Vec<f64>,
    pub acceptance: Vec<f64>,
    pub divergences: Vec<usize>,
    pub step_sizes: Vec<f64>,
}

impl ChainSet {
    /// Builds a chain set from per-chain `[t][v]` draws.
    pub fn from_chains(chains: &[Vec<Vec<f64>>]) -> Result<Self, McmcError> {
        let n_chains = chains.len();
        let n_samples = chains.first().map_or(0, |c| c.len());
        let n_vars = chains.first().and_then(|c| c.first()).map_or(0, |s| s.len());
        let mut samples = Vec::with_capacity(n_chains * n_samples * n_vars);
        for c in chains {
            if c.len() != n_samples || c.iter().any(|s| s.len() != n_vars) {
                return Err(McmcError::InvalidConfig("ragged chains".into()));
            }
            c.iter().for_each(|s| samples.extend_from_slice(s));
        }
        Ok(Self {
            n_chains,
            n_samples,
            n_vars,
            samples,
            acceptance: vec![1.0; n_chains],
            divergences: vec![0; n_chains],
            step_sizes: vec![0.0; n_chains],
        })
    }

    pub fn get(&self, chain: usize, t: usize, var: usize) -> f64 {
        self.samples[(chain * self.n_samples + t) * self.n_vars + var]
    }

    fn trace(&self, chain: usize, var: usize, range: std::ops::Range<usize>) -> impl Iterator<Item = f64> + Clone + '_ {
        range.map(move |t| self.get(chain, t, var))
    }
}

struct Target<'g> {
    g: &'g FactorGraph,
    grad: Vec<f64>,
}

impl Target<'_> {
    fn log_p(&self, x: &[f64]) -> f64 {
        self.g.factors().iter().map(|f| f.log_term(x, self.g.beta())).sum()
    }

    fn grad(&mut self, x: &[f64]) {
        self.g.grad_log_density_into(x, &mut self.grad).expect("family checked on entry");
    }
}

/// Runs `n_steps` leapfrog steps in place and returns the new log density.
fn leapfrog(target: &mut Target, x: &mut [f64], p: &mut [f64], eps: f64, n_steps: usize) -> f64 {
    target.grad(x);
    for step in 0..n_steps {
        for (pi, gi) in p.iter_mut().zip(&target.grad) {
            *pi += 0.5 * eps * gi;
        }
        for (xi, pi) in x.iter_mut().zip(p.iter()) {
            *xi += eps * pi;
        }
        target.grad(x);
        for (pi, gi) in p.iter_mut().zip(&target.grad) {
            *pi += 0.5 * eps * gi;
        }
        if step % 4 == 3 && x.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    target.log_p(x)
}

/// Change in the Hamiltonian over one leapfrog trajectory from `(x, p)`.
pub fn leapfrog_energy_error(g: &FactorGraph, x: &[f64], p: &[f64], eps: f64, n_steps: usize) -> Result<f64, McmcError> {
    check_family(g)?;
    let mut target = Target { g, grad: vec![0.0; g.n_variables()] };
    let (mut x1, mut p1) = (x.to_vec(), p.to_vec());
    let h0 = -target.log_p(x) + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
    let lp = leapfrog(&mut target, &mut x1, &mut p1, eps, n_steps);
    Ok(-lp + 0.5 * p1.iter().map(|v| v * v).sum::<f64>() - h0)
}

fn check_family(g: &FactorGraph) -> Result<(), McmcError> {
    match g.family() {
        Family::Gaussian | Family::Continuous => Ok(()),
        other => Err(McmcError::WrongFamily(other)),
    }
}

/// Dual-averaging step-size adaptation.
struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps: f64,
    log_eps_bar: f64,
    m: f64,
    target: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(eps0: f64, target: f64) -> Self {
        Self { mu: (10.0 * eps0).ln(), h_bar: 0.0, log_eps: eps0.ln(), log_eps_bar: 0.0, m: 0.0, target }
    }

    fn update(&mut self, accept_stat: f64) {
        self.m += 1.0;
        let w = 1.0 / (self.m + Self::T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_stat);
        self.log_eps = self.mu - self.m.sqrt() / Self::GAMMA * self.h_bar;
        let eta = self.m.powf(-Self::KAPPA);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
    }
}

fn run_chain<R: Rng>(g: &FactorGraph, cfg: &HmcConfig, rng: &mut R) -> (Vec<f64>, f64, usize, f64) {
    let n = g.n_variables();
    let mut target = Target { g, grad: vec![0.0; n] };
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut lp = target.log_p(&x);
    let mut adapt = DualAveraging::new(cfg.step_size, cfg.target_accept);
    let mut eps = cfg.step_size;
    let mut out = Vec::with_capacity(cfg.samples * n);
    let (mut accepted, mut divergences) = (0usize, 0usize);
    let mut p = vec![0.0; n];

    for iter in 0..cfg.warmup + cfg.samples {
        let sampling = iter >= cfg.warmup;
        p.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let h0 = -lp + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let mut x1 = x.clone();
        let step = eps * (1.0 + cfg.jitter * rng.random_range(-1.0..=1.0));
        let lp1 = leapfrog(&mut target, &mut x1, &mut p, step, cfg.n_leapfrog);
        let h1 = -lp1 + 0.5 * p.iter().map(|v| v * v).sum::<f64>();
        let accept_stat = if h1.is_finite() && x1.iter().all(|v| v.is_finite()) {
            (h0 - h1).exp().min(1.0)
        } else {
            if sampling {
                divergences += 1;
            }
            0.0
        };
        if rng.random::<f64>() < accept_stat {
            x = x1;
            lp = lp1;
            if sampling {
                accepted += 1;
            }
        }
        if !sampling {
            adapt.update(accept_stat);
            eps = adapt.log_eps.exp();
            if iter + 1 == cfg.warmup {
                eps = adapt.log_eps_bar.exp();
            }
        } else {
            out.extend_from_slice(&x);
        }
    }
    (out, accepted as f64 / cfg.samples as f64, divergences, eps)
}

/// Multi-chain HMC with identity mass matrix; chains start from `N(0, 1)`
/// draws and use independent streams seeded from `rng`.
pub fn hmc_sample<R: Rng + ?Sized>(g: &FactorGraph, cfg: &HmcConfig, rng: &mut R) -> Result<ChainSet, McmcError> {
    check_family(g)?;
    cfg.validate()?;
    let n_vars = g.n_variables();
    let mut set = ChainSet {
        n_chains: cfg.n_chains,
        n_samples: cfg.samples,
        n_vars,
        samples: Vec::with_capacity(cfg.n_chains * cfg.samples * n_vars),
        acceptance: Vec::new(),
        divergences: Vec::new(),
        step_sizes: Vec::new(),
    };
    for _ in 0..cfg.n_chains {
        let mut chain_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let (draws, acc, div, eps) = run_chain(g, cfg, &mut chain_rng);
        set.samples.extend(draws);
        set.acceptance.push(acc);
        set.divergences.push(div);
        set.step_sizes.push(eps);
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsrfReport {
    pub rhat: Vec<f64>,
    pub pass: bool,
}

pub const PSRF_THRESHOLD: f64 = 1.2;

fn mean_var(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = if n > 1.0 { values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Split-chain potential scale reduction factor per variable.
pub fn psrf(chains: &ChainSet, threshold: f64) -> PsrfReport {
    let half = chains.n_samples / 2;
    let mut rhat = Vec::with_capacity(chains.n_vars);
    for v in 0..chains.n_vars {
        if half < 2 {
            rhat.push(f64::NAN);
            continue;
        }
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for c in 0..chains.n_chains {
            let offset = chains.n_samples - 2 * half;
            for r in [offset..offset + half, offset + half..chains.n_samples] {
                let (m, s2) = mean_var(chains.trace(c, v, r));
                means.push(m);
                vars.push(s2);
            }
        }
        let n = half as f64;
        let w = vars.iter().sum::<f64>() / vars.len() as f64;
        let b = n * mean_var(means.iter().copied()).1;
        let r = if w == 0.0 {
            if b == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            (((n - 1.0) / n * w + b / n) / w).sqrt()
        };
        rhat.push(r);
    }
    let pass = !rhat.is_empty() && rhat.iter().all(|&r| r < threshold);
    PsrfReport { rhat, pass }
}

/// Pooled `(mean, m₂, m₃, m₄)` per variable.
pub fn central_moments(chains: &ChainSet) -> Vec<[f64; 4]> {
    let total = (chains.n_chains * chains.n_samples) as f64;
    (0..chains.n_vars)
        .map(|v| {
            let all = || (0..chains.n_chains).flat_map(move |c| chains.trace(c, v, 0..chains.n_samples));
            let mean = all().sum::<f64>() / total;
            let mut m = [0.0; 3];
            for x in all() {
                let d = x - mean;
                let d2 = d * d;
                m[0] += d2;
                m[1] += d2 * d;
                m[2] += d2 * d2;
            }
            [mean, m[0] / total, m[1] / total, m[2] / total]
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LabelledInstance {
    pub graph: FactorGraph,
    pub moments: Vec<[f64; 4]>,
    pub rhat: Vec<f64>,
    pub attempts: usize,
}

/// Redraws parameters on a fixed structure until the PSRF gate passes,
/// then returns the pooled central moments.
pub fn generate_continuous_targets<R: Rng + ?Sized>(
    structure: &InteractionStructure,
    shrink: f64,
    cfg: &HmcConfig,
    psrf_threshold: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<LabelledInstance, McmcError> {
    for attempt in 1..=max_attempts {
        let graph = continuous_parameters(structure, shrink, rng)?;
        let chains = hmc_sample(&graph, cfg, rng)?;
        let report = psrf(&chains, psrf_threshold);
        if report.pass {
            return Ok(LabelledInstance { moments: central_moments(&chains), graph, rhat: report.rhat, attempts: attempt });
        }
    }
    Err(McmcError::GateFailed { attempts: max_attempts })
}

/// Labels an existing continuous graph without redrawing its parameters.
pub fn label_graph<R: Rng + ?Sized>(
    graph: &FactorGraph,
    cfg: &HmcConfig,
    psrf_threshold: f64,
    rng: &mut R,
) -> Result<(Vec<[f64; 4]>, PsrfReport), McmcError> {
    let chains = hmc_sample(graph, cfg, rng)?;
    Ok((central_moments(&chains), psrf(&chains, psrf_threshold)))
}
