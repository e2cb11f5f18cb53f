//! JSON-lines dataset manifests: generation, labelling and splitting.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exact_oracles::{enumerate_binary, ggm_marginals_of};
use crate::factor_graph::{Family, FactorGraph, FactorType};
use crate::graph_gen::{
    sample_continuous_instance, sample_ggm_instance, sample_ggm_tree_instance,
    sample_spin_instance, GeneratorParams, InteractionStructure,
};
use crate::mcmc::{generate_continuous_targets, label_graph, HmcConfig, McmcError};

use super::TrainError;

/// Instance generator selected on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "ggm")]
    Ggm,
    #[serde(rename = "ggm-tree")]
    GgmTree,
    #[serde(rename = "spin")]
    Spin,
    #[serde(rename = "cont")]
    Cont,
}

impl DatasetKind {
    pub fn family(self) -> Family {
        match self {
            DatasetKind::Ggm | DatasetKind::GgmTree => Family::Gaussian,
            DatasetKind::Spin => Family::Spin,
            DatasetKind::Cont => Family::Continuous,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Ggm => "ggm",
            DatasetKind::GgmTree => "ggm-tree",
            DatasetKind::Spin => "spin",
            DatasetKind::Cont => "cont",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ggm" => Ok(DatasetKind::Ggm),
            "ggm-tree" => Ok(DatasetKind::GgmTree),
            "spin" => Ok(DatasetKind::Spin),
            "cont" => Ok(DatasetKind::Cont),
            _ => Err(TrainError::Invalid(format!("unknown dataset family {s:?}"))),
        }
    }
}

/// Inclusive range of graph sizes, written `10` or `8-10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SizeRange {
    pub lo: usize,
    pub hi: usize,
}

impl SizeRange {
    pub fn new(lo: usize, hi: usize) -> Result<Self, TrainError> {
        if lo == 0 || lo > hi {
            return Err(TrainError::Invalid(format!("size range {lo}-{hi}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn fixed(n: usize) -> Self {
        Self { lo: n, hi: n }
    }
}

impl FromStr for SizeRange {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |t: &str| t.trim().parse::<usize>().map_err(|_| TrainError::Invalid(format!("size {s:?}")));
        match s.split_once('-') {
            Some((a, b)) => Self::new(parse(a)?, parse(b)?),
            None => {
                let n = parse(s)?;
                Self::new(n, n)
            }
        }
    }
}

/// Per-variable inference targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Targets {
    MarginalPrecisions(Vec<f64>),
    PPlus(Vec<f64>),
    Moments(Vec<[f64; 4]>),
}

impl Targets {
    pub fn family(&self) -> Family {
        match self {
            Targets::MarginalPrecisions(_) => Family::Gaussian,
            Targets::PPlus(_) => Family::Spin,
            Targets::Moments(_) => Family::Continuous,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::MarginalPrecisions(v) | Targets::PPlus(v) => v.len(),
            Targets::Moments(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One row per variable, `family.target_width()` wide.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        match self {
            Targets::MarginalPrecisions(v) | Targets::PPlus(v) => v.iter().map(|&x| vec![x]).collect(),
            Targets::Moments(v) => v.iter().map(|m| m.to_vec()).collect(),
        }
    }
}

/// Outcome of MCMC labelling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelInfo {
    pub max_rhat: f64,
    /// Parameter draws tried before the convergence gate passed.
    pub attempts: usize,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: usize,
    pub seed: u64,
    pub family: DatasetKind,
    pub n: usize,
    pub generator_params: GeneratorParams,
    pub graph: FactorGraph,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Targets>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labelling: Option<LabelInfo>,
}

impl Record {
    /// Targets, checked against the graph's family and size.
    pub fn checked_targets(&self) -> Result<&Targets, TrainError> {
        let t = self.targets.as_ref().ok_or(TrainError::MissingTargets { id: self.id })?;
        if t.family() != self.graph.family() || t.len() != self.graph.n_variables() {
            return Err(TrainError::Invalid(format!(
                "graph {}: {} targets for {} variables of a {} graph",
                self.id,
                t.len(),
                self.graph.n_variables(),
                self.graph.family()
            )));
        }
        Ok(t)
    }
}

/// Draws `count` instances; instance `i` is generated from its own seed so
/// it can be reproduced alone. Gaussian and spin instances are labelled
/// exactly; continuous ones are left for [`label_continuous`].
pub fn generate(kind: DatasetKind, sizes: SizeRange, count: usize, seed: u64) -> Result<Vec<Record>, TrainError> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|id| {
            let inst_seed = master.next_u64();
            let mut rng = ChaCha8Rng::seed_from_u64(inst_seed);
            let n = rng.random_range(sizes.lo..=sizes.hi);
            let inst = match kind {
                DatasetKind::Ggm => sample_ggm_instance(n, &mut rng)?,
                DatasetKind::GgmTree => sample_ggm_tree_instance(n, &mut rng)?,
                DatasetKind::Spin => sample_spin_instance(n, &mut rng)?,
                DatasetKind::Cont => sample_continuous_instance(n, &mut rng, 1.0)?,
            };
            let targets = match kind {
                DatasetKind::Ggm | DatasetKind::GgmTree => {
                    Some(Targets::MarginalPrecisions(ggm_marginals_of(&inst.graph)?.precisions))
                }
                DatasetKind::Spin => Some(Targets::PPlus(enumerate_binary(&inst.graph)?)),
                DatasetKind::Cont => None,
            };
            Ok(Record {
                id,
                seed: inst_seed,
                family: kind,
                n,
                generator_params: inst.params,
                graph: inst.graph,
                targets,
                labelling: None,
            })
        })
        .collect()
}

fn structure_of(graph: &FactorGraph, params: &GeneratorParams) -> InteractionStructure {
    let mut s = InteractionStructure { n: graph.n_variables(), pairs: Vec::new(), triples: Vec::new(), params: params.clone() };
    for f in graph.factors() {
        match f.ftype {
            FactorType::ContPair => s.pairs.push((f.members[0], f.members[1])),
            FactorType::ContTriple => s.triples.push([f.members[0], f.members[1], f.members[2]]),
            _ => {}
        }
    }
    s
}

/// Labels continuous records with pooled HMC moments. A record whose chains
/// fail the convergence gate gets fresh parameters on the same structure,
/// up to `max_attempts` draws in total.
pub fn label_continuous(
    records: &mut [Record],
    cfg: &HmcConfig,
    psrf_threshold: f64,
    max_attempts: usize,
    seed: u64,
) -> Result<(), TrainError> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    for r in records.iter_mut() {
        if r.graph.family() != Family::Continuous {
            return Err(TrainError::Invalid(format!("graph {} is not continuous", r.id)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
        let (moments, rhat) = label_graph(&r.graph, cfg, psrf_threshold, &mut rng)?;
        let max_rhat = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if rhat.pass {
            r.targets = Some(Targets::Moments(moments));
            r.labelling = Some(LabelInfo { max_rhat: max_rhat(&rhat.rhat), attempts: 1 });
            continue;
        }
        if max_attempts < 2 {
            return Err(McmcError::GateFailed { attempts: 1 }.into());
        }
        let shrink = r.generator_params.shrink.unwrap_or(1.0);
        let structure = structure_of(&r.graph, &r.generator_params);
        let lab = generate_continuous_targets(&structure, shrink, cfg, psrf_threshold, max_attempts - 1, &mut rng)?;
        r.graph = lab.graph;
        r.targets = Some(Targets::Moments(lab.moments));
        r.labelling = Some(LabelInfo { max_rhat: max_rhat(&lab.rhat), attempts: lab.attempts + 1 });
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(records: &[Record], mut w: W) -> Result<(), TrainError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Record>, TrainError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| TrainError::Invalid(format!("manifest line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Random split into training and validation parts in the ratio
/// `train_parts : val_parts`.
pub fn split_dataset<T: Clone, R: Rng + ?Sized>(
    data: &[T],
    train_parts: usize,
    val_parts: usize,
    rng: &mut R,
) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let total = (train_parts + val_parts).max(1);
    let n_train = (data.len() * train_parts + total / 2) / total;
    let (a, b) = idx.split_at(n_train.min(data.len()));
    (a.iter().map(|&i| data[i].clone()).collect(), b.iter().map(|&i| data[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_determinism() {
        let a = generate(DatasetKind::Spin, SizeRange::new(4, 6).unwrap(), 5, 9).unwrap();
        let b = generate(DatasetKind::Spin, SizeRange::new(4, 6).unwrap(), 5, 9).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        write_jsonl(&a, &mut x).unwrap();
        write_jsonl(&b, &mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(read_jsonl(&x[..]).unwrap(), a);
        assert!(a.iter().all(|r| (4..=6).contains(&r.n) && r.checked_targets().is_ok()));
        let line: serde_json::Value = serde_json::from_slice(x.split(|&c| c == b'\n').next().unwrap()).unwrap();
        for key in ["seed", "family", "n", "generator_params", "graph", "targets"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        assert_eq!(line["family"], "spin");
    }

    #[test]
    fn size_and_kind_parsing() {
        assert_eq!("8-10".parse::<SizeRange>().unwrap(), SizeRange { lo: 8, hi: 10 });
        assert_eq!("7".parse::<SizeRange>().unwrap(), SizeRange::fixed(7));
        assert!("10-8".parse::<SizeRange>().is_err());
        assert_eq!("ggm-tree".parse::<DatasetKind>().unwrap(), DatasetKind::GgmTree);
        assert!("tree".parse::<DatasetKind>().is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let data: Vec<usize> = (0..103).collect();
        let (tr, va) = split_dataset(&data, 4, 1, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((tr.len(), va.len()), (82, 21));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, data);
        assert_eq!(split_dataset(&data, 4, 1, &mut ChaCha8Rng::seed_from_u64(1)).0, tr);
    }

    #[test]
    fn continuous_labelling_fills_moments() {
        let mut recs = generate(DatasetKind::Cont, SizeRange::fixed(2), 2, 4).unwrap();
        assert!(recs.iter().all(|r| r.targets.is_none()));
        let cfg = HmcConfig { warmup: 300, samples: 600, ..HmcConfig::default() };
        label_continuous(&mut recs, &cfg, 1.2, 5, 1).unwrap();
        for r in &recs {
            let t = r.checked_targets().unwrap().rows();
            assert!(t.iter().all(|m| m[1] > 0.0 && m[3] > 0.0));
            assert!(r.labelling.as_ref().unwrap().max_rhat < 1.2);
        }
    }
}
