use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use factorlab::belief_prop::{discrete_bp, gaussian_bp, BpOptions};
use factorlab::factor_graph::Family;
use factorlab::mcmc::{HmcConfig, PSRF_THRESHOLD};
use factorlab::train_eval::{
    evaluate, generate, label_continuous, load_model, read_jsonl, save_model, sidecar_path, train_with_split,
    write_jsonl, write_report, DatasetKind, EvalOptions, Record, RunConfig, SizeRange,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "factorlab", version, about = "Factor-graph inference with graph neural networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset manifest (JSONL) with exact targets where available.
    Generate {
        #[arg(long)]
        family: DatasetKind,
        /// Number of variables, either `10` or an inclusive range `8-10`.
        #[arg(long)]
        n: SizeRange,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label continuous graphs with HMC moment estimates.
    Sample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 2000)]
        warmup: usize,
        #[arg(long, default_value_t = 5000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        leapfrog: usize,
        #[arg(long, default_value_t = PSRF_THRESHOLD)]
        psrf_threshold: f64,
        #[arg(long, default_value_t = 10)]
        max_attempts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run loopy belief propagation and write per-variable results.
    Bp {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        family: DatasetKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        max_cycles: usize,
        #[arg(long, default_value_t = 0.0)]
        damping: f64,
    },
    /// Train a model; writes a checkpoint and a `.config.json` sidecar.
    Train {
        #[arg(long)]
        family: DatasetKind,
        #[arg(long)]
        data: PathBuf,
        /// TOML file with `[model]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint; writes CSV summaries and SVG plots.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also run belief propagation as a baseline.
        #[arg(long)]
        bp: bool,
        #[arg(long)]
        no_singleton: bool,
        #[arg(long, default_value_t = 1000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(write_jsonl(records, BufWriter::new(f))?)
}

fn check_family(records: &[Record], family: Family) -> Result<()> {
    if let Some(r) = records.iter().find(|r| r.graph.family() != family) {
        bail!("graph {} is {}, expected {}", r.id, r.graph.family(), family);
    }
    Ok(())
}

#[derive(Serialize)]
struct BpRow {
    graph_id: usize,
    variable: usize,
    belief: f64,
    target: Option<f64>,
    converged: bool,
    cycles: usize,
    final_delta: f64,
    divergent: bool,
}

fn run_bp(input: &Path, kind: DatasetKind, out: &Path, opts: BpOptions) -> Result<()> {
    let records = read_records(input)?;
    check_family(&records, kind.family())?;
    let mut w = csv::Writer::from_path(out)?;
    let mut converged = 0;
    for r in &records {
        let res = match kind.family() {
            Family::Gaussian => gaussian_bp(&r.graph, opts)?,
            Family::Spin => discrete_bp(&r.graph, opts)?,
            Family::Continuous => bail!("belief propagation does not support continuous graphs"),
        };
        converged += usize::from(res.report.converged);
        let targets = r.targets.as_ref().map(|t| t.rows());
        for (v, &belief) in res.beliefs.iter().enumerate() {
            w.serialize(BpRow {
                graph_id: r.id,
                variable: v,
                belief,
                target: targets.as_ref().map(|t| t[v][0]),
                converged: res.report.converged,
                cycles: res.report.cycles_run,
                final_delta: res.report.final_delta,
                divergent: res.report.divergent,
            })?;
        }
    }
    w.flush()?;
    eprintln!("bp converged on {converged}/{} graphs", records.len());
    Ok(())
}

fn run_train(kind: DatasetKind, data: &Path, config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let mut run = match config {
        Some(p) => toml::from_str::<RunConfig>(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    run.model.family = kind.family();
    let records = read_records(data)?;
    check_family(&records, kind.family())?;
    let outcome = train_with_split(run.model, &run.train, &records, seed, |log| {
        eprintln!("epoch {:4}  train {:.6}  val {:.6}  lr {:.2e}", log.epoch, log.train_loss, log.val_loss, log.lr)
    })?;
    save_model(&outcome.model, out)?;
    eprintln!(
        "best epoch {} (val {:.6}); wrote {} and {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        out.display(),
        sidecar_path(out).display()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Generate { family, n, count, seed, out } => {
            let records = generate(family, n, count, seed)?;
            write_records(&out, &records)?;
        }
        Cmd::Sample { input, out, chains, warmup, samples, leapfrog, psrf_threshold, max_attempts, seed } => {
            let mut records = read_records(&input)?;
            let cfg = HmcConfig { n_chains: chains, warmup, samples, n_leapfrog: leapfrog, ..HmcConfig::default() };
            label_continuous(&mut records, &cfg, psrf_threshold, max_attempts, seed)?;
            write_records(&out, &records)?;
        }
        Cmd::Bp { input, family, out, tol, max_cycles, damping } => {
            run_bp(&input, family, &out, BpOptions { tol, max_cycles, damping })?
        }
        Cmd::Train { family, data, config, out_checkpoint, seed } => {
            run_train(family, &data, config.as_deref(), &out_checkpoint, seed)?
        }
        Cmd::Evaluate { checkpoint, data, bp, no_singleton, resamples, seed, out_dir } => {
            let model = load_model(&checkpoint)?;
            let records = read_records(&data)?;
            let opts = EvalOptions { bp, singleton: !no_singleton, n_resamples: resamples, seed, ..EvalOptions::default() };
            let report = evaluate(&model, &records, &opts)?;
            fs::create_dir_all(&out_dir)?;
            write_report(&report, &out_dir)?;
            for row in report.summary.iter().filter(|r| r.n.is_none()) {
                eprintln!(
                    "{:14} {:12} graphs {:5}  r2 {:.4}  mse {:.4e}  kl {:.4e}",
                    row.method.to_string(), row.subset, row.graphs, row.r2, row.mse, row.kl
                );
            }
        }
    }
    Ok(())
}
