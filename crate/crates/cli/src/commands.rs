//! Subcommand arguments and bodies. Each argument struct doubles as the schema
//! of that command's config file; flag values win over file values.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;
use serde_json::{json, Value};
use strataclip::balance::ScanPattern;
use strataclip::gradsync::ClipMode;
use strataclip::mcsim::{
    self, BalanceExperiment, BalanceStats, Strategy, DEFAULT_GPUS_PER_NODE, DEFAULT_LOCAL_BATCH,
    DEFAULT_PACK_LIMIT, DEFAULT_TRIALS, FULL_TRIALS,
};
use strataclip::seqdata::{self, LengthDistribution, DEFAULT_MAX_SEQ_LEN, WIKIPEDIA_BOUNDARIES};
use strataclip::timeline::{self, PlanTemplate, TimelinePlan};
use strataclip::toytrain::{self, AdamConfig, CompareConfig, ToyTask, TrainConfig};
use strataclip::{Sample, Topology};

use crate::config::{self, pick, pick_list, require, usage};
use crate::output::{self, Sink, Table};

pub const DEFAULT_CORPUS_SIZE: usize = 100_000;
pub const DEFAULT_GPUS: usize = 64;
pub const DEFAULT_SEEDS: usize = 20;

/// Keeps the generated corpus independent of the per-trial draw streams.
const CORPUS_SEED_SALT: u64 = 0x5eed_c0de_0000_0001;

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dist(path: Option<&Path>) -> Result<LengthDistribution> {
    match path {
        None => Ok(LengthDistribution::wikipedia()),
        Some(p) => LengthDistribution::from_toml(&read_text(p)?)
            .with_context(|| format!("distribution file {}", p.display())),
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCorpusArgs {
    /// Number of sequences.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML length histogram (`bin_boundaries`, `bin_probs`); Wikipedia-like by default.
    #[arg(long, value_name = "FILE")]
    pub dist: Option<PathBuf>,
}

pub fn gen_corpus(args: GenCorpusArgs, cfg: Option<&Path>, sink: &Sink) -> Result<()> {
    let file: GenCorpusArgs = config::load(cfg)?;
    let n = require(pick(args.n, file.n), "n")?;
    let seed = require(pick(args.seed, file.seed), "seed")?;
    let dist = load_dist(pick(args.dist, file.dist).as_deref())?;
    let corpus = seqdata::generate_corpus(&dist, n, seed)?;

    let mut text = String::with_capacity(n * 4);
    for s in &corpus {
        text.push_str(&s.length.to_string());
        text.push('\n');
    }
    let dest = output::destination(
        sink.out.as_deref(),
        sink.out_dir.as_deref(),
        "corpus",
        "txt",
    );
    output::write_bytes(text.as_bytes(), dest.as_deref())
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceArgs {
    /// none, stratified, global_presort, packing or local_presort.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    /// raster or snake.
    #[arg(long)]
    pub scan: Option<ScanPattern>,
    /// Total simulated GPUs.
    #[arg(long)]
    pub gpus: Option<usize>,
    /// Node count; defaults to 8 GPUs per node.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub local_batch: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Full-length run of 100000 trials.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum sequences per pack for the packing strategy.
    #[arg(long)]
    pub pack_limit: Option<usize>,
    /// Step-by-step ablation table plus a global-presorting reference row.
    #[arg(long)]
    pub ablation: bool,
    /// Newline-delimited sequence lengths to sample from.
    #[arg(long, value_name = "FILE", conflicts_with = "dist")]
    pub corpus: Option<PathBuf>,
    /// TOML length histogram to generate the corpus from.
    #[arg(long, value_name = "FILE")]
    pub dist: Option<PathBuf>,
    /// Size of the generated corpus.
    #[arg(long)]
    pub corpus_size: Option<usize>,
    /// Stratum upper bounds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub strata: Vec<u32>,
}

const BALANCE_COLUMNS: [&str; 11] = [
    "strategy",
    "gpus",
    "local_batch",
    "trials",
    "avg_min",
    "avg_max",
    "avg_range",
    "stderr_min",
    "stderr_max",
    "scan",
    "stderr_range",
];

fn balance_row(strategy: &str, exp: &BalanceExperiment, st: &BalanceStats) -> Vec<Value> {
    vec![
        json!(strategy),
        json!(exp.topo.total_gpus()),
        json!(exp.local_batch),
        json!(st.trials),
        json!(st.avg_min),
        json!(st.avg_max),
        json!(st.avg_range),
        json!(st.stderr_min),
        json!(st.stderr_max),
        json!(exp.scan.as_str()),
        json!(st.stderr_range),
    ]
}

pub fn balance(args: BalanceArgs, cfg: Option<&Path>, sink: &Sink) -> Result<()> {
    let file: BalanceArgs = config::load(cfg)?;
    let seed = require(pick(args.seed, file.seed), "seed")?;
    let full = args.full || file.full;
    let trials = match (pick(args.trials, file.trials), full) {
        (Some(_), true) => return Err(usage("`--trials` and `--full` are mutually exclusive")),
        (Some(t), false) => t,
        (None, true) => FULL_TRIALS,
        (None, false) => DEFAULT_TRIALS,
    };
    let gpus = pick(args.gpus, file.gpus).unwrap_or(DEFAULT_GPUS);
    let nodes =
        pick(args.nodes, file.nodes).unwrap_or_else(|| gpus.div_ceil(DEFAULT_GPUS_PER_NODE));
    let topo = Topology::from_total(gpus, nodes)?;

    let corpus_path = pick(args.corpus, file.corpus);
    let dist_path = pick(args.dist, file.dist);
    if corpus_path.is_some() && dist_path.is_some() {
        return Err(usage(
            "give either a corpus file or a distribution, not both",
        ));
    }
    let dist = load_dist(dist_path.as_deref())?;
    let mut strata = pick_list(args.strata, Some(file.strata));
    if strata.is_empty() {
        strata = if dist_path.is_some() {
            dist.bin_boundaries.clone()
        } else {
            WIKIPEDIA_BOUNDARIES.to_vec()
        };
    }
    let max_seq_len = *strata.last().expect("non-empty");
    let corpus: Vec<Sample> = match corpus_path {
        Some(p) => {
            seqdata::ingest_lengths_str(&read_text(&p)?, max_seq_len.max(DEFAULT_MAX_SEQ_LEN))
                .with_context(|| format!("corpus file {}", p.display()))?
        }
        None => {
            let n = pick(args.corpus_size, file.corpus_size).unwrap_or(DEFAULT_CORPUS_SIZE);
            seqdata::generate_corpus(&dist, n, seed ^ CORPUS_SEED_SALT)?
        }
    };

    let exp = BalanceExperiment {
        strategy: pick(args.strategy, file.strategy).unwrap_or(Strategy::LocalPresort),
        topo,
        local_batch: pick(args.local_batch, file.local_batch).unwrap_or(DEFAULT_LOCAL_BATCH),
        trials,
        seed,
        scan: pick(args.scan, file.scan).unwrap_or_default(),
        pack_limit: pick(args.pack_limit, file.pack_limit).unwrap_or(DEFAULT_PACK_LIMIT),
        strata_boundaries: strata,
        max_seq_len,
    };

    if args.ablation || file.ablation {
        let mut table = Table::new(std::iter::once("step").chain(BALANCE_COLUMNS));
        for row in mcsim::run_ablation(&corpus, &exp)? {
            let e = exp.with_strategy(row.strategy, row.scan);
            let mut cells = vec![json!(row.label)];
            cells.extend(balance_row(row.strategy.as_str(), &e, &row.stats));
            table.push(cells);
        }
        sink.emit(&table, "ablation")
    } else {
        let st = mcsim::run_balance_experiment(&corpus, &exp)?;
        let mut table = Table::new(BALANCE_COLUMNS);
        table.push(balance_row(exp.strategy.as_str(), &exp, &st));
        sink.emit(&table, "balance")
    }
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimelineArgs {
    /// TOML plan with explicit per-bucket durations.
    #[arg(long, value_name = "FILE", conflicts_with = "template")]
    pub plan: Option<PathBuf>,
    /// TOML plan template (totals split evenly over the buckets).
    #[arg(long, value_name = "FILE")]
    pub template: Option<PathBuf>,
    /// Clip modes, comma separated; all three by default.
    #[arg(long, value_delimiter = ',')]
    pub modes: Vec<ClipMode>,
    /// Bucket counts to sweep when planning from a template.
    #[arg(long, value_delimiter = ',')]
    pub buckets: Vec<usize>,
    /// Multipliers applied to every communication duration.
    #[arg(long, value_delimiter = ',')]
    pub comm_scale: Vec<f64>,
}

pub fn timeline(args: TimelineArgs, cfg: Option<&Path>, sink: &Sink) -> Result<()> {
    let file: TimelineArgs = config::load(cfg)?;
    let mut modes = pick_list(args.modes, Some(file.modes));
    if modes.is_empty() {
        modes = ClipMode::ALL.to_vec();
    }
    let mut scales = pick_list(args.comm_scale, Some(file.comm_scale));
    if scales.is_empty() {
        scales = vec![1.0];
    }
    let buckets = pick_list(args.buckets, Some(file.buckets));
    let plan_path = pick(args.plan, file.plan);
    let template_path = pick(args.template, file.template);

    let rows = match plan_path {
        Some(p) => {
            if template_path.is_some() || !buckets.is_empty() {
                return Err(usage(
                    "a plan file fixes the buckets; drop --template and --buckets",
                ));
            }
            let plan = TimelinePlan::from_toml(&read_text(&p)?)
                .with_context(|| format!("plan file {}", p.display()))?;
            let mut rows = Vec::new();
            for &scale in &scales {
                if !scale.is_finite() || scale < 0.0 {
                    return Err(usage(format!(
                        "comm scale {scale} is not a non-negative number"
                    )));
                }
                let scaled = TimelinePlan {
                    t_comm: plan.t_comm.iter().map(|c| c * scale).collect(),
                    ..plan.clone()
                };
                for &mode in &modes {
                    rows.push(timeline::row(&scaled, mode, scale)?);
                }
            }
            rows
        }
        None => {
            let template: PlanTemplate = match template_path {
                Some(p) => toml::from_str(&read_text(&p)?)
                    .map_err(|e| usage(format!("template {}: {}", p.display(), e.message())))?,
                None => PlanTemplate::default(),
            };
            let buckets = if buckets.is_empty() { vec![8] } else { buckets };
            timeline::sweep(&template, &modes, &buckets, &scales)?
        }
    };

    let mut table = Table::new([
        "mode",
        "B",
        "total_latency",
        "compute_busy",
        "comm_busy",
        "comm_scale",
    ]);
    for r in rows {
        table.push(vec![
            json!(r.mode.as_str()),
            json!(r.buckets),
            json!(r.total_latency),
            json!(r.compute_busy),
            json!(r.comm_busy),
            json!(r.comm_scale),
        ]);
    }
    sink.emit(&table, "timeline")
}

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainArgs {
    /// Clip modes, comma separated; all three by default.
    #[arg(long, value_delimiter = ',')]
    pub mode: Vec<ClipMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub buckets: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Clipping threshold c.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Parameter dimension of the regression model.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Samples per worker per step.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    #[arg(long)]
    pub outlier_rate: Option<f64>,
    #[arg(long)]
    pub outlier_scale: Option<f64>,
    /// Summarize final losses over several seeds instead of one trajectory.
    #[arg(long)]
    pub compare: bool,
    /// Number of seeds for `--compare`, counting up from `--seed`.
    #[arg(long, requires = "compare")]
    pub seeds: Option<usize>,
}

pub fn train(args: TrainArgs, cfg: Option<&Path>, sink: &Sink) -> Result<()> {
    let file: TrainArgs = config::load(cfg)?;
    let seed = require(pick(args.seed, file.seed), "seed")?;
    let mut modes = pick_list(args.mode, Some(file.mode));
    if modes.is_empty() {
        modes = ClipMode::ALL.to_vec();
    }
    let defaults = ToyTask::default();
    let task = ToyTask {
        dim: pick(args.dim, file.dim).unwrap_or(defaults.dim),
        batch_per_worker: pick(args.batch, file.batch).unwrap_or(defaults.batch_per_worker),
        noise_std: pick(args.noise_std, file.noise_std).unwrap_or(defaults.noise_std),
        outlier_rate: pick(args.outlier_rate, file.outlier_rate).unwrap_or(defaults.outlier_rate),
        outlier_scale: pick(args.outlier_scale, file.outlier_scale)
            .unwrap_or(defaults.outlier_scale),
        heldout: defaults.heldout,
        seed,
    };
    task.validate()?;
    let base = TrainConfig::new(modes[0]);
    let adam = AdamConfig {
        lr: pick(args.lr, file.lr).unwrap_or(base.adam.lr),
        ..base.adam
    };
    let train_cfg = TrainConfig {
        workers: pick(args.workers, file.workers).unwrap_or(base.workers),
        buckets: pick(args.buckets, file.buckets).unwrap_or(base.buckets),
        steps: pick(args.steps, file.steps).unwrap_or(base.steps),
        threshold: pick(args.threshold, file.threshold).unwrap_or(base.threshold),
        adam,
        ..base
    };
    train_cfg.validate(task.dim)?;

    if args.compare || file.compare {
        let n = pick(args.seeds, file.seeds).unwrap_or(DEFAULT_SEEDS);
        if n == 0 {
            return Err(usage("`--seeds` must be at least 1"));
        }
        let seeds = (0..n as u64).map(|i| seed.wrapping_add(i)).collect();
        let cmp = CompareConfig {
            modes,
            seeds,
            workers: train_cfg.workers,
            buckets: train_cfg.buckets,
            steps: train_cfg.steps,
            threshold: train_cfg.threshold,
            adam: train_cfg.adam,
        };
        let mut table = Table::new(["mode", "mean_final_loss", "stderr"]);
        for s in toytrain::compare_modes(&task, &cmp)? {
            table.push(vec![
                json!(s.mode.as_str()),
                json!(s.mean_final_loss),
                json!(s.stderr),
            ]);
        }
        return sink.emit(&table, "train_summary");
    }

    let trajectories = modes
        .iter()
        .map(|&mode| {
            toytrain::train(
                &task,
                &TrainConfig {
                    mode,
                    ..train_cfg.clone()
                },
            )
        })
        .collect::<strataclip::Result<Vec<_>>>()?;
    let mut table = Table::new(std::iter::once("step").chain(modes.iter().map(|m| m.as_str())));
    for step in 0..train_cfg.steps {
        let mut row = vec![json!(step + 1)];
        row.extend(trajectories.iter().map(|t| json!(t.losses[step])));
        table.push(row);
    }
    sink.emit(&table, "train")
}
