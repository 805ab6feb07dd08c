//! Monte-Carlo load-balance evaluation.
//!
//! Each trial draws one global batch (local batch per GPU × all GPUs), forms
//! per-GPU assignments with the chosen strategy and records the smallest and
//! largest per-GPU token count. Statistics are averaged over trials.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balance::{self, Pack, ScanPattern};
use crate::seqdata::{Sample, Topology, WIKIPEDIA_BOUNDARIES};
use crate::stats::IntMoments;
use crate::strata::{self, Strata, StratumAllocation};
use crate::{Error, Result};

pub const DEFAULT_LOCAL_BATCH: usize = 16;
pub const DEFAULT_TRIALS: usize = 10_000;
pub const FULL_TRIALS: usize = 100_000;
pub const DEFAULT_PACK_LIMIT: usize = 2;
pub const DEFAULT_GPUS_PER_NODE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Uniform draws, dealt round-robin.
    None,
    /// Stratified per-GPU draws, kept where they were drawn.
    Stratified,
    /// Uniform draws, sorted over the whole cluster.
    GlobalPresort,
    /// Uniform draws of pre-built packs.
    Packing,
    /// Stratified per-GPU draws, sorted within each node.
    LocalPresort,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::None,
        Strategy::Stratified,
        Strategy::GlobalPresort,
        Strategy::Packing,
        Strategy::LocalPresort,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Stratified => "stratified",
            Strategy::GlobalPresort => "global_presort",
            Strategy::Packing => "packing",
            Strategy::LocalPresort => "local_presort",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Strategy::ALL.iter().map(|s| s.as_str()).collect();
                Error::invalid(
                    "strategy",
                    format!("unknown strategy `{s}` (valid: {})", valid.join(", ")),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalanceExperiment {
    pub strategy: Strategy,
    pub topo: Topology,
    /// Effective sequences per GPU. With packing, each GPU receives
    /// `local_batch` divided by the packed corpus's mean pack size, rounded.
    pub local_batch: usize,
    pub trials: usize,
    pub seed: u64,
    pub scan: ScanPattern,
    pub pack_limit: usize,
    pub strata_boundaries: Vec<u32>,
    pub max_seq_len: u32,
}

impl BalanceExperiment {
    pub fn new(strategy: Strategy, topo: Topology, seed: u64) -> Self {
        Self {
            strategy,
            topo,
            local_batch: DEFAULT_LOCAL_BATCH,
            trials: DEFAULT_TRIALS,
            seed,
            scan: ScanPattern::Raster,
            pack_limit: DEFAULT_PACK_LIMIT,
            strata_boundaries: WIKIPEDIA_BOUNDARIES.to_vec(),
            max_seq_len: *WIKIPEDIA_BOUNDARIES.last().unwrap(),
        }
    }

    pub fn with_strategy(&self, strategy: Strategy, scan: ScanPattern) -> Self {
        Self {
            strategy,
            scan,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::invalid("trials", "must be at least 1"));
        }
        if self.local_batch == 0 {
            return Err(Error::invalid("local_batch", "must be at least 1"));
        }
        if self.strategy == Strategy::Packing && self.pack_limit == 0 {
            return Err(Error::invalid("pack_limit", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalanceStats {
    pub avg_min: f64,
    pub avg_max: f64,
    pub avg_range: f64,
    pub stderr_min: f64,
    pub stderr_max: f64,
    /// Standard error of the per-trial range (max - min).
    pub stderr_range: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    min: IntMoments,
    max: IntMoments,
    range: IntMoments,
}

impl Accum {
    fn push(&mut self, lo: u64, hi: u64) {
        self.min.push(lo);
        self.max.push(hi);
        self.range.push(hi - lo);
    }

    fn merge(self, o: Self) -> Self {
        Self {
            min: self.min.merge(o.min),
            max: self.max.merge(o.max),
            range: self.range.merge(o.range),
        }
    }

    fn finish(&self) -> BalanceStats {
        let avg_min = self.min.mean();
        let avg_max = self.max.mean();
        BalanceStats {
            avg_min,
            avg_max,
            avg_range: self.range.mean(),
            stderr_min: self.min.stderr(),
            stderr_max: self.max.stderr(),
            stderr_range: self.range.stderr(),
            trials: self.min.n as usize,
        }
    }
}

/// Corpus-derived state shared by all trials: the raw corpus, its strata and
/// a one-time packed copy. Built lazily so each is constructed only when a
/// strategy needs it.
struct Prepared<'a> {
    corpus: &'a [Sample],
    strata: Option<(Strata, StratumAllocation)>,
    packs: Option<Vec<Pack>>,
}

/// Packs per GPU that carry `local_batch` original sequences on average.
pub fn packs_per_gpu(local_batch: usize, samples: usize, packs: usize) -> usize {
    if packs == 0 {
        return local_batch;
    }
    let ratio = samples as f64 / packs as f64;
    ((local_batch as f64 / ratio).round() as usize).max(1)
}

impl<'a> Prepared<'a> {
    fn new(corpus: &'a [Sample]) -> Self {
        Self {
            corpus,
            strata: None,
            packs: None,
        }
    }

    fn ensure(&mut self, exp: &BalanceExperiment) -> Result<()> {
        match exp.strategy {
            Strategy::Stratified | Strategy::LocalPresort if self.strata.is_none() => {
                let st = strata::stratify(self.corpus, &exp.strata_boundaries)?;
                let alloc = strata::allocate_counts(st.probs(), exp.local_batch)?;
                self.strata = Some((st, alloc));
            }
            Strategy::Packing if self.packs.is_none() => {
                self.packs = Some(balance::pack_corpus(
                    self.corpus,
                    exp.pack_limit,
                    exp.max_seq_len,
                )?);
            }
            _ => {}
        }
        Ok(())
    }

    fn trial(&self, exp: &BalanceExperiment, rng: &mut ChaCha8Rng) -> Result<(u64, u64)> {
        let gpus = exp.topo.total_gpus();
        let assignment = match exp.strategy {
            Strategy::None | Strategy::GlobalPresort => {
                let batch = draw_uniform(self.corpus, gpus * exp.local_batch, rng)?;
                if exp.strategy == Strategy::None {
                    balance::assign_none(&batch, &exp.topo)?
                } else {
                    balance::assign_global_presort(&batch, &exp.topo, exp.scan)?
                }
            }
            Strategy::Packing => {
                let packs = self.packs.as_deref().expect("packs prepared");
                let want = gpus * packs_per_gpu(exp.local_batch, self.corpus.len(), packs.len());
                if want > packs.len() {
                    return Err(Error::PoolExhausted {
                        stratum: 0,
                        needed: want,
                        available: packs.len(),
                    });
                }
                let chosen: Vec<Pack> = index::sample(rng, packs.len(), want)
                    .into_iter()
                    .map(|i| packs[i].clone())
                    .collect();
                balance::assign_packing(&chosen, &exp.topo)?
            }
            Strategy::Stratified | Strategy::LocalPresort => {
                let (st, alloc) = self.strata.as_ref().expect("strata prepared");
                let draws = st.sample_per_gpu(alloc, gpus, rng)?;
                if exp.strategy == Strategy::Stratified {
                    balance::Assignment::from_per_gpu(draws)
                } else {
                    balance::assign_local_presort(&draws, &exp.topo, exp.scan)?
                }
            }
        };
        Ok((assignment.min_tokens(), assignment.max_tokens()))
    }
}

fn draw_uniform(corpus: &[Sample], n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    if n > corpus.len() {
        return Err(Error::PoolExhausted {
            stratum: 0,
            needed: n,
            available: corpus.len(),
        });
    }
    Ok(index::sample(rng, corpus.len(), n)
        .into_iter()
        .map(|i| corpus[i])
        .collect())
}

/// Generator for trial `trial`: ChaCha stream `trial` of the experiment seed.
fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

pub fn run_balance_experiment(corpus: &[Sample], exp: &BalanceExperiment) -> Result<BalanceStats> {
    let mut prepared = Prepared::new(corpus);
    run_prepared(&mut prepared, exp)
}

fn run_prepared(prepared: &mut Prepared<'_>, exp: &BalanceExperiment) -> Result<BalanceStats> {
    exp.validate()?;
    prepared.ensure(exp)?;
    let prepared = &*prepared;
    let one = |t: usize| -> Result<Accum> {
        let mut rng = trial_rng(exp.seed, t);
        let (lo, hi) = prepared.trial(exp, &mut rng)?;
        let mut acc = Accum::default();
        acc.push(lo, hi);
        Ok(acc)
    };

    #[cfg(feature = "parallel")]
    let acc = {
        use rayon::prelude::*;
        (0..exp.trials)
            .into_par_iter()
            .map(one)
            .try_reduce(Accum::default, |a, b| Ok(a.merge(b)))?
    };
    #[cfg(not(feature = "parallel"))]
    let acc =
        (0..exp.trials).try_fold(Accum::default(), |a, t| Ok::<_, Error>(a.merge(one(t)?)))?;

    Ok(acc.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: &'static str,
    pub strategy: Strategy,
    pub scan: ScanPattern,
    pub stats: BalanceStats,
}

/// The step-by-step ablation of the proposed method plus a global-presorting
/// reference row, all sharing the base experiment's topology, batch, trials
/// and seed.
pub fn run_ablation(corpus: &[Sample], base: &BalanceExperiment) -> Result<Vec<AblationRow>> {
    let steps = [
        ("no_balancing", Strategy::None, ScanPattern::Raster),
        ("stratification", Strategy::Stratified, ScanPattern::Raster),
        (
            "local_presorting",
            Strategy::LocalPresort,
            ScanPattern::Raster,
        ),
        ("snake_scanning", Strategy::LocalPresort, ScanPattern::Snake),
        (
            "global_presorting",
            Strategy::GlobalPresort,
            ScanPattern::Raster,
        ),
    ];
    let mut prepared = Prepared::new(corpus);
    steps
        .into_iter()
        .map(|(label, strategy, scan)| {
            let exp = base.with_strategy(strategy, scan);
            Ok(AblationRow {
                label,
                strategy,
                scan,
                stats: run_prepared(&mut prepared, &exp)?,
            })
        })
        .collect()
}
