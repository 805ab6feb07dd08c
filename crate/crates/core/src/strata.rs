//! Length-based stratification and proportional per-stratum sampling.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;

use crate::seqdata::Sample;
use crate::{Error, Result};

// Published stratum percentages are rounded (they can sum to 100.1%), so
// allocation accepts a small slack and renormalizes.
const PROB_TOLERANCE: f64 = 1e-2;

/// A corpus partitioned by sequence length.
///
/// Stratum `k` holds the samples with `boundaries[k-1] < length <= boundaries[k]`.
/// The full pools are kept for stateless sampling; `remaining` tracks what is
/// left for [`Strata::draw_batch`] within the current epoch.
#[derive(Debug, Clone)]
pub struct Strata {
    boundaries: Vec<u32>,
    pools: Vec<Vec<Sample>>,
    remaining: Vec<Vec<Sample>>,
    probs: Vec<f64>,
}

/// Number of samples to take from each stratum for one local batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StratumAllocation {
    pub counts: Vec<usize>,
    pub local_batch: usize,
}

/// What [`Strata::draw_batch_with`] does when a stratum runs dry before the
/// epoch ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Shortfall {
    #[default]
    Error,
    /// Take the missing samples from the nearest non-empty stratum, lower
    /// stratum first on ties.
    BorrowNearest,
}

pub fn stratify(samples: &[Sample], boundaries: &[u32]) -> Result<Strata> {
    if boundaries.is_empty() {
        return Err(Error::invalid("boundaries", "must not be empty"));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("boundaries", "must be strictly ascending"));
    }
    let max = *boundaries.last().unwrap();
    let mut pools = vec![Vec::new(); boundaries.len()];
    for s in samples {
        let k = boundaries
            .partition_point(|&b| b < s.length)
            .min(boundaries.len());
        if k == boundaries.len() {
            return Err(Error::SampleTooLong {
                id: s.id,
                length: s.length,
                max,
            });
        }
        pools[k].push(*s);
    }
    let total = samples.len();
    let probs = pools
        .iter()
        .map(|p| {
            if total == 0 {
                0.0
            } else {
                p.len() as f64 / total as f64
            }
        })
        .collect();
    Ok(Strata {
        boundaries: boundaries.to_vec(),
        remaining: pools.clone(),
        pools,
        probs,
    })
}

/// Largest-remainder (Hamilton) apportionment of `local_batch` over `probs`.
/// Ties on the remainder go to the lower stratum index.
pub fn allocate_counts(probs: &[f64], local_batch: usize) -> Result<StratumAllocation> {
    if probs.is_empty() {
        return Err(Error::invalid("probs", "must not be empty"));
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::invalid(
            "probs",
            format!("{p} is not a valid probability"),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PROB_TOLERANCE {
        return Err(Error::invalid(
            "probs",
            format!("probabilities sum to {total}, expected 1"),
        ));
    }

    let quotas: Vec<f64> = probs
        .iter()
        .map(|p| p / total * local_batch as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &k in order.iter().take(local_batch.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    Ok(StratumAllocation {
        counts,
        local_batch,
    })
}

impl Strata {
    pub fn boundaries(&self) -> &[u32] {
        &self.boundaries
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_strata(&self) -> usize {
        self.pools.len()
    }

    pub fn pool(&self, k: usize) -> &[Sample] {
        &self.pools[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.pools.iter().map(Vec::len).collect()
    }

    pub fn remaining(&self) -> Vec<usize> {
        self.remaining.iter().map(Vec::len).collect()
    }

    pub fn total_remaining(&self) -> usize {
        self.remaining.iter().map(Vec::len).sum()
    }

    /// Refills every pool for a new epoch.
    pub fn reset(&mut self) {
        self.remaining = self.pools.clone();
    }

    /// Draws `alloc.counts[k]` samples without replacement from stratum `k`.
    /// Fails without consuming anything if a stratum has too few samples left.
    pub fn draw_batch<R: Rng + ?Sized>(
        &mut self,
        alloc: &StratumAllocation,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        self.draw_batch_with(alloc, Shortfall::Error, rng)
    }

    pub fn draw_batch_with<R: Rng + ?Sized>(
        &mut self,
        alloc: &StratumAllocation,
        shortfall: Shortfall,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        self.check_alloc(alloc)?;
        let counts = match shortfall {
            Shortfall::Error => {
                for (k, (&need, pool)) in alloc.counts.iter().zip(&self.remaining).enumerate() {
                    if need > pool.len() {
                        return Err(Error::PoolExhausted {
                            stratum: k,
                            needed: need,
                            available: pool.len(),
                        });
                    }
                }
                alloc.counts.clone()
            }
            Shortfall::BorrowNearest => self.borrowed_counts(&alloc.counts)?,
        };

        let mut batch = Vec::with_capacity(alloc.local_batch);
        for (pool, &need) in self.remaining.iter_mut().zip(&counts) {
            for _ in 0..need {
                let i = rng.random_range(0..pool.len());
                batch.push(pool.swap_remove(i));
            }
        }
        Ok(batch)
    }

    fn borrowed_counts(&self, wanted: &[usize]) -> Result<Vec<usize>> {
        let avail = self.remaining();
        let mut counts = wanted.to_vec();
        let n = counts.len();
        for k in 0..n {
            if counts[k] <= avail[k] {
                continue;
            }
            let mut deficit = counts[k] - avail[k];
            counts[k] = avail[k];
            for dist in 1..n {
                let neighbours = [k.checked_sub(dist), Some(k + dist).filter(|&j| j < n)];
                for j in neighbours.into_iter().flatten() {
                    let spare = avail[j].saturating_sub(counts[j]);
                    let take = spare.min(deficit);
                    counts[j] += take;
                    deficit -= take;
                }
                if deficit == 0 {
                    break;
                }
            }
            if deficit > 0 {
                return Err(Error::PoolExhausted {
                    stratum: k,
                    needed: wanted[k],
                    available: avail[k],
                });
            }
        }
        Ok(counts)
    }

    /// Draws one stratified local batch per GPU from the full pools, without
    /// replacement across all GPUs, leaving the epoch state untouched.
    pub fn sample_per_gpu<R: Rng + ?Sized>(
        &self,
        alloc: &StratumAllocation,
        gpus: usize,
        rng: &mut R,
    ) -> Result<Vec<Vec<Sample>>> {
        self.check_alloc(alloc)?;
        let mut per_gpu: Vec<Vec<Sample>> = (0..gpus)
            .map(|_| Vec::with_capacity(alloc.local_batch))
            .collect();
        for (k, (&need, pool)) in alloc.counts.iter().zip(&self.pools).enumerate() {
            let total = need * gpus;
            if total > pool.len() {
                return Err(Error::PoolExhausted {
                    stratum: k,
                    needed: total,
                    available: pool.len(),
                });
            }
            if need == 0 {
                continue;
            }
            let picks = index::sample(rng, pool.len(), total);
            for (slot, i) in picks.into_iter().enumerate() {
                per_gpu[slot / need].push(pool[i]);
            }
        }
        Ok(per_gpu)
    }

    fn check_alloc(&self, alloc: &StratumAllocation) -> Result<()> {
        if alloc.counts.len() != self.pools.len() {
            return Err(Error::DimensionMismatch {
                expected: self.pools.len(),
                got: alloc.counts.len(),
            });
        }
        Ok(())
    }
}
