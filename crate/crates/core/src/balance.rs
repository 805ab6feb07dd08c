//! Batch-formation strategies: how one global batch is split over GPUs.
//!
//! All strategies are unpadded: a GPU's load is the sum of the token counts of
//! the sequences it receives.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::seqdata::{Sample, Topology};
use crate::{Error, Result};

/// Order in which a sorted list is dealt over a row of GPUs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanPattern {
    /// Left to right on every pass.
    #[default]
    Raster,
    /// Direction alternates each pass.
    Snake,
}

impl ScanPattern {
    /// GPU (within a row of `gpus`) that receives the `i`-th item.
    pub fn slot(self, i: usize, gpus: usize) -> usize {
        let pass = i / gpus;
        let pos = i % gpus;
        match self {
            ScanPattern::Snake if pass % 2 == 1 => gpus - 1 - pos,
            _ => pos,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScanPattern::Raster => "raster",
            ScanPattern::Snake => "snake",
        }
    }
}

impl fmt::Display for ScanPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScanPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raster" => Ok(ScanPattern::Raster),
            "snake" => Ok(ScanPattern::Snake),
            _ => Err(Error::invalid(
                "scan",
                format!("unknown scan pattern `{s}` (expected raster or snake)"),
            )),
        }
    }
}

/// Several samples concatenated into one model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Pack {
    pub members: Vec<Sample>,
    pub total_length: u32,
}

impl Pack {
    fn single(s: Sample) -> Self {
        Self {
            members: vec![s],
            total_length: s.length,
        }
    }
}

/// Per-GPU sample lists for one global batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub per_gpu: Vec<Vec<Sample>>,
    pub token_counts: Vec<u64>,
}

impl Assignment {
    /// Keeps each GPU's samples exactly as given.
    pub fn from_per_gpu(per_gpu: Vec<Vec<Sample>>) -> Self {
        let token_counts = per_gpu
            .iter()
            .map(|g| g.iter().map(|s| u64::from(s.length)).sum())
            .collect();
        Self {
            per_gpu,
            token_counts,
        }
    }

    pub fn min_tokens(&self) -> u64 {
        self.token_counts.iter().copied().min().unwrap_or(0)
    }

    pub fn max_tokens(&self) -> u64 {
        self.token_counts.iter().copied().max().unwrap_or(0)
    }

    pub fn token_range(&self) -> u64 {
        self.max_tokens() - self.min_tokens()
    }

    pub fn to_document(&self) -> AssignmentDocument {
        AssignmentDocument {
            gpus: self
                .per_gpu
                .iter()
                .zip(&self.token_counts)
                .map(|(samples, &tokens)| GpuLoad {
                    ids: samples.iter().map(|s| s.id).collect(),
                    tokens,
                })
                .collect(),
        }
    }
}

/// Serializable view of an [`Assignment`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentDocument {
    pub gpus: Vec<GpuLoad>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuLoad {
    pub ids: Vec<u64>,
    pub tokens: u64,
}

fn check_divisible(items: usize, gpus: usize) -> Result<()> {
    if !items.is_multiple_of(gpus) {
        return Err(Error::Indivisible { items, gpus });
    }
    Ok(())
}

/// Descending by length, ties by ascending id.
pub fn sort_descending(samples: &mut [Sample]) {
    samples.sort_unstable_by(|a, b| b.length.cmp(&a.length).then(a.id.cmp(&b.id)));
}

fn deal<T: Copy>(items: &[T], gpus: usize, scan: ScanPattern) -> Vec<Vec<T>> {
    let mut out: Vec<Vec<T>> = (0..gpus)
        .map(|_| Vec::with_capacity(items.len() / gpus))
        .collect();
    for (i, item) in items.iter().enumerate() {
        out[scan.slot(i, gpus)].push(*item);
    }
    out
}

/// Round-robin deal in input order.
pub fn assign_none(batch: &[Sample], topo: &Topology) -> Result<Assignment> {
    let gpus = topo.total_gpus();
    check_divisible(batch.len(), gpus)?;
    Ok(Assignment::from_per_gpu(deal(
        batch,
        gpus,
        ScanPattern::Raster,
    )))
}

/// Sorts the whole global batch and deals it over every GPU.
pub fn assign_global_presort(
    batch: &[Sample],
    topo: &Topology,
    scan: ScanPattern,
) -> Result<Assignment> {
    let gpus = topo.total_gpus();
    check_divisible(batch.len(), gpus)?;
    let mut sorted = batch.to_vec();
    sort_descending(&mut sorted);
    Ok(Assignment::from_per_gpu(deal(&sorted, gpus, scan)))
}

/// Greedy first-fit-decreasing packing: each pack is seeded with the longest
/// unpacked sample and then repeatedly extended with the longest unpacked
/// sample that still fits, up to `pack_limit` members.
pub fn pack_corpus(samples: &[Sample], pack_limit: usize, max_seq_len: u32) -> Result<Vec<Pack>> {
    if pack_limit == 0 {
        return Err(Error::invalid("pack_limit", "must be at least 1"));
    }
    if let Some(s) = samples.iter().find(|s| s.length > max_seq_len) {
        return Err(Error::SampleTooLong {
            id: s.id,
            length: s.length,
            max: max_seq_len,
        });
    }

    // length -> ids still waiting, ascending so pop() yields the smallest id
    // last; reversed on insert to keep id order deterministic.
    let mut open: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    let mut sorted = samples.to_vec();
    sort_descending(&mut sorted);
    for s in sorted.iter().rev() {
        open.entry(s.length).or_default().push(s.id);
    }

    let take = |open: &mut BTreeMap<u32, Vec<u64>>, len: u32| -> Sample {
        let ids = open.get_mut(&len).expect("length present");
        let id = ids.pop().expect("non-empty bucket");
        if ids.is_empty() {
            open.remove(&len);
        }
        Sample::new(id, len)
    };

    let mut packs = Vec::new();
    while let Some((&longest, _)) = open.iter().next_back() {
        let mut pack = Pack::single(take(&mut open, longest));
        while pack.members.len() < pack_limit {
            let room = max_seq_len - pack.total_length;
            let Some((&len, _)) = open.range(..=room).next_back() else {
                break;
            };
            let s = take(&mut open, len);
            pack.total_length += s.length;
            pack.members.push(s);
        }
        packs.push(pack);
    }
    Ok(packs)
}

/// Round-robin deal of whole packs.
pub fn assign_packing(packs: &[Pack], topo: &Topology) -> Result<Assignment> {
    let gpus = topo.total_gpus();
    check_divisible(packs.len(), gpus)?;
    let mut per_gpu: Vec<Vec<Sample>> = vec![Vec::new(); gpus];
    for (i, pack) in packs.iter().enumerate() {
        per_gpu[i % gpus].extend_from_slice(&pack.members);
    }
    Ok(Assignment::from_per_gpu(per_gpu))
}

/// Node-local presorting: each node pools its GPUs' samples, sorts them and
/// redistributes them over the same GPUs. Nothing crosses a node boundary.
pub fn assign_local_presort(
    per_gpu_draws: &[Vec<Sample>],
    topo: &Topology,
    scan: ScanPattern,
) -> Result<Assignment> {
    let gpus = topo.total_gpus();
    if per_gpu_draws.len() != gpus {
        return Err(Error::DimensionMismatch {
            expected: gpus,
            got: per_gpu_draws.len(),
        });
    }
    let per_gpu_count = per_gpu_draws.first().map_or(0, Vec::len);
    if let Some(bad) = per_gpu_draws.iter().find(|d| d.len() != per_gpu_count) {
        return Err(Error::DimensionMismatch {
            expected: per_gpu_count,
            got: bad.len(),
        });
    }

    let gpn = topo.gpus_per_node();
    let per_gpu = per_gpu_draws
        .chunks(gpn)
        .flat_map(|node| {
            let mut pooled: Vec<Sample> = node.iter().flatten().copied().collect();
            sort_descending(&mut pooled);
            deal(&pooled, gpn, scan)
        })
        .collect();
    Ok(Assignment::from_per_gpu(per_gpu))
}
