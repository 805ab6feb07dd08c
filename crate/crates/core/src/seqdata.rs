//! Samples, cluster topologies, and sequence-length corpora.

use std::io::BufRead;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_MAX_SEQ_LEN: u32 = 512;

/// Bin upper bounds of the default corpus: 1-128, 129-256, 257-384, 385-512.
pub const WIKIPEDIA_BOUNDARIES: [u32; 4] = [128, 256, 384, 512];

/// Published per-bin percentages of the Wikipedia pre-training corpus. They
/// add up to 100.1%, so [`LengthDistribution::wikipedia`] renormalizes them.
pub const WIKIPEDIA_PERCENTAGES: [f64; 4] = [0.373, 0.197, 0.117, 0.314];

const PROB_TOLERANCE: f64 = 1e-9;

/// One training sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    /// Token count.
    pub length: u32,
}

impl Sample {
    pub fn new(id: u64, length: u32) -> Self {
        Self { id, length }
    }
}

/// Cluster shape: `num_nodes` nodes of `gpus_per_node` GPUs each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    num_nodes: usize,
    gpus_per_node: usize,
}

impl Topology {
    pub fn new(num_nodes: usize, gpus_per_node: usize) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::invalid("num_nodes", "must be at least 1"));
        }
        if gpus_per_node == 0 {
            return Err(Error::invalid("gpus_per_node", "must be at least 1"));
        }
        Ok(Self {
            num_nodes,
            gpus_per_node,
        })
    }

    /// Splits `total_gpus` over `num_nodes` equal nodes.
    pub fn from_total(total_gpus: usize, num_nodes: usize) -> Result<Self> {
        if num_nodes == 0 || !total_gpus.is_multiple_of(num_nodes) {
            return Err(Error::invalid(
                "nodes",
                format!("{total_gpus} GPUs cannot be split evenly over {num_nodes} nodes"),
            ));
        }
        Self::new(num_nodes, total_gpus / num_nodes)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn gpus_per_node(&self) -> usize {
        self.gpus_per_node
    }

    pub fn total_gpus(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    /// Node that owns global GPU index `gpu`.
    pub fn node_of(&self, gpu: usize) -> usize {
        gpu / self.gpus_per_node
    }
}

/// How a length is drawn once its bin is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WithinBin {
    /// Uniform integer over the bin's inclusive range.
    #[default]
    Uniform,
    /// Every sample in the bin has the bin's upper bound as its length.
    UpperBound,
}

/// Histogram-style sequence-length distribution.
///
/// Bin `k` covers `(bin_boundaries[k-1], bin_boundaries[k]]`, with an implicit
/// lower edge of 0, so lengths are always at least 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub bin_boundaries: Vec<u32>,
    pub bin_probs: Vec<f64>,
    #[serde(default)]
    pub within_bin: WithinBin,
}

impl LengthDistribution {
    pub fn new(bin_boundaries: Vec<u32>, bin_probs: Vec<f64>) -> Result<Self> {
        let dist = Self {
            bin_boundaries,
            bin_probs,
            within_bin: WithinBin::Uniform,
        };
        dist.validate()?;
        Ok(dist)
    }

    /// Bi-modal default corpus with bins at 128/256/384/512.
    pub fn wikipedia() -> Self {
        let total: f64 = WIKIPEDIA_PERCENTAGES.iter().sum();
        Self {
            bin_boundaries: WIKIPEDIA_BOUNDARIES.to_vec(),
            bin_probs: WIKIPEDIA_PERCENTAGES.iter().map(|p| p / total).collect(),
            within_bin: WithinBin::Uniform,
        }
    }

    /// Single bin covering `1..=max_len`.
    pub fn uniform(max_len: u32) -> Self {
        Self {
            bin_boundaries: vec![max_len],
            bin_probs: vec![1.0],
            within_bin: WithinBin::Uniform,
        }
    }

    /// Every sample has length exactly `len`.
    pub fn constant(len: u32) -> Self {
        Self {
            bin_boundaries: vec![len],
            bin_probs: vec![1.0],
            within_bin: WithinBin::UpperBound,
        }
    }

    pub fn max_seq_len(&self) -> u32 {
        self.bin_boundaries.last().copied().unwrap_or(0)
    }

    /// Parses a TOML document with `bin_boundaries` and `bin_probs` keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let dist: Self = toml::from_str(text).map_err(|e| Error::Parse {
            line: toml_error_line(text, &e),
            reason: e.message().to_string(),
        })?;
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_boundaries.is_empty() {
            return Err(Error::invalid("bin_boundaries", "must not be empty"));
        }
        if self.bin_boundaries.len() != self.bin_probs.len() {
            return Err(Error::invalid(
                "bin_probs",
                format!(
                    "{} probabilities for {} bins",
                    self.bin_probs.len(),
                    self.bin_boundaries.len()
                ),
            ));
        }
        if self.bin_boundaries[0] == 0 {
            return Err(Error::invalid(
                "bin_boundaries",
                "boundaries must be positive",
            ));
        }
        if self.bin_boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(
                "bin_boundaries",
                "must be strictly ascending",
            ));
        }
        if let Some(p) = self.bin_probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::invalid(
                "bin_probs",
                format!("probability {p} is not a finite non-negative number"),
            ));
        }
        let total: f64 = self.bin_probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOLERANCE {
            return Err(Error::invalid(
                "bin_probs",
                format!("probabilities sum to {total}, expected 1"),
            ));
        }
        Ok(())
    }

    /// Inclusive length range of bin `k`.
    pub fn bin_range(&self, k: usize) -> (u32, u32) {
        let lo = if k == 0 {
            1
        } else {
            self.bin_boundaries[k - 1] + 1
        };
        (lo, self.bin_boundaries[k])
    }

    fn draw_length<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut bin = self.bin_probs.len() - 1;
        for (k, p) in self.bin_probs.iter().enumerate() {
            acc += p;
            if u < acc {
                bin = k;
                break;
            }
        }
        // Zero-probability trailing bins must never be picked by the fallback.
        while self.bin_probs[bin] == 0.0 && bin > 0 {
            bin -= 1;
        }
        let (lo, hi) = self.bin_range(bin);
        match self.within_bin {
            WithinBin::Uniform => rng.random_range(lo..=hi),
            WithinBin::UpperBound => hi,
        }
    }
}

fn toml_error_line(text: &str, err: &toml::de::Error) -> usize {
    err.span()
        .map(|span| text[..span.start.min(text.len())].lines().count().max(1))
        .unwrap_or(1)
}

/// Draws `n` samples with ids `0..n`. Deterministic for a fixed seed.
pub fn generate_corpus(dist: &LengthDistribution, n: usize, seed: u64) -> Result<Vec<Sample>> {
    dist.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| Sample::new(i as u64, dist.draw_length(&mut rng)))
        .collect())
}

/// Reads a newline-delimited list of token counts. Ids follow input order.
pub fn ingest_lengths<R: BufRead>(source: R, max_seq_len: u32) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        let field = line.trim();
        let length: i64 = field.parse().map_err(|_| Error::Parse {
            line: lineno,
            reason: format!("`{field}` is not an integer"),
        })?;
        if length < 1 || length > i64::from(max_seq_len) {
            return Err(Error::Parse {
                line: lineno,
                reason: format!("length {length} outside 1..={max_seq_len}"),
            });
        }
        samples.push(Sample::new(samples.len() as u64, length as u32));
    }
    Ok(samples)
}

pub fn ingest_lengths_str(text: &str, max_seq_len: u32) -> Result<Vec<Sample>> {
    ingest_lengths(text.as_bytes(), max_seq_len)
}

/// Counts samples per bin of `boundaries`; lengths above the last boundary
/// are ignored.
pub fn bin_counts(samples: &[Sample], boundaries: &[u32]) -> Vec<usize> {
    let mut counts = vec![0; boundaries.len()];
    for s in samples {
        if let Some(k) = boundaries.iter().position(|&b| s.length <= b) {
            counts[k] += 1;
        }
    }
    counts
}
