//! Gradient synchronization over simulated data-parallel workers under three
//! clipping disciplines.
//!
//! * [`ClipMode::AfterAllreduce`]: average first, clip the averaged gradient.
//! * [`ClipMode::BeforeAllreduce`]: every worker clips its full local gradient,
//!   then the clipped gradients are averaged.
//! * [`ClipMode::BucketWise`]: every worker clips each bucket to `c / sqrt(B)`
//!   as soon as that bucket is produced, and the bucket is averaged right away.
//!   Buckets are visited last to first, the order a backward pass emits them.
//!
//! The per-bucket threshold keeps the concatenated result within the global
//! cap: `sqrt(B * (c / sqrt(B))^2) = c`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    AfterAllreduce,
    BeforeAllreduce,
    BucketWise,
}

impl ClipMode {
    pub const ALL: [ClipMode; 3] = [
        ClipMode::AfterAllreduce,
        ClipMode::BeforeAllreduce,
        ClipMode::BucketWise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClipMode::AfterAllreduce => "after_allreduce",
            ClipMode::BeforeAllreduce => "before_allreduce",
            ClipMode::BucketWise => "bucket_wise",
        }
    }
}

impl fmt::Display for ClipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after_allreduce" | "after" => Ok(ClipMode::AfterAllreduce),
            "before_allreduce" | "before" => Ok(ClipMode::BeforeAllreduce),
            "bucket_wise" | "bucketwise" | "bucket" => Ok(ClipMode::BucketWise),
            _ => Err(Error::invalid(
                "mode",
                format!("unknown clip mode `{s}` (valid: after_allreduce, before_allreduce, bucket_wise)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub threshold: f64,
    pub mode: ClipMode,
}

impl ClipConfig {
    pub fn new(threshold: f64, mode: ClipMode) -> Result<Self> {
        if !threshold.is_finite() || threshold <= 0.0 {
            return Err(Error::invalid(
                "threshold",
                format!("{threshold} is not a positive finite number"),
            ));
        }
        Ok(Self { threshold, mode })
    }

    fn expect(&self, mode: ClipMode) -> Result<()> {
        if self.mode != mode {
            return Err(Error::ModeMismatch {
                expected: mode.as_str(),
                got: self.mode.as_str(),
            });
        }
        Ok(())
    }
}

/// Partition of `[0, dim)` into contiguous, ordered index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketLayout {
    ranges: Vec<Range<usize>>,
    dim: usize,
}

impl BucketLayout {
    /// `buckets` equal ranges; the last one absorbs the remainder.
    pub fn equal(dim: usize, buckets: usize) -> Result<Self> {
        if buckets == 0 {
            return Err(Error::invalid("buckets", "must be at least 1"));
        }
        if buckets > dim {
            return Err(Error::invalid(
                "buckets",
                format!("{buckets} buckets for a {dim}-element gradient"),
            ));
        }
        let size = dim / buckets;
        let ranges = (0..buckets)
            .map(|b| {
                let end = if b + 1 == buckets {
                    dim
                } else {
                    (b + 1) * size
                };
                b * size..end
            })
            .collect();
        Ok(Self { ranges, dim })
    }

    /// Arbitrary contiguous ranges that tile `[0, dim)` in order.
    pub fn from_ranges(ranges: Vec<Range<usize>>, dim: usize) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::invalid(
                "buckets",
                "layout must have at least one bucket",
            ));
        }
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(Error::invalid(
                    "buckets",
                    format!(
                        "range {}..{} does not continue the layout at {next}",
                        r.start, r.end
                    ),
                ));
            }
            next = r.end;
        }
        if next != dim {
            return Err(Error::invalid(
                "buckets",
                format!("layout covers [0, {next}) but the gradient has {dim} elements"),
            ));
        }
        Ok(Self { ranges, dim })
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Local gradients of `K` workers sharing one bucket layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientState {
    workers: Vec<Vec<f64>>,
    layout: BucketLayout,
}

impl GradientState {
    pub fn new(workers: Vec<Vec<f64>>, layout: BucketLayout) -> Result<Self> {
        if workers.is_empty() {
            return Err(Error::invalid("workers", "need at least one worker"));
        }
        for w in &workers {
            if w.len() != layout.dim() {
                return Err(Error::DimensionMismatch {
                    expected: layout.dim(),
                    got: w.len(),
                });
            }
        }
        Ok(Self { workers, layout })
    }

    pub fn with_equal_buckets(workers: Vec<Vec<f64>>, buckets: usize) -> Result<Self> {
        let dim = workers.first().map_or(0, Vec::len);
        Self::new(workers, BucketLayout::equal(dim, buckets)?)
    }

    pub fn workers(&self) -> &[Vec<f64>] {
        &self.workers
    }

    pub fn layout(&self) -> &BucketLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GradientDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })?;
        doc.into_state()
    }
}

/// File form of a [`GradientState`]: per-worker vectors plus either a bucket
/// count or explicit `[start, end)` ranges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientDocument {
    pub workers: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_ranges: Option<Vec<[usize; 2]>>,
}

impl GradientDocument {
    pub fn into_state(self) -> Result<GradientState> {
        let dim = self.workers.first().map_or(0, Vec::len);
        let layout = match (self.buckets, self.bucket_ranges) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid(
                    "buckets",
                    "give either `buckets` or `bucket_ranges`, not both",
                ))
            }
            (_, Some(ranges)) => {
                BucketLayout::from_ranges(ranges.into_iter().map(|[s, e]| s..e).collect(), dim)?
            }
            (b, None) => BucketLayout::equal(dim, b.unwrap_or(1))?,
        };
        GradientState::new(self.workers, layout)
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    let sq: f64 = g.iter().map(|x| x * x).sum();
    if sq.is_finite() {
        return sq.sqrt();
    }
    // squares overflowed: rescale by the largest magnitude
    let peak = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    peak * g
        .iter()
        .map(|x| (x / peak) * (x / peak))
        .sum::<f64>()
        .sqrt()
}

fn check_finite(g: &[f64]) -> Result<()> {
    match g.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Clip-by-norm: if `||g|| >= limit`, rescale to `limit * g / ||g||`.
pub fn clip_by_norm(g: &[f64], limit: f64) -> Result<Vec<f64>> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, limit)?;
    Ok(out)
}

/// In-place [`clip_by_norm`]; returns whether the vector was rescaled.
pub fn clip_in_place(g: &mut [f64], limit: f64) -> Result<bool> {
    if limit.is_nan() || limit <= 0.0 {
        return Err(Error::invalid("limit", format!("{limit} is not positive")));
    }
    check_finite(g)?;
    let norm = l2_norm(g);
    if norm >= limit {
        for x in g.iter_mut() {
            *x = limit * *x / norm;
        }
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Elementwise mean over workers.
///
/// Deviations from worker 0 are summed with a pairwise tree in ascending
/// worker order; the mean is `v0 + sum / K`. Identical inputs therefore
/// reduce to exactly the common vector.
pub fn allreduce_mean(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let Some(first) = vectors.first() else {
        return Err(Error::invalid("workers", "need at least one worker"));
    };
    let dim = first.len();
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    let k = vectors.len() as f64;
    let dev = tree_deviation_sum(vectors, first);
    Ok(first
        .iter()
        .zip(dev)
        .map(|(base, d)| base + d / k)
        .collect())
}

fn tree_deviation_sum(vectors: &[&[f64]], base: &[f64]) -> Vec<f64> {
    if vectors.len() == 1 {
        return vectors[0].iter().zip(base).map(|(x, b)| x - b).collect();
    }
    let mid = vectors.len() / 2;
    let mut left = tree_deviation_sum(&vectors[..mid], base);
    let right = tree_deviation_sum(&vectors[mid..], base);
    for (l, r) in left.iter_mut().zip(right) {
        *l += r;
    }
    left
}

fn full_views(state: &GradientState) -> Vec<&[f64]> {
    state.workers.iter().map(Vec::as_slice).collect()
}

pub fn sync_after(state: &GradientState, cfg: &ClipConfig) -> Result<Vec<f64>> {
    cfg.expect(ClipMode::AfterAllreduce)?;
    for w in &state.workers {
        check_finite(w)?;
    }
    let mut mean = allreduce_mean(&full_views(state))?;
    clip_in_place(&mut mean, cfg.threshold)?;
    Ok(mean)
}

pub fn sync_before(state: &GradientState, cfg: &ClipConfig) -> Result<Vec<f64>> {
    cfg.expect(ClipMode::BeforeAllreduce)?;
    let clipped = state
        .workers
        .iter()
        .map(|w| clip_by_norm(w, cfg.threshold))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<&[f64]> = clipped.iter().map(Vec::as_slice).collect();
    allreduce_mean(&views)
}

/// Threshold applied to each of `buckets` buckets.
pub fn bucket_threshold(threshold: f64, buckets: usize) -> f64 {
    threshold / (buckets as f64).sqrt()
}

pub fn sync_bucketwise(state: &GradientState, cfg: &ClipConfig) -> Result<Vec<f64>> {
    cfg.expect(ClipMode::BucketWise)?;
    let limit = bucket_threshold(cfg.threshold, state.layout.len());
    let mut out = vec![0.0; state.dim()];
    for range in state.layout.ranges().iter().rev() {
        let clipped = state
            .workers
            .iter()
            .map(|w| clip_by_norm(&w[range.clone()], limit))
            .collect::<Result<Vec<_>>>()?;
        let views: Vec<&[f64]> = clipped.iter().map(Vec::as_slice).collect();
        out[range.clone()].copy_from_slice(&allreduce_mean(&views)?);
    }
    Ok(out)
}

/// Dispatches on `cfg.mode`.
pub fn synchronize(state: &GradientState, cfg: &ClipConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        ClipMode::AfterAllreduce => sync_after(state, cfg),
        ClipMode::BeforeAllreduce => sync_before(state, cfg),
        ClipMode::BucketWise => sync_bucketwise(state, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: f64, mode: ClipMode) -> ClipConfig {
        ClipConfig::new(c, mode).unwrap()
    }

    fn state(workers: Vec<Vec<f64>>, buckets: usize) -> GradientState {
        GradientState::with_equal_buckets(workers, buckets).unwrap()
    }

    #[test]
    fn clip_formula() {
        assert_eq!(clip_by_norm(&[3.0, 4.0], 1.0).unwrap(), vec![0.6, 0.8]);
        assert_eq!(clip_by_norm(&[3.0, 4.0], 10.0).unwrap(), vec![3.0, 4.0]);
        assert_eq!(clip_by_norm(&[0.0; 3], 0.5).unwrap(), vec![0.0; 3]);
        // exactly at the threshold the scale factor is 1
        assert_eq!(clip_by_norm(&[3.0, 4.0], 5.0).unwrap(), vec![3.0, 4.0]);
    }

    #[test]
    fn clip_errors() {
        assert_eq!(
            clip_by_norm(&[1.0, f64::NAN], 1.0).unwrap_err(),
            Error::NonFinite { index: 1 }
        );
        assert!(clip_by_norm(&[f64::INFINITY], 1.0).is_err());
        assert!(clip_by_norm(&[1.0], 0.0).is_err());
        let huge = clip_by_norm(&[3e300, 4e300], 1.0).unwrap();
        assert!((huge[0] - 0.6).abs() < 1e-15 && (huge[1] - 0.8).abs() < 1e-15);
        assert!(ClipConfig::new(-1.0, ClipMode::BucketWise).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(
            allreduce_mean(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap(),
            vec![2.0, 3.0]
        );
        assert_eq!(allreduce_mean(&[&[0.1, -7.0]]).unwrap(), vec![0.1, -7.0]);
        let v = [0.1, 1.0 / 3.0, -2.7e-5];
        let same: Vec<&[f64]> = vec![&v; 7];
        assert_eq!(allreduce_mean(&same).unwrap(), v.to_vec());
        assert!(allreduce_mean(&[&[1.0], &[1.0, 2.0]]).is_err());
        assert!(allreduce_mean(&[]).is_err());
    }

    #[test]
    fn after_allreduce_examples() {
        let c = cfg(1.0, ClipMode::AfterAllreduce);
        let s = state(vec![vec![6.0, 8.0], vec![6.0, 8.0]], 1);
        assert_eq!(sync_after(&s, &c).unwrap(), vec![0.6, 0.8]);

        let s = state(vec![vec![2.0, 0.0], vec![0.0, 2.0]], 1);
        assert_eq!(
            sync_after(&s, &cfg(10.0, ClipMode::AfterAllreduce)).unwrap(),
            vec![1.0, 1.0]
        );

        let s = state(vec![vec![1000.0, 0.0], vec![0.0, 0.0]], 1);
        assert_eq!(sync_after(&s, &c).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn before_allreduce_examples() {
        let c = cfg(1.0, ClipMode::BeforeAllreduce);
        let s = state(vec![vec![6.0, 8.0], vec![6.0, 8.0]], 1);
        assert_eq!(sync_before(&s, &c).unwrap(), vec![0.6, 0.8]);

        let s = state(vec![vec![1000.0, 0.0], vec![0.0, 1.0]], 1);
        assert_eq!(sync_before(&s, &c).unwrap(), vec![0.5, 0.5]);

        let g = vec![3.0, -1.0, 2.5];
        let s = state(vec![g.clone()], 1);
        assert_eq!(sync_before(&s, &c).unwrap(), clip_by_norm(&g, 1.0).unwrap());
    }

    #[test]
    fn bucketwise_examples() {
        let s = state(vec![vec![3.0, 4.0, 3.0, 4.0, 3.0, 4.0, 3.0, 4.0]], 4);
        let out = sync_bucketwise(&s, &cfg(1.0, ClipMode::BucketWise)).unwrap();
        assert_eq!(out, vec![0.3, 0.4, 0.3, 0.4, 0.3, 0.4, 0.3, 0.4]);
        assert!((l2_norm(&out) - 1.0).abs() < 1e-15);

        let s = state(vec![vec![0.0; 6]; 3], 3);
        assert_eq!(
            sync_bucketwise(&s, &cfg(1.0, ClipMode::BucketWise)).unwrap(),
            vec![0.0; 6]
        );

        let s = state(vec![vec![1000.0, 0.0, 5.0], vec![0.0, 1.0, -2.0]], 1);
        assert_eq!(
            sync_bucketwise(&s, &cfg(1.0, ClipMode::BucketWise)).unwrap(),
            sync_before(&s, &cfg(1.0, ClipMode::BeforeAllreduce)).unwrap()
        );
    }

    #[test]
    fn consensus_equivalence() {
        let g = vec![4.0, -2.0, 9.0, 0.5];
        let s = state(vec![g.clone(); 5], 1);
        let outs: Vec<Vec<f64>> = ClipMode::ALL
            .iter()
            .map(|&m| synchronize(&s, &cfg(1.0, m)).unwrap())
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn mode_must_match() {
        let s = state(vec![vec![1.0]], 1);
        assert_eq!(
            sync_after(&s, &cfg(1.0, ClipMode::BucketWise)).unwrap_err(),
            Error::ModeMismatch {
                expected: "after_allreduce",
                got: "bucket_wise"
            }
        );
    }

    #[test]
    fn layouts() {
        let l = BucketLayout::equal(10, 3).unwrap();
        assert_eq!(l.ranges(), &[0..3, 3..6, 6..10]);
        assert!(BucketLayout::equal(10, 0).is_err());
        assert!(BucketLayout::equal(2, 3).is_err());
        assert!(BucketLayout::from_ranges(vec![0..2, 2..5], 5).is_ok());
        assert!(BucketLayout::from_ranges(vec![0..2, 3..5], 5).is_err());
        assert!(BucketLayout::from_ranges(std::iter::once(0..2).collect(), 5).is_err());
        assert!(GradientState::new(
            vec![vec![1.0; 4], vec![1.0; 3]],
            BucketLayout::equal(4, 2).unwrap()
        )
        .is_err());
    }

    #[test]
    fn state_from_document() {
        let s = GradientState::from_json(
            r#"{"workers": [[1, 2, 3], [4, 5, 6]], "bucket_ranges": [[0, 1], [1, 3]]}"#,
        )
        .unwrap();
        assert_eq!(s.layout().ranges(), &[0..1, 1..3]);
        let s = GradientState::from_json(r#"{"workers": [[1, 2, 3, 4]], "buckets": 2}"#).unwrap();
        assert_eq!(s.layout().len(), 2);
        let err = GradientState::from_json("{\n\"workers\": [[1, 2],\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn mode_names() {
        for m in ClipMode::ALL {
            assert_eq!(m.as_str().parse::<ClipMode>().unwrap(), m);
        }
        assert_eq!(
            "before".parse::<ClipMode>().unwrap(),
            ClipMode::BeforeAllreduce
        );
        assert!("sideways".parse::<ClipMode>().is_err());
    }
}
