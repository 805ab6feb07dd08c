//! Two-stream latency model of one training iteration.
//!
//! The backward pass runs on a compute stream and emits buckets last to
//! first; bucket allreduces run in the same order on a single communication
//! stream. A bucket's allreduce starts once the bucket is ready and the
//! previous allreduce has finished.

use serde::{Deserialize, Serialize};

use crate::gradsync::ClipMode;
use crate::{Error, Result};

/// Per-bucket durations in abstract time units. Index `b` follows the bucket
/// layout order; the backward pass produces bucket `B-1` first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePlan {
    pub t_comp: Vec<f64>,
    pub t_comm: Vec<f64>,
    #[serde(default)]
    pub t_clip: Vec<f64>,
    /// Whole-gradient clip.
    #[serde(default)]
    pub t_gclip: f64,
    /// Extra norm collective before a whole-gradient clip before allreduce.
    #[serde(default)]
    pub t_nred: f64,
}

impl TimelinePlan {
    pub fn new(t_comp: Vec<f64>, t_comm: Vec<f64>) -> Result<Self> {
        let b = t_comp.len();
        let plan = Self {
            t_comp,
            t_comm,
            t_clip: vec![0.0; b],
            t_gclip: 0.0,
            t_nred: 0.0,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn buckets(&self) -> usize {
        self.t_comp.len()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.t_comp.len();
        if b == 0 {
            return Err(Error::invalid("t_comp", "plan needs at least one bucket"));
        }
        for (field, v) in [("t_comm", &self.t_comm), ("t_clip", &self.t_clip)] {
            if v.len() != b {
                return Err(Error::invalid(
                    field,
                    format!("{} entries for {b} buckets", v.len()),
                ));
            }
        }
        let all = self
            .t_comp
            .iter()
            .chain(&self.t_comm)
            .chain(&self.t_clip)
            .chain([&self.t_gclip, &self.t_nred]);
        if all.into_iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid(
                "plan",
                "durations must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Reads a TOML plan. Missing `t_clip` defaults to zeros.
    pub fn from_toml(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            t_comp: Vec<f64>,
            t_comm: Vec<f64>,
            t_clip: Option<Vec<f64>>,
            #[serde(default)]
            t_gclip: f64,
            #[serde(default)]
            t_nred: f64,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(1);
            Error::Parse {
                line,
                reason: e.message().to_string(),
            }
        })?;
        let b = raw.t_comp.len();
        let plan = Self {
            t_comp: raw.t_comp,
            t_comm: raw.t_comm,
            t_clip: raw.t_clip.unwrap_or_else(|| vec![0.0; b]),
            t_gclip: raw.t_gclip,
            t_nred: raw.t_nred,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    fn new(start: f64, len: f64) -> Self {
        Self {
            start,
            end: start + len,
        }
    }

    pub fn len(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BucketTimes {
    pub bucket: usize,
    pub compute: Interval,
    /// Per-bucket clip, bucket-wise mode only.
    pub clip: Option<Interval>,
    pub comm: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub mode: ClipMode,
    /// In execution order (bucket `B-1` first).
    pub buckets: Vec<BucketTimes>,
    pub norm_reduce: Option<Interval>,
    pub global_clip: Option<Interval>,
    pub total: f64,
}

impl Schedule {
    pub fn compute_busy(&self) -> f64 {
        let per_bucket: f64 = self
            .buckets
            .iter()
            .map(|b| b.compute.len() + b.clip.map_or(0.0, |c| c.len()))
            .sum();
        per_bucket + self.global_clip.map_or(0.0, |c| c.len())
    }

    /// Bucket allreduce time only; the norm collective is not counted
    /// against either stream.
    pub fn comm_busy(&self) -> f64 {
        self.buckets.iter().map(|b| b.comm.len()).sum()
    }
}

pub fn schedule(plan: &TimelinePlan, mode: ClipMode) -> Result<Schedule> {
    plan.validate()?;
    let order = (0..plan.buckets()).rev();
    let mut buckets = Vec::with_capacity(plan.buckets());
    let mut compute_free = 0.0;
    let mut comm_free = 0.0;

    match mode {
        ClipMode::AfterAllreduce | ClipMode::BucketWise => {
            let clip_each = mode == ClipMode::BucketWise;
            for b in order {
                let compute = Interval::new(compute_free, plan.t_comp[b]);
                compute_free = compute.end;
                let clip = clip_each.then(|| Interval::new(compute_free, plan.t_clip[b]));
                if let Some(c) = clip {
                    compute_free = c.end;
                }
                let comm = Interval::new(f64::max(compute_free, comm_free), plan.t_comm[b]);
                comm_free = comm.end;
                buckets.push(BucketTimes {
                    bucket: b,
                    compute,
                    clip,
                    comm,
                });
            }
            let (global_clip, total) = if clip_each {
                (None, comm_free)
            } else {
                let g = Interval::new(f64::max(comm_free, compute_free), plan.t_gclip);
                (Some(g), g.end)
            };
            Ok(Schedule {
                mode,
                buckets,
                norm_reduce: None,
                global_clip,
                total,
            })
        }
        ClipMode::BeforeAllreduce => {
            let computes: Vec<(usize, Interval)> = order
                .map(|b| {
                    let iv = Interval::new(compute_free, plan.t_comp[b]);
                    compute_free = iv.end;
                    (b, iv)
                })
                .collect();
            let nred = Interval::new(compute_free, plan.t_nred);
            let gclip = Interval::new(nred.end, plan.t_gclip);
            comm_free = gclip.end;
            for (b, compute) in computes {
                let comm = Interval::new(comm_free, plan.t_comm[b]);
                comm_free = comm.end;
                buckets.push(BucketTimes {
                    bucket: b,
                    compute,
                    clip: None,
                    comm,
                });
            }
            Ok(Schedule {
                mode,
                buckets,
                norm_reduce: Some(nred),
                global_clip: Some(gclip),
                total: comm_free,
            })
        }
    }
}

/// Shape of a plan independent of bucket count: totals are split evenly over
/// the buckets, and every allreduce pays a fixed latency on top of its share
/// of the volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanTemplate {
    pub total_compute: f64,
    pub total_comm: f64,
    /// Fixed cost per allreduce call.
    #[serde(default)]
    pub comm_latency: f64,
    /// Cost of clipping the whole gradient once; bucket-wise clipping splits
    /// the same work over the buckets.
    #[serde(default)]
    pub clip_cost: f64,
    #[serde(default)]
    pub norm_reduce: f64,
}

impl Default for PlanTemplate {
    fn default() -> Self {
        Self {
            total_compute: 100.0,
            total_comm: 80.0,
            comm_latency: 0.5,
            clip_cost: 2.0,
            norm_reduce: 0.0,
        }
    }
}

impl PlanTemplate {
    pub fn plan(&self, buckets: usize, comm_scale: f64) -> Result<TimelinePlan> {
        if buckets == 0 {
            return Err(Error::invalid("buckets", "must be at least 1"));
        }
        if !comm_scale.is_finite() || comm_scale < 0.0 {
            return Err(Error::invalid(
                "comm_scale",
                format!("{comm_scale} is not a non-negative number"),
            ));
        }
        let n = buckets as f64;
        let plan = TimelinePlan {
            t_comp: vec![self.total_compute / n; buckets],
            t_comm: vec![comm_scale * (self.total_comm / n + self.comm_latency); buckets],
            t_clip: vec![self.clip_cost / n; buckets],
            t_gclip: self.clip_cost,
            t_nred: self.norm_reduce,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: ClipMode,
    #[serde(rename = "B")]
    pub buckets: usize,
    pub total_latency: f64,
    pub compute_busy: f64,
    pub comm_busy: f64,
    pub comm_scale: f64,
}

/// Total latency for every (comm scale, bucket count, mode) combination, in
/// that nesting order.
pub fn sweep(
    template: &PlanTemplate,
    modes: &[ClipMode],
    bucket_counts: &[usize],
    comm_scales: &[f64],
) -> Result<Vec<SweepRow>> {
    if modes.is_empty() || bucket_counts.is_empty() || comm_scales.is_empty() {
        return Err(Error::invalid(
            "sweep",
            "every sweep axis needs at least one value",
        ));
    }
    let mut rows = Vec::with_capacity(modes.len() * bucket_counts.len() * comm_scales.len());
    for &scale in comm_scales {
        for &b in bucket_counts {
            let plan = template.plan(b, scale)?;
            for &mode in modes {
                rows.push(row(&plan, mode, scale)?);
            }
        }
    }
    Ok(rows)
}

/// One sweep row for an explicit plan.
pub fn row(plan: &TimelinePlan, mode: ClipMode, comm_scale: f64) -> Result<SweepRow> {
    let s = schedule(plan, mode)?;
    Ok(SweepRow {
        mode,
        buckets: plan.buckets(),
        total_latency: s.total,
        compute_busy: s.compute_busy(),
        comm_busy: s.comm_busy(),
        comm_scale,
    })
}
