//! Browser bindings for the interactive demo page in `www/`.
//!
//! Every export takes plain numbers and returns a JSON string, so the page
//! needs no generated type glue beyond `wasm-bindgen`'s own. Seeds are `u32`
//! to stay clear of JavaScript `BigInt`.

use serde::Serialize;
use strataclip::gradsync::ClipMode;
use strataclip::mcsim::{self, AblationRow, BalanceExperiment, Strategy};
use strataclip::seqdata::{generate_corpus, LengthDistribution};
use strataclip::stats::pairwise_sum;
use strataclip::timeline::{self, PlanTemplate, Schedule};
use strataclip::toytrain::{self, ToyTask, TrainConfig};
use strataclip::Topology;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

/// Load-balance ablation on a generated Wikipedia-like corpus.
pub fn ablation_json(
    nodes: usize,
    gpus_per_node: usize,
    local_batch: usize,
    trials: usize,
    seed: u64,
) -> Result<String, String> {
    let topo = Topology::new(nodes, gpus_per_node).map_err(|e| e.to_string())?;
    let needed = topo.total_gpus() * local_batch;
    let corpus = generate_corpus(
        &LengthDistribution::wikipedia(),
        (needed * 8).max(20_000),
        seed,
    )
    .map_err(|e| e.to_string())?;
    let base = BalanceExperiment {
        local_batch,
        trials,
        ..BalanceExperiment::new(Strategy::LocalPresort, topo, seed)
    };
    let rows: Vec<AblationRow> = mcsim::run_ablation(&corpus, &base).map_err(|e| e.to_string())?;
    to_json(&rows)
}

/// Schedules of all three clipping disciplines for the default plan shape.
pub fn timeline_json(buckets: usize, comm_scale: f64, clip_cost: f64) -> Result<String, String> {
    let template = PlanTemplate {
        clip_cost,
        ..PlanTemplate::default()
    };
    let plan = template
        .plan(buckets, comm_scale)
        .map_err(|e| e.to_string())?;
    let schedules = ClipMode::ALL
        .iter()
        .map(|&m| timeline::schedule(&plan, m))
        .collect::<strataclip::Result<Vec<Schedule>>>()
        .map_err(|e| e.to_string())?;
    to_json(&schedules)
}

#[derive(Serialize)]
struct Curve {
    mode: ClipMode,
    /// Mean held-out loss over seeds after each step.
    mean_loss: Vec<f64>,
    final_loss: f64,
}

/// Seed-averaged loss curves of the toy regression task under each mode.
pub fn clip_compare_json(
    seeds: usize,
    steps: usize,
    outlier_rate: f64,
    outlier_scale: f64,
    seed: u64,
) -> Result<String, String> {
    if seeds == 0 {
        return Err("need at least one seed".into());
    }
    let curves = ClipMode::ALL
        .iter()
        .map(|&mode| {
            let runs = (0..seeds as u64)
                .map(|i| {
                    let task = ToyTask {
                        outlier_rate,
                        outlier_scale,
                        seed: seed.wrapping_add(i),
                        ..ToyTask::default()
                    };
                    toytrain::train(
                        &task,
                        &TrainConfig {
                            steps,
                            ..TrainConfig::new(mode)
                        },
                    )
                })
                .collect::<strataclip::Result<Vec<_>>>()
                .map_err(|e| e.to_string())?;
            let mean_loss: Vec<f64> = (0..steps)
                .map(|t| {
                    let at: Vec<f64> = runs.iter().map(|r| r.losses[t]).collect();
                    pairwise_sum(&at) / seeds as f64
                })
                .collect();
            let final_loss = mean_loss.last().copied().unwrap_or(f64::NAN);
            Ok(Curve {
                mode,
                mean_loss,
                final_loss,
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    to_json(&curves)
}

#[wasm_bindgen]
pub fn ablation(
    nodes: usize,
    gpus_per_node: usize,
    local_batch: usize,
    trials: usize,
    seed: u32,
) -> Result<String, JsError> {
    ablation_json(nodes, gpus_per_node, local_batch, trials, seed.into())
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn timeline(buckets: usize, comm_scale: f64, clip_cost: f64) -> Result<String, JsError> {
    timeline_json(buckets, comm_scale, clip_cost).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn clip_compare(
    seeds: usize,
    steps: usize,
    outlier_rate: f64,
    outlier_scale: f64,
    seed: u32,
) -> Result<String, JsError> {
    clip_compare_json(seeds, steps, outlier_rate, outlier_scale, seed.into())
        .map_err(|e| JsError::new(&e))
}
