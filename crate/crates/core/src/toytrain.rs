//! Toy data-parallel training run used to compare clipping disciplines.
//!
//! The model is linear regression on Gaussian features. Each of `K` workers
//! computes a mini-batch gradient per step; with probability `outlier_rate`
//! a worker's gradient is multiplied by `outlier_scale` to stand in for a
//! problematic mini-batch. Gradients are synchronized through
//! [`crate::gradsync`] and applied with Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::gradsync::{self, ClipConfig, ClipMode, GradientState};
use crate::stats::MeanStderr;
use crate::{Error, Result};

const TASK_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub dim: usize,
    pub batch_per_worker: usize,
    /// Standard deviation of the target noise.
    pub noise_std: f64,
    pub outlier_rate: f64,
    pub outlier_scale: f64,
    pub heldout: usize,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        Self {
            dim: 64,
            batch_per_worker: 16,
            noise_std: 0.5,
            outlier_rate: 0.05,
            outlier_scale: 100.0,
            heldout: 256,
            seed: 0,
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        if self.batch_per_worker == 0 {
            return Err(Error::invalid("batch_per_worker", "must be at least 1"));
        }
        if self.heldout == 0 {
            return Err(Error::invalid("heldout", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::invalid("outlier_rate", "must lie in [0, 1]"));
        }
        if !self.outlier_scale.is_finite() || self.outlier_scale < 1.0 {
            return Err(Error::invalid("outlier_scale", "must be at least 1"));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup from zero over `warmup_steps`, then linear decay to
    /// `end_ratio * lr` at `total_steps`.
    WarmupLinear {
        warmup_steps: usize,
        total_steps: usize,
        end_ratio: f64,
    },
}

impl LrSchedule {
    /// Learning rate for 1-based step `t`.
    pub fn lr_at(&self, base: f64, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::WarmupLinear {
                warmup_steps,
                total_steps,
                end_ratio,
            } => {
                if t <= warmup_steps {
                    base * t as f64 / warmup_steps as f64
                } else if t >= total_steps {
                    base * end_ratio
                } else {
                    let frac = (t - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
                    base * (1.0 - frac * (1.0 - end_ratio))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grad: &[f64],
    cfg: &AdamConfig,
) -> Result<()> {
    let dim = params.len();
    for len in [grad.len(), state.m.len(), state.v.len()] {
        if len != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: len,
            });
        }
    }
    if let Some(index) = grad
        .iter()
        .chain(params.iter())
        .position(|x| !x.is_finite())
    {
        return Err(Error::NonFinite { index: index % dim });
    }

    state.t += 1;
    let t = state.t as i32;
    let lr = cfg.schedule.lr_at(cfg.lr, state.t);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..dim {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: ClipMode,
    pub workers: usize,
    pub buckets: usize,
    pub steps: usize,
    pub threshold: f64,
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn new(mode: ClipMode) -> Self {
        Self {
            mode,
            workers: 16,
            buckets: 8,
            steps: 500,
            threshold: 1.0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        if self.buckets == 0 || self.buckets > dim {
            return Err(Error::invalid(
                "buckets",
                format!("must lie in 1..={dim}, got {}", self.buckets),
            ));
        }
        ClipConfig::new(self.threshold, self.mode)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub mode: ClipMode,
    pub initial_loss: f64,
    /// Held-out loss after each step, `losses[t-1]` after step `t`.
    pub losses: Vec<f64>,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(self.initial_loss)
    }
}

struct Problem {
    target: Vec<f64>,
    heldout_x: Vec<Vec<f64>>,
    heldout_y: Vec<f64>,
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Problem {
    fn new(task: &ToyTask) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
        rng.set_stream(TASK_STREAM);
        let target = gaussian_vec(&mut rng, task.dim);
        let mut heldout_x = Vec::with_capacity(task.heldout);
        let mut heldout_y = Vec::with_capacity(task.heldout);
        for _ in 0..task.heldout {
            let x = gaussian_vec(&mut rng, task.dim);
            let noise: f64 = rng.sample(StandardNormal);
            heldout_y.push(dot(&target, &x) + task.noise_std * noise);
            heldout_x.push(x);
        }
        Self {
            target,
            heldout_x,
            heldout_y,
        }
    }

    /// Half mean squared error on the held-out set.
    fn loss(&self, params: &[f64]) -> f64 {
        let sq: f64 = self
            .heldout_x
            .iter()
            .zip(&self.heldout_y)
            .map(|(x, y)| {
                let r = dot(params, x) - y;
                r * r
            })
            .sum();
        0.5 * sq / self.heldout_x.len() as f64
    }

    fn worker_gradient<R: Rng>(&self, task: &ToyTask, params: &[f64], rng: &mut R) -> Vec<f64> {
        let mut grad = vec![0.0; task.dim];
        for _ in 0..task.batch_per_worker {
            let x = gaussian_vec(rng, task.dim);
            let noise: f64 = rng.sample(StandardNormal);
            let y = dot(&self.target, &x) + task.noise_std * noise;
            let r = dot(params, &x) - y;
            for (g, xi) in grad.iter_mut().zip(&x) {
                *g += r * xi;
            }
        }
        let scale = if rng.random::<f64>() < task.outlier_rate {
            task.outlier_scale
        } else {
            1.0
        };
        let inv = scale / task.batch_per_worker as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        grad
    }
}

/// Runs `cfg.steps` synchronized steps from zero parameters.
///
/// The data stream depends only on `task.seed`, so runs that differ only in
/// clip mode see identical mini-batches and outlier events.
pub fn train(task: &ToyTask, cfg: &TrainConfig) -> Result<Trajectory> {
    task.validate()?;
    cfg.validate(task.dim)?;
    let clip = ClipConfig::new(cfg.threshold, cfg.mode)?;
    let problem = Problem::new(task);
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    rng.set_stream(DATA_STREAM);

    let mut params = vec![0.0; task.dim];
    let mut adam = AdamState::new(task.dim);
    let initial_loss = problem.loss(&params);
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let grads: Vec<Vec<f64>> = (0..cfg.workers)
            .map(|_| problem.worker_gradient(task, &params, &mut rng))
            .collect();
        let state = GradientState::with_equal_buckets(grads, cfg.buckets)?;
        let synced = match gradsync::synchronize(&state, &clip) {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step,
                    loss: f64::INFINITY,
                })
            }
            other => other?,
        };
        adam_step(&mut adam, &mut params, &synced, &cfg.adam)?;
        let loss = problem.loss(&params);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
    }
    Ok(Trajectory {
        mode: cfg.mode,
        initial_loss,
        losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub modes: Vec<ClipMode>,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub buckets: usize,
    pub steps: usize,
    pub threshold: f64,
    pub adam: AdamConfig,
}

impl CompareConfig {
    pub fn all_modes(seeds: Vec<u64>) -> Self {
        let base = TrainConfig::new(ClipMode::BucketWise);
        Self {
            modes: ClipMode::ALL.to_vec(),
            seeds,
            workers: base.workers,
            buckets: base.buckets,
            steps: base.steps,
            threshold: base.threshold,
            adam: base.adam,
        }
    }

    fn train_config(&self, mode: ClipMode) -> TrainConfig {
        TrainConfig {
            mode,
            workers: self.workers,
            buckets: self.buckets,
            steps: self.steps,
            threshold: self.threshold,
            adam: self.adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: ClipMode,
    pub mean_final_loss: f64,
    pub stderr: f64,
    /// Final loss per seed, in `CompareConfig::seeds` order.
    #[serde(skip)]
    pub final_losses: Vec<f64>,
}

/// Trains every (mode, seed) pair and summarizes final losses per mode. Rows
/// follow `cfg.modes` order regardless of execution order.
pub fn compare_modes(task: &ToyTask, cfg: &CompareConfig) -> Result<Vec<ModeSummary>> {
    if cfg.modes.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::invalid(
            "modes",
            "need at least one mode and one seed",
        ));
    }
    let jobs: Vec<(ClipMode, u64)> = cfg
        .modes
        .iter()
        .flat_map(|&m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run = |&(mode, seed): &(ClipMode, u64)| -> Result<f64> {
        let t = ToyTask {
            seed,
            ..task.clone()
        };
        Ok(train(&t, &cfg.train_config(mode))?.final_loss())
    };

    #[cfg(feature = "parallel")]
    let finals: Vec<f64> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let finals: Vec<f64> = jobs.iter().map(run).collect::<Result<_>>()?;

    Ok(cfg
        .modes
        .iter()
        .zip(finals.chunks(cfg.seeds.len()))
        .map(|(&mode, losses)| {
            let s = MeanStderr::of(losses);
            ModeSummary {
                mode,
                mean_final_loss: s.mean,
                stderr: s.stderr,
                final_losses: losses.to_vec(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_task(seed: u64) -> ToyTask {
        ToyTask {
            dim: 16,
            heldout: 64,
            seed,
            ..ToyTask::default()
        }
    }

    fn small_cfg(mode: ClipMode) -> TrainConfig {
        TrainConfig {
            workers: 4,
            buckets: 4,
            steps: 60,
            ..TrainConfig::new(mode)
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut s, &mut p, &[0.0; 3], &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let g = [3.0, -0.5, 1e-3];
        let mut s = AdamState::new(3);
        let mut p = vec![0.0; 3];
        adam_step(&mut s, &mut p, &g, &cfg).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            // m_hat / sqrt(v_hat) = g / |g| exactly up to eps
            let expected = -0.1 * gi / (gi.abs() + cfg.eps);
            assert!((pi - expected).abs() < 1e-12, "{pi} vs {expected}");
        }
    }

    #[test]
    fn memoryless_adam_is_sign_like() {
        let cfg = AdamConfig {
            lr: 0.05,
            beta1: 0.0,
            beta2: 0.0,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        adam_step(&mut s, &mut p, &[2.0, -4.0], &cfg).unwrap();
        adam_step(&mut s, &mut p, &[-1.0, 0.5], &cfg).unwrap();
        let step2 = |g: f64| -0.05 * g / (g.abs() + cfg.eps);
        let first = [1.0 + step2(2.0), 1.0 + step2(-4.0)];
        assert!((p[0] - (first[0] + step2(-1.0))).abs() < 1e-15);
        assert!((p[1] - (first[1] + step2(0.5))).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        let mut s = AdamState::new(1);
        let mut p = vec![2.0];
        adam_step(&mut s, &mut p, &[0.0], &cfg).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_bad_input() {
        let mut s = AdamState::new(2);
        let mut p = vec![0.0; 2];
        assert!(adam_step(&mut s, &mut p, &[1.0], &AdamConfig::default()).is_err());
        assert!(adam_step(&mut s, &mut p, &[f64::NAN, 0.0], &AdamConfig::default()).is_err());
        assert_eq!(s.t, 0);
    }

    #[test]
    fn warmup_schedule() {
        let s = LrSchedule::WarmupLinear {
            warmup_steps: 10,
            total_steps: 110,
            end_ratio: 0.1,
        };
        assert_eq!(s.lr_at(1.0, 5), 0.5);
        assert_eq!(s.lr_at(1.0, 10), 1.0);
        assert!((s.lr_at(1.0, 60) - 0.55).abs() < 1e-12);
        assert!((s.lr_at(1.0, 200) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&small_task(4), &small_cfg(ClipMode::BucketWise)).unwrap();
        let b = train(&small_task(4), &small_cfg(ClipMode::BucketWise)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.losses.len(), 60);
        assert!(a.final_loss() < a.initial_loss);
    }

    #[test]
    fn inactive_clipping_makes_modes_identical() {
        let task = ToyTask {
            outlier_rate: 0.0,
            ..small_task(8)
        };
        let runs: Vec<Trajectory> = ClipMode::ALL
            .iter()
            .map(|&m| {
                train(
                    &task,
                    &TrainConfig {
                        threshold: 1e12,
                        ..small_cfg(m)
                    },
                )
                .unwrap()
            })
            .collect();
        assert_eq!(runs[0].losses, runs[1].losses);
        assert_eq!(runs[1].losses, runs[2].losses);
    }

    #[test]
    fn single_bucket_matches_before_allreduce() {
        let task = small_task(2);
        let before = train(
            &task,
            &TrainConfig {
                buckets: 1,
                ..small_cfg(ClipMode::BeforeAllreduce)
            },
        )
        .unwrap();
        let bw = train(
            &task,
            &TrainConfig {
                buckets: 1,
                ..small_cfg(ClipMode::BucketWise)
            },
        )
        .unwrap();
        assert_eq!(before.losses, bw.losses);
    }

    #[test]
    fn config_validation() {
        let task = small_task(0);
        assert!(train(
            &task,
            &TrainConfig {
                buckets: 0,
                ..small_cfg(ClipMode::BucketWise)
            }
        )
        .is_err());
        assert!(train(
            &task,
            &TrainConfig {
                buckets: 17,
                ..small_cfg(ClipMode::BucketWise)
            }
        )
        .is_err());
        assert!(train(
            &task,
            &TrainConfig {
                workers: 0,
                ..small_cfg(ClipMode::BucketWise)
            }
        )
        .is_err());
        assert!(train(
            &ToyTask {
                outlier_rate: 1.5,
                ..task.clone()
            },
            &small_cfg(ClipMode::BucketWise)
        )
        .is_err());
        assert!(train(
            &ToyTask {
                outlier_scale: 0.5,
                ..task
            },
            &small_cfg(ClipMode::BucketWise)
        )
        .is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            adam: AdamConfig {
                lr: 1e200,
                ..AdamConfig::default()
            },
            ..small_cfg(ClipMode::AfterAllreduce)
        };
        let err = train(&small_task(1), &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1, .. }), "{err:?}");
    }

    #[test]
    fn comparison_rows_follow_mode_order() {
        let cfg = CompareConfig {
            modes: vec![ClipMode::BucketWise, ClipMode::BeforeAllreduce],
            seeds: vec![1, 2],
            workers: 4,
            buckets: 1,
            steps: 30,
            threshold: 1.0,
            adam: AdamConfig::default(),
        };
        let rows = compare_modes(&small_task(0), &cfg).unwrap();
        assert_eq!(rows[0].mode, ClipMode::BucketWise);
        assert_eq!(rows[0].final_losses, rows[1].final_losses);
        assert_eq!(rows[0].mean_final_loss, rows[1].mean_final_loss);

        let single = compare_modes(
            &small_task(0),
            &CompareConfig {
                modes: vec![ClipMode::AfterAllreduce],
                seeds: vec![5],
                ..cfg
            },
        )
        .unwrap();
        let direct = train(
            &small_task(5),
            &TrainConfig {
                workers: 4,
                buckets: 1,
                steps: 30,
                ..TrainConfig::new(ClipMode::AfterAllreduce)
            },
        )
        .unwrap();
        assert_eq!(single[0].mean_final_loss, direct.final_loss());
        assert_eq!(single[0].stderr, 0.0);
    }
}
