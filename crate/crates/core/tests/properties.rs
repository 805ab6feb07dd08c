use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use strataclip::balance::{
    self, assign_global_presort, assign_local_presort, assign_none, pack_corpus, Assignment,
    ScanPattern,
};
use strataclip::gradsync::{
    self, allreduce_mean, bucket_threshold, l2_norm, ClipConfig, ClipMode, GradientState,
};
use strataclip::seqdata::{bin_counts, generate_corpus, LengthDistribution, WIKIPEDIA_BOUNDARIES};
use strataclip::strata::{allocate_counts, stratify, Shortfall};
use strataclip::timeline::{schedule, TimelinePlan};
use strataclip::{Sample, Topology};

fn samples(lengths: &[u32]) -> Vec<Sample> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| Sample::new(i as u64, l))
        .collect()
}

fn ids(samples: impl IntoIterator<Item = Sample>) -> Vec<(u64, u32)> {
    let mut v: Vec<_> = samples.into_iter().map(|s| (s.id, s.length)).collect();
    v.sort_unstable();
    v
}

fn assigned(a: &Assignment) -> Vec<(u64, u32)> {
    ids(a.per_gpu.iter().flatten().copied())
}

fn mode(m: ClipMode, c: f64) -> ClipConfig {
    ClipConfig::new(c, m).unwrap()
}

prop_compose! {
    /// `gpus` GPUs and a batch that splits evenly over them.
    fn dealt_batch()(gpus in 1usize..=64, rounds in 1usize..=16)
        (lengths in vec(1u32..=512, gpus * rounds), gpus in Just(gpus)) -> (Vec<u32>, usize) {
        (lengths, gpus)
    }
}

prop_compose! {
    fn grad_state(max_workers: usize)
        (workers in 1..=max_workers, buckets in 1usize..=8, extra in 0usize..24)
        (rows in vec(vec(-1e3f64..1e3, buckets + extra), workers), buckets in Just(buckets))
        -> GradientState {
        GradientState::with_equal_buckets(rows, buckets).unwrap()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn snake_never_widens_the_spread((lengths, gpus) in dealt_batch()) {
        let topo = Topology::new(1, gpus).unwrap();
        let batch = samples(&lengths);
        let raster = assign_global_presort(&batch, &topo, ScanPattern::Raster).unwrap();
        let snake = assign_global_presort(&batch, &topo, ScanPattern::Snake).unwrap();
        prop_assert!(snake.token_range() <= raster.token_range());
    }
}

proptest! {
    #[test]
    fn every_strategy_conserves_samples(
        (lengths, gpus) in dealt_batch(),
        snake in any::<bool>(),
    ) {
        let scan = if snake { ScanPattern::Snake } else { ScanPattern::Raster };
        let topo = Topology::new(1, gpus).unwrap();
        let batch = samples(&lengths);
        let want = ids(batch.iter().copied());
        prop_assert_eq!(assigned(&assign_none(&batch, &topo).unwrap()), want.clone());
        prop_assert_eq!(assigned(&assign_global_presort(&batch, &topo, scan).unwrap()), want.clone());
        let draws: Vec<Vec<Sample>> = batch.chunks(lengths.len() / gpus).map(<[_]>::to_vec).collect();
        prop_assert_eq!(assigned(&assign_local_presort(&draws, &topo, scan).unwrap()), want.clone());

        let packs = pack_corpus(&batch, 2, 1024).unwrap();
        prop_assert_eq!(ids(packs.iter().flat_map(|p| p.members.iter().copied())), want);
    }

    #[test]
    fn token_counts_match_members((lengths, gpus) in dealt_batch()) {
        let a = assign_global_presort(&samples(&lengths), &Topology::new(1, gpus).unwrap(), ScanPattern::Snake).unwrap();
        for (g, members) in a.per_gpu.iter().enumerate() {
            prop_assert_eq!(a.token_counts[g], members.iter().map(|s| u64::from(s.length)).sum::<u64>());
        }
    }

    #[test]
    fn local_presort_stays_on_node(
        nodes in 1usize..=6,
        gpn in 1usize..=8,
        per_gpu in 1usize..=8,
        seed in any::<u64>(),
        snake in any::<bool>(),
    ) {
        let gpus = nodes * gpn;
        let topo = Topology::new(nodes, gpn).unwrap();
        let corpus = generate_corpus(&LengthDistribution::wikipedia(), gpus * per_gpu, seed).unwrap();
        let draws: Vec<Vec<Sample>> = corpus.chunks(per_gpu).map(<[_]>::to_vec).collect();
        let scan = if snake { ScanPattern::Snake } else { ScanPattern::Raster };
        let a = assign_local_presort(&draws, &topo, scan).unwrap();
        for node in 0..nodes {
            let gpus_on_node = node * gpn..(node + 1) * gpn;
            let drawn = ids(draws[gpus_on_node.clone()].iter().flatten().copied());
            let kept = ids(a.per_gpu[gpus_on_node].iter().flatten().copied());
            prop_assert_eq!(drawn, kept);
        }
        prop_assert!(a.per_gpu.iter().all(|g| g.len() == per_gpu));
    }

    #[test]
    fn packs_are_legal(
        lengths in vec(1u32..=512, 0..300),
        pack_limit in 1usize..=5,
        max_seq_len in 512u32..=2048,
    ) {
        let corpus = samples(&lengths);
        let packs = pack_corpus(&corpus, pack_limit, max_seq_len).unwrap();
        for p in &packs {
            prop_assert!(!p.members.is_empty() && p.members.len() <= pack_limit);
            prop_assert!(p.total_length <= max_seq_len);
            prop_assert_eq!(p.total_length, p.members.iter().map(|s| s.length).sum::<u32>());
        }
        prop_assert_eq!(packs.iter().map(|p| p.members.len()).sum::<usize>(), corpus.len());
    }

    #[test]
    fn apportionment_stays_within_one_of_quota(
        weights in vec(0.0f64..10.0, 1..12),
        local_batch in 0usize..200,
    ) {
        let total: f64 = weights.iter().sum();
        prop_assume!(total > 0.0);
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let alloc = allocate_counts(&probs, local_batch).unwrap();
        prop_assert_eq!(alloc.counts.iter().sum::<usize>(), local_batch);
        for (c, p) in alloc.counts.iter().zip(&probs) {
            prop_assert!((*c as f64 - p * local_batch as f64).abs() < 1.0);
        }
    }

    #[test]
    fn an_epoch_draws_each_sample_at_most_once(
        n in 1usize..400,
        local_batch in 1usize..40,
        seed in any::<u64>(),
    ) {
        let corpus = generate_corpus(&LengthDistribution::wikipedia(), n, seed).unwrap();
        let mut strata = stratify(&corpus, &WIKIPEDIA_BOUNDARIES).unwrap();
        let alloc = allocate_counts(&LengthDistribution::wikipedia().bin_probs, local_batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = BTreeSet::new();
        for _ in 0..n / local_batch {
            let batch = strata.draw_batch_with(&alloc, Shortfall::BorrowNearest, &mut rng).unwrap();
            prop_assert_eq!(batch.len(), local_batch);
            for s in batch {
                prop_assert!(seen.insert(s.id), "sample {} drawn twice", s.id);
            }
        }
        if n % local_batch == 0 {
            prop_assert_eq!(seen.len(), n);
        } else {
            prop_assert!(strata.draw_batch_with(&alloc, Shortfall::BorrowNearest, &mut rng).is_err());
        }
    }

    #[test]
    fn bucketwise_output_respects_the_global_cap(state in grad_state(16), c in 1e-3f64..1e3) {
        let out = gradsync::sync_bucketwise(&state, &mode(ClipMode::BucketWise, c)).unwrap();
        prop_assert!(l2_norm(&out) <= c * (1.0 + 1e-12));
        let after = gradsync::sync_after(&state, &mode(ClipMode::AfterAllreduce, c)).unwrap();
        prop_assert!(l2_norm(&after) <= c * (1.0 + 1e-12));
    }

    #[test]
    fn small_gradients_pass_through_unclipped(state in grad_state(16), c in 1.0f64..10.0) {
        let b = state.layout().len();
        // shrink every bucket of every worker below c / sqrt(B)
        let peak = state
            .workers()
            .iter()
            .flat_map(|w| state.layout().ranges().iter().map(move |r| l2_norm(&w[r.clone()])))
            .fold(0.0f64, f64::max);
        let shrink = if peak > 0.0 { 0.5 * bucket_threshold(c, b) / peak } else { 1.0 };
        let scaled: Vec<Vec<f64>> = state.workers().iter().map(|w| w.iter().map(|x| x * shrink).collect()).collect();
        let state = GradientState::new(scaled, state.layout().clone()).unwrap();
        let views: Vec<&[f64]> = state.workers().iter().map(Vec::as_slice).collect();
        let out = gradsync::sync_bucketwise(&state, &mode(ClipMode::BucketWise, c)).unwrap();
        prop_assert_eq!(out, allreduce_mean(&views).unwrap());
    }

    #[test]
    fn one_worker_cannot_dominate_local_clipping(
        outlier in vec(-1e6f64..1e6, 8..40),
        workers in 1usize..=16,
        buckets in 1usize..=8,
        c in 0.1f64..10.0,
    ) {
        let dim = outlier.len();
        let mut rows = vec![vec![0.0; dim]; workers];
        rows[0] = outlier;
        let state = GradientState::with_equal_buckets(rows, buckets).unwrap();
        let bound = c / workers as f64 * (1.0 + 1e-12);
        let before = gradsync::sync_before(&state, &mode(ClipMode::BeforeAllreduce, c)).unwrap();
        let bw = gradsync::sync_bucketwise(&state, &mode(ClipMode::BucketWise, c)).unwrap();
        prop_assert!(l2_norm(&before) <= bound);
        prop_assert!(l2_norm(&bw) <= bound);
    }

    #[test]
    fn identical_workers_agree_across_modes(row in vec(-50.0f64..50.0, 1..40), workers in 1usize..=16, c in 0.1f64..100.0) {
        let state = GradientState::with_equal_buckets(vec![row; workers], 1).unwrap();
        let outs: Vec<Vec<f64>> = ClipMode::ALL
            .iter()
            .map(|&m| gradsync::synchronize(&state, &mode(m, c)).unwrap())
            .collect();
        prop_assert_eq!(&outs[0], &outs[1]);
        prop_assert_eq!(&outs[1], &outs[2]);
    }

    #[test]
    fn schedules_conserve_work_and_respect_the_lower_bound(
        comp in vec(0.0f64..10.0, 1..12),
        comm_seed in vec(0.0f64..10.0, 12),
        clip_seed in vec(0.0f64..2.0, 12),
        t_gclip in 0.0f64..3.0,
        t_nred in 0.0f64..3.0,
    ) {
        let b = comp.len();
        let plan = TimelinePlan {
            t_comm: comm_seed[..b].to_vec(),
            t_clip: clip_seed[..b].to_vec(),
            t_comp: comp,
            t_gclip,
            t_nred,
        };
        let comp_total: f64 = plan.t_comp.iter().sum();
        let comm_total: f64 = plan.t_comm.iter().sum();
        let clip_total: f64 = plan.t_clip.iter().sum();
        for m in ClipMode::ALL {
            let s = schedule(&plan, m).unwrap();
            let clip_on_compute = match m {
                ClipMode::BucketWise => clip_total,
                _ => t_gclip,
            };
            prop_assert!((s.comm_busy() - comm_total).abs() <= 1e-9);
            prop_assert!((s.compute_busy() - comp_total - clip_on_compute).abs() <= 1e-9);
            prop_assert!(s.total + 1e-9 >= s.compute_busy().max(s.comm_busy()));
            for w in s.buckets.windows(2) {
                prop_assert!(w[1].comm.start + 1e-12 >= w[0].comm.end);
                let prev_done = w[0].clip.map_or(w[0].compute.end, |c| c.end);
                prop_assert!(w[1].compute.start + 1e-12 >= prev_done);
            }
            for bt in &s.buckets {
                let ready = bt.clip.map_or(bt.compute.end, |c| c.end);
                prop_assert!(bt.comm.start + 1e-12 >= ready);
            }
        }
    }

    #[test]
    fn corpus_generation_is_deterministic(n in 0usize..2000, seed in any::<u64>()) {
        let d = LengthDistribution::wikipedia();
        prop_assert_eq!(generate_corpus(&d, n, seed).unwrap(), generate_corpus(&d, n, seed).unwrap());
    }
}

#[test]
fn corpus_bins_fit_the_histogram() {
    let dist = LengthDistribution::wikipedia();
    let n = 200_000;
    let corpus = generate_corpus(&dist, n, 2024).unwrap();
    let counts = bin_counts(&corpus, &dist.bin_boundaries);
    let chi2: f64 = counts
        .iter()
        .zip(&dist.bin_probs)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new((counts.len() - 1) as f64)
        .unwrap()
        .inverse_cdf(0.999);
    assert!(chi2 < critical, "chi2 {chi2} >= {critical}");
}

#[test]
fn sorted_deal_matches_sort_helper() {
    let mut batch = samples(&[5, 9, 9, 1, 7, 3]);
    let a =
        assign_global_presort(&batch, &Topology::new(1, 1).unwrap(), ScanPattern::Raster).unwrap();
    balance::sort_descending(&mut batch);
    assert_eq!(a.per_gpu[0], batch);
}
