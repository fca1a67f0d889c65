use prpo_core::advantage::{grpo_advantages, AdvantageOptions, RewardCombiner};
use prpo_core::envs::{make_task_suite, SuiteConfig, SuiteKind};
use prpo_core::objective::{
    collect_batch, compute_advantages, kl_penalty_value_and_grad, run_training, AlgoKind,
    AlgoVariant, RewardPreset, Surrogate, TrainingPlan,
};
use prpo_core::oracle::{finite_diff_gradient, random_batch, BatchShape};
use prpo_core::policy::{init_policy, init_policy_scaled, Parameterization, PolicySpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plan(cfg: &SuiteConfig, kind: AlgoKind, param: Parameterization, steps: usize) -> TrainingPlan {
    let suite = make_task_suite(cfg).unwrap();
    let spec = PolicySpec::new(suite.vocab_size, suite.seq_len, suite.tasks.len(), param).unwrap();
    TrainingPlan {
        init: init_policy(spec, 3).unwrap(),
        suite,
        variant: AlgoVariant::new(kind),
        group_size: 8,
        inner_updates: 1,
        learning_rate: 1.0,
        momentum: 0.0,
        steps,
        seed: 3,
        preset: RewardPreset::Base,
        switch_step: 0,
    }
}

#[test]
fn uniform_dimension_weights_cancel_on_interference() {
    let cfg = SuiteConfig {
        kind: SuiteKind::Interference,
        sizes: vec![3],
        ..SuiteConfig::default()
    };
    let suite = make_task_suite(&cfg).unwrap();
    let spec = PolicySpec::tabular(suite.vocab_size, suite.seq_len, suite.tasks.len()).unwrap();
    let p = init_policy_scaled(spec, 5, 1.0).unwrap();
    let batch = collect_batch(&p, &suite, 8, 11).unwrap();
    for kind in [AlgoKind::RewardPrpo, AlgoKind::Prpo] {
        let v = AlgoVariant::new(kind);
        let (table, state) = compute_advantages(&batch, &v, &[true, true]).unwrap();
        // per-dimension advantages are non-zero and mirror each other
        assert!(table.max_abs() > 0.5);
        let g = Surrogate::build(&batch, &table, &v, state.as_ref(), None)
            .unwrap()
            .gradient(&p, &batch)
            .unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15), "{kind:?}");

        let mut weighted = v.clone();
        weighted.lambda_k = Some(vec![0.75, 0.25]);
        let g = Surrogate::build(&batch, &table, &weighted, state.as_ref(), None)
            .unwrap()
            .gradient(&p, &batch)
            .unwrap();
        assert!(g.iter().any(|x| x.abs() > 1e-3));
    }
}

#[test]
fn reward_scale_does_not_change_grouped_advantages() {
    let base = SuiteConfig {
        kind: SuiteKind::ScaleConflict,
        sizes: vec![3, 3],
        ..SuiteConfig::default()
    };
    for kind in [AlgoKind::Grpo, AlgoKind::DataPrpo] {
        let a = plan(&SuiteConfig { scale_factor: 1.0, ..base.clone() }, kind, Parameterization::LinearFeatures, 15);
        let b = plan(&SuiteConfig { scale_factor: 100.0, ..base.clone() }, kind, Parameterization::LinearFeatures, 15);
        let (pa, _) = run_training(&a, |_, _| Ok(())).unwrap();
        let (pb, _) = run_training(&b, |_, _| Ok(())).unwrap();
        for (x, y) in pa.theta().iter().zip(pb.theta()) {
            assert!((x - y).abs() < 1e-9, "{kind:?}");
        }
    }
}

#[test]
fn center_value_is_zero_without_relegation() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let spec = PolicySpec::tabular(3, 2, 5).unwrap();
        let old = init_policy_scaled(spec, rng.random(), 1.0).unwrap();
        let batch = random_batch(&mut rng, &BatchShape::default(), Some(&old)).unwrap();
        for kind in AlgoKind::ALL {
            let mut v = AlgoVariant::new(kind);
            v.tau = f64::INFINITY;
            let active = vec![true; batch.num_dims()];
            let (table, state) = compute_advantages(&batch, &v, &active).unwrap();
            let s = Surrogate::build(&batch, &table, &v, state.as_ref(), None).unwrap();
            assert!(s.value(&old, &batch).unwrap().abs() < 1e-9);
            assert!((s.center_value() - s.value(&old, &batch).unwrap()).abs() < 1e-12);
        }
    }
}

#[test]
fn relegated_rollouts_are_their_own_partitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = PolicySpec::tabular(3, 2, 5).unwrap();
    let mut seen = 0;
    for _ in 0..40 {
        let old = init_policy_scaled(spec, rng.random(), 1.0).unwrap();
        let batch = random_batch(&mut rng, &BatchShape::default(), Some(&old)).unwrap();
        let v = AlgoVariant::new(AlgoKind::DataPrpo);
        let active = vec![true; batch.num_dims()];
        let (table, state) = compute_advantages(&batch, &v, &active).unwrap();
        let state = state.unwrap();
        let n_rel = state.relegated().len();
        if n_rel == 0 {
            continue;
        }
        seen += 1;
        assert_eq!(state.m_final(), batch.capabilities().len().max(1) - empty_caps(&batch, &state) + n_rel);
        // the center value is exactly the relegated rollouts' weighted advantages
        let s = Surrogate::build(&batch, &table, &v, Some(&state), None).unwrap();
        let lm = 1.0 / state.m_final() as f64;
        let expected: f64 = state
            .relegated()
            .iter()
            .map(|&u| lm * table.advantage(u, 0).unwrap())
            .sum();
        assert!((s.value(&old, &batch).unwrap() - expected).abs() < 1e-9);
    }
    assert!(seen > 3);
}

fn empty_caps(batch: &prpo_core::rollout::GroupBatch, state: &prpo_core::partition::PartitionState) -> usize {
    batch
        .capabilities()
        .iter()
        .filter(|&&c| {
            batch
                .rollouts()
                .iter()
                .filter(|r| r.capability_uid == c)
                .all(|r| state.is_relegated(r.uid))
        })
        .count()
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let suite = make_task_suite(&SuiteConfig::default()).unwrap();
    for param in [Parameterization::TabularLogits, Parameterization::LinearFeatures] {
        let spec = PolicySpec::new(4, 3, suite.tasks.len(), param).unwrap();
        let old = init_policy_scaled(spec, 1, 1.0).unwrap();
        let new = init_policy_scaled(spec, 2, 1.0).unwrap();
        let batch = collect_batch(&old, &suite, 4, 0).unwrap();
        let (_, g) = kl_penalty_value_and_grad(&new, &old, &batch).unwrap();
        let fd = finite_diff_gradient(
            |p| Ok(kl_penalty_value_and_grad(p, &old, &batch)?.0),
            &new,
            1e-5,
        )
        .unwrap();
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn inner_updates_clip_after_the_first() {
    let cfg = SuiteConfig::default();
    let mut p = plan(&cfg, AlgoKind::Grpo, Parameterization::TabularLogits, 3);
    p.inner_updates = 4;
    p.learning_rate = 5.0;
    let (_, series) = run_training(&p, |_, _| Ok(())).unwrap();
    assert!(series.iter().any(|m| m.clip_fraction > 0.0));
    p.inner_updates = 1;
    let (_, series) = run_training(&p, |_, _| Ok(())).unwrap();
    assert!(series.iter().all(|m| m.clip_fraction == 0.0));
}

#[test]
fn grpo_learns_on_basic_suite() {
    let cfg = SuiteConfig::default();
    let p = plan(&cfg, AlgoKind::Grpo, Parameterization::TabularLogits, 60);
    let (_, series) = run_training(&p, |_, _| Ok(())).unwrap();
    let first = series.first().unwrap().expected_reward[0];
    let last = series.last().unwrap().expected_reward[0];
    assert!(last > first + 0.1, "{first} -> {last}");
}

#[test]
fn scalar_combiner_masks_inactive_dimensions() {
    let suite = make_task_suite(&SuiteConfig::default()).unwrap();
    let spec = PolicySpec::tabular(4, 3, suite.tasks.len()).unwrap();
    let p = init_policy_scaled(spec, 2, 1.0).unwrap();
    let batch = collect_batch(&p, &suite, 6, 3).unwrap();
    let v = AlgoVariant::new(AlgoKind::Grpo);
    let (masked, _) = compute_advantages(&batch, &v, &[true, false]).unwrap();
    let direct = grpo_advantages(
        &batch,
        &RewardCombiner::Weighted(vec![1.0, 0.0]),
        AdvantageOptions::default(),
    )
    .unwrap();
    assert_eq!(masked, direct);
}
