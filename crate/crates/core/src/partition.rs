//! Capability partitions with outlier relegation.
//!
//! Rollouts start in the partition of their capability label. Each pass of
//! [`validate_partitions`] recomputes partition advantages, flags every
//! non-relegated rollout with `|A| > tau`, and moves the flagged rollouts to
//! rollout-level keys. Relegation is permanent, so the relegated set only
//! grows and the loop stops after at most `min(max_iter, N)` passes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use crate::advantage::{
    joint_advantages, partition_advantages, AdvantageOptions, AdvantageTable, RewardCombiner,
};
use crate::rollout::{GroupBatch, RolloutUid};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 3.0;
pub const DEFAULT_MAX_ITER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PartitionKey {
    Capability(usize),
    /// A relegated rollout, optimized on its own.
    Rollout(RolloutUid),
}

impl fmt::Display for PartitionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionKey::Capability(c) => write!(f, "capability:{c}"),
            PartitionKey::Rollout(u) => write!(f, "rollout:{u}"),
        }
    }
}

/// Which advantages the outlier test looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutlierRule {
    /// The combined-reward partition advantage.
    #[default]
    Scalar,
    /// Any per-dimension partition advantage.
    AnyDimension,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Partition sizes when the pass started.
    pub sizes: BTreeMap<PartitionKey, usize>,
    pub outliers: BTreeSet<RolloutUid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionState {
    assignment: BTreeMap<RolloutUid, PartitionKey>,
    iteration: usize,
    tau: f64,
    max_iter: usize,
    relegated: BTreeSet<RolloutUid>,
    history: Vec<IterationRecord>,
    converged: bool,
    exhausted: bool,
}

impl PartitionState {
    pub fn with_limits(mut self, tau: f64, max_iter: usize) -> Self {
        self.tau = tau;
        self.max_iter = max_iter;
        self
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn max_iter(&self) -> usize {
        self.max_iter
    }

    pub fn relegated(&self) -> &BTreeSet<RolloutUid> {
        &self.relegated
    }

    pub fn history(&self) -> &[IterationRecord] {
        &self.history
    }

    /// The last pass found no outliers.
    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Stopped on the iteration limit with outliers still being found.
    pub fn exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn contains(&self, uid: RolloutUid) -> bool {
        self.assignment.contains_key(&uid)
    }

    pub fn is_relegated(&self, uid: RolloutUid) -> bool {
        self.relegated.contains(&uid)
    }

    pub fn key(&self, uid: RolloutUid) -> Option<PartitionKey> {
        self.assignment.get(&uid).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<RolloutUid, PartitionKey> {
        &self.assignment
    }

    /// Members of every partition, relegated singletons included.
    pub fn partitions(&self) -> BTreeMap<PartitionKey, Vec<RolloutUid>> {
        let mut out: BTreeMap<PartitionKey, Vec<RolloutUid>> = BTreeMap::new();
        for (&uid, &key) in &self.assignment {
            out.entry(key).or_default().push(uid);
        }
        out
    }

    fn sizes(&self) -> BTreeMap<PartitionKey, usize> {
        self.partitions()
            .into_iter()
            .map(|(k, v)| (k, v.len()))
            .collect()
    }

    /// Number of partitions, counting each relegated rollout as its own.
    pub fn m_final(&self) -> usize {
        self.assignment.values().collect::<BTreeSet<_>>().len()
    }

    /// Text audit: one line per pass, then a summary line.
    pub fn audit_log(&self, step: usize) -> String {
        let mut out = String::new();
        for rec in &self.history {
            let sizes = rec
                .sizes
                .iter()
                .filter(|(k, _)| matches!(k, PartitionKey::Capability(_)))
                .map(|(k, n)| format!("{k}={n}"))
                .collect::<Vec<_>>()
                .join(",");
            let outliers = rec
                .outliers
                .iter()
                .map(|u| u.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let _ = writeln!(
                out,
                "step={step} iteration={} sizes={sizes} relegated_before={} outliers=[{outliers}]",
                rec.iteration,
                rec.sizes.len() - rec.sizes.keys().filter(|k| matches!(k, PartitionKey::Capability(_))).count()
            );
        }
        let _ = writeln!(
            out,
            "step={step} final iterations={} m_final={} relegated={} converged={} exhausted={}",
            self.iteration,
            self.m_final(),
            self.relegated.len(),
            self.converged,
            self.exhausted
        );
        out
    }
}

/// Every rollout goes to the partition of its capability label.
pub fn assign_initial_partitions(batch: &GroupBatch) -> Result<PartitionState> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let assignment = batch
        .rollouts()
        .iter()
        .map(|r| (r.uid, PartitionKey::Capability(r.capability_uid)))
        .collect();
    Ok(PartitionState {
        assignment,
        iteration: 0,
        tau: DEFAULT_TAU,
        max_iter: DEFAULT_MAX_ITER,
        relegated: BTreeSet::new(),
        history: Vec::new(),
        converged: false,
        exhausted: false,
    })
}

/// Non-relegated rollouts with any advantage strictly above `tau` in
/// absolute value.
pub fn detect_outliers(table: &AdvantageTable, state: &PartitionState) -> BTreeSet<RolloutUid> {
    table
        .entries()
        .filter(|(&(uid, _), e)| !state.is_relegated(uid) && e.advantage.abs() > state.tau)
        .map(|(&(uid, _), _)| uid)
        .collect()
}

/// Moves `outliers` to rollout-level keys and records the pass.
pub fn relegate(state: &PartitionState, outliers: &BTreeSet<RolloutUid>) -> Result<PartitionState> {
    for &uid in outliers {
        if !state.contains(uid) {
            return Err(Error::InvalidInput(format!("unknown rollout {uid}")));
        }
        if state.is_relegated(uid) {
            return Err(Error::AlreadyRelegated(uid));
        }
    }
    let mut next = state.clone();
    next.history.push(IterationRecord {
        iteration: state.iteration + 1,
        sizes: state.sizes(),
        outliers: outliers.clone(),
    });
    for &uid in outliers {
        next.assignment.insert(uid, PartitionKey::Rollout(uid));
        next.relegated.insert(uid);
    }
    next.iteration += 1;
    Ok(next)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ValidationOptions {
    pub combiner: RewardCombiner,
    pub advantage: AdvantageOptions,
    pub rule: OutlierRule,
}

fn pass_table(
    batch: &GroupBatch,
    state: &PartitionState,
    opts: &ValidationOptions,
) -> Result<AdvantageTable> {
    match opts.rule {
        OutlierRule::Scalar => partition_advantages(batch, state, &opts.combiner, opts.advantage),
        OutlierRule::AnyDimension => joint_advantages(batch, state, opts.advantage),
    }
}

/// Runs detect/relegate passes until a pass finds nothing, every rollout is
/// relegated, or `max_iter` passes have run (then `exhausted()` is set).
pub fn validate_partitions(
    batch: &GroupBatch,
    tau: f64,
    max_iter: usize,
    opts: &ValidationOptions,
) -> Result<PartitionState> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau must be positive, got {tau}")));
    }
    if max_iter < 1 {
        return Err(Error::InvalidInput("max_iter must be >= 1".into()));
    }
    let mut state = assign_initial_partitions(batch)?.with_limits(tau, max_iter);
    while state.iteration < max_iter {
        let table = pass_table(batch, &state, opts)?;
        let outliers = detect_outliers(&table, &state);
        let done = outliers.is_empty();
        state = relegate(&state, &outliers)?;
        if done || state.relegated.len() == batch.len() {
            state.converged = true;
            return Ok(state);
        }
    }
    state.exhausted = true;
    Ok(state)
}

/// Re-runs one detection pass on `state` without changing it.
pub fn recheck(
    batch: &GroupBatch,
    state: &PartitionState,
    opts: &ValidationOptions,
) -> Result<BTreeSet<RolloutUid>> {
    Ok(detect_outliers(&pass_table(batch, state, opts)?, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::Scheme;
    use crate::rollout::Rollout;

    fn batch(groups: &[(usize, usize, Vec<f64>)]) -> GroupBatch {
        let mut rollouts = Vec::new();
        for (q, cap, rewards) in groups {
            for (i, &r) in rewards.iter().enumerate() {
                rollouts.push(Rollout::new(
                    RolloutUid { question: *q, index: i },
                    *cap,
                    vec![0].into(),
                    vec![-0.7],
                    vec![r],
                ));
            }
        }
        GroupBatch::new(rollouts).unwrap()
    }

    fn uid(q: usize, i: usize) -> RolloutUid {
        RolloutUid { question: q, index: i }
    }

    #[test]
    fn initial_assignment() {
        let b = batch(&[(0, 0, vec![1.0, 2.0]), (1, 1, vec![0.0, 1.0])]);
        let s = assign_initial_partitions(&b).unwrap();
        let parts = s.partitions();
        assert_eq!(parts[&PartitionKey::Capability(0)], vec![uid(0, 0), uid(0, 1)]);
        assert_eq!(parts[&PartitionKey::Capability(1)].len(), 2);
        assert_eq!(s.m_final(), 2);
        assert_eq!(s.iteration(), 0);
        assert!(s.relegated().is_empty());

        let single = batch(&[(0, 3, vec![1.0, 2.0]), (1, 3, vec![0.0, 1.0])]);
        assert_eq!(assign_initial_partitions(&single).unwrap().m_final(), 1);
    }

    #[test]
    fn detection_is_strict() {
        let b = batch(&[(0, 0, vec![0.1, -0.2, 3.5]), (1, 0, vec![3.0, -3.0])]);
        let state = assign_initial_partitions(&b).unwrap().with_limits(3.0, 5);
        // advantages set to the raw rewards
        let crafted = crate::advantage::table_from_values(&b, Scheme::Partition, |r| r.rewards[0]);
        let out = detect_outliers(&crafted, &state);
        assert_eq!(out.into_iter().collect::<Vec<_>>(), vec![uid(0, 2)]);

        let state = state.with_limits(10.0, 5);
        assert!(detect_outliers(&crafted, &state).is_empty());
    }

    #[test]
    fn relegation_bookkeeping() {
        let b = batch(&[(0, 0, vec![1.0, 2.0, 3.0])]);
        let s0 = assign_initial_partitions(&b).unwrap();
        let s1 = relegate(&s0, &BTreeSet::new()).unwrap();
        assert_eq!(s1.iteration(), 1);
        assert_eq!(s1.assignment(), s0.assignment());

        let one: BTreeSet<_> = [uid(0, 1)].into();
        let s2 = relegate(&s1, &one).unwrap();
        assert_eq!(s2.key(uid(0, 1)), Some(PartitionKey::Rollout(uid(0, 1))));
        assert_eq!(s2.partitions()[&PartitionKey::Capability(0)].len(), 2);
        assert_eq!(s2.m_final(), 2);
        assert!(matches!(relegate(&s2, &one), Err(Error::AlreadyRelegated(_))));
    }

    #[test]
    fn extreme_reward_is_relegated() {
        // 11 x 1 and one 1000: z = 11 / sqrt(12) > 3
        let mut rewards = vec![1.0; 11];
        rewards.push(1000.0);
        let b = batch(&[(0, 0, rewards[..6].to_vec()), (1, 0, rewards[6..].to_vec())]);
        let s = validate_partitions(&b, 3.0, 5, &ValidationOptions::default()).unwrap();
        assert!(s.converged());
        assert_eq!(s.iteration(), 2);
        assert_eq!(s.relegated().iter().copied().collect::<Vec<_>>(), vec![uid(1, 5)]);
        assert!(recheck(&b, &s, &ValidationOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn small_partitions_cannot_exceed_tau() {
        // with 4 members the largest possible |z| is 3/2
        let b = batch(&[(0, 0, vec![1.0, 1.0, 1.0, 1000.0])]);
        let s = validate_partitions(&b, 3.0, 5, &ValidationOptions::default()).unwrap();
        assert!(s.relegated().is_empty());
    }

    #[test]
    fn homogeneous_terminates_immediately() {
        let b = batch(&[(0, 0, vec![0.5; 4]), (1, 1, vec![0.2, 0.4, 0.3])]);
        let s = validate_partitions(&b, 3.0, 5, &ValidationOptions::default()).unwrap();
        assert_eq!(s.iteration(), 1);
        assert!(s.converged() && s.relegated().is_empty());
    }

    #[test]
    fn infinite_tau_is_identity() {
        let mut rewards = vec![0.0; 15];
        rewards.push(1e6);
        let b = batch(&[(0, 0, rewards)]);
        let s = validate_partitions(&b, f64::INFINITY, 5, &ValidationOptions::default()).unwrap();
        assert!(s.relegated().is_empty());
        assert_eq!(s.m_final(), 1);
    }

    #[test]
    fn bad_limits_rejected() {
        let b = batch(&[(0, 0, vec![0.0, 1.0])]);
        assert!(validate_partitions(&b, 0.0, 5, &ValidationOptions::default()).is_err());
        assert!(validate_partitions(&b, 3.0, 0, &ValidationOptions::default()).is_err());
    }

    #[test]
    fn exhaustion_is_flagged() {
        // a cascade: every pass exposes a new extreme value
        let mut rewards: Vec<f64> = vec![0.0; 30];
        for (j, r) in rewards.iter_mut().rev().take(4).enumerate() {
            *r = 10f64.powi(8 - 2 * j as i32);
        }
        let b = batch(&[(0, 0, rewards)]);
        let s = validate_partitions(&b, 3.0, 2, &ValidationOptions::default()).unwrap();
        assert!(s.exhausted() && !s.converged());
        assert_eq!(s.iteration(), 2);
        assert_eq!(s.history().len(), 2);
        let log = s.audit_log(0);
        assert!(log.contains("exhausted=true"));
    }
}
