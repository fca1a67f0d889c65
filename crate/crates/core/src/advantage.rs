//! Group-standardized advantages.
//!
//! All four estimators reduce to the same kernel: pick a value per
//! `(rollout, dimension)` cell, pick the statistics group the cell is
//! standardized in, and compute `(R - mean) / std` with the group's mean and
//! sample standard deviation.
//!
//! | scheme         | value                    | statistics group                 |
//! |----------------|--------------------------|----------------------------------|
//! | `Scalar`       | combined reward          | question                         |
//! | `PerDimension` | reward of dimension k    | (question, k)                    |
//! | `Partition`    | combined reward          | capability partition             |
//! | `Joint`        | reward of dimension k    | (capability partition, k)        |
//!
//! In the partition schemes a relegated rollout is standardized with the
//! statistics of its full question group, i.e. it gets exactly the value the
//! corresponding question-level scheme would give it.
//!
//! A group with fewer than two members or (numerically) zero spread is
//! degenerate: every member gets advantage 0 and the cell is flagged.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use crate::partition::PartitionState;
use crate::rollout::{GroupBatch, RolloutUid};
use crate::{Error, Result};

/// A group is degenerate when `std <= DEGENERATE_REL_TOL * max|R|`.
pub const DEGENERATE_REL_TOL: f64 = 1e-10;

pub const AUDIT_SCHEMA: &str = "# prpo-advantage-audit v1";
pub const AUDIT_COLUMNS: &str =
    "step,rollout_uid,question_id,capability_uid,k,group_id,reward,mean,std,advantage,degenerate";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// One advantage per rollout from the combined reward, per question.
    Scalar,
    /// One advantage per rollout and reward dimension, per question.
    PerDimension,
    /// Combined reward standardized within capability partitions.
    Partition,
    /// Each dimension standardized within capability partitions.
    Joint,
}

impl Scheme {
    pub fn is_per_dimension(self) -> bool {
        matches!(self, Scheme::PerDimension | Scheme::Joint)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum StdMode {
    /// `G - 1` denominator.
    #[default]
    Sample,
    /// `G` denominator.
    Population,
}

/// How the partition schemes form statistics groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PartitionPooling {
    /// Pool every non-relegated rollout of a capability across questions.
    #[default]
    Pooled,
    /// Keep per-question groups, only re-keyed by capability.
    PerQuestion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AdvantageOptions {
    pub std_mode: StdMode,
    pub pooling: PartitionPooling,
}

/// Combines a reward vector into the scalar the scalar schemes standardize.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum RewardCombiner {
    /// Unweighted sum over dimensions.
    #[default]
    Sum,
    /// Weighted sum; weights may be zero to mask dimensions.
    Weighted(Vec<f64>),
}

impl RewardCombiner {
    pub fn combine(&self, rewards: &[f64]) -> f64 {
        match self {
            RewardCombiner::Sum => rewards.iter().sum(),
            RewardCombiner::Weighted(w) => rewards.iter().zip(w).map(|(r, w)| r * w).sum(),
        }
    }

    fn check(&self, num_dims: usize) -> Result<()> {
        match self {
            RewardCombiner::Weighted(w) if w.len() != num_dims => Err(Error::InvalidInput(
                format!("combiner has {} weights for {num_dims} dimensions", w.len()),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupId {
    Question(usize),
    Capability(usize),
    CapabilityQuestion { capability: usize, question: usize },
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Question(q) => write!(f, "question:{q}"),
            GroupId::Capability(c) => write!(f, "capability:{c}"),
            GroupId::CapabilityQuestion {
                capability,
                question,
            } => write!(f, "capability:{capability}/question:{question}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageEntry {
    pub group: GroupId,
    /// The standardized value (combined reward for scalar schemes).
    pub reward: f64,
    pub advantage: f64,
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageTable {
    scheme: Scheme,
    num_dims: usize,
    entries: BTreeMap<(RolloutUid, usize), AdvantageEntry>,
    stats: BTreeMap<(GroupId, usize), GroupStats>,
}

impl AdvantageTable {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Dimensions per rollout: K for per-dimension schemes, 1 otherwise.
    pub fn num_dims(&self) -> usize {
        self.num_dims
    }

    pub fn entry(&self, uid: RolloutUid, k: usize) -> Option<&AdvantageEntry> {
        self.entries.get(&(uid, k))
    }

    pub fn advantage(&self, uid: RolloutUid, k: usize) -> Option<f64> {
        self.entry(uid, k).map(|e| e.advantage)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(RolloutUid, usize), &AdvantageEntry)> {
        self.entries.iter()
    }

    pub fn stats(&self) -> &BTreeMap<(GroupId, usize), GroupStats> {
        &self.stats
    }

    pub fn degenerate_cells(&self) -> usize {
        self.stats.values().filter(|s| s.degenerate).count()
    }

    /// Advantages grouped by the `(group, k)` cell each entry was
    /// standardized in.
    pub fn cells(&self) -> BTreeMap<(GroupId, usize), Vec<f64>> {
        let mut cells: BTreeMap<_, Vec<f64>> = BTreeMap::new();
        for (&(_, k), e) in &self.entries {
            cells.entry((e.group, k)).or_default().push(e.advantage);
        }
        cells
    }

    /// Mean |advantage| per dimension.
    pub fn mean_abs_by_dim(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.num_dims];
        let mut counts = vec![0usize; self.num_dims];
        for (&(_, k), e) in &self.entries {
            sums[k] += e.advantage.abs();
            counts[k] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .map(|e| e.advantage.abs())
            .fold(0.0, f64::max)
    }

    /// Appends audit CSV rows (no header) for this table.
    pub fn write_csv_rows(&self, batch: &GroupBatch, step: usize, out: &mut String) {
        for (&(uid, k), e) in &self.entries {
            let r = batch
                .index_of(uid)
                .map(|i| &batch.rollouts()[i])
                .expect("table built from this batch");
            let s = self.stats[&(e.group, k)];
            let _ = writeln!(
                out,
                "{step},{uid},{},{},{k},{},{:?},{:?},{:?},{:?},{}",
                r.question_id,
                r.capability_uid,
                e.group,
                e.reward,
                s.mean,
                s.std,
                e.advantage,
                u8::from(e.degenerate)
            );
        }
    }

    pub fn to_csv(&self, batch: &GroupBatch) -> String {
        let mut out = format!("{AUDIT_SCHEMA}\n{AUDIT_COLUMNS}\n");
        self.write_csv_rows(batch, 0, &mut out);
        out
    }
}

fn mean_std(values: &[f64], mode: StdMode) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    let denom = match mode {
        StdMode::Sample => n - 1.0,
        StdMode::Population => n,
    };
    (mean, (ss / denom).sqrt())
}

fn stats_of(values: &[f64], mode: StdMode) -> GroupStats {
    let count = values.len();
    if count < 2 {
        return GroupStats {
            mean: values.first().copied().unwrap_or(0.0),
            std: 0.0,
            count,
            degenerate: true,
        };
    }
    let (mean, std) = mean_std(values, mode);
    let scale = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    GroupStats {
        mean,
        std,
        count,
        degenerate: std == 0.0 || std <= DEGENERATE_REL_TOL * scale,
    }
}

/// Mean and standard deviation of a group of at least two rewards.
pub fn group_stats(rewards: &[f64], mode: StdMode) -> Result<(f64, f64)> {
    if rewards.len() < 2 {
        return Err(Error::GroupTooSmall(rewards.len()));
    }
    Ok(mean_std(rewards, mode))
}

/// Shared kernel. `values[i][k]` is the value of rollout `i` in dimension
/// `k`; `members` lists the rollouts each statistics group is computed over
/// and `assign[i]` the group rollout `i` is standardized with.
fn standardize(
    batch: &GroupBatch,
    scheme: Scheme,
    values: &[Vec<f64>],
    members: &BTreeMap<GroupId, Vec<usize>>,
    assign: &[GroupId],
    mode: StdMode,
) -> AdvantageTable {
    let num_dims = values.first().map_or(0, Vec::len);
    let mut stats = BTreeMap::new();
    for (&group, idx) in members {
        for k in 0..num_dims {
            let vals: Vec<f64> = idx.iter().map(|&i| values[i][k]).collect();
            stats.insert((group, k), stats_of(&vals, mode));
        }
    }
    let mut entries = BTreeMap::new();
    for (i, r) in batch.rollouts().iter().enumerate() {
        for k in 0..num_dims {
            let s: &GroupStats = &stats[&(assign[i], k)];
            let reward = values[i][k];
            let advantage = if s.degenerate {
                0.0
            } else {
                (reward - s.mean) / s.std
            };
            entries.insert(
                (r.uid, k),
                AdvantageEntry {
                    group: assign[i],
                    reward,
                    advantage,
                    degenerate: s.degenerate,
                },
            );
        }
    }
    AdvantageTable {
        scheme,
        num_dims,
        entries,
        stats,
    }
}

fn question_members(batch: &GroupBatch) -> BTreeMap<GroupId, Vec<usize>> {
    batch
        .question_groups()
        .into_iter()
        .map(|(q, idx)| (GroupId::Question(q), idx))
        .collect()
}

fn combined_values(batch: &GroupBatch, combiner: &RewardCombiner) -> Result<Vec<Vec<f64>>> {
    combiner.check(batch.num_dims())?;
    Ok(batch
        .rollouts()
        .iter()
        .map(|r| vec![combiner.combine(&r.rewards)])
        .collect())
}

fn dim_values(batch: &GroupBatch) -> Vec<Vec<f64>> {
    batch.rollouts().iter().map(|r| r.rewards.clone()).collect()
}

fn question_assign(batch: &GroupBatch) -> Vec<GroupId> {
    batch
        .rollouts()
        .iter()
        .map(|r| GroupId::Question(r.question_id))
        .collect()
}

/// Scalar advantages within each question's rollout group.
pub fn grpo_advantages(
    batch: &GroupBatch,
    combiner: &RewardCombiner,
    opts: AdvantageOptions,
) -> Result<AdvantageTable> {
    let values = combined_values(batch, combiner)?;
    Ok(standardize(
        batch,
        Scheme::Scalar,
        &values,
        &question_members(batch),
        &question_assign(batch),
        opts.std_mode,
    ))
}

/// Per-dimension advantages within each question's rollout group.
pub fn reward_dim_advantages(batch: &GroupBatch, opts: AdvantageOptions) -> Result<AdvantageTable> {
    Ok(standardize(
        batch,
        Scheme::PerDimension,
        &dim_values(batch),
        &question_members(batch),
        &question_assign(batch),
        opts.std_mode,
    ))
}

fn partition_groups(
    batch: &GroupBatch,
    state: &PartitionState,
    pooling: PartitionPooling,
) -> Result<(BTreeMap<GroupId, Vec<usize>>, Vec<GroupId>)> {
    let questions = batch.question_groups();
    let mut members: BTreeMap<GroupId, Vec<usize>> = BTreeMap::new();
    let mut assign = Vec::with_capacity(batch.len());
    for (i, r) in batch.rollouts().iter().enumerate() {
        if !state.contains(r.uid) {
            return Err(Error::InvalidInput(format!(
                "rollout {} has no partition assignment",
                r.uid
            )));
        }
        let group = if state.is_relegated(r.uid) {
            let g = GroupId::Question(r.question_id);
            members
                .entry(g)
                .or_insert_with(|| questions[&r.question_id].clone());
            g
        } else {
            let g = match pooling {
                PartitionPooling::Pooled => GroupId::Capability(r.capability_uid),
                PartitionPooling::PerQuestion => GroupId::CapabilityQuestion {
                    capability: r.capability_uid,
                    question: r.question_id,
                },
            };
            members.entry(g).or_default().push(i);
            g
        };
        assign.push(group);
    }
    Ok((members, assign))
}

/// Scalar advantages within capability partitions, pooled across questions.
pub fn partition_advantages(
    batch: &GroupBatch,
    state: &PartitionState,
    combiner: &RewardCombiner,
    opts: AdvantageOptions,
) -> Result<AdvantageTable> {
    let values = combined_values(batch, combiner)?;
    let (members, assign) = partition_groups(batch, state, opts.pooling)?;
    Ok(standardize(
        batch,
        Scheme::Partition,
        &values,
        &members,
        &assign,
        opts.std_mode,
    ))
}

/// Per-dimension advantages within capability partitions.
pub fn joint_advantages(
    batch: &GroupBatch,
    state: &PartitionState,
    opts: AdvantageOptions,
) -> Result<AdvantageTable> {
    let (members, assign) = partition_groups(batch, state, opts.pooling)?;
    Ok(standardize(
        batch,
        Scheme::Joint,
        &dim_values(batch),
        &members,
        &assign,
        opts.std_mode,
    ))
}

#[cfg(test)]
pub(crate) fn table_from_values(
    batch: &GroupBatch,
    scheme: Scheme,
    value: impl Fn(&crate::rollout::Rollout) -> f64,
) -> AdvantageTable {
    let group = GroupId::Capability(0);
    let mut entries = BTreeMap::new();
    for r in batch.rollouts() {
        let v = value(r);
        entries.insert(
            (r.uid, 0),
            AdvantageEntry {
                group,
                reward: v,
                advantage: v,
                degenerate: false,
            },
        );
    }
    let mut stats = BTreeMap::new();
    stats.insert(
        (group, 0),
        GroupStats {
            mean: 0.0,
            std: 1.0,
            count: batch.len(),
            degenerate: false,
        },
    );
    AdvantageTable {
        scheme,
        num_dims: 1,
        entries,
        stats,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::assign_initial_partitions;
    use crate::rollout::Rollout;

    fn batch(groups: &[(usize, usize, &[&[f64]])]) -> GroupBatch {
        let mut rollouts = Vec::new();
        for &(q, cap, rewards) in groups {
            for (i, r) in rewards.iter().enumerate() {
                rollouts.push(Rollout::new(
                    RolloutUid { question: q, index: i },
                    cap,
                    vec![0].into(),
                    vec![-0.7],
                    r.to_vec(),
                ));
            }
        }
        GroupBatch::new(rollouts).unwrap()
    }

    fn uid(q: usize, i: usize) -> RolloutUid {
        RolloutUid { question: q, index: i }
    }

    #[test]
    fn stats_examples() {
        let (m, s) = group_stats(&[1.0, 0.0, 1.0, 0.0], StdMode::Sample).unwrap();
        assert_eq!(m, 0.5);
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(group_stats(&[5.0, 5.0, 5.0], StdMode::Sample).unwrap(), (5.0, 0.0));
        let (m, s) = group_stats(&[0.0, 1.0], StdMode::Sample).unwrap();
        assert_eq!(m, 0.5);
        assert!((s - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(group_stats(&[1.0], StdMode::Sample), Err(Error::GroupTooSmall(1))));
        let (_, s) = group_stats(&[0.0, 1.0], StdMode::Population).unwrap();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn grpo_example() {
        let b = batch(&[(0, 0, &[&[1.0], &[0.0], &[1.0], &[0.0]])]);
        let t = grpo_advantages(&b, &RewardCombiner::Sum, AdvantageOptions::default()).unwrap();
        let expected = 0.5 / (1.0f64 / 3.0).sqrt();
        for i in 0..4 {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            assert!((t.advantage(uid(0, i), 0).unwrap() - sign * expected).abs() < 1e-12);
        }
        assert!((expected - 0.866).abs() < 1e-3);
    }

    #[test]
    fn constant_group_is_degenerate() {
        let b = batch(&[(0, 0, &[&[0.4, 0.6], &[0.7, 0.3], &[0.1, 0.9]])]);
        let t = grpo_advantages(&b, &RewardCombiner::Sum, AdvantageOptions::default()).unwrap();
        assert_eq!(t.max_abs(), 0.0);
        assert!(t.entry(uid(0, 1), 0).unwrap().degenerate);
        assert_eq!(t.degenerate_cells(), 1);
    }

    #[test]
    fn per_dimension_separates_interference() {
        let b = batch(&[(0, 0, &[&[1.0, 0.0], &[0.0, 1.0]])]);
        let opts = AdvantageOptions::default();
        let scalar = grpo_advantages(&b, &RewardCombiner::Sum, opts).unwrap();
        assert_eq!(scalar.max_abs(), 0.0);
        let t = reward_dim_advantages(&b, opts).unwrap();
        let h = 0.5f64.sqrt();
        assert!((t.advantage(uid(0, 0), 0).unwrap() - h).abs() < 1e-12);
        assert!((t.advantage(uid(0, 1), 0).unwrap() + h).abs() < 1e-12);
        assert!((t.advantage(uid(0, 0), 1).unwrap() + h).abs() < 1e-12);
        assert!((t.advantage(uid(0, 1), 1).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn constant_dimension_flagged_independently() {
        let b = batch(&[(0, 0, &[&[2.0, 0.0], &[2.0, 1.0], &[2.0, 5.0]])]);
        let t = reward_dim_advantages(&b, AdvantageOptions::default()).unwrap();
        assert!(t.entry(uid(0, 0), 0).unwrap().degenerate);
        assert!(!t.entry(uid(0, 0), 1).unwrap().degenerate);
        let col: Vec<f64> = (0..3).map(|i| t.advantage(uid(0, i), 1).unwrap()).collect();
        let (m, s) = group_stats(&col, StdMode::Sample).unwrap();
        assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k1_per_dimension_equals_scalar() {
        let b = batch(&[(0, 0, &[&[0.3], &[0.9], &[0.1]]), (1, 0, &[&[2.0], &[1.0]])]);
        let opts = AdvantageOptions::default();
        let a = grpo_advantages(&b, &RewardCombiner::Sum, opts).unwrap();
        let d = reward_dim_advantages(&b, opts).unwrap();
        for ((ka, ea), (kd, ed)) in a.entries().zip(d.entries()) {
            assert_eq!(ka, kd);
            assert_eq!(ea.advantage, ed.advantage);
        }
    }

    #[test]
    fn partition_pools_across_questions() {
        let b = batch(&[(0, 0, &[&[0.0], &[1.0]]), (1, 0, &[&[10.0], &[11.0]])]);
        let state = assign_initial_partitions(&b).unwrap();
        let t = partition_advantages(&b, &state, &RewardCombiner::Sum, AdvantageOptions::default())
            .unwrap();
        let s = t.stats()[&(GroupId::Capability(0), 0)];
        assert_eq!(s.mean, 5.5);
        // sqrt((5.5^2 + 4.5^2 + 4.5^2 + 5.5^2) / 3)
        assert!((s.std - (101.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((t.advantage(uid(0, 0), 0).unwrap() + 5.5 / s.std).abs() < 1e-12);
    }

    #[test]
    fn per_question_pooling_reduces_to_grpo() {
        let b = batch(&[(0, 0, &[&[0.0], &[1.0], &[3.0]]), (1, 0, &[&[10.0], &[11.0]])]);
        let state = assign_initial_partitions(&b).unwrap();
        let opts = AdvantageOptions {
            pooling: PartitionPooling::PerQuestion,
            ..Default::default()
        };
        let p = partition_advantages(&b, &state, &RewardCombiner::Sum, opts).unwrap();
        let g = grpo_advantages(&b, &RewardCombiner::Sum, opts).unwrap();
        for ((_, ep), (_, eg)) in p.entries().zip(g.entries()) {
            assert_eq!(ep.advantage, eg.advantage);
        }
    }

    #[test]
    fn relegated_rollout_uses_question_statistics() {
        let b = batch(&[(0, 0, &[&[0.0], &[1.0], &[4.0]]), (1, 0, &[&[10.0], &[11.0]])]);
        let opts = AdvantageOptions::default();
        let state = assign_initial_partitions(&b).unwrap();
        let mut outliers = std::collections::BTreeSet::new();
        outliers.insert(uid(0, 2));
        let state = crate::partition::relegate(&state, &outliers).unwrap();
        let p = partition_advantages(&b, &state, &RewardCombiner::Sum, opts).unwrap();
        let g = grpo_advantages(&b, &RewardCombiner::Sum, opts).unwrap();
        assert_eq!(p.advantage(uid(0, 2), 0), g.advantage(uid(0, 2), 0));
        assert_eq!(p.entry(uid(0, 2), 0).unwrap().group, GroupId::Question(0));
        assert_eq!(p.stats()[&(GroupId::Capability(0), 0)].count, 4);
    }

    #[test]
    fn singleton_partition_is_degenerate() {
        let b = batch(&[(0, 0, &[&[0.0], &[1.0]]), (1, 1, &[&[3.0], &[5.0]])]);
        let state = assign_initial_partitions(&b).unwrap();
        let mut out = std::collections::BTreeSet::new();
        out.insert(uid(1, 0));
        let state = crate::partition::relegate(&state, &out).unwrap();
        let t = partition_advantages(&b, &state, &RewardCombiner::Sum, AdvantageOptions::default())
            .unwrap();
        assert!(t.entry(uid(1, 1), 0).unwrap().degenerate);
        assert_eq!(t.advantage(uid(1, 1), 0), Some(0.0));
    }

    #[test]
    fn csv_dump_has_one_row_per_cell() {
        let b = batch(&[(0, 0, &[&[1.0, 0.0], &[0.0, 1.0]])]);
        let t = reward_dim_advantages(&b, AdvantageOptions::default()).unwrap();
        let csv = t.to_csv(&b);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], AUDIT_COLUMNS);
        assert_eq!(lines.len(), 2 + 4);
        assert!(lines[2].starts_with("0,q0-r0,0,0,0,question:0,1.0,0.5,"));
    }

    #[test]
    fn weighted_combiner_masks() {
        let b = batch(&[(0, 0, &[&[1.0, 0.0], &[0.0, 0.0]])]);
        let masked = RewardCombiner::Weighted(vec![0.0, 1.0]);
        let t = grpo_advantages(&b, &masked, AdvantageOptions::default()).unwrap();
        assert_eq!(t.max_abs(), 0.0);
        assert!(grpo_advantages(&b, &RewardCombiner::Weighted(vec![1.0]), AdvantageOptions::default()).is_err());
    }
}
