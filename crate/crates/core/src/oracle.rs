//! Independent checks: finite differences, exhaustive enumeration, and a
//! loop-by-loop reimplementation of the advantage formulas.
//!
//! Nothing here calls into `advantage` for statistics. Keep it that way: the
//! point of the reference is that a bug in one place does not hide in both.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use crate::advantage::{Scheme, StdMode};
use crate::envs::Task;
use crate::policy::{PolicyParams, TokenSequence};
use crate::rollout::{GroupBatch, Rollout, RolloutUid};
use crate::{Error, Result};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const MAX_ENUMERATION: u128 = 1_000_000;

/// Central differences of `f` at `params`, one coordinate at a time.
///
/// With tabular logits in [-10, 10], `h = 1e-5` keeps truncation and
/// rounding errors both around 1e-10 relative.
pub fn finite_diff_gradient(
    f: impl Fn(&PolicyParams) -> Result<f64>,
    params: &PolicyParams,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.theta().len());
    for j in 0..params.theta().len() {
        let x = params.theta()[j];
        probe.theta_mut()[j] = x + h;
        let up = f(&probe)?;
        probe.theta_mut()[j] = x - h;
        let down = f(&probe)?;
        probe.theta_mut()[j] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {j}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `sum over all sequences of pi(seq | task) * g(seq)`.
pub fn enumerate_expectation(
    params: &PolicyParams,
    task: &Task,
    g: impl Fn(&TokenSequence) -> f64,
) -> Result<f64> {
    let spec = params.spec();
    let v = spec.vocab_size;
    let t_len = spec.max_len;
    let states = (v as u128).checked_pow(t_len as u32).unwrap_or(u128::MAX);
    if states > MAX_ENUMERATION {
        return Err(Error::StateSpaceTooLarge(states));
    }
    let probs: Vec<Vec<f64>> = (0..t_len)
        .map(|t| params.probs_at(task.question_id, t))
        .collect::<Result<_>>()?;
    let mut digits = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        let p: f64 = digits.iter().enumerate().map(|(t, &d)| probs[t][d]).product();
        total += p * g(&TokenSequence::new(digits.clone()));
        // odometer increment, last position fastest
        let mut pos = t_len;
        loop {
            if pos == 0 {
                return Ok(total);
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < v {
                break;
            }
            digits[pos] = 0;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceCell {
    pub advantage: f64,
    pub degenerate: bool,
}

/// Advantages keyed by `(rollout, k)`, as produced by the reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceTable {
    pub scheme: Scheme,
    pub cells: BTreeMap<(RolloutUid, usize), ReferenceCell>,
}

/// Input options for the reference; mirrors the main module's knobs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceOptions {
    /// Weights for the scalar schemes; `None` is a plain sum.
    pub weights: Option<Vec<f64>>,
    pub population_std: bool,
    /// Pool each partition per question instead of across questions.
    pub per_question: bool,
}

impl ReferenceOptions {
    pub fn std_mode(&self) -> StdMode {
        if self.population_std {
            StdMode::Population
        } else {
            StdMode::Sample
        }
    }
}

/// Straight-line advantages. `relegated` only matters for the partition
/// schemes: those rollouts are standardized with their whole question group.
pub fn reference_advantages(
    batch: &GroupBatch,
    relegated: &BTreeSet<RolloutUid>,
    scheme: Scheme,
    opts: &ReferenceOptions,
) -> Result<ReferenceTable> {
    let rollouts = batch.rollouts();
    let k_all = rollouts[0].rewards.len();
    if let Some(w) = &opts.weights {
        if w.len() != k_all {
            return Err(Error::InvalidInput("weight count does not match K".into()));
        }
    }
    let per_dim = matches!(scheme, Scheme::PerDimension | Scheme::Joint);
    let partitioned = matches!(scheme, Scheme::Partition | Scheme::Joint);
    let dims = if per_dim { k_all } else { 1 };

    let value = |i: usize, k: usize| -> f64 {
        if per_dim {
            return rollouts[i].rewards[k];
        }
        let mut s = 0.0;
        for j in 0..k_all {
            let w = match &opts.weights {
                Some(w) => w[j],
                None => 1.0,
            };
            s += w * rollouts[i].rewards[j];
        }
        s
    };

    let mut cells = BTreeMap::new();
    for i in 0..rollouts.len() {
        let me = &rollouts[i];
        // who shares my statistics
        let mut peers = Vec::new();
        for (j, other) in rollouts.iter().enumerate() {
            let same_question = other.question_id == me.question_id;
            let include = if !partitioned || relegated.contains(&me.uid) {
                same_question
            } else if relegated.contains(&other.uid) {
                false
            } else if opts.per_question {
                same_question && other.capability_uid == me.capability_uid
            } else {
                other.capability_uid == me.capability_uid
            };
            if include {
                peers.push(j);
            }
        }
        for k in 0..dims {
            let n = peers.len();
            let mut degenerate = n < 2;
            let mut advantage = 0.0;
            if !degenerate {
                let mut sum = 0.0;
                let mut biggest: f64 = 0.0;
                for &j in &peers {
                    sum += value(j, k);
                    biggest = biggest.max(value(j, k).abs());
                }
                let mean = sum / n as f64;
                let mut sq = 0.0;
                for &j in &peers {
                    sq += (value(j, k) - mean) * (value(j, k) - mean);
                }
                let divisor = if opts.population_std { n as f64 } else { n as f64 - 1.0 };
                let sigma = (sq / divisor).sqrt();
                degenerate = sigma == 0.0 || sigma <= 1e-10 * biggest;
                if !degenerate {
                    advantage = (value(i, k) - mean) / sigma;
                }
            }
            cells.insert((me.uid, k), ReferenceCell { advantage, degenerate });
        }
    }
    Ok(ReferenceTable { scheme, cells })
}

/// Largest absolute advantage difference between the reference and a main
/// table, or an error naming the first structural disagreement.
pub fn compare_tables(
    reference: &ReferenceTable,
    table: &crate::advantage::AdvantageTable,
) -> Result<f64> {
    if reference.scheme != table.scheme() {
        return Err(Error::SchemeMismatch {
            expected: reference.scheme,
            found: table.scheme(),
        });
    }
    let mut count = 0;
    let mut worst: f64 = 0.0;
    for (&(uid, k), e) in table.entries() {
        count += 1;
        let r = reference
            .cells
            .get(&(uid, k))
            .ok_or_else(|| Error::Invariant(format!("reference has no cell {uid} k={k}")))?;
        if r.degenerate != e.degenerate {
            return Err(Error::Invariant(format!(
                "degenerate flag differs at {uid} k={k}: reference {}, main {}",
                r.degenerate, e.degenerate
            )));
        }
        worst = worst.max((r.advantage - e.advantage).abs());
    }
    if count != reference.cells.len() {
        return Err(Error::Invariant("tables have different cell counts".into()));
    }
    Ok(worst)
}

/// Shape limits for [`random_batch`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchShape {
    pub max_questions: usize,
    pub max_group: usize,
    pub max_dims: usize,
    pub max_capabilities: usize,
    /// Chance that a `(question, k)` group gets one extreme reward.
    pub outlier_prob: f64,
}

impl Default for BatchShape {
    fn default() -> Self {
        BatchShape {
            max_questions: 5,
            max_group: 8,
            max_dims: 3,
            max_capabilities: 3,
            outlier_prob: 0.2,
        }
    }
}

/// A random batch mixing binary, continuous, constant and outlier-laden
/// reward groups. With `policy`, tokens are sampled from it (question `q`
/// uses context `q`); otherwise every rollout is the single token 0.
pub fn random_batch(
    rng: &mut impl Rng,
    shape: &BatchShape,
    policy: Option<&PolicyParams>,
) -> Result<GroupBatch> {
    let k_dims = rng.random_range(1..=shape.max_dims);
    let m_caps = rng.random_range(1..=shape.max_capabilities);
    let q_count = match policy {
        Some(p) => rng.random_range(1..=shape.max_questions.min(p.spec().num_contexts)),
        None => rng.random_range(1..=shape.max_questions),
    };
    let mut rollouts = Vec::new();
    for q in 0..q_count {
        let cap = rng.random_range(0..m_caps);
        let g = rng.random_range(2..=shape.max_group);
        let mut rewards = vec![vec![0.0; k_dims]; g];
        for k in 0..k_dims {
            let scale = 10f64.powf(rng.random_range(-2.0..2.0));
            let style = rng.random_range(0..4);
            let p_one = rng.random::<f64>();
            let constant = rng.random::<f64>() * scale;
            for row in rewards.iter_mut() {
                row[k] = match style {
                    0 => {
                        if rng.random::<f64>() < p_one {
                            scale
                        } else {
                            0.0
                        }
                    }
                    1 => constant,
                    _ => rng.random_range(-1.0..1.0) * scale,
                };
            }
            if rng.random::<f64>() < shape.outlier_prob {
                let i = rng.random_range(0..g);
                rewards[i][k] = 1e3 * scale;
            }
        }
        let seqs = match policy {
            Some(p) => crate::policy::sample_rollouts(p, q, g, rng.random())?
                .into_iter()
                .map(|r| (r.tokens, r.old_log_probs))
                .collect(),
            None => vec![(TokenSequence::new(vec![0]), vec![0.0]); g],
        };
        for (i, ((tokens, lp), rw)) in seqs.into_iter().zip(rewards).enumerate() {
            rollouts.push(Rollout::new(RolloutUid { question: q, index: i }, cap, tokens, lp, rw));
        }
    }
    GroupBatch::new(rollouts)
}

/// Mean and standard error of `g` over `n` sampled rollouts.
pub fn monte_carlo_mean(
    params: &PolicyParams,
    task: &Task,
    n: usize,
    seed: u64,
    g: impl Fn(&TokenSequence) -> f64,
) -> Result<(f64, f64)> {
    let rollouts = crate::policy::sample_rollouts(params, task.question_id, n, seed)?;
    let xs: Vec<f64> = rollouts.iter().map(|r| g(&r.tokens)).collect();
    let m = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n as f64 - 1.0);
    Ok((m, (var / n as f64).sqrt()))
}
