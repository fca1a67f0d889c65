//! Clipped surrogate objectives, their exact gradients and the training loop.
//!
//! Every variant is a weighted sum of per-token clipped terms:
//!
//! ```text
//! J(theta) = sum_terms w * (1/T) * sum_t L_clip(r_t(theta), A)
//! ```
//!
//! | variant      | one term per          | weight `w`                    | advantage |
//! |--------------|-----------------------|-------------------------------|-----------|
//! | GRPO         | rollout               | `1 / (Q * G_q)`               | scalar    |
//! | Reward-PRPO  | rollout x dimension   | `lambda_k / (Q * G_q)`        | per dim   |
//! | Data-PRPO    | rollout               | `lambda_m / abs(G_m)`         | partition |
//! | PRPO         | rollout x dimension   | `lambda_m * lambda_k / abs(G_m)` | joint  |
//!
//! `Q` is the number of questions, `G_q` the group size of the rollout's
//! question and `G_m` its partition (relegated rollouts are singleton
//! partitions).
//!
//! Gradient of a token term: `w/T * A * r * grad log pi` when the unclipped
//! branch is in effect, zero otherwise. The unclipped branch is in effect when
//! `1 - eps < r < 1 + eps`, or when `r * A < clip(r) * A` strictly; at an exact
//! tie on the clip boundary the clipped (zero) gradient is used.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::advantage::{
    grpo_advantages, joint_advantages, partition_advantages, reward_dim_advantages,
    AdvantageOptions, AdvantageTable, RewardCombiner, Scheme,
};
use crate::envs::{evaluate_rewards, expected_rewards, TaskSuite};
use crate::partition::{
    validate_partitions, OutlierRule, PartitionKey, PartitionState, ValidationOptions,
    DEFAULT_MAX_ITER, DEFAULT_TAU,
};
use crate::policy::{log_softmax, sample_rollouts, softmax, PolicyParams};
use crate::rollout::{GroupBatch, Rollout};
use crate::seed;
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.2;
pub const DEFAULT_LEARNING_RATE: f64 = 0.1;
const WEIGHT_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AlgoKind {
    Grpo,
    RewardPrpo,
    DataPrpo,
    Prpo,
}

impl AlgoKind {
    pub const ALL: [AlgoKind; 4] = [
        AlgoKind::Grpo,
        AlgoKind::RewardPrpo,
        AlgoKind::DataPrpo,
        AlgoKind::Prpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgoKind::Grpo => "grpo",
            AlgoKind::RewardPrpo => "reward-prpo",
            AlgoKind::DataPrpo => "data-prpo",
            AlgoKind::Prpo => "prpo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s.to_ascii_lowercase())
    }

    pub fn scheme(self) -> Scheme {
        match self {
            AlgoKind::Grpo => Scheme::Scalar,
            AlgoKind::RewardPrpo => Scheme::PerDimension,
            AlgoKind::DataPrpo => Scheme::Partition,
            AlgoKind::Prpo => Scheme::Joint,
        }
    }

    pub fn uses_partitions(self) -> bool {
        matches!(self, AlgoKind::DataPrpo | AlgoKind::Prpo)
    }
}

/// Partition weights. `Uniform` resolves to `1 / M_final` once the
/// partitions of a step are known.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum LambdaM {
    #[default]
    Uniform,
    Explicit(BTreeMap<PartitionKey, f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlgoVariant {
    pub kind: AlgoKind,
    pub epsilon: f64,
    /// Dimension weights; `None` means uniform `1 / K`.
    pub lambda_k: Option<Vec<f64>>,
    pub lambda_m: LambdaM,
    pub kl_coeff: f64,
    pub tau: f64,
    pub max_iter: usize,
    pub outlier_rule: OutlierRule,
    pub advantage: AdvantageOptions,
}

impl AlgoVariant {
    pub fn new(kind: AlgoKind) -> Self {
        AlgoVariant {
            kind,
            epsilon: DEFAULT_EPSILON,
            lambda_k: None,
            lambda_m: LambdaM::Uniform,
            kl_coeff: 0.0,
            tau: DEFAULT_TAU,
            max_iter: DEFAULT_MAX_ITER,
            outlier_rule: OutlierRule::Scalar,
            advantage: AdvantageOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1), got {}",
                self.epsilon
            )));
        }
        if let Some(w) = &self.lambda_k {
            check_simplex(w.iter().copied(), "lambda_k")?;
        }
        if let LambdaM::Explicit(w) = &self.lambda_m {
            check_simplex(w.values().copied(), "lambda_m")?;
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::Config(format!("kl_coeff must be >= 0, got {}", self.kl_coeff)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }

    /// Dimension weights restricted to `active` dimensions and renormalized.
    pub fn effective_lambda_k(&self, num_dims: usize, active: &[bool]) -> Result<Vec<f64>> {
        let base = match &self.lambda_k {
            Some(w) if w.len() != num_dims => {
                return Err(Error::Config(format!(
                    "lambda_k has {} entries for {num_dims} reward dimensions",
                    w.len()
                )))
            }
            Some(w) => w.clone(),
            None => vec![1.0 / num_dims as f64; num_dims],
        };
        if active.len() != num_dims {
            return Err(Error::InvalidInput("active mask length mismatch".into()));
        }
        let masked: Vec<f64> = base
            .iter()
            .zip(active)
            .map(|(w, &a)| if a { *w } else { 0.0 })
            .collect();
        let total: f64 = masked.iter().sum();
        if total <= 0.0 {
            return Err(Error::Config("no active reward dimension has positive weight".into()));
        }
        if active.iter().all(|&a| a) {
            Ok(masked)
        } else {
            Ok(masked.into_iter().map(|w| w / total).collect())
        }
    }
}

fn check_simplex(w: impl Iterator<Item = f64> + Clone, name: &str) -> Result<()> {
    if w.clone().any(|x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::Config(format!("{name} entries must be finite and >= 0")));
    }
    let total: f64 = w.sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::Config(format!("{name} must sum to 1, sums to {total}")));
    }
    Ok(())
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_term(r: f64, a: f64, epsilon: f64) -> f64 {
    (r * a).min(r.clamp(1.0 - epsilon, 1.0 + epsilon) * a)
}

/// Whether the token term's gradient is the unclipped one (see module docs).
fn unclipped_active(r: f64, a: f64, epsilon: f64) -> bool {
    (r > 1.0 - epsilon && r < 1.0 + epsilon) || r * a < r.clamp(1.0 - epsilon, 1.0 + epsilon) * a
}

fn new_log_probs(new: &PolicyParams, rollout: &Rollout) -> Result<Vec<f64>> {
    crate::policy::log_prob(new, rollout.question_id, &rollout.tokens)
        .map_err(|e| match e {
            Error::TokenOutOfRange { .. } | Error::ContextOutOfRange { .. } => Error::SpecMismatch,
            other => other,
        })
}

/// `exp(log pi_new - log pi_old)` per token.
pub fn importance_ratios(new: &PolicyParams, rollout: &Rollout) -> Result<Vec<f64>> {
    let lp = new_log_probs(new, rollout)?;
    if lp.len() != rollout.old_log_probs.len() {
        return Err(Error::SpecMismatch);
    }
    Ok(lp
        .iter()
        .zip(&rollout.old_log_probs)
        .map(|(n, o)| (n - o).exp())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Term {
    index: usize,
    weight: f64,
    advantage: f64,
}

/// The resolved surrogate of one batch: a list of weighted advantage terms.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    epsilon: f64,
    /// Terms grouped per rollout index, rollouts in uid order.
    terms: Vec<Vec<Term>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ClipStats {
    pub tokens: usize,
    /// Tokens whose ratio lies outside `[1 - eps, 1 + eps]`.
    pub clipped: usize,
}

impl ClipStats {
    pub fn fraction(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.clipped as f64 / self.tokens as f64
        }
    }
}

/// Resolves the partition weights for `state`.
pub fn resolve_lambda_m(
    lambda_m: &LambdaM,
    state: &PartitionState,
) -> Result<BTreeMap<PartitionKey, f64>> {
    let keys: Vec<PartitionKey> = state.partitions().into_keys().collect();
    match lambda_m {
        LambdaM::Uniform => {
            let w = 1.0 / keys.len() as f64;
            Ok(keys.into_iter().map(|k| (k, w)).collect())
        }
        LambdaM::Explicit(map) => {
            check_simplex(map.values().copied(), "lambda_m")?;
            for k in &keys {
                if !map.contains_key(k) {
                    return Err(Error::Config(format!("lambda_m has no weight for partition {k}")));
                }
            }
            if map.len() != keys.len() {
                return Err(Error::Config("lambda_m names partitions not in the batch".into()));
            }
            Ok(map.clone())
        }
    }
}

impl Surrogate {
    /// `active` masks reward dimensions (all active when `None`).
    pub fn build(
        batch: &GroupBatch,
        table: &AdvantageTable,
        variant: &AlgoVariant,
        partition: Option<&PartitionState>,
        active: Option<&[bool]>,
    ) -> Result<Self> {
        let expected = variant.kind.scheme();
        if table.scheme() != expected {
            return Err(Error::SchemeMismatch {
                expected,
                found: table.scheme(),
            });
        }
        let k_dims = batch.num_dims();
        let all = vec![true; k_dims];
        let active = active.unwrap_or(&all);
        let lambda_k = variant.effective_lambda_k(k_dims, active)?;
        let dims: Vec<(usize, f64)> = if expected.is_per_dimension() {
            lambda_k.iter().copied().enumerate().collect()
        } else {
            vec![(0, 1.0)]
        };

        // per-rollout normaliser
        let share: Vec<f64> = if variant.kind.uses_partitions() {
            let state = partition.ok_or_else(|| {
                Error::InvalidInput(format!("{} needs a partition state", variant.kind.name()))
            })?;
            let lambda_m = resolve_lambda_m(&variant.lambda_m, state)?;
            let sizes: BTreeMap<PartitionKey, usize> = state
                .partitions()
                .into_iter()
                .map(|(k, v)| (k, v.len()))
                .collect();
            batch
                .rollouts()
                .iter()
                .map(|r| {
                    let key = state.key(r.uid).ok_or_else(|| {
                        Error::InvalidInput(format!("rollout {} has no partition", r.uid))
                    })?;
                    Ok(lambda_m[&key] / sizes[&key] as f64)
                })
                .collect::<Result<_>>()?
        } else {
            let groups = batch.question_groups();
            let q = groups.len() as f64;
            batch
                .rollouts()
                .iter()
                .map(|r| 1.0 / (q * groups[&r.question_id].len() as f64))
                .collect()
        };

        let mut terms = Vec::with_capacity(batch.len());
        for (index, r) in batch.rollouts().iter().enumerate() {
            let mut per = Vec::with_capacity(dims.len());
            for &(k, lk) in &dims {
                let advantage = table.advantage(r.uid, k).ok_or_else(|| {
                    Error::InvalidInput(format!("advantage table has no entry for {} k={k}", r.uid))
                })?;
                per.push(Term {
                    index,
                    weight: lk * share[index],
                    advantage,
                });
            }
            terms.push(per);
        }
        Ok(Surrogate {
            epsilon: variant.epsilon,
            terms,
        })
    }

    /// Sum of `w * A` over all terms: the value at the sampling policy.
    pub fn center_value(&self) -> f64 {
        self.terms
            .iter()
            .flatten()
            .map(|t| t.weight * t.advantage)
            .sum()
    }

    /// Smallest distance of any token ratio to a clip boundary `1 +- eps`.
    /// Finite differences are only meaningful when this exceeds the step.
    pub fn kink_distance(&self, new: &PolicyParams, batch: &GroupBatch) -> Result<f64> {
        let mut d = f64::INFINITY;
        for r in batch.rollouts() {
            for x in importance_ratios(new, r)? {
                d = d.min((x - 1.0 - self.epsilon).abs()).min((x - 1.0 + self.epsilon).abs());
            }
        }
        Ok(d)
    }

    pub fn value(&self, new: &PolicyParams, batch: &GroupBatch) -> Result<f64> {
        let per_rollout = self.per_rollout(new, batch, false)?;
        Ok(per_rollout.iter().map(|p| p.value).sum())
    }

    pub fn gradient(&self, new: &PolicyParams, batch: &GroupBatch) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(new, batch)?.1)
    }

    pub fn value_and_gradient(
        &self,
        new: &PolicyParams,
        batch: &GroupBatch,
    ) -> Result<(f64, Vec<f64>, ClipStats)> {
        let per_rollout = self.per_rollout(new, batch, true)?;
        let mut grad = vec![0.0; new.theta().len()];
        let mut value = 0.0;
        let mut clip = ClipStats::default();
        // fixed reduction order: rollouts by uid, tokens by position
        for (r, p) in batch.rollouts().iter().zip(&per_rollout) {
            value += p.value;
            clip.tokens += p.coeffs.len();
            clip.clipped += p.clipped;
            for (t, (&tok, &c)) in r.tokens.tokens().iter().zip(&p.coeffs).enumerate() {
                if c != 0.0 {
                    new.accumulate_token_grad(r.question_id, t, tok, c, &mut grad);
                }
            }
        }
        Ok((value, grad, clip))
    }

    fn per_rollout(
        &self,
        new: &PolicyParams,
        batch: &GroupBatch,
        with_grad: bool,
    ) -> Result<Vec<RolloutPart>> {
        if self.terms.len() != batch.len() {
            return Err(Error::InvalidInput("surrogate built for a different batch".into()));
        }
        let eps = self.epsilon;
        batch
            .rollouts()
            .par_iter()
            .zip(self.terms.par_iter())
            .map(|(r, terms)| {
                let ratios = importance_ratios(new, r)?;
                let inv_t = 1.0 / ratios.len() as f64;
                let mut value = 0.0;
                let mut coeffs = vec![0.0; ratios.len()];
                for term in terms {
                    debug_assert!(std::ptr::eq(&batch.rollouts()[term.index], r));
                    let mut inner = 0.0;
                    for (t, &ratio) in ratios.iter().enumerate() {
                        inner += clipped_term(ratio, term.advantage, eps);
                        if with_grad && unclipped_active(ratio, term.advantage, eps) {
                            coeffs[t] += term.weight * inv_t * term.advantage * ratio;
                        }
                    }
                    value += term.weight * inv_t * inner;
                }
                let clipped = ratios
                    .iter()
                    .filter(|&&x| x < 1.0 - eps || x > 1.0 + eps)
                    .count();
                Ok(RolloutPart {
                    value,
                    coeffs,
                    clipped,
                })
            })
            .collect()
    }
}

struct RolloutPart {
    value: f64,
    coeffs: Vec<f64>,
    clipped: usize,
}

pub fn surrogate_value(
    new: &PolicyParams,
    batch: &GroupBatch,
    table: &AdvantageTable,
    variant: &AlgoVariant,
    partition: Option<&PartitionState>,
) -> Result<f64> {
    Surrogate::build(batch, table, variant, partition, None)?.value(new, batch)
}

pub fn surrogate_gradient(
    new: &PolicyParams,
    batch: &GroupBatch,
    table: &AdvantageTable,
    variant: &AlgoVariant,
    partition: Option<&PartitionState>,
) -> Result<Vec<f64>> {
    Surrogate::build(batch, table, variant, partition, None)?.gradient(new, batch)
}

/// Mean over the batch's questions and all positions of
/// `KL(pi_old(.|q,t) || pi_new(.|q,t))`, and its gradient in `new`.
pub fn kl_penalty_value_and_grad(
    new: &PolicyParams,
    old: &PolicyParams,
    batch: &GroupBatch,
) -> Result<(f64, Vec<f64>)> {
    if new.spec() != old.spec() {
        return Err(Error::SpecMismatch);
    }
    let t_len = new.spec().max_len;
    let questions: Vec<usize> = batch.question_groups().into_keys().collect();
    for &q in &questions {
        new.check_context(q)?;
    }
    let count = (questions.len() * t_len) as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; new.theta().len()];
    for &q in &questions {
        for t in 0..t_len {
            let lp_new = log_softmax(&new.logits(q, t));
            let lp_old = log_softmax(&old.logits(q, t));
            let p_new = softmax(&new.logits(q, t));
            let mut kl = 0.0;
            let mut dlogits = vec![0.0; lp_new.len()];
            for v in 0..lp_new.len() {
                let po = lp_old[v].exp();
                kl += po * (lp_old[v] - lp_new[v]);
                dlogits[v] = p_new[v] - po;
            }
            value += kl / count;
            new.accumulate_logit_grad(q, t, &dlogits, 1.0 / count, &mut grad);
        }
    }
    Ok((value, grad))
}

/// Plain or heavy-ball gradient ascent.
#[derive(Clone, Debug, PartialEq)]
pub struct Ascent {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Ascent {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Ascent {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn apply(&mut self, params: &mut PolicyParams, grad: &[f64]) {
        if self.momentum == 0.0 {
            for (p, g) in params.theta_mut().iter_mut().zip(grad) {
                *p += self.learning_rate * g;
            }
            return;
        }
        if self.velocity.len() != grad.len() {
            self.velocity = vec![0.0; grad.len()];
        }
        for ((p, v), g) in params.theta_mut().iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p += self.learning_rate * *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub group_size: usize,
    pub inner_updates: usize,
    /// Active reward dimensions for this step; `None` means all.
    pub active_dims: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub active_dims: Vec<bool>,
    /// Mean sampled reward per dimension.
    pub mean_reward: Vec<f64>,
    /// Mean sampled reward combined over active dimensions.
    pub aggregated_reward: f64,
    /// Exact expected reward per dimension of the updated policy, averaged
    /// over tasks.
    pub expected_reward: Vec<f64>,
    /// Exact expected reward of the updated policy per capability, each
    /// dimension divided by its magnitude and averaged over active dimensions.
    pub normalized_by_capability: Vec<f64>,
    /// Mean |advantage| per table dimension.
    pub mean_abs_advantage: Vec<f64>,
    /// Mean |advantage| per `(group, k)` cell, in group order.
    pub cell_mean_abs_advantage: Vec<(String, usize, f64)>,
    pub degenerate_cells: usize,
    pub clip_fraction: f64,
    pub m_final: usize,
    pub relegations: usize,
    pub mean_length: f64,
    pub param_norm: f64,
    pub grad_norm: f64,
    pub surrogate: f64,
    pub kl: f64,
}

impl StepMetrics {
    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.aggregated_reward,
            self.clip_fraction,
            self.mean_length,
            self.param_norm,
            self.grad_norm,
            self.surrogate,
            self.kl,
        ];
        scalars.iter().all(|x| x.is_finite())
            && self
                .mean_reward
                .iter()
                .chain(&self.expected_reward)
                .chain(&self.normalized_by_capability)
                .chain(&self.mean_abs_advantage)
                .all(|x| x.is_finite())
    }
}

/// Everything produced by one training step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub params: PolicyParams,
    pub metrics: StepMetrics,
    pub batch: GroupBatch,
    pub table: AdvantageTable,
    pub partition: Option<PartitionState>,
}

/// Samples `group_size` rollouts per task from `old` and scores them.
pub fn collect_batch(
    old: &PolicyParams,
    suite: &TaskSuite,
    group_size: usize,
    seed: u64,
) -> Result<GroupBatch> {
    let per_task: Vec<Vec<Rollout>> = suite
        .tasks
        .par_iter()
        .map(|task| {
            let mut rollouts = sample_rollouts(old, task.question_id, group_size, seed)?;
            for r in &mut rollouts {
                r.rewards = evaluate_rewards(task, &r.tokens)?.into_inner();
                r.capability_uid = task.capability_uid;
            }
            Ok(rollouts)
        })
        .collect::<Result<_>>()?;
    GroupBatch::new(per_task.into_iter().flatten().collect())
}

fn combiner_for(active: &[bool]) -> RewardCombiner {
    if active.iter().all(|&a| a) {
        RewardCombiner::Sum
    } else {
        RewardCombiner::Weighted(active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect())
    }
}

/// Advantage pipeline of `variant`; runs partition validation for the
/// partitioned variants.
pub fn compute_advantages(
    batch: &GroupBatch,
    variant: &AlgoVariant,
    active: &[bool],
) -> Result<(AdvantageTable, Option<PartitionState>)> {
    let combiner = combiner_for(active);
    let opts = variant.advantage;
    Ok(match variant.kind {
        AlgoKind::Grpo => (grpo_advantages(batch, &combiner, opts)?, None),
        AlgoKind::RewardPrpo => (reward_dim_advantages(batch, opts)?, None),
        AlgoKind::DataPrpo | AlgoKind::Prpo => {
            let vopts = ValidationOptions {
                combiner: combiner.clone(),
                advantage: opts,
                rule: variant.outlier_rule,
            };
            let state = validate_partitions(batch, variant.tau, variant.max_iter, &vopts)?;
            let table = if variant.kind == AlgoKind::DataPrpo {
                partition_advantages(batch, &state, &combiner, opts)?
            } else {
                joint_advantages(batch, &state, opts)?
            };
            (table, Some(state))
        }
    })
}

/// Exact expected rewards of `params` over the suite: per-dimension means
/// over tasks, and per-capability normalized means over `active` dimensions.
pub fn evaluate_policy(
    params: &PolicyParams,
    suite: &TaskSuite,
    active: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k_dims = suite.num_dims();
    let m = suite.num_capabilities();
    let mut per_dim = vec![0.0; k_dims];
    let mut per_cap = vec![0.0; m];
    let mut cap_count = vec![0usize; m];
    let n_active = active.iter().filter(|&&a| a).count().max(1) as f64;
    for task in &suite.tasks {
        let e = expected_rewards(task, params)?;
        let mut norm = 0.0;
        for (k, (v, rule)) in e.iter().zip(&task.rules).enumerate() {
            per_dim[k] += v / suite.tasks.len() as f64;
            if active[k] {
                norm += v / rule.magnitude() / n_active;
            }
        }
        per_cap[task.capability_uid] += norm;
        cap_count[task.capability_uid] += 1;
    }
    for (v, &c) in per_cap.iter_mut().zip(&cap_count) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    Ok((per_dim, per_cap))
}

/// One outer iteration: sample from `old`, build advantages, then take
/// `inner_updates` ascent steps on the surrogate starting from `params`.
pub fn train_step(
    params: &PolicyParams,
    old: &PolicyParams,
    suite: &TaskSuite,
    variant: &AlgoVariant,
    cfg: &TrainConfig,
    optimizer: &mut Ascent,
    seed: u64,
    step: usize,
) -> Result<StepOutput> {
    variant.validate()?;
    if !(optimizer.learning_rate >= 0.0 && optimizer.learning_rate.is_finite()) {
        return Err(Error::Config("learning rate must be finite and >= 0".into()));
    }
    if params.spec() != old.spec() {
        return Err(Error::SpecMismatch);
    }
    let k_dims = suite.num_dims();
    let active = cfg.active_dims.clone().unwrap_or_else(|| vec![true; k_dims]);
    if active.len() != k_dims {
        return Err(Error::Config("active dimension mask does not match K".into()));
    }
    let batch = collect_batch(old, suite, cfg.group_size, seed)?;
    let (table, partition) = compute_advantages(&batch, variant, &active)?;
    let surrogate = Surrogate::build(&batch, &table, variant, partition.as_ref(), Some(&active))?;

    let mut new = params.clone();
    let mut clip = ClipStats::default();
    let mut first_grad_norm = None;
    let mut first_value = None;
    let mut kl_value = 0.0;
    for _ in 0..cfg.inner_updates {
        let (value, mut grad, c) = surrogate.value_and_gradient(&new, &batch)?;
        clip.tokens += c.tokens;
        clip.clipped += c.clipped;
        let mut total = value;
        if variant.kl_coeff > 0.0 {
            let (kl, kl_grad) = kl_penalty_value_and_grad(&new, old, &batch)?;
            total -= variant.kl_coeff * kl;
            kl_value = kl;
            for (g, k) in grad.iter_mut().zip(&kl_grad) {
                *g -= variant.kl_coeff * k;
            }
        }
        first_value.get_or_insert(total);
        first_grad_norm.get_or_insert(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
        optimizer.apply(&mut new, &grad);
    }
    if !new.is_finite() {
        return Err(Error::Invariant(format!("non-finite parameters after step {step}")));
    }

    let n = batch.len() as f64;
    let mut mean_reward = vec![0.0; k_dims];
    let mut aggregated = 0.0;
    let combiner = combiner_for(&active);
    for r in batch.rollouts() {
        for (m, v) in mean_reward.iter_mut().zip(&r.rewards) {
            *m += v / n;
        }
        aggregated += combiner.combine(&r.rewards) / n;
    }
    let (expected_reward, normalized_by_capability) = evaluate_policy(&new, suite, &active)?;
    let cell_mean_abs_advantage = table
        .cells()
        .into_iter()
        .map(|((g, k), v)| {
            let m = v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
            (g.to_string(), k, m)
        })
        .collect();
    let metrics = StepMetrics {
        step,
        active_dims: active,
        mean_reward,
        aggregated_reward: aggregated,
        expected_reward,
        normalized_by_capability,
        mean_abs_advantage: table.mean_abs_by_dim(),
        cell_mean_abs_advantage,
        degenerate_cells: table.degenerate_cells(),
        clip_fraction: clip.fraction(),
        m_final: partition.as_ref().map_or(0, PartitionState::m_final),
        relegations: partition.as_ref().map_or(0, |p| p.relegated().len()),
        mean_length: batch.rollouts().iter().map(|r| r.tokens.len() as f64).sum::<f64>() / n,
        param_norm: new.norm(),
        grad_norm: first_grad_norm.unwrap_or(0.0),
        surrogate: first_value.unwrap_or(0.0),
        kl: kl_value,
    };
    if !metrics.is_finite() {
        return Err(Error::Invariant(format!("non-finite metrics at step {step}")));
    }
    Ok(StepOutput {
        params: new,
        metrics,
        batch,
        table,
        partition,
    })
}

/// Which reward dimensions are optimized at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum RewardPreset {
    /// All dimensions.
    #[default]
    Base,
    AccuracyOnly,
    FormatOnly,
    AccuracyThenFormat,
    FormatThenAccuracy,
}

impl RewardPreset {
    pub const ALL: [RewardPreset; 5] = [
        RewardPreset::Base,
        RewardPreset::AccuracyOnly,
        RewardPreset::FormatOnly,
        RewardPreset::AccuracyThenFormat,
        RewardPreset::FormatThenAccuracy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RewardPreset::Base => "base",
            RewardPreset::AccuracyOnly => "accuracy-only",
            RewardPreset::FormatOnly => "format-only",
            RewardPreset::AccuracyThenFormat => "acc-then-format",
            RewardPreset::FormatThenAccuracy => "format-then-acc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Active mask at `step`. Dimension 0 is accuracy, dimension 1 format.
    pub fn active_dims(self, num_dims: usize, step: usize, switch_step: usize) -> Result<Vec<bool>> {
        let only = |k: usize| -> Result<Vec<bool>> {
            if k >= num_dims {
                return Err(Error::Config(format!(
                    "preset {} needs reward dimension {k}, suite has {num_dims}",
                    self.name()
                )));
            }
            Ok((0..num_dims).map(|j| j == k).collect())
        };
        match self {
            RewardPreset::Base => Ok(vec![true; num_dims]),
            RewardPreset::AccuracyOnly => only(0),
            RewardPreset::FormatOnly => only(1),
            RewardPreset::AccuracyThenFormat => only(if step < switch_step { 0 } else { 1 }),
            RewardPreset::FormatThenAccuracy => only(if step < switch_step { 1 } else { 0 }),
        }
    }
}

/// A fully resolved training run.
#[derive(Clone, Debug)]
pub struct TrainingPlan {
    pub suite: TaskSuite,
    pub init: PolicyParams,
    pub variant: AlgoVariant,
    pub group_size: usize,
    pub inner_updates: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub seed: u64,
    pub preset: RewardPreset,
    pub switch_step: usize,
}

/// Runs `plan.steps` outer steps, refreshing the sampling policy after each.
/// `on_step` sees every step's output (for writing metrics) and may abort.
pub fn run_training(
    plan: &TrainingPlan,
    mut on_step: impl FnMut(&StepOutput, std::time::Duration) -> Result<()>,
) -> Result<(PolicyParams, Vec<StepMetrics>)> {
    let mut params = plan.init.clone();
    let mut optimizer = Ascent::new(plan.learning_rate, plan.momentum);
    let mut series = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let started = Instant::now();
        let active = plan
            .preset
            .active_dims(plan.suite.num_dims(), step, plan.switch_step)?;
        let cfg = TrainConfig {
            group_size: plan.group_size,
            inner_updates: plan.inner_updates,
            active_dims: Some(active),
        };
        let step_seed = seed::derive(plan.seed, &[seed::STREAM_STEP, step as u64]);
        let old = params.clone();
        let out = train_step(
            &params,
            &old,
            &plan.suite,
            &plan.variant,
            &cfg,
            &mut optimizer,
            step_seed,
            step,
        )?;
        on_step(&out, started.elapsed())?;
        params = out.params;
        series.push(out.metrics);
    }
    Ok((params, series))
}
