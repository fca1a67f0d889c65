//! Rollouts and the per-step batch they are collected into.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::policy::TokenSequence;
use crate::{Error, Result};

/// Identifies one sampled response: the `index`-th sample for `question`.
/// Ordering is `(question, index)`, which is also the reduction order for
/// every sum over rollouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RolloutUid {
    pub question: usize,
    pub index: usize,
}

impl fmt::Display for RolloutUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "q{}-r{}", self.question, self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub uid: RolloutUid,
    pub question_id: usize,
    pub capability_uid: usize,
    pub tokens: TokenSequence,
    /// Per-token log-probabilities under the sampling policy.
    pub old_log_probs: Vec<f64>,
    /// One reward per dimension; empty until scored.
    pub rewards: Vec<f64>,
}

impl Rollout {
    pub(crate) fn unscored(uid: RolloutUid, tokens: TokenSequence, old_log_probs: Vec<f64>) -> Self {
        Rollout {
            uid,
            question_id: uid.question,
            capability_uid: 0,
            tokens,
            old_log_probs,
            rewards: Vec::new(),
        }
    }

    /// Builds a rollout directly, mostly for tests and synthetic batches.
    pub fn new(
        uid: RolloutUid,
        capability_uid: usize,
        tokens: TokenSequence,
        old_log_probs: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Self {
        Rollout {
            uid,
            question_id: uid.question,
            capability_uid,
            tokens,
            old_log_probs,
            rewards,
        }
    }
}

/// All rollouts of one training step, sorted by uid.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupBatch {
    rollouts: Vec<Rollout>,
    num_dims: usize,
}

impl GroupBatch {
    pub fn new(mut rollouts: Vec<Rollout>) -> Result<Self> {
        let Some(first) = rollouts.first() else {
            return Err(Error::InvalidInput("empty batch".into()));
        };
        let num_dims = first.rewards.len();
        if num_dims == 0 {
            return Err(Error::InvalidInput("rollouts carry no rewards".into()));
        }
        rollouts.sort_by_key(|r| r.uid);
        let mut seen = BTreeSet::new();
        let mut capability_of = BTreeMap::new();
        for r in &rollouts {
            if !seen.insert(r.uid) {
                return Err(Error::InvalidInput(format!("duplicate rollout uid {}", r.uid)));
            }
            if r.rewards.len() != num_dims {
                return Err(Error::InvalidInput(format!(
                    "rollout {} has {} reward dimensions, expected {num_dims}",
                    r.uid,
                    r.rewards.len()
                )));
            }
            if r.rewards.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("reward of rollout {}", r.uid)));
            }
            if r.old_log_probs.len() != r.tokens.len() {
                return Err(Error::InvalidInput(format!(
                    "rollout {} has {} tokens but {} log-probs",
                    r.uid,
                    r.tokens.len(),
                    r.old_log_probs.len()
                )));
            }
            if r.question_id != r.uid.question {
                return Err(Error::InvalidInput(format!(
                    "rollout {} question id mismatch",
                    r.uid
                )));
            }
            if *capability_of.entry(r.question_id).or_insert(r.capability_uid) != r.capability_uid {
                return Err(Error::InvalidInput(format!(
                    "question {} has rollouts with different capability labels",
                    r.question_id
                )));
            }
        }
        Ok(GroupBatch { rollouts, num_dims })
    }

    pub fn rollouts(&self) -> &[Rollout] {
        &self.rollouts
    }

    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Number of reward dimensions K.
    pub fn num_dims(&self) -> usize {
        self.num_dims
    }

    pub fn index_of(&self, uid: RolloutUid) -> Option<usize> {
        self.rollouts.binary_search_by_key(&uid, |r| r.uid).ok()
    }

    /// Rollout indices grouped by question, in uid order.
    pub fn question_groups(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rollouts.iter().enumerate() {
            groups.entry(r.question_id).or_default().push(i);
        }
        groups
    }

    pub fn capabilities(&self) -> BTreeSet<usize> {
        self.rollouts.iter().map(|r| r.capability_uid).collect()
    }

    pub fn num_questions(&self) -> usize {
        self.question_groups().len()
    }
}
