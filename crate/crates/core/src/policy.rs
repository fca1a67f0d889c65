//! Softmax sequence policies.
//!
//! Every position of a response is drawn from its own softmax distribution
//! that depends on the question (context) and the position, never on the
//! prefix. Two parameterizations are provided:
//!
//! - tabular logits: one free logit per `(context, position, token)`;
//! - linear features: a one-hot feature model where
//!   `logit(c, t, v) = w_pos[t, v] + w_ctx[c, v]`, so positions share
//!   parameters across questions.
//!
//! Because positions are independent given the context, sequence
//! log-probabilities, their gradients and expectations of position-additive
//! rewards all have closed forms.

use rand::Rng;

use crate::rollout::{Rollout, RolloutUid};
use crate::seed;
use crate::{Error, Result};

/// Half-width of the uniform initialisation interval used by [`init_policy`].
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Parameterization {
    TabularLogits,
    LinearFeatures,
}

impl Parameterization {
    pub fn name(self) -> &'static str {
        match self {
            Parameterization::TabularLogits => "tabular",
            Parameterization::LinearFeatures => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tabular" | "tabular-logits" => Some(Parameterization::TabularLogits),
            "linear" | "linear-features" => Some(Parameterization::LinearFeatures),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PolicySpec {
    pub vocab_size: usize,
    /// Sequence length T. Sampled responses always have exactly this length.
    pub max_len: usize,
    pub num_contexts: usize,
    pub parameterization: Parameterization,
}

impl PolicySpec {
    pub fn new(
        vocab_size: usize,
        max_len: usize,
        num_contexts: usize,
        parameterization: Parameterization,
    ) -> Result<Self> {
        let spec = PolicySpec {
            vocab_size,
            max_len,
            num_contexts,
            parameterization,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn tabular(vocab_size: usize, max_len: usize, num_contexts: usize) -> Result<Self> {
        Self::new(
            vocab_size,
            max_len,
            num_contexts,
            Parameterization::TabularLogits,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidSpec(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.max_len < 1 {
            return Err(Error::InvalidSpec("max_len must be >= 1".into()));
        }
        if self.num_contexts < 1 {
            return Err(Error::InvalidSpec("num_contexts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        match self.parameterization {
            Parameterization::TabularLogits => self.num_contexts * self.max_len * self.vocab_size,
            Parameterization::LinearFeatures => {
                (self.max_len + self.num_contexts) * self.vocab_size
            }
        }
    }
}

/// A response: a list of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<usize>);

impl TokenSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        TokenSequence(tokens)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks length in `[1, max_len]` and every token `< vocab_size`.
    pub fn validate(&self, spec: &PolicySpec) -> Result<()> {
        if self.0.is_empty() || self.0.len() > spec.max_len {
            return Err(Error::InvalidInput(format!(
                "sequence length {} outside [1, {}]",
                self.0.len(),
                spec.max_len
            )));
        }
        if let Some(&token) = self.0.iter().find(|&&t| t >= spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token,
                vocab_size: spec.vocab_size,
            });
        }
        Ok(())
    }
}

impl From<Vec<usize>> for TokenSequence {
    fn from(v: Vec<usize>) -> Self {
        TokenSequence(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    spec: PolicySpec,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(spec: PolicySpec) -> Result<Self> {
        spec.validate()?;
        Ok(PolicyParams {
            theta: vec![0.0; spec.num_params()],
            spec,
        })
    }

    pub fn from_theta(spec: PolicySpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if theta.len() != spec.num_params() {
            return Err(Error::InvalidInput(format!(
                "theta has {} entries, spec needs {}",
                theta.len(),
                spec.num_params()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("policy parameters".into()));
        }
        Ok(PolicyParams { spec, theta })
    }

    pub fn spec(&self) -> &PolicySpec {
        &self.spec
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable access for optimizers. Callers keep entries finite.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn norm(&self) -> f64 {
        self.theta.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_context(&self, context: usize) -> Result<()> {
        if context >= self.spec.num_contexts {
            return Err(Error::ContextOutOfRange {
                context,
                num_contexts: self.spec.num_contexts,
            });
        }
        Ok(())
    }

    /// Logits of the next-token distribution at `(context, position)`.
    /// Indices are not checked.
    pub(crate) fn logits(&self, context: usize, position: usize) -> Vec<f64> {
        let v = self.spec.vocab_size;
        match self.spec.parameterization {
            Parameterization::TabularLogits => {
                let base = (context * self.spec.max_len + position) * v;
                self.theta[base..base + v].to_vec()
            }
            Parameterization::LinearFeatures => {
                let pos = position * v;
                let ctx = (self.spec.max_len + context) * v;
                (0..v)
                    .map(|j| self.theta[pos + j] + self.theta[ctx + j])
                    .collect()
            }
        }
    }

    /// Log-softmax of the logits at `(context, position)`.
    pub fn log_probs_at(&self, context: usize, position: usize) -> Result<Vec<f64>> {
        self.check_context(context)?;
        if position >= self.spec.max_len {
            return Err(Error::InvalidInput(format!(
                "position {position} >= max_len {}",
                self.spec.max_len
            )));
        }
        Ok(log_softmax(&self.logits(context, position)))
    }

    pub fn probs_at(&self, context: usize, position: usize) -> Result<Vec<f64>> {
        Ok(self
            .log_probs_at(context, position)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// `grad += scale * d logits(context, position) / d theta` contracted
    /// with `dlogits`.
    pub(crate) fn accumulate_logit_grad(
        &self,
        context: usize,
        position: usize,
        dlogits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let v = self.spec.vocab_size;
        match self.spec.parameterization {
            Parameterization::TabularLogits => {
                let base = (context * self.spec.max_len + position) * v;
                for (g, d) in grad[base..base + v].iter_mut().zip(dlogits) {
                    *g += scale * d;
                }
            }
            Parameterization::LinearFeatures => {
                let pos = position * v;
                let ctx = (self.spec.max_len + context) * v;
                for (j, d) in dlogits.iter().enumerate() {
                    grad[pos + j] += scale * d;
                    grad[ctx + j] += scale * d;
                }
            }
        }
    }

    /// `grad += scale * d log pi(token | context, position) / d theta`.
    pub(crate) fn accumulate_token_grad(
        &self,
        context: usize,
        position: usize,
        token: usize,
        scale: f64,
        grad: &mut [f64],
    ) {
        let mut d = softmax(&self.logits(context, position));
        for p in d.iter_mut() {
            *p = -*p;
        }
        d[token] += 1.0;
        self.accumulate_logit_grad(context, position, &d, scale, grad);
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Draws `theta` uniformly from `[-DEFAULT_INIT_SCALE, DEFAULT_INIT_SCALE]`.
pub fn init_policy(spec: PolicySpec, seed: u64) -> Result<PolicyParams> {
    init_policy_scaled(spec, seed, DEFAULT_INIT_SCALE)
}

/// `theta[j] = scale * (2u_j - 1)` with `u_j` the j-th `f64` of the ChaCha8
/// stream derived from `(seed, init)`. `scale = 0` gives the uniform policy.
pub fn init_policy_scaled(spec: PolicySpec, seed: u64, scale: f64) -> Result<PolicyParams> {
    spec.validate()?;
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::InvalidInput(format!("init scale {scale}")));
    }
    let mut rng = seed::rng(seed, &[seed::STREAM_INIT]);
    let theta = (0..spec.num_params())
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    PolicyParams::from_theta(spec, theta)
}

fn check_seq(params: &PolicyParams, context: usize, seq: &TokenSequence) -> Result<()> {
    params.check_context(context)?;
    seq.validate(&params.spec)
}

/// Per-token log-probabilities of `seq` under `params` for question `context`.
pub fn log_prob(params: &PolicyParams, context: usize, seq: &TokenSequence) -> Result<Vec<f64>> {
    check_seq(params, context, seq)?;
    Ok(seq
        .tokens()
        .iter()
        .enumerate()
        .map(|(t, &tok)| log_softmax(&params.logits(context, t))[tok])
        .collect())
}

/// Gradient of the total sequence log-probability with respect to `theta`.
pub fn grad_log_prob(
    params: &PolicyParams,
    context: usize,
    seq: &TokenSequence,
) -> Result<Vec<f64>> {
    check_seq(params, context, seq)?;
    let mut grad = vec![0.0; params.theta.len()];
    for (t, &tok) in seq.tokens().iter().enumerate() {
        params.accumulate_token_grad(context, t, tok, 1.0, &mut grad);
    }
    Ok(grad)
}

fn sample_one(params: &PolicyParams, question: usize, index: usize, seed: u64) -> Rollout {
    let mut rng = seed::rng(seed, &[seed::STREAM_SAMPLE, question as u64, index as u64]);
    let t_len = params.spec.max_len;
    let mut tokens = Vec::with_capacity(t_len);
    let mut old_log_probs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let lp = log_softmax(&params.logits(question, t));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = lp.len() - 1;
        for (v, l) in lp.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                choice = v;
                break;
            }
        }
        tokens.push(choice);
        old_log_probs.push(lp[choice]);
    }
    Rollout::unscored(
        RolloutUid { question, index },
        TokenSequence::new(tokens),
        old_log_probs,
    )
}

/// Samples `g` full-length responses to `question`.
///
/// Rollout `i` uses the random stream derived from `(seed, question, i)`, so
/// the result does not depend on the order in which rollouts or questions are
/// sampled. The returned rollouts carry no rewards yet.
pub fn sample_rollouts(
    params: &PolicyParams,
    question: usize,
    g: usize,
    seed: u64,
) -> Result<Vec<Rollout>> {
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    params.check_context(question)?;
    Ok((0..g)
        .map(|i| sample_one(params, question, i, seed))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(spec: PolicySpec, seed: u64, scale: f64) -> PolicyParams {
        init_policy_scaled(spec, seed, scale).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let spec = PolicySpec::tabular(3, 2, 1).unwrap();
        assert_eq!(init_policy(spec, 7).unwrap(), init_policy(spec, 7).unwrap());
        let spec4 = PolicySpec::tabular(3, 2, 4).unwrap();
        assert_eq!(init_policy(spec4, 7).unwrap().theta().len(), 24);
        let linear = PolicySpec::new(3, 2, 4, Parameterization::LinearFeatures).unwrap();
        assert_eq!(linear.num_params(), 18);
    }

    #[test]
    fn zero_init_is_uniform() {
        let spec = PolicySpec::tabular(3, 2, 1).unwrap();
        let p = init_policy_scaled(spec, 1, 0.0).unwrap();
        for x in p.probs_at(0, 1).unwrap() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(PolicySpec::tabular(1, 2, 1).is_err());
        assert!(PolicySpec::tabular(2, 0, 1).is_err());
        assert!(PolicySpec::tabular(2, 2, 0).is_err());
    }

    #[test]
    fn uniform_log_prob() {
        let spec = PolicySpec::tabular(4, 3, 1).unwrap();
        let p = PolicyParams::zeros(spec).unwrap();
        let lp = log_prob(&p, 0, &vec![0, 3, 2].into()).unwrap();
        for x in lp {
            assert!((x - (0.25f64).ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_log_prob_is_zero() {
        let spec = PolicySpec::tabular(3, 1, 1).unwrap();
        let p = PolicyParams::from_theta(spec, vec![0.0, 1000.0, 0.0]).unwrap();
        let lp = log_prob(&p, 0, &vec![1].into()).unwrap();
        assert!(lp[0].abs() < 1e-12 && lp[0] <= 0.0);
    }

    #[test]
    fn out_of_range_inputs() {
        let spec = PolicySpec::tabular(3, 2, 2).unwrap();
        let p = PolicyParams::zeros(spec).unwrap();
        assert!(matches!(
            log_prob(&p, 0, &vec![0, 3].into()),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(
            log_prob(&p, 2, &vec![0, 1].into()),
            Err(Error::ContextOutOfRange { .. })
        ));
        assert!(log_prob(&p, 0, &vec![0, 1, 1].into()).is_err());
        assert!(log_prob(&p, 0, &vec![].into()).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for draw in 0..1000u64 {
            let v = rng.random_range(2..9);
            let t = rng.random_range(1..5);
            let c = rng.random_range(1..4);
            let param = if draw % 2 == 0 {
                Parameterization::TabularLogits
            } else {
                Parameterization::LinearFeatures
            };
            let spec = PolicySpec::new(v, t, c, param).unwrap();
            let p = random_params(spec, draw, 10.0);
            let ctx = rng.random_range(0..c);
            let pos = rng.random_range(0..t);
            // brute force: log-prob of each single-token choice at `pos`
            let mut total = 0.0;
            for tok in 0..v {
                let mut seq = vec![0; t];
                seq[pos] = tok;
                total += log_prob(&p, ctx, &seq.into()).unwrap()[pos].exp();
            }
            assert!((total - 1.0).abs() < 1e-10, "sum {total}");
        }
    }

    #[test]
    fn uniform_binary_gradient() {
        let spec = PolicySpec::tabular(2, 1, 1).unwrap();
        let p = PolicyParams::zeros(spec).unwrap();
        let g = grad_log_prob(&p, 0, &vec![0].into()).unwrap();
        assert_eq!(g, vec![0.5, -0.5]);
    }

    #[test]
    fn gradient_sums_to_zero_per_position() {
        let spec = PolicySpec::tabular(5, 3, 2).unwrap();
        let p = random_params(spec, 11, 2.0);
        let g = grad_log_prob(&p, 1, &vec![4, 0, 2].into()).unwrap();
        for slot in g.chunks(5) {
            assert!(slot.iter().sum::<f64>().abs() < 1e-14);
        }
        // context 0 untouched
        assert!(g[..15].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tabular_gradient_formula() {
        let spec = PolicySpec::tabular(3, 2, 1).unwrap();
        let p = random_params(spec, 5, 1.0);
        let seq: TokenSequence = vec![2, 0].into();
        let g = grad_log_prob(&p, 0, &seq).unwrap();
        for t in 0..2 {
            let probs = p.probs_at(0, t).unwrap();
            for v in 0..3 {
                let ind = if seq.tokens()[t] == v { 1.0 } else { 0.0 };
                assert!((g[t * 3 + v] - (ind - probs[v])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let spec = PolicySpec::tabular(4, 3, 2).unwrap();
        let p = random_params(spec, 2, 1.0);
        let a = sample_rollouts(&p, 1, 16, 99).unwrap();
        let b = sample_rollouts(&p, 1, 16, 99).unwrap();
        assert_eq!(a, b);
        let uids: std::collections::BTreeSet<_> = a.iter().map(|r| r.uid).collect();
        assert_eq!(uids.len(), 16);
        for r in &a {
            let lp = log_prob(&p, 1, &r.tokens).unwrap();
            assert_eq!(lp, r.old_log_probs);
        }
    }

    #[test]
    fn sampling_requires_two() {
        let spec = PolicySpec::tabular(2, 1, 1).unwrap();
        let p = PolicyParams::zeros(spec).unwrap();
        assert!(matches!(
            sample_rollouts(&p, 0, 1, 0),
            Err(Error::GroupTooSmall(1))
        ));
    }

    #[test]
    fn uniform_sampling_frequency() {
        let spec = PolicySpec::tabular(2, 1, 1).unwrap();
        let p = PolicyParams::zeros(spec).unwrap();
        let n = 100_000;
        let rollouts = sample_rollouts(&p, 0, n, 4).unwrap();
        let zeros = rollouts.iter().filter(|r| r.tokens.tokens()[0] == 0).count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() <= 3.0 * (0.25f64 / n as f64).sqrt());
    }

    #[test]
    fn saturated_sampling_is_constant() {
        let spec = PolicySpec::tabular(3, 2, 1).unwrap();
        let p = PolicyParams::from_theta(spec, vec![0.0, 50.0, 0.0, 50.0, 0.0, 0.0]).unwrap();
        let rollouts = sample_rollouts(&p, 0, 32, 1).unwrap();
        for r in rollouts {
            assert_eq!(r.tokens.tokens(), &[1, 0]);
        }
    }
}
