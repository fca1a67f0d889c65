//! Synthetic task suites.
//!
//! Every task is one question the policy conditions on, with a target token
//! pattern, a capability label and one reward rule per dimension. The token
//! `vocab_size - 1` is the designated filler token: targets never contain it,
//! and the format rule penalises it. The format rule is a stand-in for a real
//! format checker.
//!
//! Suite kinds:
//!
//! - `basic`: accuracy, format, then extra pattern-matching dimensions.
//! - `interference`: accuracy and `c - accuracy`, so the scalar sum of the
//!   two dimensions is the same for every response.
//! - `scale-conflict`: basic rules, with capability 0 at scale 1 and the
//!   last capability at `scale_factor` (geometric in between).
//! - `mixed`: even capabilities get interference rules, odd capabilities get
//!   basic rules scaled by `scale_factor`.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::policy::{PolicyParams, TokenSequence};
use crate::seed;
use crate::{Error, Result};

pub const MAX_DIMS: usize = 8;
pub const MAX_CAPABILITIES: usize = 8;
const SUITE_HEADER: &str = "# prpo-suite v1";

#[derive(Clone, Debug, PartialEq)]
pub enum RewardRule {
    /// `scale * matches(target) / T`
    Accuracy { scale: f64 },
    /// `scale * (1 - count(filler) / T)`
    Format { filler: usize, scale: f64 },
    /// `constant - matches(target) / T`
    InverseAccuracy { constant: f64 },
    /// `scale * matches(pattern) / T`
    Pattern { pattern: TokenSequence, scale: f64 },
}

impl RewardRule {
    /// Closed interval every value of this rule lies in.
    pub fn range(&self) -> (f64, f64) {
        match self {
            RewardRule::Accuracy { scale }
            | RewardRule::Format { scale, .. }
            | RewardRule::Pattern { scale, .. } => (0.0, *scale),
            RewardRule::InverseAccuracy { constant } => (constant - 1.0, *constant),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RewardRule::Accuracy { .. } => "accuracy",
            RewardRule::Format { .. } => "format",
            RewardRule::InverseAccuracy { .. } => "inverse_accuracy",
            RewardRule::Pattern { .. } => "pattern",
        }
    }

    /// `max(|lo|, |hi|)`, the magnitude used for normalized rewards.
    pub fn magnitude(&self) -> f64 {
        let (lo, hi) = self.range();
        lo.abs().max(hi.abs())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub question_id: usize,
    pub capability_uid: usize,
    pub target: TokenSequence,
    pub rules: Vec<RewardRule>,
}

impl Task {
    pub fn num_dims(&self) -> usize {
        self.rules.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn matches(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x == y).count()
}

/// Rewards of `seq` under each of the task's rules. Pure.
pub fn evaluate_rewards(task: &Task, seq: &TokenSequence) -> Result<RewardVector> {
    let t_len = task.target.len();
    if seq.len() != t_len {
        return Err(Error::InvalidInput(format!(
            "sequence length {} does not match task {} length {t_len}",
            seq.len(),
            task.question_id
        )));
    }
    let denom = t_len as f64;
    let toks = seq.tokens();
    let values = task
        .rules
        .iter()
        .map(|rule| match rule {
            RewardRule::Accuracy { scale } => {
                scale * (matches(toks, task.target.tokens()) as f64 / denom)
            }
            RewardRule::Format { filler, scale } => {
                let fill = toks.iter().filter(|&&t| t == *filler).count();
                scale * ((t_len - fill) as f64 / denom)
            }
            RewardRule::InverseAccuracy { constant } => {
                constant - matches(toks, task.target.tokens()) as f64 / denom
            }
            RewardRule::Pattern { pattern, scale } => {
                scale * (matches(toks, pattern.tokens()) as f64 / denom)
            }
        })
        .collect();
    Ok(RewardVector(values))
}

/// Exact expected rewards of `task` under `params`.
///
/// Every rule is a mean over positions of a per-position indicator, and
/// positions are independent given the question, so the expectation is the
/// mean of per-position marginals.
pub fn expected_rewards(task: &Task, params: &PolicyParams) -> Result<Vec<f64>> {
    let t_len = task.target.len();
    if t_len != params.spec().max_len {
        return Err(Error::InvalidInput(format!(
            "task length {t_len} != policy length {}",
            params.spec().max_len
        )));
    }
    let marginals = (0..t_len)
        .map(|t| params.probs_at(task.question_id, t))
        .collect::<Result<Vec<_>>>()?;
    let mean_prob = |pattern: &[usize]| -> f64 {
        pattern
            .iter()
            .zip(&marginals)
            .map(|(&tok, p)| p[tok])
            .sum::<f64>()
            / t_len as f64
    };
    task.rules
        .iter()
        .map(|rule| {
            Ok(match rule {
                RewardRule::Accuracy { scale } => scale * mean_prob(task.target.tokens()),
                RewardRule::Format { filler, scale } => {
                    if *filler >= params.spec().vocab_size {
                        return Err(Error::TokenOutOfRange {
                            token: *filler,
                            vocab_size: params.spec().vocab_size,
                        });
                    }
                    scale * (1.0 - mean_prob(&vec![*filler; t_len]))
                }
                RewardRule::InverseAccuracy { constant } => {
                    constant - mean_prob(task.target.tokens())
                }
                RewardRule::Pattern { pattern, scale } => scale * mean_prob(pattern.tokens()),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SuiteKind {
    Basic,
    Interference,
    ScaleConflict,
    Mixed,
}

impl SuiteKind {
    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Basic => "basic",
            SuiteKind::Interference => "interference",
            SuiteKind::ScaleConflict => "scale-conflict",
            SuiteKind::Mixed => "mixed",
        }
    }
}

impl FromStr for SuiteKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "basic" => SuiteKind::Basic,
            "interference" => SuiteKind::Interference,
            "scale-conflict" | "scale_conflict" => SuiteKind::ScaleConflict,
            "mixed" => SuiteKind::Mixed,
            other => return Err(Error::Config(format!("unknown suite kind '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    /// Number of tasks per capability label; label `m` is `sizes[m]`.
    pub sizes: Vec<usize>,
    pub num_dims: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub scale_factor: f64,
    /// `c` in the interference rule `R2 = c - R1`.
    pub constant: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            kind: SuiteKind::Basic,
            sizes: vec![4, 4],
            num_dims: 2,
            vocab_size: 4,
            seq_len: 3,
            scale_factor: 100.0,
            constant: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub kind: SuiteKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn num_dims(&self) -> usize {
        self.tasks.first().map_or(0, Task::num_dims)
    }

    pub fn num_capabilities(&self) -> usize {
        self.tasks
            .iter()
            .map(|t| t.capability_uid + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn filler(&self) -> usize {
        self.vocab_size - 1
    }

    /// Line-oriented text form; see `docs/formats.md`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{SUITE_HEADER}");
        let _ = writeln!(
            out,
            "suite kind={} vocab_size={} seq_len={} dims={}",
            self.kind.name(),
            self.vocab_size,
            self.seq_len,
            self.num_dims()
        );
        for task in &self.tasks {
            let target = join_tokens(task.target.tokens(), ",");
            let _ = write!(
                out,
                "{} {} {} {}",
                task.question_id,
                task.capability_uid,
                task.num_dims(),
                target
            );
            for rule in &task.rules {
                let _ = write!(out, " {}", format_rule(rule));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut header: Option<(SuiteKind, usize, usize, usize)> = None;
        let mut tasks = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |m: String| Error::ConfigParse {
                line: line_no,
                message: m,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields[0] == "suite" {
                let mut kind = None;
                let (mut v, mut t, mut k) = (None, None, None);
                for f in &fields[1..] {
                    let (key, val) = f
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key=value, got '{f}'")))?;
                    match key {
                        "kind" => kind = Some(val.parse::<SuiteKind>().map_err(|e| err(e.to_string()))?),
                        "vocab_size" => v = Some(parse_num::<usize>(val).map_err(err)?),
                        "seq_len" => t = Some(parse_num::<usize>(val).map_err(err)?),
                        "dims" => k = Some(parse_num::<usize>(val).map_err(err)?),
                        other => return Err(err(format!("unknown suite key '{other}'"))),
                    }
                }
                match (kind, v, t, k) {
                    (Some(kind), Some(v), Some(t), Some(k)) => header = Some((kind, v, t, k)),
                    _ => return Err(err("incomplete suite line".into())),
                }
                continue;
            }
            let Some((_, vocab, seq_len, dims)) = header else {
                return Err(err("task line before suite line".into()));
            };
            if fields.len() < 4 {
                return Err(err("task line needs id, capability, K and target".into()));
            }
            let question_id = parse_num::<usize>(fields[0]).map_err(err)?;
            let capability_uid = parse_num::<usize>(fields[1]).map_err(err)?;
            let k = parse_num::<usize>(fields[2]).map_err(err)?;
            let target = parse_tokens(fields[3], ',').map_err(err)?;
            let rules = fields[4..]
                .iter()
                .map(|f| parse_rule(f).map_err(err))
                .collect::<Result<Vec<_>>>()?;
            if rules.len() != k || k != dims {
                return Err(err(format!(
                    "declared K={k}, suite dims={dims}, found {} rules",
                    rules.len()
                )));
            }
            if target.len() != seq_len || target.iter().any(|&x| x >= vocab) {
                return Err(err("target does not fit vocab_size/seq_len".into()));
            }
            tasks.push(Task {
                question_id,
                capability_uid,
                target: TokenSequence::new(target),
                rules,
            });
        }
        let Some((kind, vocab_size, seq_len, _)) = header else {
            return Err(Error::ConfigParse {
                line: 0,
                message: "missing suite line".into(),
            });
        };
        Ok(TaskSuite {
            kind,
            vocab_size,
            seq_len,
            tasks,
        })
    }

    /// First 16 hex digits of the SHA-256 of [`TaskSuite::to_text`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn join_tokens(tokens: &[usize], sep: &str) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

fn parse_num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse::<T>().map_err(|_| format!("cannot parse '{s}'"))
}

fn parse_tokens(s: &str, sep: char) -> std::result::Result<Vec<usize>, String> {
    s.split(sep).map(parse_num::<usize>).collect()
}

fn format_rule(rule: &RewardRule) -> String {
    match rule {
        RewardRule::Accuracy { scale } => format!("accuracy:scale={scale:?}"),
        RewardRule::Format { filler, scale } => format!("format:filler={filler},scale={scale:?}"),
        RewardRule::InverseAccuracy { constant } => {
            format!("inverse_accuracy:constant={constant:?}")
        }
        RewardRule::Pattern { pattern, scale } => format!(
            "pattern:tokens={},scale={scale:?}",
            join_tokens(pattern.tokens(), "-")
        ),
    }
}

fn parse_rule(s: &str) -> std::result::Result<RewardRule, String> {
    let (name, params) = s.split_once(':').unwrap_or((s, ""));
    let mut scale = None;
    let mut filler = None;
    let mut constant = None;
    let mut tokens = None;
    for kv in params.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("bad rule parameter '{kv}'"))?;
        match k {
            "scale" => scale = Some(parse_num::<f64>(v)?),
            "filler" => filler = Some(parse_num::<usize>(v)?),
            "constant" => constant = Some(parse_num::<f64>(v)?),
            "tokens" => tokens = Some(parse_tokens(v, '-')?),
            other => return Err(format!("unknown rule parameter '{other}'")),
        }
    }
    let need = |x: Option<f64>, what: &str| x.ok_or_else(|| format!("rule {name} needs {what}"));
    let rule = match name {
        "accuracy" => RewardRule::Accuracy {
            scale: need(scale, "scale")?,
        },
        "format" => RewardRule::Format {
            filler: filler.ok_or("format rule needs filler")?,
            scale: need(scale, "scale")?,
        },
        "inverse_accuracy" => RewardRule::InverseAccuracy {
            constant: need(constant, "constant")?,
        },
        "pattern" => RewardRule::Pattern {
            pattern: TokenSequence::new(tokens.ok_or("pattern rule needs tokens")?),
            scale: need(scale, "scale")?,
        },
        other => return Err(format!("unknown rule '{other}'")),
    };
    Ok(rule)
}

fn random_pattern(rng: &mut impl Rng, seq_len: usize, vocab_size: usize) -> TokenSequence {
    // never the filler token
    TokenSequence::new((0..seq_len).map(|_| rng.random_range(0..vocab_size - 1)).collect())
}

fn basic_rules(
    rng: &mut impl Rng,
    cfg: &SuiteConfig,
    scale: f64,
) -> Vec<RewardRule> {
    let filler = cfg.vocab_size - 1;
    (0..cfg.num_dims)
        .map(|k| match k {
            0 => RewardRule::Accuracy { scale },
            1 => RewardRule::Format { filler, scale },
            _ => RewardRule::Pattern {
                pattern: random_pattern(rng, cfg.seq_len, cfg.vocab_size),
                scale,
            },
        })
        .collect()
}

/// Builds a deterministic suite. Question ids are assigned consecutively,
/// capability by capability.
pub fn make_task_suite(cfg: &SuiteConfig) -> Result<TaskSuite> {
    if cfg.sizes.is_empty() {
        return Err(Error::InvalidInput("suite needs at least one capability".into()));
    }
    if cfg.sizes.len() > MAX_CAPABILITIES {
        return Err(Error::InvalidInput(format!(
            "at most {MAX_CAPABILITIES} capabilities"
        )));
    }
    if let Some(m) = cfg.sizes.iter().position(|&s| s == 0) {
        return Err(Error::InvalidInput(format!("capability {m} has no tasks")));
    }
    if cfg.num_dims == 0 || cfg.num_dims > MAX_DIMS {
        return Err(Error::InvalidInput(format!(
            "reward dimensions must be in 1..={MAX_DIMS}"
        )));
    }
    if cfg.vocab_size < 2 || cfg.seq_len < 1 {
        return Err(Error::InvalidInput("vocab_size >= 2 and seq_len >= 1 required".into()));
    }
    if !(cfg.scale_factor.is_finite() && cfg.scale_factor > 0.0 && cfg.constant.is_finite()) {
        return Err(Error::InvalidInput("scale_factor must be positive and constant finite".into()));
    }
    match cfg.kind {
        SuiteKind::Interference | SuiteKind::Mixed if cfg.num_dims != 2 => {
            return Err(Error::InvalidInput(format!(
                "{} suites have exactly 2 reward dimensions, got {}",
                cfg.kind.name(),
                cfg.num_dims
            )))
        }
        SuiteKind::ScaleConflict if cfg.sizes.len() < 2 => {
            return Err(Error::InvalidInput(
                "scale-conflict suites need at least 2 capabilities".into(),
            ))
        }
        _ => {}
    }

    let m_count = cfg.sizes.len();
    let mut tasks = Vec::new();
    let mut question_id = 0;
    for (capability_uid, &count) in cfg.sizes.iter().enumerate() {
        for _ in 0..count {
            let mut rng = seed::rng(cfg.seed, &[seed::STREAM_SUITE, question_id as u64]);
            let target = random_pattern(&mut rng, cfg.seq_len, cfg.vocab_size);
            let interference = vec![
                RewardRule::Accuracy { scale: 1.0 },
                RewardRule::InverseAccuracy {
                    constant: cfg.constant,
                },
            ];
            let rules = match cfg.kind {
                SuiteKind::Basic => basic_rules(&mut rng, cfg, 1.0),
                SuiteKind::Interference => interference,
                SuiteKind::ScaleConflict => {
                    let frac = capability_uid as f64 / (m_count - 1) as f64;
                    basic_rules(&mut rng, cfg, cfg.scale_factor.powf(frac))
                }
                SuiteKind::Mixed => {
                    if capability_uid % 2 == 0 {
                        interference
                    } else {
                        basic_rules(&mut rng, cfg, cfg.scale_factor)
                    }
                }
            };
            tasks.push(Task {
                question_id,
                capability_uid,
                target,
                rules,
            });
            question_id += 1;
        }
    }
    Ok(TaskSuite {
        kind: cfg.kind,
        vocab_size: cfg.vocab_size,
        seq_len: cfg.seq_len,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{init_policy_scaled, PolicySpec};
    use proptest::prelude::*;

    fn cfg(kind: SuiteKind) -> SuiteConfig {
        SuiteConfig {
            kind,
            sizes: vec![5, 5],
            num_dims: 2,
            vocab_size: 4,
            seq_len: 4,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn interference_sum_is_constant() {
        let suite = make_task_suite(&cfg(SuiteKind::Interference)).unwrap();
        let task = &suite.tasks[0];
        let mut seq = task.target.tokens().to_vec();
        // one mismatch out of four
        seq[0] = (seq[0] + 1) % 3;
        let r = evaluate_rewards(task, &seq.into()).unwrap();
        assert_eq!(r.values()[0], 0.75);
        assert_eq!(r.values()[0] + r.values()[1], 1.0);
    }

    #[test]
    fn accuracy_examples() {
        let task = Task {
            question_id: 0,
            capability_uid: 0,
            target: vec![0, 1, 2, 0].into(),
            rules: vec![RewardRule::Accuracy { scale: 1.0 }],
        };
        let r = |s: Vec<usize>| evaluate_rewards(&task, &s.into()).unwrap().values()[0];
        assert_eq!(r(vec![0, 1, 2, 0]), 1.0);
        assert_eq!(r(vec![1, 0, 0, 3]), 0.0);
        assert_eq!(r(vec![0, 0, 0, 3]), 0.25);
        assert!(evaluate_rewards(&task, &vec![0, 1].into()).is_err());
    }

    #[test]
    fn format_rule_counts_filler() {
        let task = Task {
            question_id: 0,
            capability_uid: 0,
            target: vec![0, 0].into(),
            rules: vec![RewardRule::Format { filler: 3, scale: 2.0 }],
        };
        assert_eq!(evaluate_rewards(&task, &vec![3, 1].into()).unwrap().0, vec![1.0]);
    }

    #[test]
    fn scale_conflict_ranges() {
        let suite = make_task_suite(&cfg(SuiteKind::ScaleConflict)).unwrap();
        for t in &suite.tasks {
            let expected_hi = if t.capability_uid == 0 { 1.0 } else { 100.0 };
            for rule in &t.rules {
                assert_eq!(rule.range(), (0.0, expected_hi));
            }
        }
    }

    #[test]
    fn mixed_sizes_and_labels() {
        let suite = make_task_suite(&cfg(SuiteKind::Mixed)).unwrap();
        assert_eq!(suite.tasks.len(), 10);
        assert_eq!(suite.tasks.iter().filter(|t| t.capability_uid == 0).count(), 5);
        assert_eq!(suite.num_capabilities(), 2);
        assert!(suite.tasks.iter().all(|t| !t.target.tokens().contains(&3)));
    }

    #[test]
    fn suite_errors() {
        let mut c = cfg(SuiteKind::Basic);
        c.sizes = vec![];
        assert!(make_task_suite(&c).is_err());
        let mut c = cfg(SuiteKind::Basic);
        c.sizes = vec![3, 0];
        assert!(make_task_suite(&c).is_err());
        let mut c = cfg(SuiteKind::Interference);
        c.num_dims = 3;
        assert!(make_task_suite(&c).is_err());
        let mut c = cfg(SuiteKind::ScaleConflict);
        c.sizes = vec![4];
        assert!(make_task_suite(&c).is_err());
    }

    #[test]
    fn suite_is_deterministic() {
        let a = make_task_suite(&cfg(SuiteKind::Basic)).unwrap();
        let b = make_task_suite(&cfg(SuiteKind::Basic)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        let mut c = cfg(SuiteKind::Basic);
        c.seed = 1;
        assert_ne!(make_task_suite(&c).unwrap().hash(), a.hash());
    }

    #[test]
    fn expected_rewards_match_uniform_policy() {
        let suite = make_task_suite(&cfg(SuiteKind::Basic)).unwrap();
        let spec = PolicySpec::tabular(4, 4, suite.tasks.len()).unwrap();
        let p = init_policy_scaled(spec, 0, 0.0).unwrap();
        let e = expected_rewards(&suite.tasks[3], &p).unwrap();
        assert!((e[0] - 0.25).abs() < 1e-15);
        assert!((e[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn text_rejects_rule_count_mismatch() {
        let text = "suite kind=basic vocab_size=3 seq_len=2 dims=2\n0 0 2 0,1 accuracy:scale=1\n";
        assert!(matches!(
            TaskSuite::from_text(text),
            Err(Error::ConfigParse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn text_round_trip(
            kind in prop_oneof![
                Just(SuiteKind::Basic),
                Just(SuiteKind::Interference),
                Just(SuiteKind::ScaleConflict),
                Just(SuiteKind::Mixed)
            ],
            sizes in proptest::collection::vec(1usize..4, 2..4),
            vocab in 2usize..6,
            len in 1usize..5,
            factor in 0.5f64..500.0,
            seed in any::<u64>(),
        ) {
            let dims = if matches!(kind, SuiteKind::Basic | SuiteKind::ScaleConflict) { 3 } else { 2 };
            let c = SuiteConfig { kind, sizes, num_dims: dims, vocab_size: vocab, seq_len: len,
                scale_factor: factor, constant: 1.0, seed };
            let suite = make_task_suite(&c).unwrap();
            let parsed = TaskSuite::from_text(&suite.to_text()).unwrap();
            prop_assert_eq!(parsed, suite);
        }

        #[test]
        fn rewards_deterministic_and_in_range(seed in any::<u64>(), toks in proptest::collection::vec(0usize..4, 4)) {
            let mut c = cfg(SuiteKind::Mixed);
            c.seed = seed;
            let suite = make_task_suite(&c).unwrap();
            let seq = TokenSequence::new(toks);
            for task in &suite.tasks {
                let a = evaluate_rewards(task, &seq).unwrap();
                prop_assert_eq!(&a, &evaluate_rewards(task, &seq).unwrap());
                for (v, rule) in a.values().iter().zip(&task.rules) {
                    let (lo, hi) = rule.range();
                    prop_assert!(*v >= lo && *v <= hi);
                }
            }
        }
    }
}
