//! Experiment configuration, runs, comparisons and the oracle check table.
//!
//! Config files are flat `key = value` lines grouped under `[policy]`,
//! `[env]`, `[algo]` and `[run]` headers; `#` starts a comment. Keys may also
//! be written fully qualified (`algo.epsilon = 0.1`), which is what CLI
//! overrides use.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::advantage::{
    grpo_advantages, joint_advantages, partition_advantages, reward_dim_advantages,
    AdvantageOptions, PartitionPooling, RewardCombiner, StdMode, AUDIT_COLUMNS,
    AUDIT_SCHEMA,
};
use crate::envs::{evaluate_rewards, expected_rewards, make_task_suite, SuiteConfig, SuiteKind};
use crate::objective::{
    compute_advantages, run_training, AlgoKind, AlgoVariant, RewardPreset, StepMetrics,
    StepOutput, Surrogate, TrainingPlan,
};
use crate::oracle::{
    compare_tables, enumerate_expectation, finite_diff_gradient, monte_carlo_mean,
    random_batch, reference_advantages, BatchShape, ReferenceOptions, DEFAULT_FD_STEP,
};
use crate::partition::{validate_partitions, OutlierRule, ValidationOptions, DEFAULT_MAX_ITER, DEFAULT_TAU};
use crate::policy::{init_policy_scaled, Parameterization, PolicySpec, DEFAULT_INIT_SCALE};
use crate::{Error, Result};

pub const OUTPUT_ROOT_ENV: &str = "PRPO_OUTPUT_ROOT";
pub const CONFIG_SCHEMA: &str = "# prpo-config v1";
pub const METRICS_SCHEMA: &str = "# prpo-metrics v1";
pub const CELLS_SCHEMA: &str = "# prpo-advantage-cells v1";
pub const TIMING_SCHEMA: &str = "# prpo-timing v1";
pub const COMPARISON_SCHEMA: &str = "# prpo-comparison v1";
pub const PARTITION_SCHEMA: &str = "# prpo-partition-audit v1";
pub const SUMMARY_SCHEMA: &str = "# prpo-summary v1";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub parameterization: Parameterization,
    pub init_scale: f64,

    pub suite: SuiteKind,
    pub sizes: Vec<usize>,
    pub num_dims: usize,
    pub scale_factor: f64,
    pub constant: f64,
    pub suite_seed: u64,

    pub variant: AlgoVariant,

    pub seed: u64,
    pub group_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub inner_updates: usize,
    pub preset: RewardPreset,
    pub switch_step: usize,
    pub output_dir: Option<PathBuf>,
    pub flush_every: usize,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        ExperimentConfig {
            vocab_size: suite.vocab_size,
            seq_len: suite.seq_len,
            parameterization: Parameterization::TabularLogits,
            init_scale: DEFAULT_INIT_SCALE,
            suite: suite.kind,
            sizes: suite.sizes,
            num_dims: suite.num_dims,
            scale_factor: suite.scale_factor,
            constant: suite.constant,
            suite_seed: suite.seed,
            variant: AlgoVariant::new(AlgoKind::Prpo),
            seed: 0,
            group_size: 8,
            steps: 200,
            learning_rate: 1.0,
            momentum: 0.0,
            inner_updates: 1,
            preset: RewardPreset::Base,
            switch_step: 100,
            output_dir: None,
            flush_every: 1,
            threads: 0,
        }
    }
}

fn std_name(m: StdMode) -> &'static str {
    match m {
        StdMode::Sample => "sample",
        StdMode::Population => "population",
    }
}

fn pooling_name(p: PartitionPooling) -> &'static str {
    match p {
        PartitionPooling::Pooled => "pooled",
        PartitionPooling::PerQuestion => "per-question",
    }
}

fn rule_name(r: OutlierRule) -> &'static str {
    match r {
        OutlierRule::Scalar => "scalar",
        OutlierRule::AnyDimension => "any-dimension",
    }
}

fn join<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

const SECTIONS: [&str; 4] = ["policy", "env", "algo", "run"];

impl ExperimentConfig {
    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            kind: self.suite,
            sizes: self.sizes.clone(),
            num_dims: self.num_dims,
            vocab_size: self.vocab_size,
            seq_len: self.seq_len,
            scale_factor: self.scale_factor,
            constant: self.constant,
            seed: self.suite_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if self.inner_updates < 1 {
            return Err(Error::Config("inner_updates must be >= 1".into()));
        }
        if self.flush_every < 1 {
            return Err(Error::Config("flush_every must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be finite and >= 0".into()));
        }
        self.variant.validate()?;
        make_task_suite(&self.suite_config()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(w) = &self.variant.lambda_k {
            if w.len() != self.num_dims {
                return Err(Error::Config(format!(
                    "lambda_k has {} weights for {} dimensions",
                    w.len(),
                    self.num_dims
                )));
            }
        }
        self.preset
            .active_dims(self.num_dims, 0, self.switch_step)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Applies one `key = value` pair. `section` qualifies bare keys.
    pub fn set(&mut self, section: Option<&str>, key: &str, value: &str) -> std::result::Result<(), String> {
        let (section, key) = match key.split_once('.') {
            Some((s, k)) => (s, k),
            None => (section.ok_or_else(|| format!("key '{key}' outside a section"))?, key),
        };
        let v = value.trim();
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("invalid number '{v}'"))
        }
        fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',').map(|x| num(x.trim())).collect()
        }
        match (section, key) {
            ("policy", "vocab_size") => self.vocab_size = num(v)?,
            ("policy", "seq_len") => self.seq_len = num(v)?,
            ("policy", "parameterization") => {
                self.parameterization = Parameterization::parse(v)
                    .ok_or_else(|| format!("unknown parameterization '{v}'"))?
            }
            ("policy", "init_scale") => self.init_scale = num(v)?,
            ("env", "suite") => self.suite = v.parse().map_err(|e: Error| e.to_string())?,
            ("env", "sizes") => self.sizes = list(v)?,
            ("env", "dims") => self.num_dims = num(v)?,
            ("env", "scale_factor") => self.scale_factor = num(v)?,
            ("env", "constant") => self.constant = num(v)?,
            ("env", "seed") => self.suite_seed = num(v)?,
            ("algo", "variant") => {
                self.variant.kind = AlgoKind::parse(v).ok_or_else(|| format!("unknown variant '{v}'"))?
            }
            ("algo", "epsilon") => {
                let e: f64 = num(v)?;
                if !(e > 0.0 && e < 1.0) {
                    return Err(format!("epsilon must be in (0, 1), got {e}"));
                }
                self.variant.epsilon = e;
            }
            ("algo", "lambda_k") => {
                self.variant.lambda_k = if v == "uniform" { None } else { Some(list(v)?) }
            }
            ("algo", "lambda_m") => {
                if v != "uniform" {
                    return Err("lambda_m supports only 'uniform' in config files".into());
                }
            }
            ("algo", "kl_coeff") => self.variant.kl_coeff = num(v)?,
            ("algo", "tau") => {
                self.variant.tau = if v == "inf" { f64::INFINITY } else { num(v)? }
            }
            ("algo", "max_iter") => self.variant.max_iter = num(v)?,
            ("algo", "outlier_rule") => {
                self.variant.outlier_rule = match v {
                    "scalar" => OutlierRule::Scalar,
                    "any-dimension" => OutlierRule::AnyDimension,
                    _ => return Err(format!("unknown outlier_rule '{v}'")),
                }
            }
            ("algo", "std") => {
                self.variant.advantage.std_mode = match v {
                    "sample" => StdMode::Sample,
                    "population" => StdMode::Population,
                    _ => return Err(format!("unknown std mode '{v}'")),
                }
            }
            ("algo", "pooling") => {
                self.variant.advantage.pooling = match v {
                    "pooled" => PartitionPooling::Pooled,
                    "per-question" => PartitionPooling::PerQuestion,
                    _ => return Err(format!("unknown pooling '{v}'")),
                }
            }
            ("run", "seed") => self.seed = num(v)?,
            ("run", "group_size") => self.group_size = num(v)?,
            ("run", "steps") => self.steps = num(v)?,
            ("run", "learning_rate") => self.learning_rate = num(v)?,
            ("run", "momentum") => self.momentum = num(v)?,
            ("run", "inner_updates") => self.inner_updates = num(v)?,
            ("run", "preset") => {
                self.preset = RewardPreset::parse(v).ok_or_else(|| format!("unknown preset '{v}'"))?
            }
            ("run", "switch_step") => self.switch_step = num(v)?,
            ("run", "output_dir") => {
                self.output_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            ("run", "flush_every") => self.flush_every = num(v)?,
            ("run", "threads") => self.threads = num(v)?,
            (s, k) if SECTIONS.contains(&s) => return Err(format!("unknown key '{k}' in [{s}]")),
            (s, _) => return Err(format!("unknown section '{s}'")),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        let mut seen = BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::ConfigParse { line: n + 1, message };
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err(format!("malformed section header '{line}'")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section '{name}'")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            let qualified = match (&section, key.contains('.')) {
                (_, true) => key.to_string(),
                (Some(s), false) => format!("{s}.{key}"),
                (None, false) => key.to_string(),
            };
            if !seen.insert(qualified) {
                return Err(err(format!("duplicate key '{key}'")));
            }
            cfg.set(section.as_deref(), key, value).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides (keys fully qualified) and revalidates.
    pub fn with_overrides(mut self, overrides: &[String]) -> Result<Self> {
        for (i, o) in overrides.iter().enumerate() {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
            self.set(None, k.trim(), v).map_err(|message| Error::ConfigParse {
                line: i + 1,
                message: format!("override '{o}': {message}"),
            })?;
        }
        self.validate()?;
        Ok(self)
    }

    /// The canonical text form; parsing it yields an equal config.
    pub fn serialize(&self) -> String {
        let v = &self.variant;
        let mut s = String::new();
        let _ = writeln!(s, "{CONFIG_SCHEMA}");
        let _ = writeln!(s, "[policy]");
        let _ = writeln!(s, "vocab_size = {}", self.vocab_size);
        let _ = writeln!(s, "seq_len = {}", self.seq_len);
        let _ = writeln!(s, "parameterization = {}", self.parameterization.name());
        let _ = writeln!(s, "init_scale = {:?}", self.init_scale);
        let _ = writeln!(s, "\n[env]");
        let _ = writeln!(s, "suite = {}", self.suite.name());
        let _ = writeln!(s, "sizes = {}", join(&self.sizes));
        let _ = writeln!(s, "dims = {}", self.num_dims);
        let _ = writeln!(s, "scale_factor = {:?}", self.scale_factor);
        let _ = writeln!(s, "constant = {:?}", self.constant);
        let _ = writeln!(s, "seed = {}", self.suite_seed);
        let _ = writeln!(s, "\n[algo]");
        let _ = writeln!(s, "variant = {}", v.kind.name());
        let _ = writeln!(s, "epsilon = {:?}", v.epsilon);
        match &v.lambda_k {
            Some(w) => {
                let _ = writeln!(s, "lambda_k = {}", join(w));
            }
            None => {
                let _ = writeln!(s, "lambda_k = uniform");
            }
        }
        let _ = writeln!(s, "lambda_m = uniform");
        let _ = writeln!(s, "kl_coeff = {:?}", v.kl_coeff);
        if v.tau.is_infinite() {
            let _ = writeln!(s, "tau = inf");
        } else {
            let _ = writeln!(s, "tau = {:?}", v.tau);
        }
        let _ = writeln!(s, "max_iter = {}", v.max_iter);
        let _ = writeln!(s, "outlier_rule = {}", rule_name(v.outlier_rule));
        let _ = writeln!(s, "std = {}", std_name(v.advantage.std_mode));
        let _ = writeln!(s, "pooling = {}", pooling_name(v.advantage.pooling));
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "group_size = {}", self.group_size);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "momentum = {:?}", self.momentum);
        let _ = writeln!(s, "inner_updates = {}", self.inner_updates);
        let _ = writeln!(s, "preset = {}", self.preset.name());
        let _ = writeln!(s, "switch_step = {}", self.switch_step);
        if let Some(dir) = &self.output_dir {
            let _ = writeln!(s, "output_dir = {}", dir.display());
        }
        let _ = writeln!(s, "flush_every = {}", self.flush_every);
        let _ = writeln!(s, "threads = {}", self.threads);
        s
    }

    /// Output directory: `output_dir` if set (joined onto the output root
    /// when relative and the root env var is set), else
    /// `<root>/<variant>-s<seed>` with root defaulting to `runs`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
        match (&self.output_dir, root) {
            (Some(d), Some(root)) if d.is_relative() => root.join(d),
            (Some(d), _) => d.clone(),
            (None, root) => root
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(format!("{}-s{}", self.variant.kind.name(), self.seed)),
        }
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::parse(&text)
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

/// Named scalar series of one step, in column order.
pub fn metric_pairs(m: &StepMetrics) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, v) in m.mean_reward.iter().enumerate() {
        out.push((format!("reward_{k}"), *v));
    }
    out.push(("reward_aggregated".into(), m.aggregated_reward));
    for (k, v) in m.expected_reward.iter().enumerate() {
        out.push((format!("expected_{k}"), *v));
    }
    for (c, v) in m.normalized_by_capability.iter().enumerate() {
        out.push((format!("normalized_cap{c}"), *v));
    }
    for (k, v) in m.mean_abs_advantage.iter().enumerate() {
        out.push((format!("adv_abs_{k}"), *v));
    }
    out.push(("clip_fraction".into(), m.clip_fraction));
    out.push(("m_final".into(), m.m_final as f64));
    out.push(("relegations".into(), m.relegations as f64));
    out.push(("degenerate_cells".into(), m.degenerate_cells as f64));
    out.push(("mean_length".into(), m.mean_length));
    out.push(("param_norm".into(), m.param_norm));
    out.push(("grad_norm".into(), m.grad_norm));
    out.push(("surrogate".into(), m.surrogate));
    out.push(("kl".into(), m.kl));
    out
}

fn active_string(active: &[bool]) -> String {
    active.iter().map(|&a| if a { '1' } else { '0' }).collect()
}

/// Formats a metric value the way every output file does.
pub fn fmt_value(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub output_dir: PathBuf,
    pub suite_hash: String,
    pub metrics: Vec<StepMetrics>,
    pub total_relegations: usize,
}

#[derive(Clone, Copy)]
enum Sink {
    Metrics,
    Audit,
    Cells,
    Partition,
    Timing,
}

const SINK_FILES: [&str; 5] = [
    "metrics.csv",
    "advantage_audit.csv",
    "advantage_cells.csv",
    "partition_audit.log",
    "timing.csv",
];

struct Sinks {
    dir: PathBuf,
    files: Vec<BufWriter<File>>,
}

impl Sinks {
    fn create(dir: &Path) -> Result<Self> {
        let files = SINK_FILES
            .iter()
            .map(|name| {
                let p = dir.join(name);
                Ok(BufWriter::new(File::create(&p).map_err(|e| Error::io(&p, e))?))
            })
            .collect::<Result<_>>()?;
        Ok(Sinks {
            dir: dir.to_path_buf(),
            files,
        })
    }

    fn write(&mut self, which: Sink, text: &str) -> Result<()> {
        let i = which as usize;
        self.files[i]
            .write_all(text.as_bytes())
            .map_err(|e| Error::io(self.dir.join(SINK_FILES[i]), e))
    }

    fn flush(&mut self) -> Result<()> {
        for (f, name) in self.files.iter_mut().zip(SINK_FILES) {
            f.flush().map_err(|e| Error::io(self.dir.join(name), e))?;
        }
        Ok(())
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs one experiment and writes its artifacts into the resolved output
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_file(&dir.join("resolved-config.txt"), &cfg.serialize())?;

    let suite = make_task_suite(&cfg.suite_config())?;
    let suite_hash = suite.hash();
    let spec = PolicySpec::new(cfg.vocab_size, cfg.seq_len, suite.tasks.len(), cfg.parameterization)?;
    let init = init_policy_scaled(spec, cfg.seed, cfg.init_scale)?;
    let plan = TrainingPlan {
        suite: suite.clone(),
        init,
        variant: cfg.variant.clone(),
        group_size: cfg.group_size,
        inner_updates: cfg.inner_updates,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        steps: cfg.steps,
        seed: cfg.seed,
        preset: cfg.preset,
        switch_step: cfg.switch_step,
    };

    let mut sinks = Sinks::create(&dir)?;
    let k_dims = suite.num_dims();
    {
        let probe = StepMetrics {
            step: 0,
            active_dims: vec![true; k_dims],
            mean_reward: vec![0.0; k_dims],
            aggregated_reward: 0.0,
            expected_reward: vec![0.0; k_dims],
            normalized_by_capability: vec![0.0; suite.num_capabilities()],
            mean_abs_advantage: vec![0.0; if cfg.variant.kind.scheme().is_per_dimension() { k_dims } else { 1 }],
            cell_mean_abs_advantage: Vec::new(),
            degenerate_cells: 0,
            clip_fraction: 0.0,
            m_final: 0,
            relegations: 0,
            mean_length: 0.0,
            param_norm: 0.0,
            grad_norm: 0.0,
            surrogate: 0.0,
            kl: 0.0,
        };
        let names: Vec<String> = metric_pairs(&probe).into_iter().map(|(n, _)| n).collect();
        sinks.write(
            Sink::Metrics,
            &format!("{METRICS_SCHEMA}\nstep,variant,active,{}\n", names.join(",")),
        )?;
    }
    sinks.write(Sink::Audit, &format!("{AUDIT_SCHEMA}\n{AUDIT_COLUMNS}\n"))?;
    sinks.write(
        Sink::Cells,
        &format!("{CELLS_SCHEMA}\nstep,group_id,k,mean_abs_advantage\n"),
    )?;
    sinks.write(Sink::Partition, &format!("{PARTITION_SCHEMA}\n"))?;
    sinks.write(Sink::Timing, &format!("{TIMING_SCHEMA}\nstep,wall_ms\n"))?;

    let variant_name = cfg.variant.kind.name();
    let flush_every = cfg.flush_every;
    let mut total_relegations = 0usize;
    let mut on_step = |out: &StepOutput, elapsed: Duration| -> Result<()> {
        let m = &out.metrics;
        let values: Vec<String> = metric_pairs(m).into_iter().map(|(_, v)| fmt_value(v)).collect();
        sinks.write(
            Sink::Metrics,
            &format!(
                "{},{variant_name},{},{}\n",
                m.step,
                active_string(&m.active_dims),
                values.join(",")
            ),
        )?;
        let mut rows = String::new();
        out.table.write_csv_rows(&out.batch, m.step, &mut rows);
        sinks.write(Sink::Audit, &rows)?;
        let mut cells = String::new();
        for (g, k, v) in &m.cell_mean_abs_advantage {
            let _ = writeln!(cells, "{},{g},{k},{}", m.step, fmt_value(*v));
        }
        sinks.write(Sink::Cells, &cells)?;
        match &out.partition {
            Some(state) => {
                total_relegations += state.relegated().len();
                sinks.write(Sink::Partition, &state.audit_log(m.step))?;
            }
            None => sinks.write(
                Sink::Partition,
                &format!("step={} no partitions ({variant_name})\n", m.step),
            )?,
        }
        sinks.write(
            Sink::Timing,
            &format!("{},{:.3}\n", m.step, elapsed.as_secs_f64() * 1e3),
        )?;
        if (m.step + 1).is_multiple_of(flush_every) {
            sinks.flush()?;
        }
        Ok(())
    };
    let (_, metrics) = with_threads(cfg.threads, || run_training(&plan, &mut on_step))?;
    sinks.flush()?;

    let report = RunReport {
        output_dir: dir.clone(),
        suite_hash,
        metrics,
        total_relegations,
    };
    write_file(&dir.join("summary.txt"), &summary_text(cfg, &report))?;
    Ok(report)
}

/// `key=value` lines; final values are formatted exactly as in metrics.csv.
pub fn summary_text(cfg: &ExperimentConfig, report: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{SUMMARY_SCHEMA}");
    let _ = writeln!(s, "variant={}", cfg.variant.kind.name());
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "steps={}", report.metrics.len());
    let _ = writeln!(s, "suite_hash={}", report.suite_hash);
    let _ = writeln!(s, "total_relegations={}", report.total_relegations);
    if let Some(last) = report.metrics.last() {
        for (name, v) in metric_pairs(last) {
            let _ = writeln!(s, "final_{name}={}", fmt_value(v));
        }
    }
    s
}

/// Parses a `key=value` summary file, skipping comments.
pub fn parse_summary(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub csv_path: PathBuf,
    pub runs: Vec<(AlgoKind, RunReport)>,
}

impl Comparison {
    /// Terminal table of each variant's final metrics.
    pub fn table(&self) -> String {
        let Some((_, first)) = self.runs.first() else {
            return String::new();
        };
        let Some(last) = first.metrics.last() else {
            return "no steps were run\n".into();
        };
        let names: Vec<String> = metric_pairs(last).into_iter().map(|(n, _)| n).collect();
        let width = names.iter().map(String::len).max().unwrap_or(6).max(6);
        let mut s = format!("{:width$}", "metric");
        for (kind, _) in &self.runs {
            let _ = write!(s, " {:>12}", kind.name());
        }
        s.push('\n');
        for (i, name) in names.iter().enumerate() {
            let _ = write!(s, "{name:width$}");
            for (_, r) in &self.runs {
                let v = r.metrics.last().map(|m| metric_pairs(m)[i].1).unwrap_or(f64::NAN);
                let _ = write!(s, " {v:>12.4}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs each variant on the same suite and seed, each into its own
/// subdirectory, and writes `comparison.csv` in long format.
pub fn compare_variants(cfg: &ExperimentConfig, variants: &[AlgoKind]) -> Result<Comparison> {
    if variants.len() < 2 {
        return Err(Error::Config("compare needs at least 2 variants".into()));
    }
    let unique: BTreeSet<_> = variants.iter().collect();
    if unique.len() != variants.len() {
        return Err(Error::Config("variant list contains duplicates".into()));
    }
    let base = cfg.resolved_output_dir();
    let mut runs = Vec::new();
    for &kind in variants {
        let mut c = cfg.clone();
        c.variant.kind = kind;
        c.output_dir = Some(base.join(kind.name()));
        runs.push((kind, run_experiment(&c)?));
    }
    let mut csv = format!("{COMPARISON_SCHEMA}\nstep,variant,metric,value,suite_hash\n");
    for (kind, report) in &runs {
        for m in &report.metrics {
            for (name, v) in metric_pairs(m) {
                let _ = writeln!(
                    csv,
                    "{},{},{name},{},{}",
                    m.step,
                    kind.name(),
                    fmt_value(v),
                    report.suite_hash
                );
            }
        }
    }
    let csv_path = base.join("comparison.csv");
    write_file(&csv_path, &csv)?;
    Ok(Comparison { csv_path, runs })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn format_checks(checks: &[CheckResult]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(
            s,
            "{:width$}  {}  {}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    s
}

fn check(name: &str, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Smaller versions of the oracle cross-checks, run by `prpo verify`.
pub fn run_verification(seed: u64, cases: usize) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let shape = BatchShape::default();

    // reference advantages
    let mut worst: f64 = 0.0;
    let mut mismatch = None;
    for _ in 0..cases {
        let batch = random_batch(&mut rng, &shape, None)?;
        let vopts = ValidationOptions::default();
        let state = validate_partitions(&batch, DEFAULT_TAU, DEFAULT_MAX_ITER, &vopts)?;
        let opts = AdvantageOptions::default();
        let tables = [
            grpo_advantages(&batch, &RewardCombiner::Sum, opts)?,
            reward_dim_advantages(&batch, opts)?,
            partition_advantages(&batch, &state, &RewardCombiner::Sum, opts)?,
            joint_advantages(&batch, &state, opts)?,
        ];
        for t in &tables {
            let r = reference_advantages(&batch, state.relegated(), t.scheme(), &ReferenceOptions::default())?;
            match compare_tables(&r, t) {
                Ok(d) => worst = worst.max(d),
                Err(e) => mismatch = Some(e.to_string()),
            }
        }
    }
    out.push(check(
        "reference advantages",
        mismatch.is_none() && worst <= 1e-12,
        mismatch.unwrap_or_else(|| format!("max diff {worst:.2e} over {cases} batches")),
    ));

    // analytic vs finite-difference surrogate gradients
    let spec = PolicySpec::tabular(3, 2, 3)?;
    let mut worst: f64 = 0.0;
    for i in 0..cases.min(20) {
        let old = init_policy_scaled(spec, seed.wrapping_add(i as u64), 1.0)?;
        let mut new = old.clone();
        for x in new.theta_mut() {
            *x += rand::Rng::random_range(&mut rng, -0.05..0.05);
        }
        let batch = random_batch(
            &mut rng,
            &BatchShape { max_questions: 3, max_group: 5, ..shape },
            Some(&old),
        )?;
        for kind in AlgoKind::ALL {
            let variant = AlgoVariant::new(kind);
            let active = vec![true; batch.num_dims()];
            let (table, state) = compute_advantages(&batch, &variant, &active)?;
            let sur = Surrogate::build(&batch, &table, &variant, state.as_ref(), None)?;
            if sur.kink_distance(&new, &batch)? < 1e-3 {
                continue;
            }
            let an = sur.gradient(&new, &batch)?;
            let fd = finite_diff_gradient(|p| sur.value(p, &batch), &new, DEFAULT_FD_STEP)?;
            worst = worst.max(relative_error(&an, &fd));
        }
    }
    out.push(check(
        "surrogate gradients",
        worst < 1e-4,
        format!("max relative error {worst:.2e} away from clip boundaries"),
    ));

    // enumeration vs Monte Carlo
    let suite = make_task_suite(&SuiteConfig::default())?;
    let spec = PolicySpec::tabular(suite.vocab_size, suite.seq_len, suite.tasks.len())?;
    let mut within = 0;
    let total = suite.tasks.len();
    for task in &suite.tasks {
        let p = init_policy_scaled(spec, seed, 1.0)?;
        let g = |s: &crate::policy::TokenSequence| evaluate_rewards(task, s).map(|r| r.0[0]).unwrap_or(f64::NAN);
        let exact = enumerate_expectation(&p, task, g)?;
        let closed = expected_rewards(task, &p)?[0];
        let (mc, se) = monte_carlo_mean(&p, task, 20_000, seed, g)?;
        if (mc - exact).abs() <= 3.0 * se && (closed - exact).abs() < 1e-12 {
            within += 1;
        }
    }
    out.push(check(
        "enumerated expectations",
        within == total,
        format!("{within}/{total} tasks within 3 standard errors"),
    ));
    Ok(out)
}

/// `max |a - b| / max(max |b|, 1e-6)`.
///
/// Central differences at `h = 1e-5` carry about 1e-11 of rounding noise, so
/// gradients smaller than the floor are compared in absolute terms.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-6);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}
