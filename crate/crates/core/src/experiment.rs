//! Config-driven runs: parsing, orchestration and artifact writing.
//!
//! A run config is a sectioned TOML document. Each section is decoded on its
//! own so errors carry a `section.key` path. Every run writes its effective,
//! fully-defaulted config next to its artifacts; rerunning from that echo
//! reproduces the run byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpeedError};
use crate::estimators::CurriculumShape;
use crate::metrics::{time_to_target, to_jsonl, Counters, IterationKind, MetricsRecord, METRICS_SCHEMA_VERSION};
use crate::rng::RngStream;
use crate::scheduler::{BufferPolicy, CurriculumConfig, EpochLoader};
use crate::sim::{
    clock_report, make_policy_population, make_population, ClockReport, InferenceEngine, LatencyModel, LatentEngine,
    PolicyEngine, PopulationSpec,
};
use crate::trainer::{train_baseline, train_speed, BaselineConfig, TrainConfig};
use crate::verify::{run_suite, Suite, VerifyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Speed,
    /// Baseline and screened runs from the same start, with speedups.
    Compare,
    Verify,
    Sweep,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationKind {
    /// One tabular context per task; learning moves pass rates.
    #[default]
    Policy,
    /// Fixed Bernoulli pass rates; no learning.
    Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Responses per context.
    pub responses: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { responses: 4 }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    #[serde(default)]
    pub kind: PopulationKind,
    pub size: usize,
    #[serde(default)]
    pub zero_mass: f64,
    #[serde(default)]
    pub one_mass: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub extreme_gap: f64,
}

impl PopulationSection {
    pub fn spec(&self) -> PopulationSpec {
        PopulationSpec {
            size: self.size,
            zero_mass: self.zero_mass,
            one_mass: self.one_mass,
            alpha: self.alpha,
            beta: self.beta,
            extreme_gap: self.extreme_gap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurriculumSection {
    pub n_init: usize,
    pub n_cont: usize,
    pub p_low: f64,
    pub p_high: f64,
    pub train_batch_size: usize,
    pub generation_batch_size: usize,
    pub buffer_policy: BufferPolicy,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        let c = CurriculumConfig::default();
        Self {
            n_init: c.shape.n_init(),
            n_cont: c.shape.n_cont(),
            p_low: c.p_low,
            p_high: c.p_high,
            train_batch_size: c.train_batch_size,
            generation_batch_size: c.generation_batch_size,
            buffer_policy: c.buffer_policy,
        }
    }
}

impl CurriculumSection {
    pub fn to_config(&self) -> Result<CurriculumConfig> {
        let cfg = CurriculumConfig {
            shape: CurriculumShape::new(self.n_init, self.n_cont)?,
            p_low: self.p_low,
            p_high: self.p_high,
            train_batch_size: self.train_batch_size,
            generation_batch_size: self.generation_batch_size,
            buffer_policy: self.buffer_policy,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub total_updates: u64,
    pub eval_interval: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sim_seconds: Option<f64>,
    /// Responses per prompt for the baseline.
    pub group_size: usize,
    /// Population pass rates for time-to-target.
    pub targets: Vec<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            total_updates: t.total_updates,
            eval_interval: t.eval_interval,
            max_sim_seconds: t.max_sim_seconds,
            group_size: BaselineConfig::default().group_size,
            targets: vec![0.5, 0.7, 0.9],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub suite: Suite,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self { suite: Suite::All }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Screening size, with `n_init + n_cont` held fixed.
    NInit,
    /// Seconds per generation wave.
    Latency,
    /// Share of tasks at the near-zero pass rate.
    Population,
}

impl SweepAxis {
    fn name(self) -> &'static str {
        match self {
            Self::NInit => "n_init",
            Self::Latency => "latency",
            Self::Population => "population",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("speedlab-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub policy: PolicySection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<PopulationSection>,
    pub curriculum: CurriculumSection,
    pub train: TrainSection,
    pub latency: LatencyModel,
    pub verify: VerifySection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    pub output: OutputSection,
}

const SECTIONS: [&str; 8] = [
    "policy",
    "population",
    "curriculum",
    "train",
    "latency",
    "verify",
    "sweep",
    "output",
];

fn config_error(path: impl Into<String>, message: impl Into<String>) -> SpeedError {
    SpeedError::Config {
        path: path.into(),
        message: message.into(),
    }
}

/// Pull the key name out of serde's "missing field `x`" style messages.
fn field_in_message(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

fn section<T: DeserializeOwned>(table: &toml::Table, name: &str) -> Result<Option<T>> {
    let Some(value) = table.get(name) else {
        return Ok(None);
    };
    if !value.is_table() {
        return Err(config_error(name, "expected a table"));
    }
    value.clone().try_into::<T>().map(Some).map_err(|e| {
        let message = e.message().to_string();
        let path = match field_in_message(&message) {
            Some(field) => format!("{name}.{field}"),
            None => name.to_string(),
        };
        config_error(path, message)
    })
}

/// Map a validation error onto the section it came from.
fn in_section<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        SpeedError::InvalidParameter(message) => config_error(name, message),
        other => other,
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_error("<document>", e.message()))?;
        for key in table.keys() {
            if key != "mode" && key != "seed" && !SECTIONS.contains(&key.as_str()) {
                return Err(config_error(key.as_str(), "unknown key"));
            }
        }
        let mode = match table.get("mode") {
            None => return Err(config_error("mode", "missing required key")),
            Some(v) => v
                .clone()
                .try_into::<Mode>()
                .map_err(|e| config_error("mode", e.message()))?,
        };
        let seed = match table.get("seed") {
            None => 0,
            Some(toml::Value::Integer(i)) if *i >= 0 => *i as u64,
            Some(_) => return Err(config_error("seed", "expected a nonnegative integer")),
        };
        let cfg = Self {
            mode,
            seed,
            policy: section(&table, "policy")?.unwrap_or_default(),
            population: section(&table, "population")?,
            curriculum: section(&table, "curriculum")?.unwrap_or_default(),
            train: section(&table, "train")?.unwrap_or_default(),
            latency: section(&table, "latency")?.unwrap_or_default(),
            verify: section(&table, "verify")?.unwrap_or_default(),
            sweep: section(&table, "sweep")?,
            output: section(&table, "output")?.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_error(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let needs_population = matches!(self.mode, Mode::Baseline | Mode::Speed | Mode::Compare | Mode::Sweep);
        if needs_population && self.population.is_none() {
            return Err(config_error("population", "missing required section"));
        }
        if self.mode == Mode::Sweep && self.sweep.is_none() {
            return Err(config_error("sweep", "missing required section"));
        }
        if let Some(pop) = &self.population {
            in_section("population", pop.spec().validate())?;
            if pop.size == 0 {
                return Err(config_error("population.size", "must be at least 1"));
            }
        }
        if self.policy.responses < 2 {
            return Err(config_error("policy.responses", "must be at least 2"));
        }
        in_section("curriculum", self.curriculum.to_config())?;
        in_section("train", self.train_config().validate())?;
        if self.train.group_size < 2 {
            return Err(config_error("train.group_size", "must be at least 2"));
        }
        if self.train.targets.iter().any(|t| !(0.0 < *t && *t <= 1.0)) {
            return Err(config_error("train.targets", "targets must lie in (0, 1]"));
        }
        in_section("latency", self.latency.validate())?;
        if let Some(sweep) = &self.sweep {
            if sweep.values.len() < 2 {
                return Err(config_error("sweep.values", "a sweep needs at least two values"));
            }
            for &v in &sweep.values {
                self.sweep_cell(sweep.axis, v)?;
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            total_updates: self.train.total_updates,
            eval_interval: self.train.eval_interval,
            seed: self.seed,
            max_sim_seconds: self.train.max_sim_seconds,
        }
    }

    /// The config of one sweep cell.
    pub fn sweep_cell(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut cell = self.clone();
        cell.mode = Mode::Speed;
        cell.sweep = None;
        match axis {
            SweepAxis::NInit => {
                let total = self.curriculum.n_init + self.curriculum.n_cont;
                if value.fract() != 0.0 || value < 1.0 || value as usize >= total {
                    return Err(config_error(
                        "sweep.values",
                        format!("n_init {value} must be an integer in 1..{total}"),
                    ));
                }
                cell.curriculum.n_init = value as usize;
                cell.curriculum.n_cont = total - value as usize;
            }
            SweepAxis::Latency => {
                if !(value >= 0.0 && value.is_finite()) {
                    return Err(config_error("sweep.values", "latency values must be nonnegative"));
                }
                cell.latency.per_generation_cost = value;
            }
            SweepAxis::Population => {
                let pop = cell
                    .population
                    .as_mut()
                    .ok_or_else(|| config_error("population", "missing required section"))?;
                pop.zero_mass = value;
                in_section("sweep.values", pop.spec().validate())?;
            }
        }
        Ok(cell)
    }
}

/// Totals of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub clock: ClockReport,
    pub counters: Counters,
    pub final_population_pass_rate: Option<f64>,
    pub time_to_target: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub runs: Vec<RunSummary>,
    /// Baseline time over screened time, per target (compare mode).
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub speedup: BTreeMap<String, Option<f64>>,
}

fn target_key(t: f64) -> String {
    format!("{t}")
}

fn summarize(method: &str, trace: &[MetricsRecord], targets: &[f64]) -> RunSummary {
    RunSummary {
        method: method.to_string(),
        clock: clock_report(trace),
        counters: trace.last().map(|r| r.counters).unwrap_or_default(),
        final_population_pass_rate: trace.iter().rev().find_map(|r| r.population_pass_rate),
        time_to_target: targets
            .iter()
            .map(|&t| (target_key(t), time_to_target(trace, t)))
            .collect(),
    }
}

/// Engine over the configured population. The population is drawn from its
/// own stream so every method starts from the same tasks.
pub fn build_engine(cfg: &RunConfig) -> Result<Box<dyn InferenceEngine>> {
    let pop = cfg
        .population
        .as_ref()
        .ok_or_else(|| config_error("population", "missing required section"))?;
    let mut rng = RngStream::with_stream(cfg.seed, 1);
    Ok(match pop.kind {
        PopulationKind::Policy => {
            let (params, tasks) = make_policy_population(&pop.spec(), cfg.policy.responses, &mut rng)?;
            Box::new(PolicyEngine::new(params, tasks, cfg.latency)?)
        }
        PopulationKind::Latent => Box::new(LatentEngine::new(make_population(&pop.spec(), &mut rng)?, cfg.latency)?),
    })
}

pub fn run_baseline(cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    let mut engine = build_engine(cfg)?;
    let mut loader = EpochLoader::new(engine.task_ids())?;
    let baseline = BaselineConfig {
        batch_size: cfg.curriculum.train_batch_size,
        group_size: cfg.train.group_size,
    };
    train_baseline(
        engine.as_mut(),
        &mut loader,
        &baseline,
        &cfg.train_config(),
        &mut RngStream::new(cfg.seed),
    )
}

pub fn run_speed(cfg: &RunConfig) -> Result<Vec<MetricsRecord>> {
    let mut engine = build_engine(cfg)?;
    let mut loader = EpochLoader::new(engine.task_ids())?;
    let out = train_speed(
        engine.as_mut(),
        &mut loader,
        &cfg.curriculum.to_config()?,
        &cfg.train_config(),
        &mut RngStream::new(cfg.seed),
    )?;
    Ok(out.trace)
}

/// Speedup of `fast` over `slow` per target: `slow / fast`.
pub fn speedups(slow: &RunSummary, fast: &RunSummary) -> BTreeMap<String, Option<f64>> {
    slow.time_to_target
        .iter()
        .map(|(k, s)| {
            let f = fast.time_to_target.get(k).copied().flatten();
            let ratio = match (s, f) {
                (Some(s), Some(f)) if f > 0.0 => Some(s / f),
                _ => None,
            };
            (k.clone(), ratio)
        })
        .collect()
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub target: f64,
    pub time_to_target: Option<f64>,
    pub speedup_vs_first: Option<f64>,
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Run(Summary),
    Verify(VerifyReport),
    Sweep { summary: Summary, rows: Vec<SweepRow> },
}

impl Outcome {
    /// Process exit code implied by the outcome.
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Verify(report) => report.exit_code(),
            _ => 0,
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| SpeedError::Io(e.to_string()))?;
    text.push('\n');
    write_file(dir, name, &text)
}

/// Plot-ready series: one row per record.
pub fn series_csv(trace: &[MetricsRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| SpeedError::Io(e.to_string());
    w.write_record([
        "sim_time_s",
        "t",
        "kind",
        "population_pass_rate",
        "train_pass_rate",
        "grad_norm",
    ])
    .map_err(io)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut clock = 0.0;
    for r in trace {
        clock += r.sim_elapsed_s;
        let kind = match r.kind {
            IterationKind::Inference => "inference",
            IterationKind::Update => "update",
        };
        w.write_record([
            clock.to_string(),
            r.t.to_string(),
            kind.to_string(),
            fmt(r.population_pass_rate),
            fmt(r.train_pass_rate),
            fmt(r.grad_norm),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| SpeedError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Worker threads for sweep cells: `SPEEDLAB_THREADS` if set, otherwise the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("SPEEDLAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_sweep_cells(cells: &[RunConfig]) -> Result<Vec<Vec<MetricsRecord>>> {
    let threads = thread_budget();
    let mut traces = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(threads) {
        let results: Vec<Result<Vec<MetricsRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|cell| s.spawn(move || run_speed(cell))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sweep cell panicked"))
                .collect()
        });
        for r in results {
            traces.push(r?);
        }
    }
    Ok(traces)
}

/// Run a config and write its artifacts into `cfg.output.dir`.
pub fn execute(cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    let dir = cfg.output.dir.as_path();
    fs::create_dir_all(dir)?;
    write_file(dir, "effective_config.toml", &cfg.to_toml())?;
    let targets = &cfg.train.targets;
    let outcome = match cfg.mode {
        Mode::Baseline | Mode::Speed | Mode::Compare => {
            let mut runs = Vec::new();
            if matches!(cfg.mode, Mode::Baseline | Mode::Compare) {
                let trace = run_baseline(cfg)?;
                write_file(dir, "metrics_baseline.jsonl", &to_jsonl(&trace))?;
                runs.push(summarize("baseline", &trace, targets));
            }
            if matches!(cfg.mode, Mode::Speed | Mode::Compare) {
                let trace = run_speed(cfg)?;
                write_file(dir, "metrics_speed.jsonl", &to_jsonl(&trace))?;
                runs.push(summarize("speed", &trace, targets));
            }
            let speedup = if cfg.mode == Mode::Compare {
                speedups(&runs[0], &runs[1])
            } else {
                BTreeMap::new()
            };
            let summary = Summary {
                schema_version: METRICS_SCHEMA_VERSION,
                mode: cfg.mode,
                seed: cfg.seed,
                runs,
                speedup,
            };
            write_json(dir, "summary.json", &summary)?;
            Outcome::Run(summary)
        }
        Mode::Verify => {
            let report = run_suite(cfg.verify.suite, cfg.seed)?;
            write_json(dir, "verify_report.json", &report)?;
            Outcome::Verify(report)
        }
        Mode::Sweep => {
            let sweep = cfg.sweep.as_ref().expect("validated");
            let axis = sweep.axis.name();
            let cells = sweep
                .values
                .iter()
                .map(|&v| cfg.sweep_cell(sweep.axis, v))
                .collect::<Result<Vec<_>>>()?;
            let traces = run_sweep_cells(&cells)?;
            let mut runs = Vec::new();
            for (&v, trace) in sweep.values.iter().zip(&traces) {
                write_file(dir, &format!("series_{axis}_{v}.csv"), &series_csv(trace)?)?;
                runs.push(summarize(&format!("{axis}={v}"), trace, targets));
            }
            let mut rows = Vec::new();
            for &t in targets {
                let key = target_key(t);
                let first = runs[0].time_to_target[&key];
                for (&v, run) in sweep.values.iter().zip(&runs) {
                    let time = run.time_to_target[&key];
                    rows.push(SweepRow {
                        axis: axis.to_string(),
                        value: v,
                        target: t,
                        time_to_target: time,
                        speedup_vs_first: match (first, time) {
                            (Some(f), Some(x)) if x > 0.0 => Some(f / x),
                            _ => None,
                        },
                    });
                }
            }
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in &rows {
                w.serialize(row).map_err(|e| SpeedError::Io(e.to_string()))?;
            }
            let table = w.into_inner().map_err(|e| SpeedError::Io(e.to_string()))?;
            fs::write(dir.join("sweep_table.csv"), table)?;
            let summary = Summary {
                schema_version: METRICS_SCHEMA_VERSION,
                mode: cfg.mode,
                seed: cfg.seed,
                runs,
                speedup: BTreeMap::new(),
            };
            write_json(dir, "summary.json", &summary)?;
            Outcome::Sweep { summary, rows }
        }
    };
    Ok(outcome)
}
