//! Sweep configuration, grid expansion and parallel cell execution.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocators::{AllocatorConfig, ModelSpec, VariantKind};
use crate::error::{AvmpError, Result};
use crate::rebalancer::RebalanceConfig;
use crate::simulator::{
    run_cell, run_cell_logged, CellConfig, CellRun, CellResult, LoggedEvent, DEFAULT_HORIZON_TICKS,
    DEFAULT_PREEMPT_AFTER_TICKS, DEFAULT_RETRY_BACKOFF_TICKS, SCHEMA_VERSION,
};
use crate::workloads::{WorkloadShape, WorkloadSpec};

/// Builds an allocator configuration from a preset name.
///
/// Recognised names: `padded_unified`, `fixed_dual_mrXX`, `avmp_static_mrXX`
/// and `avmp_dynamic_b<N>` with optional `_mrXX`, `_th_low_XXX`,
/// `_th_high_XXX` and `_interval_<N>` suffixes. `mr05` means ratio 0.5 and
/// `mr075` means 0.75;
/// threshold digits are hundredths (`010` is 0.10).
pub fn preset(name: &str) -> Result<AllocatorConfig> {
    let bad = || AvmpError::Config(format!("unknown variant preset `{name}`"));
    let ratio = |digits: &str| -> Result<f64> {
        match digits.strip_prefix('0') {
            Some(frac) if !frac.is_empty() && frac.bytes().all(|b| b.is_ascii_digit()) => {
                format!("0.{frac}").parse().map_err(|_| bad())
            }
            _ => Err(bad()),
        }
    };
    let config = if name == "padded_unified" {
        AllocatorConfig::new(name, VariantKind::PaddedUnified, 0.5)
    } else if let Some(rest) = name.strip_prefix("fixed_dual_mr") {
        AllocatorConfig::new(name, VariantKind::FixedDual, ratio(rest)?)
    } else if let Some(rest) = name.strip_prefix("avmp_static_mr") {
        AllocatorConfig::new(name, VariantKind::AvmpStatic, ratio(rest)?)
    } else if let Some(rest) = name.strip_prefix("avmp_dynamic_b") {
        let mut parts = rest.split('_');
        let batch: u32 = parts.next().and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        let mut mr = 0.5;
        let mut rebalance = RebalanceConfig {
            migration_batch_size: batch,
            ..RebalanceConfig::default()
        };
        let hundredths = |v: Option<&str>| -> Result<f64> {
            let v = v.ok_or_else(bad)?;
            let n: u32 = v.parse().map_err(|_| bad())?;
            Ok(n as f64 / 100.0)
        };
        while let Some(part) = parts.next() {
            match part {
                p if p.starts_with("mr") => mr = ratio(&p[2..])?,
                "th" => match parts.next() {
                    Some("low") => rebalance.threshold_low = hundredths(parts.next())?,
                    Some("high") => rebalance.threshold_high = hundredths(parts.next())?,
                    _ => return Err(bad()),
                },
                "interval" => {
                    rebalance.min_rebalance_interval_ops =
                        parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                }
                _ => return Err(bad()),
            }
        }
        AllocatorConfig::new(name, VariantKind::AvmpDynamic, mr).with_rebalance(rebalance)
    } else {
        return Err(bad());
    };
    config.validate()?;
    Ok(config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VariantEntry {
    Preset(String),
    Custom(AllocatorConfig),
}

impl VariantEntry {
    pub fn resolve(&self) -> Result<AllocatorConfig> {
        match self {
            VariantEntry::Preset(name) => preset(name),
            VariantEntry::Custom(config) => {
                config.validate()?;
                Ok(config.clone())
            }
        }
    }
}

/// Byte count written either as an integer or with a binary suffix ("64MiB").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ByteSizeRepr", into = "u64")]
pub struct ByteSize(pub u64);

#[derive(Deserialize)]
#[serde(untagged)]
enum ByteSizeRepr {
    Int(u64),
    Text(String),
}

impl TryFrom<ByteSizeRepr> for ByteSize {
    type Error = String;

    fn try_from(repr: ByteSizeRepr) -> std::result::Result<Self, String> {
        match repr {
            ByteSizeRepr::Int(n) => Ok(ByteSize(n)),
            ByteSizeRepr::Text(s) => parse_bytes(&s).map(ByteSize),
        }
    }
}

impl From<ByteSize> for u64 {
    fn from(b: ByteSize) -> u64 {
        b.0
    }
}

pub fn parse_bytes(text: &str) -> std::result::Result<u64, String> {
    let t = text.trim();
    let split = t.find(|c: char| !c.is_ascii_digit()).unwrap_or(t.len());
    let (digits, unit) = t.split_at(split);
    let n: u64 = digits.parse().map_err(|_| format!("bad byte size `{text}`"))?;
    let scale = match unit.trim() {
        "" | "B" => 1,
        "KiB" => 1 << 10,
        "MiB" => 1 << 20,
        "GiB" => 1 << 30,
        _ => return Err(format!("unknown byte unit in `{text}`")),
    };
    n.checked_mul(scale).ok_or_else(|| format!("byte size `{text}` overflows"))
}

fn default_parallelism() -> usize {
    1
}

fn default_backoff() -> u64 {
    DEFAULT_RETRY_BACKOFF_TICKS
}

fn default_horizon() -> u64 {
    DEFAULT_HORIZON_TICKS
}

fn default_preempt() -> u64 {
    DEFAULT_PREEMPT_AFTER_TICKS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variants: Vec<VariantEntry>,
    pub workloads: Vec<WorkloadSpec>,
    /// Model names, looked up in `model_specs`.
    pub models: Vec<String>,
    /// Extra model definitions read from another file, relative to this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<PathBuf>,
    #[serde(default)]
    pub model_specs: Vec<ModelSpec>,
    pub budgets: Vec<ByteSize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub output_dir: PathBuf,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ticks: u64,
    #[serde(default = "default_horizon")]
    pub horizon_ticks: u64,
    #[serde(default = "default_preempt")]
    pub preempt_after_ticks: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    models: Vec<ModelSpec>,
}

pub fn load_model_file(path: &Path) -> Result<Vec<ModelSpec>> {
    let text = fs::read_to_string(path).map_err(|e| AvmpError::io(path, e))?;
    let file: ModelFile = toml::from_str(&text)
        .map_err(|e| AvmpError::Config(format!("{}: {e}", path.display())))?;
    Ok(file.models)
}

impl SweepConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| AvmpError::Config(e.to_string()))
    }

    /// Loads a config file, pulling in its model file and anchoring relative
    /// paths at the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AvmpError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| AvmpError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(model_file) = cfg.model_file.take() {
            let mut models = load_model_file(&base.join(model_file))?;
            models.append(&mut cfg.model_specs);
            cfg.model_specs = models;
        }
        for w in &mut cfg.workloads {
            if let WorkloadShape::SharegptReplay(p) = &mut w.shape {
                if p.trace_path.is_relative() && !p.trace_path.as_os_str().is_empty() {
                    p.trace_path = base.join(&p.trace_path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Points every trace-replay workload at `path`.
    pub fn set_trace_path(&mut self, path: &Path) {
        for w in &mut self.workloads {
            if let WorkloadShape::SharegptReplay(p) = &mut w.shape {
                p.trace_path = path.to_path_buf();
            }
        }
    }

    fn model(&self, name: &str) -> Result<&ModelSpec> {
        self.model_specs
            .iter()
            .rev()
            .find(|m| m.name == name)
            .ok_or_else(|| AvmpError::Config(format!("model `{name}` is not defined")))
    }

    pub fn resolved_variants(&self) -> Result<Vec<AllocatorConfig>> {
        self.variants.iter().map(VariantEntry::resolve).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let axes = [
            ("variants", self.variants.len()),
            ("workloads", self.workloads.len()),
            ("models", self.models.len()),
            ("budgets", self.budgets.len()),
            ("seeds", self.seeds.len()),
        ];
        if let Some((axis, _)) = axes.iter().find(|(_, n)| *n == 0) {
            return Err(AvmpError::Config(format!("sweep axis `{axis}` is empty")));
        }
        if self.parallelism == 0 {
            return Err(AvmpError::Config("parallelism must be at least 1".into()));
        }
        self.resolved_variants()?;
        for name in &self.models {
            self.model(name)?.validate()?;
        }
        for w in &self.workloads {
            w.validate()?;
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        self.variants.len() * self.workloads.len() * self.models.len() * self.budgets.len() * self.seeds.len()
    }
}

/// Cross product in variant, workload, model, budget, seed order.
pub fn expand_grid(cfg: &SweepConfig) -> Result<Vec<CellConfig>> {
    cfg.validate()?;
    let variants = cfg.resolved_variants()?;
    let models = cfg
        .models
        .iter()
        .map(|name| cfg.model(name).cloned())
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(cfg.grid_size());
    for variant in &variants {
        for workload in &cfg.workloads {
            for model in &models {
                for budget in &cfg.budgets {
                    for &seed in &cfg.seeds {
                        let mut cell = CellConfig::new(
                            variant.clone(),
                            workload.clone(),
                            model.clone(),
                            budget.0,
                            seed,
                        );
                        cell.workload.seed = seed;
                        cell.retry_backoff_ticks = cfg.retry_backoff_ticks;
                        cell.horizon_ticks = cfg.horizon_ticks;
                        cell.preempt_after_ticks = cfg.preempt_after_ticks;
                        cells.push(cell);
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Event log line tying an allocator event back to its cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRecord {
    pub schema_version: String,
    pub cell_index: usize,
    pub variant: String,
    pub key: crate::stats::CellKey,
    #[serde(flatten)]
    pub event: LoggedEvent,
}

pub struct SweepOutput {
    pub results: Vec<CellResult>,
    pub results_path: PathBuf,
    pub events_path: Option<PathBuf>,
}

fn cell_failure(cell: &CellConfig, reason: String) -> AvmpError {
    AvmpError::CellFailed {
        config: serde_json::to_string(cell).unwrap_or_else(|_| format!("{cell:?}")),
        reason,
    }
}

fn run_guarded(cell: &CellConfig, keep_log: bool) -> Result<CellRun> {
    let run = || {
        if keep_log {
            run_cell_logged(cell)
        } else {
            run_cell(cell).map(|result| CellRun { result, log: Vec::new() })
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(run)) {
        Ok(Ok(run)) => Ok(run),
        Ok(Err(e)) => Err(cell_failure(cell, e.to_string())),
        Err(payload) => {
            let reason = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            Err(cell_failure(cell, format!("panicked: {reason}")))
        }
    }
}

fn write_line<T: Serialize>(out: &mut impl Write, path: &Path, record: &T) -> Result<()> {
    let mut line = serde_json::to_vec(record).map_err(|e| AvmpError::Parse(e.to_string()))?;
    line.push(b'\n');
    out.write_all(&line)
        .and_then(|_| out.flush())
        .map_err(|e| AvmpError::io(path, e))
}

/// Runs every cell and appends one JSON line per cell in grid order.
///
/// Cells run in chunks on a worker pool; each chunk is written in order
/// before the next starts, so an interrupted sweep leaves a valid prefix.
pub fn run_cells(
    cells: &[CellConfig],
    parallelism: usize,
    results_path: &Path,
    events_path: Option<&Path>,
) -> Result<Vec<CellResult>> {
    if let Some(dir) = results_path.parent() {
        fs::create_dir_all(dir).map_err(|e| AvmpError::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| AvmpError::Config(format!("worker pool: {e}")))?;
    let mut results_out = BufWriter::new(
        File::create(results_path).map_err(|e| AvmpError::io(results_path, e))?,
    );
    let mut events_out = match events_path {
        Some(p) => Some((BufWriter::new(File::create(p).map_err(|e| AvmpError::io(p, e))?), p)),
        None => None,
    };
    let keep_log = events_out.is_some();
    let chunk = parallelism.max(1) * 4;
    let mut results = Vec::with_capacity(cells.len());
    for (chunk_index, batch) in cells.chunks(chunk).enumerate() {
        let runs: Vec<Result<_>> = pool.install(|| batch.par_iter().map(|c| run_guarded(c, keep_log)).collect());
        for (offset, run) in runs.into_iter().enumerate() {
            let run = run?;
            let cell_index = chunk_index * chunk + offset;
            write_line(&mut results_out, results_path, &run.result)?;
            if let Some((out, path)) = events_out.as_mut() {
                for event in run.log {
                    let record = EventRecord {
                        schema_version: SCHEMA_VERSION.to_string(),
                        cell_index,
                        variant: run.result.variant.clone(),
                        key: run.result.key.clone(),
                        event,
                    };
                    write_line(out, path, &record)?;
                }
            }
            results.push(run.result);
        }
    }
    Ok(results)
}

/// Expands and runs a sweep into `output_dir/results.jsonl`.
pub fn run_sweep(cfg: &SweepConfig, emit_events: bool) -> Result<SweepOutput> {
    let cells = expand_grid(cfg)?;
    let results_path = cfg.output_dir.join("results.jsonl");
    let events_path = emit_events.then(|| cfg.output_dir.join("events.jsonl"));
    let results = run_cells(&cells, cfg.parallelism, &results_path, events_path.as_deref())?;
    Ok(SweepOutput {
        results,
        results_path,
        events_path,
    })
}

/// Reads result records, rejecting any line with a different schema version.
pub fn read_results(path: &Path) -> Result<Vec<CellResult>> {
    let file = File::open(path).map_err(|e| AvmpError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AvmpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| AvmpError::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .unwrap_or("<missing>");
        if found != SCHEMA_VERSION {
            return Err(AvmpError::Schema {
                expected: SCHEMA_VERSION.to_string(),
                found: found.to_string(),
            });
        }
        out.push(
            serde_json::from_value(value)
                .map_err(|e| AvmpError::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}
