//! Seeded request streams and conversation-trace ingestion.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use rand::RngExt;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AvmpError, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub req_id: u64,
    pub arrival_tick: u64,
    pub prompt_tokens: u64,
    pub gen_tokens: u64,
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: u64,
    pub max: u64,
}

impl Span {
    pub const fn new(min: u64, max: u64) -> Self {
        Span { min, max }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(AvmpError::Config(format!(
                "{what} range [{}, {}] must be non-empty and start at 1 or above",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut rng::StreamRng) -> u64 {
        rng.random_range(self.min..=self.max)
    }

    pub fn contains(&self, x: u64) -> bool {
        (self.min..=self.max).contains(&x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    UniformShort,
    MixedLong,
    AgenticBurst,
    SharegptReplay,
}

impl WorkloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            WorkloadKind::UniformShort => "uniform_short",
            WorkloadKind::MixedLong => "mixed_long",
            WorkloadKind::AgenticBurst => "agentic_burst",
            WorkloadKind::SharegptReplay => "sharegpt_replay",
        }
    }
}

impl fmt::Display for WorkloadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniformShortParams {
    pub prompt: Span,
    pub gen: Span,
    pub arrivals_per_tick: u64,
}

impl Default for UniformShortParams {
    fn default() -> Self {
        UniformShortParams {
            prompt: Span::new(128, 1024),
            gen: Span::new(32, 128),
            arrivals_per_tick: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedLongParams {
    pub long_fraction: f64,
    pub long_prompt: Span,
    pub short_prompt: Span,
    pub gen: Span,
    /// Requests per wave.
    pub wave_size: u64,
    /// Arrivals per tick while a wave is in flight.
    pub wave_rate: u64,
    /// Quiet ticks between the last arrival of a wave and the next wave.
    pub wave_gap_ticks: u64,
}

impl Default for MixedLongParams {
    fn default() -> Self {
        MixedLongParams {
            long_fraction: 0.7,
            long_prompt: Span::new(2048, 8192),
            short_prompt: Span::new(128, 512),
            gen: Span::new(32, 128),
            wave_size: 64,
            wave_rate: 8,
            wave_gap_ticks: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgenticBurstParams {
    pub short_fraction: f64,
    pub short_prompt: Span,
    pub long_prompt: Span,
    pub gen: Span,
    /// Requests landing in a single burst tick.
    pub burst_size: Span,
    /// Ticks between consecutive bursts.
    pub burst_gap_ticks: Span,
    /// One background arrival every this many ticks between bursts.
    pub quiet_interval_ticks: u64,
}

impl Default for AgenticBurstParams {
    fn default() -> Self {
        AgenticBurstParams {
            short_fraction: 0.7,
            short_prompt: Span::new(64, 256),
            long_prompt: Span::new(1024, 4096),
            gen: Span::new(32, 128),
            burst_size: Span::new(64, 160),
            burst_gap_ticks: Span::new(20, 60),
            quiet_interval_ticks: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharegptParams {
    pub trace_path: PathBuf,
    pub gen_log_mean: f64,
    pub gen_log_sigma: f64,
    pub gen: Span,
    pub arrivals_per_tick: u64,
}

impl Default for SharegptParams {
    fn default() -> Self {
        SharegptParams {
            trace_path: PathBuf::new(),
            gen_log_mean: 4.5,
            gen_log_sigma: 1.0,
            gen: Span::new(32, 2048),
            arrivals_per_tick: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadShape {
    UniformShort(UniformShortParams),
    MixedLong(MixedLongParams),
    AgenticBurst(AgenticBurstParams),
    SharegptReplay(SharegptParams),
}

impl WorkloadShape {
    pub fn kind(&self) -> WorkloadKind {
        match self {
            WorkloadShape::UniformShort(_) => WorkloadKind::UniformShort,
            WorkloadShape::MixedLong(_) => WorkloadKind::MixedLong,
            WorkloadShape::AgenticBurst(_) => WorkloadKind::AgenticBurst,
            WorkloadShape::SharegptReplay(_) => WorkloadKind::SharegptReplay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    /// Name used in cell keys and reports; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub n_requests: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub shape: WorkloadShape,
}

impl WorkloadSpec {
    pub fn new(shape: WorkloadShape, n_requests: u64, seed: u64) -> Self {
        WorkloadSpec { label: None, n_requests, seed, shape }
    }

    pub fn kind(&self) -> WorkloadKind {
        self.shape.kind()
    }

    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(self.kind().as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_requests == 0 {
            return Err(AvmpError::Config("workload needs at least one request".into()));
        }
        let fraction = |x: f64, what: &str| {
            if (0.0..=1.0).contains(&x) {
                Ok(())
            } else {
                Err(AvmpError::Config(format!("{what} {x} outside [0, 1]")))
            }
        };
        let positive = |x: u64, what: &str| {
            if x > 0 {
                Ok(())
            } else {
                Err(AvmpError::Config(format!("{what} must be positive")))
            }
        };
        match &self.shape {
            WorkloadShape::UniformShort(p) => {
                p.prompt.validate("prompt")?;
                p.gen.validate("gen")?;
                positive(p.arrivals_per_tick, "arrivals_per_tick")
            }
            WorkloadShape::MixedLong(p) => {
                fraction(p.long_fraction, "long_fraction")?;
                p.long_prompt.validate("long_prompt")?;
                p.short_prompt.validate("short_prompt")?;
                p.gen.validate("gen")?;
                positive(p.wave_size, "wave_size")?;
                positive(p.wave_rate, "wave_rate")
            }
            WorkloadShape::AgenticBurst(p) => {
                fraction(p.short_fraction, "short_fraction")?;
                p.short_prompt.validate("short_prompt")?;
                p.long_prompt.validate("long_prompt")?;
                p.gen.validate("gen")?;
                p.burst_size.validate("burst_size")?;
                p.burst_gap_ticks.validate("burst_gap_ticks")?;
                positive(p.quiet_interval_ticks, "quiet_interval_ticks")
            }
            WorkloadShape::SharegptReplay(p) => {
                p.gen.validate("gen")?;
                positive(p.arrivals_per_tick, "arrivals_per_tick")?;
                // Written negated so NaN is rejected too.
                #[allow(clippy::neg_cmp_op_on_partial_ord)]
                if !(p.gen_log_sigma >= 0.0) {
                    return Err(AvmpError::Config("gen_log_sigma must be non-negative".into()));
                }
                Ok(())
            }
        }
    }

    /// Builds the request stream. Trace replays read their corpus from disk.
    pub fn generate(&self) -> Result<Vec<Request>> {
        self.validate()?;
        match &self.shape {
            WorkloadShape::UniformShort(p) => Ok(gen_uniform_short(self.n_requests, self.seed, p)),
            WorkloadShape::MixedLong(p) => Ok(gen_mixed_long(self.n_requests, self.seed, p)),
            WorkloadShape::AgenticBurst(p) => Ok(gen_agentic_burst(self.n_requests, self.seed, p)),
            WorkloadShape::SharegptReplay(p) => {
                let trace = cached_trace(&p.trace_path)?;
                gen_sharegpt_replay(&trace.prompt_tokens, self.n_requests, self.seed, p)
            }
        }
    }
}

fn staggered(index: u64, per_tick: u64) -> u64 {
    index / per_tick
}

pub fn gen_uniform_short(n: u64, seed: u64, p: &UniformShortParams) -> Vec<Request> {
    let mut rng = rng::stream(seed, "workload/uniform_short");
    (0..n)
        .map(|i| Request {
            req_id: i,
            arrival_tick: staggered(i, p.arrivals_per_tick),
            prompt_tokens: p.prompt.draw(&mut rng),
            gen_tokens: p.gen.draw(&mut rng),
        })
        .collect()
}

pub fn gen_mixed_long(n: u64, seed: u64, p: &MixedLongParams) -> Vec<Request> {
    let mut rng = rng::stream(seed, "workload/mixed_long");
    let wave_ticks = p.wave_size.div_ceil(p.wave_rate);
    (0..n)
        .map(|i| {
            let wave = i / p.wave_size;
            let within = i % p.wave_size;
            let arrival_tick = wave * (wave_ticks + p.wave_gap_ticks) + within / p.wave_rate;
            let long = rng.random_bool(p.long_fraction);
            let prompt_tokens = if long {
                p.long_prompt.draw(&mut rng)
            } else {
                p.short_prompt.draw(&mut rng)
            };
            Request {
                req_id: i,
                arrival_tick,
                prompt_tokens,
                gen_tokens: p.gen.draw(&mut rng),
            }
        })
        .collect()
}

pub fn gen_agentic_burst(n: u64, seed: u64, p: &AgenticBurstParams) -> Vec<Request> {
    let mut rng = rng::stream(seed, "workload/agentic_burst");
    let mut arrivals = Vec::with_capacity(n as usize);
    let mut tick = 0u64;
    while (arrivals.len() as u64) < n {
        let gap = p.burst_gap_ticks.draw(&mut rng);
        let mut quiet = p.quiet_interval_ticks;
        while quiet < gap && (arrivals.len() as u64) < n {
            arrivals.push(tick + quiet);
            quiet += p.quiet_interval_ticks;
        }
        tick += gap;
        let burst = p.burst_size.draw(&mut rng);
        for _ in 0..burst {
            if arrivals.len() as u64 == n {
                break;
            }
            arrivals.push(tick);
        }
    }
    arrivals
        .into_iter()
        .enumerate()
        .map(|(i, arrival_tick)| {
            let short = rng.random_bool(p.short_fraction);
            let prompt_tokens = if short {
                p.short_prompt.draw(&mut rng)
            } else {
                p.long_prompt.draw(&mut rng)
            };
            Request {
                req_id: i as u64,
                arrival_tick,
                prompt_tokens,
                gen_tokens: p.gen.draw(&mut rng),
            }
        })
        .collect()
}

pub fn gen_sharegpt_replay(
    counts: &[u64],
    n: u64,
    seed: u64,
    p: &SharegptParams,
) -> Result<Vec<Request>> {
    if counts.is_empty() {
        return Err(AvmpError::InvalidArgument("trace replay needs at least one prompt".into()));
    }
    let lognormal = LogNormal::new(p.gen_log_mean, p.gen_log_sigma)
        .map_err(|e| AvmpError::Config(format!("generation length distribution: {e}")))?;
    let mut rng = rng::stream(seed, "workload/sharegpt_replay");
    Ok((0..n)
        .map(|i| {
            let prompt_tokens = counts[rng.random_range(0..counts.len())];
            let gen = lognormal.sample(&mut rng).round();
            Request {
                req_id: i,
                arrival_tick: staggered(i, p.arrivals_per_tick),
                prompt_tokens,
                gen_tokens: (gen as u64).clamp(p.gen.min, p.gen.max),
            }
        })
        .collect())
}

/// Conversations contributing a prompt.
pub const TRACE_PROMPT_LIMIT: usize = 5000;
pub const TRACE_MIN_TOKENS: u64 = 16;
pub const TRACE_MAX_TOKENS: u64 = 4096;
const TOKENS_PER_WORD: f64 = 1.3;

/// Token estimate for one prompt: `round(1.3 * words)` clamped to the trace bounds.
pub fn prompt_tokens_from_text(text: &str) -> u64 {
    raw_prompt_tokens(text).clamp(TRACE_MIN_TOKENS, TRACE_MAX_TOKENS)
}

fn raw_prompt_tokens(text: &str) -> u64 {
    let words = text.split_whitespace().count();
    (TOKENS_PER_WORD * words as f64).round() as u64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceIngest {
    pub prompt_tokens: Vec<u64>,
    pub conversations_seen: usize,
    pub skipped: usize,
    pub floor_clamped: usize,
    pub ceiling_clamped: usize,
}

impl TraceIngest {
    pub fn floor_rate(&self) -> f64 {
        self.floor_clamped as f64 / self.prompt_tokens.len() as f64
    }

    pub fn median(&self) -> u64 {
        crate::stats::nearest_rank(&self.prompt_tokens, 50.0)
    }

    pub fn p95(&self) -> u64 {
        crate::stats::nearest_rank(&self.prompt_tokens, 95.0)
    }
}

fn first_human_turn(conversation: &serde_json::Value) -> Option<&str> {
    let turns = ["conversations", "conversation", "turns", "messages"]
        .iter()
        .find_map(|key| conversation.get(key))
        .and_then(|v| v.as_array())?;
    turns.iter().find_map(|turn| {
        let role = turn
            .get("from")
            .or_else(|| turn.get("role"))
            .and_then(|r| r.as_str())?;
        if !matches!(role, "human" | "user") {
            return None;
        }
        turn.get("value")
            .or_else(|| turn.get("content"))
            .or_else(|| turn.get("text"))
            .and_then(|t| t.as_str())
    })
}

/// Parses an in-memory conversation corpus (a JSON array of conversations).
pub fn ingest_sharegpt(text: &str) -> Result<TraceIngest> {
    let corpus: serde_json::Value = serde_json::from_str(text).map_err(|e| AvmpError::Ingestion {
        reason: format!("not a JSON conversation corpus: {e}"),
        skipped: 0,
    })?;
    let conversations = corpus.as_array().ok_or_else(|| AvmpError::Ingestion {
        reason: "corpus root must be an array of conversations".into(),
        skipped: 0,
    })?;
    let mut ingest = TraceIngest {
        prompt_tokens: Vec::new(),
        conversations_seen: 0,
        skipped: 0,
        floor_clamped: 0,
        ceiling_clamped: 0,
    };
    for conversation in conversations {
        if ingest.prompt_tokens.len() == TRACE_PROMPT_LIMIT {
            break;
        }
        ingest.conversations_seen += 1;
        let Some(prompt) = first_human_turn(conversation) else {
            ingest.skipped += 1;
            continue;
        };
        let raw = raw_prompt_tokens(prompt);
        if raw < TRACE_MIN_TOKENS {
            ingest.floor_clamped += 1;
        } else if raw > TRACE_MAX_TOKENS {
            ingest.ceiling_clamped += 1;
        }
        ingest
            .prompt_tokens
            .push(raw.clamp(TRACE_MIN_TOKENS, TRACE_MAX_TOKENS));
    }
    if ingest.prompt_tokens.is_empty() {
        return Err(AvmpError::Ingestion {
            reason: "no human turns found".into(),
            skipped: ingest.skipped,
        });
    }
    Ok(ingest)
}

pub fn load_sharegpt(path: &Path) -> Result<TraceIngest> {
    let text = std::fs::read_to_string(path).map_err(|e| AvmpError::io(path, e))?;
    ingest_sharegpt(&text)
}

/// Every replay cell of a sweep reads the same corpus; parse it once per process.
fn cached_trace(path: &Path) -> Result<Arc<TraceIngest>> {
    static CACHE: OnceLock<Mutex<HashMap<PathBuf, Arc<TraceIngest>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().expect("trace cache poisoned").get(path) {
        return Ok(Arc::clone(hit));
    }
    let trace = Arc::new(load_sharegpt(path)?);
    cache
        .lock()
        .expect("trace cache poisoned")
        .insert(path.to_path_buf(), Arc::clone(&trace));
    Ok(trace)
}
