//! Tick-driven serving loop for one benchmark cell.
//!
//! Every tick runs three phases in order: admission of arrived and
//! retry-eligible requests, one decode step per running request, and release
//! of finished requests. A failed allocation is one OOM event. Failed
//! admissions go back to the queue for `retry_backoff_ticks`; failed decode
//! steps stall the request for the same window while it keeps its pages.
//!
//! When every running request is stalled the loop can deadlock, so after
//! `preempt_after_ticks` ticks without a decode step the newest request is
//! evicted, and admission pauses until some decode step succeeds again so
//! the freed pages go to the stalled requests rather than to new arrivals.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::allocators::{Allocator, AllocatorConfig, AllocatorEvent, FailureOutcome, ModelSpec};
use crate::error::{AvmpError, Result};
use crate::stats::CellKey;
use crate::workloads::{Request, WorkloadSpec};

pub const SCHEMA_VERSION: &str = "1.3.0";
pub const DEFAULT_RETRY_BACKOFF_TICKS: u64 = 5;
pub const DEFAULT_HORIZON_TICKS: u64 = 1_000_000;
pub const DEFAULT_PREEMPT_AFTER_TICKS: u64 = 20;

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
pub struct CellConfig {
    pub allocator: AllocatorConfig,
    pub workload: WorkloadSpec,
    pub model: ModelSpec,
    pub budget_bytes: u64,
    /// Overrides the workload's own seed.
    pub seed: u64,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ticks: u64,
    #[serde(default = "default_horizon")]
    pub horizon_ticks: u64,
    /// Consecutive ticks without a decode step after which the newest running
    /// request is evicted and re-queued.
    #[serde(default = "default_preempt")]
    pub preempt_after_ticks: u64,
}

impl CellConfig {
    pub fn new(
        allocator: AllocatorConfig,
        workload: WorkloadSpec,
        model: ModelSpec,
        budget_bytes: u64,
        seed: u64,
    ) -> Self {
        CellConfig {
            allocator,
            workload,
            model,
            budget_bytes,
            seed,
            retry_backoff_ticks: DEFAULT_RETRY_BACKOFF_TICKS,
            horizon_ticks: DEFAULT_HORIZON_TICKS,
            preempt_after_ticks: DEFAULT_PREEMPT_AFTER_TICKS,
        }
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            workload: self.workload.label().to_string(),
            model: self.model.name.clone(),
            pool_budget: self.budget_bytes,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.allocator.validate()?;
        self.model.validate()?;
        self.workload.validate()?;
        if self.retry_backoff_ticks == 0 || self.horizon_ticks == 0 || self.preempt_after_ticks == 0 {
            return Err(AvmpError::Config(
                "retry backoff, horizon and preemption window must be positive".into(),
            ));
        }
        Ok(())
    }

    fn requests(&self) -> Result<Vec<Request>> {
        let mut workload = self.workload.clone();
        workload.seed = self.seed;
        workload.generate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Service,
    OomRetry,
    Migration,
    Idle,
}

/// Wall-clock decomposition of one cell. Idle is whatever the other three
/// buckets do not claim.
#[derive(Debug, Default)]
pub struct PhaseClock {
    service: Cell<Duration>,
    oom_retry: Cell<Duration>,
    migration: Cell<Duration>,
    open: Cell<Option<Phase>>,
}

/// Times the enclosed region into one bucket on drop.
pub struct PhaseScope<'a> {
    clock: &'a PhaseClock,
    bucket: Phase,
    started: Instant,
}

impl PhaseScope<'_> {
    /// Retargets the region before it closes, e.g. once a call turns out to have failed.
    pub fn set_bucket(&mut self, bucket: Phase) {
        self.bucket = bucket;
    }
}

impl Drop for PhaseScope<'_> {
    fn drop(&mut self) {
        self.clock.add(self.bucket, self.started.elapsed());
        self.clock.open.set(None);
    }
}

impl PhaseClock {
    pub fn new() -> Self {
        Self::default()
    }

    fn slot(&self, bucket: Phase) -> Option<&Cell<Duration>> {
        match bucket {
            Phase::Service => Some(&self.service),
            Phase::OomRetry => Some(&self.oom_retry),
            Phase::Migration => Some(&self.migration),
            Phase::Idle => None,
        }
    }

    pub fn scope(&self, bucket: Phase) -> Result<PhaseScope<'_>> {
        if bucket == Phase::Idle {
            return Err(AvmpError::Logic("idle time is the remainder and cannot be scoped".into()));
        }
        if let Some(open) = self.open.get() {
            return Err(AvmpError::Logic(format!(
                "cannot open a {bucket:?} scope inside a {open:?} scope"
            )));
        }
        self.open.set(Some(bucket));
        Ok(PhaseScope {
            clock: self,
            bucket,
            started: Instant::now(),
        })
    }

    pub fn add(&self, bucket: Phase, d: Duration) {
        if let Some(slot) = self.slot(bucket) {
            slot.set(slot.get() + d);
        }
    }

    /// Moves up to `d` from one bucket to another.
    pub fn carve(&self, from: Phase, to: Phase, d: Duration) {
        let Some(src) = self.slot(from) else { return };
        let moved = d.min(src.get());
        src.set(src.get() - moved);
        self.add(to, moved);
    }

    pub fn finish(&self, total: Duration) -> PhaseTimes {
        let service = self.service.get().as_secs_f64();
        let oom_retry = self.oom_retry.get().as_secs_f64();
        let migration = self.migration.get().as_secs_f64();
        let total = total.as_secs_f64();
        PhaseTimes {
            service_s: service,
            oom_retry_s: oom_retry,
            migration_s: migration,
            idle_s: (total - service - oom_retry - migration).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub service_s: f64,
    pub oom_retry_s: f64,
    pub migration_s: f64,
    pub idle_s: f64,
}

impl PhaseTimes {
    pub fn total(&self) -> f64 {
        self.service_s + self.oom_retry_s + self.migration_s + self.idle_s
    }

    /// Bucket shares of the total, in service / oom_retry / migration / idle order.
    pub fn fractions(&self) -> [f64; 4] {
        let total = self.total();
        if total == 0.0 {
            return [0.0, 0.0, 0.0, 1.0];
        }
        [
            self.service_s / total,
            self.oom_retry_s / total,
            self.migration_s / total,
            self.idle_s / total,
        ]
    }
}

/// Fields that are a pure function of the cell configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub oom_count: u64,
    pub rebalance_count: u64,
    pub rolled_back_rebalances: u64,
    pub migrated_bytes: u64,
    pub waste_bytes: u64,
    pub effective_batch_size_p50: u64,
    pub completed_requests: u64,
    pub preemptions: u64,
    pub ticks: u64,
    pub logical_ops: u64,
    pub horizon_reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingMetrics {
    pub wall_s: f64,
    pub goodput: f64,
    pub time_to_first_oom_s: Option<f64>,
    pub phase: PhaseTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub schema_version: String,
    pub variant: String,
    pub key: CellKey,
    pub events: EventCounts,
    pub peak_reserved_bytes: u64,
    pub timing: TimingMetrics,
    pub config: CellConfig,
}

/// Allocator event stamped with the tick and request that triggered it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub tick: u64,
    pub req_id: u64,
    pub arrival_tick: u64,
    pub event: AllocatorEvent,
}

#[derive(Debug, Clone)]
pub struct CellRun {
    pub result: CellResult,
    pub log: Vec<LoggedEvent>,
}

/// Lower median: index `floor((n - 1) / 2)` of the sorted samples.
pub fn effective_batch_p50(samples: &[u64]) -> Result<u64> {
    if samples.is_empty() {
        return Err(AvmpError::Stats("batch-size p50 of an empty sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() - 1) / 2])
}

struct Running {
    req: Request,
    steps_done: u64,
    stalled_until: u64,
}

struct Waiting {
    req: Request,
    eligible_tick: u64,
}

struct CellState {
    alloc: Allocator,
    clock: PhaseClock,
    started: Instant,
    log: Vec<LoggedEvent>,
    keep_log: bool,
    oom_count: u64,
    first_oom: Option<Duration>,
}

impl CellState {
    /// Runs one allocator call under the phase clock and drains its events.
    fn call<T>(
        &mut self,
        tick: u64,
        req: &Request,
        f: impl FnOnce(&mut Allocator) -> Result<T>,
    ) -> Result<Option<T>> {
        let outcome = {
            let mut scope = self.clock.scope(Phase::Service)?;
            let outcome = f(&mut self.alloc);
            if matches!(outcome, Err(AvmpError::Capacity(_))) {
                scope.set_bucket(Phase::OomRetry);
            }
            outcome
        };
        let migration = self.alloc.take_migration_time();
        let bucket = if outcome.is_ok() { Phase::Service } else { Phase::OomRetry };
        self.clock.carve(bucket, Phase::Migration, migration);
        if self.keep_log {
            for event in self.alloc.drain_events() {
                self.log.push(LoggedEvent {
                    tick,
                    req_id: req.req_id,
                    arrival_tick: req.arrival_tick,
                    event,
                });
            }
        } else {
            self.alloc.drain_events();
        }
        match outcome {
            Ok(v) => Ok(Some(v)),
            Err(AvmpError::Capacity(_)) => {
                self.oom_count += 1;
                self.first_oom.get_or_insert_with(|| self.started.elapsed());
                Ok(None)
            }
            Err(other) => Err(other),
        }
    }
}

pub fn run_cell(cfg: &CellConfig) -> Result<CellResult> {
    simulate(cfg, false).map(|run| run.result)
}

/// Runs a cell and keeps the full allocator event log for audits.
pub fn run_cell_logged(cfg: &CellConfig) -> Result<CellRun> {
    simulate(cfg, true)
}

// Overloaded cells raise millions of capacity errors, so the log is opt-in.
fn simulate(cfg: &CellConfig, keep_log: bool) -> Result<CellRun> {
    cfg.validate()?;
    let requests = cfg.requests()?;
    let alloc = Allocator::new(cfg.allocator.clone(), cfg.budget_bytes, cfg.model.clone())?;
    let (kv_reserved, ssm_reserved) = alloc.reserved_bytes();
    let mut cell = CellState {
        alloc,
        clock: PhaseClock::new(),
        started: Instant::now(),
        log: Vec::new(),
        keep_log,
        oom_count: 0,
        first_oom: None,
    };

    let backoff = cfg.retry_backoff_ticks;
    let mut next_arrival = 0usize;
    let mut waiting: Vec<Waiting> = Vec::new();
    // keyed by admission order so eviction can pick the newest
    let mut running: BTreeMap<u64, Running> = BTreeMap::new();
    let mut admissions = 0u64;
    let mut batch_samples = Vec::new();
    let mut completed = 0u64;
    let mut preemptions = 0u64;
    let mut idle_streak = 0u64;
    // set by an eviction, cleared by the next successful decode step
    let mut admission_hold = false;
    let mut tick = requests.first().map_or(0, |r| r.arrival_tick);
    let mut ticks = 0u64;
    let mut horizon_reached = false;

    loop {
        while next_arrival < requests.len() && requests[next_arrival].arrival_tick <= tick {
            let req = requests[next_arrival];
            waiting.push(Waiting { req, eligible_tick: req.arrival_tick });
            next_arrival += 1;
        }
        if waiting.is_empty() && running.is_empty() {
            match requests.get(next_arrival) {
                Some(r) => {
                    tick = r.arrival_tick;
                    continue;
                }
                None => break,
            }
        }
        if ticks == cfg.horizon_ticks {
            horizon_reached = true;
            break;
        }
        ticks += 1;
        let mut progressed = false;

        // admission, oldest request first
        let mut still_waiting = Vec::with_capacity(waiting.len());
        for mut w in std::mem::take(&mut waiting) {
            if admission_hold || w.eligible_tick > tick {
                still_waiting.push(w);
                continue;
            }
            let req = w.req;
            if cell.call(tick, &req, |a| a.admit(req.req_id, req.prompt_tokens))?.is_some() {
                running.insert(
                    admissions,
                    Running { req, steps_done: 0, stalled_until: tick },
                );
                admissions += 1;
            } else {
                w.eligible_tick = tick + backoff;
                still_waiting.push(w);
            }
        }
        waiting = still_waiting;
        batch_samples.push(running.len() as u64);

        // one decode step per running request
        let mut finished = Vec::new();
        for (&order, r) in running.iter_mut() {
            if r.stalled_until > tick {
                continue;
            }
            let total = r.req.prompt_tokens + r.steps_done + 1;
            let req = r.req;
            if cell.call(tick, &req, |a| a.extend_decode(req.req_id, total))?.is_some() {
                r.steps_done += 1;
                progressed = true;
                admission_hold = false;
                if r.steps_done == r.req.gen_tokens {
                    finished.push(order);
                }
            } else {
                r.stalled_until = tick + backoff;
            }
        }

        for order in finished {
            let r = running.remove(&order).expect("finished request is running");
            cell.call(tick, &r.req, |a| a.release(r.req.req_id))?;
            completed += 1;
        }

        if progressed || running.is_empty() {
            idle_streak = 0;
        } else {
            idle_streak += 1;
            if idle_streak >= cfg.preempt_after_ticks {
                let (_, victim) = running.pop_last().expect("running set is nonempty");
                cell.call(tick, &victim.req, |a| a.release(victim.req.req_id))?;
                waiting.push(Waiting { req: victim.req, eligible_tick: tick + backoff });
                waiting.sort_by_key(|w| w.req.req_id);
                preemptions += 1;
                admission_hold = true;
                idle_streak = 0;
            }
        }
        tick += 1;
    }

    // drain whatever the horizon cut off
    for r in running.values() {
        cell.call(tick, &r.req, |a| a.release(r.req.req_id))?;
    }
    let wall = cell.started.elapsed();
    let phase = cell.clock.finish(wall);

    let alloc = &cell.alloc;
    if alloc.kv_store().live_count() != 0 || alloc.ssm_store().live_count() != 0 {
        return Err(AvmpError::Logic("pages still live after the cell drained".into()));
    }
    let effective: Vec<_> = alloc.rebalance_events().iter().filter(|e| !e.rolled_back).collect();
    let events = EventCounts {
        oom_count: cell.oom_count,
        rebalance_count: effective.len() as u64,
        rolled_back_rebalances: (alloc.rebalance_events().len() - effective.len()) as u64,
        migrated_bytes: effective.iter().map(|e| e.bytes_migrated).sum(),
        waste_bytes: effective.iter().map(|e| e.waste_bytes).sum(),
        effective_batch_size_p50: if batch_samples.is_empty() {
            0
        } else {
            effective_batch_p50(&batch_samples)?
        },
        completed_requests: completed,
        preemptions,
        ticks,
        logical_ops: alloc.throttle().op_counter,
        horizon_reached,
    };
    let wall_s = wall.as_secs_f64();
    let result = CellResult {
        schema_version: SCHEMA_VERSION.to_string(),
        variant: cfg.allocator.name.clone(),
        key: cfg.key(),
        events,
        peak_reserved_bytes: kv_reserved + ssm_reserved,
        timing: TimingMetrics {
            wall_s,
            goodput: if wall_s > 0.0 { completed as f64 / wall_s } else { 0.0 },
            time_to_first_oom_s: cell.first_oom.map(|d| d.as_secs_f64()),
            phase,
        },
        config: cfg.clone(),
    };
    Ok(CellRun { result, log: cell.log })
}

/// Propagated capacity errors in a log; equals the cell's OOM count.
pub fn propagated_failures(log: &[LoggedEvent]) -> u64 {
    log.iter()
        .filter(|e| {
            matches!(
                e.event,
                AllocatorEvent::FailureHandled { outcome: FailureOutcome::Propagated, .. }
            )
        })
        .count() as u64
}
