//! The evaluated allocator variants behind one interface.
//!
//! * `PaddedUnified` keeps a single pool of KV-page granularity and pads
//!   every per-layer SSM state up to whole KV pages.
//! * `FixedDual` splits the budget into a KV pool and an SSM pool by
//!   `mamba_full_memory_ratio` (the SSM share) and addresses pages directly.
//! * `AvmpStatic` uses the same split, but every page is reached through the
//!   virtual page table and both stores reserve the full budget.
//! * `AvmpDynamic` adds capacity migration on allocation failure.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backing_stores::{BackingStore, PoolGeometry};
use crate::error::{AvmpError, CapacityError, Result};
use crate::handle_space::{
    decode_handle, encode_handle, page_stride, PhysicalLocation, PoolId, VirtualHandle,
    VirtualPageTable, SLAB_ALIGN,
};
use crate::rebalancer::{
    self, on_capacity_error, GateDecision, PressureMachine, PressureState, RebalanceConfig,
    RebalanceEvent, ThrottleState,
};

fn default_page_tokens() -> u32 {
    16
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub attention_layers: u32,
    pub ssm_layers: u32,
    /// KV bytes per token summed over all attention layers.
    pub per_token_bytes: u64,
    /// One layer's recurrent state (`state_dim * bytes_per_element`).
    pub ssm_block_bytes: u64,
    #[serde(default = "default_page_tokens")]
    pub attention_page_tokens: u32,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.attention_layers == 0 || self.ssm_layers == 0 {
            return Err(AvmpError::Config(format!(
                "model {} needs at least one attention and one SSM layer",
                self.name
            )));
        }
        if self.per_token_bytes == 0 || self.ssm_block_bytes == 0 || self.attention_page_tokens == 0
        {
            return Err(AvmpError::Config(format!(
                "model {} has a zero byte size or page size",
                self.name
            )));
        }
        Ok(())
    }

    pub fn kv_page_bytes(&self) -> u64 {
        self.attention_page_tokens as u64 * self.per_token_bytes
    }

    pub fn kv_pages_for(&self, tokens: u64) -> u32 {
        tokens.div_ceil(self.attention_page_tokens as u64) as u32
    }

    /// KV-granular pages one SSM block occupies in a padded unified pool.
    pub fn padded_pages_per_ssm_block(&self) -> u32 {
        self.ssm_block_bytes.div_ceil(self.kv_page_bytes()) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    PaddedUnified,
    FixedDual,
    AvmpStatic,
    AvmpDynamic,
}

impl VariantKind {
    pub fn is_avmp(self) -> bool {
        matches!(self, VariantKind::AvmpStatic | VariantKind::AvmpDynamic)
    }
}

fn default_ratio() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocatorConfig {
    pub name: String,
    pub variant: VariantKind,
    /// SSM pool share of the budget for the two-pool variants.
    #[serde(default = "default_ratio")]
    pub mamba_full_memory_ratio: f64,
    #[serde(flatten)]
    pub rebalance: RebalanceConfig,
}

impl AllocatorConfig {
    pub fn new(name: &str, variant: VariantKind, ratio: f64) -> Self {
        AllocatorConfig {
            name: name.to_string(),
            variant,
            mamba_full_memory_ratio: ratio,
            rebalance: RebalanceConfig::default(),
        }
    }

    pub fn with_rebalance(mut self, rebalance: RebalanceConfig) -> Self {
        self.rebalance = rebalance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.rebalance.validate()?;
        let ratio = self.mamba_full_memory_ratio;
        if self.variant != VariantKind::PaddedUnified && !(ratio > 0.0 && ratio < 1.0) {
            return Err(AvmpError::Config(format!(
                "variant {}: mamba_full_memory_ratio {ratio} must lie strictly between 0 and 1",
                self.name
            )));
        }
        Ok(())
    }
}

/// Handles held by one admitted sequence.
///
/// `ssm_handles` carries one handle per SSM layer for the two-pool variants;
/// under padding it carries every KV-granular page backing those layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceAllocation {
    pub seq_id: u64,
    pub kv_handles: Vec<VirtualHandle>,
    pub ssm_handles: Vec<VirtualHandle>,
}

#[derive(Debug, Clone)]
struct LiveSequence {
    tokens: u64,
    allocation: SequenceAllocation,
}

/// What happened to a capacity error once the failure path was done with it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureOutcome {
    /// Migration freed enough room and the single retry succeeded.
    Recovered,
    /// Surfaced to the caller; counts as one OOM.
    Propagated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AllocatorEvent {
    CapacityError {
        op: u64,
        pool: PoolId,
        requested_pages: u32,
        free_pages: u32,
    },
    Rebalance(RebalanceEvent),
    FailureHandled {
        op: u64,
        outcome: FailureOutcome,
    },
}

pub struct Allocator {
    config: AllocatorConfig,
    model: ModelSpec,
    budget_bytes: u64,
    kv: BackingStore,
    ssm: Option<BackingStore>,
    table: Option<VirtualPageTable>,
    throttle: ThrottleState,
    pressure: PressureMachine,
    sequences: BTreeMap<u64, LiveSequence>,
    events: Vec<AllocatorEvent>,
    rebalances: Vec<RebalanceEvent>,
    migration_time: Duration,
}

fn pages_in(bytes: u64, stride: u64) -> Result<u32> {
    u32::try_from(bytes / stride)
        .map_err(|_| AvmpError::Config(format!("{bytes} bytes exceed the 32-bit page index space")))
}

impl Allocator {
    pub fn new(config: AllocatorConfig, budget_bytes: u64, model: ModelSpec) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let kv_page_bytes = model.kv_page_bytes();
        let kv_stride = page_stride(kv_page_bytes);
        let ssm_stride = page_stride(model.ssm_block_bytes);

        let (kv, ssm) = match config.variant {
            VariantKind::PaddedUnified => {
                let pages = pages_in(budget_bytes, kv_stride)?;
                (PoolGeometry::kv(model.attention_page_tokens, model.per_token_bytes, pages, pages), None)
            }
            variant => {
                let ssm_bytes = (config.mamba_full_memory_ratio * budget_bytes as f64).floor() as u64;
                let kv_bytes = budget_bytes - ssm_bytes;
                let kv_pages = pages_in(kv_bytes, kv_stride)?;
                let ssm_pages = pages_in(ssm_bytes, ssm_stride)?;
                let (kv_max, ssm_max) = if variant.is_avmp() {
                    (pages_in(budget_bytes, kv_stride)?, pages_in(budget_bytes, ssm_stride)?)
                } else {
                    (kv_pages, ssm_pages)
                };
                let kv = PoolGeometry::kv(model.attention_page_tokens, model.per_token_bytes, kv_pages, kv_max);
                let ssm = PoolGeometry {
                    pool: PoolId::Ssm,
                    page_bytes: model.ssm_block_bytes,
                    initial_capacity_pages: ssm_pages,
                    max_capacity_pages: ssm_max,
                };
                (kv, Some(ssm))
            }
        };
        let kv = BackingStore::new(kv)?;
        let ssm = match ssm {
            Some(geometry) => {
                let base = kv.reserved_bytes().div_ceil(SLAB_ALIGN) * SLAB_ALIGN;
                Some(BackingStore::new(geometry)?.with_slab_base(base)?)
            }
            None => None,
        };
        let table = config.variant.is_avmp().then(VirtualPageTable::new);
        Ok(Allocator {
            config,
            model,
            budget_bytes,
            kv,
            ssm,
            table,
            throttle: ThrottleState::default(),
            pressure: PressureMachine::default(),
            sequences: BTreeMap::new(),
            events: Vec::new(),
            rebalances: Vec::new(),
            migration_time: Duration::ZERO,
        })
    }

    pub fn config(&self) -> &AllocatorConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn budget_bytes(&self) -> u64 {
        self.budget_bytes
    }

    pub fn kv_store(&self) -> &BackingStore {
        &self.kv
    }

    /// The SSM store, or the unified pool for the padded variant.
    pub fn ssm_store(&self) -> &BackingStore {
        self.ssm.as_ref().unwrap_or(&self.kv)
    }

    pub fn throttle(&self) -> &ThrottleState {
        &self.throttle
    }

    pub fn pressure_state(&self) -> PressureState {
        self.pressure.state()
    }

    pub fn rebalance_events(&self) -> &[RebalanceEvent] {
        &self.rebalances
    }

    pub fn events(&self) -> &[AllocatorEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> std::vec::Drain<'_, AllocatorEvent> {
        self.events.drain(..)
    }

    /// Wall time spent migrating and rolling back since the last call.
    pub fn take_migration_time(&mut self) -> Duration {
        std::mem::take(&mut self.migration_time)
    }

    pub fn live_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequence(&self, seq_id: u64) -> Option<&SequenceAllocation> {
        self.sequences.get(&seq_id).map(|s| &s.allocation)
    }

    pub fn reserved_bytes(&self) -> (u64, u64) {
        (
            self.kv.reserved_bytes(),
            self.ssm.as_ref().map_or(0, BackingStore::reserved_bytes),
        )
    }

    /// Bytes of live pages across both pools, padding included.
    pub fn consumed_bytes(&self) -> u64 {
        let kv = self.kv.live_count() as u64 * self.kv.stride();
        let ssm = self
            .ssm
            .as_ref()
            .map_or(0, |s| s.live_count() as u64 * s.stride());
        kv + ssm
    }

    pub fn free_counts(&self) -> (u32, u32) {
        (
            self.kv.free_count(),
            self.ssm.as_ref().map_or(0, BackingStore::free_count),
        )
    }

    pub fn resolve(&self, handle: VirtualHandle) -> Result<PhysicalLocation> {
        let store = self.store(handle.pool());
        match &self.table {
            Some(table) => table.resolve(handle, &store.layout()),
            None => {
                let (pool, index) = decode_handle(handle);
                if index >= store.capacity_pages() || store.is_free(index) {
                    return Err(AvmpError::StaleHandle(handle));
                }
                Ok(store.layout().locate(pool, index))
            }
        }
    }

    fn store(&self, pool: PoolId) -> &BackingStore {
        match (pool, &self.ssm) {
            (PoolId::Ssm, Some(ssm)) => ssm,
            _ => &self.kv,
        }
    }

    fn store_mut(&mut self, pool: PoolId) -> &mut BackingStore {
        match (pool, &mut self.ssm) {
            (PoolId::Ssm, Some(ssm)) => ssm,
            _ => &mut self.kv,
        }
    }

    fn refresh_pressure(&mut self) {
        let kv_free = self.kv.free_fraction();
        let ssm_free = self.ssm_store().free_fraction();
        self.pressure
            .update(kv_free, ssm_free, self.config.rebalance.threshold_low);
    }

    fn issue_handles(&mut self, pool: PoolId, pages: Vec<u32>) -> Result<Vec<VirtualHandle>> {
        let tag = if self.ssm.is_some() { pool } else { PoolId::Kv };
        match &mut self.table {
            Some(table) => pages.into_iter().map(|p| table.insert(tag, p)).collect(),
            None => pages.into_iter().map(|p| encode_handle(tag, p)).collect(),
        }
    }

    /// One logical allocate call against `pool`.
    fn allocate(&mut self, pool: PoolId, pages: u32) -> Result<Vec<VirtualHandle>> {
        self.throttle.note_op();
        let op = self.throttle.op_counter;
        let first = self.store_mut(pool).alloc_pages(pages);
        let physical = match first {
            Ok(physical) => physical,
            Err(AvmpError::Capacity(err)) => {
                let result = self.handle_capacity_error(op, err);
                self.refresh_pressure();
                result?
            }
            Err(other) => return Err(other),
        };
        self.refresh_pressure();
        self.issue_handles(pool, physical)
    }

    fn handle_capacity_error(&mut self, op: u64, err: CapacityError) -> Result<Vec<u32>> {
        self.events.push(AllocatorEvent::CapacityError {
            op,
            pool: err.pool,
            requested_pages: err.requested_pages,
            free_pages: err.free_pages_at_failure,
        });
        let propagate = |events: &mut Vec<AllocatorEvent>, err: CapacityError| {
            events.push(AllocatorEvent::FailureHandled {
                op,
                outcome: FailureOutcome::Propagated,
            });
            Err(AvmpError::Capacity(err))
        };
        if self.config.variant != VariantKind::AvmpDynamic {
            return propagate(&mut self.events, err);
        }
        let donor_pool = err.pool.other();
        let decision = on_capacity_error(
            &err,
            self.store(donor_pool).free_fraction(),
            &self.throttle,
            &self.config.rebalance,
        );
        let GateDecision::Migrate { donor, pages } = decision else {
            return propagate(&mut self.events, err);
        };

        self.pressure.begin_rebalance();
        let started = Instant::now();
        let (Some(ssm), kv) = (self.ssm.as_mut(), &mut self.kv) else {
            return Err(AvmpError::Logic("dynamic variant without an SSM pool".into()));
        };
        let (donor_store, recipient_store) = match donor {
            PoolId::Ssm => (ssm, kv),
            PoolId::Kv => (kv, ssm),
        };
        let event = rebalancer::migrate(donor_store, recipient_store, self.table.as_mut(), pages, op);
        self.migration_time += started.elapsed();
        self.pressure.finish_rebalance();
        self.events.push(AllocatorEvent::Rebalance(event));
        self.rebalances.push(event);
        if event.rolled_back {
            return propagate(&mut self.events, err);
        }
        self.throttle.last_rebalance_op = Some(op);

        match self.store_mut(err.pool).alloc_pages(err.requested_pages) {
            Ok(physical) => {
                self.events.push(AllocatorEvent::FailureHandled {
                    op,
                    outcome: FailureOutcome::Recovered,
                });
                Ok(physical)
            }
            Err(AvmpError::Capacity(retry_err)) => propagate(&mut self.events, retry_err),
            Err(other) => Err(other),
        }
    }

    /// One logical free call.
    fn release_handles(&mut self, pool: PoolId, handles: &[VirtualHandle]) -> Result<()> {
        self.throttle.note_op();
        let physical = match &mut self.table {
            Some(table) => handles
                .iter()
                .map(|&h| table.remove(h))
                .collect::<Result<Vec<_>>>()?,
            None => handles.iter().map(|&h| decode_handle(h).1).collect(),
        };
        self.store_mut(pool).free_pages(&physical)?;
        self.refresh_pressure();
        Ok(())
    }

    pub fn admit(&mut self, seq_id: u64, prompt_tokens: u64) -> Result<SequenceAllocation> {
        if self.sequences.contains_key(&seq_id) {
            return Err(AvmpError::Logic(format!("sequence {seq_id} already admitted")));
        }
        if prompt_tokens == 0 {
            return Err(AvmpError::InvalidArgument("prompt must hold at least one token".into()));
        }
        let kv_pages = self.model.kv_pages_for(prompt_tokens);
        let kv_handles = self.allocate(PoolId::Kv, kv_pages)?;
        let ssm_pages = match self.ssm {
            Some(_) => self.model.ssm_layers,
            None => self.model.ssm_layers * self.model.padded_pages_per_ssm_block(),
        };
        let ssm_handles = match self.allocate(PoolId::Ssm, ssm_pages) {
            Ok(handles) => handles,
            Err(err) => {
                self.release_handles(PoolId::Kv, &kv_handles)?;
                return Err(err);
            }
        };
        let allocation = SequenceAllocation {
            seq_id,
            kv_handles,
            ssm_handles,
        };
        self.sequences.insert(
            seq_id,
            LiveSequence {
                tokens: prompt_tokens,
                allocation: allocation.clone(),
            },
        );
        Ok(allocation)
    }

    /// Grows a sequence to `new_total_tokens`; returns how many KV pages were added.
    pub fn extend_decode(&mut self, seq_id: u64, new_total_tokens: u64) -> Result<u32> {
        let live = self
            .sequences
            .get(&seq_id)
            .ok_or_else(|| AvmpError::Logic(format!("sequence {seq_id} is not admitted")))?;
        if new_total_tokens < live.tokens {
            return Err(AvmpError::Logic(format!(
                "sequence {seq_id} cannot shrink from {} to {new_total_tokens} tokens",
                live.tokens
            )));
        }
        let needed = self.model.kv_pages_for(new_total_tokens) - live.allocation.kv_handles.len() as u32;
        if needed > 0 {
            let handles = self.allocate(PoolId::Kv, needed)?;
            let live = self.sequences.get_mut(&seq_id).expect("checked above");
            live.allocation.kv_handles.extend(handles);
        }
        let live = self.sequences.get_mut(&seq_id).expect("checked above");
        live.tokens = new_total_tokens;
        Ok(needed)
    }

    pub fn release(&mut self, seq_id: u64) -> Result<()> {
        let live = self
            .sequences
            .remove(&seq_id)
            .ok_or_else(|| AvmpError::Logic(format!("sequence {seq_id} is not admitted")))?;
        self.release_handles(PoolId::Kv, &live.allocation.kv_handles)?;
        self.release_handles(PoolId::Ssm, &live.allocation.ssm_handles)?;
        Ok(())
    }
}
