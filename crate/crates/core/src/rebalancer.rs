//! Pressure tracking and capacity migration between the two pools.
//!
//! Migration is only ever considered from inside the allocation failure path:
//! a pool raised [`CapacityError`], the opposite pool has slack above
//! `threshold_high`, and at least `min_rebalance_interval_ops` logical ops
//! have passed since the last migration that stuck. `threshold_low` only
//! drives the diagnostic pressure labels.

use serde::{Deserialize, Serialize};

use crate::backing_stores::BackingStore;
use crate::error::{AvmpError, CapacityError, Result};
use crate::handle_space::{PoolId, VirtualPageTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PressureState {
    Balanced,
    KvPressured,
    SsmPressured,
    Rebalancing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RebalanceConfig {
    pub migration_batch_size: u32,
    pub threshold_low: f64,
    pub threshold_high: f64,
    pub min_rebalance_interval_ops: u64,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        RebalanceConfig {
            migration_batch_size: 128,
            threshold_low: 0.05,
            threshold_high: 0.30,
            min_rebalance_interval_ops: 1000,
        }
    }
}

impl RebalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.migration_batch_size == 0 {
            return Err(AvmpError::Config("migration batch size must be at least 1".into()));
        }
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.threshold_low) || !in_unit(self.threshold_high) {
            return Err(AvmpError::Config("thresholds must lie in [0, 1]".into()));
        }
        if self.threshold_low >= self.threshold_high {
            return Err(AvmpError::Config(format!(
                "threshold_low {} must be below threshold_high {}",
                self.threshold_low, self.threshold_high
            )));
        }
        Ok(())
    }
}

/// Logical-op throttle. Never consults wall-clock time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ThrottleState {
    pub op_counter: u64,
    pub last_rebalance_op: Option<u64>,
}

impl ThrottleState {
    pub fn note_op(&mut self) {
        self.op_counter += 1;
    }

    pub fn is_clear(&self, min_interval: u64) -> bool {
        match self.last_rebalance_op {
            None => true,
            Some(last) => self.op_counter - last >= min_interval,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalanceEvent {
    pub at_op: u64,
    pub donor: PoolId,
    pub recipient: PoolId,
    pub donor_pages_freed: u32,
    pub recipient_pages_gained: u32,
    pub bytes_migrated: u64,
    pub waste_bytes: u64,
    pub rolled_back: bool,
}

impl RebalanceEvent {
    /// Byte accounting for releasing `donor_pages` donor pages into the recipient.
    pub fn plan(
        at_op: u64,
        donor: PoolId,
        donor_stride: u64,
        donor_pages: u32,
        recipient_stride: u64,
    ) -> Self {
        let freed = donor_pages as u64 * donor_stride;
        RebalanceEvent {
            at_op,
            donor,
            recipient: donor.other(),
            donor_pages_freed: donor_pages,
            recipient_pages_gained: (freed / recipient_stride) as u32,
            bytes_migrated: freed,
            waste_bytes: freed % recipient_stride,
            rolled_back: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Migrate { donor: PoolId, pages: u32 },
    Propagate,
}

/// Stateful four-state pressure machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PressureMachine {
    state: PressureState,
}

impl Default for PressureMachine {
    fn default() -> Self {
        PressureMachine {
            state: PressureState::Balanced,
        }
    }
}

impl PressureMachine {
    pub fn state(&self) -> PressureState {
        self.state
    }

    pub fn update(&mut self, kv_free: f64, ssm_free: f64, threshold_low: f64) -> PressureState {
        self.state = match self.state {
            PressureState::Balanced if kv_free < threshold_low => PressureState::KvPressured,
            PressureState::Balanced if ssm_free < threshold_low => PressureState::SsmPressured,
            PressureState::KvPressured if kv_free >= threshold_low => PressureState::Balanced,
            PressureState::SsmPressured if ssm_free >= threshold_low => PressureState::Balanced,
            PressureState::Rebalancing => PressureState::Balanced,
            unchanged => unchanged,
        };
        self.state
    }

    pub fn begin_rebalance(&mut self) {
        self.state = PressureState::Rebalancing;
    }

    pub fn finish_rebalance(&mut self) {
        self.state = PressureState::Balanced;
    }
}

/// Decides what to do with a capacity error. `donor_free_fraction` is the
/// free fraction of the pool opposite to `err.pool`.
pub fn on_capacity_error(
    err: &CapacityError,
    donor_free_fraction: f64,
    throttle: &ThrottleState,
    cfg: &RebalanceConfig,
) -> GateDecision {
    if donor_free_fraction > cfg.threshold_high && throttle.is_clear(cfg.min_rebalance_interval_ops)
    {
        GateDecision::Migrate {
            donor: err.pool.other(),
            pages: cfg.migration_batch_size,
        }
    } else {
        GateDecision::Propagate
    }
}

/// Pre-migration copy of everything a migration may touch.
#[derive(Debug, Clone)]
pub struct MigrationSnapshot {
    donor: BackingStore,
    recipient: BackingStore,
    table: Option<VirtualPageTable>,
}

impl MigrationSnapshot {
    pub fn capture(
        donor: &BackingStore,
        recipient: &BackingStore,
        table: Option<&VirtualPageTable>,
    ) -> Self {
        MigrationSnapshot {
            donor: donor.clone(),
            recipient: recipient.clone(),
            table: table.cloned(),
        }
    }
}

/// Restores both stores and the page table to the captured state.
pub fn rollback(
    snapshot: MigrationSnapshot,
    donor: &mut BackingStore,
    recipient: &mut BackingStore,
    table: Option<&mut VirtualPageTable>,
) {
    *donor = snapshot.donor;
    *recipient = snapshot.recipient;
    if let (Some(table), Some(saved)) = (table, snapshot.table) {
        *table = saved;
    }
}

/// Moves up to `batch` free donor pages worth of capacity into the recipient.
///
/// Any failure restores the pre-migration state and yields an event with
/// `rolled_back` set.
pub fn migrate(
    donor: &mut BackingStore,
    recipient: &mut BackingStore,
    mut table: Option<&mut VirtualPageTable>,
    batch: u32,
    at_op: u64,
) -> RebalanceEvent {
    let pages = batch.min(donor.free_count());
    let mut event = RebalanceEvent::plan(
        at_op,
        donor.pool(),
        donor.stride(),
        pages,
        recipient.stride(),
    );
    let snapshot = MigrationSnapshot::capture(donor, recipient, table.as_deref());

    let applied = (|| -> Result<()> {
        if pages == 0 {
            return Err(AvmpError::ResizeRefused("donor has no free pages".into()));
        }
        let remaps = donor.resize_capacity(-(pages as i64))?;
        if let Some(table) = table.as_deref_mut() {
            for remap in remaps {
                table.remap(donor.pool(), remap.from, remap.to)?;
            }
        }
        recipient.resize_capacity(event.recipient_pages_gained as i64)?;
        Ok(())
    })();

    if applied.is_err() {
        rollback(snapshot, donor, recipient, table);
        event.rolled_back = true;
    }
    event
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backing_stores::PoolGeometry;
    use proptest::prelude::*;

    fn capacity_error(pool: PoolId) -> CapacityError {
        CapacityError {
            pool,
            requested_pages: 1,
            free_pages_at_failure: 0,
        }
    }

    fn stores(ssm_cap: u32, kv_cap: u32, kv_max: u32) -> (BackingStore, BackingStore) {
        let ssm = BackingStore::new(PoolGeometry {
            pool: PoolId::Ssm,
            page_bytes: 10240,
            initial_capacity_pages: ssm_cap,
            max_capacity_pages: ssm_cap,
        })
        .unwrap();
        let kv = BackingStore::new(PoolGeometry {
            pool: PoolId::Kv,
            page_bytes: 65536,
            initial_capacity_pages: kv_cap,
            max_capacity_pages: kv_max,
        })
        .unwrap();
        (ssm, kv)
    }

    #[test]
    fn note_op_counts() {
        let mut t = ThrottleState::default();
        t.note_op();
        assert_eq!(t.op_counter, 1);
        for _ in 1..1000 {
            t.note_op();
        }
        assert_eq!(t.op_counter, 1000);
        let mut near = ThrottleState {
            op_counter: (1 << 63) - 1,
            last_rebalance_op: None,
        };
        near.note_op();
        assert_eq!(near.op_counter, 1 << 63);
    }

    #[test]
    fn pressure_transitions() {
        let mut m = PressureMachine::default();
        assert_eq!(m.update(0.5, 0.5, 0.05), PressureState::Balanced);
        assert_eq!(m.update(0.05, 0.5, 0.05), PressureState::Balanced);
        assert_eq!(m.update(0.03, 0.5, 0.05), PressureState::KvPressured);
        // still pressured while KV stays low even if SSM dips too
        assert_eq!(m.update(0.03, 0.01, 0.05), PressureState::KvPressured);
        assert_eq!(m.update(0.2, 0.5, 0.05), PressureState::Balanced);
        assert_eq!(m.update(0.2, 0.01, 0.05), PressureState::SsmPressured);
        m.begin_rebalance();
        assert_eq!(m.state(), PressureState::Rebalancing);
        m.finish_rebalance();
        assert_eq!(m.state(), PressureState::Balanced);
    }

    #[test]
    fn gate_examples() {
        let cfg = RebalanceConfig::default();
        let clear = ThrottleState::default();
        assert_eq!(
            on_capacity_error(&capacity_error(PoolId::Kv), 0.45, &clear, &cfg),
            GateDecision::Migrate { donor: PoolId::Ssm, pages: 128 }
        );
        assert_eq!(
            on_capacity_error(&capacity_error(PoolId::Kv), 0.10, &clear, &cfg),
            GateDecision::Propagate
        );
        // boundary: strictly greater than threshold_high
        assert_eq!(
            on_capacity_error(&capacity_error(PoolId::Kv), 0.30, &clear, &cfg),
            GateDecision::Propagate
        );
        let throttled = ThrottleState { op_counter: 1999, last_rebalance_op: Some(1000) };
        assert_eq!(
            on_capacity_error(&capacity_error(PoolId::Kv), 0.45, &throttled, &cfg),
            GateDecision::Propagate
        );
        let released = ThrottleState { op_counter: 2000, last_rebalance_op: Some(1000) };
        assert!(matches!(
            on_capacity_error(&capacity_error(PoolId::Ssm), 0.45, &released, &cfg),
            GateDecision::Migrate { donor: PoolId::Kv, .. }
        ));
    }

    #[test]
    fn config_validation() {
        let bad = RebalanceConfig { threshold_low: 0.4, threshold_high: 0.3, ..Default::default() };
        assert!(matches!(bad.validate(), Err(AvmpError::Config(_))));
        let zero = RebalanceConfig { migration_batch_size: 0, ..Default::default() };
        assert!(zero.validate().is_err());
        assert!(RebalanceConfig::default().validate().is_ok());
    }

    #[test]
    fn migrate_batch_of_128_ssm_blocks() {
        let (mut ssm, mut kv) = stores(1000, 10, 1000);
        let event = migrate(&mut ssm, &mut kv, None, 128, 7);
        assert!(!event.rolled_back);
        assert_eq!(event.bytes_migrated, 1_310_720);
        assert_eq!(event.recipient_pages_gained, 20);
        assert_eq!(event.waste_bytes, 0);
        assert_eq!(ssm.capacity_pages(), 872);
        assert_eq!(kv.capacity_pages(), 30);
    }

    #[test]
    fn migrate_single_block_is_all_waste() {
        let (mut ssm, mut kv) = stores(1000, 10, 1000);
        let event = migrate(&mut ssm, &mut kv, None, 1, 0);
        assert_eq!(event.bytes_migrated, 10_240);
        assert_eq!(event.recipient_pages_gained, 0);
        assert_eq!(event.waste_bytes, 10_240);
        assert!(!event.rolled_back);
    }

    #[test]
    fn migrate_from_full_donor_rolls_back() {
        let (mut ssm, mut kv) = stores(4, 10, 1000);
        ssm.alloc_pages(4).unwrap();
        let (ssm_before, kv_before) = (ssm.clone(), kv.clone());
        let event = migrate(&mut ssm, &mut kv, None, 128, 0);
        assert!(event.rolled_back);
        assert_eq!(ssm, ssm_before);
        assert_eq!(kv, kv_before);
    }

    #[test]
    fn failed_grow_after_shrink_restores_everything() {
        // recipient has no headroom, so the grow step fails after the shrink
        let (mut ssm, mut kv) = stores(1000, 10, 10);
        let mut table = VirtualPageTable::new();
        let pages = ssm.alloc_pages(1000).unwrap();
        let handles: Vec<_> = pages
            .iter()
            .map(|&p| table.insert(PoolId::Ssm, p).unwrap())
            .collect();
        ssm.free_pages(&pages[..500]).unwrap();
        for h in &handles[..500] {
            table.remove(*h).unwrap();
        }
        let (ssm_before, kv_before) = (ssm.clone(), kv.clone());
        let event = migrate(&mut ssm, &mut kv, Some(&mut table), 128, 0);
        assert!(event.rolled_back);
        assert_eq!(ssm, ssm_before);
        assert_eq!(kv, kv_before);
        assert_eq!(table.lookup(handles[999]).unwrap(), 999);
    }

    #[test]
    fn rollback_of_noop_is_identity() {
        let (mut ssm, mut kv) = stores(8, 8, 8);
        let before = (ssm.clone(), kv.clone());
        let snap = MigrationSnapshot::capture(&ssm, &kv, None);
        rollback(snap, &mut ssm, &mut kv, None);
        assert_eq!((ssm, kv), before);
    }

    #[test]
    fn migration_remaps_live_pages_through_table() {
        let (mut ssm, mut kv) = stores(200, 10, 1000);
        let mut table = VirtualPageTable::new();
        let pages = ssm.alloc_pages(200).unwrap();
        let handles: Vec<_> = pages
            .iter()
            .map(|&p| table.insert(PoolId::Ssm, p).unwrap())
            .collect();
        ssm.free_pages(&pages[..150]).unwrap();
        for h in &handles[..150] {
            table.remove(*h).unwrap();
        }
        let event = migrate(&mut ssm, &mut kv, Some(&mut table), 128, 0);
        assert!(!event.rolled_back);
        assert_eq!(ssm.capacity_pages(), 72);
        for h in &handles[150..] {
            let phys = table.lookup(*h).unwrap();
            assert!(phys < 72);
            assert!(!ssm.is_free(phys));
        }
    }

    proptest! {
        #[test]
        fn byte_identities(donor in 1u64..1_000_000, recipient in 1u64..1_000_000, pages in 0u32..4096) {
            let e = RebalanceEvent::plan(0, PoolId::Ssm, donor, pages, recipient);
            prop_assert_eq!(e.bytes_migrated, e.recipient_pages_gained as u64 * recipient + e.waste_bytes);
            prop_assert!(e.waste_bytes < recipient);
        }
    }
}
