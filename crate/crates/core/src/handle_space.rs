//! Pool-tagged 32-bit virtual handles and the page table that resolves them.
//!
//! Handle layout: bit 31 carries the pool tag (0 = KV, 1 = SSM), bits 0..=30
//! carry the page id. Page ids are handed out from a per-pool monotone
//! counter and never recycled within one table, so a freed handle can never
//! alias a later allocation.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{AvmpError, Result};

/// Global slab alignment in bytes.
pub const SLAB_ALIGN: u64 = 128;
/// Alignment of every page inside a slab, in bytes.
pub const PAGE_ALIGN: u64 = 16;

const TAG_BIT: u32 = 1 << 31;
/// Exclusive upper bound on page ids.
pub const MAX_PAGE_ID: u32 = TAG_BIT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PoolId {
    #[serde(rename = "kv")]
    Kv,
    #[serde(rename = "ssm")]
    Ssm,
}

impl PoolId {
    pub const ALL: [PoolId; 2] = [PoolId::Kv, PoolId::Ssm];

    pub fn other(self) -> PoolId {
        match self {
            PoolId::Kv => PoolId::Ssm,
            PoolId::Ssm => PoolId::Kv,
        }
    }

    pub(crate) fn index(self) -> usize {
        match self {
            PoolId::Kv => 0,
            PoolId::Ssm => 1,
        }
    }
}

impl fmt::Display for PoolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolId::Kv => f.write_str("KV"),
            PoolId::Ssm => f.write_str("SSM"),
        }
    }
}

/// Opaque 32-bit handle returned by the allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualHandle(u32);

impl VirtualHandle {
    pub fn from_raw(raw: u32) -> Self {
        VirtualHandle(raw)
    }

    pub fn raw(self) -> u32 {
        self.0
    }

    pub fn pool(self) -> PoolId {
        decode_handle(self).0
    }

    pub fn page_id(self) -> u32 {
        decode_handle(self).1
    }
}

impl fmt::Display for VirtualHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#010x}", self.0)
    }
}

pub fn encode_handle(pool: PoolId, page_id: u32) -> Result<VirtualHandle> {
    if page_id >= MAX_PAGE_ID {
        return Err(AvmpError::InvalidArgument(format!(
            "page id {page_id} does not fit in 31 bits"
        )));
    }
    let tag = match pool {
        PoolId::Kv => 0,
        PoolId::Ssm => TAG_BIT,
    };
    Ok(VirtualHandle(tag | page_id))
}

pub fn decode_handle(handle: VirtualHandle) -> (PoolId, u32) {
    let pool = if handle.0 & TAG_BIT == 0 {
        PoolId::Kv
    } else {
        PoolId::Ssm
    };
    (pool, handle.0 & !TAG_BIT)
}

/// Page byte size rounded up to the in-slab alignment.
pub fn page_stride(page_bytes: u64) -> u64 {
    page_bytes.div_ceil(PAGE_ALIGN) * PAGE_ALIGN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PhysicalLocation {
    pub pool: PoolId,
    pub slab_base: u64,
    pub page_offset: u64,
}

/// Per-pool layout needed to turn a physical page index into bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlabLayout {
    pub slab_base: u64,
    pub stride: u64,
}

impl SlabLayout {
    pub fn locate(&self, pool: PoolId, physical_index: u32) -> PhysicalLocation {
        PhysicalLocation {
            pool,
            slab_base: self.slab_base,
            page_offset: physical_index as u64 * self.stride,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct PoolTable {
    entries: HashMap<u32, u32>,
    owners: HashMap<u32, u32>,
    next_id: u32,
}

/// Maps live page ids of both pools onto physical page indices.
#[derive(Debug, Clone, Default)]
pub struct VirtualPageTable {
    pools: [PoolTable; 2],
}

impl VirtualPageTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a freshly allocated physical page and returns its handle.
    pub fn insert(&mut self, pool: PoolId, physical_index: u32) -> Result<VirtualHandle> {
        let table = &mut self.pools[pool.index()];
        let handle = encode_handle(pool, table.next_id)?;
        if table.owners.contains_key(&physical_index) {
            return Err(AvmpError::Logic(format!(
                "{pool} physical page {physical_index} is already mapped"
            )));
        }
        table.entries.insert(table.next_id, physical_index);
        table.owners.insert(physical_index, table.next_id);
        table.next_id += 1;
        Ok(handle)
    }

    pub fn lookup(&self, handle: VirtualHandle) -> Result<u32> {
        let (pool, page_id) = decode_handle(handle);
        self.pools[pool.index()]
            .entries
            .get(&page_id)
            .copied()
            .ok_or(AvmpError::StaleHandle(handle))
    }

    /// Drops the entry and returns the physical index it pointed at.
    pub fn remove(&mut self, handle: VirtualHandle) -> Result<u32> {
        let (pool, page_id) = decode_handle(handle);
        let table = &mut self.pools[pool.index()];
        let physical = table
            .entries
            .remove(&page_id)
            .ok_or(AvmpError::StaleHandle(handle))?;
        table.owners.remove(&physical);
        Ok(physical)
    }

    /// Repoints whichever handle owns `from` so that it owns `to`.
    pub fn remap(&mut self, pool: PoolId, from: u32, to: u32) -> Result<()> {
        let table = &mut self.pools[pool.index()];
        let page_id = table.owners.remove(&from).ok_or_else(|| {
            AvmpError::Logic(format!("{pool} physical page {from} has no owner to remap"))
        })?;
        if table.owners.insert(to, page_id).is_some() {
            return Err(AvmpError::Logic(format!(
                "{pool} remap target {to} is already mapped"
            )));
        }
        table.entries.insert(page_id, to);
        Ok(())
    }

    pub fn live_count(&self, pool: PoolId) -> usize {
        self.pools[pool.index()].entries.len()
    }

    pub fn next_page_id(&self, pool: PoolId) -> u32 {
        self.pools[pool.index()].next_id
    }

    pub fn resolve(&self, handle: VirtualHandle, layout: &SlabLayout) -> Result<PhysicalLocation> {
        let physical = self.lookup(handle)?;
        Ok(layout.locate(handle.pool(), physical))
    }
}
