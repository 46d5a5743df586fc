//! Physical backing regions for the KV and SSM pools.
//!
//! A store owns a contiguous range of page indices `[0, capacity)` carved out
//! of a reservation sized for `max_capacity_pages`. Allocation always hands
//! out the lowest free indices so identical op sequences produce identical
//! layouts.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{AvmpError, CapacityError, Result};
use crate::handle_space::{page_stride, PoolId, SlabLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub pool: PoolId,
    pub page_bytes: u64,
    pub initial_capacity_pages: u32,
    pub max_capacity_pages: u32,
}

impl PoolGeometry {
    /// KV geometry: one page holds `page_tokens` tokens of `per_token_bytes`.
    pub fn kv(page_tokens: u32, per_token_bytes: u64, initial: u32, max: u32) -> Self {
        PoolGeometry {
            pool: PoolId::Kv,
            page_bytes: page_tokens as u64 * per_token_bytes,
            initial_capacity_pages: initial,
            max_capacity_pages: max,
        }
    }

    /// SSM geometry: one block holds a full per-layer state.
    pub fn ssm(state_dim: u64, bytes_per_element: u64, initial: u32, max: u32) -> Self {
        PoolGeometry {
            pool: PoolId::Ssm,
            page_bytes: state_dim * bytes_per_element,
            initial_capacity_pages: initial,
            max_capacity_pages: max,
        }
    }

    pub fn stride(&self) -> u64 {
        page_stride(self.page_bytes)
    }
}

/// A live page that had to move below the new capacity during a shrink.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Remap {
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackingStore {
    geometry: PoolGeometry,
    stride: u64,
    capacity_pages: u32,
    free: BTreeSet<u32>,
    reserved_bytes: u64,
    slab_base: u64,
}

impl BackingStore {
    pub fn new(geometry: PoolGeometry) -> Result<Self> {
        if geometry.page_bytes == 0 {
            return Err(AvmpError::InvalidArgument(format!(
                "{} pool page size must be non-zero",
                geometry.pool
            )));
        }
        if geometry.initial_capacity_pages > geometry.max_capacity_pages {
            return Err(AvmpError::InvalidArgument(format!(
                "{} pool initial capacity {} exceeds maximum {}",
                geometry.pool, geometry.initial_capacity_pages, geometry.max_capacity_pages
            )));
        }
        let stride = geometry.stride();
        Ok(BackingStore {
            geometry,
            stride,
            capacity_pages: geometry.initial_capacity_pages,
            free: (0..geometry.initial_capacity_pages).collect(),
            reserved_bytes: geometry.max_capacity_pages as u64 * stride,
            slab_base: 0,
        })
    }

    /// Places the slab at `base`, which must honour the global slab alignment.
    pub fn with_slab_base(mut self, base: u64) -> Result<Self> {
        if !base.is_multiple_of(crate::handle_space::SLAB_ALIGN) {
            return Err(AvmpError::InvalidArgument(format!(
                "slab base {base} is not 128-byte aligned"
            )));
        }
        self.slab_base = base;
        Ok(self)
    }

    pub fn pool(&self) -> PoolId {
        self.geometry.pool
    }

    pub fn geometry(&self) -> &PoolGeometry {
        &self.geometry
    }

    pub fn stride(&self) -> u64 {
        self.stride
    }

    pub fn capacity_pages(&self) -> u32 {
        self.capacity_pages
    }

    pub fn free_count(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn live_count(&self) -> u32 {
        self.capacity_pages - self.free_count()
    }

    pub fn reserved_bytes(&self) -> u64 {
        self.reserved_bytes
    }

    pub fn layout(&self) -> SlabLayout {
        SlabLayout {
            slab_base: self.slab_base,
            stride: self.stride,
        }
    }

    /// Free pages over current capacity; an empty store counts as exhausted.
    pub fn free_fraction(&self) -> f64 {
        if self.capacity_pages == 0 {
            0.0
        } else {
            self.free_count() as f64 / self.capacity_pages as f64
        }
    }

    pub fn is_free(&self, index: u32) -> bool {
        self.free.contains(&index)
    }

    pub fn free_indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.free.iter().copied()
    }

    /// Takes the `n` lowest free pages, or nothing at all.
    pub fn alloc_pages(&mut self, n: u32) -> Result<Vec<u32>> {
        if n == 0 {
            return Err(AvmpError::InvalidArgument(
                "allocation of zero pages".to_string(),
            ));
        }
        if self.free_count() < n {
            return Err(CapacityError {
                pool: self.pool(),
                requested_pages: n,
                free_pages_at_failure: self.free_count(),
            }
            .into());
        }
        Ok((0..n).filter_map(|_| self.free.pop_first()).collect())
    }

    pub fn free_pages(&mut self, indices: &[u32]) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &index in indices {
            if index >= self.capacity_pages {
                return Err(AvmpError::Logic(format!(
                    "{} page {index} is outside capacity {}",
                    self.pool(),
                    self.capacity_pages
                )));
            }
            if self.free.contains(&index) || !seen.insert(index) {
                return Err(AvmpError::Logic(format!(
                    "double free of {} page {index}",
                    self.pool()
                )));
            }
        }
        self.free.extend(seen);
        Ok(())
    }

    /// Grows or shrinks capacity at the high end of the index space.
    ///
    /// A shrink first relocates any live page in the removed range into the
    /// lowest free slots below the new capacity (highest live page first) and
    /// reports the relocations so the caller can patch its page table.
    pub fn resize_capacity(&mut self, delta_pages: i64) -> Result<Vec<Remap>> {
        if delta_pages >= 0 {
            let grown = self.capacity_pages as i64 + delta_pages;
            if grown > self.geometry.max_capacity_pages as i64 {
                return Err(AvmpError::ResizeRefused(format!(
                    "{} pool cannot grow to {grown} pages (max {})",
                    self.pool(),
                    self.geometry.max_capacity_pages
                )));
            }
            let grown = grown as u32;
            self.free.extend(self.capacity_pages..grown);
            self.capacity_pages = grown;
            return Ok(Vec::new());
        }

        let shrink = delta_pages.unsigned_abs();
        if shrink > self.free_count() as u64 {
            return Err(AvmpError::ResizeRefused(format!(
                "{} pool cannot release {shrink} pages with {} free",
                self.pool(),
                self.free_count()
            )));
        }
        let new_capacity = self.capacity_pages - shrink as u32;
        let high_live: Vec<u32> = (new_capacity..self.capacity_pages)
            .rev()
            .filter(|index| !self.free.contains(index))
            .collect();
        let mut remaps = Vec::with_capacity(high_live.len());
        for from in high_live {
            let to = self
                .free
                .pop_first()
                .filter(|&to| to < new_capacity)
                .ok_or_else(|| AvmpError::Logic("no low free page for remap".to_string()))?;
            remaps.push(Remap { from, to });
        }
        self.free.retain(|&index| index < new_capacity);
        self.capacity_pages = new_capacity;
        Ok(remaps)
    }
}
