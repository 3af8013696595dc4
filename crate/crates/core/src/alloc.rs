//! Heap model with 64-byte allocation granularity and batched lazy frees.
//!
//! Freed blocks sit in a pending list until a threshold trips; the handler
//! then revokes their SMACT permissions and only afterwards returns them to
//! the free pool. A block is never handed out while pending.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::smact::Smact;
use crate::trace::VirtAddr;

pub const GRANULE: u64 = 64;
pub const DEFAULT_HEAP_BASE: u64 = 0x1000_0000_0000;
pub const DEFAULT_HEAP_BYTES: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AllocError {
    #[error("malloc of zero bytes")]
    ZeroSize,
    #[error("heap exhausted allocating {0} bytes")]
    Exhausted(u64),
    #[error("free of {0}, which is not a live allocation")]
    NotLive(VirtAddr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocConfig {
    pub heap_base: u64,
    pub heap_bytes: u64,
    /// Handler runs once pending frees exceed this count.
    pub max_count: u64,
    /// Handler runs once pending bytes exceed this.
    pub max_bytes: u64,
    pub handler_cost: u64,
}

impl Default for AllocConfig {
    fn default() -> Self {
        AllocConfig {
            heap_base: DEFAULT_HEAP_BASE,
            heap_bytes: DEFAULT_HEAP_BYTES,
            max_count: 25_000,
            max_bytes: 2 << 20,
            handler_cost: 10_000,
        }
    }
}

/// A batch of frees whose permissions must be revoked before reuse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandlerInvocation {
    pub ranges: Vec<(VirtAddr, u64)>,
}

impl HandlerInvocation {
    pub fn bytes(&self) -> u64 {
        self.ranges.iter().map(|r| r.1).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandlerOutcome {
    pub cycles: u64,
    pub entries_revoked: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    pub mallocs: u64,
    pub frees: u64,
    pub invocations: u64,
    pub handler_cycles: u64,
    pub entries_revoked: u64,
}

#[derive(Debug, Clone)]
pub struct LazyAllocator {
    cfg: AllocConfig,
    next: u64,
    live: BTreeMap<u64, u64>,
    pending: Vec<(u64, u64)>,
    freed_size: u64,
    /// Reclaimed blocks by base address; adjacent blocks are merged.
    pool: BTreeMap<u64, u64>,
    stats: AllocStats,
}

pub fn round_up(size: u64) -> u64 {
    size.div_ceil(GRANULE) * GRANULE
}

impl LazyAllocator {
    pub fn new(cfg: AllocConfig) -> Self {
        LazyAllocator {
            next: cfg.heap_base.next_multiple_of(GRANULE),
            cfg,
            live: BTreeMap::new(),
            pending: Vec::new(),
            freed_size: 0,
            pool: BTreeMap::new(),
            stats: AllocStats::default(),
        }
    }

    pub fn config(&self) -> &AllocConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &AllocStats {
        &self.stats
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    pub fn pending_bytes(&self) -> u64 {
        self.freed_size
    }

    pub fn is_live(&self, a: VirtAddr) -> bool {
        self.live.contains_key(&a.0)
    }

    pub fn live_size(&self, a: VirtAddr) -> Option<u64> {
        self.live.get(&a.0).copied()
    }

    pub fn malloc64(&mut self, size: u64) -> Result<VirtAddr, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        let need = round_up(size);
        let base = match self.pool.iter().find(|(_, &len)| len >= need).map(|(&b, &l)| (b, l)) {
            Some((b, len)) => {
                self.pool.remove(&b);
                if len > need {
                    self.pool.insert(b + need, len - need);
                }
                b
            }
            None => {
                let end = self.cfg.heap_base + self.cfg.heap_bytes;
                if self.next.checked_add(need).is_none_or(|e| e > end) {
                    return Err(AllocError::Exhausted(size));
                }
                let b = self.next;
                self.next += need;
                b
            }
        };
        self.live.insert(base, need);
        self.stats.mallocs += 1;
        Ok(VirtAddr(base))
    }

    /// Queues `a` for release. Returns the batch to hand to the handler when
    /// a threshold is exceeded.
    pub fn lazy_free(&mut self, a: VirtAddr) -> Result<Option<HandlerInvocation>, AllocError> {
        let size = self.live.remove(&a.0).ok_or(AllocError::NotLive(a))?;
        self.pending.push((a.0, size));
        self.freed_size += size;
        self.stats.frees += 1;
        let over = self.pending.len() as u64 > self.cfg.max_count || self.freed_size > self.cfg.max_bytes;
        Ok(over.then(|| self.take_pending()))
    }

    /// The remaining batch at end of execution, if any.
    pub fn drain(&mut self) -> Option<HandlerInvocation> {
        (!self.pending.is_empty()).then(|| self.take_pending())
    }

    fn take_pending(&mut self) -> HandlerInvocation {
        self.freed_size = 0;
        HandlerInvocation {
            ranges: self.pending.drain(..).map(|(b, s)| (VirtAddr(b), s)).collect(),
        }
    }

    /// Revokes every range in `inv` from `smact` (when given), then reclaims
    /// the ranges. Without a table the ranges are reclaimed unrevoked and no
    /// cycles are charged.
    pub fn revocation_handler(&mut self, inv: HandlerInvocation, smact: Option<&mut Smact>) -> HandlerOutcome {
        let mut entries_revoked = 0;
        let cycles = match smact {
            Some(t) => {
                for &(lo, len) in &inv.ranges {
                    entries_revoked += t.revoke_range(lo, len);
                }
                self.cfg.handler_cost
            }
            None => 0,
        };
        for (lo, len) in inv.ranges {
            self.reclaim(lo.0, len);
        }
        self.stats.invocations += 1;
        self.stats.handler_cycles += cycles;
        self.stats.entries_revoked += entries_revoked as u64;
        HandlerOutcome { cycles, entries_revoked }
    }

    fn reclaim(&mut self, mut base: u64, mut len: u64) {
        if let Some((&pb, &pl)) = self.pool.range(..base).next_back() {
            if pb + pl == base {
                self.pool.remove(&pb);
                base = pb;
                len += pl;
            }
        }
        if let Some(&nl) = self.pool.get(&(base + len)) {
            self.pool.remove(&(base + len));
            len += nl;
        }
        self.pool.insert(base, len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::InstId;
    use crate::smact::{SmactGeometry, SourceId};

    fn alloc() -> LazyAllocator {
        LazyAllocator::new(AllocConfig::default())
    }

    #[test]
    fn rounding_and_alignment() {
        let mut a = alloc();
        for (req, got) in [(1, 64), (64, 64), (65, 128)] {
            let p = a.malloc64(req).unwrap();
            assert_eq!(p.0 % 64, 0);
            assert_eq!(a.live_size(p), Some(got));
        }
        assert_eq!(a.malloc64(0), Err(AllocError::ZeroSize));
    }

    #[test]
    fn double_free_is_an_error() {
        let mut a = alloc();
        let p = a.malloc64(8).unwrap();
        a.lazy_free(p).unwrap();
        assert_eq!(a.lazy_free(p), Err(AllocError::NotLive(p)));
        assert!(a.lazy_free(VirtAddr(0x10)).is_err());
    }

    #[test]
    fn count_threshold_is_strict() {
        let mut a = alloc();
        let ptrs: Vec<_> = (0..25_001).map(|_| a.malloc64(16).unwrap()).collect();
        for p in &ptrs[..25_000] {
            assert!(a.lazy_free(*p).unwrap().is_none());
        }
        let inv = a.lazy_free(ptrs[25_000]).unwrap().expect("threshold crossed");
        assert_eq!(inv.ranges.len(), 25_001);
        assert_eq!(a.pending_count(), 0);
    }

    #[test]
    fn byte_threshold() {
        let mut a = alloc();
        let p = a.malloc64(3 << 20).unwrap();
        assert!(a.lazy_free(p).unwrap().is_some());
        let q = a.malloc64(2 << 20).unwrap();
        assert!(a.lazy_free(q).unwrap().is_none(), "exactly 2 MiB is not over");
    }

    #[test]
    fn pending_blocks_are_not_reused() {
        let mut a = alloc();
        let p = a.malloc64(64).unwrap();
        a.lazy_free(p).unwrap();
        let q = a.malloc64(64).unwrap();
        assert_ne!(p, q);
        let inv = a.drain().unwrap();
        a.revocation_handler(inv, None);
        assert_eq!(a.malloc64(64).unwrap(), p);
    }

    #[test]
    fn handler_revokes_before_reclaiming() {
        let mut a = alloc();
        let mut t = Smact::new(SmactGeometry::default()).unwrap();
        let p = a.malloc64(64).unwrap();
        for i in 1..=3 {
            t.insert(p, SourceId::from(InstId(i)));
        }
        a.lazy_free(p).unwrap();
        let inv = a.drain().unwrap();
        let out = a.revocation_handler(inv, Some(&mut t));
        assert_eq!(out, HandlerOutcome { cycles: 10_000, entries_revoked: 3 });
        for i in 1..=3 {
            assert!(!t.classify(p, SourceId::from(InstId(i)), None, false).is_hit());
        }
        let again = a.malloc64(64).unwrap();
        assert_eq!(again, p);
        t.insert(again, SourceId::from(InstId(9)));
        assert!(t.classify(again, SourceId::from(InstId(9)), None, false).is_hit());
    }

    #[test]
    fn empty_handler_still_costs() {
        let mut a = alloc();
        let mut t = Smact::new(SmactGeometry::default()).unwrap();
        let p = a.malloc64(100).unwrap();
        a.lazy_free(p).unwrap();
        let inv = a.drain().unwrap();
        assert_eq!(a.revocation_handler(inv, Some(&mut t)).cycles, 10_000);
    }

    #[test]
    fn pool_merges_neighbors() {
        let mut a = alloc();
        let p = a.malloc64(64).unwrap();
        let q = a.malloc64(64).unwrap();
        a.lazy_free(q).unwrap();
        a.lazy_free(p).unwrap();
        let inv = a.drain().unwrap();
        a.revocation_handler(inv, None);
        assert_eq!(a.malloc64(128).unwrap(), p);
    }
}
