//! Reference permission model: the exact set of committed
//! `(chunk, source)` pairs, with no capacity limit and no slab grouping.

use std::collections::{BTreeMap, BTreeSet};

use super::SourceId;
use crate::trace::VirtAddr;

#[derive(Debug, Clone)]
pub struct PermissionHistory {
    chunk_bytes: u64,
    pairs: BTreeMap<u64, BTreeSet<SourceId>>,
}

impl PermissionHistory {
    pub fn new(chunk_bytes: u64) -> Self {
        assert!(chunk_bytes.is_power_of_two());
        PermissionHistory { chunk_bytes, pairs: BTreeMap::new() }
    }

    fn chunk(&self, a: VirtAddr) -> u64 {
        a.0 / self.chunk_bytes
    }

    pub fn commit(&mut self, a: VirtAddr, src: SourceId) {
        let c = self.chunk(a);
        self.pairs.entry(c).or_default().insert(src);
    }

    /// Drops every pair whose chunk overlaps `[lo, lo + len)`.
    pub fn revoke(&mut self, lo: VirtAddr, len: u64) {
        if len == 0 {
            return;
        }
        let first = self.chunk(lo);
        let last = lo.0.saturating_add(len - 1) / self.chunk_bytes;
        let doomed: Vec<u64> = self.pairs.range(first..=last).map(|(c, _)| *c).collect();
        for c in doomed {
            self.pairs.remove(&c);
        }
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    pub fn contains(&self, a: VirtAddr, src: SourceId) -> bool {
        self.pairs.get(&self.chunk(a)).is_some_and(|s| s.contains(&src))
    }

    pub fn len(&self) -> usize {
        self.pairs.values().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

pub fn oracle_permitted(
    history: &PermissionHistory,
    a: VirtAddr,
    src: SourceId,
    lbtos: Option<SourceId>,
    accessor_is_owner: bool,
) -> bool {
    history.contains(a, src)
        || (accessor_is_owner && lbtos.is_some_and(|l| history.contains(a, l)))
}
