//! Speculative Memory Access Control Table.
//!
//! The table is indexed by destination slab and matched on the slab tag plus
//! the source (normally the dynamic instance ID). Each entry carries one mask
//! bit per chunk of its slab, so a single way covers every chunk of a slab the
//! source has committed accesses to. Only committed accesses insert; revocation
//! clears chunk bits for every source at once.

mod geometry;
pub mod oracle;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::instance::InstId;
use crate::trace::{RegionId, VirtAddr};

pub use geometry::{split_address, AddressSplit, GeometryError, SmactGeometry};
pub use oracle::{oracle_permitted, PermissionHistory};

/// What a permission is keyed on besides the destination.
///
/// Normally this is the dynamic instance ID; the static-region and
/// per-instruction forms exist for the ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceId(pub u64);

const PC_BITS: u32 = 42;

impl SourceId {
    pub fn region(r: RegionId) -> Self {
        SourceId(r.0 as u64)
    }

    /// One source per static instruction within the given source.
    pub fn with_pc(self, pc: VirtAddr) -> Self {
        SourceId((self.0 << PC_BITS) ^ (pc.0 & ((1 << PC_BITS) - 1)))
    }
}

impl From<InstId> for SourceId {
    fn from(i: InstId) -> Self {
        SourceId(i.0 as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LookupResult {
    Hit,
    HitByInheritance,
    /// No entry for the slab.
    MissSlab,
    /// The slab is present but nobody holds the chunk.
    MissChunk,
    /// The chunk is present only under a non-matching source.
    MissInstance,
}

impl LookupResult {
    pub fn is_hit(self) -> bool {
        matches!(self, LookupResult::Hit | LookupResult::HitByInheritance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmactEntry {
    pub tag: u64,
    pub source: SourceId,
    pub chunk_mask: u64,
    /// Last-use stamp; the smallest stamp in a set is the LRU way.
    pub lru: u64,
}

/// Counters sampled by the reporter. Never reset by the table, including on
/// flush.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmactStats {
    pub lookups: u64,
    pub hits: u64,
    pub inherited_hits: u64,
    pub miss_slab: u64,
    pub miss_chunk: u64,
    pub miss_instance: u64,
    pub inserts: u64,
    pub evictions: u64,
    pub revoked_entries: u64,
    pub flushes: u64,
}

impl SmactStats {
    pub fn record(&mut self, r: LookupResult) {
        self.lookups += 1;
        match r {
            LookupResult::Hit => self.hits += 1,
            LookupResult::HitByInheritance => self.inherited_hits += 1,
            LookupResult::MissSlab => self.miss_slab += 1,
            LookupResult::MissChunk => self.miss_chunk += 1,
            LookupResult::MissInstance => self.miss_instance += 1,
        }
    }

    pub fn total_miss(&self) -> u64 {
        self.miss_slab + self.miss_chunk + self.miss_instance
    }
}

#[derive(Debug, Clone)]
pub struct Smact {
    geom: SmactGeometry,
    /// `None` for the capacity-unbounded reference configuration.
    ways: Option<usize>,
    sets: Vec<Vec<SmactEntry>>,
    clock: u64,
    stats: SmactStats,
}

impl Smact {
    pub fn new(geom: SmactGeometry) -> Result<Self, GeometryError> {
        geom.validate()?;
        Ok(Smact {
            geom,
            ways: Some(geom.ways),
            sets: vec![Vec::with_capacity(geom.ways); geom.sets()],
            clock: 0,
            stats: SmactStats::default(),
        })
    }

    /// Same indexing as `geom` but sets never evict.
    pub fn unbounded(geom: SmactGeometry) -> Result<Self, GeometryError> {
        let mut t = Self::new(geom)?;
        t.ways = None;
        Ok(t)
    }

    pub fn geometry(&self) -> &SmactGeometry {
        &self.geom
    }

    pub fn stats(&self) -> &SmactStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut SmactStats {
        &mut self.stats
    }

    /// Verdict for an access without touching replacement state.
    pub fn classify(
        &self,
        a: VirtAddr,
        access: SourceId,
        lbtos: Option<SourceId>,
        accessor_is_owner: bool,
    ) -> LookupResult {
        self.find(a, access, lbtos, accessor_is_owner).0
    }

    /// Verdict for an access; a hit refreshes the matching entry's LRU stamp.
    pub fn lookup(
        &mut self,
        a: VirtAddr,
        access: SourceId,
        lbtos: Option<SourceId>,
        accessor_is_owner: bool,
    ) -> LookupResult {
        let (verdict, way) = self.find(a, access, lbtos, accessor_is_owner);
        if let Some(way) = way {
            let idx = self.geom.split(a).index;
            self.clock += 1;
            self.sets[idx][way].lru = self.clock;
        }
        verdict
    }

    fn find(
        &self,
        a: VirtAddr,
        access: SourceId,
        lbtos: Option<SourceId>,
        accessor_is_owner: bool,
    ) -> (LookupResult, Option<usize>) {
        let s = self.geom.split(a);
        let bit = 1u64 << s.chunk_bit;
        let inherit_from = if accessor_is_owner { lbtos } else { None };
        let mut slab_present = false;
        let mut chunk_elsewhere = false;
        let mut inherited = None;
        for (way, e) in self.sets[s.index].iter().enumerate() {
            if e.tag != s.tag {
                continue;
            }
            slab_present = true;
            if e.chunk_mask & bit == 0 {
                continue;
            }
            if e.source == access {
                return (LookupResult::Hit, Some(way));
            }
            if Some(e.source) == inherit_from {
                inherited = Some(way);
            } else {
                chunk_elsewhere = true;
            }
        }
        if inherited.is_some() {
            (LookupResult::HitByInheritance, inherited)
        } else if chunk_elsewhere {
            (LookupResult::MissInstance, None)
        } else if slab_present {
            (LookupResult::MissChunk, None)
        } else {
            (LookupResult::MissSlab, None)
        }
    }

    /// Records a committed access. Returns the entry evicted to make room, if
    /// any.
    pub fn insert(&mut self, a: VirtAddr, source: SourceId) -> Option<SmactEntry> {
        let s = self.geom.split(a);
        let bit = 1u64 << s.chunk_bit;
        self.clock += 1;
        self.stats.inserts += 1;
        let stamp = self.clock;
        let set = &mut self.sets[s.index];
        if let Some(e) = set.iter_mut().find(|e| e.tag == s.tag && e.source == source) {
            e.chunk_mask |= bit;
            e.lru = stamp;
            return None;
        }
        let fresh = SmactEntry { tag: s.tag, source, chunk_mask: bit, lru: stamp };
        match self.ways {
            Some(ways) if set.len() >= ways => {
                let (victim, _) = set
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| e.lru)
                    .expect("full set is nonempty");
                let old = std::mem::replace(&mut set[victim], fresh);
                self.stats.evictions += 1;
                Some(old)
            }
            _ => {
                set.push(fresh);
                None
            }
        }
    }

    /// Clears every chunk bit covered by `[lo, lo + len)` for all sources.
    /// Entries left with an empty mask are invalidated. Returns the number of
    /// entries that lost at least one bit.
    pub fn revoke_range(&mut self, lo: VirtAddr, len: u64) -> usize {
        if len == 0 {
            return 0;
        }
        let hi = lo.0.saturating_add(len);
        let g = self.geom;
        let mut touched = 0;
        for (index, set) in self.sets.iter_mut().enumerate() {
            set.retain_mut(|e| {
                let base = g.slab_base(e.tag, index);
                let end = base.saturating_add(g.slab_bytes);
                if hi <= base || lo.0 >= end {
                    return true;
                }
                let first = (lo.0.max(base) - base) / g.chunk_bytes;
                let last = (hi.min(end) - 1 - base) / g.chunk_bytes;
                let mask = chunk_range_mask(first as u32, last as u32);
                if e.chunk_mask & mask != 0 {
                    touched += 1;
                    e.chunk_mask &= !mask;
                }
                e.chunk_mask != 0
            });
        }
        self.stats.revoked_entries += touched as u64;
        touched
    }

    pub fn flush(&mut self) {
        for set in &mut self.sets {
            set.clear();
        }
        self.stats.flushes += 1;
    }

    pub fn valid_entries(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// Snapshot of `(set, way, entry)` for every valid entry.
    pub fn entries(&self) -> Vec<(usize, usize, SmactEntry)> {
        self.sets
            .iter()
            .enumerate()
            .flat_map(|(s, set)| set.iter().enumerate().map(move |(w, e)| (s, w, *e)))
            .collect()
    }

    /// One `set=<n> way=<n> tag=<hex> inst=<n> mask=<hex>` line per valid entry.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (s, w, e) in self.entries() {
            let _ = writeln!(
                out,
                "set={s} way={w} tag={:#x} inst={} mask={:#x}",
                e.tag, e.source.0, e.chunk_mask
            );
        }
        out
    }
}

fn chunk_range_mask(first: u32, last: u32) -> u64 {
    let upper = if last >= 63 { u64::MAX } else { (1u64 << (last + 1)) - 1 };
    upper & !((1u64 << first) - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(n: u64) -> SourceId {
        SourceId(n)
    }

    fn table() -> Smact {
        Smact::new(SmactGeometry::default()).unwrap()
    }

    const A: VirtAddr = VirtAddr(0x7f00_0000_1000);

    #[test]
    fn empty_table_misses_slab() {
        assert_eq!(table().classify(A, src(1), None, false), LookupResult::MissSlab);
    }

    #[test]
    fn insert_then_lookup_hits() {
        let mut t = table();
        assert!(t.insert(A, src(1)).is_none());
        assert_eq!(t.valid_entries(), 1);
        assert_eq!(t.entries()[0].2.chunk_mask.count_ones(), 1);
        assert_eq!(t.lookup(A, src(1), None, false), LookupResult::Hit);
    }

    #[test]
    fn inheritance_only_for_owner() {
        let mut t = table();
        t.insert(A, src(7));
        assert_eq!(t.lookup(A, src(9), Some(src(7)), true), LookupResult::HitByInheritance);
        assert_eq!(t.lookup(A, src(9), Some(src(7)), false), LookupResult::MissInstance);
    }

    #[test]
    fn miss_kinds() {
        let mut t = table();
        t.insert(A, src(1));
        // same slab, other chunk
        assert_eq!(t.classify(A.offset(64), src(1), None, false), LookupResult::MissChunk);
        assert_eq!(t.classify(A.offset(64), src(2), None, false), LookupResult::MissChunk);
        assert_eq!(t.classify(A, src(2), None, false), LookupResult::MissInstance);
        assert_eq!(t.classify(A.offset(4096), src(1), None, false), LookupResult::MissSlab);
    }

    #[test]
    fn two_chunks_share_one_entry() {
        let mut t = table();
        t.insert(A.offset(3 * 64), src(1));
        t.insert(A.offset(7 * 64), src(1));
        let e = t.entries();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0].2.chunk_mask, (1 << 3) | (1 << 7));
    }

    #[test]
    fn ninth_key_evicts_lru() {
        let mut t = table();
        let stride = 64 * 4096; // same set, different tags
        for i in 0..8u64 {
            t.insert(A.offset(i * stride), src(1));
            t.insert(A.offset(i * stride + 64), src(1));
        }
        // touch everything but key 0 so key 0 is LRU
        for i in 1..8u64 {
            assert!(t.lookup(A.offset(i * stride), src(1), None, false).is_hit());
        }
        let victim = t.insert(A.offset(8 * stride), src(1)).expect("eviction");
        assert_eq!(victim.tag, t.geometry().split(A).tag);
        assert_eq!(victim.chunk_mask.count_ones(), 2);
        assert_eq!(t.classify(A, src(1), None, false), LookupResult::MissSlab);
        assert_eq!(t.classify(A.offset(64), src(1), None, false), LookupResult::MissSlab);
        assert_eq!(t.stats().evictions, 1);
    }

    #[test]
    fn revoke_cases() {
        let mut t = table();
        assert_eq!(t.revoke_range(A, 64), 0);

        let c = A.offset(5 * 64);
        t.insert(c, src(1));
        t.insert(c, src(2));
        assert_eq!(t.revoke_range(c, 64), 2);
        assert_eq!(t.valid_entries(), 0);

        t.insert(A.offset(3 * 64), src(1));
        t.insert(A.offset(7 * 64), src(1));
        assert_eq!(t.revoke_range(A.offset(3 * 64), 64), 1);
        assert_eq!(t.entries()[0].2.chunk_mask, 1 << 7);
    }

    #[test]
    fn revoke_spanning_slabs() {
        let mut t = table();
        for i in 0..3u64 {
            t.insert(A.offset(i * 4096 + 4032), src(1)); // last chunk of each slab
            t.insert(A.offset(i * 4096), src(1)); // first chunk
        }
        // from the last chunk of slab 0 through the first chunk of slab 2
        assert_eq!(t.revoke_range(A.offset(4032), 4096 + 128), 3);
        assert!(t.classify(A, src(1), None, false).is_hit());
        assert!(!t.classify(A.offset(4032), src(1), None, false).is_hit());
        assert!(!t.classify(A.offset(8192), src(1), None, false).is_hit());
        assert!(t.classify(A.offset(8192 + 4032), src(1), None, false).is_hit());
    }

    #[test]
    fn flush_empties_keeps_stats() {
        let mut t = table();
        t.flush();
        assert_eq!(t.valid_entries(), 0);
        for i in 0..10u64 {
            t.insert(A.offset(i * 64), src(1));
        }
        let inserts = t.stats().inserts;
        t.flush();
        for _ in 0..10 {
            assert_eq!(t.lookup(A, src(1), None, false), LookupResult::MissSlab);
        }
        assert_eq!(t.stats().inserts, inserts);
        t.insert(A, src(1));
        assert_eq!(t.lookup(A, src(1), None, false), LookupResult::Hit);
    }

    #[test]
    fn without_bitmask_doubles_entries() {
        let mut full = table();
        let mut flat = Smact::new(SmactGeometry::default().without_bitmask()).unwrap();
        // 8 slabs fit both layouts without eviction
        for slab in 0..8u64 {
            for chunk in [0u64, 1] {
                let a = A.offset(slab * 4096 + chunk * 64);
                full.insert(a, src(1));
                flat.insert(a, src(1));
            }
        }
        assert_eq!(full.valid_entries(), 8);
        assert_eq!(flat.valid_entries(), 16);
        // no chunk misses possible with one chunk per slab
        assert_eq!(flat.classify(A.offset(128), src(1), None, false), LookupResult::MissSlab);
    }

    #[test]
    fn dump_format() {
        let mut t = table();
        t.insert(VirtAddr(0x1040), src(3));
        assert_eq!(t.dump(), "set=1 way=0 tag=0x0 inst=3 mask=0x2\n");
    }

    #[test]
    fn chunk_mask_helper() {
        assert_eq!(chunk_range_mask(0, 63), u64::MAX);
        assert_eq!(chunk_range_mask(3, 3), 1 << 3);
        assert_eq!(chunk_range_mask(62, 63), 0b11 << 62);
    }
}
