use serde::{Deserialize, Serialize};

use crate::memory::CacheStats;
use crate::smact::SmactStats;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmactSummary {
    pub lookups: u64,
    pub hits: u64,
    pub inherited_hits: u64,
    pub miss_slab: u64,
    pub miss_chunk: u64,
    pub miss_instance: u64,
    pub total_miss: u64,
    pub replays: u64,
    pub inserts: u64,
    pub evictions: u64,
    pub revoked_entries: u64,
    pub flushes: u64,
    /// Largest number of valid entries seen at any commit.
    pub peak_entries: u64,
}

impl SmactSummary {
    pub fn from_table(s: &SmactStats, replays: u64, peak_entries: u64) -> Self {
        SmactSummary {
            lookups: s.lookups,
            hits: s.hits,
            inherited_hits: s.inherited_hits,
            miss_slab: s.miss_slab,
            miss_chunk: s.miss_chunk,
            miss_instance: s.miss_instance,
            total_miss: s.total_miss(),
            replays,
            inserts: s.inserts,
            evictions: s.evictions,
            revoked_entries: s.revoked_entries,
            flushes: s.flushes,
            peak_entries,
        }
    }

    pub fn mpki(count: u64, instructions: u64) -> f64 {
        if instructions == 0 {
            0.0
        } else {
            count as f64 * 1000.0 / instructions as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimStats {
    pub cycles: u64,
    pub committed_instructions: u64,
    pub ipc: f64,
    pub smact: SmactSummary,
    pub cache: CacheStats,
    /// Revocation handler runs that were charged to the core.
    pub handler_invocations: u64,
    pub handler_cycles: u64,
    pub squashes: u64,
    pub wrong_path_issued: u64,
    pub instance_overflows: u64,
}
