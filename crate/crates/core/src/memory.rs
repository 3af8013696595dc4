//! Three-level cache hierarchy in front of memory.
//!
//! Each level is set-associative with true LRU. A miss fills every level
//! above the one that served it. A filled block records when its data
//! arrives, so a second access to an in-flight block waits for the same fill
//! instead of issuing another.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::VirtAddr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLevelConfig {
    pub size: u64,
    pub ways: u64,
    pub block: u64,
    pub hit_latency: u64,
}

impl CacheLevelConfig {
    pub fn sets(&self) -> u64 {
        self.size / (self.ways * self.block)
    }

    fn check(&self, name: &str) -> Result<(), String> {
        if self.ways == 0 || self.block == 0 || !self.block.is_power_of_two() {
            return Err(format!("{name}: block must be a power of two and ways nonzero"));
        }
        if !self.size.is_multiple_of(self.ways * self.block) || !self.sets().is_power_of_two() {
            return Err(format!("{name}: size/(ways*block) must be a power of two"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub l1: CacheLevelConfig,
    pub l2: CacheLevelConfig,
    pub l3: CacheLevelConfig,
    pub mem_latency: u64,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        let level = |size, ways, hit_latency| CacheLevelConfig { size, ways, block: 64, hit_latency };
        MemoryConfig {
            l1: level(32 << 10, 8, 4),
            l2: level(256 << 10, 16, 14),
            l3: level(2 << 20, 16, 40),
            mem_latency: 200,
        }
    }
}

impl MemoryConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.l1.check("l1")?;
        self.l2.check("l2")?;
        self.l3.check("l3")?;
        let lat = [self.l1.hit_latency, self.l2.hit_latency, self.l3.hit_latency, self.mem_latency];
        if lat.windows(2).any(|w| w[0] >= w[1]) || lat[0] == 0 {
            return Err("latencies must be positive and strictly increase by level".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Load,
    Store,
    /// Walk and fill, but the data must not reach any consumer.
    FillOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    L1,
    L2,
    L3,
    Mem,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::L1 => "L1",
            Level::L2 => "L2",
            Level::L3 => "L3",
            Level::Mem => "MEM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccessResult {
    pub latency: u64,
    pub level_hit: Level,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelStats {
    pub accesses: u64,
    pub misses: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub l1: LevelStats,
    pub l2: LevelStats,
    pub l3: LevelStats,
    pub fill_only: u64,
}

impl CacheStats {
    /// L3 misses per thousand instructions.
    pub fn l3_mpki(&self, instructions: u64) -> f64 {
        if instructions == 0 {
            0.0
        } else {
            self.l3.misses as f64 * 1000.0 / instructions as f64
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Line {
    block: u64,
    lru: u64,
    ready_at: u64,
}

#[derive(Debug, Clone)]
struct Cache {
    cfg: CacheLevelConfig,
    sets: Vec<Vec<Line>>,
    block_shift: u32,
}

impl Cache {
    fn new(cfg: CacheLevelConfig) -> Self {
        Cache {
            cfg,
            sets: vec![Vec::with_capacity(cfg.ways as usize); cfg.sets() as usize],
            block_shift: cfg.block.trailing_zeros(),
        }
    }

    fn slot(&self, a: u64) -> (u64, usize) {
        let block = a >> self.block_shift;
        (block, (block & (self.cfg.sets() - 1)) as usize)
    }

    /// Ready time of the resident block, refreshing LRU.
    fn probe(&mut self, a: u64, stamp: u64) -> Option<u64> {
        let (block, set) = self.slot(a);
        let line = self.sets[set].iter_mut().find(|l| l.block == block)?;
        line.lru = stamp;
        Some(line.ready_at)
    }

    fn fill(&mut self, a: u64, stamp: u64, ready_at: u64) {
        let (block, set) = self.slot(a);
        let ways = self.cfg.ways as usize;
        let set = &mut self.sets[set];
        let line = Line { block, lru: stamp, ready_at };
        if let Some(l) = set.iter_mut().find(|l| l.block == block) {
            *l = line;
        } else if set.len() < ways {
            set.push(line);
        } else {
            let victim = set.iter_mut().min_by_key(|l| l.lru).expect("full set");
            *victim = line;
        }
    }
}

#[derive(Debug, Clone)]
pub struct MemoryHierarchy {
    cfg: MemoryConfig,
    levels: [Cache; 3],
    clock: u64,
    stats: CacheStats,
}

impl MemoryHierarchy {
    pub fn new(cfg: MemoryConfig) -> Result<Self, String> {
        cfg.validate()?;
        Ok(MemoryHierarchy {
            cfg,
            levels: [Cache::new(cfg.l1), Cache::new(cfg.l2), Cache::new(cfg.l3)],
            clock: 0,
            stats: CacheStats::default(),
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.cfg
    }

    pub fn access(&mut self, a: VirtAddr, kind: AccessKind, now: u64) -> AccessResult {
        self.clock += 1;
        let stamp = self.clock;
        if kind == AccessKind::FillOnly {
            self.stats.fill_only += 1;
        }
        let mut served = Level::Mem;
        let mut latency = self.cfg.mem_latency;
        for (i, level) in [Level::L1, Level::L2, Level::L3].into_iter().enumerate() {
            let stats = match level {
                Level::L1 => &mut self.stats.l1,
                Level::L2 => &mut self.stats.l2,
                _ => &mut self.stats.l3,
            };
            stats.accesses += 1;
            if let Some(ready) = self.levels[i].probe(a.0, stamp) {
                served = level;
                latency = self.levels[i].cfg.hit_latency.max(ready.saturating_sub(now));
                break;
            }
            stats.misses += 1;
        }
        let ready_at = now + latency;
        let upto = match served {
            Level::L1 => 0,
            Level::L2 => 1,
            Level::L3 => 2,
            Level::Mem => 3,
        };
        for cache in &mut self.levels[..upto] {
            cache.fill(a.0, stamp, ready_at);
        }
        AccessResult { latency, level_hit: served }
    }

    /// Latency an access would see now, without touching any state.
    pub fn peek_latency(&self, a: VirtAddr, now: u64) -> u64 {
        for cache in &self.levels {
            let (block, set) = cache.slot(a.0);
            if let Some(l) = cache.sets[set].iter().find(|l| l.block == block) {
                return cache.cfg.hit_latency.max(l.ready_at.saturating_sub(now));
            }
        }
        self.cfg.mem_latency
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }
}
