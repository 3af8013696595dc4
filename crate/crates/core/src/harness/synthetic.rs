//! Benign workloads with controlled memory behaviour.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::builder::{Op, TraceBuilder, OWNER, VISITOR_A};
use crate::trace::Trace;

const DATA: u64 = 0x2000_0000;
const DATA_END: u64 = 0x4000_0000;
const SLAB: u64 = 4096;
const CHUNK: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SyntheticKind {
    /// Loads, stores, and branches over a 32 KB footprint with a few mispredictions.
    RandomLoadHeavy,
    /// A loop-carried load chain over 2 KB behind slow, correctly predicted branches.
    Locality,
    /// Sixteen chunks touched in each of 64 slabs, four passes.
    ChunkDense,
    /// Eight static loads sweeping the same 128 slabs.
    SharedDestinations,
    /// A visitor repeatedly calls an owner routine that reads the visitor's buffer.
    OwnerUtility,
    /// Random loads over a 256 KB working set.
    WorkingSet,
    /// A long cold pointer chase interleaved with exactly 25,001 small frees.
    FreeHeavy,
    /// 25,001 small allocations followed by freeing all of them.
    SmallFrees,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 8] = [
        SyntheticKind::RandomLoadHeavy,
        SyntheticKind::Locality,
        SyntheticKind::ChunkDense,
        SyntheticKind::SharedDestinations,
        SyntheticKind::OwnerUtility,
        SyntheticKind::WorkingSet,
        SyntheticKind::FreeHeavy,
        SyntheticKind::SmallFrees,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticKind::RandomLoadHeavy => "random_load_heavy",
            SyntheticKind::Locality => "locality",
            SyntheticKind::ChunkDense => "chunk_dense",
            SyntheticKind::SharedDestinations => "shared_destinations",
            SyntheticKind::OwnerUtility => "owner_utility",
            SyntheticKind::WorkingSet => "working_set",
            SyntheticKind::FreeHeavy => "free_heavy",
            SyntheticKind::SmallFrees => "small_frees",
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown synthetic workload `{0}`")]
pub struct UnknownSynthetic(pub String);

impl FromStr for SyntheticKind {
    type Err = UnknownSynthetic;

    fn from_str(s: &str) -> Result<Self, UnknownSynthetic> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| UnknownSynthetic(s.to_string()))
    }
}

fn builder() -> TraceBuilder {
    let mut b = TraceBuilder::new();
    b.data(DATA, DATA_END, OWNER);
    b
}

pub fn synthesize(kind: SyntheticKind, seed: u64) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        SyntheticKind::RandomLoadHeavy => random_load_heavy(&mut rng),
        SyntheticKind::Locality => locality(&mut rng),
        SyntheticKind::ChunkDense => chunk_dense(),
        SyntheticKind::SharedDestinations => shared_destinations(),
        SyntheticKind::OwnerUtility => owner_utility(&mut rng),
        SyntheticKind::WorkingSet => working_set(&mut rng),
        SyntheticKind::FreeHeavy => free_heavy(),
        SyntheticKind::SmallFrees => small_frees(),
    }
}

fn random_load_heavy(rng: &mut ChaCha8Rng) -> Trace {
    let mut b = builder();
    let mut recent_load = 1u8;
    let mut dst = 1u8;
    let mut next_dst = || {
        dst = dst % 31 + 1;
        dst
    };
    let addr = |rng: &mut ChaCha8Rng| DATA + 8 * rng.random_range(0..4096u64);
    for _ in 0..3000 {
        let p: f64 = rng.random();
        let r = rng.random_range(1..32u8);
        if p < 0.45 {
            let d = next_dst();
            let mut op = Op::load(addr(rng)).dst(d);
            if rng.random_bool(0.3) {
                op = op.src(recent_load);
            }
            b.push(OWNER, op);
            recent_load = d;
        } else if p < 0.75 {
            b.push(OWNER, Op::alu().src(r).dst(next_dst()));
        } else if p < 0.85 {
            b.push(OWNER, Op::store(addr(rng)).src(r));
        } else if p < 0.97 {
            let resolve = rng.random_range(1..40);
            b.push(OWNER, Op::branch(resolve).src(r));
        } else {
            let resolve = rng.random_range(5..30);
            b.push(OWNER, Op::branch(resolve).src(r).mispredict(resolve));
            b.wrong_path(true);
            for _ in 0..rng.random_range(1..=4) {
                if rng.random_bool(0.6) {
                    b.push(OWNER, Op::load(addr(rng)).src(r).dst(next_dst()));
                } else {
                    b.push(OWNER, Op::alu().src(r).dst(next_dst()));
                }
            }
            b.wrong_path(false);
        }
    }
    b.build()
}

fn locality(rng: &mut ChaCha8Rng) -> Trace {
    let mut b = builder();
    for i in 0..20_000u64 {
        let a = DATA + CHUNK * ((i * 7) % 32) + 8 * rng.random_range(0..8u64);
        b.push_at(OWNER, 0x100, Op::load(a).src(3).dst(1));
        b.push_at(OWNER, 0x104, Op::alu().src(1).dst(2));
        b.push_at(OWNER, 0x108, Op::alu().src(2).dst(3));
        b.push_at(OWNER, 0x10c, Op::branch(rng.random_range(25..35)).src(2));
    }
    b.build()
}

fn chunk_dense() -> Trace {
    let mut b = builder();
    for _ in 0..4 {
        for s in 0..64u64 {
            for c in 0..16u64 {
                b.push_at(OWNER, 0x100, Op::load(DATA + s * SLAB + c * CHUNK).dst(1));
                b.push_at(OWNER, 0x104, Op::alu().src(1).dst(2));
            }
        }
    }
    b.build()
}

fn shared_destinations() -> Trace {
    let mut b = builder();
    for _ in 0..8 {
        for k in 0..8u64 {
            for s in 0..128u64 {
                b.push_at(OWNER, 0x100 + 4 * k, Op::load(DATA + s * SLAB).dst(1 + k as u8));
            }
        }
    }
    b.build()
}

fn owner_utility(rng: &mut ChaCha8Rng) -> Trace {
    const BUF: u64 = 0x1000_0000;
    let mut b = builder();
    b.data(BUF, BUF + 0x1_0000, VISITOR_A);
    b.push(OWNER, Op::call());
    for c in 0..16 {
        b.push_at(VISITOR_A, 0x100, Op::store(BUF + c * CHUNK).src(5));
    }
    for _ in 0..50 {
        b.push_at(VISITOR_A, 0x200, Op::call());
        for i in 0..64u64 {
            let a = BUF + (i % 16) * CHUNK + 8 * rng.random_range(0..8u64);
            b.push_at(OWNER, 0x300, Op::load(a).src(2).dst(1));
            b.push_at(OWNER, 0x304, Op::alu().src(1).dst(2));
        }
        b.push_at(OWNER, 0x308, Op::ret());
        b.push_at(VISITOR_A, 0x204, Op::alu().src(2).dst(6));
    }
    b.build()
}

fn working_set(rng: &mut ChaCha8Rng) -> Trace {
    let mut b = builder();
    for _ in 0..10_000 {
        let a = DATA + CHUNK * rng.random_range(0..(64 * SLAB / CHUNK));
        b.push_at(OWNER, 0x100, Op::load(a).dst(1));
        b.push_at(OWNER, 0x104, Op::alu().src(1).dst(2));
        b.push_at(OWNER, 0x108, Op::branch(rng.random_range(1..10)).src(2));
    }
    b.build()
}

fn free_heavy() -> Trace {
    let mut b = builder();
    let mut blocks = Vec::new();
    let mut frees = 0;
    for i in 0..200_000u64 {
        b.push_at(OWNER, 0x100, Op::load(DATA + i * CHUNK).src(1).dst(1));
        if i % 7 == 0 {
            let p = b.malloc(48);
            b.push_at(OWNER, 0x104, Op::store(p.0).src(1));
            blocks.push(p);
            if blocks.len() > 4 && frees < 25_001 {
                b.free(blocks.remove(0));
                frees += 1;
            }
        }
    }
    b.build()
}

fn small_frees() -> Trace {
    let mut b = builder();
    let blocks: Vec<_> = (0..25_001).map(|_| b.malloc(16)).collect();
    b.push(OWNER, Op::alu().dst(1));
    for p in blocks {
        b.free(p);
    }
    b.push(OWNER, Op::alu().src(1).dst(2));
    b.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::validate_trace;

    #[test]
    fn small_workloads_are_valid() {
        for kind in SyntheticKind::ALL {
            if kind == SyntheticKind::FreeHeavy {
                continue;
            }
            let t = synthesize(kind, 1);
            assert!(validate_trace(&t).is_empty(), "{kind}");
        }
    }

    #[test]
    fn names_round_trip() {
        for kind in SyntheticKind::ALL {
            assert_eq!(kind.as_str().parse::<SyntheticKind>().unwrap(), kind);
        }
    }

    #[test]
    fn seeds_vary_random_workloads() {
        assert_ne!(
            synthesize(SyntheticKind::RandomLoadHeavy, 1),
            synthesize(SyntheticKind::RandomLoadHeavy, 2)
        );
    }
}
