//! Transient-execution attack generators.
//!
//! Each scenario places a secret in memory the attacking code never
//! committed an access to, then opens a wrong-path window in which the
//! attacker's (or a confused owner's) code loads the secret and uses it to
//! index a probe array.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::builder::{Op, TraceBuilder, OWNER, VISITOR_A, VISITOR_B};
use crate::trace::{RegionId, Trace, VirtAddr};

/// Byte offset of the out-of-bounds index in the bounds-check bypass.
pub const OOB_INDEX: u64 = 1_048_557;
pub const DATA_BASE: u64 = 0x1000_0000;
const VISITOR_DATA: (u64, u64) = (DATA_BASE, DATA_BASE + 0x8_0000);
const OWNER_DATA: (u64, u64) = (DATA_BASE + 0x8_0000, DATA_BASE + 0x20_0000);
const VISITOR_B_DATA: (u64, u64) = (DATA_BASE + 0x20_0000, DATA_BASE + 0x28_0000);
const PROBE: u64 = DATA_BASE + 0x4_0000;
const PROBE_B: u64 = DATA_BASE + 0x24_0000;
const LEN_VAR: u64 = DATA_BASE + 0x100;
const PTR_SLOT: u64 = DATA_BASE + 0x200;
const COLD: u64 = DATA_BASE + 0x6_0000;
const KEY: u64 = DATA_BASE + 0x10_0000;
const STRIDE: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    SpectreV1,
    SpectreV1_1,
    SpectreV2,
    SpectreRsb,
    SpectreV4,
    ConfusedDeputy,
    StalePermission,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::SpectreV1,
        ScenarioKind::SpectreV1_1,
        ScenarioKind::SpectreV2,
        ScenarioKind::SpectreRsb,
        ScenarioKind::SpectreV4,
        ScenarioKind::ConfusedDeputy,
        ScenarioKind::StalePermission,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::SpectreV1 => "spectre_v1",
            ScenarioKind::SpectreV1_1 => "spectre_v1_1",
            ScenarioKind::SpectreV2 => "spectre_v2",
            ScenarioKind::SpectreRsb => "spectre_rsb",
            ScenarioKind::SpectreV4 => "spectre_v4",
            ScenarioKind::ConfusedDeputy => "confused_deputy",
            ScenarioKind::StalePermission => "stale_permission",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, ScenarioError> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ScenarioError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    UnknownKind(String),
    #[error("array_len must be in 1..=4096, got {0}")]
    ArrayLen(u64),
    #[error("mistrain_iters must be in 1..=64, got {0}")]
    Mistrain(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub secret_byte: u8,
    /// Elements of the attacker-visible array, in bytes.
    pub array_len: u64,
    /// In-bounds iterations before the attack iteration.
    pub mistrain_iters: u32,
    /// Drives layout jitter, filler, and resolve latencies.
    pub seed: u64,
}

impl ScenarioSpec {
    /// Fills the free parameters from `seed`.
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        ScenarioSpec {
            kind,
            secret_byte: rng.random_range(1..=255),
            array_len: rng.random_range(16..=64),
            mistrain_iters: rng.random_range(4..=8),
            seed,
        }
    }
}

/// A generated attack and the addresses it was laid out with.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub trace: Trace,
    pub array_base: VirtAddr,
    pub secret_addr: VirtAddr,
    /// Wrong-path probe index the secret selects.
    pub transmit_addr: VirtAddr,
}

pub fn generate(spec: &ScenarioSpec) -> Result<Trace, ScenarioError> {
    build(spec).map(|s| s.trace)
}

struct Gen {
    b: TraceBuilder,
    rng: ChaCha8Rng,
    spec: ScenarioSpec,
    array_base: u64,
}

impl Gen {
    fn filler(&mut self, region: RegionId) {
        for _ in 0..self.rng.random_range(0..6) {
            let r = self.rng.random_range(20..30);
            self.b.push(region, Op::alu().src(r).dst(r + 1));
        }
    }

    fn resolve(&mut self) -> u32 {
        self.rng.random_range(60..=120)
    }

    /// Bounds-checked array reads with in-bounds indices, at fixed pcs.
    fn mistrain(&mut self, region: RegionId) {
        self.b.push(region, Op::load(LEN_VAR).dst(1));
        for i in 0..self.spec.mistrain_iters as u64 {
            let r = self.rng.random_range(2..8);
            let v: u64 = self.rng.random_range(0..256);
            self.b.push_at(region, 0x100, Op::alu().dst(2));
            self.b.push_at(region, 0x104, Op::branch(r).src(1).src(2));
            self.b.push_at(region, 0x108, Op::load(self.array_base + i).size(1).src(2).dst(3));
            self.b.push_at(region, 0x10c, Op::load(PROBE + STRIDE * v).src(3).dst(4));
        }
    }

    /// Wrong-path load of the secret followed by the probe access it indexes.
    fn gadget(&mut self, region: RegionId, secret: u64, size: u32, addr_src: Option<u8>, probe: u64) -> u64 {
        let mut op = Op::load(secret).size(size).dst(3).secret();
        if let Some(r) = addr_src {
            op = op.src(r);
        }
        self.b.push(region, op);
        let t = probe + STRIDE * self.spec.secret_byte as u64;
        self.b.push(region, Op::load(t).src(3).dst(4));
        t
    }
}

pub fn build(spec: &ScenarioSpec) -> Result<Scenario, ScenarioError> {
    if !(1..=4096).contains(&spec.array_len) {
        return Err(ScenarioError::ArrayLen(spec.array_len));
    }
    if !(1..=64).contains(&spec.mistrain_iters) {
        return Err(ScenarioError::Mistrain(spec.mistrain_iters));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let array_base = DATA_BASE + 0x1000 + STRIDE * rng.random_range(0..64);
    let mut g = Gen { b: TraceBuilder::new(), rng, spec: *spec, array_base };
    g.b.data(VISITOR_DATA.0, VISITOR_DATA.1, VISITOR_A);
    g.b.data(OWNER_DATA.0, OWNER_DATA.1, OWNER);
    g.b.data(VISITOR_B_DATA.0, VISITOR_B_DATA.1, VISITOR_B);

    let oob = array_base + OOB_INDEX;
    let (secret, transmit) = match spec.kind {
        ScenarioKind::SpectreV1 => {
            g.b.secret(oob, 1);
            owner_touches(&mut g, oob);
            g.b.push(OWNER, Op::call());
            g.mistrain(VISITOR_A);
            g.b.push_at(VISITOR_A, 0x100, Op::alu().dst(2));
            let r = g.resolve();
            g.b.push_at(VISITOR_A, 0x104, Op::branch(r).src(1).src(2).mispredict(r));
            g.b.wrong_path(true);
            g.b.push_at(VISITOR_A, 0x108, Op::load(oob).size(1).src(2).dst(3).secret());
            let t = PROBE + STRIDE * spec.secret_byte as u64;
            g.b.push_at(VISITOR_A, 0x10c, Op::load(t).src(3).dst(4));
            g.b.wrong_path(false);
            g.filler(VISITOR_A);
            g.b.push(VISITOR_A, Op::ret());
            g.b.push(OWNER, Op::alu());
            (oob, t)
        }
        ScenarioKind::SpectreV1_1 => {
            g.b.secret(oob, 1);
            owner_touches(&mut g, oob);
            g.b.push(OWNER, Op::call());
            g.mistrain(VISITOR_A);
            g.b.push_at(VISITOR_A, 0x100, Op::alu().dst(2));
            let r = g.resolve();
            g.b.push_at(VISITOR_A, 0x104, Op::branch(r).src(1).src(2).mispredict(r));
            g.b.wrong_path(true);
            // Out-of-bounds store plants a pointer that a later load picks up.
            g.b.push(VISITOR_A, Op::alu().dst(5));
            g.b.push(VISITOR_A, Op::store(PTR_SLOT).src(2).src(5));
            g.b.push(VISITOR_A, Op::load(PTR_SLOT).dst(6));
            let t = g.gadget(VISITOR_A, oob, 1, Some(6), PROBE);
            g.b.wrong_path(false);
            g.filler(VISITOR_A);
            g.b.push(VISITOR_A, Op::ret());
            g.b.push(OWNER, Op::alu());
            (oob, t)
        }
        ScenarioKind::SpectreV2 => {
            let s = OWNER_DATA.0 + STRIDE * g.rng.random_range(0..1024);
            g.b.secret(s, 8);
            owner_touches(&mut g, s);
            g.b.push(OWNER, Op::call());
            visitor_warmup(&mut g, VISITOR_A);
            g.b.push(VISITOR_A, Op::call());
            g.filler(OWNER);
            let r = g.resolve();
            g.b.push(OWNER, Op::branch(r).src(9).mispredict(r));
            g.b.wrong_path(true);
            let t = g.gadget(OWNER, s, 8, None, PROBE);
            g.b.wrong_path(false);
            g.b.push(OWNER, Op::alu());
            g.b.push(OWNER, Op::ret());
            g.b.push(VISITOR_A, Op::alu());
            (s, t)
        }
        ScenarioKind::SpectreRsb => {
            let s = OWNER_DATA.0 + STRIDE * g.rng.random_range(0..1024);
            g.b.secret(s, 8);
            owner_touches(&mut g, s);
            g.b.push(OWNER, Op::call());
            visitor_warmup(&mut g, VISITOR_A);
            g.b.push(VISITOR_A, Op::call());
            g.filler(OWNER);
            let r = g.resolve();
            // The poisoned return predicts a gadget inside the owner.
            g.b.push(OWNER, Op::ret().mispredict(r));
            g.b.wrong_path(true);
            let t = g.gadget(OWNER, s, 8, None, PROBE);
            g.b.wrong_path(false);
            g.b.push(VISITOR_A, Op::alu());
            (s, t)
        }
        ScenarioKind::SpectreV4 => {
            let s = OWNER_DATA.0 + STRIDE * g.rng.random_range(0..1024);
            g.b.secret(s, 8);
            owner_touches(&mut g, s);
            g.b.push(OWNER, Op::call());
            visitor_warmup(&mut g, VISITOR_A);
            // The sanitising store's address waits on a cold load.
            g.b.push(VISITOR_A, Op::load(COLD).dst(7));
            g.b.push(VISITOR_A, Op::store(s).src(7));
            let r = g.resolve();
            g.b.push(VISITOR_A, Op::branch(r).mispredict(r));
            g.b.wrong_path(true);
            let t = g.gadget(VISITOR_A, s, 8, None, PROBE);
            g.b.wrong_path(false);
            g.filler(VISITOR_A);
            g.b.push(VISITOR_A, Op::ret());
            g.b.push(OWNER, Op::alu());
            (s, t)
        }
        ScenarioKind::ConfusedDeputy => {
            g.b.secret(KEY, 8);
            g.filler(OWNER);
            g.b.push(OWNER, Op::call());
            visitor_warmup(&mut g, VISITOR_A);
            g.b.push(VISITOR_A, Op::call());
            g.b.push_at(OWNER, 0x200, Op::branch(3).src(9));
            g.b.push_at(OWNER, 0x204, Op::load(KEY).dst(10));
            g.b.push_at(OWNER, 0x208, Op::alu().src(10).dst(11));
            g.b.push_at(OWNER, 0x20c, Op::ret());
            g.b.push(VISITOR_A, Op::ret());
            g.filler(OWNER);
            g.b.push(OWNER, Op::fence());
            g.b.push(OWNER, Op::call());
            visitor_warmup(&mut g, VISITOR_B);
            g.b.push(VISITOR_B, Op::call());
            let r = g.resolve();
            g.b.push_at(OWNER, 0x200, Op::branch(r).src(9).mispredict(r));
            g.b.wrong_path(true);
            let t = g.gadget(OWNER, KEY, 8, None, PROBE_B);
            g.b.wrong_path(false);
            g.b.push_at(OWNER, 0x208, Op::alu());
            g.b.push_at(OWNER, 0x20c, Op::ret());
            g.b.push(VISITOR_B, Op::alu());
            (KEY, t)
        }
        ScenarioKind::StalePermission => {
            g.filler(OWNER);
            g.b.push(OWNER, Op::call());
            visitor_warmup(&mut g, VISITOR_A);
            let c = g.b.malloc(64);
            g.b.push(VISITOR_A, Op::store(c.0).src(2));
            g.b.push(VISITOR_A, Op::load(c.0).dst(5));
            g.b.free(c);
            let big = g.b.malloc(3 << 20);
            let fired = g.b.free(big);
            debug_assert!(fired);
            g.filler(VISITOR_A);
            g.b.push(VISITOR_A, Op::call());
            let again = g.b.malloc(64);
            debug_assert_eq!(again, c);
            g.b.secret(c.0, 64);
            g.b.push(OWNER, Op::alu().dst(11));
            g.b.push(OWNER, Op::store(again.0).src(11));
            g.b.push(OWNER, Op::fence());
            g.b.push(OWNER, Op::ret());
            g.b.push(VISITOR_A, Op::fence());
            g.filler(VISITOR_A);
            let r = g.resolve();
            g.b.push(VISITOR_A, Op::branch(r).mispredict(r));
            g.b.wrong_path(true);
            let t = g.gadget(VISITOR_A, c.0, 8, None, PROBE);
            g.b.wrong_path(false);
            g.b.push(VISITOR_A, Op::alu());
            (c.0, t)
        }
    };
    Ok(Scenario {
        trace: g.b.build(),
        array_base: VirtAddr(array_base),
        secret_addr: VirtAddr(secret),
        transmit_addr: VirtAddr(transmit),
    })
}

/// The owner legitimately reads its own secret and waits for it to arrive.
fn owner_touches(g: &mut Gen, secret: u64) {
    g.filler(OWNER);
    g.b.push(OWNER, Op::load(secret).size(1).dst(10));
    g.b.push(OWNER, Op::alu().src(10).dst(11));
    g.b.push(OWNER, Op::fence());
}

/// The visitor commits accesses to its own data, including the probe array.
fn visitor_warmup(g: &mut Gen, region: RegionId) {
    let probe = if region == VISITOR_B { PROBE_B } else { PROBE };
    g.b.push(region, Op::load(probe).dst(12));
    g.filler(region);
}
