//! Dynamic instances of regions.
//!
//! Every region-crossing call or return opens a new instance except a return
//! from the owner, which lets the caller keep its instance. IDs come from a
//! 22-bit counter bumped at decode; the instance stack changes only at commit.
//! The decode side keeps its own speculative copy of the stack so that ops
//! after a retaining return are tagged with the caller's old instance; that
//! copy is checkpointed per branch and restored on squash.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::RegionId;

pub const INST_BITS: u32 = 22;
pub const INST_MASK: u32 = (1 << INST_BITS) - 1;
pub const DEFAULT_DEPTH_LIMIT: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct InstId(pub u32);

impl fmt::Display for InstId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferKind {
    Call,
    Return,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransferClass {
    pub new_instance: bool,
    pub inherit: bool,
    pub retain: bool,
    pub purge: bool,
}

/// Outcome of a region-crossing transfer per the call/return table.
/// `from` and `to` must differ.
pub fn classify_transfer(
    kind: TransferKind,
    from: RegionId,
    to: RegionId,
    owner: Option<RegionId>,
) -> TransferClass {
    debug_assert_ne!(from, to);
    match kind {
        TransferKind::Call if Some(to) == owner => {
            TransferClass { new_instance: true, inherit: true, ..Default::default() }
        }
        TransferKind::Call => TransferClass { new_instance: true, ..Default::default() },
        TransferKind::Return if Some(from) == owner => {
            TransferClass { retain: true, ..Default::default() }
        }
        TransferKind::Return => TransferClass { new_instance: true, purge: true, ..Default::default() },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub region: RegionId,
    pub inst: InstId,
}

/// The counter wrapped; every permission recorded under earlier IDs must be
/// dropped before the new ID is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverflowEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOutcome {
    pub inst: InstId,
    pub overflow: Option<OverflowEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchContext {
    pub current: InstId,
    pub committed_tos: InstId,
    pub lbtos: Option<InstId>,
    pub current_is_owner: bool,
}

/// A bounded stack that drops its bottom frame on overflow. `shadow` counts
/// logical depth, so it exceeds the physical depth after a drop and the
/// mismatch reveals the underflow.
#[derive(Debug, Clone, PartialEq, Eq)]
struct FrameStack {
    frames: VecDeque<Frame>,
    shadow: usize,
    limit: usize,
}

impl FrameStack {
    fn new(root: Frame, limit: usize) -> Self {
        let mut frames = VecDeque::with_capacity(limit.min(64));
        frames.push_back(root);
        FrameStack { frames, shadow: 1, limit: limit.max(1) }
    }

    fn tos(&self) -> Frame {
        *self.frames.back().expect("stack never empty")
    }

    fn push(&mut self, f: Frame) {
        if self.frames.len() == self.limit {
            self.frames.pop_front();
        }
        self.frames.push_back(f);
        self.shadow += 1;
    }

    fn reset(&mut self, f: Frame) {
        self.frames.clear();
        self.frames.push_back(f);
        self.shadow = 1;
    }

    /// Pops to the caller frame if it exists and is in `to`; returns it.
    fn pop_retaining(&mut self, to: RegionId) -> Option<Frame> {
        let n = self.frames.len();
        if n < 2 || self.shadow != n || self.frames[n - 2].region != to {
            return None;
        }
        self.frames.pop_back();
        self.shadow -= 1;
        Some(self.tos())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeCheckpoint {
    current: InstId,
    stack: FrameStack,
    owner: Option<RegionId>,
}

#[derive(Debug, Clone)]
pub struct InstanceTracker {
    counter: u32,
    committed: FrameStack,
    owner: Option<RegionId>,
    spec: FrameStack,
    spec_current: InstId,
    spec_owner: Option<RegionId>,
    overflows: u64,
}

impl InstanceTracker {
    /// Execution starts in `root` under instance 1.
    pub fn new(root: RegionId, owner: Option<RegionId>, depth_limit: usize) -> Self {
        let frame = Frame { region: root, inst: InstId(1) };
        InstanceTracker {
            counter: 1,
            committed: FrameStack::new(frame, depth_limit),
            owner,
            spec: FrameStack::new(frame, depth_limit),
            spec_current: frame.inst,
            spec_owner: owner,
            overflows: 0,
        }
    }

    /// Forces the next ID handed out; for exercising wrap-around.
    pub fn set_counter(&mut self, value: u32) {
        self.counter = value & INST_MASK;
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }

    pub fn overflows(&self) -> u64 {
        self.overflows
    }

    pub fn owner(&self) -> Option<RegionId> {
        self.owner
    }

    pub fn shadow(&self) -> usize {
        self.committed.shadow
    }

    pub fn depth(&self) -> usize {
        self.committed.frames.len()
    }

    pub fn stack(&self) -> Vec<Frame> {
        self.committed.frames.iter().copied().collect()
    }

    /// Regions of the committed top frame and the frame below it.
    pub fn tos_regions(&self) -> (RegionId, Option<RegionId>) {
        let n = self.committed.frames.len();
        (self.committed.tos().region, (n >= 2).then(|| self.committed.frames[n - 2].region))
    }

    pub fn current(&self) -> InstId {
        self.spec_current
    }

    fn next_id(&mut self) -> DecodeOutcome {
        self.counter = (self.counter + 1) & INST_MASK;
        let overflow = if self.counter == 0 {
            self.overflows += 1;
            Some(OverflowEvent)
        } else {
            None
        };
        DecodeOutcome { inst: InstId(self.counter), overflow }
    }

    /// A region-crossing transfer was decoded. Always consumes a fresh ID;
    /// the returned `inst` tags the ops decoded after the transfer and is the
    /// retained caller instance when the return retains.
    pub fn on_decode_transfer(&mut self, kind: TransferKind, from: RegionId, to: RegionId) -> DecodeOutcome {
        let mut out = self.next_id();
        let class = classify_transfer(kind, from, to, self.spec_owner);
        let fresh = Frame { region: to, inst: out.inst };
        match kind {
            TransferKind::Call => self.spec.push(fresh),
            TransferKind::Return => match class.retain.then(|| self.spec.pop_retaining(to)).flatten() {
                Some(caller) => out.inst = caller.inst,
                None => self.spec.reset(fresh),
            },
        }
        self.spec_current = out.inst;
        out
    }

    /// The transfer decoded with `decoded` reached commit.
    pub fn on_commit_transfer(&mut self, kind: TransferKind, from: RegionId, to: RegionId, decoded: InstId) {
        let class = classify_transfer(kind, from, to, self.owner);
        let fresh = Frame { region: to, inst: decoded };
        match kind {
            TransferKind::Call => self.committed.push(fresh),
            TransferKind::Return => {
                let retained = class.retain.then(|| self.committed.pop_retaining(to)).flatten();
                if retained.is_none() {
                    self.committed.reset(fresh);
                }
            }
        }
    }

    pub fn set_owner_decode(&mut self, owner: Option<RegionId>) {
        self.spec_owner = owner;
    }

    pub fn set_owner_commit(&mut self, owner: Option<RegionId>) {
        self.owner = owner;
    }

    pub fn match_context(&self) -> MatchContext {
        let n = self.committed.frames.len();
        let tos = self.committed.tos();
        MatchContext {
            current: self.spec_current,
            committed_tos: tos.inst,
            lbtos: (n >= 2).then(|| self.committed.frames[n - 2].inst),
            current_is_owner: Some(tos.region) == self.owner,
        }
    }

    pub fn checkpoint(&self) -> DecodeCheckpoint {
        DecodeCheckpoint {
            current: self.spec_current,
            stack: self.spec.clone(),
            owner: self.spec_owner,
        }
    }

    /// Rolls the decode side back; the counter keeps its value.
    pub fn restore(&mut self, cp: DecodeCheckpoint) {
        self.spec_current = cp.current;
        self.spec = cp.stack;
        self.spec_owner = cp.owner;
    }

    /// `inst ctr=<n> shadow=<n> stack=[(r,i),...] owner=<r>`
    pub fn dump(&self) -> String {
        let frames: Vec<String> = self
            .committed
            .frames
            .iter()
            .map(|f| format!("({},{})", f.region.0, f.inst.0))
            .collect();
        let owner = self.owner.map_or_else(|| "-".to_string(), |r| r.0.to_string());
        format!(
            "inst ctr={} shadow={} stack=[{}] owner={}",
            self.counter,
            self.committed.shadow,
            frames.join(","),
            owner
        )
    }
}
