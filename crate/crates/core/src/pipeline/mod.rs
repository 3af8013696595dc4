//! Cycle-approximate out-of-order core driven by a trace.
//!
//! Each simulated cycle runs, in order: branch resolution (with squash of the
//! wrong path), non-speculative marking, in-order commit, oldest-first issue,
//! and fetch/dispatch. Cycles in which nothing can happen are skipped to the
//! next pending event.
//!
//! Wrong-path ops are fetched from the trace after a mispredicted control op
//! and squashed when it resolves. They issue and touch the caches like any
//! other op unless the active policy gates them.

mod policy;
mod stats;

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::alloc::{AllocConfig, HandlerInvocation, LazyAllocator};
use crate::instance::{DecodeCheckpoint, InstId, InstanceTracker, TransferKind, DEFAULT_DEPTH_LIMIT};
use crate::memory::{AccessKind, MemoryConfig, MemoryHierarchy};
use crate::smact::{LookupResult, Smact, SmactGeometry, SourceId};
use crate::trace::{Directive, MicroOp, OpKind, Reg, RegionId, Trace, TraceItem, VirtAddr};

pub use policy::{
    gate_load, wakeup_time, LoadAction, PolicyConfig, PolicyKind, PolicyParseError, SafeBetOptions,
    SourceCoarsening, WakeInputs,
};
pub use stats::{SimStats, SmactSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoreConfig {
    pub width: usize,
    pub issueq: usize,
    pub rob: usize,
}

impl Default for CoreConfig {
    fn default() -> Self {
        CoreConfig { width: 8, issueq: 64, rob: 192 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub policy: PolicyConfig,
    pub core: CoreConfig,
    pub geometry: SmactGeometry,
    pub memory: MemoryConfig,
    pub alloc: AllocConfig,
    pub depth_limit: usize,
}

impl SimConfig {
    pub fn new(policy: PolicyConfig) -> Self {
        SimConfig {
            policy,
            core: CoreConfig::default(),
            geometry: SmactGeometry::default(),
            memory: MemoryConfig::default(),
            alloc: AllocConfig::default(),
            depth_limit: DEFAULT_DEPTH_LIMIT,
        }
    }

    /// The table shape actually simulated: one chunk per slab when the
    /// bitmask is disabled.
    pub fn effective_geometry(&self) -> SmactGeometry {
        if self.policy.is_safebet() && !self.policy.safebet.bitmask_enabled {
            self.geometry.without_bitmask()
        } else {
            self.geometry
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct SimError {
    pub seq: Option<u64>,
    pub msg: String,
}

impl SimError {
    fn at(seq: Option<u64>, msg: impl Into<String>) -> Self {
        SimError { seq, msg: msg.into() }
    }
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(s) => write!(f, "op {s}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IssueEvent<'a> {
    pub seq: u64,
    pub kind: OpKind,
    pub wrong_path: bool,
    pub cycle: u64,
    /// Source registers whose value derives from a secret read on the wrong path.
    pub tainted_srcs: &'a [Reg],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadEvent {
    pub seq: u64,
    pub cycle: u64,
    pub addr: VirtAddr,
    pub wrong_path: bool,
    /// The loaded value was handed to the pipeline at issue.
    pub delivered: bool,
    pub forwarded: bool,
    pub tainted: bool,
    /// SafeBet only.
    pub verdict: Option<LookupResult>,
    pub source: SourceId,
    pub lbtos: Option<SourceId>,
    pub inherit: bool,
}

/// Hooks into a running simulation. Every method defaults to doing nothing.
pub trait Observer {
    fn on_issue(&mut self, _ev: &IssueEvent<'_>) {}
    fn on_load(&mut self, _ev: &LoadEvent) {}
    /// A committed access was recorded in the table under `source`.
    fn on_commit_access(&mut self, _addr: VirtAddr, _source: SourceId) {}
    fn on_revoke(&mut self, _lo: VirtAddr, _len: u64) {}
    fn on_flush(&mut self) {}
    /// A charged revocation handler started at `cycle`.
    fn on_handler(&mut self, _cycle: u64, _cost: u64) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

#[derive(Debug, Clone, Copy)]
struct Transfer {
    kind: TransferKind,
    from: RegionId,
    to: RegionId,
    inst: InstId,
}

type RenameMap = [Option<u64>; 256];

#[derive(Debug, Clone)]
struct Checkpoint {
    rename: Box<RenameMap>,
    decode: DecodeCheckpoint,
}

#[derive(Debug, Clone)]
struct Entry {
    id: u64,
    item: usize,
    inst: InstId,
    region: RegionId,
    srcs: Vec<(Reg, Option<u64>)>,
    issued: bool,
    done_at: u64,
    resolve_at: Option<u64>,
    resolved: bool,
    nonspec_at: Option<u64>,
    gated: bool,
    replay_done: Option<u64>,
    tainted: bool,
    transfer: Option<Transfer>,
    checkpoint: Option<Box<Checkpoint>>,
}

impl Entry {
    fn new(id: u64, item: usize, inst: InstId, region: RegionId) -> Self {
        Entry {
            id,
            item,
            inst,
            region,
            srcs: Vec::new(),
            issued: false,
            done_at: 0,
            resolve_at: None,
            resolved: false,
            nonspec_at: None,
            gated: false,
            replay_done: None,
            tainted: false,
            transfer: None,
            checkpoint: None,
        }
    }
}

/// Consecutive idle steps tolerated before declaring the pipeline stuck.
const IDLE_LIMIT: u32 = 10_000;

pub struct Simulator<'t> {
    trace: &'t Trace,
    cfg: SimConfig,
    /// Region of each op item; directives borrow the previous op's region.
    regions: Vec<RegionId>,
    /// For each item, the index of the first op at or after it.
    next_op: Vec<usize>,
    /// For each item, the index of the first item after it that is not on
    /// the wrong path.
    after_run: Vec<usize>,

    rob: VecDeque<Entry>,
    iq: Vec<u64>,
    rename: Box<RenameMap>,
    next_id: u64,
    fetch_ptr: usize,
    fetch_stalled_on: Option<u64>,
    fetch_resume_at: u64,
    stall_until: u64,
    nonspec_frontier: u64,
    pending_resolve: Vec<u64>,

    tracker: InstanceTracker,
    smact: Smact,
    mem: MemoryHierarchy,
    alloc: LazyAllocator,

    committed: u64,
    replays: u64,
    squashes: u64,
    wp_issued: u64,
    overflows: u64,
    handler_invocations: u64,
    handler_cycles: u64,
    peak_entries: u64,
}

pub fn run(trace: &Trace, cfg: &SimConfig) -> Result<SimStats, SimError> {
    Simulator::new(trace, *cfg)?.run(&mut NoObserver)
}

pub fn run_observed(trace: &Trace, cfg: &SimConfig, obs: &mut dyn Observer) -> Result<SimStats, SimError> {
    Simulator::new(trace, *cfg)?.run(obs)
}

impl<'t> Simulator<'t> {
    pub fn new(trace: &'t Trace, cfg: SimConfig) -> Result<Self, SimError> {
        let items = &trace.items;
        let n = items.len();
        let mut regions = Vec::with_capacity(n);
        let mut last = None;
        for item in items {
            if let TraceItem::Op(op) = item {
                let r = trace
                    .header
                    .region_of(op.pc)
                    .map_err(|e| SimError::at(Some(op.seq), e.to_string()))?;
                last = Some(r);
            }
            regions.push(last.unwrap_or(RegionId(0)));
        }
        let mut next_op = vec![n; n + 1];
        let mut after_run = vec![n; n + 1];
        for i in (0..n).rev() {
            next_op[i] = if items[i].as_op().is_some() { i } else { next_op[i + 1] };
            let next_wp = items.get(i + 1).and_then(TraceItem::as_op).is_some_and(|o| o.wrong_path);
            after_run[i] = if next_wp { after_run[i + 1] } else { i + 1 };
        }
        let root = next_op.first().and_then(|&i| regions.get(i)).copied().unwrap_or(RegionId(0));
        let geometry = cfg.effective_geometry();
        let smact = Smact::new(geometry).map_err(|e| SimError::at(None, e.to_string()))?;
        let mem = MemoryHierarchy::new(cfg.memory).map_err(|e| SimError::at(None, e))?;
        if cfg.core.width == 0 || cfg.core.issueq == 0 || cfg.core.rob == 0 {
            return Err(SimError::at(None, "core widths and capacities must be positive"));
        }
        Ok(Simulator {
            trace,
            regions,
            next_op,
            after_run,
            rob: VecDeque::with_capacity(cfg.core.rob),
            iq: Vec::with_capacity(cfg.core.issueq),
            rename: Box::new([None; 256]),
            next_id: 0,
            fetch_ptr: 0,
            fetch_stalled_on: None,
            fetch_resume_at: 0,
            stall_until: 0,
            nonspec_frontier: 0,
            pending_resolve: Vec::new(),
            tracker: InstanceTracker::new(root, trace.header.owner(), cfg.depth_limit),
            smact,
            mem,
            alloc: LazyAllocator::new(cfg.alloc),
            cfg,
            committed: 0,
            replays: 0,
            squashes: 0,
            wp_issued: 0,
            overflows: 0,
            handler_invocations: 0,
            handler_cycles: 0,
            peak_entries: 0,
        })
    }

    pub fn smact(&self) -> &Smact {
        &self.smact
    }

    pub fn tracker(&self) -> &InstanceTracker {
        &self.tracker
    }

    pub fn allocator(&self) -> &LazyAllocator {
        &self.alloc
    }

    pub fn memory(&self) -> &MemoryHierarchy {
        &self.mem
    }

    pub fn run(&mut self, obs: &mut dyn Observer) -> Result<SimStats, SimError> {
        let mut t = 0u64;
        let mut idle = 0u32;
        loop {
            if self.fetch_ptr >= self.trace.items.len() && self.rob.is_empty() {
                break;
            }
            t = t.max(self.stall_until);
            let mut progress = self.resolve(t, obs);
            self.mark_nonspec(t);
            progress |= self.commit(t, obs)?;
            progress |= self.issue(t, obs);
            progress |= self.dispatch(t, obs)?;
            if progress {
                idle = 0;
                t += 1;
            } else {
                idle += 1;
                if idle > IDLE_LIMIT {
                    let seq = self.rob.front().and_then(|e| self.trace.items[e.item].as_op()).map(|o| o.seq);
                    return Err(SimError::at(seq, "pipeline made no progress"));
                }
                t = self.next_event(t);
            }
        }
        if let Some(inv) = self.alloc.drain() {
            self.run_handler(inv, t, obs);
            t = t.max(self.stall_until);
        }
        let stats = self.smact.stats();
        Ok(SimStats {
            cycles: t,
            committed_instructions: self.committed,
            ipc: if t == 0 { 0.0 } else { self.committed as f64 / t as f64 },
            smact: SmactSummary::from_table(stats, self.replays, self.peak_entries),
            cache: self.mem.stats(),
            handler_invocations: self.handler_invocations,
            handler_cycles: self.handler_cycles,
            squashes: self.squashes,
            wrong_path_issued: self.wp_issued,
            instance_overflows: self.overflows,
        })
    }

    fn op_at(&self, item: usize) -> Option<&'t MicroOp> {
        self.trace.items[item].as_op()
    }

    fn pos(&self, id: u64) -> Option<usize> {
        let head = self.rob.front()?.id;
        let p = id.checked_sub(head)? as usize;
        (p < self.rob.len()).then_some(p)
    }

    fn is_load(&self, e: &Entry) -> bool {
        self.op_at(e.item).is_some_and(|o| o.kind == OpKind::Load)
    }

    fn is_control(&self, e: &Entry) -> bool {
        self.op_at(e.item).is_some_and(|o| o.kind.is_control())
    }

    fn wake_at(&self, e: &Entry) -> Option<u64> {
        if !e.issued {
            return None;
        }
        if !self.is_load(e) {
            return Some(e.done_at);
        }
        wakeup_time(
            &self.cfg.policy,
            WakeInputs {
                issue_done: e.done_at,
                commit: None,
                nonspec: e.nonspec_at,
                gated: e.gated,
                replay_done: e.replay_done,
            },
        )
    }

    /// Whether the value produced by `prod` is available at `t`, and whether
    /// it is tainted.
    fn producer_state(&self, prod: Option<u64>, t: u64) -> (bool, bool) {
        let Some(p) = prod.and_then(|id| self.pos(id)) else {
            return (true, false);
        };
        let e = &self.rob[p];
        (self.wake_at(e).is_some_and(|w| w <= t), e.tainted)
    }

    fn source_of(&self, e: &Entry, pc: VirtAddr) -> SourceId {
        let opts = &self.cfg.policy.safebet;
        let base = if opts.instances_enabled {
            SourceId::from(e.inst)
        } else {
            SourceId::region(e.region)
        };
        match opts.source_coarsening {
            SourceCoarsening::Region => base,
            SourceCoarsening::Instruction => base.with_pc(pc),
        }
    }

    /// `(source, lbtos, inherit, blocked)` for a load about to consult the table.
    fn gate_context(&self, e: &Entry, pc: VirtAddr) -> (SourceId, Option<SourceId>, bool, bool) {
        let opts = &self.cfg.policy.safebet;
        let src = self.source_of(e, pc);
        let (lbtos, owner, blocked) = if opts.instances_enabled {
            let ctx = self.tracker.match_context();
            (ctx.lbtos.map(SourceId::from), ctx.current_is_owner, e.inst != ctx.committed_tos)
        } else {
            let (tos, below) = self.tracker.tos_regions();
            let lbtos = if tos == e.region { below.map(SourceId::region) } else { None };
            (lbtos, Some(e.region) == self.tracker.owner(), false)
        };
        (src, lbtos, owner && opts.inheritance_enabled, blocked)
    }

    fn resolve(&mut self, t: u64, obs: &mut dyn Observer) -> bool {
        if self.pending_resolve.is_empty() {
            return false;
        }
        let mut due: Vec<u64> = self
            .pending_resolve
            .iter()
            .copied()
            .filter(|&id| self.pos(id).is_some_and(|p| self.rob[p].resolve_at.is_some_and(|r| r <= t)))
            .collect();
        if due.is_empty() {
            return false;
        }
        due.sort_unstable();
        for id in due {
            let Some(p) = self.pos(id) else { continue };
            self.rob[p].resolved = true;
            if self.rob[p].checkpoint.is_some() {
                self.squash(id, t, obs);
                break;
            }
        }
        let mut pending = std::mem::take(&mut self.pending_resolve);
        pending.retain(|&id| self.pos(id).is_some_and(|p| !self.rob[p].resolved));
        self.pending_resolve = pending;
        true
    }

    fn squash(&mut self, id: u64, t: u64, obs: &mut dyn Observer) {
        let p = self.pos(id).expect("squashing branch is in flight");
        let cp = self.rob[p].checkpoint.take().expect("mispredicted op has a checkpoint");
        self.rob.truncate(p + 1);
        self.iq.retain(|&x| x <= id);
        self.next_id = id + 1;
        self.rename = cp.rename;
        self.tracker.restore(cp.decode);
        let item = self.rob[p].item;
        let op = self.op_at(item).expect("branch is an op");
        let resume = self.after_run[item];
        if op.kind.is_transfer() {
            let from = self.rob[p].region;
            let to = self.region_of_next_op(resume);
            let tr = self.decode_transfer(op.kind, from, to, obs);
            self.rob[p].transfer = tr;
        }
        self.fetch_ptr = resume;
        self.fetch_stalled_on = None;
        self.fetch_resume_at = t + 1;
        self.nonspec_frontier = self.nonspec_frontier.min(id + 1);
        self.squashes += 1;
    }

    fn region_of_next_op(&self, from_item: usize) -> Option<RegionId> {
        let i = *self.next_op.get(from_item)?;
        (i < self.trace.items.len()).then(|| self.regions[i])
    }

    fn decode_transfer(
        &mut self,
        kind: OpKind,
        from: RegionId,
        to: Option<RegionId>,
        obs: &mut dyn Observer,
    ) -> Option<Transfer> {
        let to = to?;
        if from == to {
            return None;
        }
        let kind = if kind == OpKind::Call { TransferKind::Call } else { TransferKind::Return };
        let out = self.tracker.on_decode_transfer(kind, from, to);
        if out.overflow.is_some() {
            self.overflows += 1;
            if self.cfg.policy.is_safebet() {
                self.smact.flush();
                obs.on_flush();
            }
        }
        Some(Transfer { kind, from, to, inst: out.inst })
    }

    fn mark_nonspec(&mut self, t: u64) {
        let Some(head) = self.rob.front().map(|e| e.id) else { return };
        let mut id = self.nonspec_frontier.max(head);
        while let Some(p) = self.pos(id) {
            let blocking = self.is_control(&self.rob[p]) && !self.rob[p].resolved;
            let e = &mut self.rob[p];
            e.nonspec_at.get_or_insert(t);
            if blocking {
                break;
            }
            id += 1;
        }
        self.nonspec_frontier = id;
    }

    fn commit(&mut self, t: u64, obs: &mut dyn Observer) -> Result<bool, SimError> {
        let mut n = 0;
        let mut replayed = false;
        while n < self.cfg.core.width {
            let Some(e) = self.rob.front() else { break };
            let op = match &self.trace.items[e.item] {
                TraceItem::Directive(d) => {
                    let d = *d;
                    self.rob.pop_front();
                    n += 1;
                    self.exec_directive(d, t, obs)?;
                    if self.stall_until > t {
                        break;
                    }
                    continue;
                }
                TraceItem::Op(op) => op,
            };
            if op.wrong_path {
                return Err(SimError::at(Some(op.seq), "wrong-path op reached commit"));
            }
            if !e.issued || (op.kind.is_control() && !e.resolved) {
                break;
            }
            if e.gated {
                match e.replay_done {
                    None => {
                        // the replay re-executes once the fill has returned
                        if replayed || e.done_at > t {
                            break;
                        }
                        let m = op.mem.expect("load has an address");
                        let r = self.mem.access(m.addr, AccessKind::Load, t);
                        self.rob[0].replay_done = Some(t + r.latency);
                        self.replays += 1;
                        replayed = true;
                        break;
                    }
                    Some(d) if d > t => break,
                    Some(_) => {}
                }
            } else if e.done_at > t {
                break;
            }
            let e = self.rob.pop_front().expect("head exists");
            self.commit_op(op, &e, t, obs);
            n += 1;
        }
        Ok(n > 0 || replayed)
    }

    fn commit_op(&mut self, op: &MicroOp, e: &Entry, t: u64, obs: &mut dyn Observer) {
        if let Some(m) = op.mem {
            if self.cfg.policy.is_safebet() {
                let src = self.source_of(e, op.pc);
                self.smact.insert(m.addr, src);
                obs.on_commit_access(m.addr, src);
                self.peak_entries = self.peak_entries.max(self.smact.valid_entries() as u64);
            }
            if op.kind == OpKind::Store {
                self.mem.access(m.addr, AccessKind::Store, t);
            }
        }
        if let Some(tr) = e.transfer {
            self.tracker.on_commit_transfer(tr.kind, tr.from, tr.to, tr.inst);
        }
        self.committed += 1;
    }

    fn exec_directive(&mut self, d: Directive, t: u64, obs: &mut dyn Observer) -> Result<(), SimError> {
        match d {
            Directive::Malloc { size } => {
                self.alloc.malloc64(size).map_err(|e| SimError::at(None, e.to_string()))?;
            }
            Directive::Free { addr } => {
                let inv = self.alloc.lazy_free(addr).map_err(|e| SimError::at(None, e.to_string()))?;
                if let Some(inv) = inv {
                    self.run_handler(inv, t, obs);
                }
            }
            Directive::SetOwner { region } => self.tracker.set_owner_commit(Some(region)),
        }
        Ok(())
    }

    fn run_handler(&mut self, inv: HandlerInvocation, t: u64, obs: &mut dyn Observer) {
        let p = &self.cfg.policy;
        if p.is_safebet() && p.safebet.revocation_enabled {
            for &(lo, len) in &inv.ranges {
                obs.on_revoke(lo, len);
            }
            let out = self.alloc.revocation_handler(inv, Some(&mut self.smact));
            self.stall_until = self.stall_until.max(t + out.cycles);
            self.handler_invocations += 1;
            self.handler_cycles += out.cycles;
            obs.on_handler(t, out.cycles);
        } else {
            self.alloc.revocation_handler(inv, None);
        }
    }

    fn issue(&mut self, t: u64, obs: &mut dyn Observer) -> bool {
        let Some(head) = self.rob.front().map(|e| e.id) else { return false };
        let mut n = 0;
        let mut i = 0;
        let mut tainted = Vec::new();
        while i < self.iq.len() && n < self.cfg.core.width {
            let id = self.iq[i];
            let p = (id - head) as usize;
            let op = self.op_at(self.rob[p].item).expect("queued entries are ops");
            if op.kind == OpKind::Fence && p != 0 {
                break;
            }
            tainted.clear();
            let mut ready = true;
            for &(reg, prod) in &self.rob[p].srcs {
                let (r, tn) = self.producer_state(prod, t);
                if !r {
                    ready = false;
                    break;
                }
                if tn {
                    tainted.push(reg);
                }
            }
            if !ready {
                i += 1;
                continue;
            }
            self.iq.remove(i);
            self.issue_one(p, op, t, &tainted, obs);
            n += 1;
        }
        n > 0
    }

    fn issue_one(&mut self, p: usize, op: &MicroOp, t: u64, tainted_srcs: &[Reg], obs: &mut dyn Observer) {
        obs.on_issue(&IssueEvent {
            seq: op.seq,
            kind: op.kind,
            wrong_path: op.wrong_path,
            cycle: t,
            tainted_srcs,
        });
        if op.wrong_path {
            self.wp_issued += 1;
        }
        let src_taint = !tainted_srcs.is_empty();
        match op.kind {
            OpKind::Load => self.issue_load(p, op, t, src_taint, obs),
            OpKind::Store => {
                let m = op.mem.expect("store has an address");
                self.mem.access(m.addr, AccessKind::FillOnly, t);
                let e = &mut self.rob[p];
                e.done_at = t + 1;
                e.tainted = src_taint;
            }
            OpKind::Branch | OpKind::Call | OpKind::Return => {
                let after = op.branch.map_or(1, |b| b.resolve_after.max(1)) as u64;
                let e = &mut self.rob[p];
                e.done_at = t + 1;
                e.resolve_at = Some(t + after);
                e.tainted = src_taint;
                self.pending_resolve.push(e.id);
            }
            OpKind::Alu | OpKind::Fence => {
                let e = &mut self.rob[p];
                e.done_at = t + 1;
                e.tainted = src_taint;
            }
        }
        self.rob[p].issued = true;
    }

    fn issue_load(&mut self, p: usize, op: &MicroOp, t: u64, src_taint: bool, obs: &mut dyn Observer) {
        let m = op.mem.expect("load has an address");
        let (lo, hi) = (m.addr.0, m.addr.0 + m.size as u64);
        let secret = op.secret || self.trace.header.is_secret(lo, m.size as u64);
        let taint_source = op.wrong_path && secret;
        let fwd = (0..p).rev().find(|&q| {
            let e = &self.rob[q];
            e.issued
                && self.op_at(e.item).is_some_and(|o| {
                    o.kind == OpKind::Store
                        && o.mem.is_some_and(|s| s.addr.0 < hi && lo < s.addr.0 + s.size as u64)
                })
        });

        let mut verdict = None;
        let mut source = SourceId(0);
        let mut lbtos = None;
        let mut inherit = false;
        let action = if self.cfg.policy.is_safebet() {
            let (src, lb, inh, blocked) = self.gate_context(&self.rob[p], op.pc);
            let v = if blocked {
                match self.smact.classify(m.addr, src, None, false) {
                    LookupResult::Hit => LookupResult::MissInstance,
                    v => v,
                }
            } else {
                self.smact.lookup(m.addr, src, lb, inh)
            };
            self.smact.stats_mut().record(v);
            (verdict, source, lbtos, inherit) = (Some(v), src, lb, inh && !blocked);
            gate_load(&self.cfg.policy, v)
        } else {
            LoadAction::IssueNoGate
        };

        let l1 = self.cfg.memory.l1.hit_latency;
        let delivered = action != LoadAction::IssueFillOnlyWaitCommit;
        let (done, tainted) = if !delivered {
            let r = self.mem.access(m.addr, AccessKind::FillOnly, t);
            (t + r.latency, src_taint || taint_source)
        } else if let Some(q) = fwd {
            (t + l1, src_taint || self.rob[q].tainted)
        } else {
            let r = self.mem.access(m.addr, AccessKind::Load, t);
            (t + r.latency, src_taint || taint_source)
        };
        let e = &mut self.rob[p];
        e.done_at = done;
        e.tainted = tainted;
        e.gated = !delivered;
        obs.on_load(&LoadEvent {
            seq: op.seq,
            cycle: t,
            addr: m.addr,
            wrong_path: op.wrong_path,
            delivered,
            forwarded: delivered && fwd.is_some(),
            tainted,
            verdict,
            source,
            lbtos,
            inherit,
        });
    }

    fn dispatch(&mut self, t: u64, obs: &mut dyn Observer) -> Result<bool, SimError> {
        if t < self.fetch_resume_at {
            return Ok(false);
        }
        let items = &self.trace.items;
        let mut n = 0;
        while n < self.cfg.core.width && self.fetch_ptr < items.len() && self.rob.len() < self.cfg.core.rob {
            let i = self.fetch_ptr;
            let id = self.next_id;
            match &items[i] {
                TraceItem::Directive(d) => {
                    if self.fetch_stalled_on.is_some() {
                        break;
                    }
                    if let Directive::SetOwner { region } = d {
                        self.tracker.set_owner_decode(Some(*region));
                    }
                    let mut e = Entry::new(id, i, self.tracker.current(), self.regions[i]);
                    e.issued = true;
                    e.done_at = t;
                    self.rob.push_back(e);
                }
                TraceItem::Op(op) => {
                    match (self.fetch_stalled_on.is_some(), op.wrong_path) {
                        (true, false) => break,
                        (false, true) => {
                            return Err(SimError::at(
                                Some(op.seq),
                                "wrong-path op without a preceding mispredicted branch",
                            ))
                        }
                        _ => {}
                    }
                    if self.iq.len() >= self.cfg.core.issueq {
                        break;
                    }
                    let region = self.regions[i];
                    let mut e = Entry::new(id, i, self.tracker.current(), region);
                    e.srcs = op.srcs.iter().map(|r| (*r, self.rename[r.0 as usize])).collect();
                    if let Some(d) = op.dst {
                        self.rename[d.0 as usize] = Some(id);
                    }
                    let mispredicted = op.mispredicted() && !op.wrong_path;
                    if mispredicted {
                        e.checkpoint = Some(Box::new(Checkpoint {
                            rename: self.rename.clone(),
                            decode: self.tracker.checkpoint(),
                        }));
                    }
                    if op.kind.is_transfer() {
                        let to = self.region_of_next_op(i + 1);
                        e.transfer = self.decode_transfer(op.kind, region, to, obs);
                    }
                    self.rob.push_back(e);
                    self.iq.push(id);
                    if mispredicted {
                        self.fetch_stalled_on = Some(id);
                    }
                }
            }
            self.next_id += 1;
            self.fetch_ptr += 1;
            n += 1;
        }
        Ok(n > 0)
    }

    fn next_event(&self, t: u64) -> u64 {
        let mut best = u64::MAX;
        let mut consider = |x: u64| {
            if x > t && x < best {
                best = x;
            }
        };
        consider(self.stall_until);
        consider(self.fetch_resume_at);
        for e in &self.rob {
            if !e.issued {
                continue;
            }
            consider(e.done_at);
            if !e.resolved {
                if let Some(r) = e.resolve_at {
                    consider(r);
                }
            }
            if let Some(r) = e.replay_done {
                consider(r);
            }
            if let Some(w) = self.wake_at(e) {
                consider(w);
            }
        }
        if best == u64::MAX {
            t + 1
        } else {
            best
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace_str;

    const HDR: &str = "#region 0 0x40000000 owner\n#region 1 0x80000000\n#data 0x10000 0x100000 0\n";

    fn sim(src: &str, policy: PolicyConfig) -> SimStats {
        let t = parse_trace_str(&format!("{HDR}{src}")).unwrap();
        run(&t, &SimConfig::new(policy)).unwrap()
    }

    fn all_policies() -> Vec<PolicyConfig> {
        vec![
            PolicyConfig::baseline(),
            PolicyConfig::nda_restrictive(),
            PolicyConfig::nda_permissive(0),
            PolicyConfig::nda_permissive(4),
            PolicyConfig::safebet(),
        ]
    }

    #[test]
    fn empty_trace() {
        let s = sim("", PolicyConfig::baseline());
        assert_eq!((s.cycles, s.committed_instructions), (0, 0));
    }

    #[test]
    fn alu_chain_is_policy_independent() {
        let mut src = String::new();
        for i in 0..100u64 {
            src.push_str(&format!("{} alu pc={:#x} src=r1 dst=r1\n", i + 1, 0x4000_0000 + 4 * i));
        }
        let base = sim(&src, PolicyConfig::baseline());
        assert!(base.cycles >= 100 && base.cycles <= 105, "{}", base.cycles);
        for p in all_policies() {
            assert_eq!(sim(&src, p).cycles, base.cycles, "{p}");
        }
    }

    const WARM: &str = "1 load pc=0x40000000 ea=0x10000,8 dst=r1\n\
                        2 alu pc=0x40000004 src=r1 dst=r2\n\
                        3 fence pc=0x40000008\n\
                        4 load pc=0x4000000c ea=0x10008,8 dst=r3\n\
                        5 alu pc=0x40000010 src=r3 dst=r4\n";

    #[test]
    fn warm_table_costs_nothing() {
        let b = sim(WARM, PolicyConfig::baseline());
        let s = sim(WARM, PolicyConfig::safebet());
        assert_eq!(s.smact.total_miss, 1);
        assert_eq!(s.smact.hits, 1);
        // the first load misses in both caches and table; its replay hits L1
        assert_eq!(s.cycles, b.cycles + 4);
    }

    #[test]
    fn cold_load_waits_for_commit_and_replays() {
        let src = "1 load pc=0x40000000 ea=0x10000,8 dst=r1\n2 alu pc=0x40000004 src=r1 dst=r2\n";
        let b = sim(src, PolicyConfig::baseline());
        let s = sim(src, PolicyConfig::safebet());
        // dispatch 0, issue 1, fill lands at 201; the replay then hits L1 and commits at 205
        assert_eq!(b.cycles, 203);
        assert_eq!(s.cycles, 207);
        assert_eq!(s.smact.replays, 1);
        assert_eq!(s.smact.miss_slab, 1);
    }

    #[test]
    fn nda_restrictive_waits_for_commit() {
        // an older slow branch keeps the load from committing
        let src = "1 branch pc=0x40000000 br pred=n actual=n resolve=150\n\
                   2 load pc=0x40000004 ea=0x10000,8 dst=r1\n\
                   3 alu pc=0x40000008 src=r1 dst=r2\n";
        let b = sim(src, PolicyConfig::baseline());
        let r = sim(src, PolicyConfig::nda_restrictive());
        let p4 = sim(src, PolicyConfig::nda_permissive(4));
        assert!(b.cycles <= p4.cycles && p4.cycles <= r.cycles);
    }

    #[test]
    fn misprediction_squashes_wrong_path() {
        let src = "1 branch pc=0x40000000 br pred=t actual=n resolve=20\n\
                   2 load pc=0x40000100 ea=0x20000,8 dst=r1 wp\n\
                   3 alu pc=0x40000104 src=r1 dst=r2 wp\n\
                   4 alu pc=0x40000004\n";
        let s = sim(src, PolicyConfig::baseline());
        assert_eq!(s.committed_instructions, 2);
        assert_eq!(s.squashes, 1);
        // the wrong-path consumer never sees its slow producer before the squash
        assert_eq!(s.wrong_path_issued, 1);
    }

    #[test]
    fn wrong_path_never_inserts() {
        let src = "1 branch pc=0x40000000 br pred=t actual=n resolve=20\n\
                   2 load pc=0x40000100 ea=0x20000,8 dst=r1 wp\n\
                   3 alu pc=0x40000004\n";
        let t = parse_trace_str(&format!("{HDR}{src}")).unwrap();
        let mut s = Simulator::new(&t, SimConfig::new(PolicyConfig::safebet())).unwrap();
        s.run(&mut NoObserver).unwrap();
        assert_eq!(s.smact().valid_entries(), 0);
        assert_eq!(s.smact().stats().lookups, 1);
    }

    #[test]
    fn crossing_call_enters_new_instance() {
        let src = "1 load pc=0x40000000 ea=0x10000,8 dst=r1\n\
                   2 call pc=0x40000004\n\
                   3 fence pc=0x80000000\n\
                   4 load pc=0x80000004 ea=0x10000,8 dst=r2\n\
                   5 return pc=0x80000008\n\
                   6 fence pc=0x40000008\n\
                   7 load pc=0x4000000c ea=0x10000,8 dst=r3\n";
        let s = sim(src, PolicyConfig::safebet());
        // callee misses on the caller's data; after a visitor return the owner is a new instance
        assert_eq!(s.smact.hits + s.smact.inherited_hits, 0);
        assert_eq!(s.smact.total_miss, 3);
        let s = sim(src, "safebet+no-instances".parse().unwrap());
        assert_eq!(s.smact.total_miss, 2);
    }

    #[test]
    fn handler_stalls_core_only_with_revocation() {
        let src = "! malloc 4194304\n1 alu pc=0x40000000\n! free 0x100000000000\n2 alu pc=0x40000004\n";
        let s = sim(src, PolicyConfig::safebet());
        assert_eq!(s.handler_invocations, 1);
        assert_eq!(s.handler_cycles, 10_000);
        assert!(s.cycles > 10_000);
        let b = sim(src, PolicyConfig::baseline());
        assert_eq!(b.handler_invocations, 0);
        assert!(b.cycles < 20);
    }

    #[test]
    fn end_of_trace_drain() {
        let src = "! malloc 64\n1 alu pc=0x40000000\n! free 0x100000000000\n";
        let s = sim(src, PolicyConfig::safebet());
        assert_eq!(s.handler_invocations, 1);
    }

    #[test]
    fn deterministic() {
        let a = sim(WARM, PolicyConfig::safebet());
        let b = sim(WARM, PolicyConfig::safebet());
        assert_eq!(a, b);
    }
}
