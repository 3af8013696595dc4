//! Attack scenarios, synthetic workloads, and monitors that decide whether a
//! run leaked.
//!
//! A leak is a wrong-path op issuing with an operand derived from a secret
//! that a wrong-path load read. The gate monitor separately checks that no
//! wrong-path load was handed data the unbounded permission history would
//! have refused.

pub mod builder;
pub mod scenario;
pub mod synthetic;

use serde::{Deserialize, Serialize};

use crate::pipeline::{run_observed, IssueEvent, LoadEvent, Observer, SimConfig, SimError, SimStats};
use crate::smact::oracle::{oracle_permitted, PermissionHistory};
use crate::smact::SourceId;
use crate::trace::{Reg, Trace, VirtAddr};

pub use builder::{Op, TraceBuilder, OWNER, REGION_BASES, VISITOR_A, VISITOR_B};
pub use scenario::{generate, Scenario, ScenarioError, ScenarioKind, ScenarioSpec};
pub use synthetic::{synthesize, SyntheticKind};

/// First op observed transmitting a secret-derived operand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakWitness {
    pub seq: u64,
    pub reg: Reg,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakVerdict {
    pub leaked: bool,
    pub witness: Option<LeakWitness>,
}

#[derive(Debug, Default)]
pub struct LeakMonitor {
    witness: Option<LeakWitness>,
    transmissions: u64,
}

impl LeakMonitor {
    pub fn verdict(&self) -> LeakVerdict {
        LeakVerdict { leaked: self.witness.is_some(), witness: self.witness }
    }

    pub fn transmissions(&self) -> u64 {
        self.transmissions
    }
}

impl Observer for LeakMonitor {
    fn on_issue(&mut self, ev: &IssueEvent<'_>) {
        if let Some(&reg) = ev.tainted_srcs.first() {
            self.transmissions += 1;
            self.witness.get_or_insert(LeakWitness { seq: ev.seq, reg });
        }
    }
}

/// Replays every committed access into an unbounded history and flags any
/// wrong-path load whose data was delivered without the history's consent.
#[derive(Debug)]
pub struct GateMonitor {
    history: PermissionHistory,
    violations: Vec<u64>,
    checked: u64,
}

impl GateMonitor {
    pub fn new(chunk_bytes: u64) -> Self {
        GateMonitor { history: PermissionHistory::new(chunk_bytes), violations: Vec::new(), checked: 0 }
    }

    /// Sequence numbers of offending loads.
    pub fn violations(&self) -> &[u64] {
        &self.violations
    }

    /// Wrong-path loads that consulted the table.
    pub fn checked(&self) -> u64 {
        self.checked
    }
}

impl Observer for GateMonitor {
    fn on_load(&mut self, ev: &LoadEvent) {
        if !ev.wrong_path || ev.verdict.is_none() {
            return;
        }
        self.checked += 1;
        let lbtos = if ev.inherit { ev.lbtos } else { None };
        if ev.delivered && !oracle_permitted(&self.history, ev.addr, ev.source, lbtos, ev.inherit) {
            self.violations.push(ev.seq);
        }
    }

    fn on_commit_access(&mut self, addr: VirtAddr, source: SourceId) {
        self.history.commit(addr, source);
    }

    fn on_revoke(&mut self, lo: VirtAddr, len: u64) {
        self.history.revoke(lo, len);
    }

    fn on_flush(&mut self) {
        self.history.clear();
    }
}

/// Fans every event out to both monitors.
#[derive(Debug)]
pub struct SecurityMonitor {
    pub leak: LeakMonitor,
    pub gate: GateMonitor,
}

impl SecurityMonitor {
    pub fn new(chunk_bytes: u64) -> Self {
        SecurityMonitor { leak: LeakMonitor::default(), gate: GateMonitor::new(chunk_bytes) }
    }
}

impl Observer for SecurityMonitor {
    fn on_issue(&mut self, ev: &IssueEvent<'_>) {
        self.leak.on_issue(ev);
    }

    fn on_load(&mut self, ev: &LoadEvent) {
        self.gate.on_load(ev);
    }

    fn on_commit_access(&mut self, addr: VirtAddr, source: SourceId) {
        self.gate.on_commit_access(addr, source);
    }

    fn on_revoke(&mut self, lo: VirtAddr, len: u64) {
        self.gate.on_revoke(lo, len);
    }

    fn on_flush(&mut self) {
        self.gate.on_flush();
    }
}

#[derive(Debug, Clone)]
pub struct SecurityReport {
    pub verdict: LeakVerdict,
    pub gate_violations: Vec<u64>,
    pub stats: SimStats,
}

/// Runs `trace` under `cfg` with both monitors attached.
pub fn check_security(trace: &Trace, cfg: &SimConfig) -> Result<SecurityReport, SimError> {
    let mut mon = SecurityMonitor::new(cfg.effective_geometry().chunk_bytes);
    let stats = run_observed(trace, cfg, &mut mon)?;
    Ok(SecurityReport { verdict: mon.leak.verdict(), gate_violations: mon.gate.violations, stats })
}

pub fn check_leak(trace: &Trace, cfg: &SimConfig) -> Result<LeakVerdict, SimError> {
    let mut mon = LeakMonitor::default();
    run_observed(trace, cfg, &mut mon)?;
    Ok(mon.verdict())
}
