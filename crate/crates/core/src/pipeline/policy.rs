use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::smact::LookupResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceCoarsening {
    /// One source per dynamic instance of a region.
    Region,
    /// One source per static instruction within an instance.
    Instruction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SafeBetOptions {
    pub bitmask_enabled: bool,
    pub source_coarsening: SourceCoarsening,
    pub inheritance_enabled: bool,
    /// When off, sources are static regions and never change on crossings.
    pub instances_enabled: bool,
    /// When off, lazily freed memory is reclaimed without touching the table.
    pub revocation_enabled: bool,
}

impl Default for SafeBetOptions {
    fn default() -> Self {
        SafeBetOptions {
            bitmask_enabled: true,
            source_coarsening: SourceCoarsening::Region,
            inheritance_enabled: true,
            instances_enabled: true,
            revocation_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    Baseline,
    NdaRestrictive,
    /// Dependents wake `k` cycles after the load stops being speculative.
    NdaPermissive(u32),
    SafeBet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub safebet: SafeBetOptions,
}

impl PolicyConfig {
    pub fn baseline() -> Self {
        Self::of(PolicyKind::Baseline)
    }

    pub fn nda_restrictive() -> Self {
        Self::of(PolicyKind::NdaRestrictive)
    }

    pub fn nda_permissive(k: u32) -> Self {
        Self::of(PolicyKind::NdaPermissive(k))
    }

    pub fn safebet() -> Self {
        Self::of(PolicyKind::SafeBet)
    }

    pub fn safebet_with(opts: SafeBetOptions) -> Self {
        PolicyConfig { kind: PolicyKind::SafeBet, safebet: opts }
    }

    fn of(kind: PolicyKind) -> Self {
        PolicyConfig { kind, safebet: SafeBetOptions::default() }
    }

    pub fn is_safebet(&self) -> bool {
        self.kind == PolicyKind::SafeBet
    }

    /// SafeBet with every mechanism on.
    pub fn is_full_safebet(&self) -> bool {
        self.is_safebet() && self.safebet == SafeBetOptions::default()
    }

    pub fn is_baseline(&self) -> bool {
        self.kind == PolicyKind::Baseline
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown policy `{0}`")]
pub struct PolicyParseError(pub String);

impl fmt::Display for PolicyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PolicyKind::Baseline => f.write_str("baseline"),
            PolicyKind::NdaRestrictive => f.write_str("nda-restrictive"),
            PolicyKind::NdaPermissive(k) => write!(f, "nda-permissive-{k}"),
            PolicyKind::SafeBet => {
                f.write_str("safebet")?;
                let o = &self.safebet;
                if !o.bitmask_enabled {
                    f.write_str("+no-bitmask")?;
                }
                if o.source_coarsening == SourceCoarsening::Instruction {
                    f.write_str("+insn-source")?;
                }
                if !o.inheritance_enabled {
                    f.write_str("+no-inheritance")?;
                }
                if !o.instances_enabled {
                    f.write_str("+no-instances")?;
                }
                if !o.revocation_enabled {
                    f.write_str("+no-revocation")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for PolicyConfig {
    type Err = PolicyParseError;

    /// `baseline`, `nda-restrictive`, `nda-permissive-<k>`, or `safebet`
    /// followed by any of `+no-bitmask`, `+insn-source`, `+no-inheritance`,
    /// `+no-instances`, `+no-revocation`.
    fn from_str(s: &str) -> Result<Self, PolicyParseError> {
        let bad = || PolicyParseError(s.to_string());
        let mut parts = s.trim().split('+');
        let head = parts.next().ok_or_else(bad)?;
        let mut p = match head {
            "baseline" => Self::baseline(),
            "nda-restrictive" => Self::nda_restrictive(),
            "safebet" => Self::safebet(),
            _ => match head.strip_prefix("nda-permissive-") {
                Some(k) => Self::nda_permissive(k.parse().map_err(|_| bad())?),
                None => return Err(bad()),
            },
        };
        for flag in parts {
            if !p.is_safebet() {
                return Err(bad());
            }
            let o = &mut p.safebet;
            match flag {
                "no-bitmask" => o.bitmask_enabled = false,
                "insn-source" => o.source_coarsening = SourceCoarsening::Instruction,
                "no-inheritance" => o.inheritance_enabled = false,
                "no-instances" => o.instances_enabled = false,
                "no-revocation" => o.revocation_enabled = false,
                _ => return Err(bad()),
            }
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadAction {
    IssueNormal,
    /// Fill the cache but deliver nothing; the load replays at commit.
    IssueFillOnlyWaitCommit,
    IssueNoGate,
}

pub fn gate_load(policy: &PolicyConfig, verdict: LookupResult) -> LoadAction {
    match policy.kind {
        PolicyKind::SafeBet if verdict.is_hit() => LoadAction::IssueNormal,
        PolicyKind::SafeBet => LoadAction::IssueFillOnlyWaitCommit,
        _ => LoadAction::IssueNoGate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WakeInputs {
    /// Cycle the loaded value is available.
    pub issue_done: u64,
    /// Cycle the load commits, once known.
    pub commit: Option<u64>,
    /// Cycle every older branch had resolved, once known.
    pub nonspec: Option<u64>,
    /// SafeBet only: the load missed and completes at this replay cycle.
    pub gated: bool,
    pub replay_done: Option<u64>,
}

/// Earliest cycle dependents of a load may wake, or `None` while unknown.
pub fn wakeup_time(policy: &PolicyConfig, w: WakeInputs) -> Option<u64> {
    let done = w.issue_done;
    match policy.kind {
        PolicyKind::Baseline => Some(done),
        PolicyKind::NdaRestrictive => w.commit.map(|c| c.max(done)),
        PolicyKind::NdaPermissive(k) => {
            let safe = match (w.nonspec.map(|n| n + k as u64), w.commit) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            safe.map(|s| s.max(done))
        }
        PolicyKind::SafeBet if w.gated => w.replay_done.or(w.commit),
        PolicyKind::SafeBet => Some(done),
    }
}
