//! Instruction traces consumed by the pipeline.
//!
//! A trace is an oracle-style record of everything the front end fetches,
//! including the wrong-path instructions that follow a mispredicted branch.
//! Code lives in large aligned regions (one per trust domain); data ranges
//! and secret locations are declared up front in the header.

mod parse;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse_trace, parse_trace_str, TraceError};
pub use validate::{validate_trace, Diagnostic, DiagnosticKind};

/// Default code-region granularity: 1 GB.
pub const DEFAULT_REGION_BITS: u32 = 30;

/// Number of architectural registers addressable as `r0..r63`.
pub const NUM_REGS: usize = 64;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub struct VirtAddr(pub u64);

impl VirtAddr {
    pub const fn new(v: u64) -> Self {
        VirtAddr(v)
    }

    pub const fn get(self) -> u64 {
        self.0
    }

    pub const fn offset(self, by: u64) -> Self {
        VirtAddr(self.0.wrapping_add(by))
    }
}

impl From<u64> for VirtAddr {
    fn from(v: u64) -> Self {
        VirtAddr(v)
    }
}

impl fmt::Display for VirtAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
pub struct RegionId(pub u16);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A code region: one aligned block of the address space owned by one trust
/// domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub base: VirtAddr,
    pub is_owner: bool,
}

/// Half-open data range `[lo, hi)` belonging to a region's sandbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRange {
    pub lo: VirtAddr,
    pub hi: VirtAddr,
    pub region: RegionId,
}

impl DataRange {
    pub fn contains(&self, addr: u64, size: u64) -> bool {
        addr >= self.lo.0 && addr.saturating_add(size) <= self.hi.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretRange {
    pub addr: VirtAddr,
    pub len: u64,
}

impl SecretRange {
    pub fn overlaps(&self, addr: u64, size: u64) -> bool {
        let end = self.addr.0.saturating_add(self.len);
        addr < end && addr.saturating_add(size.max(1)) > self.addr.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    /// log2 of the code-region size.
    pub region_bits: u32,
    pub regions: Vec<Region>,
    pub data: Vec<DataRange>,
    pub secrets: Vec<SecretRange>,
}

impl Default for TraceHeader {
    fn default() -> Self {
        TraceHeader {
            region_bits: DEFAULT_REGION_BITS,
            regions: Vec::new(),
            data: Vec::new(),
            secrets: Vec::new(),
        }
    }
}

impl TraceHeader {
    pub fn owner(&self) -> Option<RegionId> {
        self.regions.iter().find(|r| r.is_owner).map(|r| r.id)
    }

    pub fn region_of(&self, pc: VirtAddr) -> Result<RegionId, RegionError> {
        region_of(pc, &self.regions, self.region_bits)
    }

    pub fn is_secret(&self, addr: u64, size: u64) -> bool {
        self.secrets.iter().any(|s| s.overlaps(addr, size))
    }

    pub fn in_data_space(&self, addr: u64, size: u64) -> bool {
        self.data.iter().any(|d| d.contains(addr, size))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegionError {
    #[error("no regions declared")]
    NoRegions,
    #[error("pc {0} lies outside every declared region")]
    Unmapped(VirtAddr),
}

/// Maps a code address to the region whose aligned block contains it.
///
/// This is a comparison of the address bits above `region_bits`; nothing else
/// about the address matters.
pub fn region_of(
    pc: VirtAddr,
    regions: &[Region],
    region_bits: u32,
) -> Result<RegionId, RegionError> {
    if regions.is_empty() {
        return Err(RegionError::NoRegions);
    }
    let block = pc.0 >> region_bits;
    regions
        .iter()
        .find(|r| r.base.0 >> region_bits == block)
        .map(|r| r.id)
        .ok_or(RegionError::Unmapped(pc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Load,
    Store,
    Branch,
    Call,
    Return,
    Alu,
    Fence,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Load => "load",
            OpKind::Store => "store",
            OpKind::Branch => "branch",
            OpKind::Call => "call",
            OpKind::Return => "return",
            OpKind::Alu => "alu",
            OpKind::Fence => "fence",
        }
    }

    pub fn is_memory(self) -> bool {
        matches!(self, OpKind::Load | OpKind::Store)
    }

    pub fn is_control(self) -> bool {
        matches!(self, OpKind::Branch | OpKind::Call | OpKind::Return)
    }

    pub fn is_transfer(self) -> bool {
        matches!(self, OpKind::Call | OpKind::Return)
    }
}

impl std::str::FromStr for OpKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "load" => OpKind::Load,
            "store" => OpKind::Store,
            "branch" => OpKind::Branch,
            "call" => OpKind::Call,
            "return" => OpKind::Return,
            "alu" => OpKind::Alu,
            "fence" => OpKind::Fence,
            _ => return Err(()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Reg(pub u8);

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemRef {
    pub addr: VirtAddr,
    pub size: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchInfo {
    pub predicted_taken: bool,
    pub actual_taken: bool,
    /// Cycles from issue until the outcome is known.
    pub resolve_after: u32,
}

impl BranchInfo {
    pub fn mispredicted(&self) -> bool {
        self.predicted_taken != self.actual_taken
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroOp {
    pub seq: u64,
    pub kind: OpKind,
    pub pc: VirtAddr,
    pub mem: Option<MemRef>,
    pub srcs: Vec<Reg>,
    pub dst: Option<Reg>,
    pub branch: Option<BranchInfo>,
    /// Fetched under a misprediction; squashed at the branch's resolution.
    pub wrong_path: bool,
    /// The value this op loads is the scenario's secret.
    pub secret: bool,
}

impl MicroOp {
    pub fn new(seq: u64, kind: OpKind, pc: VirtAddr) -> Self {
        MicroOp {
            seq,
            kind,
            pc,
            mem: None,
            srcs: Vec::new(),
            dst: None,
            branch: None,
            wrong_path: false,
            secret: false,
        }
    }

    pub fn mispredicted(&self) -> bool {
        self.branch.is_some_and(|b| b.mispredicted())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Directive {
    Malloc { size: u64 },
    Free { addr: VirtAddr },
    SetOwner { region: RegionId },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceItem {
    Op(MicroOp),
    Directive(Directive),
}

impl TraceItem {
    pub fn as_op(&self) -> Option<&MicroOp> {
        match self {
            TraceItem::Op(op) => Some(op),
            TraceItem::Directive(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Trace {
    pub header: TraceHeader,
    pub items: Vec<TraceItem>,
}

impl Trace {
    pub fn ops(&self) -> impl Iterator<Item = &MicroOp> + '_ {
        self.items.iter().filter_map(TraceItem::as_op)
    }

    pub fn region_of(&self, pc: VirtAddr) -> Result<RegionId, RegionError> {
        self.header.region_of(pc)
    }

    /// Renders the trace in its line-oriented text form.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let h = &self.header;
        if h.region_bits != DEFAULT_REGION_BITS {
            writeln!(f, "#region-bits {}", h.region_bits)?;
        }
        for r in &h.regions {
            write!(f, "#region {} {}", r.id, r.base)?;
            if r.is_owner {
                f.write_str(" owner")?;
            }
            writeln!(f)?;
        }
        for d in &h.data {
            writeln!(f, "#data {} {} {}", d.lo, d.hi, d.region)?;
        }
        for s in &h.secrets {
            writeln!(f, "#secret {} {}", s.addr, s.len)?;
        }
        for item in &self.items {
            match item {
                TraceItem::Op(op) => writeln!(f, "{op}")?,
                TraceItem::Directive(d) => writeln!(f, "{d}")?,
            }
        }
        Ok(())
    }
}

impl fmt::Display for MicroOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} pc={}", self.seq, self.kind.as_str(), self.pc)?;
        if let Some(m) = self.mem {
            write!(f, " ea={},{}", m.addr, m.size)?;
        }
        if !self.srcs.is_empty() {
            f.write_str(" src=")?;
            for (i, r) in self.srcs.iter().enumerate() {
                if i > 0 {
                    f.write_str(",")?;
                }
                write!(f, "{r}")?;
            }
        }
        if let Some(d) = self.dst {
            write!(f, " dst={d}")?;
        }
        if let Some(b) = self.branch {
            let tn = |x: bool| if x { 't' } else { 'n' };
            write!(
                f,
                " br pred={} actual={} resolve={}",
                tn(b.predicted_taken),
                tn(b.actual_taken),
                b.resolve_after
            )?;
        }
        if self.wrong_path {
            f.write_str(" wp")?;
        }
        if self.secret {
            f.write_str(" secret")?;
        }
        Ok(())
    }
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Malloc { size } => write!(f, "! malloc {size}"),
            Directive::Free { addr } => write!(f, "! free {addr}"),
            Directive::SetOwner { region } => write!(f, "! set-owner {region}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regions() -> Vec<Region> {
        vec![
            Region { id: RegionId(0), base: VirtAddr(0x4000_0000), is_owner: true },
            Region { id: RegionId(1), base: VirtAddr(0x8000_0000), is_owner: false },
        ]
    }

    #[test]
    fn region_of_base_and_last_byte() {
        let rs = regions();
        assert_eq!(region_of(VirtAddr(0x4000_0000), &rs, 30), Ok(RegionId(0)));
        assert_eq!(
            region_of(VirtAddr(0x4000_0000 + (1 << 30) - 1), &rs, 30),
            Ok(RegionId(0))
        );
    }

    #[test]
    fn region_of_next_block_is_next_region() {
        let rs = regions();
        let pc = VirtAddr(0x4000_0000 + (1 << 30));
        // independent check: compare the upper bits directly
        let expected = rs.iter().find(|r| r.base.0 / (1u64 << 30) == pc.0 / (1u64 << 30));
        assert_eq!(expected.map(|r| r.id), Some(RegionId(1)));
        assert_eq!(region_of(pc, &rs, 30), Ok(RegionId(1)));
    }

    #[test]
    fn region_of_unmapped_and_empty() {
        assert_eq!(region_of(VirtAddr(0), &[], 30), Err(RegionError::NoRegions));
        assert!(matches!(
            region_of(VirtAddr(0x1_0000_0000), &regions(), 30),
            Err(RegionError::Unmapped(_))
        ));
    }

    #[test]
    fn secret_overlap_edges() {
        let s = SecretRange { addr: VirtAddr(100), len: 8 };
        assert!(s.overlaps(100, 1));
        assert!(s.overlaps(96, 8));
        assert!(!s.overlaps(92, 8));
        assert!(!s.overlaps(108, 4));
    }
}
