use std::collections::HashMap;

use crate::alloc::{AllocConfig, LazyAllocator};
use crate::trace::{
    BranchInfo, DataRange, Directive, MemRef, MicroOp, OpKind, Reg, Region, RegionId, SecretRange, Trace,
    TraceHeader, TraceItem, VirtAddr, DEFAULT_REGION_BITS,
};

pub const OWNER: RegionId = RegionId(0);
pub const VISITOR_A: RegionId = RegionId(1);
pub const VISITOR_B: RegionId = RegionId(2);
pub const REGION_BASES: [u64; 3] = [0x4000_0000, 0x8000_0000, 0xC000_0000];

/// One op before it is placed in a region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Op {
    kind: OpKind,
    mem: Option<MemRef>,
    srcs: Vec<Reg>,
    dst: Option<Reg>,
    branch: Option<BranchInfo>,
    secret: bool,
}

impl Op {
    fn of(kind: OpKind) -> Self {
        Op { kind, mem: None, srcs: Vec::new(), dst: None, branch: None, secret: false }
    }

    pub fn load(addr: u64) -> Self {
        Op { mem: Some(MemRef { addr: VirtAddr(addr), size: 8 }), ..Self::of(OpKind::Load) }
    }

    pub fn store(addr: u64) -> Self {
        Op { mem: Some(MemRef { addr: VirtAddr(addr), size: 8 }), ..Self::of(OpKind::Store) }
    }

    pub fn alu() -> Self {
        Self::of(OpKind::Alu)
    }

    pub fn fence() -> Self {
        Self::of(OpKind::Fence)
    }

    pub fn call() -> Self {
        Self::of(OpKind::Call)
    }

    pub fn ret() -> Self {
        Self::of(OpKind::Return)
    }

    /// A conditional branch predicted correctly.
    pub fn branch(resolve_after: u32) -> Self {
        Self::of(OpKind::Branch).predicted(true, true, resolve_after)
    }

    pub fn predicted(mut self, predicted_taken: bool, actual_taken: bool, resolve_after: u32) -> Self {
        self.branch = Some(BranchInfo { predicted_taken, actual_taken, resolve_after });
        self
    }

    /// Marks this control op mispredicted; the following wrong-path ops are its shadow.
    pub fn mispredict(self, resolve_after: u32) -> Self {
        self.predicted(true, false, resolve_after)
    }

    pub fn size(mut self, size: u32) -> Self {
        if let Some(m) = &mut self.mem {
            m.size = size;
        }
        self
    }

    pub fn src(mut self, r: u8) -> Self {
        self.srcs.push(Reg(r));
        self
    }

    pub fn dst(mut self, r: u8) -> Self {
        self.dst = Some(Reg(r));
        self
    }

    pub fn secret(mut self) -> Self {
        self.secret = true;
        self
    }
}

/// Assembles traces op by op, assigning sequence numbers and program
/// counters, and mirrors the allocator so generated code can use the
/// addresses `! malloc` will return at simulation time.
#[derive(Debug, Clone)]
pub struct TraceBuilder {
    header: TraceHeader,
    items: Vec<TraceItem>,
    seq: u64,
    cursor: HashMap<RegionId, u64>,
    wrong_path: bool,
    alloc: LazyAllocator,
    heap_used: bool,
}

impl Default for TraceBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceBuilder {
    /// Three regions: the owner plus two visitors.
    pub fn new() -> Self {
        let regions = [OWNER, VISITOR_A, VISITOR_B]
            .iter()
            .zip(REGION_BASES)
            .map(|(&id, base)| Region { id, base: VirtAddr(base), is_owner: id == OWNER })
            .collect();
        TraceBuilder {
            header: TraceHeader {
                region_bits: DEFAULT_REGION_BITS,
                regions,
                data: Vec::new(),
                secrets: Vec::new(),
            },
            items: Vec::new(),
            seq: 0,
            cursor: HashMap::new(),
            wrong_path: false,
            alloc: LazyAllocator::new(AllocConfig::default()),
            heap_used: false,
        }
    }

    pub fn data(&mut self, lo: u64, hi: u64, region: RegionId) -> &mut Self {
        self.header.data.push(DataRange { lo: VirtAddr(lo), hi: VirtAddr(hi), region });
        self
    }

    pub fn secret(&mut self, addr: u64, len: u64) -> &mut Self {
        self.header.secrets.push(SecretRange { addr: VirtAddr(addr), len });
        self
    }

    /// Ops pushed while on are wrong-path ops.
    pub fn wrong_path(&mut self, on: bool) -> &mut Self {
        self.wrong_path = on;
        self
    }

    fn base(&self, region: RegionId) -> u64 {
        self.header
            .regions
            .iter()
            .find(|r| r.id == region)
            .map(|r| r.base.0)
            .expect("region declared")
    }

    /// Places `op` at the region's next sequential program counter.
    pub fn push(&mut self, region: RegionId, op: Op) -> u64 {
        let off = *self.cursor.entry(region).or_insert(0x1000);
        self.cursor.insert(region, off + 4);
        self.push_at(region, off, op)
    }

    /// Places `op` at a fixed offset within the region, so repeated calls
    /// model the same static instruction.
    pub fn push_at(&mut self, region: RegionId, offset: u64, op: Op) -> u64 {
        self.seq += 1;
        let pc = VirtAddr(self.base(region) + offset);
        let mut m = MicroOp::new(self.seq, op.kind, pc);
        m.mem = op.mem;
        m.srcs = op.srcs;
        m.dst = op.dst;
        m.branch = op.branch;
        m.secret = op.secret;
        m.wrong_path = self.wrong_path;
        self.items.push(TraceItem::Op(m));
        self.seq
    }

    pub fn malloc(&mut self, size: u64) -> VirtAddr {
        self.heap_used = true;
        self.items.push(TraceItem::Directive(Directive::Malloc { size }));
        self.alloc.malloc64(size).expect("mirrored heap has room")
    }

    /// Returns whether this free runs the revocation handler.
    pub fn free(&mut self, addr: VirtAddr) -> bool {
        self.items.push(TraceItem::Directive(Directive::Free { addr }));
        match self.alloc.lazy_free(addr).expect("freeing a live block") {
            Some(inv) => {
                self.alloc.revocation_handler(inv, None);
                true
            }
            None => false,
        }
    }

    pub fn set_owner(&mut self, region: RegionId) {
        self.items.push(TraceItem::Directive(Directive::SetOwner { region }));
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn build(mut self) -> Trace {
        if self.heap_used {
            let cfg = *self.alloc.config();
            self.header.data.push(DataRange {
                lo: VirtAddr(cfg.heap_base),
                hi: VirtAddr(cfg.heap_base + cfg.heap_bytes),
                region: OWNER,
            });
        }
        Trace { header: self.header, items: self.items }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{parse_trace_str, validate_trace};

    #[test]
    fn builds_valid_round_tripping_trace() {
        let mut b = TraceBuilder::new();
        b.data(0x1000_0000, 0x1001_0000, OWNER);
        b.push(OWNER, Op::load(0x1000_0000).dst(1));
        b.push(OWNER, Op::branch(9).src(1).mispredict(9));
        b.wrong_path(true);
        b.push(OWNER, Op::load(0x1000_0040).src(1).dst(2));
        b.wrong_path(false);
        let p = b.malloc(10);
        b.push(OWNER, Op::store(p.0).src(2));
        b.free(p);
        let t = b.build();
        assert!(validate_trace(&t).is_empty());
        assert_eq!(parse_trace_str(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn fixed_offsets_repeat_pcs() {
        let mut b = TraceBuilder::new();
        b.push_at(VISITOR_A, 0x40, Op::alu());
        b.push_at(VISITOR_A, 0x40, Op::alu());
        let t = b.build();
        let pcs: Vec<_> = t.ops().map(|o| o.pc).collect();
        assert_eq!(pcs[0], pcs[1]);
        assert_eq!(pcs[0].0, 0x8000_0040);
    }
}
