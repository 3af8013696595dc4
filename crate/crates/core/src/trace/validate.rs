use std::fmt;

use super::{Trace, TraceItem};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    /// A wrong-path run not directly preceded by a mispredicted control op.
    OrphanWrongPath,
    /// A committed load or store outside every declared data range.
    UndeclaredDataAccess,
    /// Sequence numbers must strictly increase.
    SequenceOrder,
    /// Two declared data ranges overlap.
    OverlappingData,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub seq: Option<u64>,
    pub kind: DiagnosticKind,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.seq {
            Some(seq) => write!(f, "op {seq}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

/// Checks the trace invariants the parser does not enforce; an empty result
/// means the trace is well formed.
pub fn validate_trace(t: &Trace) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let h = &t.header;

    for (i, a) in h.data.iter().enumerate() {
        for b in &h.data[i + 1..] {
            if a.lo < b.hi && b.lo < a.hi {
                out.push(Diagnostic {
                    seq: None,
                    kind: DiagnosticKind::OverlappingData,
                    message: format!("data ranges [{}, {}) and [{}, {}) overlap", a.lo, a.hi, b.lo, b.hi),
                });
            }
        }
    }

    let mut prev_seq: Option<u64> = None;
    // whether the previous item was a correct-path mispredicted control op,
    // or a wrong-path op continuing such a run
    let mut run_allowed = false;
    let mut in_run = false;
    for item in &t.items {
        let op = match item {
            TraceItem::Op(op) => op,
            TraceItem::Directive(_) => {
                run_allowed = false;
                in_run = false;
                continue;
            }
        };
        if let Some(p) = prev_seq {
            if op.seq <= p {
                out.push(Diagnostic {
                    seq: Some(op.seq),
                    kind: DiagnosticKind::SequenceOrder,
                    message: format!("sequence number {} does not follow {}", op.seq, p),
                });
            }
        }
        prev_seq = Some(op.seq);

        if op.wrong_path {
            if !in_run && !run_allowed {
                out.push(Diagnostic {
                    seq: Some(op.seq),
                    kind: DiagnosticKind::OrphanWrongPath,
                    message: "wrong-path op without a preceding mispredicted branch".into(),
                });
            }
            in_run = true;
            run_allowed = false;
        } else {
            in_run = false;
            run_allowed = op.mispredicted();
            if let Some(m) = op.mem {
                if !h.in_data_space(m.addr.0, m.size as u64) {
                    out.push(Diagnostic {
                        seq: Some(op.seq),
                        kind: DiagnosticKind::UndeclaredDataAccess,
                        message: format!(
                            "committed {} to {} lies outside declared data space",
                            op.kind.as_str(),
                            m.addr
                        ),
                    });
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace_str;

    const HEADER: &str = "#region 0 0x40000000 owner\n#data 0x1000 0x2000 0\n";

    #[test]
    fn well_formed_has_no_diagnostics() {
        let src = format!(
            "{HEADER}1 load pc=0x40000000 ea=0x1000,8 dst=r1\n\
             2 branch pc=0x40000004 src=r1 br pred=t actual=n resolve=20\n\
             3 load pc=0x40000008 ea=0x1ff8,8 dst=r2 wp\n\
             4 alu pc=0x4000000c src=r2 dst=r3 wp\n\
             5 alu pc=0x40000010\n"
        );
        let t = parse_trace_str(&src).unwrap();
        assert!(validate_trace(&t).is_empty());
    }

    #[test]
    fn orphan_wrong_path_run() {
        let src = format!(
            "{HEADER}1 branch pc=0x40000000 br pred=t actual=t resolve=2\n\
             2 alu pc=0x40000004 wp\n3 alu pc=0x40000008 wp\n4 alu pc=0x4000000c\n"
        );
        let d = validate_trace(&parse_trace_str(&src).unwrap());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::OrphanWrongPath);
        assert_eq!(d[0].seq, Some(2));
    }

    #[test]
    fn committed_store_outside_data_space() {
        let src = format!("{HEADER}1 store pc=0x40000000 ea=0x9000,8\n");
        let d = validate_trace(&parse_trace_str(&src).unwrap());
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagnosticKind::UndeclaredDataAccess);
    }

    #[test]
    fn wrong_path_access_outside_data_is_fine() {
        let src = format!(
            "{HEADER}1 branch pc=0x40000000 br pred=n actual=t resolve=9\n\
             2 load pc=0x40000004 ea=0x9000,8 wp\n3 alu pc=0x40000008\n"
        );
        assert!(validate_trace(&parse_trace_str(&src).unwrap()).is_empty());
    }

    #[test]
    fn sequence_and_overlap() {
        let src = "#region 0 0x0\n#data 0x0 0x100 0\n#data 0x80 0x200 0\n2 alu pc=0x0\n1 alu pc=0x4\n";
        let d = validate_trace(&parse_trace_str(src).unwrap());
        let kinds: Vec<_> = d.iter().map(|d| d.kind).collect();
        assert_eq!(kinds, vec![DiagnosticKind::OverlappingData, DiagnosticKind::SequenceOrder]);
    }
}
