use std::io::BufRead;

use super::{
    BranchInfo, DataRange, Directive, MemRef, MicroOp, OpKind, Reg, Region, RegionId,
    SecretRange, Trace, TraceHeader, TraceItem, VirtAddr, NUM_REGS,
};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Semantic { line: usize, msg: String },
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
}

impl TraceError {
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceError::Syntax { line, .. } | TraceError::Semantic { line, .. } => Some(*line),
            TraceError::Io(_) => None,
        }
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Syntax { line, msg: msg.into() }
}

fn semantic(line: usize, msg: impl Into<String>) -> TraceError {
    TraceError::Semantic { line, msg: msg.into() }
}

pub fn parse_trace_str(input: &str) -> Result<Trace, TraceError> {
    parse_trace(input.as_bytes())
}

/// Parses and semantically checks a trace.
///
/// Semantic errors: an op or directive naming an undeclared region, a
/// misaligned or duplicated region, and a wrong-path run still open at the end
/// of input.
pub fn parse_trace<R: BufRead>(input: R) -> Result<Trace, TraceError> {
    let mut header = TraceHeader::default();
    let mut items = Vec::new();
    // line number of every item, for semantic errors reported after the scan
    let mut item_lines = Vec::new();
    let mut data_lines = Vec::new();
    let mut region_lines = Vec::new();

    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with("//") {
            continue;
        }
        if let Some(rest) = text.strip_prefix('#') {
            let mut toks = rest.split_whitespace();
            match toks.next() {
                Some("region") => {
                    let id = parse_region_id(toks.next(), lineno)?;
                    let base = parse_hex(toks.next(), lineno, "region base")?;
                    let is_owner = match toks.next() {
                        None => false,
                        Some("owner") => true,
                        Some(t) => return Err(syntax(lineno, format!("unexpected token `{t}`"))),
                    };
                    expect_end(toks.next(), lineno)?;
                    header.regions.push(Region { id, base: VirtAddr(base), is_owner });
                    region_lines.push(lineno);
                }
                Some("data") => {
                    let lo = parse_hex(toks.next(), lineno, "data lo")?;
                    let hi = parse_hex(toks.next(), lineno, "data hi")?;
                    let region = parse_region_id(toks.next(), lineno)?;
                    expect_end(toks.next(), lineno)?;
                    if hi <= lo {
                        return Err(syntax(lineno, "data range must have hi > lo"));
                    }
                    header.data.push(DataRange { lo: VirtAddr(lo), hi: VirtAddr(hi), region });
                    data_lines.push(lineno);
                }
                Some("secret") => {
                    let addr = parse_hex(toks.next(), lineno, "secret address")?;
                    let len = parse_dec(toks.next(), lineno, "secret length")?;
                    expect_end(toks.next(), lineno)?;
                    if len == 0 {
                        return Err(syntax(lineno, "secret length must be positive"));
                    }
                    header.secrets.push(SecretRange { addr: VirtAddr(addr), len });
                }
                Some("region-bits") => {
                    let bits = parse_dec(toks.next(), lineno, "region bits")?;
                    expect_end(toks.next(), lineno)?;
                    if !(12..=63).contains(&bits) {
                        return Err(syntax(lineno, "region bits must be in 12..=63"));
                    }
                    header.region_bits = bits as u32;
                }
                other => {
                    return Err(syntax(
                        lineno,
                        format!("unknown header line `#{}`", other.unwrap_or("")),
                    ))
                }
            }
        } else if let Some(rest) = text.strip_prefix('!') {
            items.push(TraceItem::Directive(parse_directive(rest, lineno)?));
            item_lines.push(lineno);
        } else {
            items.push(TraceItem::Op(parse_op(text, lineno)?));
            item_lines.push(lineno);
        }
    }

    check_header(&header, &region_lines, &data_lines)?;
    check_items(&header, &items, &item_lines)?;
    Ok(Trace { header, items })
}

fn check_header(
    header: &TraceHeader,
    region_lines: &[usize],
    data_lines: &[usize],
) -> Result<(), TraceError> {
    let align = 1u64 << header.region_bits;
    let mut owners = 0;
    for (i, r) in header.regions.iter().enumerate() {
        let line = region_lines[i];
        if r.base.0 % align != 0 {
            return Err(semantic(line, format!("region {} base {} is not aligned", r.id, r.base)));
        }
        if header.regions[..i].iter().any(|p| p.id == r.id) {
            return Err(semantic(line, format!("region {} declared twice", r.id)));
        }
        if header.regions[..i].iter().any(|p| p.base == r.base) {
            return Err(semantic(line, format!("region base {} declared twice", r.base)));
        }
        owners += r.is_owner as usize;
        if owners > 1 {
            return Err(semantic(line, "more than one owner region"));
        }
    }
    for (i, d) in header.data.iter().enumerate() {
        if !header.regions.iter().any(|r| r.id == d.region) {
            return Err(semantic(data_lines[i], format!("undeclared region {}", d.region)));
        }
    }
    Ok(())
}

fn check_items(header: &TraceHeader, items: &[TraceItem], lines: &[usize]) -> Result<(), TraceError> {
    let mut open_run: Option<usize> = None;
    for (item, &line) in items.iter().zip(lines) {
        match item {
            TraceItem::Op(op) => {
                if header.region_of(op.pc).is_err() {
                    return Err(semantic(
                        line,
                        format!(
                            "pc {} references undeclared region {}",
                            op.pc,
                            op.pc.0 >> header.region_bits
                        ),
                    ));
                }
                if op.wrong_path {
                    open_run.get_or_insert(line);
                } else {
                    open_run = None;
                }
            }
            TraceItem::Directive(d) => {
                if let Directive::SetOwner { region } = d {
                    if !header.regions.iter().any(|r| r.id == *region) {
                        return Err(semantic(line, format!("undeclared region {region}")));
                    }
                }
                open_run = None;
            }
        }
    }
    if let Some(line) = open_run {
        return Err(semantic(line, "wrong-path run is never closed by a correct-path op"));
    }
    Ok(())
}

fn expect_end(tok: Option<&str>, line: usize) -> Result<(), TraceError> {
    match tok {
        None => Ok(()),
        Some(t) => Err(syntax(line, format!("unexpected token `{t}`"))),
    }
}

fn parse_hex(tok: Option<&str>, line: usize, what: &str) -> Result<u64, TraceError> {
    let tok = tok.ok_or_else(|| syntax(line, format!("missing {what}")))?;
    let digits = tok
        .strip_prefix("0x")
        .or_else(|| tok.strip_prefix("0X"))
        .unwrap_or(tok);
    u64::from_str_radix(digits, 16).map_err(|_| syntax(line, format!("bad hex {what} `{tok}`")))
}

fn parse_dec(tok: Option<&str>, line: usize, what: &str) -> Result<u64, TraceError> {
    let tok = tok.ok_or_else(|| syntax(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| syntax(line, format!("bad {what} `{tok}`")))
}

fn parse_region_id(tok: Option<&str>, line: usize) -> Result<RegionId, TraceError> {
    let v = parse_dec(tok, line, "region id")?;
    u16::try_from(v)
        .map(RegionId)
        .map_err(|_| syntax(line, "region id out of range"))
}

fn parse_reg(tok: &str, line: usize) -> Result<Reg, TraceError> {
    tok.strip_prefix('r')
        .and_then(|n| n.parse::<u8>().ok())
        .filter(|&n| (n as usize) < NUM_REGS)
        .map(Reg)
        .ok_or_else(|| syntax(line, format!("bad register `{tok}`")))
}

fn parse_tn(v: &str, line: usize) -> Result<bool, TraceError> {
    match v {
        "t" => Ok(true),
        "n" => Ok(false),
        _ => Err(syntax(line, format!("expected t or n, got `{v}`"))),
    }
}

fn parse_directive(rest: &str, line: usize) -> Result<Directive, TraceError> {
    let mut toks = rest.split_whitespace();
    let d = match toks.next() {
        Some("malloc") => {
            let size = parse_dec(toks.next(), line, "malloc size")?;
            if size == 0 {
                return Err(syntax(line, "malloc size must be positive"));
            }
            Directive::Malloc { size }
        }
        Some("free") => Directive::Free { addr: VirtAddr(parse_hex(toks.next(), line, "free address")?) },
        Some("set-owner") => Directive::SetOwner { region: parse_region_id(toks.next(), line)? },
        other => {
            return Err(syntax(line, format!("unknown directive `{}`", other.unwrap_or(""))))
        }
    };
    expect_end(toks.next(), line)?;
    Ok(d)
}

fn parse_op(text: &str, line: usize) -> Result<MicroOp, TraceError> {
    let mut toks = text.split_whitespace();
    let seq = parse_dec(toks.next(), line, "sequence number")?;
    let kind_tok = toks.next().ok_or_else(|| syntax(line, "missing op kind"))?;
    let kind: OpKind = kind_tok
        .parse()
        .map_err(|_| syntax(line, format!("unknown op kind `{kind_tok}`")))?;

    let mut pc = None;
    let mut op = MicroOp::new(seq, kind, VirtAddr(0));
    let mut br: Option<(Option<bool>, Option<bool>, Option<u32>)> = None;

    for tok in toks {
        match tok.split_once('=') {
            Some(("pc", v)) => pc = Some(parse_hex(Some(v), line, "pc")?),
            Some(("ea", v)) => {
                let (a, s) = v
                    .split_once(',')
                    .ok_or_else(|| syntax(line, "ea must be <hex>,<size>"))?;
                let addr = parse_hex(Some(a), line, "ea")?;
                let size = parse_dec(Some(s), line, "access size")?;
                if size == 0 || size > u32::MAX as u64 {
                    return Err(syntax(line, "access size out of range"));
                }
                op.mem = Some(MemRef { addr: VirtAddr(addr), size: size as u32 });
            }
            Some(("src", v)) => {
                op.srcs = v.split(',').map(|r| parse_reg(r, line)).collect::<Result<_, _>>()?;
            }
            Some(("dst", v)) => op.dst = Some(parse_reg(v, line)?),
            Some((key @ ("pred" | "actual" | "resolve"), v)) => {
                let b = br
                    .as_mut()
                    .ok_or_else(|| syntax(line, format!("`{key}=` outside a `br` group")))?;
                match key {
                    "pred" => b.0 = Some(parse_tn(v, line)?),
                    "actual" => b.1 = Some(parse_tn(v, line)?),
                    _ => {
                        let n = parse_dec(Some(v), line, "resolve latency")?;
                        b.2 = Some(u32::try_from(n).map_err(|_| syntax(line, "resolve too large"))?);
                    }
                }
            }
            Some((k, _)) => return Err(syntax(line, format!("unknown field `{k}`"))),
            None => match tok {
                "br" => br = Some((None, None, None)),
                "wp" => op.wrong_path = true,
                "secret" => op.secret = true,
                _ => return Err(syntax(line, format!("unexpected token `{tok}`"))),
            },
        }
    }

    op.pc = VirtAddr(pc.ok_or_else(|| syntax(line, "missing pc="))?);
    if let Some(b) = br {
        match b {
            (Some(p), Some(a), Some(r)) => {
                if !kind.is_control() {
                    return Err(syntax(line, "br info on a non-control op"));
                }
                op.branch = Some(BranchInfo { predicted_taken: p, actual_taken: a, resolve_after: r });
            }
            _ => return Err(syntax(line, "br requires pred=, actual= and resolve=")),
        }
    }
    if kind.is_memory() != op.mem.is_some() {
        return Err(syntax(
            line,
            if kind.is_memory() { "memory op without ea=" } else { "ea= on a non-memory op" },
        ));
    }
    Ok(op)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_REGIONS: &str = "\
#region 0 0x40000000 owner
#region 1 0x80000000
#data 0x100000 0x200000 1
#secret 0x100040 8
1 load pc=0x80000000 ea=0x100000,8 dst=r1
2 alu pc=0x80000004 src=r1 dst=r2
3 store pc=0x80000008 ea=0x100008,8 src=r2
";

    #[test]
    fn two_regions_three_ops() {
        let t = parse_trace_str(TWO_REGIONS).unwrap();
        assert_eq!(t.header.regions.len(), 2);
        assert_eq!(t.ops().count(), 3);
        assert_eq!(t.header.owner(), Some(RegionId(0)));
        assert_eq!(t.to_text(), TWO_REGIONS);
    }

    #[test]
    fn empty_op_section_is_valid() {
        let t = parse_trace_str("#region 0 0x0 owner\n").unwrap();
        assert!(t.items.is_empty());
    }

    #[test]
    fn undeclared_region_rejected_at_line() {
        let src = "#region 0 0x0\n#region 1 0x40000000\n#region 2 0x80000000\n\
                   1 alu pc=0x0\n2 alu pc=0x1c0000004\n";
        let err = parse_trace_str(src).unwrap_err();
        assert!(matches!(err, TraceError::Semantic { line: 5, .. }), "{err}");
    }

    #[test]
    fn set_owner_to_undeclared_region() {
        let err = parse_trace_str("#region 0 0x0\n! set-owner 3\n").unwrap_err();
        assert!(matches!(err, TraceError::Semantic { line: 2, .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_trace_str("#region 0 0x0\n1 alu pc=0x0\n2 frobnicate pc=0x4\n").unwrap_err();
        assert!(matches!(err, TraceError::Syntax { line: 3, .. }));
        let err = parse_trace_str("#region 0 0x0\n1 load pc=0x0\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
        let err = parse_trace_str("#region 0 0x0\n1 branch pc=0x0 br pred=t actual=n\n").unwrap_err();
        assert_eq!(err.line(), Some(2));
    }

    #[test]
    fn unclosed_wrong_path_run() {
        let src = "#region 0 0x0\n1 branch pc=0x0 br pred=t actual=n resolve=5\n2 alu pc=0x4 wp\n";
        let err = parse_trace_str(src).unwrap_err();
        assert!(matches!(err, TraceError::Semantic { line: 3, .. }));
        let closed = format!("{src}3 alu pc=0x8\n");
        assert!(parse_trace_str(&closed).is_ok());
    }

    #[test]
    fn misaligned_region() {
        let err = parse_trace_str("#region 0 0x1000\n").unwrap_err();
        assert!(matches!(err, TraceError::Semantic { .. }));
        // smaller granularity makes the same base legal
        assert!(parse_trace_str("#region-bits 12\n#region 0 0x1000\n").is_ok());
    }

    #[test]
    fn directives_round_trip() {
        let src = "#region 0 0x0 owner\n! malloc 64\n! free 0x5000\n! set-owner 0\n";
        let t = parse_trace_str(src).unwrap();
        assert_eq!(t.items.len(), 3);
        assert_eq!(t.to_text(), src);
    }
}
