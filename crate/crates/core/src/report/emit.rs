use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EmitError, MissMpki, Report, RunRecord};

pub const CSV_HEADER: [&str; 16] = [
    "trace",
    "policy",
    "geometry",
    "cycles",
    "instructions",
    "ipc",
    "norm_time",
    "smact_miss_slab",
    "smact_miss_chunk",
    "smact_miss_instance",
    "smact_miss_total",
    "replays",
    "l3_mpki",
    "handler_invocations",
    "handler_cycles",
    "leaked",
];

/// One CSV line. Miss columns are MPKI; numeric cells are empty for failed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub trace: String,
    pub policy: String,
    pub geometry: String,
    pub cycles: Option<u64>,
    pub instructions: Option<u64>,
    pub ipc: Option<f64>,
    pub norm_time: Option<f64>,
    pub smact_miss_slab: Option<f64>,
    pub smact_miss_chunk: Option<f64>,
    pub smact_miss_instance: Option<f64>,
    pub smact_miss_total: Option<f64>,
    pub replays: Option<u64>,
    pub l3_mpki: Option<f64>,
    pub handler_invocations: Option<u64>,
    pub handler_cycles: Option<u64>,
    pub leaked: Option<bool>,
}

impl CsvRow {
    pub fn from_run(r: &RunRecord) -> Self {
        let s = r.stats.as_ref();
        let m = s.map(|s| MissMpki::of(&s.smact, s.committed_instructions));
        CsvRow {
            trace: r.trace.clone(),
            policy: r.policy.clone(),
            geometry: r.geometry.clone(),
            cycles: s.map(|s| s.cycles),
            instructions: s.map(|s| s.committed_instructions),
            ipc: s.map(|s| s.ipc),
            norm_time: r.norm_time,
            smact_miss_slab: m.map(|m| m.slab),
            smact_miss_chunk: m.map(|m| m.chunk),
            smact_miss_instance: m.map(|m| m.instance),
            smact_miss_total: m.map(|m| m.total),
            replays: s.map(|s| s.smact.replays),
            l3_mpki: s.map(|s| s.cache.l3_mpki(s.committed_instructions)),
            handler_invocations: s.map(|s| s.handler_invocations),
            handler_cycles: s.map(|s| s.handler_cycles),
            leaked: r.leak.map(|l| l.leaked),
        }
    }
}

pub fn write_csv<W: Write>(report: &Report, w: W) -> Result<(), EmitError> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in &report.runs {
        out.serialize(CsvRow::from_run(r))?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn to_csv_string(report: &Report) -> Result<String, EmitError> {
    let mut buf = Vec::new();
    write_csv(report, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<CsvRow>, EmitError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(EmitError::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected header {header:?}"),
        ))));
    }
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Writes `report.csv` and/or `report.json` into `dir`, creating it.
pub fn emit(report: &Report, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>, EmitError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EmitError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut written = Vec::new();
    for f in formats {
        let (name, body) = match f {
            Format::Csv => ("report.csv", to_csv_string(report)?),
            Format::Json => ("report.json", report.to_json()?),
        };
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::LeakVerdict;
    use crate::pipeline::SimStats;

    fn record(trace: &str, policy: &str, cycles: u64) -> RunRecord {
        let mut stats = SimStats { cycles, committed_instructions: 3000, ..Default::default() };
        stats.smact.miss_slab = 7;
        stats.smact.miss_chunk = 13;
        stats.smact.miss_instance = 1;
        stats.ipc = 3000.0 / cycles as f64;
        RunRecord {
            trace: trace.into(),
            policy: policy.into(),
            geometry: "512x8/4096/64".into(),
            stats: Some(stats),
            leak: Some(LeakVerdict::default()),
            norm_time: None,
            error: None,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let s = to_csv_string(&Report::default()).unwrap();
        assert_eq!(s, format!("{}\n", CSV_HEADER.join(",")));
        assert!(read_csv(s.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn rows_round_trip_exactly() {
        let rep = Report::assemble(vec![record("t", "safebet", 7001), record("t", "baseline", 6007)]);
        let s = to_csv_string(&rep).unwrap();
        assert_eq!(s.lines().count(), 3);
        let rows = read_csv(s.as_bytes()).unwrap();
        let want: Vec<_> = rep.runs.iter().map(CsvRow::from_run).collect();
        assert_eq!(rows, want);
        assert_eq!(rows[0].norm_time, Some(1.0));
        for r in rows {
            let sum = r.smact_miss_slab.unwrap() + r.smact_miss_chunk.unwrap() + r.smact_miss_instance.unwrap();
            assert_eq!(sum, r.smact_miss_total.unwrap());
        }
    }

    #[test]
    fn failed_runs_leave_numeric_cells_empty() {
        let mut r = record("bad", "baseline", 1);
        r.stats = None;
        r.leak = None;
        r.error = Some("missing".into());
        let s = to_csv_string(&Report::assemble(vec![r])).unwrap();
        assert_eq!(s.lines().nth(1).unwrap(), "bad,baseline,512x8/4096/64,,,,,,,,,,,,,");
    }

    #[test]
    fn json_round_trip() {
        let rep = Report::assemble(vec![record("t", "baseline", 6007), record("t", "safebet+no-bitmask", 9)]);
        assert_eq!(Report::from_json(&rep.to_json().unwrap()).unwrap(), rep);
    }

    #[test]
    fn emit_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested");
        let rep = Report::assemble(vec![record("t", "baseline", 10)]);
        let files = emit(&rep, &out, &[Format::Csv, Format::Json]).unwrap();
        assert_eq!(files.len(), 2);
        let csv = std::fs::read(&files[0]).unwrap();
        assert_eq!(read_csv(csv.as_slice()).unwrap().len(), 1);
    }
}
