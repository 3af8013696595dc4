//! Batch experiments: run a (trace × policy × geometry) matrix and collect
//! per-run statistics, leak verdicts, and derived tables.

pub mod config;
pub mod emit;
pub mod error;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::harness::{self, LeakMonitor, LeakVerdict, ScenarioSpec};
use crate::pipeline::{run_observed, PolicyConfig, SimConfig, SimStats, SmactSummary};
use crate::smact::SmactGeometry;
use crate::trace::{parse_trace, Trace};

pub use config::{ExperimentConfig, TraceSource};
pub use emit::{emit, read_csv, to_csv_string, write_csv, CsvRow, Format, CSV_HEADER};
pub use error::{ConfigError, EmitError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub trace: String,
    pub policy: String,
    pub geometry: String,
    pub stats: Option<SimStats>,
    pub leak: Option<LeakVerdict>,
    /// Cycles relative to Baseline on the same trace and geometry.
    pub norm_time: Option<f64>,
    pub error: Option<String>,
}

impl RunRecord {
    fn key(&self) -> (&str, &str, &str) {
        (&self.trace, &self.policy, &self.geometry)
    }

    pub fn is_full_safebet(&self) -> bool {
        self.policy.parse::<PolicyConfig>().is_ok_and(|p| p.is_full_safebet())
    }
}

/// SMACT misses per thousand committed instructions. `total` is the sum of
/// the three components, added in field order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MissMpki {
    pub slab: f64,
    pub chunk: f64,
    pub instance: f64,
    pub total: f64,
}

impl MissMpki {
    pub fn of(s: &SmactSummary, instructions: u64) -> Self {
        let slab = SmactSummary::mpki(s.miss_slab, instructions);
        let chunk = SmactSummary::mpki(s.miss_chunk, instructions);
        let instance = SmactSummary::mpki(s.miss_instance, instructions);
        MissMpki { slab, chunk, instance, total: slab + chunk + instance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpkiRow {
    pub trace: String,
    pub policy: String,
    pub geometry: String,
    pub mpki: MissMpki,
}

/// One SafeBet variant against full SafeBet on the same trace and geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub trace: String,
    pub geometry: String,
    pub policy: String,
    /// Cycles of the variant over cycles of full SafeBet.
    pub time_ratio: f64,
    pub extra_misses: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizePoint {
    pub trace: String,
    pub policy: String,
    pub entries: usize,
    pub total_miss: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Sorted by (trace, policy, geometry).
    pub runs: Vec<RunRecord>,
    pub mpki: Vec<MpkiRow>,
    pub ablations: Vec<AblationDelta>,
    /// Runs of one trace and policy across table sizes, smallest first.
    pub size_sweep: Vec<SizePoint>,
}

impl Report {
    /// Sorts `runs`, fills normalized times, and derives the summary tables.
    pub fn assemble(mut runs: Vec<RunRecord>) -> Self {
        runs.sort_by(|a, b| a.key().cmp(&b.key()));
        let baseline: BTreeMap<(String, String), u64> = runs
            .iter()
            .filter(|r| r.policy == "baseline")
            .filter_map(|r| r.stats.map(|s| ((r.trace.clone(), r.geometry.clone()), s.cycles)))
            .collect();
        for r in &mut runs {
            r.norm_time = match (r.stats, baseline.get(&(r.trace.clone(), r.geometry.clone()))) {
                (Some(_), _) if r.policy == "baseline" => Some(1.0),
                (Some(s), Some(&b)) if b > 0 => Some(s.cycles as f64 / b as f64),
                _ => None,
            };
        }
        let mpki = runs
            .iter()
            .filter_map(|r| {
                r.stats.map(|s| MpkiRow {
                    trace: r.trace.clone(),
                    policy: r.policy.clone(),
                    geometry: r.geometry.clone(),
                    mpki: MissMpki::of(&s.smact, s.committed_instructions),
                })
            })
            .collect();
        Report { ablations: ablations(&runs), size_sweep: size_sweep(&runs), runs, mpki }
    }

    pub fn failed(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.error.is_some())
    }

    /// Runs under full SafeBet that leaked.
    pub fn safebet_leaks(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.leak.is_some_and(|l| l.leaked) && r.is_full_safebet())
    }

    pub fn to_json(&self) -> Result<String, EmitError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, EmitError> {
        Ok(serde_json::from_str(s)?)
    }
}

fn ablations(runs: &[RunRecord]) -> Vec<AblationDelta> {
    let full: BTreeMap<(&str, &str), &SimStats> = runs
        .iter()
        .filter(|r| r.is_full_safebet())
        .filter_map(|r| r.stats.as_ref().map(|s| ((r.trace.as_str(), r.geometry.as_str()), s)))
        .collect();
    runs.iter()
        .filter(|r| r.policy.starts_with("safebet+"))
        .filter_map(|r| {
            let s = r.stats.as_ref()?;
            let f = full.get(&(r.trace.as_str(), r.geometry.as_str()))?;
            (f.cycles > 0).then(|| AblationDelta {
                trace: r.trace.clone(),
                geometry: r.geometry.clone(),
                policy: r.policy.clone(),
                time_ratio: s.cycles as f64 / f.cycles as f64,
                extra_misses: s.smact.total_miss as i64 - f.smact.total_miss as i64,
            })
        })
        .collect()
}

fn size_sweep(runs: &[RunRecord]) -> Vec<SizePoint> {
    let mut groups: BTreeMap<(&str, &str), Vec<SizePoint>> = BTreeMap::new();
    for r in runs {
        let (Some(s), Ok(g)) = (&r.stats, r.geometry.parse::<SmactGeometry>()) else { continue };
        if r.policy.parse::<PolicyConfig>().is_ok_and(|p| p.is_safebet()) {
            groups.entry((&r.trace, &r.policy)).or_default().push(SizePoint {
                trace: r.trace.clone(),
                policy: r.policy.clone(),
                entries: g.entries,
                total_miss: s.smact.total_miss,
                cycles: s.cycles,
            });
        }
    }
    groups
        .into_values()
        .filter(|v| v.len() > 1)
        .flat_map(|mut v| {
            v.sort_by_key(|p| p.entries);
            v
        })
        .collect()
}

pub fn read_trace_file(path: &Path) -> Result<Trace, String> {
    let f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_trace(BufReader::new(f)).map_err(|e| format!("{}: {e}", path.display()))
}

struct LoadedTrace {
    label: String,
    trace: Result<Trace, String>,
}

fn load(label: &str, source: &TraceSource, seed: u64) -> LoadedTrace {
    let (label, trace) = match source {
        TraceSource::File(p) => (label.to_string(), read_trace_file(p)),
        TraceSource::Scenario(k) => (
            format!("{label}@{seed}"),
            harness::generate(&ScenarioSpec::new(*k, seed)).map_err(|e| e.to_string()),
        ),
        TraceSource::Synthetic(k) => (format!("{label}@{seed}"), Ok(harness::synthesize(*k, seed))),
    };
    LoadedTrace { label, trace }
}

fn run_one(t: &LoadedTrace, policy: PolicyConfig, geometry: SmactGeometry, cfg: &ExperimentConfig) -> RunRecord {
    let mut rec = RunRecord {
        trace: t.label.clone(),
        policy: policy.to_string(),
        geometry: geometry.to_string(),
        stats: None,
        leak: None,
        norm_time: None,
        error: None,
    };
    let trace = match &t.trace {
        Ok(tr) => tr,
        Err(e) => {
            rec.error = Some(e.clone());
            return rec;
        }
    };
    let mut sim = SimConfig::new(policy);
    sim.geometry = geometry;
    sim.core = cfg.core;
    sim.memory = cfg.memory;
    let mut mon = LeakMonitor::default();
    match run_observed(trace, &sim, &mut mon) {
        Ok(s) => {
            rec.stats = Some(s);
            rec.leak = Some(mon.verdict());
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Runs every combination in parallel. Failures are recorded per run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report, ConfigError> {
    cfg.validate()?;
    let mut sources = Vec::new();
    for (label, src) in &cfg.traces {
        if src.is_generated() {
            sources.extend(cfg.seeds.iter().map(|&s| (label, src, s)));
        } else {
            sources.push((label, src, 0));
        }
    }
    let traces: Vec<LoadedTrace> = sources.par_iter().map(|&(l, s, seed)| load(l, s, seed)).collect();
    let jobs: Vec<_> = traces
        .iter()
        .flat_map(|t| cfg.policies.iter().flat_map(move |&p| cfg.geometries.iter().map(move |&g| (t, p, g))))
        .collect();
    let runs = jobs.par_iter().map(|&(t, p, g)| run_one(t, p, g, cfg)).collect();
    Ok(Report::assemble(runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(text, Path::new(".")).unwrap()
    }

    #[test]
    fn single_baseline_run_normalizes_to_one() {
        let r = run_experiment(&cfg("traces = [\"synthetic:owner_utility\"]\npolicies = [\"baseline\"]")).unwrap();
        assert_eq!(r.runs.len(), 1);
        assert_eq!(r.runs[0].norm_time, Some(1.0));
        assert_eq!(r.runs[0].trace, "synthetic:owner_utility@0");
    }

    #[test]
    fn unreadable_trace_is_a_per_run_error() {
        let r = run_experiment(&cfg(
            "traces = [\"/nonexistent/x.trace\", \"scenario:spectre_v1\"]\npolicies = [\"baseline\", \"safebet\"]",
        ))
        .unwrap();
        assert_eq!(r.runs.len(), 4);
        assert_eq!(r.failed().count(), 2);
        assert!(r.runs.iter().filter(|x| x.trace.starts_with("scenario")).all(|x| x.stats.is_some()));
    }

    #[test]
    fn runs_are_sorted_and_derived_tables_filled() {
        let r = run_experiment(&cfg(
            r#"traces = ["synthetic:chunk_dense"]
policies = ["safebet", "baseline", "safebet+no-bitmask"]
geometries = ["512x8", "128x8"]"#,
        ))
        .unwrap();
        let keys: Vec<_> = r.runs.iter().map(|x| x.key()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(r.mpki.len(), 6);
        assert_eq!(r.ablations.len(), 2);
        assert!(r.ablations.iter().all(|a| a.extra_misses > 0));
        assert_eq!(r.size_sweep.len(), 4);
        assert_eq!(r.size_sweep[0].entries, 128);
    }

    #[test]
    fn mpki_total_is_component_sum() {
        let s = SmactSummary { miss_slab: 3, miss_chunk: 7, miss_instance: 11, ..Default::default() };
        let m = MissMpki::of(&s, 3001);
        assert_eq!(m.total, m.slab + m.chunk + m.instance);
        assert_eq!(MissMpki::of(&s, 0), MissMpki::default());
    }
}
