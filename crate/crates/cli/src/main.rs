use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use safebet::harness::{self, ScenarioKind, ScenarioSpec};
use safebet::pipeline::{NoObserver, PolicyConfig, SimConfig, Simulator};
use safebet::report::{self, ExperimentConfig, Format};
use safebet::smact::SmactGeometry;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUN: u8 = 2;
const EXIT_LEAK: u8 = 3;

#[derive(Parser)]
#[command(name = "safebet", about = "Speculative memory access control simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment matrix and write its report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        format: OutFormat,
    },
    /// Generate an attack scenario trace.
    Scenario {
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        secret_byte: Option<u8>,
        #[arg(long)]
        mistrain_iters: Option<u32>,
        #[arg(long)]
        array_len: Option<u64>,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a trace and print the final SMACT contents.
    DumpSmact {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "safebet")]
        policy: String,
        #[arg(long, default_value = "512x8/4096/64")]
        geometry: String,
    },
    /// Print the version.
    Version,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("safebet: {msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match cli.cmd {
        Cmd::Run { config, out, format } => run(config, out, format),
        Cmd::Scenario { kind, seed, secret_byte, mistrain_iters, array_len, out } => {
            let kind: ScenarioKind = match kind.parse() {
                Ok(k) => k,
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            let mut spec = ScenarioSpec::new(kind, seed);
            spec.secret_byte = secret_byte.unwrap_or(spec.secret_byte);
            spec.mistrain_iters = mistrain_iters.unwrap_or(spec.mistrain_iters);
            spec.array_len = array_len.unwrap_or(spec.array_len);
            let text = match harness::generate(&spec) {
                Ok(t) => t.to_text(),
                Err(e) => return fail(EXIT_CONFIG, e),
            };
            match out {
                Some(p) => match std::fs::write(&p, text) {
                    Ok(()) => ExitCode::SUCCESS,
                    Err(e) => fail(EXIT_RUN, format!("{}: {e}", p.display())),
                },
                None => {
                    print!("{text}");
                    ExitCode::SUCCESS
                }
            }
        }
        Cmd::DumpSmact { trace, policy, geometry } => dump_smact(trace, &policy, &geometry),
        Cmd::Version => {
            println!("safebet {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
    }
}

fn run(config: PathBuf, out: Option<PathBuf>, format: OutFormat) -> ExitCode {
    let cfg = match ExperimentConfig::load(&config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let rep = match report::run_experiment(&cfg) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let formats: &[Format] = match format {
        OutFormat::Csv => &[Format::Csv],
        OutFormat::Json => &[Format::Json],
        OutFormat::Both => &[Format::Csv, Format::Json],
    };
    match out.or(cfg.output_dir) {
        Some(dir) => match report::emit(&rep, &dir, formats) {
            Ok(files) => {
                for f in files {
                    eprintln!("wrote {}", f.display());
                }
            }
            Err(e) => return fail(EXIT_RUN, e),
        },
        None => {
            let body = match format {
                OutFormat::Json => rep.to_json(),
                _ => report::to_csv_string(&rep),
            };
            match body {
                Ok(b) => print!("{b}"),
                Err(e) => return fail(EXIT_RUN, e),
            }
        }
    }
    let leaks: Vec<_> = rep.safebet_leaks().collect();
    if !leaks.is_empty() {
        for r in &leaks {
            eprintln!("safebet: leak under {} on {}", r.policy, r.trace);
        }
        return ExitCode::from(EXIT_LEAK);
    }
    let failed: Vec<_> = rep.failed().collect();
    if !failed.is_empty() {
        for r in &failed {
            eprintln!("safebet: {} / {}: {}", r.trace, r.policy, r.error.as_deref().unwrap_or(""));
        }
        return ExitCode::from(EXIT_RUN);
    }
    ExitCode::SUCCESS
}

fn dump_smact(trace: PathBuf, policy: &str, geometry: &str) -> ExitCode {
    let policy: PolicyConfig = match policy.parse() {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let geometry: SmactGeometry = match geometry.parse() {
        Ok(g) => g,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let t = match report::read_trace_file(&trace) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_RUN, e),
    };
    let mut cfg = SimConfig::new(policy);
    cfg.geometry = geometry;
    let mut sim = match Simulator::new(&t, cfg) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_RUN, e),
    };
    if let Err(e) = sim.run(&mut NoObserver) {
        return fail(EXIT_RUN, e);
    }
    print!("{}", sim.smact().dump());
    ExitCode::SUCCESS
}
