//! Experiment configuration, read from TOML.
//!
//! ```toml
//! traces = ["runs/app.trace", "scenario:spectre_v1", "synthetic:locality"]
//! policies = ["baseline", "safebet", "safebet+no-bitmask"]
//! geometries = ["128x8", "512x8/4096/64"]   # default: 512x8/4096/64
//! seeds = [0, 1, 2]                          # default: [0]; generated traces only
//! output_dir = "out"                         # default: no files written
//! normalize = true                           # default: true; requires baseline
//!
//! [core]                                     # optional, all three keys
//! width = 8
//! issueq = 64
//! rob = 192
//!
//! [memory]                                   # optional, full hierarchy
//! ```
//!
//! Relative trace paths resolve against the config file's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::error::ConfigError;
use crate::harness::{ScenarioKind, SyntheticKind};
use crate::memory::MemoryConfig;
use crate::pipeline::{CoreConfig, PolicyConfig};
use crate::smact::SmactGeometry;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TraceSource {
    File(PathBuf),
    Scenario(ScenarioKind),
    Synthetic(SyntheticKind),
}

impl TraceSource {
    /// `scenario:<kind>`, `synthetic:<kind>`, or a file path.
    pub fn parse(s: &str, base: &Path) -> Result<Self, ConfigError> {
        let bad = |e: String| ConfigError::TraceSource(s.to_string(), e);
        if let Some(k) = s.strip_prefix("scenario:") {
            return k.parse().map(TraceSource::Scenario).map_err(|e| bad(e.to_string()));
        }
        if let Some(k) = s.strip_prefix("synthetic:") {
            return k.parse().map(TraceSource::Synthetic).map_err(|e| bad(e.to_string()));
        }
        if s.is_empty() {
            return Err(bad("empty path".into()));
        }
        Ok(TraceSource::File(base.join(s)))
    }

    pub fn is_generated(&self) -> bool {
        !matches!(self, TraceSource::File(_))
    }
}

impl fmt::Display for TraceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceSource::File(p) => write!(f, "{}", p.display()),
            TraceSource::Scenario(k) => write!(f, "scenario:{k}"),
            TraceSource::Synthetic(k) => write!(f, "synthetic:{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    traces: Vec<String>,
    policies: Vec<String>,
    #[serde(default)]
    geometries: Vec<String>,
    #[serde(default)]
    seeds: Vec<u64>,
    output_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    normalize: bool,
    core: Option<CoreConfig>,
    memory: Option<MemoryConfig>,
}

fn yes() -> bool {
    true
}

/// A validated experiment matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Label as written in the config, paired with its resolved source.
    pub traces: Vec<(String, TraceSource)>,
    pub policies: Vec<PolicyConfig>,
    pub geometries: Vec<SmactGeometry>,
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub normalize: bool,
    pub core: CoreConfig,
    pub memory: MemoryConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(text)?;
        if raw.traces.is_empty() {
            return Err(ConfigError::NoTraces);
        }
        if raw.policies.is_empty() {
            return Err(ConfigError::NoPolicies);
        }
        let traces = raw
            .traces
            .iter()
            .map(|s| TraceSource::parse(s, base).map(|t| (s.clone(), t)))
            .collect::<Result<Vec<_>, _>>()?;
        let policies = raw.policies.iter().map(|p| p.parse()).collect::<Result<Vec<PolicyConfig>, _>>()?;
        let geometries = if raw.geometries.is_empty() {
            vec![SmactGeometry::default()]
        } else {
            raw.geometries
                .iter()
                .map(|g| g.parse().map_err(|e| ConfigError::Geometry(g.clone(), e)))
                .collect::<Result<_, _>>()?
        };
        let cfg = ExperimentConfig {
            traces,
            policies,
            geometries,
            seeds: if raw.seeds.is_empty() { vec![0] } else { raw.seeds },
            output_dir: raw.output_dir.map(|d| base.join(d)),
            normalize: raw.normalize,
            core: raw.core.unwrap_or_default(),
            memory: raw.memory.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.traces.is_empty() {
            return Err(ConfigError::NoTraces);
        }
        if self.policies.is_empty() {
            return Err(ConfigError::NoPolicies);
        }
        if self.normalize && !self.policies.iter().any(PolicyConfig::is_baseline) {
            return Err(ConfigError::MissingBaseline);
        }
        if self.core.width == 0 || self.core.issueq == 0 || self.core.rob == 0 {
            return Err(ConfigError::Core);
        }
        self.memory.validate().map_err(ConfigError::Memory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_toml_str(s, Path::new("/cfg"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse("traces = [\"a.trace\"]\npolicies = [\"baseline\"]").unwrap();
        assert_eq!(c.traces[0].1, TraceSource::File(PathBuf::from("/cfg/a.trace")));
        assert_eq!(c.geometries, vec![SmactGeometry::default()]);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.core, CoreConfig::default());
        assert!(c.normalize);
    }

    #[test]
    fn full_config() {
        let c = parse(
            r#"
traces = ["scenario:spectre_v2", "synthetic:chunk_dense"]
policies = ["baseline", "safebet+insn-source", "nda-permissive-4"]
geometries = ["128x8", "2048x8/4096/64"]
seeds = [3, 4]
output_dir = "out"
[core]
width = 4
issueq = 32
rob = 96
"#,
        )
        .unwrap();
        assert_eq!(c.traces[0].1, TraceSource::Scenario(ScenarioKind::SpectreV2));
        assert_eq!(c.traces[1].1, TraceSource::Synthetic(SyntheticKind::ChunkDense));
        assert_eq!(c.policies.len(), 3);
        assert_eq!(c.geometries[1].entries, 2048);
        assert_eq!(c.output_dir, Some(PathBuf::from("/cfg/out")));
        assert_eq!(c.core.rob, 96);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(parse("traces = []\npolicies = [\"baseline\"]"), Err(ConfigError::NoTraces)));
        assert!(matches!(parse("traces = [\"a\"]\npolicies = []"), Err(ConfigError::NoPolicies)));
        assert!(matches!(parse("traces = [\"a\"]\npolicies = [\"safebet\"]"), Err(ConfigError::MissingBaseline)));
        assert!(parse("traces = [\"a\"]\npolicies = [\"safebet\"]\nnormalize = false").is_ok());
        assert!(matches!(parse("traces = [\"a\"]\npolicies = [\"fast\"]"), Err(ConfigError::Policy(_))));
        assert!(matches!(
            parse("traces = [\"scenario:nope\"]\npolicies = [\"baseline\"]"),
            Err(ConfigError::TraceSource(..))
        ));
        assert!(matches!(
            parse("traces = [\"a\"]\npolicies = [\"baseline\"]\ngeometries = [\"100x8\"]"),
            Err(ConfigError::Geometry(..))
        ));
        assert!(matches!(parse("traces = [\"a\"]\npolicies = [\"baseline\"]\nbogus = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            parse("traces = [\"a\"]\npolicies = [\"baseline\"]\n[core]\nwidth = 0\nissueq = 1\nrob = 1"),
            Err(ConfigError::Core)
        ));
    }
}
