use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config lists no traces")]
    NoTraces,
    #[error("config lists no policies")]
    NoPolicies,
    #[error("normalized times need `baseline` among the policies")]
    MissingBaseline,
    #[error("policy: {0}")]
    Policy(#[from] crate::pipeline::PolicyParseError),
    #[error("geometry `{0}`: {1}")]
    Geometry(String, crate::smact::GeometryError),
    #[error("trace source `{0}`: {1}")]
    TraceSource(String, String),
    #[error("core: width, issueq and rob must all be positive")]
    Core,
    #[error("memory: {0}")]
    Memory(String),
}

#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
