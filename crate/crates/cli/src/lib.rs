//! Experiment harness around `cglab-core`: strict JSON configs, run
//! directories and the `gen`, `train`, `eval`, `infer`, `diag` and `compare`
//! stages.

pub mod commands;
pub mod config;
pub mod run;

pub use config::ExperimentConfig;
pub use run::RunDir;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}", .0.join("; "))]
    Config(Vec<String>),
    #[error("{0}")]
    Prerequisite(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Prerequisite(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io(_) | CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Prerequisite(_) => "prerequisite",
            CliError::Numeric(_) => "numeric",
            CliError::Io(_) => "io",
            CliError::Other(_) => "error",
        }
    }

    /// One-line JSON form printed on failure.
    pub fn to_json_line(&self) -> String {
        let mut obj = serde_json::json!({ "error": self.kind(), "message": self.to_string() });
        if let CliError::Config(list) = self {
            obj["problems"] = serde_json::json!(list);
        }
        obj.to_string()
    }
}

impl From<cglab_core::Error> for CliError {
    fn from(e: cglab_core::Error) -> Self {
        use cglab_core::Error as E;
        match e {
            E::Numeric(_) => CliError::Numeric(e.to_string()),
            E::Config(_) | E::Param(_) | E::Infeasible { .. } | E::Usage(_) => {
                CliError::Config(vec![e.to_string()])
            }
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
