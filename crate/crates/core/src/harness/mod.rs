//! Run configuration, end-to-end pipeline, persistence and diagnostics.

mod ablation;
mod analysis;
mod config;
mod metrics;
mod pipeline;

use thiserror::Error;

use crate::judge::JudgeError;
use crate::policy::PolicyError;
use crate::tasks::TaskError;
use crate::trust_region::TrustRegionError;
use crate::vcrd::VcrdError;

pub use ablation::{ablate, AblationReport, Variant, VariantRow};
pub use analysis::{analyze_ratios, Histogram, RatioReport, RatioSummary};
pub use config::{RunConfig, KEYS};
pub use metrics::{
    format_record, run_id, MetricsWriter, Summary, TerminalMetrics, WeightsWriter, METRICS_HEADER,
    WEIGHTS_HEADER,
};
pub use pipeline::{
    fit_student_sft, fit_teacher_policy, generate_data, prepare, run_distill, Prepared, RunOutcome,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config file {path} not found")]
    MissingConfig { path: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(
        "teacher probe accuracy {teacher:.4} does not exceed the SFT student's {student:.4}; \
         distillation needs a stronger teacher"
    )]
    TeacherNotSuperior { teacher: f64, student: f64 },
    #[error("no instances to analyze")]
    EmptyInstances,
    #[error("json: {0}")]
    Json(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Vcrd(#[from] VcrdError),
    #[error(transparent)]
    TrustRegion(#[from] TrustRegionError),
}

impl HarnessError {
    /// Errors caused by the invocation rather than the run itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_) | HarnessError::MissingConfig { .. }
        )
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Reads a config file; a missing file is a usage error naming the path.
pub fn load_config(path: &std::path::Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            HarnessError::MissingConfig {
                path: path.display().to_string(),
            }
        } else {
            HarnessError::io(path, e)
        }
    })?;
    RunConfig::parse(&text)
}
