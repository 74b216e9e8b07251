use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("variable does not belong to this tape")]
    ForeignVariable,

    #[error("problem `{0}` has no analytic solution")]
    NoAnalyticSolution(String),

    #[error("unknown built-in problem `{0}`")]
    UnknownProblem(String),

    #[error("rollout diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("non-finite gradient for parameter `{parameter}`")]
    NonFiniteGradient { parameter: String },

    #[error("training diverged at iteration {step}: validation loss is not finite")]
    TrainingDiverged {
        step: usize,
        partial: Box<crate::trainer::TrainingReport>,
    },

    #[error("run {run} failed: {source}")]
    Run {
        run: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Picard iteration did not converge after {sweeps} sweeps (residuals {history:?})")]
    PicardNotConverged { sweeps: usize, history: Vec<f64> },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
