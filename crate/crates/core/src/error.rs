use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("primitive `{op}` is missing attribute {attr}")]
    MissingAttribute { op: &'static str, attr: &'static str },

    #[error("backward root must be a scalar, got a {rows}x{cols} tensor")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{phase} training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { phase: &'static str, epoch: usize },

    #[error("two-body separation {0:e} below collision threshold")]
    Collision(f64),

    #[error("stiff or singular trajectory: step size underflow at t = {t}")]
    StepUnderflow { t: f64 },

    #[error("integration exceeded {steps} steps before t = {t}")]
    TooManySteps { steps: usize, t: f64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("all {0} rollouts failed")]
    AllRolloutsFailed(usize),
}
