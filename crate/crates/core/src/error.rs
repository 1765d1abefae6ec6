use thiserror::Error;

/// Errors surfaced by feature ingestion, preprocessing and the classifiers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed feature file: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {got}{}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("negative feature value {value} (class {class_id}, row {row}, dim {dim})")]
    NegativeFeature {
        class_id: u32,
        row: usize,
        dim: usize,
        value: f64,
    },

    #[error("negative entry {0} fed to the power transform")]
    NegativeInput(f64),

    #[error("class {0} holds no vectors")]
    EmptyClass(u32),

    #[error("duplicate class id {0}")]
    DuplicateClass(u32),

    #[error("episode spec infeasible: {0}")]
    InfeasibleSpec(String),

    #[error("stores disagree on classes or counts: {0}")]
    StoreMismatch(String),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("degenerate support: class {0} has zero-norm mean")]
    DegenerateSupport(usize),

    #[error("vector is not unit norm (|norm - 1| = {0:.3e})")]
    NormViolation(f64),

    #[error("non-finite value during {0}")]
    NonFinite(String),

    #[error("projection center source missing: {0}")]
    MissingCenterSource(String),

    #[error("too few samples: got {got}, need at least {min}")]
    TooFewSamples { got: usize, min: usize },

    #[error("constant input: variance is zero")]
    ConstantInput,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("episode with seed {seed} failed: {source}")]
    EpisodeFailed { seed: u64, source: Box<Error> },
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

pub type Result<T> = std::result::Result<T, Error>;
