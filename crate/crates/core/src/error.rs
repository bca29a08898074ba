use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the library.
///
/// The CLI maps variants onto exit codes: configuration and I/O problems are
/// usage errors (1), numerical failures (singular systems, non-convergent
/// solves, diverged training) are 2, failed certification is 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Shape mismatch while recording or re-evaluating a tape node.
    #[error("shape mismatch at tape node {node}: {detail}")]
    TapeShape { node: usize, detail: String },

    /// A linear system was rejected as numerically singular.
    #[error("{context}: numerically singular system (pivot {pivot:.3e})")]
    Singular { context: &'static str, pivot: f64 },

    /// `backward` called on a tape whose root is not a 1x1 scalar.
    #[error("backward pass needs a scalar root, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    /// An iterative solver ran out of iterations. Carries the last residual
    /// and, when tracing was on, the full residual history.
    #[error("solver did not converge: residual {residual:.3e} after {iters} iterations")]
    NonConvergence {
        iters: usize,
        residual: f64,
        trace: Vec<(usize, f64)>,
    },

    /// Scalar root-finding inside a proximal step failed.
    #[error("root finding failed at coordinate {coord}: {detail}")]
    RootFinding { coord: usize, detail: String },

    /// Invalid solver or experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A certificate check came back negative.
    #[error("certification failed: {0}")]
    Certification(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Malformed or unsupported model file.
    #[error("model file error: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Model(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::Certification(_) => 3,
            _ => 2,
        }
    }
}
