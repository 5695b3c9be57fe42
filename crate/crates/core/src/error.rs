//! Crate-wide error type.
//!
//! Every fallible operation returns [`crate::Result`]. Variants carry enough
//! context to name the offending shapes, fields, or byte offsets without the
//! caller having to re-derive them.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape { op: &'static str, detail: String },
    /// A tensor was used with a graph it does not belong to, or backward
    /// was invoked on an invalid node.
    Graph { detail: String },
    /// Image or mask construction/extent violation.
    Image { detail: String },
    /// Malformed PNM stream. `offset` is the byte position where parsing
    /// stopped making sense.
    PnmFormat { offset: usize, detail: String },
    /// Filesystem failure, tagged with the path.
    Io {
        path: String,
        source: std::io::Error,
    },
    /// Bad configuration value; `field` names the key.
    Config { field: String, detail: String },
    /// Patch ledger state-machine violation.
    Ledger { detail: String },
    /// Attention-cache bookkeeping violation (stale index, dimension drift).
    Cache { detail: String },
    /// Diffusion selection failure (degenerate distribution, no path).
    Diffusion { detail: String },
    /// Weight snapshot mismatch or corruption.
    Snapshot { detail: String },
    /// Training aborted (non-finite loss) at the given step.
    Train { step: usize, detail: String },
    /// A checked evaluation produced a non-finite value.
    Eval { detail: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Graph { detail } => write!(f, "graph error: {detail}"),
            Error::Image { detail } => write!(f, "image error: {detail}"),
            Error::PnmFormat { offset, detail } => {
                write!(f, "pnm format error at byte {offset}: {detail}")
            }
            Error::Io { path, source } => write!(f, "io error on {path}: {source}"),
            Error::Config { field, detail } => write!(f, "config error in `{field}`: {detail}"),
            Error::Ledger { detail } => write!(f, "ledger error: {detail}"),
            Error::Cache { detail } => write!(f, "attention cache error: {detail}"),
            Error::Diffusion { detail } => write!(f, "diffusion error: {detail}"),
            Error::Snapshot { detail } => write!(f, "snapshot error: {detail}"),
            Error::Train { step, detail } => write!(f, "training aborted at step {step}: {detail}"),
            Error::Eval { detail } => write!(f, "evaluation error: {detail}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
