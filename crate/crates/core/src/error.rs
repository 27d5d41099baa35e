use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: parse error: {msg}")]
    Parse { line: usize, msg: String },

    #[error("line {line}: invalid system: {msg}")]
    Validation { line: usize, msg: String },

    #[error("invalid system: {0}")]
    InvalidSystem(String),

    #[error("unknown task tag `{0}`")]
    UnknownTask(String),

    #[error("no element-table entry for species {species} under task `{task}`")]
    MissingElement { species: u8, task: String },

    #[error("degenerate cell: determinant {det:e} must be positive")]
    DegenerateCell { det: f64 },

    #[error("atoms {i} and {j} overlap (image shift {shift:?})")]
    OverlappingAtoms { i: usize, j: usize, shift: [i32; 3] },

    #[error("cutoff {cutoff} needs {images} periodic images along an axis (limit {limit})")]
    ImageSearch { cutoff: f64, images: usize, limit: usize },

    #[error("shape mismatch in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("value not recorded on this tape")]
    NotOnTape,

    #[error("species {0} is outside the embedding table")]
    UnknownSpecies(u8),

    #[error("{field} {value} is outside the embedding table range")]
    OutOfRange { field: &'static str, value: i64 },

    #[error("model has no direct-force head")]
    NoForceHead,

    #[error("merged model was built for a different system header: {0}")]
    HeaderMismatch(String),

    #[error("rank-deficient composition matrix for task `{task}`; add systems with more distinct compositions")]
    RankDeficient { task: String },

    #[error("force labels are all zero; normalization scale would vanish")]
    ZeroForceScale,

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("placement failed after {attempts} attempts for a {n_atoms}-atom system")]
    Placement { attempts: usize, n_atoms: usize },

    #[error("system {index} has {n_atoms} atoms, more than max_atoms = {max_atoms}")]
    SystemTooLarge { index: usize, n_atoms: usize, max_atoms: usize },

    #[error("sampling plan: {0}")]
    Plan(String),

    #[error("non-finite {term} loss term")]
    NonFiniteLoss { term: &'static str },

    #[error("training diverged at step {step}: loss {loss:e} exceeded 1e3x the initial loss for 100 steps")]
    Diverged { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("mismatched active parameter counts: {0}")]
    ActiveSizeMismatch(String),

    #[error("scaling fit: {0}")]
    Fit(String),

    #[error("bootstrap: {failed} of {total} resamples failed to fit")]
    Bootstrap { failed: usize, total: usize },

    #[error("atoms {i} and {j} came within {distance:.4} at step {step}")]
    BlowUp { step: usize, i: usize, j: usize, distance: f64 },

    #[error("relaxation diverged: energy rose for {0} consecutive proposals")]
    RelaxDiverged(usize),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}
