use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric fault: {op} produced a non-finite value")]
    NumericFault { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("item id {id} out of range for a catalog of {n_items}")]
    IdOutOfRange { id: usize, n_items: usize },

    #[error("gate row {row} is not one-hot")]
    GateNotOneHot { row: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("protocol version {got} does not match {expected}")]
    VersionMismatch { expected: u16, got: u16 },

    #[error("training aborted at step {step}: {detail}")]
    TrainingAborted { step: u64, detail: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
