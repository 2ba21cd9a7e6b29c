use alloc::string::String;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(alloc::vec::Vec<usize>),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("part slot {slot} exceeds capacity {capacity}")]
    Capacity { slot: usize, capacity: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at step {step} (batch seed {batch_seed:#018x})")]
    NonFiniteLoss { step: u64, batch_seed: u64 },
    #[error("invalid mesh: {0}")]
    Mesh(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}
