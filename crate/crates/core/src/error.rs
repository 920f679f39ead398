use crate::factor_graph::NodeId;

/// Errors produced by graph construction, scoring, inference and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("invalid adjacency: {0}")]
    InvalidAdjacency(String),
    #[error("operation not defined for {0} nodes")]
    UnsupportedNodeKind(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a distribution: {0}")]
    InvalidDistribution(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("label out of range: {0}")]
    LabelOutOfRange(String),
    #[error("incomplete assignment: {0}")]
    IncompleteAssignment(String),
    #[error("joint state space of {0:.3e} assignments exceeds the enumeration limit {1:.3e}")]
    StateSpaceTooLarge(f64, f64),
    #[error("empty ground truth: recall is undefined")]
    EmptyGroundTruth,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
