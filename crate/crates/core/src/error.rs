use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A requested region falls outside the phantom.
    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Fewer inliers than required to estimate a translation.
    #[error("registration failed: {inliers} inliers, {required} required")]
    RegistrationFailure { inliers: usize, required: usize },

    /// The measurement graph does not connect every node to the anchor.
    #[error("graph is disconnected: nodes {unreachable:?} unreachable from node {anchor}")]
    Disconnected { anchor: usize, unreachable: Vec<usize> },

    /// Registration failures left part of the grid unreachable.
    #[error("canonical space construction failed: edges {failed_edges:?} did not register, nodes {unreachable:?} unreachable")]
    SpaceConstruction {
        failed_edges: Vec<usize>,
        unreachable: Vec<usize>,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("unsupported file version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
