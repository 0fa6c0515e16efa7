use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document: {0}")]
    Parse(String),

    /// Dimension mismatch. `layer` is the index into the layer list when the
    /// mismatch is attributable to one layer.
    #[error("shape mismatch{}: {message}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Shape {
        layer: Option<usize>,
        message: String,
    },

    #[error("invalid input domain: {0}")]
    Domain(String),

    /// A phase constraint contradicts the interval of its neuron; the
    /// constrained region is empty.
    #[error("phase constraint on relu layer {layer}, neuron {neuron} is infeasible")]
    Conflict { layer: usize, neuron: usize },

    #[error("no ambiguous neuron left to split")]
    NoAmbiguousNeuron,

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<Option<usize>>, message: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            message: message.into(),
        }
    }
}
