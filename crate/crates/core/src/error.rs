use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fixed-point iteration diverged at iteration {iteration}")]
    Divergence { iteration: usize },

    #[error("not certified invertible: Lipschitz bound {bound:.6} >= 1")]
    NotContractive { bound: f64 },

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("forward record is missing stored state {0}")]
    MissingState(usize),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("reference tensor has zero norm")]
    ZeroReference,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: &[usize],
        found: &[usize],
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            // keep the innermost index only
            e @ Error::Layer { .. } => e,
            e => Error::Layer {
                index,
                source: Box::new(e),
            },
        }
    }

    /// Strips `Layer` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            e => e,
        }
    }

    /// True when the failure is a refused or failed invertibility certificate.
    pub fn is_certificate(&self) -> bool {
        matches!(self.root(), Error::NotContractive { .. })
    }
}
