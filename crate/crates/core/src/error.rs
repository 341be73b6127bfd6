use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax slice {index} has no finite entry")]
    DegenerateSlice { index: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite loss while perturbing parameter `{param}`")]
    NonFinite { param: String },
    #[error("unknown token id {0}")]
    Vocabulary(usize),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
