use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("layer {layer}: {message}")]
    Shape { layer: usize, message: String },

    #[error("syntax error at line {line}, column {column}: expected {}", expected.join(" or "))]
    Syntax {
        line: usize,
        column: usize,
        expected: Vec<String>,
    },

    #[error("unknown identifier `{0}`")]
    UnknownIdentifier(String),

    #[error("function `{name}` takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
    },

    #[error("class {class} is starved: {available} candidate example(s), {needed} needed")]
    StarvedClass {
        class: usize,
        available: usize,
        needed: usize,
    },

    #[error("corpus survival rate {rate:.4} fell below 1% over {window} attempts")]
    DegenerateCorpus { rate: f64, window: usize },

    #[error("bad BDKD checkpoint: {0}")]
    Format(String),

    #[error("{0}")]
    Config(String),

    /// A text artifact (manifest, label list) that does not parse.
    #[error("malformed {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
