//! Procedural "shader" images: a small expression language evaluated per
//! pixel, random program synthesis, and a filter for degenerate renders.

pub mod corpus;
pub mod expr;
pub mod filter;
pub mod parse;
pub mod random;
pub mod render;

pub use corpus::{build_corpus, read_corpus, write_corpus, Corpus, CorpusStats};
pub use expr::{BinOp, Expr, Func, ShaderProgram};
pub use filter::{filter_image, FilterReason, FilterReport};
pub use parse::{parse, parse_with_seeds};
pub use random::random_program;
pub use render::{pixel_center, render, squash};
