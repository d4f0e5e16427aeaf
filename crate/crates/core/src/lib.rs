//! Data-free knowledge distillation from procedurally generated images.
//!
//! The pipeline: render a corpus of unnatural images ([`shaderforge`]),
//! assign each image a target class the teacher does *not* predict
//! ([`curate`]), augment heavily ([`augment`]), push images across the
//! teacher's decision boundary in pre/post pairs ([`boundary`]) and train a
//! fresh student on the teacher's tempered soft outputs ([`distill`]).

pub mod error;
pub mod gradcore;
pub mod par;

pub use error::{Error, Result};
pub mod imageio;
pub mod shaderforge;
pub mod dataset;
pub mod geoshapes;
pub mod curate;
pub mod augment;
pub mod boundary;
pub mod distill;
pub mod cli;
