//! Infrared small-target detection at desk scale.
//!
//! The crate contains a small dense-tensor engine with reverse-mode
//! differentiation ([`tensor`]), parameter-free SimAM attention ([`simam`]),
//! box similarity metrics including the normalized Wasserstein distance
//! ([`boxes`]), the convolutional building blocks of the network
//! ([`blocks`]), the three-scale model graph ([`model`]), detection
//! evaluation ([`eval`]), dataset IO and a synthetic scene generator
//! ([`data`]) and a deterministic training loop ([`train`]).

pub mod audit;
pub mod blocks;
pub mod data;
pub mod boxes;
pub mod error;
pub mod eval;
pub mod model;
pub mod simam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
