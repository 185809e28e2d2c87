//! Bi-temporal remote-sensing change detection with 3-D convolutional
//! feature fusion.
//!
//! The crate builds from the ground up: a dense 5-D tensor type with
//! reverse-mode differentiation ([`tensor`], [`graph`], [`ops`]), a
//! five-stage (2+1)-D residual encoder whose temporal convolutions fuse the
//! two acquisitions during feature extraction ([`encoder`]), adjacent-level
//! cross-fusion with a time-folded squeeze-and-excitation gate ([`afcf`]), a
//! full-scale skip-connection decoder ([`decoder`]), hybrid BCE + Dice loss
//! and confusion-matrix metrics ([`loss`], [`metrics`]), and a training /
//! evaluation / inference pipeline with a synthetic paired-tile dataset
//! generator ([`data`], [`train`]).

pub mod error;
pub mod graph;
pub mod ops;
pub mod optim;
pub mod tensor;

pub mod gradcheck;
pub mod layers;

pub mod afcf;
pub mod decoder;
pub mod encoder;
pub mod model;

pub mod loss;
pub mod metrics;

pub mod config;
pub mod data;
pub mod io;
pub mod render;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Shape5, Tensor5};
