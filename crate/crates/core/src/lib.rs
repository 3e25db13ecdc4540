//! Attention-based feature aggregation and correlation tracking for video
//! instance segmentation, built on a small reverse-mode tensor library.

pub mod annotation;
pub mod config;
pub mod attention;
pub mod datagen;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod hungarian;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod render;
pub mod sampling;
pub mod scalar;
pub mod selftest;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use geometry::{BBox, Mask};
pub use gradcheck::{grad_check, grad_check_report, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use params::{OpParams, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
