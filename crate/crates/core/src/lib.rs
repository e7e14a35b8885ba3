//! Core engine for arbitrary-modality salient object detection.
//!
//! The crate is organized around a small dense-tensor engine with reverse-mode
//! differentiation (`tensor`), the network itself (`msfe`, `dfm`, `decoder`,
//! `model`), its training objective and evaluation metrics (`loss`, `metrics`),
//! dataset/manifest tooling (`data`) and the optimization loop (`train`).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dfm;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod msfe;
pub mod nn;
pub mod runtime;
pub mod tensor;
pub mod train;

pub use error::{AmsnError, Result};
pub use tensor::{Element, Graph, NodeId, Tensor, TensorError};
