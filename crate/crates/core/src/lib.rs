//! Graph classification with matrix capsules routed by expectation-maximisation.
//!
//! Node embeddings from a stack of GCN layers are row-stacked into one pose
//! matrix per node ([`gcn`]), EM routing groups them into progressively fewer
//! higher-level capsules ([`routing`]), and the most active final capsule is
//! classified by a small MLP ([`readout`]). All learnable maths runs on the
//! in-crate reverse-mode engine in [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gcn;
pub mod gradcheck;
pub mod model;
pub mod readout;
pub mod routing;
pub mod train;

pub use autodiff::{Tape, Tensor, Var};
pub use config::ModelConfig;
pub use data::{load_tu_dataset, Dataset, Graph};
pub use error::{Error, Result};
pub use model::Model;
pub use routing::RoutingConfig;
pub use train::{cross_validate, evaluate, train, CvReport, FoldReport};
