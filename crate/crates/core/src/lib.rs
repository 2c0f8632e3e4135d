//! End-to-end solar flare forecasting on synthetic full-disk imagery:
//! a deterministic autodiff substrate, S5 state-space layers, a channel-
//! selective spatial encoder, sparse masked-autoencoder pretraining,
//! composite forecasting losses, and the standard verification metrics
//! (GMGS, BSS, TSS), plus the synthetic benchmark generator and training
//! pipeline that tie them together.

pub mod autodiff;
pub mod checkpoint;
pub mod classes;
pub mod config;
pub mod data;
pub mod error;
pub mod events;
pub mod head;
pub mod mae;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod s5;
pub mod seeding;
pub mod sse;
pub mod tensor;

pub use autodiff::{Gradients, Graph, NodeId, Param};
pub use classes::{label_from_flux, FlareClass, NUM_CLASSES};
pub use tensor::{Scalar, Tensor};
