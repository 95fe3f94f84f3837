//! Commonsense-aware cross-modal alignment for fast video temporal grounding.
//!
//! Proposals from a 2D temporal map are fused with a concept graph, text
//! queries attend over the same concepts, and both meet in a pair of common
//! spaces mixed by a learned weight. Proposal-side projections are
//! query-independent, so they are precomputed into a gallery and a query
//! costs one text encoding plus dot products.

pub mod alignment;
pub mod concepts;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gallery;
pub mod interaction;
pub mod io;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod train;

pub use config::{Ablation, ModelConfig, TrainConfig};
pub use error::{CcaError, Result};
pub use numerics::{Tape, Tensor, Var};
pub use params::ModelParams;
