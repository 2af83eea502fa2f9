//! Grid-structured conditional random fields with convolutional unary
//! potentials, trained jointly by stochastic maximum likelihood.
//!
//! The negative phase of the likelihood gradient is estimated with Gibbs
//! samples (contrastive divergence or its persistent variant). Small
//! instances can be checked against an exact enumeration oracle.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod net;
pub mod oracle;
pub mod pgm;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod workflow;

pub use error::{CrfError, Result};
pub use model::{
    GradientBundle, GridCrfModel, GridGeometry, LabelSpace, Labeling, OffsetClass, PairwiseTable, UnaryField,
};
