//! Variational inference of ancestral sequences and substitution parameters
//! on star phylogenies.
//!
//! Sequences of M taxa are modeled as descending independently from one
//! hidden ancestral sequence along M branches, under a reversible
//! nucleotide substitution model (JC69, K80 or GTR). Posteriors over the
//! ancestor, the branch lengths and the model parameters are fitted by
//! maximizing a multi-sample ELBO with reparameterized gradients from a
//! small reverse-mode autodiff engine.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod distributions;
pub mod elbo;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod seq_io;
pub mod simulator;
pub mod special;
pub mod subst;
pub mod trainer;

pub use elbo::{ElboBreakdown, LatentSampleBatch, PosteriorSpecs, PriorConfig};
pub use encoders::VariationalParameters;
pub use error::{Error, Result};
pub use metrics::RecoveryScore;
pub use seq_io::{Alignment, EncodedAlignment};
pub use simulator::{SimulatedDataset, SimulationSpec};
pub use subst::{ModelFamily, SubstitutionParams};
pub use trainer::{PointEstimates, TrainConfig, TrainReport};
