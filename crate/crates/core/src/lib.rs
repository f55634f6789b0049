//! Bayesian tensor-network Volterra system identification.
//!
//! A truncated Volterra model of order `D` and memory `M` is written as an
//! inner product between the `D`-fold Kronecker power of the input window
//! `(1, u(n), ..., u(n-M+1))` and a coefficient vector stored as a rank-`R`
//! canonical polyadic decomposition. Every factor matrix, the column
//! precisions `lambda`, the lag precisions `delta` and the noise precision
//! `tau` are random variables; a mean-field variational posterior over all
//! of them is fitted by coordinate ascent with closed-form updates.
//!
//! Module map:
//!
//! * [`tensor`] - Kronecker/Khatri-Rao/Hadamard primitives and CPD contraction.
//! * [`features`] - lagged input matrix, design matrices and their moments.
//! * [`model`] - posterior state, priors and initialization.
//! * [`vi`] - the variational sweep, ELBO and rank truncation.
//! * [`predict`] - Student-t predictive distribution and metrics.
//! * [`data`], [`synth`], [`persist`] - datasets, synthetic systems and model files.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is
//! enabled (the default); see [`exec::Exec`].

pub mod data;
pub mod error;
pub mod exec;
pub mod features;
pub mod model;
pub mod persist;
pub mod pipeline;
pub mod predict;
pub mod synth;
pub mod tensor;
pub mod vi;

pub use error::{Error, Result};
pub use exec::Exec;
pub use features::{build_lagged_matrix, LaggedInputMatrix};
pub use model::{init_state, FactorPosterior, GammaPosterior, ModelState, NormalizationRecord, Priors};
pub use predict::{predict_one, EvalReport, PredictiveT};
pub use tensor::CpdFactors;
pub use vi::{identify, FitConfig, FitTrace, TauSchedule};
