//! Federated transfer learning simulator for network intrusion detection on
//! tabular IIoT flow data.
//!
//! The pipeline runs CSV loading and cleaning ([`dataset_io`], [`preprocess`]),
//! a residual 1-D convolutional classifier ([`neuralnet`]), server/client
//! federation rounds ([`federation`]), classical baselines ([`baselines`]) and
//! macro-averaged evaluation ([`metrics`]). [`cli`] ties them together behind
//! the `ftl` binary.

pub mod baselines;
pub mod cli;
pub mod dataset_io;
pub mod federation;
pub mod metrics;
pub mod neuralnet;
pub mod preprocess;
pub mod seed;
