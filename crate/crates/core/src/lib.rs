//! Two-stream adaptive learning for domain-generalizable person re-identification.
//!
//! The crate builds a small convolutional backbone whose normalization sites
//! carry one batch-norm expert per source domain plus an adaptive layer that
//! mixes those experts with input-conditioned weights. Two streams share the
//! convolutions:
//!
//! * the domain-specific stream normalizes with one expert at a time and is
//!   scored by multi-scale query-adaptive matching, with an attention block
//!   that mixes the experts' response vectors for unlabeled images;
//! * the domain-invariant stream normalizes with the adaptive mixture and has
//!   its own matching head.
//!
//! Training alternates three phases with explicit gradient stops
//! ([`training`]), and retrieval quality is measured with mAP / CMC on a
//! held-out domain ([`evaluation`]). [`data::synthetic`] provides a
//! procedurally rendered multi-domain dataset for desk-scale experiments.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod loss;
pub mod matching;
pub mod model;
pub mod norm;
pub mod sampling;
pub mod state;
pub mod training;

pub use error::{Error, Result};

pub use backbone::{Backbone, BackboneConfig, DomainSelector, FeatureMapSet, ForwardOptions};
pub use config::ExperimentConfig;
pub use model::TalModel;
pub use nn::{BnMode, Grad};
pub use norm::{DabnHead, DsbnBank};
