//! Federated domain generalization simulator built around latent space
//! inversion: clients train locally, the server inverts their classifier
//! heads into synthetic latents, trains a latent translator on them, and the
//! clients then retrain with a translation-invariance penalty before
//! importance-weighted aggregation.

pub mod data;
pub mod error;
pub mod federation;
pub mod inversion;
pub mod nn;
pub mod report;
pub mod rng;
pub mod translator;
pub mod transport;

pub use error::{Error, Result};
