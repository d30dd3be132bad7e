//! Latent-variable demand-response scheduling for closed-loop processes.
//!
//! The pipeline runs in five stages over file artifacts:
//!
//! 1. [`plant`] simulates an operating campaign of the closed-loop plant.
//! 2. [`manifold`] learns an encoder/decoder pair (PCA or autoencoder) that
//!    compresses the augmented process state onto a few latent variables.
//! 3. [`sysid`] identifies Hammerstein–Wiener models of each latent variable
//!    driven by the production setpoint.
//! 4. [`schedopt`] optimizes hourly setpoints against electricity prices by
//!    single shooting over the latent models and the decoder.
//! 5. [`eval`] replays schedules on the plant and writes report tables.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod manifold;
pub mod plant;
pub mod schedopt;
pub mod sysid;

pub use error::{Error, Result};
