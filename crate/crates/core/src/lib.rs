//! Continual learning over pathway-partitioned networks.
//!
//! A [`pathway::ParamStore`] splits one flat parameter vector into a shared
//! block and `K` pathway-specific blocks. Tasks are routed to pathways by a
//! small meta-network ([`router::Router`]), previously used parameters are
//! anchored by usage-weighted and Fisher-weighted quadratic penalties
//! ([`regularization`]), and every forward/backward pass is booked on an
//! [`energy::EnergyLedger`]. The [`harness`] module runs whole task streams
//! for the pathway method and its monolithic baselines and writes reports.

pub mod energy;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod pathway;
pub mod regularization;
pub mod router;
pub mod snapshot;
pub mod tasks;

mod util;

pub use error::{Error, Result};
