//! Online training of neural surrogates from simulations streamed by parallel
//! clients, with the Lorenz-63 system as testbed.
//!
//! Simulation clients ([`launcher`]) stream time steps over a small binary
//! protocol ([`protocol`]) to an ingestion server ([`server`]) that pairs
//! consecutive steps into samples and pushes them into a memory buffer
//! ([`buffer`]). The [`trainer`] draws batches from that buffer, or from
//! epoch-shuffled offline datasets ([`datasets`]) for the baselines, and fits a
//! multilayer perceptron ([`nn`]). [`eval`] rolls trained models out
//! autoregressively and [`experiment`] wires everything into runs and suites.

pub mod buffer;
pub mod config;
pub mod datasets;
pub mod eval;
pub mod experiment;
pub mod launcher;
pub mod lorenz;
pub mod nn;
pub mod plot;
pub mod protocol;
pub mod server;
pub mod trainer;
