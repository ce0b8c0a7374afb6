//! Deterministic discrete-event simulation of a small software-defined
//! network under denial-of-service load, together with the in-network
//! defense that observes, classifies, identifies and blocks the attackers.
//!
//! The crate is a library plus a thin `ddosim` binary. Everything runs on a
//! virtual clock; identical scenario plus identical seed means identical
//! output bytes.

pub mod controller;
pub mod engine;
pub mod events;
pub mod report;
pub mod scenario;
pub mod sentinel;
pub mod sim;
pub mod topology;
pub mod traffic;
pub mod victim;
