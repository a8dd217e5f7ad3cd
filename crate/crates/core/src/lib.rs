//! UAV aerial base stations that follow predicted user movement.
//!
//! The pipeline: ingest check-in traces ([`mobility`]), learn per-user movement
//! with echo state networks ([`esn`]), partition users among UAVs ([`clustering`]),
//! then place and fly the UAVs with cooperative tabular Q-learning ([`marl`]) over
//! an air-to-ground channel ([`channel`]). [`sim`] ties the stages together.

pub mod channel;
pub mod clustering;
pub mod esn;
pub mod fixture;
pub mod marl;
pub mod mobility;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod sim;
