//! Joint 3-D positioning and resource allocation for multi-UAV base stations.
//!
//! The library models a downlink multi-UAV OFDMA network in an urban area where
//! buildings block air-to-ground links. Building shadows are represented as
//! polyhedral blocked regions, the channel interpolates smoothly between LoS and
//! NLoS parameters, and a penalty-based double-loop algorithm jointly optimizes
//! UAV positions, transmit powers, user association, and subcarrier assignment
//! to maximize the minimum user rate.

pub mod channel;
pub mod geometry;
pub mod netmodel;
pub mod pdlio;
pub mod scenario;
pub mod subsolver;
pub mod surrogate;

pub use channel::{ChannelEval, ChannelParams};
pub use geometry::{BlockedRegion, Building, HalfSpace};
pub use netmodel::{RateBreakdown, SolutionState};
pub use pdlio::{AlgoParams, IterationTrace, RunReport};
pub use scenario::{BenchmarkScheme, Scenario};
