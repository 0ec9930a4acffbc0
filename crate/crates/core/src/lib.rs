//! Gradient-descent clock synchronization for multi-hop networks.
//!
//! - [`clocks`]: hardware and logical clock models, drift and delay.
//! - [`protocols`]: per-node GraDeS and PISync state machines.
//! - [`analysis`]: closed-form convergence and variance results plus a
//!   Monte-Carlo oracle for the linearized pairwise recursion.
//! - [`sim`]: deterministic discrete-event simulator.
//! - [`scenario`]: named experiment presets, summaries and CSV output.

pub mod analysis;
pub mod clocks;
pub mod parallel;
pub mod protocols;
pub mod scenario;
pub mod sim;

pub use analysis::{AnalysisError, SystemParams};
pub use clocks::{ClockError, ClockParams, DelayModel, DriftModel, HardwareClock, LogicalClock};
pub use parallel::Execution;
pub use protocols::{
    GradesState, NodeId, PisyncState, Protocol, ProtocolError, StepSize, SyncState,
};
pub use sim::{SimConfig, SimError, SkewTrace, Topology, UnitMode};
