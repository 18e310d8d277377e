//! Dispatchable virtual oscillator control (dVOC) for networks of
//! grid-forming inverters.
//!
//! * [`control`]: the dVOC law, its polar/droop form and a conventional droop baseline.
//! * [`network`]: quasi-static (phasor) and dynamic (RL transient) network models.
//! * [`sim`]: fixed-step RK4 integration of controllers and network with timed events.
//! * [`analysis`]: closed-form oracles and trace post-processing.
//! * [`scenario`]: the scenario file format and the built-in test cases.

pub mod analysis;
pub mod control;
pub mod error;
pub mod network;
pub mod scenario;
pub mod sim;

pub use control::{AlphaBetaVec, DroopParams, DvocParams, DvocState, Mat2, PolarState};
pub use error::{Error, Result};
pub use network::{Branch, NodeRef, Topology};
pub use sim::{Controller, Event, Scenario, SimConfig, Trace};
