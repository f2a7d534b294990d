//! Synthesis and analysis of vehicle-to-vehicle communication protocols.
//!
//! A [`protocol::ProtocolSpec`] describes which sequences of global events two
//! cars must synchronize and with which probability. [`synthesis`] turns it
//! into one communication service automaton ([`csa::Csa`]) per car,
//! [`semantics`] executes a network of them over a lossy medium, and
//! [`bounds`] computes the retransmission bounds that make the requirement
//! hold. [`medium`] maps network parameters to a drop probability.

pub mod bounds;
pub mod csa;
pub mod medium;
pub mod parse;
pub mod protocol;
pub mod semantics;
pub mod synthesis;

pub use bounds::{solve_opt, sync_prob, BoundsVector, Infeasibility, OptError};
pub use csa::{Csa, StateId, TransitionLabel};
pub use parse::{parse_protocol, parse_spec, ParseError};
pub use protocol::{CarId, FullSpec, GlobalEvent, PSequence, ProtocolSpec};
pub use semantics::{check_correctness, compute_sync_prob, run_monte_carlo};
pub use synthesis::{synthesize_all, synthesize_for_car};
