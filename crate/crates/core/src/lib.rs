//! Distributed constrained optimal consensus for single- and
//! double-integrator agent networks.

pub mod calculus;
pub mod engine;
pub mod graph;
pub mod oracle;
pub mod protocols_double;
pub mod protocols_single;
