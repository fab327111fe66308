//! Pipelined split learning: a dense numeric core, model partitioning, the
//! per-iteration stage graph and its makespan estimator, split point and
//! parallel batch number selection, a discrete-event simulator and an
//! in-process device/server training protocol.

// NaN-rejecting checks are written as `!(x >= 0.0)`.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost_model;
pub mod nn;
pub mod orchestrator;
pub mod optimizer;
pub mod partition;
pub mod sim;
pub mod stage_graph;
