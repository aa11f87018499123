//! Reduce reasoning tasks to constraint problems, decompose them along a
//! minimum-width tree decomposition, and drive agents bag by bag.

pub mod cnf;
pub mod csp;
pub mod treedecomp;
pub mod solver;
pub mod planning;
pub mod orchestrator;
pub mod agents;
pub mod schema;
pub mod report;
pub mod cli;
