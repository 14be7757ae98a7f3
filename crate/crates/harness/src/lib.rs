//! Deterministic scenario runner and oracle checks for cachefs clusters.

pub mod check;
pub mod criteria;
pub mod exec;
pub mod model;
pub mod runner;
pub mod scenario;
pub mod workload;
