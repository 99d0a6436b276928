//! Neural construction heuristics for 2D Euclidean TSP.
//!
//! One autoregressive attention policy, trained either by imitation of exact
//! tours or by REINFORCE, then decoded greedily, by sampling or by beam
//! search and benchmarked against exact and heuristic references.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod model;
pub mod rng;
pub mod search;
pub mod solvers;
pub mod training;
pub mod tsp;

pub use error::{Error, Result};
