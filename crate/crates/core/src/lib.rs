//! Euclidean TSP toolkit: instances and tour lengths, TSPLIB input,
//! classical construction and local-search heuristics, and the hybrid
//! pointer network trained with REINFORCE against a greedy rollout
//! baseline.

pub mod error;
pub mod heuristics;
pub mod model;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod tsp;
pub mod tsplib;

pub use error::TspError;
pub use tsp::{euclidean, generate_uniform, tour_length, Instance, Point, Tour};
