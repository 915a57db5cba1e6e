pub mod alignment;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod objective;
pub mod rng;
pub mod trainer;
