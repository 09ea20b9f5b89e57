pub mod tensor;
pub mod nn;
pub mod config;
pub mod corpus;
pub mod model;
pub mod gradcheck;
pub mod training;
pub mod checkpoint;
pub mod inference;
pub mod metrics;
