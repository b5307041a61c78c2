//! Configuration search for latency tuning of microservice chains.

pub mod engine;
pub mod exec;
pub mod protocol;
pub mod report;
pub mod runspec;
pub mod sim;
pub mod space;
pub mod store;
pub mod trace;
pub mod trial;
