pub mod data;
pub mod experiment;
pub mod checks;
pub mod config;
pub mod metrics;
