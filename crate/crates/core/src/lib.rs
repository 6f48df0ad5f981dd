pub mod agent;
pub mod commands;
pub mod deliberation;
pub mod error;
pub mod evaluation;
pub mod gateway;
pub mod pipeline;
pub mod prompt;
pub mod refinement;
pub mod sandbox;
pub mod store;
pub mod task;
