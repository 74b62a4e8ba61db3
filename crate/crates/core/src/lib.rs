//! Runtime core for proactive Asset Administration Shells.

pub mod clock;
pub mod events;
pub mod instance;
pub mod journal;
pub mod manager;
pub mod model;
pub mod package;
pub mod service_execution;
pub mod context_store;
pub mod engine;
pub mod orchestrator;
pub mod runtime;
pub mod case_study;
