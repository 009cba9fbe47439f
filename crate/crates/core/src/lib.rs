//! Core of the deckhand GUI agent.

pub mod agents;
pub mod bench;
pub mod config;
pub mod device;
pub mod domain;
pub mod exploration;
pub mod gate;
pub mod gateway;
pub mod knowledge;
pub mod orchestrator;
pub mod perception;
