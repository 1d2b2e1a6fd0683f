//! Conversation pipeline and service surface for the assortment planner.

pub mod datastore;
pub mod http;
pub mod intent;
pub mod orchestrator;
pub mod provider;
