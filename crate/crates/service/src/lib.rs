//! HTTP service: patient registry, guarded bolus sessions and their replay.

pub mod api;
pub mod config;
pub mod error;
pub mod models;
pub mod session;
pub mod store;

pub use api::{router, serve, AppState};
pub use config::ServiceConfig;
pub use error::ServiceError;
