//! JSON-over-HTTP sessions for sequential allocation.
//!
//! A coordinator opens a session with a prior, submits arriving cohorts and
//! gets per-unit arm assignments back, then records outcomes when they
//! arrive. Writes are guarded by an `expected_revision` token.

pub mod api;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::{create_session, record_outcomes, router, submit_batch, view_session, AppState};
pub use error::{ApiError, ErrorBody};
pub use store::{SessionRecord, SessionStore};

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub static_dir: Option<PathBuf>,
}

pub fn app(config: &ServiceConfig) -> std::io::Result<axum::Router> {
    let store = Arc::new(SessionStore::open(&config.data_dir)?);
    Ok(router(AppState { store }, config.static_dir.clone()))
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, config: &ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app(config)?).await
}
