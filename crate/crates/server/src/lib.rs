//! Reference authorization server for agent ID tokens: discovery, client
//! registration, delegation, attestation, capabilities and revocation over
//! HTTP with JSON bodies.

pub mod audit;
pub mod config;
pub mod ratelimit;
mod routes;
mod state;

use std::sync::Arc;

use oidca_core::clock::SystemClock;

pub use config::ServerConfig;
pub use routes::{router, ApiError};
pub use state::{AppState, Stage, StartupError, TraceHook};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Startup(#[from] StartupError),
    #[error("cannot listen on {addr}: {source}")]
    Bind {
        addr: std::net::SocketAddr,
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Installs a stderr log subscriber honoring `RUST_LOG`. Safe to call twice.
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

/// Runs the server until interrupted.
pub async fn serve(config: ServerConfig) -> Result<(), ServeError> {
    let addr = config.listen;
    let state = Arc::new(AppState::build(config, Arc::new(SystemClock))?);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    tracing::info!(%addr, issuer = %state.config.issuer, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
