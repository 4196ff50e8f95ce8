//! HTTP chat service for the topic-switch pipeline.
//!
//! Sessions hold their own chat context. Turns within a session are
//! serialized: a message that arrives while another turn is running gets
//! 409. Every state change is appended to a per-session JSONL event log
//! and replayed on startup.

pub mod config;
pub mod error;
mod routes;
pub mod session;
pub mod state;
pub mod store;

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

pub use config::{CorsOrigins, ServiceConfig};
pub use error::ApiError;
pub use routes::router;
pub use session::{Candidate, Reply, Transcript, TurnRecord};
pub use state::{AppState, CheckpointInfo, ServiceError};

/// Serves `state` on `listener` until `shutdown` resolves, sweeping
/// expired sessions in the background.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let period = (state.config.session_ttl / 4).clamp(Duration::from_millis(10), Duration::from_secs(60));
    let sweeper = {
        let state = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(period);
            loop {
                tick.tick().await;
                let n = state.sweep_expired().await;
                if n > 0 {
                    tracing::info!("closed {n} idle sessions");
                }
            }
        })
    };
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    sweeper.abort();
    result
}

/// Loads the models, binds the configured address and serves until Ctrl-C.
pub async fn run(config: ServiceConfig) -> anyhow::Result<()> {
    let state = Arc::new(tokio::task::spawn_blocking(move || AppState::load(config)).await??);
    let listener = tokio::net::TcpListener::bind(state.config.bind).await?;
    tracing::info!(
        addr = %listener.local_addr()?,
        sessions = state.session_count(),
        epsilon = state.config.epsilon,
        k = state.default_k(),
        "serving"
    );
    serve(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await?;
    Ok(())
}
