//! HTTP service and configuration for the shopping sandbox.

pub mod api;
pub mod config;

use std::sync::Arc;
use std::time::{Duration, Instant};

pub use api::{router, AppState};
pub use config::{ConfigError, ServerConfig};

/// Bind and serve until ctrl-c. Expired sessions are swept once a minute.
pub async fn serve(cfg: ServerConfig) -> anyhow::Result<()> {
    let env = cfg.environment()?;
    let tasks = cfg.load_tasks()?;
    tracing::info!(tasks = tasks.len(), products = env.catalog().len(), web = env.knowledge_backend(), "loaded");
    let state = Arc::new(AppState::new(env, tasks, cfg.idle_timeout()));
    let sweeper = state.clone();
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.sweep_expired(Instant::now());
            if n > 0 {
                tracing::info!(expired = n, "closed idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
