//! HTTP/JSON service over a loaded model bundle and volume set.
//!
//! Endpoints: `GET /api/health`, `GET /api/volumes`, `GET /api/model`,
//! `POST /api/predict`, `POST /api/render`.

pub mod api;
pub mod state;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;

use tokio::net::TcpListener;

pub use api::{router, ApiError};
pub use state::{AppState, StateError};

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    origins: &[String],
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state, origins)).with_graceful_shutdown(shutdown).await
}

/// Binds `addr` (port 0 picks a free port) and serves in a background task.
pub async fn spawn(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(state, &[]);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            log::error!("server stopped: {e}");
        }
    });
    Ok((local, handle))
}
