use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_with::skip_serializing_none;

use rendertime_service::AppState;

use crate::opts::{need, CliError, CliResult};

#[skip_serializing_none]
#[derive(Debug, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeArgs {
    /// Volume manifest; every volume is loaded and encoded at startup
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Model bundle; without it predict and render answer 503
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Listen address [default: 127.0.0.1:8080]
    #[arg(long)]
    pub addr: Option<String>,
    /// Comma-separated allowed CORS origins [default: any]
    #[arg(long)]
    pub cors: Option<String>,
}

pub fn serve(a: ServeArgs) -> CliResult<()> {
    let manifest = need(a.manifest, "manifest")?;
    let addr: SocketAddr = a
        .addr
        .as_deref()
        .unwrap_or("127.0.0.1:8080")
        .parse()
        .map_err(|e| CliError::Usage(format!("invalid --addr: {e}")))?;
    let origins: Vec<String> =
        a.cors.as_deref().map(|c| c.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()).unwrap_or_default();
    let state = AppState::load(&manifest, a.model.as_deref()).context("loading service state")?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        rendertime_service::serve(listener, Arc::new(state), &origins, shutdown).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
