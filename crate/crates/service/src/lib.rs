//! HTTP service and command line front end for the workflow engine.

pub mod api;
pub mod backend;
pub mod payload;
pub mod registry;

use std::net::SocketAddr;
use std::path::PathBuf;

pub use api::{router, AppState};
pub use backend::{BackendMode, Engine};
pub use registry::Registry;

pub const DEFAULT_PORT: u16 = 8080;

/// `GENIUS_DATA_DIR`, or `./genius-data`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("GENIUS_DATA_DIR").map_or_else(|| PathBuf::from("genius-data"), PathBuf::from)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
