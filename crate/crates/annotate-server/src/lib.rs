//! Annotation service: serves sentences with proposed scopes, accepts human
//! corrections, persists them atomically and exports the finished dataset.

pub mod api;
pub mod error;
pub mod store;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

pub use api::router;
pub use error::{Result, StoreError};
pub use store::{AnnotationRecord, Document, Stats, Store};

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(store: Arc<Store>, addr: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("annotation server listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(store, ui_dir)).await
}
