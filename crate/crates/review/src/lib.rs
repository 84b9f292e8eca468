//! HTTP review service for generated QnA pairs.
//!
//! Decisions are appended to a JSON-lines log and replayed on start, so the
//! process can be killed at any point without losing acknowledged work.

pub mod api;
pub mod store;

use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use synthqa_core::review::QueueFilter;
use tokio::net::TcpListener;
use tower_http::services::ServeDir;
use tracing::info;

pub use api::{router, AppState};
pub use store::{ReviewStore, StoreError, StorePaths};

pub const DEFAULT_PORT: u16 = 8787;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub dataset_path: PathBuf,
    pub decisions_path: PathBuf,
    pub chunks_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
    pub bind: SocketAddr,
    /// Static files served for every path outside `/api`.
    pub ui_dir: Option<PathBuf>,
    pub default_filter: QueueFilter,
}

impl ServeOptions {
    pub fn new(dataset_path: impl Into<PathBuf>, decisions_path: impl Into<PathBuf>) -> Self {
        Self {
            dataset_path: dataset_path.into(),
            decisions_path: decisions_path.into(),
            chunks_path: None,
            report_path: None,
            bind: SocketAddr::from((Ipv4Addr::LOCALHOST, DEFAULT_PORT)),
            ui_dir: None,
            default_filter: QueueFilter::Flagged,
        }
    }

    fn store_paths(&self) -> StorePaths {
        StorePaths {
            dataset: self.dataset_path.clone(),
            decisions: self.decisions_path.clone(),
            chunks: self.chunks_path.clone(),
            report: self.report_path.clone(),
        }
    }
}

/// Open the store and build the full application router.
pub fn app(opts: &ServeOptions) -> Result<axum::Router, StoreError> {
    let store = ReviewStore::open(opts.store_paths())?;
    info!(pairs = store.pairs().len(), decisions = store.log().len(), "review state loaded");
    let state = AppState { store: Arc::new(Mutex::new(store)), default_filter: opts.default_filter };
    let mut app = router(state);
    if let Some(dir) = &opts.ui_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    Ok(app)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Serve until ctrl-c.
pub async fn serve(opts: ServeOptions) -> Result<(), ServeError> {
    let app = app(&opts)?;
    let listener = TcpListener::bind(opts.bind).await.map_err(|source| ServeError::Bind { addr: opts.bind, source })?;
    let addr = listener.local_addr()?;
    println!("listening on http://{addr}");
    info!(%addr, "review service listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// A service running on a background runtime, for tests and embedding.
pub struct RunningService {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl RunningService {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Start the service on its own thread. Binding to port 0 picks a free port.
pub fn spawn(opts: ServeOptions) -> Result<RunningService, ServeError> {
    let app = app(&opts)?;
    let std_listener =
        std::net::TcpListener::bind(opts.bind).map_err(|source| ServeError::Bind { addr: opts.bind, source })?;
    std_listener.set_nonblocking(true)?;
    let addr = std_listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let listener = TcpListener::from_std(std_listener).expect("listener registers with runtime");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(RunningService { addr, shutdown: Some(tx), thread: Some(thread) })
}
