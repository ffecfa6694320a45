//! Network front end for doateleop sessions.
//!
//! [`serve`] hosts live sessions that an operator drives over a websocket,
//! and [`replay_serve`] streams a saved trial log back over the same wire
//! format. Both expose `/session`, `/map/<name>` and `/healthz`.

mod live;
pub mod protocol;
mod replay;

use std::net::SocketAddr;
use std::path::PathBuf;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use live::{serve, ServerConfig};
pub use replay::{replay_serve, replay_serve_path, ReplayConfig};

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("invalid server configuration: {0}")]
    Config(String),
    #[error("cannot load log: {0}")]
    Log(#[from] doateleop_core::session::LogError),
    #[error("cannot write log {path}: {message}")]
    LogDir { path: PathBuf, message: String },
}

/// A bound server. Dropping it leaves the server running until the runtime
/// shuts down; call [`RunningServer::shutdown`] to stop accepting requests.
pub struct RunningServer {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    task: JoinHandle<std::io::Result<()>>,
}

impl RunningServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Waits until the server exits.
    pub async fn wait(self) -> std::io::Result<()> {
        let _keep = self.stop;
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }

    pub async fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.task.await.unwrap_or_else(|e| Err(std::io::Error::other(e)))
    }
}

async fn spawn_router(router: axum::Router, addr: SocketAddr) -> Result<RunningServer, ServeError> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })?;
    let local = listener
        .local_addr()
        .map_err(|source| ServeError::Bind { addr, source })?;
    let (stop, stopped) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    Ok(RunningServer {
        addr: local,
        stop: Some(stop),
        task,
    })
}
