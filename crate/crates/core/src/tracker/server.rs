use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{ConnectInfo, RawQuery, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use super::{announce_body, scrape_query_body, unix_now, Tracker};

/// A running tracker service.
pub struct TrackerHandle {
    addr: SocketAddr,
    tracker: Arc<Tracker>,
    shutdown: Option<oneshot::Sender<()>>,
    server: JoinHandle<io::Result<()>>,
    expiry: JoinHandle<()>,
}

impl TrackerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn announce_url(&self) -> String {
        format!("http://{}/announce", self.addr)
    }

    pub fn tracker(&self) -> &Arc<Tracker> {
        &self.tracker
    }

    /// Stop accepting requests and wait for in-flight ones to finish.
    /// Journal lines are flushed as they are written, so nothing is lost.
    pub async fn shutdown(mut self) -> io::Result<()> {
        self.expiry.abort();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        match self.server.await {
            Ok(res) => res,
            Err(e) => Err(io::Error::other(e)),
        }
    }
}

pub async fn serve(tracker: Arc<Tracker>, bind: SocketAddr) -> io::Result<TrackerHandle> {
    let listener = TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let app = Router::new()
        .route("/announce", get(announce))
        .route("/scrape", get(scrape))
        .with_state(tracker.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        axum::serve(
            listener,
            app.into_make_service_with_connect_info::<SocketAddr>(),
        )
        .with_graceful_shutdown(async {
            let _ = rx.await;
        })
        .await
    });

    let ttl = tracker.config().peer_ttl;
    let period = Duration::from_secs(u64::from(tracker.config().interval));
    let expiring = tracker.clone();
    let expiry = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        tick.tick().await;
        loop {
            tick.tick().await;
            let removed = expiring.expire_peers(unix_now(), ttl);
            if removed > 0 {
                tracing::debug!(removed, "expired stale peers");
            }
        }
    });
    tracing::info!(%addr, "tracker listening");
    Ok(TrackerHandle {
        addr,
        tracker,
        shutdown: Some(tx),
        server,
        expiry,
    })
}

async fn announce(
    State(tracker): State<Arc<Tracker>>,
    ConnectInfo(remote): ConnectInfo<SocketAddr>,
    RawQuery(query): RawQuery,
) -> impl IntoResponse {
    let body = announce_body(
        &tracker,
        query.as_deref().unwrap_or(""),
        Some(remote.ip()),
        unix_now(),
    );
    ([(header::CONTENT_TYPE, "text/plain")], body)
}

async fn scrape(
    State(tracker): State<Arc<Tracker>>,
    RawQuery(query): RawQuery,
) -> impl IntoResponse {
    let body = scrape_query_body(&tracker, query.as_deref().unwrap_or(""));
    ([(header::CONTENT_TYPE, "text/plain")], body)
}
