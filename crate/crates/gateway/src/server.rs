//! HTTP front ends. Routing and semantics live in `offload_core`; these
//! handlers only move bytes.
//!
//! The gateway runs a single controller thread that owns the [`Platform`].
//! HTTP handlers send it requests over a channel and wait for the reply; the
//! same thread steps the platform every tick.

use std::net::SocketAddr;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use offload_core::api::{self, ApiRequest, SUBMITTER_HEADER};
use offload_core::platform::Platform;
use offload_core::plugin::http::{self as plugin_http, HttpRequest, HttpResponse};
use offload_core::plugin::Plugin;
use offload_core::time::SharedClock;
use tokio::sync::oneshot;

struct ApiCall {
    method: String,
    path: String,
    query: String,
    submitter: Option<String>,
    body: Bytes,
    reply: oneshot::Sender<HttpResponse>,
}

/// Handle to the controller thread.
#[derive(Clone)]
pub struct Controller {
    tx: mpsc::Sender<ApiCall>,
}

impl Controller {
    /// Moves `platform` onto a new thread that serves API calls and steps
    /// every `tick`. The thread exits once every [`Controller`] is dropped.
    pub fn spawn(mut platform: Platform, clock: SharedClock, tick: Duration) -> (Controller, JoinHandle<()>) {
        let (tx, rx) = mpsc::channel::<ApiCall>();
        let handle = std::thread::Builder::new()
            .name("controller".into())
            .spawn(move || {
                let mut next_step = Instant::now();
                loop {
                    let wait = next_step.saturating_duration_since(Instant::now());
                    match rx.recv_timeout(wait) {
                        Ok(call) => {
                            let req = ApiRequest {
                                method: &call.method,
                                path: &call.path,
                                query: &call.query,
                                submitter: call.submitter.as_deref(),
                                body: &call.body,
                            };
                            let resp = api::handle(&mut platform, clock.now(), req);
                            let _ = call.reply.send(resp);
                        }
                        Err(mpsc::RecvTimeoutError::Timeout) => {
                            let report = platform.step(clock.now());
                            for (job, decision) in &report.decisions {
                                tracing::debug!(%job, ?decision, "admission");
                            }
                            for (u, why) in &report.rejected_updates {
                                tracing::warn!(job = %u.job, event = u.event.name(), %why, "state update refused");
                            }
                            next_step += tick;
                            if next_step < Instant::now() {
                                next_step = Instant::now() + tick;
                            }
                        }
                        Err(mpsc::RecvTimeoutError::Disconnected) => break,
                    }
                }
            })
            .expect("spawning controller thread");
        (Controller { tx }, handle)
    }

    async fn call(&self, method: &Method, uri: &Uri, headers: &HeaderMap, body: Bytes) -> HttpResponse {
        let (reply, rx) = oneshot::channel();
        let call = ApiCall {
            method: method.as_str().to_string(),
            path: uri.path().to_string(),
            query: uri.query().unwrap_or("").to_string(),
            submitter: headers
                .get(SUBMITTER_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string),
            body,
            reply,
        };
        if self.tx.send(call).is_err() {
            return HttpResponse::error(503, "controller stopped");
        }
        rx.await.unwrap_or_else(|_| HttpResponse::error(503, "controller stopped"))
    }
}

fn to_axum(r: HttpResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, r.content_type)], Body::from(r.body)).into_response()
}

async fn gateway_entry(
    State(ctl): State<Controller>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    to_axum(ctl.call(&method, &uri, &headers, body).await)
}

pub fn gateway_router(ctl: Controller) -> Router {
    Router::new().fallback(gateway_entry).with_state(ctl)
}

pub type SharedDynPlugin = Arc<Mutex<Box<dyn Plugin>>>;

async fn plugin_entry(State(plugin): State<SharedDynPlugin>, method: Method, uri: Uri, body: Bytes) -> Response {
    let resp = tokio::task::spawn_blocking(move || {
        let mut guard = match plugin.lock() {
            Ok(g) => g,
            Err(_) => return HttpResponse::error(503, "plugin lock poisoned"),
        };
        plugin_http::handle(
            &mut **guard,
            HttpRequest {
                method: method.as_str(),
                path: uri.path(),
                query: uri.query().unwrap_or(""),
                body: &body,
            },
        )
    })
    .await
    .unwrap_or_else(|e| HttpResponse::error(503, format!("plugin task failed: {e}")));
    to_axum(resp)
}

pub fn plugin_router(plugin: SharedDynPlugin) -> Router {
    Router::new().fallback(plugin_entry).with_state(plugin)
}

/// Binds `addr` and serves `router` until ctrl-c.
pub async fn serve(addr: &str, router: Router) -> std::io::Result<()> {
    serve_on(tokio::net::TcpListener::bind(addr).await?, router).await
}

pub async fn serve_on(listener: tokio::net::TcpListener, router: Router) -> std::io::Result<()> {
    let local: SocketAddr = listener.local_addr()?;
    tracing::info!(%local, "listening");
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
