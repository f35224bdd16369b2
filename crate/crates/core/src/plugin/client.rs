//! Caller side of the plugin protocol.
//!
//! [`ProtocolClient`] encodes calls into protocol bytes and decodes replies; a
//! [`Transport`] carries the bytes. [`Loopback`] hands them straight to an
//! in-process [`Plugin`] through the same router the network server uses, and
//! [`Lossy`] drops a fraction of calls for fault-injection runs.

use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use thiserror::Error;

use super::http::{self, HttpRequest, HttpResponse};
use super::{CreateResponse, DeleteRequest, DeleteResponse, PingResponse, Plugin, PluginJobRequest, StatusDoc};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    /// The plugin answered and refused (4xx).
    #[error("plugin rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
    /// Transport failure, 5xx, or an unreadable reply. Worth retrying.
    #[error("plugin unavailable: {0}")]
    Unavailable(String),
}

impl ClientError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ClientError::Unavailable(_))
    }
}

pub trait Transport: Send {
    fn send(&mut self, method: &str, path: &str, query: &str, body: &[u8]) -> Result<HttpResponse, String>;
}

/// The five protocol calls.
pub trait PluginClient: Send {
    fn create(&mut self, request: &PluginJobRequest) -> Result<String, ClientError>;
    fn status(&mut self, job_id: &str) -> Result<StatusDoc, ClientError>;
    fn logs(&mut self, job_id: &str, tail: usize) -> Result<String, ClientError>;
    fn delete(&mut self, job_id: &str) -> Result<bool, ClientError>;
    fn ping(&mut self) -> Result<PingResponse, ClientError>;
}

pub struct ProtocolClient<T> {
    transport: T,
}

impl<T: Transport> ProtocolClient<T> {
    pub fn new(transport: T) -> Self {
        ProtocolClient { transport }
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    fn call(&mut self, method: &str, path: &str, query: &str, body: &[u8]) -> Result<HttpResponse, ClientError> {
        let resp = self
            .transport
            .send(method, path, query, body)
            .map_err(ClientError::Unavailable)?;
        match resp.status {
            200..=299 => Ok(resp),
            400..=499 => Err(ClientError::Rejected {
                status: resp.status,
                message: resp.body_str().to_string(),
            }),
            s => Err(ClientError::Unavailable(format!("status {s}: {}", resp.body_str()))),
        }
    }

    fn decode<V: DeserializeOwned>(resp: HttpResponse) -> Result<V, ClientError> {
        serde_json::from_slice(&resp.body).map_err(|e| ClientError::Unavailable(format!("bad reply: {e}")))
    }
}

fn encode_query(pairs: &[(&str, &str)]) -> String {
    form_urlencoded::Serializer::new(String::new()).extend_pairs(pairs).finish()
}

impl<T: Transport> PluginClient for ProtocolClient<T> {
    fn create(&mut self, request: &PluginJobRequest) -> Result<String, ClientError> {
        let body = serde_json::to_vec(request).expect("request serializes");
        let resp = self.call("POST", "/create", "", &body)?;
        Self::decode::<CreateResponse>(resp).map(|r| r.backend_ref)
    }

    fn status(&mut self, job_id: &str) -> Result<StatusDoc, ClientError> {
        let resp = self.call("GET", "/status", &encode_query(&[("job_id", job_id)]), b"")?;
        Self::decode(resp)
    }

    fn logs(&mut self, job_id: &str, tail: usize) -> Result<String, ClientError> {
        let tail = tail.to_string();
        let resp = self.call("GET", "/logs", &encode_query(&[("job_id", job_id), ("tail", &tail)]), b"")?;
        String::from_utf8(resp.body).map_err(|e| ClientError::Unavailable(e.to_string()))
    }

    fn delete(&mut self, job_id: &str) -> Result<bool, ClientError> {
        let body = serde_json::to_vec(&DeleteRequest {
            job_id: job_id.to_string(),
        })
        .expect("request serializes");
        let resp = self.call("POST", "/delete", "", &body)?;
        Self::decode::<DeleteResponse>(resp).map(|r| r.deleted)
    }

    fn ping(&mut self) -> Result<PingResponse, ClientError> {
        let resp = self.call("GET", "/ping", "", b"")?;
        Self::decode(resp)
    }
}

pub type SharedPlugin<P> = Arc<Mutex<P>>;

/// In-process transport through [`http::handle`].
pub struct Loopback<P> {
    plugin: SharedPlugin<P>,
}

impl<P: Plugin> Loopback<P> {
    pub fn new(plugin: SharedPlugin<P>) -> Self {
        Loopback { plugin }
    }
}

impl<P: Plugin> Transport for Loopback<P> {
    fn send(&mut self, method: &str, path: &str, query: &str, body: &[u8]) -> Result<HttpResponse, String> {
        let mut plugin = self.plugin.lock().map_err(|_| "plugin lock poisoned".to_string())?;
        Ok(http::handle(
            &mut *plugin,
            HttpRequest {
                method,
                path,
                query,
                body,
            },
        ))
    }
}

/// Drops calls with probability `drop_rate`. Half the drops lose the request,
/// half lose the reply after the plugin has acted on it.
pub struct Lossy<T> {
    inner: T,
    rng: ChaCha8Rng,
    drop_rate: f64,
    dropped: u64,
}

impl<T: Transport> Lossy<T> {
    pub fn new(inner: T, drop_rate: f64, seed: u64) -> Self {
        Lossy {
            inner,
            rng: ChaCha8Rng::seed_from_u64(seed),
            drop_rate,
            dropped: 0,
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

impl<T: Transport> Transport for Lossy<T> {
    fn send(&mut self, method: &str, path: &str, query: &str, body: &[u8]) -> Result<HttpResponse, String> {
        let drop = self.rng.random::<f64>() < self.drop_rate;
        let lose_reply = self.rng.random::<bool>();
        if !drop {
            return self.inner.send(method, path, query, body);
        }
        self.dropped += 1;
        if lose_reply {
            let _ = self.inner.send(method, path, query, body);
            Err("reply lost".into())
        } else {
            Err("request lost".into())
        }
    }
}

/// Loopback client for an in-process plugin.
pub fn loopback<P: Plugin>(plugin: SharedPlugin<P>) -> ProtocolClient<Loopback<P>> {
    ProtocolClient::new(Loopback::new(plugin))
}
