//! Byte-level router for the plugin protocol.

use serde::Serialize;

use super::{DeleteRequest, Plugin, PluginError, PluginJobRequest};

pub const JSON: &str = "application/json";
pub const TEXT: &str = "text/plain; charset=utf-8";

/// Default `tail` for `/logs` when the query omits it.
pub const DEFAULT_TAIL: usize = 100;

#[derive(Debug, Clone, Copy)]
pub struct HttpRequest<'a> {
    pub method: &'a str,
    pub path: &'a str,
    /// Raw query string without the leading `?`.
    pub query: &'a str,
    pub body: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn json<T: Serialize>(status: u16, value: &T) -> Self {
        HttpResponse {
            status,
            content_type: JSON,
            body: serde_json::to_vec(value).expect("protocol types serialize"),
        }
    }

    pub fn text(status: u16, body: String) -> Self {
        HttpResponse {
            status,
            content_type: TEXT,
            body: body.into_bytes(),
        }
    }

    pub fn error(status: u16, message: impl Into<String>) -> Self {
        #[derive(Serialize)]
        struct ErrorBody {
            error: String,
        }
        Self::json(status, &ErrorBody { error: message.into() })
    }

    pub fn body_str(&self) -> &str {
        std::str::from_utf8(&self.body).unwrap_or("")
    }
}

impl From<PluginError> for HttpResponse {
    fn from(e: PluginError) -> Self {
        HttpResponse::error(e.http_status(), e.to_string())
    }
}

/// Looks up `key` in a URL query string, percent-decoded.
pub fn query_param(query: &str, key: &str) -> Option<String> {
    form_urlencoded::parse(query.as_bytes())
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.into_owned())
}

pub fn handle(plugin: &mut dyn Plugin, req: HttpRequest<'_>) -> HttpResponse {
    match (req.method, req.path) {
        ("POST", "/create") => {
            let request: PluginJobRequest = match serde_json::from_slice(req.body) {
                Ok(r) => r,
                Err(e) => return HttpResponse::error(400, format!("malformed request: {e}")),
            };
            match plugin.create(&request) {
                Ok(resp) => HttpResponse::json(201, &resp),
                Err(e) => e.into(),
            }
        }
        ("GET", "/status") => match query_param(req.query, "job_id") {
            Some(id) => HttpResponse::json(200, &plugin.status(&id)),
            None => HttpResponse::error(400, "missing job_id"),
        },
        ("GET", "/logs") => {
            let Some(id) = query_param(req.query, "job_id") else {
                return HttpResponse::error(400, "missing job_id");
            };
            let tail = match query_param(req.query, "tail") {
                None => DEFAULT_TAIL,
                Some(t) => match t.parse::<usize>() {
                    Ok(n) => n,
                    Err(_) => return HttpResponse::error(400, "tail must be a non-negative integer"),
                },
            };
            match plugin.logs(&id, tail) {
                Ok(text) => HttpResponse::text(200, text),
                Err(e) => e.into(),
            }
        }
        ("POST", "/delete") => match serde_json::from_slice::<DeleteRequest>(req.body) {
            Ok(d) => HttpResponse::json(200, &plugin.delete(&d.job_id)),
            Err(e) => HttpResponse::error(400, format!("malformed request: {e}")),
        },
        ("GET", "/ping") => HttpResponse::json(200, &plugin.ping()),
        (_, "/create" | "/status" | "/logs" | "/delete" | "/ping") => {
            HttpResponse::error(405, "method not allowed")
        }
        _ => HttpResponse::error(404, "not found"),
    }
}
