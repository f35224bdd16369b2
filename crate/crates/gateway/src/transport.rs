//! Plugin protocol over real HTTP.

use std::io::Read;
use std::time::Duration;

use offload_core::plugin::client::Transport;
use offload_core::plugin::http::{HttpResponse, JSON, TEXT};

pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// `base` is e.g. `http://127.0.0.1:9101`, without a trailing slash.
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        HttpTransport {
            base: base.into().trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

fn into_response(resp: ureq::Response) -> Result<HttpResponse, String> {
    let status = resp.status();
    let content_type = if resp.content_type().starts_with("text/plain") { TEXT } else { JSON };
    let mut body = Vec::new();
    resp.into_reader()
        .take(16 << 20)
        .read_to_end(&mut body)
        .map_err(|e| format!("reading response body: {e}"))?;
    Ok(HttpResponse {
        status,
        content_type,
        body,
    })
}

impl Transport for HttpTransport {
    fn send(&mut self, method: &str, path: &str, query: &str, body: &[u8]) -> Result<HttpResponse, String> {
        let mut url = format!("{}{}", self.base, path);
        if !query.is_empty() {
            url.push('?');
            url.push_str(query);
        }
        let req = self.agent.request(method, &url);
        let result = if method == "POST" {
            req.set("content-type", JSON).send_bytes(body)
        } else {
            req.call()
        };
        match result {
            Ok(resp) | Err(ureq::Error::Status(_, resp)) => into_response(resp),
            Err(e) => Err(e.to_string()),
        }
    }
}
