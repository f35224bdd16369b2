//! Gateway HTTP API, independent of any server framework.
//!
//! The submitter identity comes from the `X-Submitter` header and is trusted
//! as-is; there is no authentication in this gateway.

use serde::{Deserialize, Serialize};

use crate::gatekeeper::Rejection;
use crate::model::WorkloadSpec;
use crate::platform::Platform;
use crate::plugin::http::{query_param, HttpResponse};
use crate::time::Timestamp;

pub const SUBMITTER_HEADER: &str = "x-submitter";
pub const METRICS_CONTENT_TYPE: &str = "text/plain; version=0.0.4";

#[derive(Debug, Clone, Copy)]
pub struct ApiRequest<'a> {
    pub method: &'a str,
    pub path: &'a str,
    pub query: &'a str,
    pub submitter: Option<&'a str>,
    pub body: &'a [u8],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloneRequest {
    pub command: Vec<String>,
    #[serde(default)]
    pub offload_compatible: bool,
}

#[derive(Serialize)]
struct RejectionBody<'a> {
    error: &'a str,
    message: String,
    violations: Vec<String>,
}

fn rejection(r: &Rejection) -> HttpResponse {
    HttpResponse::json(
        r.http_status(),
        &RejectionBody {
            error: r.code(),
            message: r.to_string(),
            violations: r.violations(),
        },
    )
}

fn need_submitter<'a>(req: &ApiRequest<'a>) -> Result<&'a str, HttpResponse> {
    match req.submitter {
        Some(s) if !s.trim().is_empty() => Ok(s),
        _ => Err(HttpResponse::error(400, "missing X-Submitter header")),
    }
}

pub fn handle(platform: &mut Platform, now: Timestamp, req: ApiRequest<'_>) -> HttpResponse {
    let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
    match (req.method, segments.as_slice()) {
        ("POST", ["v1", "jobs"]) => {
            let submitter = match need_submitter(&req) {
                Ok(s) => s,
                Err(r) => return r,
            };
            let spec: WorkloadSpec = match serde_json::from_slice(req.body) {
                Ok(s) => s,
                Err(e) => return HttpResponse::error(400, format!("malformed workload spec: {e}")),
            };
            match platform.submit(spec, submitter, now) {
                Ok(job) => HttpResponse::json(201, &job),
                Err(r) => rejection(&r),
            }
        }
        ("POST", ["v1", "sessions", session, "clone"]) => {
            let submitter = match need_submitter(&req) {
                Ok(s) => s,
                Err(r) => return r,
            };
            let body: CloneRequest = match serde_json::from_slice(req.body) {
                Ok(b) => b,
                Err(e) => return HttpResponse::error(400, format!("malformed clone request: {e}")),
            };
            match platform.gatekeeper().session(session) {
                None => return rejection(&Rejection::SessionNotFound(session.to_string())),
                Some(t) if t.spec.owner != submitter => {
                    return rejection(&Rejection::OwnerMismatch {
                        owner: t.spec.owner.clone(),
                        submitter: submitter.to_string(),
                    })
                }
                Some(_) => {}
            }
            match platform.clone_session(session, body.command, body.offload_compatible, now) {
                Ok(job) => HttpResponse::json(201, &job),
                Err(r) => rejection(&r),
            }
        }
        ("GET", ["v1", "jobs", id]) => match platform.job(id) {
            Some(job) => HttpResponse::json(200, job),
            None => HttpResponse::error(404, format!("no job {id}")),
        },
        ("GET", ["v1", "queue"]) => HttpResponse::json(200, &platform.snapshot()),
        ("GET", ["v1", "decisions"]) => {
            let since = match query_param(req.query, "since") {
                None => Timestamp::from_millis(i64::MIN),
                Some(s) => match Timestamp::parse_rfc3339(&s) {
                    Ok(t) => t,
                    Err(e) => return HttpResponse::error(400, format!("bad since: {e}")),
                },
            };
            HttpResponse::json(200, &platform.decisions_since(since))
        }
        ("GET", ["metrics"]) => HttpResponse {
            status: 200,
            content_type: METRICS_CONTENT_TYPE,
            body: platform.metrics(now).into_bytes(),
        },
        (_, ["v1", "jobs"] | ["v1", "jobs", _] | ["v1", "queue"] | ["v1", "decisions"] | ["metrics"])
        | (_, ["v1", "sessions", _, "clone"]) => HttpResponse::error(405, "method not allowed"),
        _ => HttpResponse::error(404, "not found"),
    }
}
