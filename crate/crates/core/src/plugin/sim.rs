//! Simulated batch sites.
//!
//! A site has a number of slots, a queue-delay distribution, a failure
//! probability and optional availability windows. Jobs become eligible at
//! `enqueued_at + delay`, start at the first instant inside a window when a
//! slot is free, and run for the duration carried in the request. Every random
//! draw comes from one seeded stream in request order, so identical request
//! streams produce identical timelines.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    tail_lines, CreateResponse, DeleteResponse, PingResponse, Plugin, PluginError, PluginJobRequest,
    RemoteState, StatusDoc, TERMINATED_EXIT_CODE,
};
use crate::resources::ResourceVector;
use crate::time::{secs_to_millis, SharedClock, Timestamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    Fixed { seconds: f64 },
    Lognormal { mu: f64, sigma: f64 },
}

impl DelayModel {
    /// One delay draw, in seconds.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DelayModel::Fixed { seconds } => seconds,
            DelayModel::Lognormal { mu, sigma } => LogNormal::new(mu, sigma)
                .expect("sigma validated non-negative")
                .sample(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid site model {site}: {reason}")]
pub struct SiteModelError {
    pub site: String,
    pub reason: String,
}

fn default_slot_size() -> ResourceVector {
    ResourceVector::cores(8).with_memory_gb(32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteModel {
    pub site: String,
    /// Maximum concurrently running jobs.
    pub slots: u32,
    pub queue_delay: DelayModel,
    #[serde(default)]
    pub failure_prob: f64,
    /// `[start_s, end_s)` windows in seconds since the epoch. Absent means
    /// always available; an empty list means never.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<Vec<[u64; 2]>>,
    #[serde(default)]
    pub seed: u64,
    /// Resources advertised per slot.
    #[serde(default = "default_slot_size")]
    pub slot_size: ResourceVector,
}

impl SiteModel {
    pub fn new(site: impl Into<String>, slots: u32, queue_delay: DelayModel) -> Self {
        SiteModel {
            site: site.into(),
            slots,
            queue_delay,
            failure_prob: 0.0,
            availability: None,
            seed: 0,
            slot_size: default_slot_size(),
        }
    }

    pub fn validate(&self) -> Result<(), SiteModelError> {
        let err = |reason: String| SiteModelError {
            site: self.site.clone(),
            reason,
        };
        if !(0.0..=1.0).contains(&self.failure_prob) {
            return Err(err(format!("failure_prob {} outside [0,1]", self.failure_prob)));
        }
        match self.queue_delay {
            DelayModel::Fixed { seconds } if seconds < 0.0 || !seconds.is_finite() => {
                return Err(err("fixed delay must be a finite non-negative number".into()))
            }
            DelayModel::Lognormal { sigma, mu } if sigma < 0.0 || !sigma.is_finite() || !mu.is_finite() => {
                return Err(err("lognormal needs finite mu and sigma >= 0".into()))
            }
            _ => {}
        }
        if let Some(windows) = &self.availability {
            let mut prev_end = 0;
            for (i, [start, end]) in windows.iter().enumerate() {
                if start >= end {
                    return Err(err(format!("window {i} is empty or reversed")));
                }
                if i > 0 && *start < prev_end {
                    return Err(err(format!("window {i} overlaps or is out of order")));
                }
                prev_end = *end;
            }
        }
        Ok(())
    }

    pub fn available_at(&self, t: Timestamp) -> bool {
        match &self.availability {
            None => true,
            Some(w) => w.iter().any(|[s, e]| {
                t >= Timestamp::from_secs(*s as i64) && t < Timestamp::from_secs(*e as i64)
            }),
        }
    }

    /// Earliest instant at or after `t` inside a window.
    pub fn next_available(&self, t: Timestamp) -> Option<Timestamp> {
        match &self.availability {
            None => Some(t),
            Some(w) => w.iter().find_map(|[s, e]| {
                let (s, e) = (Timestamp::from_secs(*s as i64), Timestamp::from_secs(*e as i64));
                if t < s {
                    Some(s)
                } else if t < e {
                    Some(t)
                } else {
                    None
                }
            }),
        }
    }

    /// First instant at which the site is available at all.
    pub fn join_time(&self) -> Option<Timestamp> {
        self.next_available(Timestamp::EPOCH)
    }

    pub fn capacity(&self) -> ResourceVector {
        self.slot_size.scaled(self.slots as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendState {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl BackendState {
    pub fn remote(self) -> RemoteState {
        match self {
            BackendState::Pending => RemoteState::Pending,
            BackendState::Running => RemoteState::Running,
            BackendState::Succeeded => RemoteState::Succeeded,
            BackendState::Failed => RemoteState::Failed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendJob {
    pub job_id: String,
    pub state: BackendState,
    pub enqueued_at: Timestamp,
    pub eligible_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub exit_code: Option<i32>,
    pub runtime_ms: i64,
    pub will_fail: bool,
    seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiredKind {
    Start,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredEvent {
    pub at: Timestamp,
    pub job_id: String,
    pub kind: FiredKind,
}

pub struct SimulatedSite {
    model: SiteModel,
    rng: ChaCha8Rng,
    clock: SharedClock,
    now: Timestamp,
    jobs: BTreeMap<String, BackendJob>,
    pending: BTreeSet<(Timestamp, u64, String)>,
    running: BTreeSet<(Timestamp, u64, String)>,
    timeline: Vec<FiredEvent>,
    seq: u64,
}

impl SimulatedSite {
    pub fn new(model: SiteModel, clock: SharedClock) -> Result<Self, SiteModelError> {
        model.validate()?;
        let now = clock.now();
        Ok(SimulatedSite {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            model,
            clock,
            now,
            jobs: BTreeMap::new(),
            pending: BTreeSet::new(),
            running: BTreeSet::new(),
            timeline: Vec::new(),
            seq: 0,
        })
    }

    pub fn model(&self) -> &SiteModel {
        &self.model
    }

    pub fn job(&self, id: &str) -> Option<&BackendJob> {
        self.jobs.get(id)
    }

    pub fn jobs(&self) -> &BTreeMap<String, BackendJob> {
        &self.jobs
    }

    pub fn running_count(&self) -> usize {
        self.running.len()
    }

    /// Every start and finish fired so far, in order.
    pub fn timeline(&self) -> &[FiredEvent] {
        &self.timeline
    }

    fn backend_ref(&self, job_id: &str) -> String {
        format!("{}/{}", self.model.site, job_id)
    }

    /// Fires every start and finish with time <= `to`, in time order.
    pub fn advance(&mut self, to: Timestamp) -> Vec<FiredEvent> {
        let mut fired = Vec::new();
        if to < self.now {
            return fired;
        }
        loop {
            let next_finish = self.running.first().map(|(t, _, _)| *t);
            let next_start = if (self.running.len() as u64) < self.model.slots as u64 {
                // clipping is monotone in eligibility, so the head of `pending` starts first
                self.pending
                    .first()
                    .and_then(|(eligible, _, _)| self.model.next_available((*eligible).max(self.now)))
            } else {
                None
            };
            let fire_finish = match (next_finish, next_start) {
                (Some(f), Some(s)) => f <= s,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => break,
            };
            let at = if fire_finish { next_finish } else { next_start }.expect("one is set");
            if at > to {
                break;
            }
            self.now = at;
            if fire_finish {
                let (_, _, id) = self.running.pop_first().expect("non-empty");
                let job = self.jobs.get_mut(&id).expect("indexed job exists");
                job.finished_at = Some(at);
                if job.will_fail {
                    job.state = BackendState::Failed;
                    job.exit_code = Some(1);
                } else {
                    job.state = BackendState::Succeeded;
                    job.exit_code = Some(0);
                }
                fired.push(FiredEvent {
                    at,
                    job_id: id,
                    kind: FiredKind::Finish,
                });
            } else {
                let (_, seq, id) = self.pending.pop_first().expect("non-empty");
                let job = self.jobs.get_mut(&id).expect("indexed job exists");
                job.state = BackendState::Running;
                job.started_at = Some(at);
                self.running.insert((at.plus_millis(job.runtime_ms), seq, id.clone()));
                fired.push(FiredEvent {
                    at,
                    job_id: id,
                    kind: FiredKind::Start,
                });
            }
        }
        self.now = to;
        self.timeline.extend(fired.iter().cloned());
        fired
    }

    fn sync(&mut self) {
        let now = self.clock.now();
        self.advance(now);
    }

    fn doc(job: &BackendJob) -> StatusDoc {
        StatusDoc {
            state: job.state.remote(),
            exit_code: job.exit_code,
            started_at: job.started_at,
            finished_at: job.finished_at,
        }
    }
}

impl Plugin for SimulatedSite {
    fn site(&self) -> &str {
        &self.model.site
    }

    fn create(&mut self, request: &PluginJobRequest) -> Result<CreateResponse, PluginError> {
        self.sync();
        if self.jobs.contains_key(&request.job_id) {
            return Ok(CreateResponse {
                backend_ref: self.backend_ref(&request.job_id),
            });
        }
        request.check()?;
        if !self.model.available_at(self.now) {
            return Err(PluginError::Unavailable(format!(
                "site {} is outside its availability window",
                self.model.site
            )));
        }
        let delay_s = self.model.queue_delay.sample(&mut self.rng);
        let will_fail = self.rng.random::<f64>() < self.model.failure_prob;
        let enqueued_at = self.now;
        let eligible_at = enqueued_at.plus_millis(secs_to_millis(delay_s));
        let seq = self.seq;
        self.seq += 1;
        self.jobs.insert(
            request.job_id.clone(),
            BackendJob {
                job_id: request.job_id.clone(),
                state: BackendState::Pending,
                enqueued_at,
                eligible_at,
                started_at: None,
                finished_at: None,
                exit_code: None,
                runtime_ms: secs_to_millis(request.expected_duration_s()),
                will_fail,
                seq,
            },
        );
        self.pending.insert((eligible_at, seq, request.job_id.clone()));
        // a zero delay may start right away
        self.advance(self.now);
        Ok(CreateResponse {
            backend_ref: self.backend_ref(&request.job_id),
        })
    }

    fn status(&mut self, job_id: &str) -> StatusDoc {
        self.sync();
        self.jobs.get(job_id).map(Self::doc).unwrap_or_else(StatusDoc::unknown)
    }

    fn logs(&mut self, job_id: &str, tail: usize) -> Result<String, PluginError> {
        self.sync();
        let job = self
            .jobs
            .get(job_id)
            .ok_or_else(|| PluginError::NotFound(format!("unknown job {job_id}")))?;
        let site = &self.model.site;
        let mut text = format!("[{site}] job {job_id} queued at {}\n", job.enqueued_at);
        if let Some(t) = job.started_at {
            text.push_str(&format!("[{site}] job {job_id} started at {t}\n"));
        }
        if let Some(t) = job.finished_at {
            text.push_str(&format!(
                "[{site}] job {job_id} {} at {t} exit_code={}\n",
                job.state.remote(),
                job.exit_code.unwrap_or(-1)
            ));
        }
        Ok(tail_lines(&text, tail))
    }

    fn delete(&mut self, job_id: &str) -> DeleteResponse {
        self.sync();
        let Some(job) = self.jobs.get_mut(job_id) else {
            return DeleteResponse { deleted: false };
        };
        match job.state {
            BackendState::Pending => {
                self.pending.remove(&(job.eligible_at, job.seq, job_id.to_string()));
                job.state = BackendState::Failed;
                job.finished_at = Some(self.now);
            }
            BackendState::Running => {
                let started = job.started_at.expect("running job has a start");
                self.running
                    .remove(&(started.plus_millis(job.runtime_ms), job.seq, job_id.to_string()));
                job.state = BackendState::Failed;
                job.finished_at = Some(self.now);
                job.exit_code = Some(TERMINATED_EXIT_CODE);
                // the freed slot may be taken immediately
                self.advance(self.now);
            }
            BackendState::Succeeded | BackendState::Failed => {}
        }
        DeleteResponse { deleted: true }
    }

    fn ping(&mut self) -> PingResponse {
        self.sync();
        let capacity = if self.model.available_at(self.now) {
            self.model.capacity()
        } else {
            ResourceVector::zero()
        };
        PingResponse {
            site: self.model.site.clone(),
            capacity,
        }
    }
}
