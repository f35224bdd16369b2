//! Local process executor: runs the request's command as a host process.
//!
//! Each job gets a scratch directory holding `output.log` (stdout and stderr)
//! and, while the job runs, a `secrets/` directory with one mode-0600 file per
//! shipped secret. The image string is kept as metadata only.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};

use super::{
    tail_lines, CreateResponse, DeleteResponse, PingResponse, Plugin, PluginError, PluginJobRequest,
    RemoteState, StatusDoc, TERMINATED_EXIT_CODE,
};
use crate::resources::ResourceVector;
use crate::time::{SharedClock, Timestamp};

pub const SECRETS_DIR_ENV: &str = "OFFLOAD_SECRETS_DIR";

struct LocalJob {
    request: PluginJobRequest,
    dir: PathBuf,
    state: RemoteState,
    child: Option<Child>,
    started_at: Option<Timestamp>,
    finished_at: Option<Timestamp>,
    exit_code: Option<i32>,
}

pub struct LocalExecutor {
    site: String,
    slots: usize,
    slot_size: ResourceVector,
    scratch: PathBuf,
    clock: SharedClock,
    jobs: BTreeMap<String, LocalJob>,
    queue: VecDeque<String>,
}

fn exit_code(status: ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    -1
}

fn dir_name(job_id: &str) -> String {
    job_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_private(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    opts.open(path)?.write_all(bytes)
}

impl LocalExecutor {
    pub fn new(site: impl Into<String>, slots: usize, scratch: impl Into<PathBuf>, clock: SharedClock) -> std::io::Result<Self> {
        let scratch = scratch.into();
        fs::create_dir_all(&scratch)?;
        Ok(LocalExecutor {
            site: site.into(),
            slots,
            slot_size: ResourceVector::cores(1).with_memory_gb(2),
            scratch,
            clock,
            jobs: BTreeMap::new(),
            queue: VecDeque::new(),
        })
    }

    pub fn with_slot_size(mut self, slot_size: ResourceVector) -> Self {
        self.slot_size = slot_size;
        self
    }

    pub fn scratch(&self) -> &Path {
        &self.scratch
    }

    pub fn job_dir(&self, job_id: &str) -> Option<&Path> {
        self.jobs.get(job_id).map(|j| j.dir.as_path())
    }

    fn running(&self) -> usize {
        self.jobs.values().filter(|j| j.state == RemoteState::Running).count()
    }

    fn finish(job: &mut LocalJob, code: Option<i32>, at: Timestamp, state: RemoteState) {
        job.state = state;
        job.exit_code = code;
        job.finished_at = Some(at);
        job.child = None;
        let _ = fs::remove_dir_all(job.dir.join("secrets"));
    }

    fn spawn(job: &mut LocalJob, now: Timestamp) {
        let log_path = job.dir.join("output.log");
        let spawned = (|| -> std::io::Result<Child> {
            let out = File::create(&log_path)?;
            let err = out.try_clone()?;
            let (program, args) = job.request.command.split_first().expect("validated non-empty");
            Command::new(program)
                .args(args)
                .envs(&job.request.env)
                .env(SECRETS_DIR_ENV, job.dir.join("secrets"))
                .current_dir(&job.dir)
                .stdin(Stdio::null())
                .stdout(out)
                .stderr(err)
                .spawn()
        })();
        job.started_at = Some(now);
        match spawned {
            Ok(child) => {
                job.state = RemoteState::Running;
                job.child = Some(child);
            }
            Err(e) => {
                let _ = fs::write(&log_path, format!("spawn failed: {e}\n"));
                Self::finish(job, Some(127), now, RemoteState::Failed);
            }
        }
    }

    /// Reaps finished children and starts queued jobs while slots are free.
    pub fn refresh(&mut self) {
        let now = self.clock.now();
        for job in self.jobs.values_mut() {
            if let Some(child) = job.child.as_mut() {
                if let Ok(Some(status)) = child.try_wait() {
                    let code = exit_code(status);
                    let state = if code == 0 { RemoteState::Succeeded } else { RemoteState::Failed };
                    Self::finish(job, Some(code), now, state);
                }
            }
        }
        while self.running() < self.slots {
            let Some(id) = self.queue.pop_front() else { break };
            if let Some(job) = self.jobs.get_mut(&id) {
                if job.state == RemoteState::Pending {
                    Self::spawn(job, now);
                }
            }
        }
    }

    /// Blocks until `job_id` leaves the running state. Test and demo helper.
    pub fn wait(&mut self, job_id: &str) {
        if let Some(child) = self.jobs.get_mut(job_id).and_then(|j| j.child.as_mut()) {
            let _ = child.wait();
        }
        self.refresh();
    }
}

impl Plugin for LocalExecutor {
    fn site(&self) -> &str {
        &self.site
    }

    fn create(&mut self, request: &PluginJobRequest) -> Result<CreateResponse, PluginError> {
        let backend_ref = format!("{}/{}", self.site, request.job_id);
        if self.jobs.contains_key(&request.job_id) {
            return Ok(CreateResponse { backend_ref });
        }
        request.check()?;
        let secrets = request.decoded_secrets()?;
        let dir = self.scratch.join(dir_name(&request.job_id));
        let io = |e: std::io::Error| PluginError::Unavailable(format!("scratch directory: {e}"));
        fs::create_dir_all(dir.join("secrets")).map_err(io)?;
        for (name, bytes) in &secrets {
            write_private(&dir.join("secrets").join(dir_name(name)), bytes).map_err(io)?;
        }
        let mut stored = request.clone();
        stored.secret_bundle.clear();
        self.jobs.insert(
            request.job_id.clone(),
            LocalJob {
                request: stored,
                dir,
                state: RemoteState::Pending,
                child: None,
                started_at: None,
                finished_at: None,
                exit_code: None,
            },
        );
        self.queue.push_back(request.job_id.clone());
        self.refresh();
        Ok(CreateResponse { backend_ref })
    }

    fn status(&mut self, job_id: &str) -> StatusDoc {
        self.refresh();
        match self.jobs.get(job_id) {
            Some(j) => StatusDoc {
                state: j.state,
                exit_code: j.exit_code,
                started_at: j.started_at,
                finished_at: j.finished_at,
            },
            None => StatusDoc::unknown(),
        }
    }

    fn logs(&mut self, job_id: &str, tail: usize) -> Result<String, PluginError> {
        self.refresh();
        let job = self
            .jobs
            .get(job_id)
            .ok_or_else(|| PluginError::NotFound(format!("unknown job {job_id}")))?;
        let text = fs::read_to_string(job.dir.join("output.log")).unwrap_or_default();
        Ok(tail_lines(&text, tail))
    }

    fn delete(&mut self, job_id: &str) -> DeleteResponse {
        self.refresh();
        let now = self.clock.now();
        let Some(job) = self.jobs.get_mut(job_id) else {
            return DeleteResponse { deleted: false };
        };
        match job.state {
            RemoteState::Running => {
                if let Some(mut child) = job.child.take() {
                    let _ = child.kill();
                    let code = child.wait().map(exit_code).unwrap_or(TERMINATED_EXIT_CODE);
                    // a process that exited on its own just before the kill keeps its code
                    let state = if code == 0 { RemoteState::Succeeded } else { RemoteState::Failed };
                    Self::finish(job, Some(code), now, state);
                }
            }
            RemoteState::Pending => {
                Self::finish(job, None, now, RemoteState::Failed);
                self.queue.retain(|q| q != job_id);
            }
            _ => {}
        }
        self.refresh();
        DeleteResponse { deleted: true }
    }

    fn ping(&mut self) -> PingResponse {
        PingResponse {
            site: self.site.clone(),
            capacity: self.slot_size.scaled(self.slots as u64),
        }
    }
}

impl Drop for LocalExecutor {
    fn drop(&mut self) {
        for job in self.jobs.values_mut() {
            if let Some(mut child) = job.child.take() {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
    }
}
