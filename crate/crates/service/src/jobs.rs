//! Bounded job executor: a fixed pool of worker threads, at most one running
//! job per scene, cooperative cancellation.
//!
//! Locks are always taken in the order queue, busy scenes, jobs.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{SystemTime, UNIX_EPOCH};

use mvinpaint::optim::FitControl;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ServiceError, ServiceResult};
use crate::pipeline::{run_job, JobHooks, JobKind, JobSpec};
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    fn can_become(self, next: JobState) -> bool {
        matches!(
            (self, next),
            (JobState::Queued, JobState::Running)
                | (JobState::Queued, JobState::Failed)
                | (JobState::Running, JobState::Done)
                | (JobState::Running, JobState::Failed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub scene_id: String,
    pub kind: JobKind,
    /// Full configuration with defaults filled in, fixed at submission.
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 of the scene's `transforms.json` when the job was submitted.
    pub manifest_sha256: String,
    pub state: JobState,
    pub progress: f64,
    pub step: Option<String>,
    pub error: Option<String>,
    pub cancelled: bool,
    /// Paths relative to the scene directory.
    pub artifacts: Vec<String>,
    pub created_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct Entry {
    job: Job,
    spec: JobSpec,
    control: FitControl,
    /// Step index and count reported by the pipeline.
    step: (usize, usize),
}

impl Entry {
    fn transition(&mut self, next: JobState) {
        assert!(
            self.job.state.can_become(next),
            "job {} cannot go from {:?} to {:?}",
            self.job.id,
            self.job.state,
            next
        );
        self.job.state = next;
        match next {
            JobState::Running => self.job.started_ms = Some(now_ms()),
            JobState::Done | JobState::Failed => self.job.finished_ms = Some(now_ms()),
            JobState::Queued => {}
        }
    }

    fn refresh_progress(&mut self) {
        let p = match self.job.state {
            JobState::Queued => 0.0,
            JobState::Done => 1.0,
            JobState::Failed => self.job.progress,
            JobState::Running => {
                let (i, n) = self.step;
                if n == 0 {
                    0.0
                } else {
                    (i as f64 + self.control.progress().clamp(0.0, 1.0)) / n as f64
                }
            }
        };
        self.job.progress = self.job.progress.max(p.min(1.0));
    }
}

struct Inner {
    store: Store,
    jobs: Mutex<BTreeMap<String, Entry>>,
    queue: Mutex<VecDeque<String>>,
    busy_scenes: Mutex<HashSet<String>>,
    wake: Condvar,
    next_id: AtomicU64,
    shutdown: AtomicBool,
}

#[derive(Clone)]
pub struct Executor {
    inner: Arc<Inner>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl Executor {
    /// Starts `workers` threads (at least one). Job snapshots left in the
    /// store by an earlier process are loaded; ones that never finished are
    /// marked failed.
    pub fn start(store: Store, workers: usize) -> ServiceResult<Self> {
        let mut jobs = BTreeMap::new();
        let mut max_id = 0;
        if let Ok(rd) = fs::read_dir(store.jobs_dir()) {
            for e in rd.filter_map(|e| e.ok()) {
                let Ok(text) = fs::read_to_string(e.path()) else { continue };
                let Ok(mut job) = serde_json::from_str::<Job>(&text) else { continue };
                let Ok(spec) = JobSpec::from_request(job.kind, job.config.clone()) else { continue };
                if let Some(n) = job.id.strip_prefix("job-").and_then(|n| n.parse::<u64>().ok()) {
                    max_id = max_id.max(n);
                }
                if !job.state.is_terminal() {
                    job.state = JobState::Failed;
                    job.error = Some("interrupted by service restart".into());
                }
                jobs.insert(
                    job.id.clone(),
                    Entry {
                        job,
                        spec,
                        control: FitControl::new(),
                        step: (0, 0),
                    },
                );
            }
        }
        let inner = Arc::new(Inner {
            store,
            jobs: Mutex::new(jobs),
            queue: Mutex::new(VecDeque::new()),
            busy_scenes: Mutex::new(HashSet::new()),
            wake: Condvar::new(),
            next_id: AtomicU64::new(max_id + 1),
            shutdown: AtomicBool::new(false),
        });
        let handles = (0..workers.max(1))
            .map(|k| {
                let inner = inner.clone();
                std::thread::Builder::new()
                    .name(format!("job-worker-{k}"))
                    .spawn(move || worker(inner))
                    .expect("spawn job worker")
            })
            .collect();
        Ok(Executor {
            inner,
            workers: Arc::new(Mutex::new(handles)),
        })
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    /// Validates and queues a job; returns its initial snapshot.
    pub fn submit(&self, scene_id: &str, spec: JobSpec) -> ServiceResult<Job> {
        spec.validate()?;
        let transforms = self.inner.store.scene_dir(scene_id).join("transforms.json");
        self.inner.store.manifest(scene_id)?;
        let bytes = fs::read(&transforms).map_err(|e| crate::store::io(&transforms, e))?;
        let n = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let job = Job {
            id: format!("job-{n:06}"),
            scene_id: scene_id.to_string(),
            kind: spec.kind(),
            config: spec.config_json(),
            seed: spec.seed(),
            manifest_sha256: hex(&Sha256::digest(&bytes)),
            state: JobState::Queued,
            progress: 0.0,
            step: None,
            error: None,
            cancelled: false,
            artifacts: Vec::new(),
            created_ms: now_ms(),
            started_ms: None,
            finished_ms: None,
        };
        self.inner.persist(&job);
        log::info!("queued {} ({}) on scene {}", job.id, job.kind.as_str(), scene_id);
        self.inner.jobs.lock().unwrap().insert(
            job.id.clone(),
            Entry {
                job: job.clone(),
                spec,
                control: FitControl::new(),
                step: (0, 0),
            },
        );
        self.inner.queue.lock().unwrap().push_back(job.id.clone());
        self.inner.wake.notify_all();
        Ok(job)
    }

    pub fn poll(&self, id: &str) -> ServiceResult<Job> {
        let mut jobs = self.inner.jobs.lock().unwrap();
        let e = jobs
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
        e.refresh_progress();
        Ok(e.job.clone())
    }

    pub fn list(&self) -> Vec<Job> {
        let mut jobs = self.inner.jobs.lock().unwrap();
        jobs.values_mut()
            .map(|e| {
                e.refresh_progress();
                e.job.clone()
            })
            .collect()
    }

    /// Queued jobs fail at once; running ones stop at the next iteration
    /// boundary. Cancelling a finished job is a conflict.
    pub fn cancel(&self, id: &str) -> ServiceResult<Job> {
        let mut queue = self.inner.queue.lock().unwrap();
        let mut jobs = self.inner.jobs.lock().unwrap();
        let e = jobs
            .get_mut(id)
            .ok_or_else(|| ServiceError::NotFound(format!("job {id}")))?;
        match e.job.state {
            JobState::Queued => {
                queue.retain(|j| j != id);
                e.job.cancelled = true;
                e.job.error = Some("cancelled".into());
                e.transition(JobState::Failed);
                self.inner.persist(&e.job);
            }
            JobState::Running => {
                e.job.cancelled = true;
                e.control.cancel();
            }
            s => {
                return Err(ServiceError::Conflict(format!("job {id} is already {s:?}").to_lowercase()))
            }
        }
        log::info!("cancel requested for {id}");
        Ok(e.job.clone())
    }

    /// Blocks until the job is done or failed.
    pub fn wait(&self, id: &str) -> ServiceResult<Job> {
        loop {
            let job = self.poll(id)?;
            if job.state.is_terminal() {
                return Ok(job);
            }
            std::thread::sleep(std::time::Duration::from_millis(20));
        }
    }

    /// Cancels running work, stops the workers and waits for them.
    pub fn shutdown(&self) {
        self.inner.shutdown.store(true, Ordering::SeqCst);
        for e in self.inner.jobs.lock().unwrap().values() {
            if e.job.state == JobState::Running {
                e.control.cancel();
            }
        }
        self.inner.wake.notify_all();
        let handles: Vec<_> = self.workers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Inner {
    fn persist(&self, job: &Job) {
        let path = self.store.jobs_dir().join(format!("{}.json", job.id));
        if let Err(e) = serde_json::to_string_pretty(job)
            .map_err(|e| e.to_string())
            .and_then(|t| fs::write(&path, t).map_err(|e| e.to_string()))
        {
            log::error!("could not write {}: {e}", path.display());
        }
    }

    /// Pops the first queued job whose scene is idle and marks it running.
    fn claim(&self) -> Option<(String, String, JobSpec, FitControl)> {
        let mut queue = self.queue.lock().unwrap();
        loop {
            if self.shutdown.load(Ordering::SeqCst) {
                return None;
            }
            let mut busy = self.busy_scenes.lock().unwrap();
            let mut jobs = self.jobs.lock().unwrap();
            let pos = queue.iter().position(|id| {
                jobs.get(id)
                    .is_some_and(|e| !busy.contains(&e.job.scene_id))
            });
            if let Some(pos) = pos {
                let id = queue.remove(pos).expect("position is in range");
                let e = jobs.get_mut(&id).expect("queued jobs are registered");
                e.transition(JobState::Running);
                busy.insert(e.job.scene_id.clone());
                self.persist(&e.job);
                return Some((id, e.job.scene_id.clone(), e.spec.clone(), e.control.clone()));
            }
            drop(jobs);
            drop(busy);
            queue = self.wake.wait(queue).unwrap();
        }
    }

    fn finish(&self, id: &str, scene: &str, result: ServiceResult<Vec<String>>) {
        let mut jobs = self.jobs.lock().unwrap();
        if let Some(e) = jobs.get_mut(id) {
            e.refresh_progress();
            match result {
                Ok(artifacts) => {
                    e.job.artifacts = artifacts;
                    e.transition(JobState::Done);
                    e.job.progress = 1.0;
                    log::info!("{id} done");
                }
                Err(err) => {
                    if matches!(err, ServiceError::Core(mvinpaint::Error::Cancelled)) {
                        e.job.cancelled = true;
                        e.job.error = Some("cancelled".into());
                        let ckpt = self.store.stage_dir(scene).join("checkpoint.spgr");
                        if ckpt.is_file() {
                            e.job.artifacts.push("stages/checkpoint.spgr".into());
                        }
                    } else {
                        e.job.error = Some(err.to_string());
                    }
                    e.transition(JobState::Failed);
                    log::warn!("{id} failed: {}", e.job.error.as_deref().unwrap_or(""));
                }
            }
            self.persist(&e.job);
        }
        drop(jobs);
        self.busy_scenes.lock().unwrap().remove(scene);
        self.wake.notify_all();
    }
}

struct EntryHooks<'a> {
    inner: &'a Inner,
    id: &'a str,
    control: FitControl,
}

impl JobHooks for EntryHooks<'_> {
    fn control(&self) -> &FitControl {
        &self.control
    }

    fn step(&self, name: &str, index: usize, total: usize) {
        let mut jobs = self.inner.jobs.lock().unwrap();
        if let Some(e) = jobs.get_mut(self.id) {
            e.refresh_progress();
            e.step = (index, total);
            e.job.step = Some(name.to_string());
        }
        log::info!("{} step {}/{}: {name}", self.id, index + 1, total);
    }
}

fn worker(inner: Arc<Inner>) {
    while let Some((id, scene, spec, control)) = inner.claim() {
        let hooks = EntryHooks {
            inner: &inner,
            id: &id,
            control,
        };
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            run_job(&inner.store, &scene, &spec, &hooks)
        }))
        .unwrap_or_else(|_| Err(ServiceError::Internal("job panicked".into())));
        inner.finish(&id, &scene, result);
    }
}
