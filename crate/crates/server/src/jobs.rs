//! Filesystem-backed store of configs, jobs and run artifacts, and the
//! in-process job queue.
//!
//! Layout under the state directory:
//! `configs/<id>.toml`, `jobs/<id>.json`, `runs/<id>/` (artifact).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use vaxopt_io::artifact::{Manifest, StageFailure};
use vaxopt_io::config::RunConfig;
use vaxopt_io::pipeline::run_and_write;

use crate::error::{ApiError, ApiResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn finished(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    /// Same as the config id.
    pub id: String,
    pub name: String,
    pub state: JobState,
    /// Every state the job has been in, in order.
    pub history: Vec<JobState>,
    #[serde(default)]
    pub failure: Option<StageFailure>,
    #[serde(default)]
    pub content_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEntry {
    pub id: String,
    pub name: String,
    pub objective: String,
}

struct Inner {
    dir: PathBuf,
    jobs: Mutex<BTreeMap<String, Job>>,
    permits: Arc<Semaphore>,
}

#[derive(Clone)]
pub struct Store(Arc<Inner>);

fn internal<E: std::fmt::Display>(e: E) -> ApiError {
    ApiError::Internal(e.to_string())
}

fn valid_id(id: &str) -> ApiResult<()> {
    if !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit()) {
        Ok(())
    } else {
        Err(ApiError::NotFound(format!("no such id `{id}`")))
    }
}

impl Store {
    /// Opens or creates a state directory. Jobs left queued or running by
    /// an earlier process are reset to queued; call [`Store::resume`] to
    /// run them.
    pub fn open(dir: &Path, max_jobs: usize) -> ApiResult<Self> {
        for sub in ["configs", "jobs", "runs"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(internal)?;
        }
        let mut jobs = BTreeMap::new();
        for entry in std::fs::read_dir(dir.join("jobs")).map_err(internal)? {
            let path = entry.map_err(internal)?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read(&path).map_err(internal)?;
                let mut job: Job = serde_json::from_slice(&text).map_err(internal)?;
                if !job.state.finished() {
                    job.state = JobState::Queued;
                    job.history.push(JobState::Queued);
                }
                jobs.insert(job.id.clone(), job);
            }
        }
        Ok(Self(Arc::new(Inner {
            dir: dir.to_path_buf(),
            jobs: Mutex::new(jobs),
            permits: Arc::new(Semaphore::new(max_jobs.max(1))),
        })))
    }

    pub fn dir(&self) -> &Path {
        &self.0.dir
    }

    pub fn run_dir(&self, id: &str) -> PathBuf {
        self.0.dir.join("runs").join(id)
    }

    fn config_path(&self, id: &str) -> PathBuf {
        self.0.dir.join("configs").join(format!("{id}.toml"))
    }

    pub fn put_config(&self, cfg: &RunConfig) -> ApiResult<ConfigEntry> {
        cfg.validate()?;
        let canonical = cfg.canonical();
        let id = canonical.id();
        std::fs::write(self.config_path(&id), canonical.to_toml_string()?).map_err(internal)?;
        Ok(entry(&id, &canonical))
    }

    pub fn config(&self, id: &str) -> ApiResult<RunConfig> {
        valid_id(id)?;
        let path = self.config_path(id);
        let text = std::fs::read_to_string(&path).map_err(|_| ApiError::NotFound(format!("no config `{id}`")))?;
        Ok(RunConfig::from_toml_str(&text)?)
    }

    pub fn configs(&self) -> ApiResult<Vec<ConfigEntry>> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(self.0.dir.join("configs")).map_err(internal)? {
            let path = e.map_err(internal)?.path();
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            out.push(entry(id, &self.config(id)?));
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    pub fn job(&self, id: &str) -> ApiResult<Job> {
        self.0
            .jobs
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("job `{id}` not found")))
    }

    pub fn jobs(&self) -> Vec<Job> {
        self.0.jobs.lock().unwrap().values().cloned().collect()
    }

    fn save(&self, job: &Job) -> ApiResult<()> {
        let path = self.0.dir.join("jobs").join(format!("{}.json", job.id));
        std::fs::write(path, serde_json::to_vec_pretty(job).map_err(internal)?).map_err(internal)
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) -> ApiResult<Job> {
        let job = {
            let mut jobs = self.0.jobs.lock().unwrap();
            let job = jobs.get_mut(id).ok_or_else(|| ApiError::NotFound(format!("job `{id}` not found")))?;
            f(job);
            job.clone()
        };
        self.save(&job)?;
        Ok(job)
    }

    /// Queues a run of the stored config `id`. A config that already has a
    /// live or completed job returns that job; a failed one is retried.
    /// The flag tells whether a new job was queued.
    pub fn submit(&self, id: &str) -> ApiResult<(Job, bool)> {
        let cfg = self.config(id)?;
        let job = {
            let mut jobs = self.0.jobs.lock().unwrap();
            if let Some(job) = jobs.get(id) {
                if job.state != JobState::Failed {
                    return Ok((job.clone(), false));
                }
            }
            let mut history = jobs.get(id).map(|j| j.history.clone()).unwrap_or_default();
            history.push(JobState::Queued);
            let job = Job {
                id: id.to_string(),
                name: cfg.name.clone(),
                state: JobState::Queued,
                history,
                failure: None,
                content_hash: None,
            };
            jobs.insert(id.to_string(), job.clone());
            job
        };
        // A retried run starts from an empty directory.
        let dir = self.run_dir(id);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(internal)?;
        }
        self.save(&job)?;
        self.spawn(id.to_string(), cfg);
        Ok((job, true))
    }

    /// Starts every queued job; used after [`Store::open`].
    pub fn resume(&self) -> ApiResult<()> {
        let queued: Vec<String> = self
            .jobs()
            .into_iter()
            .filter(|j| j.state == JobState::Queued)
            .map(|j| j.id)
            .collect();
        for id in queued {
            let cfg = self.config(&id)?;
            let dir = self.run_dir(&id);
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(internal)?;
            }
            self.save(&self.job(&id)?)?;
            self.spawn(id, cfg);
        }
        Ok(())
    }

    fn spawn(&self, id: String, cfg: RunConfig) {
        let store = self.clone();
        tokio::spawn(async move {
            let Ok(_permit) = store.0.permits.clone().acquire_owned().await else {
                return;
            };
            let _ = store.update(&id, |j| {
                j.state = JobState::Running;
                j.history.push(JobState::Running);
            });
            let dir = store.run_dir(&id);
            let outcome = tokio::task::spawn_blocking(move || run_and_write(&cfg, &dir)).await;
            let _ = store.update(&id, |j| {
                let (state, failure, hash) = match outcome {
                    Ok(Ok((art, manifest))) => match art.failure {
                        None => (JobState::Done, None, Some(manifest.content_hash)),
                        Some(f) => (JobState::Failed, Some(f), Some(manifest.content_hash)),
                    },
                    Ok(Err(e)) => (JobState::Failed, Some(stage_failure("write", e)), None),
                    Err(e) => (JobState::Failed, Some(stage_failure("worker", e)), None),
                };
                j.state = state;
                j.history.push(state);
                j.failure = failure;
                j.content_hash = hash;
            });
        });
    }

    /// Manifest of a finished run.
    pub fn manifest(&self, id: &str) -> ApiResult<Manifest> {
        let job = self.job(id)?;
        if !job.state.finished() {
            return Err(ApiError::Conflict(format!("job `{id}` is {:?}", job.state).to_lowercase()));
        }
        Manifest::load(&self.run_dir(id)).map_err(|_| ApiError::NotFound(format!("run `{id}` has no artifact")))
    }
}

fn stage_failure(stage: &str, e: impl std::fmt::Display) -> StageFailure {
    StageFailure {
        stage: stage.into(),
        message: e.to_string(),
    }
}

fn entry(id: &str, cfg: &RunConfig) -> ConfigEntry {
    ConfigEntry {
        id: id.to_string(),
        name: cfg.name.clone(),
        objective: cfg.objective.name().to_string(),
    }
}
