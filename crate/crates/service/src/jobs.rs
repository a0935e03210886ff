//! Long-running finetune and sweep jobs, persisted as JSON records so a
//! restarted service can report on them.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Finetune,
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobStatus {
    pub job_id: String,
    pub kind: JobKind,
    pub session_id: String,
    pub state: JobState,
    /// Fraction complete in `[0, 1]`.
    pub progress: f64,
    pub message: String,
    /// Sweep id once a sweep job is done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_id: Option<String>,
}

pub struct JobBoard {
    dir: PathBuf,
    jobs: Mutex<HashMap<String, JobStatus>>,
}

impl JobBoard {
    /// Loads the records under `dir`. Jobs that were queued or running when
    /// the previous process stopped are marked failed.
    pub fn open(dir: impl Into<PathBuf>) -> anyhow::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut jobs = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let mut job: JobStatus = serde_json::from_slice(&fs::read(&path)?)?;
                if !job.state.is_finished() {
                    job.state = JobState::Failed;
                    job.message = "interrupted by a service restart".into();
                    write_record(&dir, &job)?;
                }
                jobs.insert(job.job_id.clone(), job);
            }
        }
        Ok(JobBoard { dir, jobs: Mutex::new(jobs) })
    }

    pub fn create(&self, kind: JobKind, session_id: &str) -> anyhow::Result<JobStatus> {
        let job = JobStatus {
            job_id: uuid::Uuid::new_v4().simple().to_string(),
            kind,
            session_id: session_id.to_owned(),
            state: JobState::Queued,
            progress: 0.0,
            message: "queued".into(),
            sweep_id: None,
        };
        write_record(&self.dir, &job)?;
        self.lock().insert(job.job_id.clone(), job.clone());
        Ok(job)
    }

    pub fn get(&self, job_id: &str) -> Option<JobStatus> {
        self.lock().get(job_id).cloned()
    }

    /// True while any job of the session is queued or running.
    pub fn session_busy(&self, session_id: &str) -> bool {
        self.lock().values().any(|j| j.session_id == session_id && !j.state.is_finished())
    }

    /// Applies `f` to the job. State never moves backwards, progress never
    /// decreases, and finished jobs are frozen.
    pub fn update(&self, job_id: &str, f: impl FnOnce(&mut JobStatus)) {
        let mut jobs = self.lock();
        let Some(job) = jobs.get_mut(job_id) else { return };
        if job.state.is_finished() {
            return;
        }
        let before = job.clone();
        f(job);
        job.state = job.state.max(before.state);
        job.progress = job.progress.clamp(before.progress, 1.0);
        if job.state == JobState::Done {
            job.progress = 1.0;
        }
        // Progress ticks are frequent; only state changes hit the disk.
        if job.state != before.state {
            if let Err(e) = write_record(&self.dir, job) {
                tracing::warn!(job = job_id, error = %e, "could not persist job record");
            }
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, JobStatus>> {
        self.jobs.lock().unwrap_or_else(|p| p.into_inner())
    }
}

fn write_record(dir: &Path, job: &JobStatus) -> anyhow::Result<()> {
    let path = dir.join(format!("{}.json", job.job_id));
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(job)?)?;
    fs::rename(tmp, path)?;
    Ok(())
}
