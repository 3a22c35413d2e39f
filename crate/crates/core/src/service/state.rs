use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use tokio::sync::{watch, Semaphore};

use super::{Experiment, ServerConfig};
use crate::adaptive::{AbOrder, TrialOutcome, TrialSpec, XIs};
use crate::analysis::ThresholdRecord;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::session::{ConditionStatus, Session, SessionHeader, SessionStatus, SessionStore};
use crate::stimuli::{Stimulus, StimulusKey, SynthesisSummary};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

pub type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CreateSession {
    pub subject_id: Option<String>,
    pub config_ref: Option<String>,
    pub seed: Option<u64>,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct StimulusUrls {
    pub reference: String,
    pub perturbed: String,
    pub a: String,
    pub b: String,
    pub x: String,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Geometry {
    pub eccentricity_deg: u32,
    pub size_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct NextTrial {
    pub session_id: String,
    #[serde(flatten)]
    pub spec: TrialSpec,
    pub stimuli: StimulusUrls,
    pub geometry: Geometry,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ResponseSubmission {
    pub trial_index: usize,
    pub response: XIs,
    #[serde(default = "yes")]
    pub gaze_valid: bool,
    #[serde(default)]
    pub client_timings: Option<serde_json::Value>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ResponseAck {
    pub accepted: bool,
    pub trial_index: usize,
    pub cursor: usize,
    pub complete: bool,
    pub staircase: ConditionStatus,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionStatusView {
    pub session_id: String,
    pub subject_id: String,
    pub status: SessionStatus,
    pub cursor: usize,
    pub total_trials: usize,
    pub conditions: Vec<ConditionStatus>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
struct StimulusRecord {
    stimulus_id: String,
    session_id: String,
    trial_index: usize,
    role: &'static str,
    image_path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthesis: Option<SynthesisSummary>,
}

struct LiveSession {
    session: Session,
    store: SessionStore,
    experiment: Arc<Experiment>,
    since_snapshot: usize,
}

type JobResult = Option<std::result::Result<Arc<Stimulus>, String>>;
type JobId = (String, StimulusKey);

/// Running and recently finished synthesis jobs. Finished ones stay so a
/// request retried after a 503 picks up the result.
#[derive(Default)]
struct Jobs {
    map: HashMap<JobId, watch::Receiver<JobResult>>,
    finished: VecDeque<JobId>,
}

const FINISHED_JOBS_KEPT: usize = 256;

pub struct ServiceState {
    config: ServerConfig,
    experiments: BTreeMap<String, Arc<Experiment>>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<LiveSession>>>>,
    /// idempotency key → (session id, creating request)
    idempotency: Mutex<HashMap<String, (String, CreateSession)>>,
    create_lock: tokio::sync::Mutex<()>,
    jobs: Mutex<Jobs>,
    workers: Arc<Semaphore>,
}

impl ServiceState {
    /// Restores every session found under the data directory.
    pub fn open(config: ServerConfig, experiments: BTreeMap<String, Experiment>) -> Result<Arc<Self>> {
        config.validate()?;
        for dir in [Self::sessions_dir(&config.data_dir), Self::stimuli_dir(&config.data_dir)] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let experiments: BTreeMap<String, Arc<Experiment>> =
            experiments.into_iter().map(|(k, v)| (k, Arc::new(v))).collect();
        let mut sessions = HashMap::new();
        let mut idempotency = HashMap::new();
        let root = Self::sessions_dir(&config.data_dir);
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| SessionStore::log_path(p).exists())
            .collect();
        dirs.sort();
        for dir in dirs {
            let (store, session) = SessionStore::open(&dir)?;
            let header = &session.header;
            let Some(experiment) = experiments.get(&header.config_ref).cloned() else {
                tracing::warn!(session = %header.session_id, config = %header.config_ref, "skipping session with unknown config");
                continue;
            };
            if let Some(key) = &header.idempotency_key {
                let req = CreateSession {
                    subject_id: Some(header.subject_id.clone()),
                    config_ref: Some(header.config_ref.clone()),
                    seed: Some(header.seed),
                    idempotency_key: Some(key.clone()),
                };
                idempotency.insert(key.clone(), (header.session_id.clone(), req));
            }
            tracing::info!(session = %header.session_id, cursor = session.cursor, "restored session");
            sessions.insert(
                header.session_id.clone(),
                Arc::new(tokio::sync::Mutex::new(LiveSession {
                    session,
                    store,
                    experiment,
                    since_snapshot: 0,
                })),
            );
        }
        Ok(Arc::new(Self {
            workers: Arc::new(Semaphore::new(config.workers)),
            config,
            experiments,
            sessions: Mutex::new(sessions),
            idempotency: Mutex::new(idempotency),
            create_lock: tokio::sync::Mutex::new(()),
            jobs: Mutex::new(Jobs::default()),
        }))
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    fn sessions_dir(root: &Path) -> PathBuf {
        root.join("sessions")
    }

    fn stimuli_dir(root: &Path) -> PathBuf {
        root.join("stimuli")
    }

    pub fn stimulus_path(&self, id: &str) -> Option<PathBuf> {
        let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        ok.then(|| Self::stimuli_dir(&self.config.data_dir).join(format!("{id}.png")))
    }

    fn live(&self, id: &str) -> ApiResult<Arc<tokio::sync::Mutex<LiveSession>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    /// Returns `(session id, created)`.
    pub async fn create_session(self: &Arc<Self>, mut req: CreateSession) -> ApiResult<(String, bool)> {
        let bad = |m: &str| ApiError::new(StatusCode::BAD_REQUEST, m);
        let subject_id = req
            .subject_id
            .clone()
            .filter(|s| !s.trim().is_empty())
            .ok_or_else(|| bad("subjectId is required"))?;
        let config_ref = req.config_ref.clone().ok_or_else(|| bad("configRef is required"))?;
        let seed = req.seed.ok_or_else(|| bad("seed is required"))?;
        let experiment = self
            .experiments
            .get(&config_ref)
            .cloned()
            .ok_or_else(|| bad(&format!("unknown config {config_ref}")))?;
        if req.idempotency_key.as_deref() == Some("") {
            req.idempotency_key = None;
        }

        let _guard = self.create_lock.lock().await;
        if let Some(key) = &req.idempotency_key {
            if let Some((id, original)) = self.idempotency.lock().unwrap().get(key) {
                if *original == req {
                    return Ok((id.clone(), false));
                }
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    format!("idempotency key {key} was used for a different request"),
                ));
            }
        }
        let session_id = format!("{:032x}", rand::random::<u128>());
        let header = SessionHeader {
            session_id: session_id.clone(),
            subject_id,
            config_ref,
            seed,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            layout: experiment.layout,
            staircase: experiment.staircase.clone(),
            reference_pool: experiment.source.reference_pool(),
            idempotency_key: req.idempotency_key.clone(),
        };
        let session = Session::new(header.clone()).map_err(|e| bad(&e.to_string()))?;
        let dir = Self::sessions_dir(&self.config.data_dir).join(&session_id);
        let store = SessionStore::create(&dir, &header).map_err(ApiError::internal)?;
        let first = session.current_trial().ok();
        self.sessions.lock().unwrap().insert(
            session_id.clone(),
            Arc::new(tokio::sync::Mutex::new(LiveSession {
                session,
                store,
                experiment: experiment.clone(),
                since_snapshot: 0,
            })),
        );
        if let Some(key) = req.idempotency_key.clone() {
            self.idempotency.lock().unwrap().insert(key, (session_id.clone(), req));
        }
        if let (true, Some(spec)) = (self.config.prefetch, first) {
            self.job(&header.config_ref, &experiment, StimulusKey::for_trial(&spec));
        }
        tracing::info!(session = %session_id, "created session");
        Ok((session_id, true))
    }

    /// Starts (or joins) the synthesis job for `key`.
    fn job(self: &Arc<Self>, config_ref: &str, experiment: &Arc<Experiment>, key: StimulusKey) -> watch::Receiver<JobResult> {
        let mut jobs = self.jobs.lock().unwrap();
        let id = (config_ref.to_string(), key.clone());
        if let Some(rx) = jobs.map.get(&id) {
            return rx.clone();
        }
        let (tx, rx) = watch::channel(None);
        jobs.map.insert(id.clone(), rx.clone());
        drop(jobs);
        let state = self.clone();
        let source = experiment.source.clone();
        tokio::spawn(async move {
            let permit = state.workers.clone().acquire_owned().await;
            let out = tokio::task::spawn_blocking(move || source.perturbed(&key))
                .await
                .map_err(|e| e.to_string())
                .and_then(|r| r.map_err(|e| e.to_string()));
            drop(permit);
            let failed = out.is_err();
            let _ = tx.send(Some(out));
            let mut jobs = state.jobs.lock().unwrap();
            if failed {
                jobs.map.remove(&id);
                return;
            }
            jobs.finished.push_back(id);
            while jobs.finished.len() > FINISHED_JOBS_KEPT {
                if let Some(old) = jobs.finished.pop_front() {
                    jobs.map.remove(&old);
                }
            }
        });
        rx
    }

    async fn perturbed(self: &Arc<Self>, config_ref: &str, experiment: &Arc<Experiment>, spec: &TrialSpec) -> ApiResult<Arc<Stimulus>> {
        let mut rx = self.job(config_ref, experiment, StimulusKey::for_trial(spec));
        let budget = Duration::from_secs_f64(self.config.latency_budget);
        let waited = tokio::time::timeout(budget, rx.wait_for(|v| v.is_some()))
            .await
            .map(|r| r.map(|v| v.clone()));
        match waited {
            Err(_) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                "stimulus synthesis exceeded the latency budget; retry",
            )),
            Ok(Err(_)) => Err(ApiError::internal("synthesis job vanished")),
            Ok(Ok(Some(Ok(s)))) => Ok(s),
            Ok(Ok(Some(Err(e)))) => Err(ApiError::internal(format!("synthesis failed: {e}"))),
            Ok(Ok(None)) => Err(ApiError::internal("synthesis job ended without a result")),
        }
    }

    fn write_stimulus(&self, id: &str, image: &ImageTensor, record: &StimulusRecord) -> ApiResult<()> {
        let path = self.stimulus_path(id).ok_or_else(|| ApiError::internal("bad stimulus id"))?;
        if path.exists() {
            return Ok(());
        }
        let tmp = path.with_extension("png.tmp");
        let write = || -> Result<()> {
            image.write_png(&tmp)?;
            let meta = path.with_extension("json");
            std::fs::write(&meta, serde_json::to_vec_pretty(record)?).map_err(|e| Error::io(&meta, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
        };
        write().map_err(ApiError::internal)
    }

    pub async fn next_trial(self: &Arc<Self>, session_id: &str) -> ApiResult<NextTrial> {
        let live = self.live(session_id)?;
        let guard = live.lock().await;
        if guard.session.is_complete() {
            return Err(ApiError::new(StatusCode::GONE, "session exhausted"));
        }
        let spec = guard.session.current_trial().map_err(ApiError::internal)?;
        let config_ref = guard.session.header.config_ref.clone();
        let experiment = guard.experiment.clone();
        let stimulus = self.perturbed(&config_ref, &experiment, &spec).await?;
        let reference = experiment
            .source
            .reference(&spec.reference_id)
            .map_err(ApiError::internal)?;

        let base = format!("{session_id}-{:05}", spec.trial_index);
        let (ref_id, pert_id) = (format!("{base}-r"), format!("{base}-p"));
        let record = |id: &str, role: &'static str, synthesis: Option<SynthesisSummary>| StimulusRecord {
            stimulus_id: id.to_string(),
            session_id: session_id.to_string(),
            trial_index: spec.trial_index,
            role,
            image_path: format!("{id}.png"),
            synthesis,
        };
        self.write_stimulus(&ref_id, &reference, &record(&ref_id, "reference", None))?;
        self.write_stimulus(
            &pert_id,
            &stimulus.image,
            &record(&pert_id, "perturbed", Some(stimulus.summary.clone())),
        )?;
        let url = |id: &str| format!("/stimuli/{id}");
        let (a, b) = match spec.ab_order {
            AbOrder::ReferenceFirst => (url(&ref_id), url(&pert_id)),
            AbOrder::PerturbedFirst => (url(&pert_id), url(&ref_id)),
        };
        let x = if spec.x_is == XIs::A { a.clone() } else { b.clone() };
        Ok(NextTrial {
            session_id: session_id.to_string(),
            geometry: Geometry {
                eccentricity_deg: spec.condition.eccentricity_deg,
                size_deg: spec.size_deg,
            },
            stimuli: StimulusUrls {
                reference: url(&ref_id),
                perturbed: url(&pert_id),
                a,
                b,
                x,
            },
            spec,
        })
    }

    pub async fn submit(self: &Arc<Self>, session_id: &str, sub: ResponseSubmission) -> ApiResult<ResponseAck> {
        let live = self.live(session_id)?;
        let mut guard = live.lock().await;
        let cursor = guard.session.cursor;
        if sub.trial_index != cursor {
            let what = if sub.trial_index < cursor { "already answered" } else { "out of order" };
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!("trial {} {what}; expecting {cursor}", sub.trial_index),
            ));
        }
        if guard.session.is_complete() {
            return Err(ApiError::new(StatusCode::CONFLICT, "session complete"));
        }
        let spec = guard.session.current_trial().map_err(ApiError::internal)?;
        let mut outcome = TrialOutcome::scored(&spec, sub.response, sub.gaze_valid);
        outcome.client_timings = sub.client_timings;

        let mut next = guard.session.clone();
        let record = next.apply(outcome).map_err(ApiError::internal)?;
        guard.store.append(&record).map_err(ApiError::internal)?;
        guard.session = next;
        guard.since_snapshot += 1;
        if self.config.snapshot_every > 0 && (guard.since_snapshot >= self.config.snapshot_every || guard.session.is_complete()) {
            if let Err(e) = guard.store.write_snapshot(&guard.session) {
                tracing::warn!(session = %session_id, error = %e, "snapshot failed; the log still covers it");
            } else {
                guard.since_snapshot = 0;
            }
        }
        let staircase = guard.session.condition_status()[spec.condition.index()].clone();
        let complete = guard.session.is_complete();
        if self.config.prefetch && !complete {
            if let Ok(upcoming) = guard.session.current_trial() {
                let config_ref = guard.session.header.config_ref.clone();
                self.job(&config_ref, &guard.experiment, StimulusKey::for_trial(&upcoming));
            }
        }
        Ok(ResponseAck {
            accepted: true,
            trial_index: record.trial_index,
            cursor: guard.session.cursor,
            complete,
            staircase,
        })
    }

    pub async fn status(&self, session_id: &str) -> ApiResult<SessionStatusView> {
        let live = self.live(session_id)?;
        let guard = live.lock().await;
        let s = &guard.session;
        Ok(SessionStatusView {
            session_id: session_id.to_string(),
            subject_id: s.header.subject_id.clone(),
            status: s.status,
            cursor: s.cursor,
            total_trials: s.total_trials(),
            conditions: s.condition_status(),
        })
    }

    pub async fn results(&self, session_id: &str) -> ApiResult<Vec<ThresholdRecord>> {
        let live = self.live(session_id)?;
        let guard = live.lock().await;
        Ok(guard.session.results())
    }

    /// Copy of the full session state, for tests and tooling.
    pub async fn session_snapshot(&self, session_id: &str) -> ApiResult<Session> {
        let live = self.live(session_id)?;
        let guard = live.lock().await;
        Ok(guard.session.clone())
    }
}
