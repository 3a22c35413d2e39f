//! Transport-agnostic experiment sessions: a plan, 54 live staircases and a
//! cursor, persisted as an append-only JSONL trial log plus snapshots.
//!
//! Log lines carry the schema tag `mame-log/1`. The first line holds the
//! session header; each following line one answered trial. Replaying the
//! log reproduces the session state bitwise.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptive::{
    init_staircase, plan_session, staircase_update, threshold_estimate, Condition, PlanLayout, SessionPlan,
    StaircaseConfig, StaircaseState, StaircaseStatus, TrialOutcome, TrialSpec,
};
use crate::analysis::ThresholdRecord;
use crate::error::{Error, Result};

pub const LOG_SCHEMA: &str = "mame-log/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionHeader {
    pub session_id: String,
    pub subject_id: String,
    pub config_ref: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
    pub layout: PlanLayout,
    pub staircase: StaircaseConfig,
    pub reference_pool: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Active,
    Paused,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrialRecord {
    pub trial_index: usize,
    pub spec: TrialSpec,
    pub outcome: TrialOutcome,
    /// Whether the outcome moved its staircase; false once that condition
    /// has converged.
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConditionStatus {
    pub condition: Condition,
    pub current_target: f64,
    pub reversal_count: usize,
    pub trial_count: usize,
    pub status: StaircaseStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Session {
    pub header: SessionHeader,
    pub plan: SessionPlan,
    pub staircases: Vec<StaircaseState>,
    pub cursor: usize,
    pub status: SessionStatus,
}

impl Session {
    pub fn new(header: SessionHeader) -> Result<Self> {
        if header.subject_id.is_empty() {
            return Err(Error::Config("subject id must not be empty".into()));
        }
        if header.reference_pool.is_empty() {
            return Err(Error::Config("empty reference pool".into()));
        }
        let plan = plan_session(header.seed, header.layout)?;
        let staircases = Condition::all()
            .into_iter()
            .map(|c| init_staircase(c, &header.staircase))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            header,
            plan,
            staircases,
            cursor: 0,
            status: SessionStatus::Active,
        })
    }

    pub fn total_trials(&self) -> usize {
        self.plan.len()
    }

    pub fn is_complete(&self) -> bool {
        self.cursor >= self.total_trials()
    }

    /// The trial awaiting a response. Stable until [`Session::apply`].
    pub fn current_trial(&self) -> Result<TrialSpec> {
        self.plan
            .trial_spec(self.cursor, &self.staircases, &self.header.reference_pool)
    }

    /// Scores nothing itself: the outcome must already say whether the
    /// response was correct. Outcomes for conditions whose staircase has
    /// converged are recorded but leave the staircase as it is.
    pub fn apply(&mut self, outcome: TrialOutcome) -> Result<TrialRecord> {
        let spec = self.current_trial()?;
        let k = spec.condition.index();
        let applied = self.staircases[k].status == StaircaseStatus::Running;
        let next = if applied {
            Some(staircase_update(&self.staircases[k], &outcome)?)
        } else {
            None
        };
        if let Some(s) = next {
            self.staircases[k] = s;
        }
        self.cursor += 1;
        if self.is_complete() {
            self.status = SessionStatus::Complete;
        }
        Ok(TrialRecord {
            trial_index: spec.trial_index,
            spec,
            outcome,
            applied,
        })
    }

    pub fn condition_status(&self) -> Vec<ConditionStatus> {
        self.staircases
            .iter()
            .map(|s| ConditionStatus {
                condition: s.condition,
                current_target: s.current_target,
                reversal_count: s.reversals.len(),
                trial_count: s.trial_count,
                status: s.status,
            })
            .collect()
    }

    /// Threshold records for every staircase that met its reversal quota.
    pub fn results(&self) -> Vec<ThresholdRecord> {
        self.staircases
            .iter()
            .filter_map(|s| {
                threshold_estimate(s).ok().map(|t| ThresholdRecord {
                    subject_id: self.header.subject_id.clone(),
                    condition: s.condition,
                    threshold_value: t,
                })
            })
            .collect()
    }

    /// Rebuilds a session from its header and answered trials, checking each
    /// logged spec against the regenerated one.
    pub fn replay<'a>(header: SessionHeader, trials: impl IntoIterator<Item = &'a TrialRecord>) -> Result<Self> {
        let mut session = Self::new(header)?;
        session.replay_onto(trials)?;
        Ok(session)
    }

    fn replay_onto<'a>(&mut self, trials: impl IntoIterator<Item = &'a TrialRecord>) -> Result<()> {
        for t in trials {
            if t.trial_index < self.cursor {
                continue;
            }
            if t.trial_index != self.cursor {
                return Err(Error::Format(format!(
                    "trial log jumps from {} to {}",
                    self.cursor, t.trial_index
                )));
            }
            let expected = self.current_trial()?;
            if expected != t.spec {
                return Err(Error::Format(format!(
                    "logged trial {} does not match its regenerated spec",
                    t.trial_index
                )));
            }
            self.apply(t.outcome.clone())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine {
    Session { schema: String, header: SessionHeader },
    Trial { schema: String, #[serde(flatten)] record: TrialRecord },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Snapshot {
    schema: String,
    session: Session,
}

/// On-disk home of one session: `log.jsonl` and `snapshot.json`.
#[derive(Debug)]
pub struct SessionStore {
    dir: PathBuf,
    log: File,
}

impl SessionStore {
    pub fn log_path(dir: &Path) -> PathBuf {
        dir.join("log.jsonl")
    }

    pub fn snapshot_path(dir: &Path) -> PathBuf {
        dir.join("snapshot.json")
    }

    /// Creates the directory and writes the header line durably.
    pub fn create(dir: &Path, header: &SessionHeader) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = Self::log_path(dir);
        let log = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut store = Self { dir: dir.to_path_buf(), log };
        store.append_line(&LogLine::Session {
            schema: LOG_SCHEMA.into(),
            header: header.clone(),
        })?;
        Ok(store)
    }

    fn append_line(&mut self, line: &LogLine) -> Result<()> {
        let path = Self::log_path(&self.dir);
        let mut bytes = serde_json::to_vec(line)?;
        bytes.push(b'\n');
        self.log.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
        self.log.sync_data().map_err(|e| Error::io(&path, e))
    }

    /// Returns once the record is on disk.
    pub fn append(&mut self, record: &TrialRecord) -> Result<()> {
        self.append_line(&LogLine::Trial {
            schema: LOG_SCHEMA.into(),
            record: record.clone(),
        })
    }

    /// Atomic replace via a temporary file.
    pub fn write_snapshot(&self, session: &Session) -> Result<()> {
        let path = Self::snapshot_path(&self.dir);
        let tmp = self.dir.join("snapshot.json.tmp");
        let snap = Snapshot {
            schema: LOG_SCHEMA.into(),
            session: session.clone(),
        };
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&snap)?)?;
            f.sync_all()?;
            std::fs::rename(&tmp, &path)
        };
        write().map_err(|e| Error::io(&path, e))
    }

    /// Reads the header and every complete trial line. A torn final line,
    /// left by a crash mid-write, is ignored.
    pub fn read_log(path: &Path) -> Result<(SessionHeader, Vec<TrialRecord>)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = Vec::new();
        for line in BufReader::new(file).lines() {
            lines.push(line.map_err(|e| Error::io(path, e))?);
        }
        let mut header = None;
        let mut trials = Vec::new();
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = match serde_json::from_str(line) {
                Ok(p) => p,
                Err(_) if i == last && header.is_some() => break,
                Err(e) => return Err(Error::Format(format!("{}:{}: {e}", path.display(), i + 1))),
            };
            match parsed {
                LogLine::Session { schema, header: h } => {
                    check_schema(&schema)?;
                    if header.replace(h).is_some() {
                        return Err(Error::Format(format!("{}: second session header", path.display())));
                    }
                }
                LogLine::Trial { schema, record } => {
                    check_schema(&schema)?;
                    if header.is_none() {
                        return Err(Error::Format(format!("{}: trial before header", path.display())));
                    }
                    trials.push(record);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Format(format!("{}: no session header", path.display())))?;
        Ok((header, trials))
    }

    /// Restores the session from the snapshot (if any) plus the log lines
    /// after it, and reopens the log for appending.
    pub fn open(dir: &Path) -> Result<(Self, Session)> {
        let log_path = Self::log_path(dir);
        let (header, trials) = Self::read_log(&log_path)?;
        let snap_path = Self::snapshot_path(dir);
        let mut session = match std::fs::read(&snap_path) {
            Ok(bytes) => {
                let snap: Snapshot = serde_json::from_slice(&bytes)?;
                check_schema(&snap.schema)?;
                if snap.session.header != header {
                    return Err(Error::Format(format!("{}: snapshot header differs from log", dir.display())));
                }
                snap.session
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Session::new(header)?,
            Err(e) => return Err(Error::io(&snap_path, e)),
        };
        session.replay_onto(&trials)?;
        // Drop a torn tail so new lines start cleanly.
        let current = std::fs::read(&log_path).map_err(|e| Error::io(&log_path, e))?;
        if !current.ends_with(b"\n") {
            let keep = current.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
            let f = OpenOptions::new()
                .write(true)
                .open(&log_path)
                .map_err(|e| Error::io(&log_path, e))?;
            f.set_len(keep as u64).map_err(|e| Error::io(&log_path, e))?;
            f.sync_all().map_err(|e| Error::io(&log_path, e))?;
        }
        let log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        Ok((
            Self {
                dir: dir.to_path_buf(),
                log,
            },
            session,
        ))
    }
}

fn check_schema(schema: &str) -> Result<()> {
    if schema != LOG_SCHEMA {
        return Err(Error::Format(format!("unsupported log schema {schema:?}")));
    }
    Ok(())
}
