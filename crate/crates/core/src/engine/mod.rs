//! The task-farming engine: sole owner of experiment state, the write-ahead
//! journal and the accounts.
//!
//! Every mutation is expressed as a [`RecordBody`]. [`Engine::persist`]
//! validates the record against the current state, appends it to the journal
//! and only then applies it. Replay runs the very same validation and apply
//! code, so a journal always reproduces the state it was written from.

mod accounts;
pub mod journal;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use accounts::{allocation_cost, Accounts, Commitment, LengthMismatch, ResourceLedger};
pub use journal::{
    read_lines, AllocationRecord, Created, FileJournal, JobSeed, JournalRecord, JournalStore, MemoryJournal,
    RecordBody, StorageError, Trigger,
};

use crate::broker::RunConfig;
use crate::dispatch::{retryable, AgentReport};
use crate::model::{
    qos_update, AttemptRecord, Experiment, GridDollars, Job, JobEvent, JobId, JobState, ModelError, Outcome, Phase,
    QoSConstraints, ResourceId, Secs,
};
use crate::plan::{parse_plan, JobSpec, PlanError};
use crate::scheduler::{Infeasibility, RateProfile};
use crate::trading::Contract;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    StorageFailure(#[from] StorageError),
    #[error("corrupt journal after sequence {last_good}: {reason}")]
    CorruptJournal { last_good: u64, reason: String },
    #[error("no open attempt for job {0}")]
    UnknownAttempt(JobId),
    #[error("job {0} is executing")]
    JobExecuting(JobId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("authorizing {amount} G$ would exceed the budget ({spent} spent, {committed} committed, budget {budget})")]
    BudgetViolation {
        amount: GridDollars,
        spent: GridDollars,
        committed: GridDollars,
        budget: GridDollars,
    },
    #[error("experiment is in phase {found:?}, expected {expected:?}")]
    PhaseMismatch { expected: Phase, found: Phase },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("invalid record: {0}")]
    Invalid(String),
}

/// Everything the journal determines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub experiment: Experiment,
    pub config: RunConfig,
    pub plan_text: String,
    pub profile: RateProfile,
    /// Last quantum marked.
    pub quantum: Option<u64>,
    pub calibration_rounds: u64,
    /// Since when the current allocation has been infeasible, and why.
    pub infeasible: Option<(Secs, Infeasibility)>,
    pub seq: u64,
    pub t: Secs,
}

/// Effects of one validated record, applied after it is durable.
#[derive(Default)]
struct Patch {
    jobs: Vec<Job>,
    qos: Option<QoSConstraints>,
    phase: Option<(Phase, Option<Phase>)>,
    quantum: Option<u64>,
    allocation: Option<(bool, Option<(Secs, Infeasibility)>)>,
    commit: Option<(JobId, Commitment)>,
    close: Option<(JobId, GridDollars, AttemptRecord)>,
}

fn invalid(msg: impl Into<String>) -> EngineError {
    EngineError::Invalid(msg.into())
}

impl EngineState {
    fn from_created(t: Secs, created: &Created) -> Result<Self, EngineError> {
        let plan = parse_plan(&created.plan)?;
        created.qos.validate()?;
        let mut experiment = Experiment::new(created.id.clone(), plan, created.qos.clone());
        experiment.clock_origin = created.config.clock_origin;
        for seed in &created.jobs {
            if experiment.jobs.contains_key(&seed.id) {
                return Err(invalid(format!("duplicate job id {}", seed.id)));
            }
            experiment
                .jobs
                .insert(seed.id, Job::new(seed.id, seed.spec.clone(), seed.nominal_cpu_seconds));
        }
        Ok(EngineState {
            experiment,
            config: created.config.clone(),
            plan_text: created.plan.clone(),
            profile: RateProfile::default(),
            quantum: None,
            calibration_rounds: 0,
            infeasible: None,
            seq: 1,
            t,
        })
    }

    fn job(&self, id: JobId) -> Result<&Job, EngineError> {
        self.experiment.jobs.get(&id).ok_or(EngineError::UnknownJob(id))
    }

    fn live(&self) -> Result<(), EngineError> {
        if self.experiment.phase.is_terminal() {
            return Err(ModelError::ExperimentTerminal(self.experiment.phase).into());
        }
        Ok(())
    }

    /// Checks `record` against the current state and computes its effects.
    fn prepare(&self, record: &JournalRecord) -> Result<Patch, EngineError> {
        if record.seq != self.seq + 1 {
            return Err(invalid(format!("sequence {} after {}", record.seq, self.seq)));
        }
        if record.t < self.t {
            return Err(invalid(format!("time {} before {}", record.t, self.t)));
        }
        let t = record.t;
        let mut patch = Patch::default();
        match &record.body {
            RecordBody::ExperimentCreated(_) => return Err(invalid("experiment already created")),
            RecordBody::JobsAdded { jobs } => {
                self.live()?;
                let mut seen = std::collections::BTreeSet::new();
                for seed in jobs {
                    if self.experiment.jobs.contains_key(&seed.id) || !seen.insert(seed.id) {
                        return Err(invalid(format!("duplicate job id {}", seed.id)));
                    }
                    patch
                        .jobs
                        .push(Job::new(seed.id, seed.spec.clone(), seed.nominal_cpu_seconds));
                }
            }
            RecordBody::QoSChanged { qos } => {
                let mut scratch = Experiment {
                    jobs: BTreeMap::new(),
                    ..self.experiment.clone()
                };
                qos_update(&mut scratch, qos.clone())?;
                patch.qos = Some(qos.clone());
            }
            RecordBody::PhaseChanged { from, to, .. } => {
                let current = self.experiment.phase;
                if *from != current {
                    return Err(EngineError::PhaseMismatch {
                        expected: *from,
                        found: current,
                    });
                }
                self.live()?;
                if from == to {
                    return Err(invalid("phase change to the same phase"));
                }
                let paused_from = match (*from, *to) {
                    (f, Phase::Paused) => Some(f),
                    (Phase::Paused, _) => None,
                    _ => self.experiment.paused_from,
                };
                patch.phase = Some((*to, paused_from));
            }
            RecordBody::QuantumMark { quantum } => {
                if self.quantum.is_some_and(|q| *quantum <= q) {
                    return Err(invalid(format!("quantum {quantum} not after {:?}", self.quantum)));
                }
                patch.quantum = Some(*quantum);
            }
            RecordBody::AllocationComputed(alloc) => {
                self.live()?;
                let mut touched: BTreeMap<JobId, Job> = BTreeMap::new();
                for m in &alloc.moves {
                    let job = match touched.remove(&m.job) {
                        Some(j) => j,
                        None => self.job(m.job)?.clone(),
                    };
                    let mut job = job;
                    if job.state == JobState::Executing {
                        return Err(EngineError::JobExecuting(m.job));
                    }
                    if job.assigned_resource != m.from {
                        return Err(invalid(format!("job {} is not on {:?}", m.job, m.from)));
                    }
                    if m.from.is_some() {
                        job.apply(&JobEvent::Unassign).map_err(ModelError::from)?;
                    }
                    if let Some(to) = &m.to {
                        job.apply(&JobEvent::Assign(to.clone())).map_err(ModelError::from)?;
                    }
                    touched.insert(m.job, job);
                }
                patch.jobs = touched.into_values().collect();
                let infeasible = alloc.infeasible.clone().map(|why| {
                    let since = self.infeasible.as_ref().map_or(t, |(s, _)| *s);
                    (since, why)
                });
                patch.allocation = Some((alloc.trigger == Trigger::Calibration, infeasible));
            }
            RecordBody::JobTransition { job, event } => {
                let current = self.job(*job)?;
                match event {
                    JobEvent::Stage | JobEvent::Start { .. } | JobEvent::Complete(_) | JobEvent::Fail(_) => {
                        return Err(invalid("attempt events travel in Dispatched and AttemptClosed records"));
                    }
                    JobEvent::Cancel { .. } if current.state == JobState::Executing => {
                        return Err(EngineError::JobExecuting(*job));
                    }
                    _ => {}
                }
                let mut next = current.clone();
                next.apply(event).map_err(ModelError::from)?;
                patch.jobs.push(next);
            }
            RecordBody::Dispatched { action } => {
                self.live()?;
                let current = self.job(action.job)?;
                if current.state != JobState::Scheduled || current.assigned_resource.as_ref() != Some(&action.resource) {
                    return Err(invalid(format!("job {} is not queued on {}", action.job, action.resource)));
                }
                if action.authorized_cost == 0 || action.contract.resource != action.resource {
                    return Err(invalid("dispatch needs a positive authorization and a matching contract"));
                }
                let acc = &self.experiment.accounts;
                let qos = &self.experiment.qos;
                if qos.enforce_budget && acc.spent + acc.committed + action.authorized_cost > qos.budget {
                    return Err(EngineError::BudgetViolation {
                        amount: action.authorized_cost,
                        spent: acc.spent,
                        committed: acc.committed,
                        budget: qos.budget,
                    });
                }
                let mut next = current.clone();
                next.apply(&JobEvent::Stage).map_err(ModelError::from)?;
                next.apply(&JobEvent::Start { node: action.node, at: t })
                    .map_err(ModelError::from)?;
                patch.jobs.push(next);
                patch.commit = Some((
                    action.job,
                    Commitment {
                        resource: action.resource.clone(),
                        price: action.contract.price,
                        amount: action.authorized_cost,
                    },
                ));
            }
            RecordBody::AttemptClosed { job, attempt, charge } => {
                let current = self.job(*job)?;
                let open = current.open_attempt.as_ref().ok_or(EngineError::UnknownAttempt(*job))?;
                if current.state != JobState::Executing || open.resource != attempt.resource || open.node != attempt.node {
                    return Err(EngineError::UnknownAttempt(*job));
                }
                let commitment = self
                    .experiment
                    .accounts
                    .commitments
                    .get(job)
                    .ok_or(EngineError::UnknownAttempt(*job))?;
                if *charge > commitment.amount {
                    return Err(invalid(format!(
                        "charge {charge} exceeds the {} G$ authorized for job {job}",
                        commitment.amount
                    )));
                }
                let event = if attempt.outcome == Outcome::Success {
                    JobEvent::Complete(attempt.clone())
                } else {
                    JobEvent::Fail(attempt.clone())
                };
                let mut next = current.clone();
                next.apply(&event).map_err(ModelError::from)?;
                patch.jobs.push(next);
                patch.close = Some((*job, *charge, attempt.clone()));
            }
        }
        Ok(patch)
    }

    fn commit(&mut self, record: &JournalRecord, patch: Patch) {
        self.seq = record.seq;
        self.t = record.t;
        let e = &mut self.experiment;
        for job in patch.jobs {
            e.jobs.insert(job.id, job);
        }
        if let Some(qos) = patch.qos {
            e.qos = qos;
            e.reschedule_requested = true;
        }
        if let Some((phase, paused_from)) = patch.phase {
            e.phase = phase;
            e.paused_from = paused_from;
        }
        if let Some(q) = patch.quantum {
            self.quantum = Some(q);
        }
        if let Some((calibration, infeasible)) = patch.allocation {
            if calibration {
                self.calibration_rounds += 1;
            }
            self.infeasible = infeasible;
            e.reschedule_requested = false;
        }
        if let Some((job, commitment)) = patch.commit {
            e.accounts.committed += commitment.amount;
            e.accounts.commitments.insert(job, commitment);
        }
        if let Some((job, charge, attempt)) = patch.close {
            let commitment = e.accounts.commitments.remove(&job).expect("validated");
            e.accounts.committed -= commitment.amount;
            e.accounts.spent += charge;
            let ledger = e.accounts.resources.entry(attempt.resource.clone()).or_default();
            ledger.cost += charge;
            ledger.cpu_seconds += attempt.cpu_seconds;
            if attempt.outcome == Outcome::Success {
                ledger.jobs_done += 1;
            }
            self.profile.observe(&attempt, self.config.scheduler.alpha);
        }
    }

    /// Validates and applies one record.
    pub fn apply(&mut self, record: &JournalRecord) -> Result<(), EngineError> {
        let patch = self.prepare(record)?;
        self.commit(record, patch);
        Ok(())
    }
}

/// `{seq, state}` checkpoint from which replay can resume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub state: EngineState,
}

impl Snapshot {
    pub fn write(&self, path: &Path) -> Result<(), StorageError> {
        let text = serde_json::to_string(self).map_err(|e| StorageError(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| StorageError(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, StorageError> {
        let text = std::fs::read_to_string(path).map_err(|e| StorageError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| StorageError(e.to_string()))
    }
}

/// Client job management requests.
#[derive(Clone, Debug, PartialEq)]
pub enum JobRequest {
    Add(Vec<JobSpec>),
    Remove(Vec<JobId>),
    Query {
        state: Option<JobState>,
        resource: Option<ResourceId>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum JobResponse {
    Added(Vec<JobId>),
    Removed(Vec<JobId>),
    Jobs(Vec<Job>),
}

/// Reconstructs engine state from journal lines, checking the sequence.
pub fn replay<S: AsRef<str>>(lines: &[S]) -> Result<EngineState, EngineError> {
    replay_with(lines, |_, _| {})
}

/// As [`replay`], calling `inspect` with every record and the state right
/// after it was applied.
pub fn replay_with<S: AsRef<str>>(
    lines: &[S],
    mut inspect: impl FnMut(&JournalRecord, &EngineState),
) -> Result<EngineState, EngineError> {
    let mut records = parse_records(lines, 0)?.into_iter();
    let first = records.next().ok_or_else(|| EngineError::CorruptJournal {
        last_good: 0,
        reason: "empty journal".into(),
    })?;
    let RecordBody::ExperimentCreated(created) = &first.body else {
        return Err(EngineError::CorruptJournal {
            last_good: 0,
            reason: "first record is not ExperimentCreated".into(),
        });
    };
    let mut state = EngineState::from_created(first.t, created).map_err(|e| EngineError::CorruptJournal {
        last_good: 0,
        reason: e.to_string(),
    })?;
    inspect(&first, &state);
    for record in records {
        let seq = record.seq;
        state.apply(&record).map_err(|e| EngineError::CorruptJournal {
            last_good: seq - 1,
            reason: e.to_string(),
        })?;
        inspect(&record, &state);
    }
    Ok(state)
}

/// Resumes replay from a snapshot with the records written after it.
pub fn replay_from<S: AsRef<str>>(snapshot: Snapshot, lines: &[S]) -> Result<EngineState, EngineError> {
    let mut state = snapshot.state;
    let after: Vec<&S> = lines
        .iter()
        .filter(|l| JournalRecord::from_line(l.as_ref()).map_or(true, |r| r.seq > snapshot.seq))
        .collect();
    let records = parse_records(&after.iter().map(|s| s.as_ref()).collect::<Vec<_>>(), snapshot.seq)?;
    apply_all(&mut state, records.into_iter())?;
    Ok(state)
}

fn parse_records<S: AsRef<str>>(lines: &[S], after: u64) -> Result<Vec<JournalRecord>, EngineError> {
    let mut expected = after + 1;
    lines
        .iter()
        .map(|line| {
            let record = JournalRecord::from_line(line.as_ref()).map_err(|e| EngineError::CorruptJournal {
                last_good: expected - 1,
                reason: format!("unparsable record: {e}"),
            })?;
            if record.seq != expected {
                return Err(EngineError::CorruptJournal {
                    last_good: expected - 1,
                    reason: format!("expected sequence {expected}, found {}", record.seq),
                });
            }
            expected += 1;
            Ok(record)
        })
        .collect()
}

fn apply_all(state: &mut EngineState, records: impl Iterator<Item = JournalRecord>) -> Result<(), EngineError> {
    for record in records {
        let seq = record.seq;
        state.apply(&record).map_err(|e| EngineError::CorruptJournal {
            last_good: seq - 1,
            reason: e.to_string(),
        })?;
    }
    Ok(())
}

pub struct Engine {
    state: EngineState,
    journal: Box<dyn JournalStore>,
    halted: Option<StorageError>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("seq", &self.state.seq)
            .field("phase", &self.state.experiment.phase)
            .field("halted", &self.halted)
            .finish()
    }
}

impl Engine {
    /// Starts a new journal with the ExperimentCreated record (sequence 1).
    pub fn create(mut journal: Box<dyn JournalStore>, t: Secs, created: Created) -> Result<Self, EngineError> {
        let record = JournalRecord {
            seq: 1,
            t,
            body: RecordBody::ExperimentCreated(Box::new(created)),
        };
        let RecordBody::ExperimentCreated(c) = &record.body else { unreachable!() };
        let state = EngineState::from_created(t, c)?;
        journal.append(&record.to_line())?;
        Ok(Engine {
            state,
            journal,
            halted: None,
        })
    }

    /// Replays `journal` and demotes work that was in flight at the crash:
    /// executing attempts are closed as preempted (charged the configured
    /// lost-work fraction of their authorization) and requeued, as are failed
    /// jobs whose requeue was not yet recorded.
    pub fn recover(journal: Box<dyn JournalStore>) -> Result<Self, EngineError> {
        let lines = journal.lines()?;
        let state = replay(&lines)?;
        Self::resume(state, journal)
    }

    /// As [`Engine::recover`], starting from a snapshot.
    pub fn recover_from(snapshot: Snapshot, journal: Box<dyn JournalStore>) -> Result<Self, EngineError> {
        let lines = journal.lines()?;
        let state = replay_from(snapshot, &lines)?;
        Self::resume(state, journal)
    }

    fn resume(state: EngineState, journal: Box<dyn JournalStore>) -> Result<Self, EngineError> {
        let mut engine = Engine {
            state,
            journal,
            halted: None,
        };
        let t = engine.state.t;
        let executing: Vec<Job> = engine.experiment().jobs_in(JobState::Executing).cloned().collect();
        for job in executing {
            let open = job.open_attempt.clone().expect("executing jobs have an open attempt");
            let authorized = engine.experiment().accounts.commitments.get(&job.id).map_or(0, |c| c.amount);
            let fraction = engine.state.config.lost_work_fraction.clamp(0.0, 1.0);
            let charge = ((authorized as f64 * fraction).floor() as GridDollars).min(authorized);
            engine.persist(
                t,
                RecordBody::AttemptClosed {
                    job: job.id,
                    attempt: AttemptRecord {
                        resource: open.resource,
                        node: open.node,
                        start: open.start,
                        end: t,
                        cpu_seconds: 0,
                        wall_seconds: t - open.start,
                        outcome: Outcome::Preempted,
                    },
                    charge,
                },
            )?;
        }
        let limit = engine.state.config.retry_limit;
        let failed: Vec<JobId> = engine
            .experiment()
            .jobs_in(JobState::Failed)
            .filter(|j| retryable(j, limit))
            .map(|j| j.id)
            .collect();
        if !engine.experiment().phase.is_terminal() {
            for id in failed {
                engine.persist(t, RecordBody::JobTransition { job: id, event: JobEvent::Requeue })?;
            }
        }
        Ok(engine)
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn experiment(&self) -> &Experiment {
        &self.state.experiment
    }

    pub fn accounts(&self) -> &Accounts {
        &self.state.experiment.accounts
    }

    pub fn is_halted(&self) -> bool {
        self.halted.is_some()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            seq: self.state.seq,
            state: self.state.clone(),
        }
    }

    pub fn journal_lines(&self) -> Result<Vec<String>, StorageError> {
        self.journal.lines()
    }

    /// Write-ahead persistence: validate, append, then apply. Returns the
    /// record's sequence number. A storage failure halts the engine with the
    /// experiment paused; nothing else changes.
    pub fn persist(&mut self, t: Secs, body: RecordBody) -> Result<u64, EngineError> {
        if let Some(e) = &self.halted {
            return Err(e.clone().into());
        }
        let record = JournalRecord {
            seq: self.state.seq + 1,
            t: t.max(self.state.t),
            body,
        };
        let patch = self.state.prepare(&record)?;
        if let Err(e) = self.journal.append(&record.to_line()) {
            let exp = &mut self.state.experiment;
            if !exp.phase.is_terminal() && exp.phase != Phase::Paused {
                exp.paused_from = Some(exp.phase);
                exp.phase = Phase::Paused;
            }
            self.halted = Some(e.clone());
            return Err(e.into());
        }
        self.state.commit(&record, patch);
        Ok(record.seq)
    }

    /// Adds, removes (cancels) or queries jobs.
    pub fn manage_jobs(&mut self, t: Secs, request: JobRequest) -> Result<JobResponse, EngineError> {
        match request {
            JobRequest::Add(specs) => {
                let first = self.experiment().next_job_id().0;
                let nominal = self.state.config.job_seconds;
                let jobs: Vec<JobSeed> = specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, spec)| JobSeed {
                        id: JobId(first + i as u64),
                        spec,
                        nominal_cpu_seconds: Some(nominal),
                    })
                    .collect();
                let ids = jobs.iter().map(|j| j.id).collect();
                self.persist(t, RecordBody::JobsAdded { jobs })?;
                Ok(JobResponse::Added(ids))
            }
            JobRequest::Remove(ids) => {
                if self.experiment().phase.is_terminal() {
                    return Err(ModelError::ExperimentTerminal(self.experiment().phase).into());
                }
                for id in &ids {
                    if self.state.job(*id)?.state == JobState::Executing {
                        return Err(EngineError::JobExecuting(*id));
                    }
                }
                for id in &ids {
                    self.persist(t, RecordBody::JobTransition { job: *id, event: JobEvent::Cancel { at: t } })?;
                }
                Ok(JobResponse::Removed(ids))
            }
            JobRequest::Query { state, resource } => Ok(JobResponse::Jobs(
                self.experiment()
                    .jobs
                    .values()
                    .filter(|j| state.is_none_or(|s| j.state == s))
                    .filter(|j| {
                        resource.as_ref().is_none_or(|r| {
                            j.assigned_resource.as_ref() == Some(r)
                                || j.attempts.last().is_some_and(|a| &a.resource == r)
                        })
                    })
                    .cloned()
                    .collect(),
            )),
        }
    }

    /// Closes the job's open attempt from an agent report, charging
    /// `cpu_seconds × contract.price`.
    pub fn record_report(&mut self, report: &AgentReport, contract: &Contract) -> Result<Accounts, EngineError> {
        let job = self.state.job(report.job)?;
        if job.state != JobState::Executing {
            return Err(EngineError::UnknownAttempt(report.job));
        }
        self.persist(
            report.end,
            RecordBody::AttemptClosed {
                job: report.job,
                attempt: report.attempt(),
                charge: report.cpu_seconds * contract.price,
            },
        )?;
        Ok(self.accounts().clone())
    }
}
