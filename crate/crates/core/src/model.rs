//! Domain types shared by every part of the broker and the job state machine.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::Accounts;
use crate::plan::{JobSpec, PlanModel};

/// Virtual time in whole seconds since the experiment clock origin.
pub type Secs = u64;

/// Grid dollars, the abstract currency used by every price and budget.
pub type GridDollars = u64;

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ResourceId(pub String);

impl ResourceId {
    pub fn new(id: impl Into<String>) -> Self {
        ResourceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ResourceId {
    fn from(s: &str) -> Self {
        ResourceId(s.to_string())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(alias = "TimeOpt", alias = "time_opt")]
    Time,
    #[serde(alias = "CostOpt", alias = "cost_opt")]
    Cost,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Time => f.write_str("time"),
            Strategy::Cost => f.write_str("cost"),
        }
    }
}

/// User quality-of-service constraints. A constraint whose `enforce_*` flag is
/// off is treated as unbounded everywhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QoSConstraints {
    /// Minutes from experiment start.
    #[serde(alias = "deadline")]
    pub deadline_min: u64,
    pub budget: GridDollars,
    pub strategy: Strategy,
    #[serde(default = "default_true")]
    pub enforce_deadline: bool,
    #[serde(default = "default_true")]
    pub enforce_budget: bool,
}

fn default_true() -> bool {
    true
}

impl QoSConstraints {
    pub fn new(deadline_min: u64, budget: GridDollars, strategy: Strategy) -> Self {
        QoSConstraints {
            deadline_min,
            budget,
            strategy,
            enforce_deadline: true,
            enforce_budget: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.deadline_min == 0 {
            return Err(ModelError::InvalidQos("deadline must be positive".into()));
        }
        Ok(())
    }

    pub fn deadline_secs(&self) -> Secs {
        self.deadline_min.saturating_mul(60)
    }

    /// The deadline as seen by consumers: `None` when it is not enforced.
    pub fn effective_deadline(&self) -> Option<Secs> {
        self.enforce_deadline.then(|| self.deadline_secs())
    }

    /// The budget as seen by consumers: `None` when it is not enforced.
    pub fn effective_budget(&self) -> Option<GridDollars> {
        self.enforce_budget.then_some(self.budget)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JobState {
    Ready,
    Scheduled,
    Staged,
    Executing,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub const ALL: [JobState; 7] = [
        JobState::Ready,
        JobState::Scheduled,
        JobState::Staged,
        JobState::Executing,
        JobState::Done,
        JobState::Failed,
        JobState::Cancelled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Cancelled)
    }

    /// States in which a job holds a resource assignment.
    pub fn holds_resource(self) -> bool {
        matches!(
            self,
            JobState::Scheduled | JobState::Staged | JobState::Executing
        )
    }

    pub fn parse(s: &str) -> Option<JobState> {
        JobState::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
    }

    pub fn name(self) -> &'static str {
        match self {
            JobState::Ready => "Ready",
            JobState::Scheduled => "Scheduled",
            JobState::Staged => "Staged",
            JobState::Executing => "Executing",
            JobState::Done => "Done",
            JobState::Failed => "Failed",
            JobState::Cancelled => "Cancelled",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Success,
    ResourceFailure,
    TaskError,
    Preempted,
}

/// One closed execution attempt of a job.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub resource: ResourceId,
    pub node: u32,
    pub start: Secs,
    pub end: Secs,
    pub cpu_seconds: u64,
    pub wall_seconds: u64,
    pub outcome: Outcome,
}

/// An attempt that has started but not yet reported.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenAttempt {
    pub resource: ResourceId,
    pub node: u32,
    pub start: Secs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: JobId,
    pub spec: JobSpec,
    pub nominal_cpu_seconds: Option<f64>,
    pub state: JobState,
    pub assigned_resource: Option<ResourceId>,
    pub attempts: Vec<AttemptRecord>,
    pub open_attempt: Option<OpenAttempt>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum JobEvent {
    Assign(ResourceId),
    /// Withdraw a scheduled job from its resource queue so it can be replanned.
    Unassign,
    Stage,
    Start { node: u32, at: Secs },
    Complete(AttemptRecord),
    Fail(AttemptRecord),
    Requeue,
    Cancel { at: Secs },
}

impl JobEvent {
    fn name(&self) -> &'static str {
        match self {
            JobEvent::Assign(_) => "Assign",
            JobEvent::Unassign => "Unassign",
            JobEvent::Stage => "Stage",
            JobEvent::Start { .. } => "Start",
            JobEvent::Complete(_) => "Complete",
            JobEvent::Fail(_) => "Fail",
            JobEvent::Requeue => "Requeue",
            JobEvent::Cancel { .. } => "Cancel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("illegal transition: {event} in state {from:?} (job {job})")]
pub struct IllegalTransition {
    pub job: JobId,
    pub from: JobState,
    pub event: &'static str,
}

impl Job {
    pub fn new(id: JobId, spec: JobSpec, nominal_cpu_seconds: Option<f64>) -> Self {
        Job {
            id,
            spec,
            nominal_cpu_seconds,
            state: JobState::Ready,
            assigned_resource: None,
            attempts: Vec::new(),
            open_attempt: None,
        }
    }

    /// Applies `event` in place. On error the job is left untouched.
    pub fn apply(&mut self, event: &JobEvent) -> Result<(), IllegalTransition> {
        use JobState::*;

        let illegal = || IllegalTransition {
            job: self.id,
            from: self.state,
            event: event.name(),
        };

        match (self.state, event) {
            (Ready, JobEvent::Assign(r)) => {
                self.state = Scheduled;
                self.assigned_resource = Some(r.clone());
            }
            (Scheduled, JobEvent::Unassign) => {
                self.state = Ready;
                self.assigned_resource = None;
            }
            (Scheduled, JobEvent::Stage) => self.state = Staged,
            (Staged, JobEvent::Start { node, at }) => {
                let resource = self.assigned_resource.clone().ok_or_else(illegal)?;
                self.state = Executing;
                self.open_attempt = Some(OpenAttempt {
                    resource,
                    node: *node,
                    start: *at,
                });
            }
            (Executing, JobEvent::Complete(report)) => {
                if report.outcome != Outcome::Success {
                    return Err(illegal());
                }
                self.close_attempt(report.clone());
                self.state = Done;
            }
            (Executing, JobEvent::Fail(report)) => {
                if report.outcome == Outcome::Success {
                    return Err(illegal());
                }
                self.close_attempt(report.clone());
                self.state = Failed;
            }
            (Failed, JobEvent::Requeue) => self.state = Ready,
            (state, JobEvent::Cancel { at }) if !state.is_terminal() => {
                if let Some(open) = self.open_attempt.take() {
                    self.attempts.push(AttemptRecord {
                        resource: open.resource,
                        node: open.node,
                        start: open.start,
                        end: (*at).max(open.start),
                        cpu_seconds: 0,
                        wall_seconds: at.saturating_sub(open.start),
                        outcome: Outcome::Preempted,
                    });
                }
                self.state = Cancelled;
                self.assigned_resource = None;
            }
            _ => return Err(illegal()),
        }
        Ok(())
    }

    fn close_attempt(&mut self, report: AttemptRecord) {
        self.open_attempt = None;
        self.attempts.push(report);
        self.assigned_resource = None;
    }

    pub fn task_errors(&self) -> usize {
        self.attempts
            .iter()
            .filter(|a| a.outcome == Outcome::TaskError)
            .count()
    }

    pub fn done_attempts(&self) -> usize {
        self.attempts
            .iter()
            .filter(|a| a.outcome == Outcome::Success)
            .count()
    }
}

/// Pure form of [`Job::apply`].
pub fn transition_job(job: &Job, event: &JobEvent) -> Result<Job, IllegalTransition> {
    let mut next = job.clone();
    next.apply(event)?;
    Ok(next)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Created,
    Calibrating,
    Running,
    Paused,
    Completed,
    FailedDeadline,
    FailedBudget,
    Stopped,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            Phase::Completed | Phase::FailedDeadline | Phase::FailedBudget | Phase::Stopped
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("experiment is in terminal phase {0:?}")]
    ExperimentTerminal(Phase),
    #[error("invalid QoS: {0}")]
    InvalidQos(String),
    #[error("budget {budget} is below spent plus committed ({floor})")]
    BudgetBelowCommitted {
        budget: GridDollars,
        floor: GridDollars,
    },
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    pub plan: PlanModel,
    pub jobs: BTreeMap<JobId, Job>,
    pub qos: QoSConstraints,
    pub accounts: Accounts,
    pub phase: Phase,
    /// Phase to return to when a paused experiment is resumed.
    pub paused_from: Option<Phase>,
    /// Time of day (seconds after midnight) at which virtual time 0 falls.
    pub clock_origin: Secs,
    pub reschedule_requested: bool,
}

impl Experiment {
    pub fn new(id: impl Into<String>, plan: PlanModel, qos: QoSConstraints) -> Self {
        Experiment {
            id: id.into(),
            plan,
            jobs: BTreeMap::new(),
            qos,
            accounts: Accounts::default(),
            phase: Phase::Created,
            paused_from: None,
            clock_origin: 0,
            reschedule_requested: false,
        }
    }

    pub fn count_in(&self, state: JobState) -> usize {
        self.jobs.values().filter(|j| j.state == state).count()
    }

    pub fn jobs_in(&self, state: JobState) -> impl Iterator<Item = &Job> {
        self.jobs.values().filter(move |j| j.state == state)
    }

    /// Jobs not yet Done or Cancelled.
    pub fn unfinished(&self) -> usize {
        self.jobs.values().filter(|j| !j.state.is_terminal()).count()
    }

    pub fn next_job_id(&self) -> JobId {
        JobId(self.jobs.keys().next_back().map_or(1, |id| id.0 + 1))
    }
}

/// Replaces the QoS of a live experiment and flags a replan.
///
/// Executing work is never affected. A budget that would fall below what has
/// already been spent or committed is refused so the budget-safety invariant
/// holds at every instant.
pub fn qos_update(experiment: &mut Experiment, new: QoSConstraints) -> Result<(), ModelError> {
    if experiment.phase.is_terminal() {
        return Err(ModelError::ExperimentTerminal(experiment.phase));
    }
    new.validate()?;
    let floor = experiment.accounts.spent + experiment.accounts.committed;
    if new.enforce_budget && new.budget < floor {
        return Err(ModelError::BudgetBelowCommitted {
            budget: new.budget,
            floor,
        });
    }
    experiment.qos = new;
    experiment.reschedule_requested = true;
    Ok(())
}
