//! The broker driver: feeds fabric events, scheduler decisions and client
//! commands through the engine in virtual-time order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{self, agent_execute, dispatch_quantum, nominal_of, retryable, AgentReport, DEFAULT_RETRY_LIMIT};
use crate::engine::{
    AllocationRecord, Created, Engine, EngineError, EngineState, JobRequest, JobSeed, JournalStore, RecordBody,
    Trigger,
};
use crate::fabric::testbed::{ConfigError, TestbedConfig, WWG_TESTBED};
use crate::fabric::{rng, Fabric, FabricError, FabricParams, FailureScope, SimEventKind};
use crate::model::{
    Experiment, GridDollars, JobEvent, JobId, JobState, ModelError, Phase, QoSConstraints, ResourceId, Secs, Strategy,
};
use crate::plan::{expand_jobs, parse_plan, JobSpec, PlanError};
use crate::scheduler::{
    calibrate, discover_resources, rebalance, schedule, Infeasibility, SchedulerParams,
};
use crate::trading::{Contract, PriceQuote};

/// Everything needed to rebuild a run besides the plan and QoS. Stored in
/// the first journal record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Testbed document text.
    pub testbed: String,
    pub fabric: FabricParams,
    pub scheduler: SchedulerParams,
    /// Nominal CPU seconds of every job.
    pub job_seconds: f64,
    /// Relative spread of per-job nominal seconds, drawn from the seed.
    pub job_jitter: f64,
    pub retry_limit: u32,
    /// Share of an interrupted attempt's authorization charged on recovery.
    pub lost_work_fraction: f64,
    /// Time of day at virtual time zero.
    pub clock_origin: Secs,
    /// Virtual time after which a run is stopped regardless of progress.
    pub horizon: Secs,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            testbed: WWG_TESTBED.to_string(),
            fabric: FabricParams::default(),
            scheduler: SchedulerParams::default(),
            job_seconds: 300.0,
            job_jitter: 0.0,
            retry_limit: DEFAULT_RETRY_LIMIT,
            lost_work_fraction: 0.0,
            clock_origin: 0,
            horizon: 30 * 86_400,
        }
    }
}

impl RunConfig {
    fn nominal(&self, job: JobId) -> f64 {
        if self.job_jitter <= 0.0 || self.fabric.seed == 0 {
            return self.job_seconds;
        }
        let u = rng::keyed_unit(self.fabric.seed ^ 0x6A09_E667, &[job.0]);
        (self.job_seconds * (1.0 + self.job_jitter * (2.0 * u - 1.0))).max(1.0)
    }
}

/// Partial QoS update; absent fields keep their value.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QosPatch {
    #[serde(default, alias = "deadline", skip_serializing_if = "Option::is_none")]
    pub deadline_min: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<GridDollars>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enforce_deadline: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enforce_budget: Option<bool>,
}

impl QosPatch {
    pub fn merge(&self, base: &QoSConstraints) -> QoSConstraints {
        QoSConstraints {
            deadline_min: self.deadline_min.unwrap_or(base.deadline_min),
            budget: self.budget.unwrap_or(base.budget),
            strategy: self.strategy.unwrap_or(base.strategy),
            enforce_deadline: self.enforce_deadline.unwrap_or(base.enforce_deadline),
            enforce_budget: self.enforce_budget.unwrap_or(base.enforce_budget),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ClientCommand {
    Start,
    Pause,
    Stop,
    UpdateQos(QosPatch),
    AddJobs { specs: Vec<JobSpec> },
    RemoveJobs { ids: Vec<JobId> },
    InjectFailure {
        resource: ResourceId,
        duration: Secs,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        node: Option<u32>,
    },
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum BrokerError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Why a client command was refused.
#[derive(Clone, Debug, PartialEq, Error)]
pub enum CommandError {
    #[error("command not allowed in phase {0:?}")]
    Conflict(Phase),
    #[error("{0}")]
    Invalid(String),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("job {0} is executing")]
    JobExecuting(JobId),
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

impl From<EngineError> for CommandError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(ModelError::ExperimentTerminal(p)) => CommandError::Conflict(p),
            EngineError::Model(m @ (ModelError::InvalidQos(_) | ModelError::BudgetBelowCommitted { .. })) => {
                CommandError::Invalid(m.to_string())
            }
            EngineError::UnknownJob(j) => CommandError::UnknownJob(j),
            EngineError::JobExecuting(j) => CommandError::JobExecuting(j),
            other => CommandError::Broker(other.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub id: String,
    pub phase: Phase,
    pub strategy: Strategy,
    pub makespan_min: f64,
    pub makespan_s: Secs,
    pub total_cost: GridDollars,
    pub committed: GridDollars,
    pub budget: GridDollars,
    pub deadline_min: u64,
    pub jobs_total: usize,
    pub jobs_done: usize,
    pub jobs_failed: usize,
    pub jobs_cancelled: usize,
    pub per_resource_jobs: BTreeMap<ResourceId, u64>,
    pub per_resource_cost: BTreeMap<ResourceId, GridDollars>,
    pub records: u64,
}

impl Summary {
    pub fn from_state(state: &EngineState, resources: &[ResourceId]) -> Self {
        let e = &state.experiment;
        let acc = &e.accounts;
        let makespan = e
            .jobs
            .values()
            .flat_map(|j| j.attempts.iter())
            .filter(|a| a.outcome == crate::model::Outcome::Success)
            .map(|a| a.end)
            .max()
            .unwrap_or(0);
        let ledger = |f: fn(&crate::engine::ResourceLedger) -> u64| -> BTreeMap<ResourceId, u64> {
            resources
                .iter()
                .map(|r| (r.clone(), acc.resources.get(r).map_or(0, f)))
                .collect()
        };
        Summary {
            id: e.id.clone(),
            phase: e.phase,
            strategy: e.qos.strategy,
            makespan_min: (makespan as f64 / 60.0 * 100.0).round() / 100.0,
            makespan_s: makespan,
            total_cost: acc.spent,
            committed: acc.committed,
            budget: e.qos.budget,
            deadline_min: e.qos.deadline_min,
            jobs_total: e.jobs.len(),
            jobs_done: e.count_in(JobState::Done),
            jobs_failed: e.count_in(JobState::Failed),
            jobs_cancelled: e.count_in(JobState::Cancelled),
            per_resource_jobs: ledger(|l| l.jobs_done),
            per_resource_cost: ledger(|l| l.cost),
            records: state.seq,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub phase: Phase,
    pub summary: Summary,
}

pub struct Broker {
    engine: Engine,
    fabric: Fabric,
    resource_ids: Vec<ResourceId>,
    quotes: BTreeMap<ResourceId, PriceQuote>,
    pending: Option<Trigger>,
}

impl std::fmt::Debug for Broker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Broker")
            .field("engine", &self.engine)
            .field("clock", &self.fabric.clock())
            .finish()
    }
}

impl Broker {
    /// Parses the plan, expands its jobs and writes the ExperimentCreated
    /// record. The experiment stays in Created until started.
    pub fn create(
        id: impl Into<String>,
        plan_text: &str,
        qos: QoSConstraints,
        config: RunConfig,
        journal: Box<dyn JournalStore>,
    ) -> Result<Self, BrokerError> {
        let plan = parse_plan(plan_text)?;
        qos.validate()?;
        let registry = TestbedConfig::parse(&config.testbed)?.build()?;
        let jobs = expand_jobs(&plan)?
            .into_iter()
            .enumerate()
            .map(|(i, spec)| {
                let id = JobId(i as u64 + 1);
                JobSeed {
                    id,
                    spec,
                    nominal_cpu_seconds: Some(config.nominal(id)),
                }
            })
            .collect();
        let created = Created {
            id: id.into(),
            plan: plan_text.to_string(),
            qos,
            config: config.clone(),
            jobs,
        };
        let engine = Engine::create(journal, 0, created)?;
        let resource_ids = registry.iter().map(|r| r.id.clone()).collect();
        let mut fabric = Fabric::new(registry, config.fabric.clone(), 0);
        fabric.schedule(0, SimEventKind::QuantumTick)?;
        Ok(Broker {
            engine,
            fabric,
            resource_ids,
            quotes: BTreeMap::new(),
            pending: None,
        })
    }

    /// Rebuilds a broker from its journal after a crash. Interrupted attempts
    /// are closed and requeued; the fabric restarts at the last record's time
    /// and ticks resume at the next unmarked quantum boundary.
    pub fn recover(journal: Box<dyn JournalStore>) -> Result<Self, BrokerError> {
        let engine = Engine::recover(journal)?;
        Self::resume(engine)
    }

    fn resume(engine: Engine) -> Result<Self, BrokerError> {
        let state = engine.state();
        let registry = TestbedConfig::parse(&state.config.testbed)?.build()?;
        let resource_ids = registry.iter().map(|r| r.id.clone()).collect();
        let q = state.config.scheduler.quantum.max(1);
        let mut fabric = Fabric::new(registry, state.config.fabric.clone(), state.t);
        let mut tick = state.t.div_ceil(q) * q;
        if state.quantum.is_some_and(|last| tick / q <= last) {
            tick = (state.quantum.unwrap() + 1) * q;
        }
        fabric.schedule(tick, SimEventKind::QuantumTick)?;
        Ok(Broker {
            engine,
            fabric,
            resource_ids,
            quotes: BTreeMap::new(),
            pending: Some(Trigger::ResourceChange),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn state(&self) -> &EngineState {
        self.engine.state()
    }

    pub fn experiment(&self) -> &Experiment {
        self.engine.experiment()
    }

    pub fn phase(&self) -> Phase {
        self.experiment().phase
    }

    pub fn now(&self) -> Secs {
        self.fabric.clock()
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn resource_ids(&self) -> &[ResourceId] {
        &self.resource_ids
    }

    pub fn summary(&self) -> Summary {
        Summary::from_state(self.state(), &self.resource_ids)
    }

    fn persist(&mut self, body: RecordBody) -> Result<u64, BrokerError> {
        Ok(self.engine.persist(self.fabric.clock(), body)?)
    }

    fn change_phase(&mut self, to: Phase, reason: &str) -> Result<(), BrokerError> {
        let from = self.phase();
        self.persist(RecordBody::PhaseChanged {
            from,
            to,
            reason: reason.to_string(),
        })?;
        Ok(())
    }

    /// Applies a client command at the current virtual time.
    pub fn command(&mut self, command: ClientCommand) -> Result<(), CommandError> {
        let phase = self.phase();
        match command {
            ClientCommand::Start => match phase {
                Phase::Created => self.change_phase(Phase::Calibrating, "started")?,
                Phase::Paused => {
                    let back = self.experiment().paused_from.unwrap_or(Phase::Running);
                    self.change_phase(back, "resumed")?
                }
                p => return Err(CommandError::Conflict(p)),
            },
            ClientCommand::Pause => match phase {
                Phase::Calibrating | Phase::Running => self.change_phase(Phase::Paused, "paused by client")?,
                p => return Err(CommandError::Conflict(p)),
            },
            ClientCommand::Stop => {
                if phase.is_terminal() {
                    return Err(CommandError::Conflict(phase));
                }
                self.terminate(Phase::Stopped, "stopped by client")?;
            }
            ClientCommand::UpdateQos(patch) => {
                let qos = patch.merge(&self.experiment().qos);
                self.engine.persist(self.fabric.clock(), RecordBody::QoSChanged { qos })?;
            }
            ClientCommand::AddJobs { specs } => {
                self.engine.manage_jobs(self.fabric.clock(), JobRequest::Add(specs))?;
            }
            ClientCommand::RemoveJobs { ids } => {
                self.engine.manage_jobs(self.fabric.clock(), JobRequest::Remove(ids))?;
            }
            ClientCommand::InjectFailure { resource, duration, node } => {
                if phase.is_terminal() {
                    return Err(CommandError::Conflict(phase));
                }
                let scope = node.map_or(FailureScope::Resource, FailureScope::Node);
                let now = self.fabric.clock();
                self.fabric
                    .inject_scoped_failure(&resource, now, duration, scope)
                    .map_err(|e| CommandError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Queues a command to arrive at virtual time `at`.
    pub fn schedule_command(&mut self, at: Secs, command: ClientCommand) -> Result<(), BrokerError> {
        self.fabric.schedule(at, SimEventKind::ClientCommand(command))?;
        Ok(())
    }

    pub fn inject_failure(&mut self, resource: &ResourceId, at: Secs, duration: Secs) -> Result<(), BrokerError> {
        self.fabric.inject_failure(resource, at, duration)?;
        Ok(())
    }

    /// Instant of the next event, if the run can make progress.
    pub fn next_instant(&self) -> Option<Secs> {
        match self.phase() {
            Phase::Created => None,
            p if p.is_terminal() => None,
            _ => self.fabric.next_instant(),
        }
    }

    /// Processes the next event. Returns false when nothing more can happen
    /// without a client command.
    pub fn step(&mut self) -> Result<bool, BrokerError> {
        let Some(next) = self.next_instant() else {
            return Ok(false);
        };
        if self.deadline_passed(next) {
            self.fabric.advance_clock(next)?;
            let left = self.experiment().unfinished();
            self.terminate(Phase::FailedDeadline, &format!("deadline passed with {left} jobs unfinished"))?;
            return Ok(true);
        }
        if next > self.state().config.horizon {
            self.fabric.advance_clock(next)?;
            self.terminate(Phase::Stopped, "simulation horizon reached")?;
            return Ok(true);
        }
        let fired = self.fabric.advance()?;
        for report in &fired.reports {
            self.handle_report(report)?;
        }
        match fired.event.kind {
            SimEventKind::QuantumTick => {
                self.on_tick()?;
                let q = self.state().config.scheduler.quantum.max(1);
                self.fabric.schedule(self.fabric.clock() + q, SimEventKind::QuantumTick)?;
            }
            SimEventKind::ResourceDown { .. } | SimEventKind::ResourceUp { .. } => {
                self.pending.get_or_insert(Trigger::ResourceChange);
            }
            SimEventKind::ClientCommand(cmd) => {
                // scripted commands have no caller to report to
                let _ = self.command(cmd);
            }
            SimEventKind::AgentDone { .. } => {}
        }
        self.check_completion()?;
        Ok(true)
    }

    /// Processes every event due by `t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: Secs) -> Result<(), BrokerError> {
        while self.next_instant().is_some_and(|n| n <= t) {
            self.step()?;
        }
        if !self.phase().is_terminal() && t > self.fabric.clock() {
            self.fabric.advance_clock(t)?;
        }
        Ok(())
    }

    /// Starts the experiment if needed and runs it to a terminal phase.
    pub fn run(&mut self) -> Result<RunOutcome, BrokerError> {
        if self.phase() == Phase::Created {
            self.command(ClientCommand::Start).map_err(|e| match e {
                CommandError::Broker(b) => b,
                other => BrokerError::Engine(EngineError::Invalid(other.to_string())),
            })?;
        }
        while self.step()? {}
        Ok(RunOutcome {
            phase: self.phase(),
            summary: self.summary(),
        })
    }

    fn deadline_passed(&self, now: Secs) -> bool {
        let e = self.experiment();
        matches!(e.phase, Phase::Calibrating | Phase::Running | Phase::Paused)
            && e.qos.enforce_deadline
            && now > e.qos.deadline_secs()
            && e.unfinished() > 0
    }

    fn handle_report(&mut self, report: &AgentReport) -> Result<(), BrokerError> {
        let Some(commitment) = self.experiment().accounts.commitments.get(&report.job).cloned() else {
            return Ok(());
        };
        let contract = Contract {
            resource: commitment.resource,
            price: commitment.price,
            established_at: report.start,
        };
        let job = self.experiment().jobs[&report.job].clone();
        let events = dispatch::detect_error(&job, report, self.state().config.retry_limit);
        self.engine.record_report(report, &contract)?;
        if events.contains(&JobEvent::Requeue) && !self.phase().is_terminal() {
            self.persist(RecordBody::JobTransition {
                job: report.job,
                event: JobEvent::Requeue,
            })?;
        }
        Ok(())
    }

    fn on_tick(&mut self) -> Result<(), BrokerError> {
        let phase = self.phase();
        if phase == Phase::Created || phase.is_terminal() {
            return Ok(());
        }
        let q = self.state().config.scheduler.quantum.max(1);
        let quantum = self.fabric.clock() / q;
        if self.state().quantum.is_none_or(|last| quantum > last) {
            self.persist(RecordBody::QuantumMark { quantum })?;
        }
        match phase {
            Phase::Calibrating => {
                if self.state().calibration_rounds == 0 {
                    if self.calibrate()? {
                        self.dispatch()?;
                    }
                    return Ok(());
                }
                // calibration jobs left queued, e.g. by a crash or an outage
                if self.experiment().count_in(JobState::Scheduled) > 0 && self.discover().is_some() {
                    self.dispatch()?;
                }
                // calibration jobs that could not be placed are replanned
                if self.experiment().count_in(JobState::Executing) > 0 {
                    return Ok(());
                }
                self.change_phase(Phase::Running, "calibration complete")?;
                self.replan_and_dispatch()
            }
            Phase::Running => self.replan_and_dispatch(),
            _ => Ok(()),
        }
    }

    fn discover(&mut self) -> Option<Vec<crate::scheduler::QuotedResource>> {
        let state = self.engine.state();
        match discover_resources(&self.fabric, &state.experiment, &state.profile, &state.config.scheduler) {
            Ok(d) => {
                self.quotes = d.quotes;
                Some(d.resources)
            }
            Err(_) => {
                self.quotes.clear();
                None
            }
        }
    }

    /// One calibration job per discovered resource. Returns false when no
    /// resource could be discovered (the round is retried next quantum).
    fn calibrate(&mut self) -> Result<bool, BrokerError> {
        let Some(resources) = self.discover() else { return Ok(false) };
        let state = self.engine.state();
        let ready: Vec<JobId> = state.experiment.jobs_in(JobState::Ready).map(|j| j.id).collect();
        let per = state.config.scheduler.calibration_jobs_per_resource;
        let default = state.config.scheduler.default_job_seconds;
        let Ok(allocation) = calibrate(&resources, &ready, per) else { return Ok(false) };
        let price: BTreeMap<&ResourceId, GridDollars> = resources.iter().map(|r| (&r.id, r.price)).collect();
        let estimated_cost = allocation
            .queues
            .iter()
            .map(|(r, q)| q.len() as u64 * price[r] * default.ceil() as u64)
            .sum();
        let moves = ready
            .iter()
            .map(|j| (*j, None))
            .collect::<Vec<_>>();
        let moves = rebalance(&moves, &allocation);
        let qos = state.experiment.qos.clone();
        self.persist(RecordBody::AllocationComputed(AllocationRecord {
            trigger: Trigger::Calibration,
            strategy: qos.strategy,
            budget: qos.budget,
            deadline_min: qos.deadline_min,
            estimated_cost,
            estimated_completion: self.fabric.clock() + default.ceil() as Secs,
            moves,
            infeasible: None,
        }))?;
        Ok(true)
    }

    fn replan_and_dispatch(&mut self) -> Result<(), BrokerError> {
        let Some(resources) = self.discover() else { return Ok(()) };
        let now = self.fabric.clock();
        let state = self.engine.state();
        let e = &state.experiment;
        let current: Vec<(JobId, Option<ResourceId>)> = e
            .jobs
            .values()
            .filter(|j| matches!(j.state, JobState::Ready | JobState::Scheduled))
            .map(|j| (j.id, j.assigned_resource.clone()))
            .collect();
        let trigger = if e.reschedule_requested {
            Trigger::Steering
        } else {
            self.pending.take().unwrap_or(Trigger::Quantum)
        };
        if !current.is_empty() || e.reschedule_requested {
            let qos = e.qos.clone();
            let reserved = e.accounts.spent + e.accounts.committed;
            let result = schedule(
                qos.strategy,
                &current,
                &resources,
                &state.profile,
                &qos,
                reserved,
                now,
                &state.config.scheduler,
            );
            let was_infeasible = state.infeasible.clone();
            let record = |moves, infeasible: Option<Infeasibility>, cost, completion| {
                RecordBody::AllocationComputed(AllocationRecord {
                    trigger,
                    strategy: qos.strategy,
                    budget: qos.budget,
                    deadline_min: qos.deadline_min,
                    estimated_cost: cost,
                    estimated_completion: completion,
                    moves,
                    infeasible,
                })
            };
            match result {
                Ok(allocation) => {
                    let moves = rebalance(&current, &allocation);
                    if !moves.is_empty() || trigger != Trigger::Quantum || was_infeasible.is_some() {
                        let body = record(moves, None, allocation.estimated_cost, allocation.estimated_completion);
                        self.persist(body)?;
                    }
                }
                Err(why) => {
                    let changed = was_infeasible.as_ref().is_none_or(|(_, w)| w != &why);
                    if changed || trigger != Trigger::Quantum {
                        self.persist(record(Vec::new(), Some(why), 0, 0))?;
                    }
                    let q = self.state().config.scheduler.quantum.max(1);
                    if let Some((since, why)) = self.state().infeasible.clone() {
                        if now >= since + q {
                            let to = match why {
                                Infeasibility::DeadlineInfeasible { .. } => Phase::FailedDeadline,
                                Infeasibility::BudgetInfeasible { .. } => Phase::FailedBudget,
                            };
                            return self.terminate(to, &why.to_string());
                        }
                    }
                }
            }
        }
        self.dispatch()
    }

    fn dispatch(&mut self) -> Result<(), BrokerError> {
        let now = self.fabric.clock();
        let state = self.engine.state();
        let pass = dispatch_quantum(
            &state.experiment,
            &self.fabric,
            &self.quotes,
            &state.profile,
            &state.config.scheduler,
            now,
        );
        if !pass.withheld.is_empty() {
            self.pending = Some(Trigger::BudgetHold);
        }
        for action in pass.actions {
            let job = &self.experiment().jobs[&action.job];
            let nominal = nominal_of(job, &self.state().config.scheduler);
            // interrupted attempts do not consume a task-error draw
            let draw = job.task_errors() as u64;
            self.persist(RecordBody::Dispatched { action: action.clone() })?;
            agent_execute(&mut self.fabric, &action, nominal, draw)?;
        }
        Ok(())
    }

    fn check_completion(&mut self) -> Result<(), BrokerError> {
        if !matches!(self.phase(), Phase::Calibrating | Phase::Running) {
            return Ok(());
        }
        let e = self.experiment();
        let limit = self.state().config.retry_limit;
        let active = e
            .jobs
            .values()
            .filter(|j| !j.state.is_terminal() && !(j.state == JobState::Failed && !retryable(j, limit)))
            .count();
        if active > 0 {
            return Ok(());
        }
        let done = e.count_in(JobState::Done);
        let failed = e.count_in(JobState::Failed);
        if failed == 0 && done > 0 {
            self.change_phase(Phase::Completed, "all jobs done")
        } else {
            self.terminate(Phase::Stopped, &format!("{failed} jobs failed after exhausting retries"))
        }
    }

    /// Ends the experiment: running agents are stopped and charged for the
    /// work they consumed, queued jobs are cancelled, and the phase change is
    /// written last.
    fn terminate(&mut self, to: Phase, reason: &str) -> Result<(), BrokerError> {
        let now = self.fabric.clock();
        let executing: Vec<(JobId, ResourceId)> = self
            .experiment()
            .jobs_in(JobState::Executing)
            .filter_map(|j| j.open_attempt.as_ref().map(|a| (j.id, a.resource.clone())))
            .collect();
        for (job, resource) in executing {
            if let Some(report) = self.fabric.preempt(&resource, job) {
                let price = self.experiment().accounts.commitments[&job].price;
                self.persist(RecordBody::AttemptClosed {
                    job,
                    attempt: report.attempt(),
                    charge: report.cpu_seconds * price,
                })?;
            }
        }
        let cancel: Vec<JobId> = self
            .experiment()
            .jobs
            .values()
            .filter(|j| {
                matches!(j.state, JobState::Ready | JobState::Scheduled)
                    || (j.state == JobState::Failed && j.attempts.last().is_some_and(|a| a.outcome == crate::model::Outcome::Preempted))
            })
            .map(|j| j.id)
            .collect();
        for job in cancel {
            self.persist(RecordBody::JobTransition {
                job,
                event: JobEvent::Cancel { at: now },
            })?;
        }
        self.change_phase(to, reason)
    }
}
