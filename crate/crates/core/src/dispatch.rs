//! Periodic dispatch of queued jobs onto free nodes, and classification of
//! agent reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::fabric::{cpu_seconds, Fabric, FabricError};
use crate::model::{AttemptRecord, Experiment, GridDollars, Job, JobEvent, JobId, JobState, Outcome, ResourceId, Secs};
use crate::scheduler::{RateProfile, SchedulerParams};
use crate::trading::{negotiate, Contract, ContractRequest, PriceQuote};

pub const DEFAULT_RETRY_LIMIT: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchAction {
    pub job: JobId,
    pub resource: ResourceId,
    pub node: u32,
    pub contract: Contract,
    /// G$ reserved for this attempt. The final charge never exceeds it.
    pub authorized_cost: GridDollars,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentExit {
    Success,
    TaskError,
    ResourceFailure,
    /// The broker stopped the agent.
    Preempted,
}

impl AgentExit {
    pub fn outcome(self) -> Outcome {
        match self {
            AgentExit::Success => Outcome::Success,
            AgentExit::TaskError => Outcome::TaskError,
            AgentExit::ResourceFailure => Outcome::ResourceFailure,
            AgentExit::Preempted => Outcome::Preempted,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentReport {
    pub job: JobId,
    pub resource: ResourceId,
    pub node: u32,
    pub start: Secs,
    pub end: Secs,
    pub cpu_seconds: u64,
    pub wall_seconds: u64,
    pub exit: AgentExit,
}

impl AgentReport {
    pub fn attempt(&self) -> AttemptRecord {
        AttemptRecord {
            resource: self.resource.clone(),
            node: self.node,
            start: self.start,
            end: self.end,
            cpu_seconds: self.cpu_seconds,
            wall_seconds: self.wall_seconds,
            outcome: self.exit.outcome(),
        }
    }

    /// Simulated location of the agent's captured output.
    pub fn stdout_handle(&self) -> String {
        format!("sim://{}/{}/{}-{}.out", self.resource, self.node, self.job, self.start)
    }
}

/// Result of one dispatch pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DispatchPass {
    pub actions: Vec<DispatchAction>,
    /// Jobs left queued because authorizing them would break the budget.
    pub withheld: Vec<JobId>,
}

/// Nominal CPU seconds used to run and cost `job`.
pub fn nominal_of(job: &Job, params: &SchedulerParams) -> f64 {
    job.nominal_cpu_seconds.unwrap_or(params.default_job_seconds)
}

/// Turns the queued (Scheduled) jobs of each resource into actions for its
/// free nodes. Resources are visited cheapest first and queues in job-id
/// order; each authorization is counted against the remaining budget before
/// the next one is considered.
pub fn dispatch_quantum(
    experiment: &Experiment,
    fabric: &Fabric,
    quotes: &BTreeMap<ResourceId, PriceQuote>,
    profiles: &RateProfile,
    params: &SchedulerParams,
    now: Secs,
) -> DispatchPass {
    let mut pass = DispatchPass::default();
    let mut queues: BTreeMap<&ResourceId, Vec<&Job>> = BTreeMap::new();
    for job in experiment.jobs_in(JobState::Scheduled) {
        if let Some(r) = &job.assigned_resource {
            queues.entry(r).or_default().push(job);
        }
    }
    let mut order: Vec<(&ResourceId, &PriceQuote)> =
        queues.keys().filter_map(|r| quotes.get(*r).map(|q| (*r, q))).collect();
    order.sort_by_key(|(r, q)| (q.price, (*r).clone()));

    let mut remaining = experiment
        .qos
        .effective_budget()
        .map(|b| b.saturating_sub(experiment.accounts.spent + experiment.accounts.committed));

    for (resource, quote) in order {
        let Some(site) = fabric.resource(resource) else { continue };
        let free = fabric.free_nodes(resource);
        let estimate = profiles
            .get(resource)
            .map_or(params.default_job_seconds, |p| p.measured_job_seconds)
            .ceil()
            .max(1.0) as u64;
        let queue = &queues[resource];
        let mut nodes = free.into_iter();
        for (i, job) in queue.iter().enumerate() {
            let Some(node) = nodes.next() else { break };
            let exact = cpu_seconds(nominal_of(job, params), site.speed(node)).max(1);
            let cpu = estimate.max(exact);
            let cost = cpu * quote.price;
            let max_price = match remaining {
                Some(left) if cost > left => {
                    pass.withheld.extend(queue[i..].iter().map(|j| j.id));
                    break;
                }
                Some(left) => left / cpu,
                None => GridDollars::MAX,
            };
            let request = ContractRequest {
                resource: resource.clone(),
                max_price,
            };
            let Ok(contract) = negotiate(&request, quote, now) else { break };
            if let Some(left) = remaining.as_mut() {
                *left -= cost;
            }
            pass.actions.push(DispatchAction {
                job: job.id,
                resource: resource.clone(),
                node,
                contract,
                authorized_cost: cost,
            });
        }
    }
    pass
}

/// Launches the agent for `action`; its report arrives as a fabric event.
pub fn agent_execute(fabric: &mut Fabric, action: &DispatchAction, nominal: f64, attempt: u64) -> Result<Secs, FabricError> {
    fabric.launch(action, nominal, attempt)
}

/// Whether a Failed job may be requeued: always after resource failures and
/// preemption, and after task errors until `retry_limit` retries are used.
pub fn retryable(job: &Job, retry_limit: u32) -> bool {
    job.state == JobState::Failed
        && match job.attempts.last().map(|a| a.outcome) {
            Some(Outcome::TaskError) => job.task_errors() as u32 <= retry_limit,
            _ => true,
        }
}

/// Job events implied by an agent report.
pub fn detect_error(job: &Job, report: &AgentReport, retry_limit: u32) -> Vec<JobEvent> {
    let attempt = report.attempt();
    match report.exit {
        AgentExit::Success => vec![JobEvent::Complete(attempt)],
        AgentExit::ResourceFailure | AgentExit::Preempted => vec![JobEvent::Fail(attempt), JobEvent::Requeue],
        AgentExit::TaskError => {
            // this report is the (task_errors + 1)-th task error
            if (job.task_errors() as u32) < retry_limit {
                vec![JobEvent::Fail(attempt), JobEvent::Requeue]
            } else {
                vec![JobEvent::Fail(attempt)]
            }
        }
    }
}
