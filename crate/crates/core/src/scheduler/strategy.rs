//! Cost- and time-optimising allocation under deadline and budget constraints.
//!
//! Jobs of one experiment are interchangeable for planning purposes, so a
//! strategy decides how many jobs each resource should take. Per resource the
//! planning model is: every usable node becomes free at a known instant and
//! then completes one job every `job_seconds`; each job costs
//! `price * ceil(job_seconds)` G$.

use std::cmp::Reverse;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::profile::RateProfile;
use super::SchedulerParams;
use crate::model::{GridDollars, JobId, QoSConstraints, ResourceId, Secs};

/// Scheduler view of one discovered resource.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuotedResource {
    pub id: ResourceId,
    /// Quoted G$ per CPU-second.
    pub price: GridDollars,
    /// Expected free instant of each usable node.
    pub node_free_at: Vec<f64>,
    /// Jobs currently executing on the resource.
    pub executing: u32,
}

impl QuotedResource {
    /// An idle resource with `nodes` usable nodes free at `now`.
    pub fn idle(id: impl Into<String>, price: GridDollars, nodes: u32, now: Secs) -> Self {
        QuotedResource {
            id: ResourceId::new(id),
            price,
            node_free_at: vec![now as f64; nodes as usize],
            executing: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum Infeasibility {
    #[error("deadline infeasible: capacity {capacity} for {needed} jobs")]
    DeadlineInfeasible { capacity: u64, needed: u64 },
    #[error("budget infeasible: needs {needed} G$ but only {available} G$ remain")]
    BudgetInfeasible { needed: GridDollars, available: GridDollars },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    /// Job queues in dispatch preference order.
    pub queues: Vec<(ResourceId, Vec<JobId>)>,
    /// Predicted completion instant of the last placed job.
    pub estimated_completion: Secs,
    pub estimated_cost: GridDollars,
}

impl Allocation {
    pub fn counts(&self) -> BTreeMap<ResourceId, usize> {
        self.queues.iter().map(|(r, q)| (r.clone(), q.len())).collect()
    }

    pub fn placed(&self) -> usize {
        self.queues.iter().map(|(_, q)| q.len()).sum()
    }

    pub fn assignment(&self) -> BTreeMap<JobId, ResourceId> {
        self.queues
            .iter()
            .flat_map(|(r, q)| q.iter().map(move |j| (*j, r.clone())))
            .collect()
    }
}

/// A job moving between resource queues. `None` means unassigned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub job: JobId,
    pub from: Option<ResourceId>,
    pub to: Option<ResourceId>,
}

/// Jobs that fit on a resource of `available_nodes` nodes before `deadline`.
/// Unmeasured resources get the single calibration slot.
pub fn capacity_by_deadline(
    available_nodes: u32,
    measured_job_seconds: Option<f64>,
    now: Secs,
    deadline: Secs,
) -> u64 {
    if deadline <= now {
        return 0;
    }
    match measured_job_seconds {
        None => 1,
        Some(t) => slots_until(now as f64, t, deadline as f64) * u64::from(available_nodes),
    }
}

/// Number of `m >= 1` with `free + m * t <= horizon`, evaluated with the same
/// float expression used to enumerate slot instants.
fn slots_until(free: f64, t: f64, horizon: f64) -> u64 {
    if horizon < free + t {
        return 0;
    }
    let mut m = ((horizon - free) / t).floor() as u64;
    while m > 0 && free + m as f64 * t > horizon {
        m -= 1;
    }
    while free + (m + 1) as f64 * t <= horizon {
        m += 1;
    }
    m
}

/// Planning facts for one resource, derived once per scheduling call.
#[derive(Clone, Debug)]
struct Lane {
    id: ResourceId,
    job_seconds: f64,
    unit_cost: GridDollars,
    free: Vec<f64>,
    /// Hard cap for unmeasured resources.
    calibration_cap: Option<u64>,
}

impl Lane {
    fn slots_by(&self, horizon: f64) -> u64 {
        let n: u64 = self.free.iter().map(|f| slots_until(*f, self.job_seconds, horizon)).sum();
        self.calibration_cap.map_or(n, |c| n.min(c))
    }

    /// Completion instant of the `count`-th job under list scheduling.
    fn completion_of(&self, count: u64) -> f64 {
        self.slot_instants(count).last().copied().unwrap_or(0.0)
    }

    /// First `limit` slot instants in ascending order. The `m`-th slot of a
    /// node is `free + m * t`, the same expression [`slots_until`] counts.
    fn slot_instants(&self, limit: u64) -> Vec<f64> {
        let limit = self.calibration_cap.map_or(limit, |c| c.min(limit));
        let mut out = Vec::new();
        if self.free.is_empty() {
            return out;
        }
        let mut m = vec![1u64; self.free.len()];
        let at = |k: usize, m: u64| self.free[k] + m as f64 * self.job_seconds;
        for _ in 0..limit {
            let k = (0..self.free.len())
                .min_by(|&a, &b| at(a, m[a]).total_cmp(&at(b, m[b])).then(a.cmp(&b)))
                .unwrap();
            out.push(at(k, m[k]));
            m[k] += 1;
        }
        out
    }
}

fn lanes(resources: &[QuotedResource], profiles: &RateProfile, params: &SchedulerParams, now: Secs) -> Vec<Lane> {
    resources
        .iter()
        .filter(|r| !r.node_free_at.is_empty())
        .map(|r| {
            let measured = profiles.get(&r.id).map(|p| p.measured_job_seconds);
            let job_seconds = measured.unwrap_or(params.default_job_seconds);
            let calibration_cap = measured
                .is_none()
                .then(|| u64::from(params.calibration_jobs_per_resource).saturating_sub(u64::from(r.executing)));
            Lane {
                id: r.id.clone(),
                job_seconds,
                unit_cost: r.price * job_seconds.ceil() as GridDollars,
                free: r.node_free_at.iter().map(|f| f.max(now as f64)).collect(),
                calibration_cap,
            }
        })
        .collect()
}

/// Cheapest fill of `n` jobs under per-lane capacities. Returns the per-lane
/// counts (in `lanes` order), the cost and the number actually placed.
fn cheapest_fill(lanes: &[Lane], caps: &[u64], n: u64) -> (Vec<u64>, GridDollars, u64) {
    let mut order: Vec<usize> = (0..lanes.len()).collect();
    order.sort_by_key(|&i| (lanes[i].unit_cost, Reverse(caps[i]), lanes[i].id.clone()));
    let mut counts = vec![0u64; lanes.len()];
    let mut left = n;
    let mut cost: GridDollars = 0;
    for i in order {
        if left == 0 {
            break;
        }
        let take = caps[i].min(left);
        counts[i] = take;
        cost += take * lanes[i].unit_cost;
        left -= take;
    }
    (counts, cost, n - left)
}

fn build_allocation(lanes: &[Lane], counts: &[u64], cost: GridDollars) -> (Vec<(ResourceId, u64)>, Secs, GridDollars) {
    let mut order: Vec<usize> = (0..lanes.len()).filter(|&i| counts[i] > 0).collect();
    order.sort_by_key(|&i| (lanes[i].unit_cost, lanes[i].id.clone()));
    let completion = order
        .iter()
        .map(|&i| lanes[i].completion_of(counts[i]))
        .fold(0.0, f64::max);
    (
        order.iter().map(|&i| (lanes[i].id.clone(), counts[i])).collect(),
        completion.ceil() as Secs,
        cost,
    )
}

/// Per-resource job counts chosen by a strategy, before job ids are attached.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub counts: Vec<(ResourceId, u64)>,
    pub estimated_completion: Secs,
    pub estimated_cost: GridDollars,
}

fn remaining_budget(qos: &QoSConstraints, spent: GridDollars) -> Option<GridDollars> {
    qos.effective_budget().map(|b| b.saturating_sub(spent))
}

/// Cheapest-first fill up to each resource's capacity by the deadline.
pub fn plan_cost_opt(
    jobs: usize,
    resources: &[QuotedResource],
    profiles: &RateProfile,
    qos: &QoSConstraints,
    spent: GridDollars,
    now: Secs,
    params: &SchedulerParams,
) -> Result<Plan, Infeasibility> {
    let lanes = lanes(resources, profiles, params, now);
    let n = jobs as u64;
    let horizon = qos.effective_deadline().map_or(f64::INFINITY, |d| d as f64);
    let caps: Vec<u64> = lanes
        .iter()
        .map(|l| if horizon.is_finite() { l.slots_by(horizon) } else { l.calibration_cap.unwrap_or(n) })
        .collect();
    let (counts, cost, placed) = cheapest_fill(&lanes, &caps, n);
    let all_measured = lanes.iter().all(|l| l.calibration_cap.is_none());
    if placed < n && horizon.is_finite() && all_measured {
        return Err(Infeasibility::DeadlineInfeasible {
            capacity: caps.iter().sum(),
            needed: n,
        });
    }
    if let Some(left) = remaining_budget(qos, spent) {
        if cost > left || qos.budget < spent {
            return Err(Infeasibility::BudgetInfeasible {
                needed: cost,
                available: left,
            });
        }
    }
    let (counts, completion, cost) = build_allocation(&lanes, &counts, cost);
    Ok(Plan {
        counts,
        estimated_completion: completion,
        estimated_cost: cost,
    })
}

/// Earliest achievable completion within budget, then the cheapest fill that
/// achieves it.
pub fn plan_time_opt(
    jobs: usize,
    resources: &[QuotedResource],
    profiles: &RateProfile,
    qos: &QoSConstraints,
    spent: GridDollars,
    now: Secs,
    params: &SchedulerParams,
) -> Result<Plan, Infeasibility> {
    let lanes = lanes(resources, profiles, params, now);
    let mut n = jobs as u64;
    if let Some(left) = remaining_budget(qos, spent) {
        if qos.budget < spent || (n > 0 && left == 0) {
            return Err(Infeasibility::BudgetInfeasible {
                needed: lanes.iter().map(|l| l.unit_cost).min().unwrap_or(0) * n,
                available: left,
            });
        }
    }

    // Candidate completion horizons: the first n slot instants of every lane.
    let mut candidates: Vec<f64> = lanes.iter().flat_map(|l| l.slot_instants(n)).collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let total_slots = lanes
        .iter()
        .map(|l| l.calibration_cap.unwrap_or(n))
        .fold(0u64, u64::saturating_add);
    n = n.min(total_slots);
    if n == 0 {
        return Ok(Plan {
            counts: Vec::new(),
            estimated_completion: now,
            estimated_cost: 0,
        });
    }

    let caps_at = |h: f64| -> Vec<u64> { lanes.iter().map(|l| l.slots_by(h)).collect() };
    let fits = |h: f64| caps_at(h).iter().sum::<u64>() >= n;
    let affordable = |h: f64| {
        let (_, cost, placed) = cheapest_fill(&lanes, &caps_at(h), n);
        placed == n && remaining_budget(qos, spent).is_none_or(|left| cost <= left)
    };

    let first_fit = candidates.partition_point(|h| !fits(*h));
    let first_ok = first_fit + candidates[first_fit..].partition_point(|h| !affordable(*h));
    if first_ok == candidates.len() {
        let (_, cost, _) = cheapest_fill(&lanes, &caps_at(*candidates.last().unwrap()), n);
        return Err(Infeasibility::BudgetInfeasible {
            needed: cost,
            available: remaining_budget(qos, spent).unwrap_or(0),
        });
    }
    let horizon = candidates[first_ok];
    if let Some(deadline) = qos.effective_deadline() {
        let deadline = deadline as f64;
        if candidates[first_fit] > deadline {
            return Err(Infeasibility::DeadlineInfeasible {
                capacity: caps_at(deadline).iter().sum(),
                needed: n,
            });
        }
        if horizon > deadline {
            let (_, cost, _) = cheapest_fill(&lanes, &caps_at(horizon), n);
            return Err(Infeasibility::BudgetInfeasible {
                needed: cost,
                available: remaining_budget(qos, spent).unwrap_or(0),
            });
        }
    }
    let (counts, cost, _) = cheapest_fill(&lanes, &caps_at(horizon), n);
    let (counts, completion, cost) = build_allocation(&lanes, &counts, cost);
    Ok(Plan {
        counts,
        estimated_completion: completion,
        estimated_cost: cost,
    })
}

/// Attaches job ids to a plan. Jobs keep their current resource where the
/// plan still has room there; the rest fill resources in preference order.
pub fn materialize(plan: &Plan, jobs: &[(JobId, Option<ResourceId>)]) -> Allocation {
    let mut room: BTreeMap<&ResourceId, u64> = plan.counts.iter().map(|(r, c)| (r, *c)).collect();
    let mut queues: BTreeMap<&ResourceId, Vec<JobId>> = BTreeMap::new();
    let mut sorted: Vec<&(JobId, Option<ResourceId>)> = jobs.iter().collect();
    sorted.sort_by_key(|(j, _)| *j);

    let mut unplaced = Vec::new();
    for (job, current) in &sorted {
        match current.as_ref().and_then(|r| room.get_mut(r).map(|left| (r, left))) {
            Some((r, left)) if *left > 0 => {
                *left -= 1;
                queues.entry(plan.counts.iter().find(|(id, _)| id == r).map(|(id, _)| id).unwrap())
                    .or_default()
                    .push(*job);
            }
            _ => unplaced.push(*job),
        }
    }
    let mut cursor = 0;
    for job in unplaced {
        while cursor < plan.counts.len() && room[&plan.counts[cursor].0] == 0 {
            cursor += 1;
        }
        let Some((r, _)) = plan.counts.get(cursor) else { break };
        *room.get_mut(r).unwrap() -= 1;
        queues.entry(r).or_default().push(job);
    }

    Allocation {
        queues: plan
            .counts
            .iter()
            .filter_map(|(r, _)| {
                queues.remove(r).map(|mut q| {
                    q.sort();
                    (r.clone(), q)
                })
            })
            .collect(),
        estimated_completion: plan.estimated_completion,
        estimated_cost: plan.estimated_cost,
    }
}

/// Reassignments needed to move from the current job placement to `target`.
pub fn rebalance(current: &[(JobId, Option<ResourceId>)], target: &Allocation) -> Vec<Move> {
    let wanted = target.assignment();
    let mut moves: Vec<Move> = current
        .iter()
        .filter_map(|(job, from)| {
            let to = wanted.get(job).cloned();
            (to != *from).then(|| Move {
                job: *job,
                from: from.clone(),
                to,
            })
        })
        .collect();
    moves.sort_by_key(|m| m.job);
    moves
}

/// Places jobs under the configured strategy and attaches ids.
#[allow(clippy::too_many_arguments)]
pub fn schedule(
    strategy: crate::model::Strategy,
    jobs: &[(JobId, Option<ResourceId>)],
    resources: &[QuotedResource],
    profiles: &RateProfile,
    qos: &QoSConstraints,
    spent: GridDollars,
    now: Secs,
    params: &SchedulerParams,
) -> Result<Allocation, Infeasibility> {
    let plan = match strategy {
        crate::model::Strategy::Cost => plan_cost_opt(jobs.len(), resources, profiles, qos, spent, now, params)?,
        crate::model::Strategy::Time => plan_time_opt(jobs.len(), resources, profiles, qos, spent, now, params)?,
    };
    Ok(materialize(&plan, jobs))
}

/// Cost-optimising allocation of `jobs`.
pub fn schedule_cost_opt(
    jobs: &[JobId],
    resources: &[QuotedResource],
    profiles: &RateProfile,
    qos: &QoSConstraints,
    spent: GridDollars,
    now: Secs,
    params: &SchedulerParams,
) -> Result<Allocation, Infeasibility> {
    let unassigned: Vec<_> = jobs.iter().map(|j| (*j, None)).collect();
    schedule(crate::model::Strategy::Cost, &unassigned, resources, profiles, qos, spent, now, params)
}

/// Time-optimising allocation of `jobs`.
pub fn schedule_time_opt(
    jobs: &[JobId],
    resources: &[QuotedResource],
    profiles: &RateProfile,
    qos: &QoSConstraints,
    spent: GridDollars,
    now: Secs,
    params: &SchedulerParams,
) -> Result<Allocation, Infeasibility> {
    let unassigned: Vec<_> = jobs.iter().map(|j| (*j, None)).collect();
    schedule(crate::model::Strategy::Time, &unassigned, resources, profiles, qos, spent, now, params)
}

/// Initial measurement round: up to `per_resource` jobs on every resource,
/// cheapest resources first when jobs run short.
pub fn calibrate(
    resources: &[QuotedResource],
    jobs: &[JobId],
    per_resource: u32,
) -> Result<Allocation, super::SchedulerError> {
    if resources.is_empty() {
        return Err(super::SchedulerError::NoResources);
    }
    let mut order: Vec<&QuotedResource> = resources.iter().collect();
    order.sort_by_key(|r| (r.price, Reverse(r.node_free_at.len()), r.id.clone()));
    let mut jobs = jobs.iter().copied();
    let mut queues = Vec::new();
    for r in order {
        let take = (r.node_free_at.len() as u32).min(per_resource);
        let q: Vec<JobId> = jobs.by_ref().take(take as usize).collect();
        if q.is_empty() {
            continue;
        }
        queues.push((r.id.clone(), q));
    }
    Ok(Allocation {
        queues,
        estimated_completion: 0,
        estimated_cost: 0,
    })
}
