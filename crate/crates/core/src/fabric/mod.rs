//! Deterministic discrete-event simulation of the grid.
//!
//! A single ordered event queue drives virtual time. Events fire in
//! `(instant, ordinal)` order, where the ordinal is the insertion counter, so a
//! fixed configuration and seed always replays the same trace.

pub mod rng;
pub mod testbed;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::ClientCommand;
use crate::dispatch::{AgentExit, AgentReport, DispatchAction};
use crate::model::{JobId, ResourceId, Secs};
use crate::trading::PricePolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityWindow {
    pub from: Secs,
    pub until: Secs,
    /// Share of the resource's nodes usable by this consumer in the window.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureScope {
    Resource,
    Node(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureSpec {
    pub at: Secs,
    pub duration: Secs,
    pub scope: FailureScope,
}

/// A simulated grid node-set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resource {
    pub id: ResourceId,
    pub organization: String,
    pub node_count: u32,
    /// Nominal-seconds divisor for each node.
    pub speed_factors: Vec<f64>,
    pub price: PricePolicy,
    pub availability: Vec<AvailabilityWindow>,
    pub failures: Vec<FailureSpec>,
}

impl Resource {
    /// Nodes the consumer may use at `now` according to the availability trace.
    pub fn shared_nodes_at(&self, now: Secs) -> u32 {
        let fraction = self
            .availability
            .iter()
            .find(|w| now >= w.from && now < w.until)
            .map_or(1.0, |w| w.fraction);
        ((self.node_count as f64 * fraction).floor() as u32).min(self.node_count)
    }

    pub fn speed(&self, node: u32) -> f64 {
        self.speed_factors[node as usize]
    }
}

/// Seeded background load of a shared resource, in `[0, max_load)`.
/// Seed 0 disables load entirely.
pub fn background_load(seed: u64, resource: &ResourceId, job: JobId, max_load: f64) -> f64 {
    if seed == 0 || max_load <= 0.0 {
        return 0.0;
    }
    rng::keyed_unit(seed, &[rng::fnv1a64(resource.as_str().as_bytes()), job.0]) * max_load
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor().max(0.0) as u64
}

/// CPU seconds a job of `nominal` seconds consumes on a node of `speed`.
pub fn cpu_seconds(nominal: f64, speed: f64) -> u64 {
    round_half_up(nominal / speed)
}

/// Wall-clock execution time (excluding stage-in) under background `load`.
pub fn service_time(nominal: f64, speed: f64, load: f64) -> Secs {
    round_half_up(nominal / speed * (1.0 + load))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SimEventKind {
    QuantumTick,
    AgentDone {
        resource: ResourceId,
        node: u32,
        token: u64,
    },
    ResourceDown {
        resource: ResourceId,
        scope: FailureScope,
    },
    ResourceUp {
        resource: ResourceId,
        scope: FailureScope,
    },
    ClientCommand(ClientCommand),
}

impl SimEventKind {
    pub fn name(&self) -> &'static str {
        match self {
            SimEventKind::QuantumTick => "QuantumTick",
            SimEventKind::AgentDone { .. } => "AgentDone",
            SimEventKind::ResourceDown { .. } => "ResourceDown",
            SimEventKind::ResourceUp { .. } => "ResourceUp",
            SimEventKind::ClientCommand(_) => "ClientCommand",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent<K = SimEventKind> {
    pub instant: Secs,
    pub ordinal: u64,
    pub kind: K,
}

impl<K> PartialEq for QueueEntry<K> {
    fn eq(&self, other: &Self) -> bool {
        self.0.instant == other.0.instant && self.0.ordinal == other.0.ordinal
    }
}
impl<K> Eq for QueueEntry<K> {}
impl<K> PartialOrd for QueueEntry<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<K> Ord for QueueEntry<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        // reversed: BinaryHeap is a max-heap
        (other.0.instant, other.0.ordinal).cmp(&(self.0.instant, self.0.ordinal))
    }
}

struct QueueEntry<K>(SimEvent<K>);

/// Min-queue of events ordered by `(instant, ordinal)`.
pub struct EventQueue<K> {
    heap: BinaryHeap<QueueEntry<K>>,
    next_ordinal: u64,
}

impl<K> Default for EventQueue<K> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_ordinal: 0,
        }
    }
}

impl<K> EventQueue<K> {
    pub fn push(&mut self, instant: Secs, kind: K) -> u64 {
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        self.heap.push(QueueEntry(SimEvent { instant, ordinal, kind }));
        ordinal
    }

    pub fn pop(&mut self) -> Option<SimEvent<K>> {
        self.heap.pop().map(|e| e.0)
    }

    pub fn peek_instant(&self) -> Option<Secs> {
        self.heap.peek().map(|e| e.0.instant)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum FabricError {
    #[error("event queue is empty")]
    EmptyQueue,
    #[error("instant {at} is before the current clock {now}")]
    PastInstant { at: Secs, now: Secs },
    #[error("unknown resource {0}")]
    UnknownResource(ResourceId),
    #[error("node {node} of {resource} is not free")]
    NodeBusy { resource: ResourceId, node: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FabricParams {
    pub seed: u64,
    /// Upper end of the background load range; lower end is 0.
    pub max_load: f64,
    pub stage_delay: Secs,
    /// Probability that a finished task reports an error.
    pub task_error_rate: f64,
}

impl Default for FabricParams {
    fn default() -> Self {
        FabricParams {
            seed: 0,
            max_load: 0.25,
            stage_delay: 5,
            task_error_rate: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Occupant {
    token: u64,
    job: JobId,
    started: Secs,
    stage: Secs,
    service: Secs,
    cpu: u64,
    task_error: bool,
}

#[derive(Clone, Debug)]
struct Site {
    resource: Resource,
    occupants: Vec<Option<Occupant>>,
    down: u32,
    node_down: Vec<u32>,
}

impl Site {
    fn usable(&self, now: Secs) -> impl Iterator<Item = u32> + '_ {
        let shared = if self.down > 0 { 0 } else { self.resource.shared_nodes_at(now) };
        (0..shared).filter(move |n| self.node_down[*n as usize] == 0)
    }
}

/// What [`Fabric::advance`] executed, plus any agent reports it produced.
#[derive(Clone, Debug)]
pub struct Fired {
    pub event: SimEvent,
    pub reports: Vec<AgentReport>,
}

pub struct Fabric {
    clock: Secs,
    queue: EventQueue<SimEventKind>,
    sites: Vec<Site>,
    index: BTreeMap<ResourceId, usize>,
    params: FabricParams,
    next_token: u64,
}

impl Fabric {
    /// Builds the fabric at `clock`, scheduling every configured failure that
    /// has not yet ended.
    pub fn new(registry: Vec<Resource>, params: FabricParams, clock: Secs) -> Self {
        let mut fabric = Fabric {
            clock,
            queue: EventQueue::default(),
            sites: Vec::new(),
            index: BTreeMap::new(),
            params,
            next_token: 1,
        };
        for resource in registry {
            fabric.index.insert(resource.id.clone(), fabric.sites.len());
            let n = resource.node_count as usize;
            fabric.sites.push(Site {
                resource,
                occupants: vec![None; n],
                down: 0,
                node_down: vec![0; n],
            });
        }
        let failures: Vec<(ResourceId, FailureSpec)> = fabric
            .sites
            .iter()
            .flat_map(|s| s.resource.failures.iter().map(|f| (s.resource.id.clone(), f.clone())))
            .collect();
        for (id, f) in failures {
            let end = f.at + f.duration;
            if end <= clock {
                continue;
            }
            if f.at < clock {
                // already in progress: the resource is down now
                fabric.apply_down(&id, &f.scope);
                fabric.queue.push(end, SimEventKind::ResourceUp { resource: id, scope: f.scope });
            } else {
                fabric.schedule_failure(id, f.at, f.duration, f.scope);
            }
        }
        fabric
    }

    pub fn clock(&self) -> Secs {
        self.clock
    }

    pub fn params(&self) -> &FabricParams {
        &self.params
    }

    pub fn resources(&self) -> impl Iterator<Item = &Resource> {
        self.sites.iter().map(|s| &s.resource)
    }

    pub fn resource(&self, id: &ResourceId) -> Option<&Resource> {
        self.index.get(id).map(|i| &self.sites[*i].resource)
    }

    fn site(&self, id: &ResourceId) -> Result<&Site, FabricError> {
        self.index
            .get(id)
            .map(|i| &self.sites[*i])
            .ok_or_else(|| FabricError::UnknownResource(id.clone()))
    }

    /// Whether the resource can currently be discovered.
    pub fn is_available(&self, id: &ResourceId) -> bool {
        self.site(id).is_ok_and(|s| s.usable(self.clock).next().is_some())
    }

    /// Usable nodes at the current clock with the job running on each, if any.
    pub fn usable_nodes(&self, id: &ResourceId) -> Vec<(u32, Option<JobId>)> {
        match self.site(id) {
            Ok(site) => site
                .usable(self.clock)
                .map(|n| (n, site.occupants[n as usize].as_ref().map(|o| o.job)))
                .collect(),
            Err(_) => Vec::new(),
        }
    }

    pub fn free_nodes(&self, id: &ResourceId) -> Vec<u32> {
        self.usable_nodes(id)
            .into_iter()
            .filter_map(|(n, job)| job.is_none().then_some(n))
            .collect()
    }

    /// Total occupied nodes per resource, in registry order.
    pub fn occupancy(&self) -> Vec<(ResourceId, usize)> {
        self.sites
            .iter()
            .map(|s| (s.resource.id.clone(), s.occupants.iter().filter(|o| o.is_some()).count()))
            .collect()
    }

    pub fn schedule(&mut self, at: Secs, kind: SimEventKind) -> Result<u64, FabricError> {
        if at < self.clock {
            return Err(FabricError::PastInstant { at, now: self.clock });
        }
        Ok(self.queue.push(at, kind))
    }

    /// Moves the clock forward to `t` without firing anything. Refused when an
    /// event is due before `t`.
    pub fn advance_clock(&mut self, t: Secs) -> Result<(), FabricError> {
        if t < self.clock {
            return Err(FabricError::PastInstant { at: t, now: self.clock });
        }
        if let Some(next) = self.queue.peek_instant() {
            if next < t {
                return Err(FabricError::PastInstant { at: next, now: t });
            }
        }
        self.clock = t;
        Ok(())
    }

    pub fn next_instant(&self) -> Option<Secs> {
        self.queue.peek_instant()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn schedule_failure(&mut self, resource: ResourceId, at: Secs, duration: Secs, scope: FailureScope) {
        self.queue.push(
            at,
            SimEventKind::ResourceDown {
                resource: resource.clone(),
                scope: scope.clone(),
            },
        );
        self.queue.push(at + duration, SimEventKind::ResourceUp { resource, scope });
    }

    /// Makes the resource unavailable in `[at, at + duration)`. Agents running
    /// there at `at` report a resource failure with their partial CPU usage.
    pub fn inject_failure(&mut self, resource: &ResourceId, at: Secs, duration: Secs) -> Result<(), FabricError> {
        self.inject_scoped_failure(resource, at, duration, FailureScope::Resource)
    }

    pub fn inject_scoped_failure(
        &mut self,
        resource: &ResourceId,
        at: Secs,
        duration: Secs,
        scope: FailureScope,
    ) -> Result<(), FabricError> {
        self.site(resource)?;
        if at < self.clock {
            return Err(FabricError::PastInstant { at, now: self.clock });
        }
        self.schedule_failure(resource.clone(), at, duration, scope);
        Ok(())
    }

    fn apply_down(&mut self, id: &ResourceId, scope: &FailureScope) {
        let i = self.index[id];
        let site = &mut self.sites[i];
        match scope {
            FailureScope::Resource => site.down += 1,
            FailureScope::Node(n) => {
                if let Some(c) = site.node_down.get_mut(*n as usize) {
                    *c += 1;
                }
            }
        }
    }

    fn apply_up(&mut self, id: &ResourceId, scope: &FailureScope) {
        let i = self.index[id];
        let site = &mut self.sites[i];
        match scope {
            FailureScope::Resource => site.down = site.down.saturating_sub(1),
            FailureScope::Node(n) => {
                if let Some(c) = site.node_down.get_mut(*n as usize) {
                    *c = c.saturating_sub(1);
                }
            }
        }
    }

    /// Starts an agent for `action`: occupies the node for the stage-in delay
    /// plus the service time and schedules its completion report.
    pub fn launch(&mut self, action: &DispatchAction, nominal: f64, attempt: u64) -> Result<Secs, FabricError> {
        let now = self.clock;
        let params = self.params.clone();
        let i = *self
            .index
            .get(&action.resource)
            .ok_or_else(|| FabricError::UnknownResource(action.resource.clone()))?;
        let site = &mut self.sites[i];
        let node = action.node;
        let usable = site.usable(now).any(|n| n == node);
        if !usable || site.occupants.get(node as usize).is_none_or(|o| o.is_some()) {
            return Err(FabricError::NodeBusy {
                resource: action.resource.clone(),
                node,
            });
        }
        let speed = site.resource.speed(node);
        let load = background_load(params.seed, &action.resource, action.job, params.max_load);
        let service = service_time(nominal, speed, load);
        let task_error = params.task_error_rate > 0.0
            && rng::keyed_unit(params.seed ^ 0x7A5C_E22E, &[action.job.0, attempt]) < params.task_error_rate;
        let token = self.next_token;
        self.next_token += 1;
        site.occupants[node as usize] = Some(Occupant {
            token,
            job: action.job,
            started: now,
            stage: params.stage_delay,
            service,
            cpu: cpu_seconds(nominal, speed),
            task_error,
        });
        let done = now + params.stage_delay + service;
        self.queue.push(
            done,
            SimEventKind::AgentDone {
                resource: action.resource.clone(),
                node,
                token,
            },
        );
        Ok(done)
    }

    /// Kills every agent (used when the broker itself stops). No reports.
    pub fn evict_all(&mut self) {
        for site in &mut self.sites {
            site.occupants.iter_mut().for_each(|o| *o = None);
        }
    }

    /// Frees the node running `job` without producing a report.
    pub fn evict(&mut self, resource: &ResourceId, job: JobId) {
        if let Some(i) = self.index.get(resource) {
            for slot in &mut self.sites[*i].occupants {
                if slot.as_ref().is_some_and(|o| o.job == job) {
                    *slot = None;
                }
            }
        }
    }

    /// Stops the agent running `job` and reports the work it consumed so far.
    pub fn preempt(&mut self, resource: &ResourceId, job: JobId) -> Option<AgentReport> {
        let now = self.clock;
        let i = *self.index.get(resource)?;
        let site = &mut self.sites[i];
        let n = site.occupants.iter().position(|o| o.as_ref().is_some_and(|o| o.job == job))?;
        let o = site.occupants[n].take()?;
        let mut report = Self::failure_report(resource, n as u32, &o, now);
        report.exit = AgentExit::Preempted;
        Some(report)
    }

    fn failure_report(resource: &ResourceId, node: u32, o: &Occupant, now: Secs) -> AgentReport {
        let elapsed = now.saturating_sub(o.started);
        let executed = elapsed.saturating_sub(o.stage).min(o.service);
        let cpu = (o.cpu * executed).checked_div(o.service).unwrap_or(0);
        AgentReport {
            job: o.job,
            resource: resource.clone(),
            node,
            start: o.started,
            end: now,
            cpu_seconds: cpu,
            wall_seconds: elapsed,
            exit: AgentExit::ResourceFailure,
        }
    }

    /// Pops the earliest event, moves the clock to it and runs the fabric-side
    /// handler. Broker-level kinds (ticks, commands) are returned untouched.
    pub fn advance(&mut self) -> Result<Fired, FabricError> {
        let event = self.queue.pop().ok_or(FabricError::EmptyQueue)?;
        debug_assert!(event.instant >= self.clock);
        self.clock = self.clock.max(event.instant);
        let now = self.clock;
        let mut reports = Vec::new();
        match &event.kind {
            SimEventKind::AgentDone { resource, node, token } => {
                let i = self.index[resource];
                let slot = &mut self.sites[i].occupants[*node as usize];
                if slot.as_ref().is_some_and(|o| o.token == *token) {
                    let o = slot.take().unwrap();
                    reports.push(AgentReport {
                        job: o.job,
                        resource: resource.clone(),
                        node: *node,
                        start: o.started,
                        end: now,
                        cpu_seconds: o.cpu,
                        wall_seconds: now - o.started,
                        exit: if o.task_error { AgentExit::TaskError } else { AgentExit::Success },
                    });
                }
            }
            SimEventKind::ResourceDown { resource, scope } => {
                self.apply_down(resource, scope);
                let i = self.index[resource];
                let site = &mut self.sites[i];
                for (n, slot) in site.occupants.iter_mut().enumerate() {
                    let hit = match scope {
                        FailureScope::Resource => true,
                        FailureScope::Node(k) => *k as usize == n,
                    };
                    if hit {
                        if let Some(o) = slot.take() {
                            reports.push(Self::failure_report(resource, n as u32, &o, now));
                        }
                    }
                }
            }
            SimEventKind::ResourceUp { resource, scope } => self.apply_up(resource, scope),
            SimEventKind::QuantumTick | SimEventKind::ClientCommand(_) => {}
        }
        Ok(Fired { event, reports })
    }
}
