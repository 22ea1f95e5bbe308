//! Resource discovery, calibration and the deadline/budget constrained
//! scheduling strategies.

pub mod profile;
pub mod strategy;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use profile::{update_rate, RateProfile, ResourceRate, DEFAULT_ALPHA};
pub use strategy::{
    calibrate, capacity_by_deadline, materialize, plan_cost_opt, plan_time_opt, rebalance, schedule,
    schedule_cost_opt, schedule_time_opt, Allocation, Infeasibility, Move, Plan, QuotedResource,
};

use crate::fabric::Fabric;
use crate::model::{Experiment, JobState, ResourceId, Secs};
use crate::trading::{PriceQuote, Trader};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    pub alpha: f64,
    /// Planning estimate for resources with no measurement yet.
    pub default_job_seconds: f64,
    pub calibration_jobs_per_resource: u32,
    pub quantum: Secs,
}

impl Default for SchedulerParams {
    fn default() -> Self {
        SchedulerParams {
            alpha: DEFAULT_ALPHA,
            default_job_seconds: 300.0,
            calibration_jobs_per_resource: 1,
            quantum: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("no resources are available")]
    NoResources,
}

/// Resources that can be discovered now, with fresh quotes.
#[derive(Clone, Debug, Default)]
pub struct Discovery {
    pub resources: Vec<QuotedResource>,
    pub quotes: BTreeMap<ResourceId, PriceQuote>,
}

/// Queries every resource, obtains a quote from its trader and estimates when
/// each usable node will be free from the running attempts.
pub fn discover_resources(
    fabric: &Fabric,
    experiment: &Experiment,
    profiles: &RateProfile,
    params: &SchedulerParams,
) -> Result<Discovery, SchedulerError> {
    let now = fabric.clock();
    let mut out = Discovery::default();
    for resource in fabric.resources() {
        let nodes = fabric.usable_nodes(&resource.id);
        let mut trader = Trader::new(resource.id.clone(), resource.price.clone());
        trader.clock_origin = experiment.clock_origin;
        let Ok(quote) = trader.quote(!nodes.is_empty(), &experiment.id, now) else {
            continue;
        };
        let job_seconds = profiles
            .get(&resource.id)
            .map_or(params.default_job_seconds, |r| r.measured_job_seconds);
        let executing = nodes.iter().filter(|(_, j)| j.is_some()).count() as u32;
        let node_free_at = nodes
            .iter()
            .map(|(_, job)| match job {
                None => now as f64,
                Some(j) => {
                    let start = experiment
                        .jobs
                        .get(j)
                        .filter(|j| j.state == JobState::Executing)
                        .and_then(|j| j.open_attempt.as_ref())
                        .map_or(now, |a| a.start);
                    (start as f64 + job_seconds).max(now as f64)
                }
            })
            .collect();
        out.resources.push(QuotedResource {
            id: resource.id.clone(),
            price: quote.price,
            node_free_at,
            executing,
        });
        out.quotes.insert(resource.id.clone(), quote);
    }
    if out.resources.is_empty() {
        return Err(SchedulerError::NoResources);
    }
    Ok(out)
}
