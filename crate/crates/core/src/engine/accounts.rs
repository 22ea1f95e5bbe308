use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GridDollars, JobId, ResourceId};

/// Budget reserved for one dispatched attempt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Commitment {
    pub resource: ResourceId,
    /// Contract price, G$ per CPU-second.
    pub price: GridDollars,
    pub amount: GridDollars,
}

/// Closed-attempt totals for one resource.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceLedger {
    pub jobs_done: u64,
    pub cpu_seconds: u64,
    pub cost: GridDollars,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounts {
    /// Charged for closed attempts.
    pub spent: GridDollars,
    /// Authorized for attempts still running.
    pub committed: GridDollars,
    #[serde(default)]
    pub commitments: BTreeMap<JobId, Commitment>,
    #[serde(default)]
    pub resources: BTreeMap<ResourceId, ResourceLedger>,
}

impl Accounts {
    pub fn jobs_done(&self) -> u64 {
        self.resources.values().map(|l| l.jobs_done).sum()
    }

    /// Sum of the per-resource ledger costs. Equals `spent` by construction.
    pub fn ledger_cost(&self) -> GridDollars {
        self.resources.values().map(|l| l.cost).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("length mismatch: {counts} counts but {prices} prices")]
pub struct LengthMismatch {
    pub counts: usize,
    pub prices: usize,
}

/// Σ counts_i × prices_i × cpu_seconds_per_job.
pub fn allocation_cost(counts: &[u64], prices: &[GridDollars], cpu_seconds_per_job: u64) -> Result<GridDollars, LengthMismatch> {
    if counts.len() != prices.len() {
        return Err(LengthMismatch {
            counts: counts.len(),
            prices: prices.len(),
        });
    }
    Ok(counts.iter().zip(prices).map(|(c, p)| c * p * cpu_seconds_per_job).sum())
}
