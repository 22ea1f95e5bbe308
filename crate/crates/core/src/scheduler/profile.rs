use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{AttemptRecord, Outcome, ResourceId, Secs};

pub const DEFAULT_ALPHA: f64 = 0.3;

/// Measured job consumption rate of one resource.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceRate {
    /// Smoothed wall-seconds per job per node.
    pub measured_job_seconds: f64,
    pub samples: u64,
    pub last_updated: Secs,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateProfile {
    pub rates: BTreeMap<ResourceId, ResourceRate>,
}

impl RateProfile {
    pub fn get(&self, id: &ResourceId) -> Option<&ResourceRate> {
        self.rates.get(id)
    }

    /// Folds one successful attempt into the profile. Anything else is ignored.
    pub fn observe(&mut self, report: &AttemptRecord, alpha: f64) {
        if report.outcome != Outcome::Success {
            return;
        }
        let observed = report.wall_seconds as f64;
        if observed <= 0.0 {
            return;
        }
        self.rates
            .entry(report.resource.clone())
            .and_modify(|r| {
                r.measured_job_seconds = alpha * observed + (1.0 - alpha) * r.measured_job_seconds;
                r.samples += 1;
                r.last_updated = report.end;
            })
            .or_insert(ResourceRate {
                measured_job_seconds: observed,
                samples: 1,
                last_updated: report.end,
            });
    }
}

/// Exponentially smoothed update of the profile from an attempt report.
pub fn update_rate(profile: &RateProfile, report: &AttemptRecord, alpha: f64) -> RateProfile {
    let mut next = profile.clone();
    next.observe(report, alpha);
    next
}
