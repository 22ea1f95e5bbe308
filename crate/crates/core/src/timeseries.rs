//! Per-resource execution curves derived from a journal.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{JournalRecord, RecordBody};
use crate::fabric::testbed::TestbedConfig;
use crate::model::{GridDollars, Outcome, ResourceId, Secs};

pub const DEFAULT_INTERVAL: Secs = 60;
pub const CSV_HEADER: &str = "t_min,resource,executing,done_cum,spent";

#[derive(Clone, Debug, PartialEq, Error)]
pub enum TimeseriesError {
    #[error("no quantum has been marked yet")]
    NoData,
    #[error("unreadable journal: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPoint {
    pub t_min: f64,
    pub resource: ResourceId,
    pub executing: u64,
    pub done_cum: u64,
    pub spent: GridDollars,
}

#[derive(Clone, Default)]
struct Counters {
    executing: u64,
    done: u64,
    spent: GridDollars,
}

/// Samples the state at `k × interval` for `k = 1..=ceil(end / interval)`,
/// where `end` is the time of the last record. Each sample reflects every
/// record stamped at or before it.
pub fn points(records: &[JournalRecord], interval: Secs) -> Result<Vec<TimeSeriesPoint>, TimeseriesError> {
    let interval = interval.max(1);
    let Some(first) = records.first() else {
        return Err(TimeseriesError::NoData);
    };
    let RecordBody::ExperimentCreated(created) = &first.body else {
        return Err(TimeseriesError::Corrupt("first record is not ExperimentCreated".into()));
    };
    if !records.iter().any(|r| matches!(r.body, RecordBody::QuantumMark { .. })) {
        return Err(TimeseriesError::NoData);
    }
    let resources: Vec<ResourceId> = TestbedConfig::parse(&created.config.testbed)
        .map_err(|e| TimeseriesError::Corrupt(e.to_string()))?
        .resources
        .iter()
        .map(|r| ResourceId::new(&r.id))
        .collect();
    let mut counters: BTreeMap<ResourceId, Counters> =
        resources.iter().map(|r| (r.clone(), Counters::default())).collect();
    let end = records.last().map_or(0, |r| r.t);
    let samples = end.div_ceil(interval).max(1);
    let mut out = Vec::with_capacity(samples as usize * resources.len());
    let mut it = records.iter().peekable();
    for k in 1..=samples {
        let at = k * interval;
        while let Some(r) = it.next_if(|r| r.t <= at) {
            match &r.body {
                RecordBody::Dispatched { action } => {
                    counters.entry(action.resource.clone()).or_default().executing += 1;
                }
                RecordBody::AttemptClosed { attempt, charge, .. } => {
                    let c = counters.entry(attempt.resource.clone()).or_default();
                    c.executing = c.executing.saturating_sub(1);
                    c.spent += charge;
                    if attempt.outcome == Outcome::Success {
                        c.done += 1;
                    }
                }
                _ => {}
            }
        }
        for r in &resources {
            let c = &counters[r];
            out.push(TimeSeriesPoint {
                t_min: at as f64 / 60.0,
                resource: r.clone(),
                executing: c.executing,
                done_cum: c.done,
                spent: c.spent,
            });
        }
    }
    Ok(out)
}

pub fn to_csv(points: &[TimeSeriesPoint]) -> String {
    let mut s = String::with_capacity(32 * (points.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for p in points {
        let _ = writeln!(s, "{},{},{},{},{}", p.t_min, p.resource, p.executing, p.done_cum, p.spent);
    }
    s
}

/// CSV export straight from journal lines.
pub fn export_timeseries<S: AsRef<str>>(lines: &[S], interval: Secs) -> Result<String, TimeseriesError> {
    let records = lines
        .iter()
        .map(|l| JournalRecord::from_line(l.as_ref()).map_err(|e| TimeseriesError::Corrupt(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(to_csv(&points(&records, interval)?))
}
