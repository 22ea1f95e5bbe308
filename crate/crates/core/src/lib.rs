//! Deadline and budget constrained resource broker for parameter-sweep
//! experiments on a simulated computational grid.
//!
//! The crate is organised the way the broker itself is:
//!
//! - [`plan`] parses declarative plan files and expands them into jobs.
//! - [`model`] holds the shared domain types and the job state machine.
//! - [`trading`] quotes and negotiates resource prices.
//! - [`scheduler`] discovers resources, calibrates, profiles job consumption
//!   rates and computes cost- or time-optimising allocations.
//! - [`engine`] is the task-farming engine: the single writer that owns the
//!   experiment state, the write-ahead journal and the accounts.
//! - [`dispatch`] turns allocations into agent deployments and classifies
//!   agent reports.
//! - [`fabric`] is the deterministic discrete-event grid simulation.
//! - [`broker`] wires all of the above into a runnable experiment.
//! - [`timeseries`] derives per-resource execution curves from a journal.

pub mod broker;
pub mod dispatch;
pub mod engine;
pub mod fabric;
pub mod model;
pub mod plan;
pub mod scheduler;
pub mod timeseries;
pub mod trading;

pub use broker::{Broker, ClientCommand, RunConfig, RunOutcome, Summary};
pub use engine::{allocation_cost, replay, replay_with, Accounts, Engine, JournalRecord, RecordBody};
pub use fabric::testbed::{build_wwg, TestbedConfig, WWG_TESTBED};
pub use model::{
    Experiment, GridDollars, Job, JobId, JobState, Phase, QoSConstraints, ResourceId, Secs,
    Strategy,
};
pub use plan::{expand_jobs, parse_plan, JobSpec, PlanModel};
