//! Randomised small experiments for whole-broker properties.
#![allow(dead_code)]

use broker_core::broker::{Broker, ClientCommand, QosPatch, RunConfig};
use broker_core::engine::JournalStore;
use broker_core::fabric::FabricParams;
use broker_core::model::{GridDollars, QoSConstraints, ResourceId, Secs, Strategy};
use proptest::prelude::prop;
use proptest::strategy::Strategy as _;

#[derive(Clone, Debug)]
pub struct Scenario {
    /// (nodes, price, speed)
    pub sites: Vec<(u32, GridDollars, f64)>,
    pub jobs: u32,
    pub deadline_min: u64,
    pub budget: GridDollars,
    pub strategy: Strategy,
    pub seed: u64,
    pub task_error_rate: f64,
    pub lost_work_fraction: f64,
    /// (site, at, duration)
    pub failures: Vec<(usize, Secs, Secs)>,
    /// (at, new budget)
    pub cuts: Vec<(Secs, GridDollars)>,
}

impl Scenario {
    pub fn testbed(&self) -> String {
        let mut s = String::new();
        for (i, (nodes, price, speed)) in self.sites.iter().enumerate() {
            s.push_str(&format!(
                "[[resource]]\nid = \"r{i}\"\nnodes = {nodes}\nprice = {price}\nspeed = {speed:?}\n\n"
            ));
        }
        s
    }

    pub fn plan(&self) -> String {
        format!("parameter i range from 1 to {} step 1\ntask main\nexecute sim $i\nendtask\n", self.jobs)
    }

    pub fn config(&self) -> RunConfig {
        RunConfig {
            testbed: self.testbed(),
            fabric: FabricParams {
                seed: self.seed,
                task_error_rate: self.task_error_rate,
                ..FabricParams::default()
            },
            lost_work_fraction: self.lost_work_fraction,
            horizon: 3 * 24 * 3600,
            ..RunConfig::default()
        }
    }

    pub fn qos(&self) -> QoSConstraints {
        QoSConstraints::new(self.deadline_min, self.budget, self.strategy)
    }

    /// Creates the broker and queues its faults and budget cuts.
    pub fn broker(&self, journal: Box<dyn JournalStore>) -> Broker {
        let mut b = Broker::create("prop", &self.plan(), self.qos(), self.config(), journal).unwrap();
        self.script(&mut b);
        b
    }

    pub fn script(&self, b: &mut Broker) {
        for (site, at, duration) in &self.failures {
            let r = ResourceId::new(format!("r{site}"));
            if b.now() <= *at {
                b.inject_failure(&r, *at, *duration).unwrap();
            }
        }
        for (at, budget) in &self.cuts {
            if b.now() <= *at {
                let patch = QosPatch {
                    budget: Some(*budget),
                    ..QosPatch::default()
                };
                b.schedule_command(*at, ClientCommand::UpdateQos(patch)).unwrap();
            }
        }
    }
}

pub fn scenario(faults: bool) -> impl proptest::strategy::Strategy<Value = Scenario> {
    let sites = prop::collection::vec((1u32..=4, 1u64..=6, prop::sample::select(vec![0.5, 1.0, 1.5])), 1..=3);
    let n_faults = if faults { 0..=3usize } else { 0..=0usize };
    (
        (sites, 2u32..=14, 30u64..=240, 500u64..=40_000, prop::bool::ANY),
        (
            0u64..1000,
            prop::sample::select(vec![0.0, 0.0, 0.1, 0.3]),
            prop::sample::select(vec![0.0, 0.5, 1.0]),
            prop::collection::vec((0usize..3, 0u64..3600, 60u64..1800), n_faults.clone()),
            prop::collection::vec((0u64..3600, 0u64..40_000), n_faults),
        ),
    )
        .prop_map(
            |((sites, jobs, deadline_min, budget, time), (seed, task_error_rate, lost, failures, cuts))| {
                let n = sites.len();
                Scenario {
                    failures: failures.into_iter().map(|(s, at, d)| (s % n, at, d)).collect(),
                    sites,
                    jobs,
                    deadline_min,
                    budget,
                    strategy: if time { Strategy::Time } else { Strategy::Cost },
                    seed,
                    task_error_rate,
                    lost_work_fraction: lost,
                    cuts,
                }
            },
        )
}
