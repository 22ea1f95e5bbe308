//! Shared inputs for the benchmarks.

use broker_core::broker::{Broker, RunConfig};
use broker_core::engine::MemoryJournal;
use broker_core::fabric::FabricParams;
use broker_core::model::{QoSConstraints, Strategy};
use broker_core::scheduler::{QuotedResource, RateProfile, ResourceRate};
use broker_core::{TestbedConfig, WWG_TESTBED};

pub const WWG_PLAN: &str = include_str!("../../../testbeds/wwg.pln");

/// Idle quotes for the shipped testbed, with a flat 300 s job everywhere.
pub fn wwg_quotes() -> (Vec<QuotedResource>, RateProfile) {
    let testbed = TestbedConfig::parse(WWG_TESTBED).expect("shipped testbed parses");
    let mut profile = RateProfile::default();
    let quotes = testbed
        .resources
        .iter()
        .map(|r| {
            let q = QuotedResource::idle(&r.id, r.price.unwrap_or(1), r.nodes, 0);
            profile.rates.insert(
                q.id.clone(),
                ResourceRate {
                    measured_job_seconds: 300.0,
                    samples: 1,
                    last_updated: 0,
                },
            );
            q
        })
        .collect();
    (quotes, profile)
}

pub fn wwg_broker(strategy: Strategy) -> (Broker, MemoryJournal) {
    let journal = MemoryJournal::new();
    let config = RunConfig {
        testbed: WWG_TESTBED.to_string(),
        fabric: FabricParams {
            seed: 1,
            max_load: 0.25,
            ..FabricParams::default()
        },
        ..RunConfig::default()
    };
    let qos = QoSConstraints::new(120, 396_000, strategy);
    let b = Broker::create("wwg", WWG_PLAN, qos, config, Box::new(journal.clone())).expect("wwg experiment");
    (b, journal)
}
