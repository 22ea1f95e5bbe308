//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;
#[path = "../../core/tests/support/plans.rs"]
mod plans;
#[path = "../../core/tests/support/scenario.rs"]
mod scenario;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use broker_core::broker::{Broker, ClientCommand, QosPatch, RunConfig};
use broker_core::engine::{replay_with, JournalStore, MemoryJournal, RecordBody, Trigger};
use broker_core::fabric::FabricParams;
use broker_core::model::{JobId, JobState, Outcome, Phase, QoSConstraints, ResourceId, Strategy};
use broker_core::scheduler::{plan_cost_opt, plan_time_opt, QuotedResource, RateProfile, ResourceRate, SchedulerParams};
use broker_core::{allocation_cost, expand_jobs, parse_plan, JournalRecord, Summary, TestbedConfig, WWG_TESTBED};
use proptest::prelude::prop;
use proptest::strategy::{Strategy as _, ValueTree};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn runner(seed: u8) -> TestRunner {
    TestRunner::new_with_rng(Config::default(), TestRng::from_seed(RngAlgorithm::ChaCha, &[seed; 32]))
}

fn draw<S: proptest::strategy::Strategy>(s: &S, r: &mut TestRunner) -> S::Value {
    s.new_tree(r).unwrap().current()
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn wwg_plan() -> String {
    std::fs::read_to_string(root().join("testbeds/wwg.pln")).unwrap()
}

fn wwg_config() -> RunConfig {
    RunConfig {
        testbed: WWG_TESTBED.to_string(),
        fabric: FabricParams {
            seed: 1,
            max_load: 0.25,
            ..FabricParams::default()
        },
        job_seconds: 300.0,
        ..RunConfig::default()
    }
}

fn wwg_broker(strategy: Strategy, journal: Box<dyn JournalStore>) -> Broker {
    Broker::create("wwg", &wwg_plan(), QoSConstraints::new(120, 396_000, strategy), wwg_config(), journal).unwrap()
}

fn records(lines: &[String]) -> Vec<JournalRecord> {
    lines.iter().map(|l| JournalRecord::from_line(l).unwrap()).collect()
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn cost_identities() -> Check {
    let prices = [2, 3, 3, 4, 7, 8];
    let cases = [([64, 9, 7, 6, 42, 37], 237_000), ([153, 1, 1, 1, 4, 5], 115_200)];
    let mut slowest = Duration::ZERO;
    for (counts, want) in cases {
        let t = Instant::now();
        let got = allocation_cost(&counts, &prices, 300).map_err(|e| e.to_string())?;
        slowest = slowest.max(t.elapsed());
        ensure(got == want, format!("{counts:?} costs {got}, expected {want}"))?;
    }
    ensure(slowest < Duration::from_millis(1), format!("took {slowest:?}"))?;
    Ok(format!("237000 and 115200 exact, slowest call {slowest:?}"))
}

fn wwg_reproduction() -> Check {
    let t = Instant::now();
    let run = |s| -> Result<Summary, String> {
        let mut b = wwg_broker(s, Box::new(MemoryJournal::new()));
        Ok(b.run().map_err(|e| e.to_string())?.summary)
    };
    let cost = run(Strategy::Cost)?;
    let time = run(Strategy::Time)?;
    let wall = t.elapsed();

    ensure(
        cost.phase == Phase::Completed && cost.jobs_done == 165,
        format!("cost-opt ended {:?} with {} jobs", cost.phase, cost.jobs_done),
    )?;
    ensure(cost.makespan_min <= 120.0, format!("cost-opt makespan {} min", cost.makespan_min))?;
    ensure(cost.total_cost <= 396_000, format!("cost-opt spent {}", cost.total_cost))?;
    ensure(
        time.makespan_min < cost.makespan_min,
        format!("time-opt {} min is not faster than cost-opt {} min", time.makespan_min, cost.makespan_min),
    )?;
    ensure(
        time.total_cost > cost.total_cost,
        format!("time-opt {} G$ is not dearer than cost-opt {} G$", time.total_cost, cost.total_cost),
    )?;

    let testbed = TestbedConfig::parse(WWG_TESTBED).map_err(|e| e.to_string())?;
    let cheapest: Vec<&str> = testbed.resources.iter().filter(|r| r.price == Some(2)).map(|r| r.id.as_str()).collect();
    let on_cheapest: u64 = cost
        .per_resource_jobs
        .iter()
        .filter(|(r, _)| cheapest.contains(&r.as_str()))
        .map(|(_, n)| n)
        .sum();
    let share = on_cheapest as f64 / cost.jobs_done as f64;
    ensure(share >= 0.8, format!("only {:.1}% of cost-opt jobs on the price-2 cluster", share * 100.0))?;
    for r in &testbed.resources {
        let n = time.per_resource_jobs.get(&ResourceId::new(&r.id)).copied().unwrap_or(0);
        ensure(n >= 1, format!("time-opt left {} idle", r.id))?;
    }
    ensure(wall < Duration::from_secs(10), format!("took {wall:?}"))?;
    Ok(format!(
        "cost {} min {} G$ ({:.1}% on price 2), time {} min {} G$, {wall:.2?}",
        cost.makespan_min,
        cost.total_cost,
        share * 100.0,
        time.makespan_min,
        time.total_cost
    ))
}

fn oracle_instance() -> impl proptest::strategy::Strategy<Value = oracle::Instance> {
    let site = (1u32..=3, 1u64..=6, 1u64..=9).prop_map(|(nodes, t, price)| oracle::Site {
        nodes,
        job_seconds: t * 60,
        price,
    });
    (prop::collection::vec(site, 1..=3), 1usize..=8, 1u64..=40, 0u64..=30_000).prop_map(
        |(sites, jobs, deadline_min, budget)| oracle::Instance {
            sites,
            jobs,
            deadline: deadline_min * 60,
            budget,
        },
    )
}

fn oracle_optimality() -> Check {
    let t = Instant::now();
    let mut r = runner(3);
    let gen = oracle_instance();
    let params = SchedulerParams::default();
    let (mut n, mut cost_checked, mut time_checked) = (0, 0, 0);
    while n < 400 {
        let inst = draw(&gen, &mut r);
        n += 1;
        let mut profile = RateProfile::default();
        let resources: Vec<QuotedResource> = inst
            .sites
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let q = QuotedResource::idle(format!("r{i}"), s.price, s.nodes, 0);
                profile.rates.insert(
                    q.id.clone(),
                    ResourceRate {
                        measured_job_seconds: s.job_seconds as f64,
                        samples: 1,
                        last_updated: 0,
                    },
                );
                q
            })
            .collect();
        let qos = |s| QoSConstraints::new(inst.deadline / 60, inst.budget, s);

        let got = plan_cost_opt(inst.jobs, &resources, &profile, &qos(Strategy::Cost), 0, 0, &params);
        match (oracle::min_cost(&inst), got) {
            (Some(c), Ok(plan)) if c <= inst.budget => {
                ensure(plan.estimated_cost == c, format!("cost-opt {} vs oracle {c} on {inst:?}", plan.estimated_cost))?;
                cost_checked += 1;
            }
            (Some(c), Err(_)) if c > inst.budget => {}
            (None, Err(_)) => {}
            (want, got) => return Err(format!("cost-opt {got:?} vs oracle {want:?} on {inst:?}")),
        }

        let got = plan_time_opt(inst.jobs, &resources, &profile, &qos(Strategy::Time), 0, 0, &params);
        match (oracle::min_makespan(&inst), got) {
            (Some(m), Ok(plan)) if m <= inst.deadline => {
                ensure(
                    plan.estimated_completion == m,
                    format!("time-opt {} vs oracle {m} on {inst:?}", plan.estimated_completion),
                )?;
                time_checked += 1;
            }
            (Some(m), Err(_)) if m > inst.deadline => {}
            (None, Err(_)) => {}
            (want, got) => return Err(format!("time-opt {got:?} vs oracle {want:?} on {inst:?}")),
        }
    }
    let wall = t.elapsed();
    ensure(cost_checked >= 200 && time_checked >= 200, format!("only {cost_checked}/{time_checked} feasible"))?;
    ensure(wall < Duration::from_secs(30), format!("took {wall:?}"))?;
    Ok(format!(
        "{n} instances, {cost_checked} cost-opt and {time_checked} time-opt optima equal, {wall:.2?}"
    ))
}

fn budget_safety() -> Check {
    let mut r = runner(4);
    let gen = scenario::scenario(true);
    let (mut runs, mut faulted, mut records_checked, mut violations) = (0, 0, 0u64, 0u64);
    while runs < 200 {
        let s = draw(&gen, &mut r);
        runs += 1;
        if !s.failures.is_empty() || !s.cuts.is_empty() {
            faulted += 1;
        }
        let journal = MemoryJournal::new();
        let mut b = s.broker(Box::new(journal.clone()));
        b.run().map_err(|e| format!("{s:?}: {e}"))?;
        replay_with(&journal.snapshot(), |_, st| {
            let e = &st.experiment;
            records_checked += 1;
            if e.qos.enforce_budget && e.accounts.spent + e.accounts.committed > e.qos.budget {
                violations += 1;
            }
        })
        .map_err(|e| e.to_string())?;
    }
    ensure(violations == 0, format!("{violations} violating records"))?;
    Ok(format!(
        "{runs} runs ({faulted} with failures or cuts), {records_checked} records, 0 violations"
    ))
}

fn cli_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    for strategy in ["cost", "time"] {
        let mut outs = Vec::new();
        for k in 0..2 {
            let out = dir.path().join(format!("{strategy}-{k}"));
            let status = Command::new(env!("CARGO_BIN_EXE_broker"))
                .args(["run", "testbeds/wwg.pln", "--testbed", "testbeds/wwg.testbed"])
                .args(["--deadline", "120", "--budget", "396000", "--strategy", strategy, "--seed", "7"])
                .arg("--out")
                .arg(&out)
                .current_dir(root())
                .output()
                .map_err(|e| e.to_string())?
                .status;
            ensure(status.success(), format!("{strategy} run exited {status}"))?;
            outs.push(out);
        }
        for file in ["journal.jsonl", "summary.json", "timeseries.csv"] {
            let a = std::fs::read(outs[0].join(file)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outs[1].join(file)).map_err(|e| e.to_string())?;
            ensure(a == b, format!("{strategy} {file} differs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} file pairs byte-identical"))
}

fn done_set(lines: &[String]) -> Result<BTreeSet<JobId>, String> {
    let state = broker_core::replay(lines).map_err(|e| e.to_string())?;
    Ok(state.experiment.jobs_in(JobState::Done).map(|j| j.id).collect())
}

fn crash_recovery() -> Check {
    let reference = MemoryJournal::new();
    wwg_broker(Strategy::Cost, Box::new(reference.clone())).run().map_err(|e| e.to_string())?;
    let reference = reference.snapshot();
    let want = done_set(&reference)?;
    let len = reference.len();

    let mut r = runner(6);
    let mut points: BTreeSet<usize> = BTreeSet::new();
    while points.len() < 24 {
        points.insert(draw(&(2..len), &mut r));
    }
    for &crash in &points {
        let journal = MemoryJournal::new();
        journal.fail_after(crash);
        let mut b = wwg_broker(Strategy::Cost, Box::new(journal.clone()));
        ensure(b.run().is_err(), format!("no crash at record {crash}"))?;
        drop(b);
        let survived = journal.snapshot();
        ensure(survived[..] == reference[..crash], format!("prefix differs at crash {crash}"))?;
        let journal = MemoryJournal::from_lines(survived);
        let mut b = Broker::recover(Box::new(journal.clone())).map_err(|e| format!("recover at {crash}: {e}"))?;
        let out = b.run().map_err(|e| format!("resume at {crash}: {e}"))?;
        let lines = journal.snapshot();
        ensure(out.phase == Phase::Completed, format!("crash {crash} ended {:?}", out.phase))?;
        ensure(done_set(&lines)? == want, format!("crash {crash} finished a different job set"))?;
        let mut successes: BTreeMap<JobId, u32> = BTreeMap::new();
        for rec in records(&lines) {
            if let RecordBody::AttemptClosed { job, attempt, .. } = rec.body {
                if attempt.outcome == Outcome::Success {
                    *successes.entry(job).or_default() += 1;
                }
            }
        }
        if let Some((job, n)) = successes.iter().find(|(_, n)| **n > 1) {
            return Err(format!("crash {crash}: job {job} has {n} done attempts"));
        }
    }
    Ok(format!("{} crash points over {len} records, {} jobs done each time", points.len(), want.len()))
}

/// Returns the latency from the QoSChanged record to the steering
/// allocation, checking the quantum mark that opened it.
fn steering_delay(lines: &[String], patch_seq: u64, strategy: Strategy) -> Result<u64, String> {
    let recs = records(lines);
    let patch = recs
        .iter()
        .find(|r| r.seq == patch_seq)
        .ok_or("patch record missing")?;
    ensure(matches!(patch.body, RecordBody::QoSChanged { .. }), "patch record is not QoSChanged")?;
    let (i, alloc) = recs
        .iter()
        .enumerate()
        .skip_while(|(_, r)| r.seq <= patch_seq)
        .find_map(|(i, r)| match &r.body {
            RecordBody::AllocationComputed(a) if a.trigger == Trigger::Steering => Some((i, a)),
            _ => None,
        })
        .ok_or("no steering allocation")?;
    ensure(alloc.strategy == strategy, "steering allocation ignores the patch")?;
    let at = recs[i].t;
    let mark = recs[..i]
        .iter()
        .rev()
        .take_while(|r| r.seq > patch_seq)
        .find(|r| matches!(r.body, RecordBody::QuantumMark { .. }))
        .ok_or("no quantum mark between patch and allocation")?;
    ensure(mark.t == at, format!("quantum mark at {} but allocation at {at}", mark.t))?;
    Ok(at - patch.t)
}

fn steering_in_broker() -> Result<u64, String> {
    let mut worst = 0;
    for offset in [1, 17, 29, 45, 59] {
        for to in [Strategy::Time, Strategy::Cost] {
            let from = if to == Strategy::Time { Strategy::Cost } else { Strategy::Time };
            let journal = MemoryJournal::new();
            let mut b = wwg_broker(from, Box::new(journal.clone()));
            b.command(ClientCommand::Start).map_err(|e| e.to_string())?;
            while b.phase() != Phase::Running {
                b.step().map_err(|e| e.to_string())?;
            }
            let t0 = b.now() + 600 + offset;
            b.run_until(t0).map_err(|e| e.to_string())?;
            ensure(b.phase() == Phase::Running, format!("left Running before {t0}"))?;
            let patch = QosPatch {
                strategy: Some(to),
                budget: Some(400_000),
                ..QosPatch::default()
            };
            b.command(ClientCommand::UpdateQos(patch)).map_err(|e| e.to_string())?;
            let seq = b.state().seq;
            b.run_until(t0 + 60).map_err(|e| e.to_string())?;
            let delay = steering_delay(&journal.snapshot(), seq, to)?;
            ensure(delay <= 60, format!("allocation {delay} s after the patch at {t0}"))?;
            worst = worst.max(delay);
        }
    }
    Ok(worst)
}

fn steering_over_http() -> Result<u64, String> {
    use axum::body::Body;
    use axum::http::{Method, Request};
    use broker_cli::service::{router, AppState, ServiceConfig};
    use http_body_util::BodyExt;
    use serde_json::{json, Value};
    use tower::ServiceExt;

    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let app = router(AppState::new(ServiceConfig {
            data_dir: None,
            testbed_dir: root().join("testbeds"),
            pace: 0.0,
        }));
        let call = |method: Method, uri: String, body: Option<Value>| {
            let app = app.clone();
            async move {
                let req = Request::builder()
                    .method(method)
                    .uri(uri)
                    .header("content-type", "application/json")
                    .body(Body::from(body.map(|b| b.to_string()).unwrap_or_default()))
                    .unwrap();
                let resp = app.oneshot(req).await.unwrap();
                let status = resp.status();
                let bytes = resp.into_body().collect().await.unwrap().to_bytes();
                (status, bytes)
            }
        };
        let json = |b: &[u8]| serde_json::from_slice::<Value>(b).unwrap_or(Value::Null);
        let body = json!({
            "plan": wwg_plan(),
            "qos": { "deadline_min": 120, "budget": 396000, "strategy": "cost" },
            "config": { "seed": 1 },
            "pace": 600.0,
            "start": true,
        });
        let (s, b) = call(Method::POST, "/experiments".into(), Some(body)).await;
        ensure(s.as_u16() == 201, format!("create returned {s}"))?;
        let id = json(&b)["id"].as_str().unwrap().to_string();
        let status = |id: String| {
            let call = &call;
            async move { json(&call(Method::GET, format!("/experiments/{id}"), None).await.1) }
        };
        let deadline = Instant::now() + Duration::from_secs(20);
        while status(id.clone()).await["phase"] != "Running" {
            ensure(Instant::now() < deadline, "never reached Running")?;
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        let (s, b) = call(Method::PATCH, format!("/experiments/{id}/qos"), Some(json!({ "strategy": "time" }))).await;
        ensure(s.is_success(), format!("patch returned {s}"))?;
        let ack = json(&b);
        let (t, seq) = (ack["t"].as_u64().unwrap(), ack["seq"].as_u64().unwrap());
        while status(id.clone()).await["t"].as_u64().unwrap_or(0) < t + 120 {
            ensure(Instant::now() < deadline, "virtual time stalled")?;
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        call(Method::POST, format!("/experiments/{id}/stop"), None).await;
        let (_, raw) = call(Method::GET, format!("/experiments/{id}/events"), None).await;
        let lines: Vec<String> = String::from_utf8_lossy(&raw)
            .lines()
            .filter_map(|l| l.strip_prefix("data: "))
            .filter(|l| l.contains("\"seq\""))
            .map(String::from)
            .collect();
        let delay = steering_delay(&lines, seq, Strategy::Time)?;
        ensure(delay <= 60, format!("allocation {delay} s after the patch"))?;
        Ok(delay)
    })
}

fn steering_latency() -> Check {
    let broker = steering_in_broker()?;
    let http = steering_over_http()?;
    Ok(format!("worst {broker} s over 10 scripted patches, {http} s over HTTP; quantum 60 s"))
}

fn plan_expansion() -> Check {
    let mut r = runner(8);
    let gen = prop::collection::vec(plans::dom(), 0..=3);
    let mut total = 0;
    for _ in 0..100 {
        let doms = draw(&gen, &mut r);
        let text = plans::plan_text(&doms);
        let plan = parse_plan(&text).map_err(|e| format!("{e}\n{text}"))?;
        let jobs = expand_jobs(&plan).map_err(|e| e.to_string())?;
        let want: usize = doms.iter().map(plans::Dom::expected).product();
        ensure(jobs.len() == want, format!("{} jobs, expected {want}\n{text}", jobs.len()))?;
        total += jobs.len();
    }
    let wwg = expand_jobs(&parse_plan(&wwg_plan()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(wwg.len() == 165, format!("wwg plan gave {} jobs", wwg.len()))?;
    Ok(format!("100 plans ({total} jobs) match the product law; wwg plan gives 165"))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("cost identities", cost_identities),
        ("wwg reproduction", wwg_reproduction),
        ("oracle optimality", oracle_optimality),
        ("budget safety", budget_safety),
        ("determinism", cli_determinism),
        ("crash recovery", crash_recovery),
        ("steering latency", steering_latency),
        ("plan expansion", plan_expansion),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name:<18} {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name:<18} {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
