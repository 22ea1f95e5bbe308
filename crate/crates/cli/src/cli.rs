//! `broker run | resume | validate | serve`.

use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use broker_core::broker::{Broker, BrokerError, RunConfig};
use broker_core::engine::{FileJournal, JournalStore};
use broker_core::fabric::FabricParams;
use broker_core::model::{Phase, QoSConstraints, Strategy};
use broker_core::timeseries::{export_timeseries, DEFAULT_INTERVAL};
use broker_core::{expand_jobs, parse_plan, Summary};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::service::{self, ServiceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DEADLINE: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Parser, Debug)]
#[command(name = "broker", version, about = "Deadline and budget constrained grid broker")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run an experiment headlessly on a simulated testbed.
    Run(RunArgs),
    /// Recover an interrupted run from its output directory and finish it.
    Resume {
        /// Output directory of the interrupted run.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a plan file and report its job count.
    Validate { plan: PathBuf },
    /// Serve the HTTP steering interface.
    Serve(ServeArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Time,
    Cost,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Time => Strategy::Time,
            StrategyArg::Cost => Strategy::Cost,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Plan file.
    pub plan: PathBuf,
    /// Testbed description (TOML).
    #[arg(long)]
    pub testbed: PathBuf,
    /// Deadline in minutes from start.
    #[arg(long, required_unless_present = "no_deadline")]
    pub deadline: Option<u64>,
    /// Budget in G$.
    #[arg(long, required_unless_present = "no_budget")]
    pub budget: Option<u64>,
    #[arg(long, value_enum)]
    pub strategy: StrategyArg,
    /// Do not enforce the deadline.
    #[arg(long)]
    pub no_deadline: bool,
    /// Do not enforce the budget.
    #[arg(long)]
    pub no_budget: bool,
    /// Simulation seed; 0 disables background load.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Nominal CPU seconds per job.
    #[arg(long, default_value_t = 300.0)]
    pub job_seconds: f64,
    /// Upper end of the background load range.
    #[arg(long, default_value_t = 0.25)]
    pub max_load: f64,
    /// Virtual seconds per wall second; 0 runs as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    pub pace: f64,
}

#[derive(Args, Debug, Clone)]
pub struct ServeArgs {
    #[arg(long, env = "BROKER_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    /// Directory for experiment journals. Existing journals are recovered on
    /// start-up. Without it journals live in memory only.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Directory searched for named testbeds.
    #[arg(long, default_value = "testbeds")]
    pub testbed_dir: PathBuf,
    /// Default virtual seconds per wall second for new experiments.
    #[arg(long, default_value_t = service::DEFAULT_PACE)]
    pub pace: f64,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Run(args) => report(run(&args)),
        Command::Resume { out } => report(resume(&out)),
        Command::Validate { plan } => validate(&plan),
        Command::Serve(args) => serve(args),
    }
}

fn report(result: Result<Summary, String>) -> i32 {
    match result {
        Ok(summary) => {
            println!(
                "{}: {} of {} jobs done, makespan {} min, cost {} G$",
                phase_name(summary.phase),
                summary.jobs_done,
                summary.jobs_total,
                summary.makespan_min,
                summary.total_cost
            );
            exit_code(summary.phase)
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn phase_name(p: Phase) -> String {
    format!("{p:?}")
}

pub fn exit_code(phase: Phase) -> i32 {
    match phase {
        Phase::Completed => EXIT_OK,
        Phase::FailedDeadline => EXIT_DEADLINE,
        Phase::FailedBudget => EXIT_BUDGET,
        _ => EXIT_ERROR,
    }
}

fn read(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn run_config(args: &RunArgs, testbed: String) -> RunConfig {
    RunConfig {
        testbed,
        fabric: FabricParams {
            seed: args.seed,
            max_load: args.max_load,
            ..FabricParams::default()
        },
        job_seconds: args.job_seconds,
        ..RunConfig::default()
    }
}

pub fn run(args: &RunArgs) -> Result<Summary, String> {
    let plan = read(&args.plan)?;
    let testbed = read(&args.testbed)?;
    let qos = QoSConstraints {
        deadline_min: args.deadline.unwrap_or(u64::MAX / 60),
        budget: args.budget.unwrap_or(u64::MAX),
        strategy: args.strategy.into(),
        enforce_deadline: !args.no_deadline,
        enforce_budget: !args.no_budget,
    };
    fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let journal_path = args.out.join(JOURNAL_FILE);
    if journal_path.exists() {
        fs::remove_file(&journal_path).map_err(|e| format!("{}: {e}", journal_path.display()))?;
    }
    let journal = FileJournal::open(&journal_path).map_err(|e| e.to_string())?;
    let id = args
        .plan
        .file_stem()
        .map_or_else(|| "experiment".to_string(), |s| s.to_string_lossy().into_owned());
    let mut broker =
        Broker::create(id, &plan, qos, run_config(args, testbed), Box::new(journal)).map_err(|e| e.to_string())?;
    finish(&mut broker, &args.out, args.pace)
}

pub fn resume(out: &Path) -> Result<Summary, String> {
    let journal = FileJournal::open(out.join(JOURNAL_FILE)).map_err(|e| e.to_string())?;
    let mut broker = Broker::recover(Box::new(journal) as Box<dyn JournalStore>).map_err(|e| e.to_string())?;
    finish(&mut broker, out, 0.0)
}

fn finish(broker: &mut Broker, out: &Path, pace: f64) -> Result<Summary, String> {
    let err = |e: BrokerError| e.to_string();
    if broker.phase() == Phase::Created {
        broker.command(broker_core::ClientCommand::Start).map_err(|e| e.to_string())?;
    }
    if pace > 0.0 {
        while let Some(next) = broker.next_instant() {
            let gap = next.saturating_sub(broker.now()) as f64 / pace;
            std::thread::sleep(Duration::from_secs_f64(gap));
            broker.step().map_err(err)?;
        }
    }
    let outcome = broker.run().map_err(err)?;
    write_outputs(broker, out)?;
    Ok(outcome.summary)
}

fn write_outputs(broker: &Broker, out: &Path) -> Result<(), String> {
    let lines = broker.engine().journal_lines().map_err(|e| e.to_string())?;
    let csv = export_timeseries(&lines, DEFAULT_INTERVAL).map_err(|e| e.to_string())?;
    write_file(&out.join(TIMESERIES_FILE), csv.as_bytes())?;
    let mut summary = serde_json::to_vec_pretty(&broker.summary()).map_err(|e| e.to_string())?;
    summary.push(b'\n');
    write_file(&out.join(SUMMARY_FILE), &summary)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), String> {
    let mut f = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
    f.write_all(bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn validate(path: &Path) -> i32 {
    let result = read(path).and_then(|text| {
        let plan = parse_plan(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let jobs = expand_jobs(&plan).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok((plan, jobs.len()))
    });
    match result {
        Ok((plan, n)) => {
            let params: Vec<String> = plan
                .parameters
                .iter()
                .map(|p| format!("{}({})", p.name, p.domain.cardinality()))
                .collect();
            println!("{}: {n} jobs; parameters: {}", path.display(), params.join(" x "));
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn serve(args: ServeArgs) -> i32 {
    let addr: SocketAddr = match format!("{}:{}", args.bind, args.port).parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: bad bind address: {e}");
            return EXIT_USAGE;
        }
    };
    let config = ServiceConfig {
        data_dir: args.data_dir,
        testbed_dir: args.testbed_dir,
        pace: args.pace,
    };
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_ERROR;
        }
    };
    match runtime.block_on(service::serve(addr, config)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}
