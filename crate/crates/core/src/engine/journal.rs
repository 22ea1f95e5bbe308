//! Journal records and the append-only stores that hold them.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::RunConfig;
use crate::dispatch::DispatchAction;
use crate::model::{AttemptRecord, GridDollars, JobEvent, JobId, Phase, QoSConstraints, Secs, Strategy};
use crate::plan::JobSpec;
use crate::scheduler::{Infeasibility, Move};

/// One line of the journal: `{seq, t, kind, payload}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JournalRecord {
    pub seq: u64,
    pub t: Secs,
    #[serde(flatten)]
    pub body: RecordBody,
}

impl JournalRecord {
    pub fn kind(&self) -> &'static str {
        self.body.kind()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("journal records serialize")
    }

    pub fn from_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSeed {
    pub id: JobId,
    pub spec: JobSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_cpu_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    /// Plan file text as submitted.
    pub plan: String,
    pub qos: QoSConstraints,
    pub config: RunConfig,
    pub jobs: Vec<JobSeed>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trigger {
    Calibration,
    Quantum,
    Steering,
    ResourceChange,
    BudgetHold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub trigger: Trigger,
    pub strategy: Strategy,
    pub budget: GridDollars,
    pub deadline_min: u64,
    pub estimated_cost: GridDollars,
    pub estimated_completion: Secs,
    /// Jobs moving between queues. Applied atomically with the record.
    pub moves: Vec<Move>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<Infeasibility>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum RecordBody {
    ExperimentCreated(Box<Created>),
    JobsAdded {
        jobs: Vec<JobSeed>,
    },
    QoSChanged {
        qos: QoSConstraints,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
        reason: String,
    },
    QuantumMark {
        quantum: u64,
    },
    AllocationComputed(AllocationRecord),
    JobTransition {
        job: JobId,
        event: JobEvent,
    },
    /// Stage-in and start of an agent, with its budget commitment.
    Dispatched {
        action: DispatchAction,
    },
    /// Closes the job's open attempt, charges it and releases its commitment.
    AttemptClosed {
        job: JobId,
        attempt: AttemptRecord,
        charge: GridDollars,
    },
}

impl RecordBody {
    pub fn kind(&self) -> &'static str {
        match self {
            RecordBody::ExperimentCreated(_) => "ExperimentCreated",
            RecordBody::JobsAdded { .. } => "JobsAdded",
            RecordBody::QoSChanged { .. } => "QoSChanged",
            RecordBody::PhaseChanged { .. } => "PhaseChanged",
            RecordBody::QuantumMark { .. } => "QuantumMark",
            RecordBody::AllocationComputed(_) => "AllocationComputed",
            RecordBody::JobTransition { .. } => "JobTransition",
            RecordBody::Dispatched { .. } => "Dispatched",
            RecordBody::AttemptClosed { .. } => "AttemptClosed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("storage failure: {0}")]
pub struct StorageError(pub String);

/// Append-only record storage.
pub trait JournalStore: Send {
    /// Durably appends one serialized record.
    fn append(&mut self, line: &str) -> Result<(), StorageError>;
    /// All lines written so far, in order.
    fn lines(&self) -> Result<Vec<String>, StorageError>;
}

/// In-memory journal. Clones share the same buffer, so a test can keep a
/// handle while the engine owns another.
#[derive(Clone, Debug, Default)]
pub struct MemoryJournal {
    inner: Arc<Mutex<MemoryInner>>,
}

#[derive(Debug, Default)]
struct MemoryInner {
    lines: Vec<String>,
    /// Refuse appends once this many lines are stored.
    fail_after: Option<usize>,
}

impl MemoryJournal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_lines(lines: Vec<String>) -> Self {
        let j = Self::default();
        j.inner.lock().unwrap().lines = lines;
        j
    }

    /// Makes every append fail once `n` lines are stored.
    pub fn fail_after(&self, n: usize) {
        self.inner.lock().unwrap().fail_after = Some(n);
    }

    pub fn heal(&self) {
        self.inner.lock().unwrap().fail_after = None;
    }

    pub fn snapshot(&self) -> Vec<String> {
        self.inner.lock().unwrap().lines.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl JournalStore for MemoryJournal {
    fn append(&mut self, line: &str) -> Result<(), StorageError> {
        let mut inner = self.inner.lock().unwrap();
        if inner.fail_after.is_some_and(|n| inner.lines.len() >= n) {
            return Err(StorageError("injected append failure".into()));
        }
        inner.lines.push(line.to_string());
        Ok(())
    }

    fn lines(&self) -> Result<Vec<String>, StorageError> {
        Ok(self.snapshot())
    }
}

/// JSON Lines journal on disk. Each append is flushed before returning.
#[derive(Debug)]
pub struct FileJournal {
    path: PathBuf,
    file: File,
    sync: bool,
}

impl FileJournal {
    /// Opens `path` for appending, creating it if needed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StorageError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| StorageError(format!("{}: {e}", path.display())))?;
        Ok(FileJournal { path, file, sync: false })
    }

    /// Also fsync after every append.
    pub fn with_sync(mut self, sync: bool) -> Self {
        self.sync = sync;
        self
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl JournalStore for FileJournal {
    fn append(&mut self, line: &str) -> Result<(), StorageError> {
        let io = |e: std::io::Error| StorageError(format!("{}: {e}", self.path.display()));
        let mut buf = String::with_capacity(line.len() + 1);
        buf.push_str(line);
        buf.push('\n');
        self.file.write_all(buf.as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)?;
        if self.sync {
            self.file.sync_data().map_err(io)?;
        }
        Ok(())
    }

    fn lines(&self) -> Result<Vec<String>, StorageError> {
        read_lines(&self.path)
    }
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, StorageError> {
    let file = File::open(path).map_err(|e| StorageError(format!("{}: {e}", path.display())))?;
    BufReader::new(file)
        .lines()
        .filter(|l| !l.as_ref().is_ok_and(|l| l.trim().is_empty()))
        .collect::<Result<_, _>>()
        .map_err(|e| StorageError(format!("{}: {e}", path.display())))
}
