//! On-disk trial records.
//!
//! Each trial lives in `<data>/trials/<id>/`:
//! `meta.json` (config, seed, creation time), `log.jsonl` (one line per
//! enrollment, fsynced before the response is sent) and `snapshot.json`
//! (state summary every [`SNAPSHOT_EVERY`] enrollments). The log is the
//! source of truth; opening a trial replays it through the engine and
//! checks it against the snapshot.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use car_core::allocation::uniform_grid;
use car_core::engine::UnitRecord;
use car_core::{CarError, Design, ImbalanceReport, TrialConfig, TrialState};

use crate::error::ApiError;

pub const SCHEMA_VERSION: u32 = 1;
pub const SNAPSHOT_EVERY: usize = 25;
pub const RECENT_ENROLLMENTS: usize = 20;

/// Uniform draw for unit `index`: the first `f64` of the ChaCha8 stream
/// `index` keyed by `seed_from_u64(seed)`.
pub fn unit_uniform(seed: u64, index: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.random()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub schema_version: u32,
    pub id: String,
    pub config: TrialConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_token: Option<String>,
    pub created_at: DateTime<Utc>,
}

/// One line of `log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub key: String,
    pub at: DateTime<Utc>,
    pub unit: UnitRecord,
    /// Imbalance right after this enrollment, returned again on replays.
    pub imbalance: ImbalanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Snapshot {
    schema_version: u32,
    n: usize,
    n1: usize,
    lambda: Vec<f64>,
    written_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollmentResponse {
    pub trial_id: String,
    pub index: usize,
    pub arm: u8,
    pub probability: f64,
    pub u: f64,
    pub imbalance: ImbalanceReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecentEnrollment {
    pub index: usize,
    pub covariates: Vec<f64>,
    pub arm: u8,
    pub probability: f64,
    pub u: f64,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub schema_version: u32,
    pub id: String,
    pub config: TrialConfig,
    pub n: usize,
    pub n1: usize,
    pub n2: usize,
    pub imb: f64,
    pub lambda: Vec<f64>,
    pub imbalance: ImbalanceReport,
    pub recent: Vec<RecentEnrollment>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

pub enum Enrolled {
    New(EnrollmentResponse),
    Replayed(EnrollmentResponse),
}

pub struct Trial {
    meta: TrialMeta,
    dir: PathBuf,
    design: Design,
    state: TrialState,
    entries: Vec<LogEntry>,
    keys: HashMap<String, usize>,
    log: File,
    log_len: u64,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// Builds the design and checks the allocation contract on a grid. The grid
/// stays inside [-5, 5] because normal tails saturate to exactly 0 or 1 in
/// f64 further out.
pub fn validated_design(config: &TrialConfig) -> Result<Design, ApiError> {
    let design = Design::new(config.clone())?;
    let report = design.allocation().check(&uniform_grid(-5.0, 5.0, 2001), 1e-6)?;
    if !report.passes(1e-12) {
        return Err(ApiError::invalid(
            "allocation",
            "allocation function violates l(0) = rho, monotonicity or l'(0) < 0",
        ));
    }
    Ok(design)
}

impl Trial {
    pub fn create(root: &Path, meta: TrialMeta) -> Result<Self, ApiError> {
        let design = validated_design(&meta.config)?;
        let dir = root.join(&meta.id);
        fs::create_dir_all(&dir).map_err(ApiError::storage)?;
        write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta).map_err(ApiError::storage)?)
            .map_err(ApiError::storage)?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("log.jsonl"))
            .map_err(ApiError::storage)?;
        Ok(Self {
            state: design.init(),
            meta,
            dir,
            design,
            entries: Vec::new(),
            keys: HashMap::new(),
            log,
            log_len: 0,
        })
    }

    /// Reloads a trial, replaying its log. A torn final line (crash during
    /// an append that was never acknowledged) is truncated away.
    pub fn open(dir: &Path) -> Result<Self, CarError> {
        let meta: TrialMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let design = Design::new(meta.config.clone())?;
        let log_path = dir.join("log.jsonl");
        let mut entries = Vec::new();
        let mut good_len = 0u64;
        if log_path.exists() {
            let mut reader = BufReader::new(File::open(&log_path)?);
            let mut line = String::new();
            loop {
                line.clear();
                let read = reader.read_line(&mut line)?;
                if read == 0 {
                    break;
                }
                if !line.ends_with('\n') {
                    break;
                }
                entries.push(serde_json::from_str::<LogEntry>(&line)?);
                good_len += read as u64;
            }
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        if log.metadata()?.len() != good_len {
            log.set_len(good_len)?;
            log.sync_all()?;
        }

        for e in &entries {
            let expected = unit_uniform(meta.seed, e.unit.index);
            if expected.to_bits() != e.unit.u.to_bits() {
                return Err(CarError::ReplayMismatch {
                    index: e.unit.index,
                    message: "logged uniform does not match the trial's seeded stream".into(),
                });
            }
        }
        let records: Vec<&UnitRecord> = entries.iter().map(|e| &e.unit).collect();
        let snapshot_path = dir.join("snapshot.json");
        if snapshot_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snapshot_path)?)?;
            if snap.n > records.len() {
                return Err(CarError::ReplayMismatch {
                    index: snap.n,
                    message: format!("snapshot is ahead of the log ({} units)", records.len()),
                });
            }
            let prefix = design.replay(records[..snap.n].iter().copied())?;
            let same = prefix.n1 == snap.n1
                && prefix.lambda.len() == snap.lambda.len()
                && prefix.lambda.iter().zip(&snap.lambda).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(CarError::ReplayMismatch {
                    index: snap.n,
                    message: "replayed state differs from snapshot".into(),
                });
            }
        }
        let state = design.replay(records.iter().copied())?;
        let keys = entries.iter().enumerate().map(|(i, e)| (e.key.clone(), i)).collect();
        Ok(Self {
            meta,
            dir: dir.to_path_buf(),
            design,
            state,
            entries,
            keys,
            log,
            log_len: good_len,
        })
    }

    pub fn meta(&self) -> &TrialMeta {
        &self.meta
    }

    pub fn state(&self) -> &TrialState {
        &self.state
    }

    fn response(&self, entry: &LogEntry) -> EnrollmentResponse {
        EnrollmentResponse {
            trial_id: self.meta.id.clone(),
            index: entry.unit.index,
            arm: entry.unit.arm.number(),
            probability: entry.unit.prob,
            u: entry.unit.u,
            imbalance: entry.imbalance.clone(),
        }
    }

    /// Assigns the next unit and persists it before returning. A key seen
    /// before returns the stored response when the covariates match.
    pub fn enroll(&mut self, covariates: &[f64], key: &str) -> Result<Enrolled, ApiError> {
        if let Some(&i) = self.keys.get(key) {
            let entry = &self.entries[i];
            let same = entry.unit.covariates.len() == covariates.len()
                && entry
                    .unit
                    .covariates
                    .iter()
                    .zip(covariates)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(ApiError::conflict(
                    "idempotency_key",
                    format!("key {key:?} was already used with different covariates"),
                ));
            }
            return Ok(Enrolled::Replayed(self.response(entry)));
        }

        let index = self.state.n + 1;
        let u = unit_uniform(self.meta.seed, index);
        let backup = (
            self.state.n,
            self.state.n1,
            self.state.lambda.clone(),
            self.state.sum_sq_phi,
            self.state.stratum_imbalance.clone(),
        );
        // Fails before touching the state on invalid covariates.
        self.design.assign_detailed(&mut self.state, covariates, u)?;
        let unit = self.state.log.last().expect("assign appends to the log").clone();
        let entry = LogEntry {
            key: key.to_string(),
            at: Utc::now(),
            unit,
            imbalance: self.design.imbalance_report(&self.state),
        };
        if let Err(e) = self.append(&entry) {
            let (n, n1, lambda, sum_sq_phi, strata) = backup;
            self.state.n = n;
            self.state.n1 = n1;
            self.state.lambda = lambda;
            self.state.sum_sq_phi = sum_sq_phi;
            self.state.stratum_imbalance = strata;
            self.state.log.pop();
            let _ = self.log.set_len(self.log_len);
            return Err(ApiError::storage(e));
        }
        if self.state.n % SNAPSHOT_EVERY == 0 {
            // The log is already durable; a failed snapshot only costs a
            // slower consistency check on restart.
            if let Err(e) = self.write_snapshot() {
                tracing::warn!(trial = %self.meta.id, error = %e, "snapshot write failed");
            }
        }
        let response = self.response(&entry);
        self.keys.insert(entry.key.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(Enrolled::New(response))
    }

    fn append(&mut self, entry: &LogEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_vec(entry).map_err(std::io::Error::other)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        self.log_len += line.len() as u64;
        Ok(())
    }

    fn write_snapshot(&self) -> std::io::Result<()> {
        let snap = Snapshot {
            schema_version: SCHEMA_VERSION,
            n: self.state.n,
            n1: self.state.n1,
            lambda: self.state.lambda.clone(),
            written_at: Utc::now(),
        };
        write_atomic(
            &self.dir.join("snapshot.json"),
            &serde_json::to_vec_pretty(&snap).map_err(std::io::Error::other)?,
        )
    }

    pub fn status(&self) -> StatusSnapshot {
        let recent = self
            .entries
            .iter()
            .rev()
            .take(RECENT_ENROLLMENTS)
            .rev()
            .map(|e| RecentEnrollment {
                index: e.unit.index,
                covariates: e.unit.covariates.clone(),
                arm: e.unit.arm.number(),
                probability: e.unit.prob,
                u: e.unit.u,
                at: e.at,
            })
            .collect();
        StatusSnapshot {
            schema_version: SCHEMA_VERSION,
            id: self.meta.id.clone(),
            config: self.meta.config.clone(),
            n: self.state.n,
            n1: self.state.n1,
            n2: self.state.n2(),
            imb: self.state.imb(),
            lambda: self.state.lambda.clone(),
            imbalance: self.design.imbalance_report(&self.state),
            recent,
            created_at: self.meta.created_at,
            updated_at: self.entries.last().map_or(self.meta.created_at, |e| e.at),
        }
    }
}
