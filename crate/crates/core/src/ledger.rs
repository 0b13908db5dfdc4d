//! Hash-chained, append-only ledger of ingestions, change sets, findings and
//! attestations for one workbook.
//!
//! On disk a ledger is a directory holding `ledger.log` and `objects/`. Each log line is
//!
//! ```text
//! seq<TAB>prev_hash<TAB>kind<TAB>recorded_at<TAB>base64(payload)<TAB>hash
//! ```
//!
//! where `hash` is SHA-256 over `seq\tprev_hash\tkind\tlen(payload)\t` ‖ payload ‖
//! `\trecorded_at`. Record 0 links to 64 zeros. `objects/<digest>.snap` holds the
//! verbatim snapshot file for every ingested content digest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use base64::Engine;
use base64::engine::general_purpose::STANDARD as BASE64;
use chrono::{DateTime, Utc};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::{AuditConfig, audit_workbook};
use crate::control::{ControlPolicy, evaluate_policies};
use crate::diff::{ChangeEvent, ChangeSet, diff_snapshots};
use crate::finding::{Finding, sort_findings};
use crate::grid::{
    CellAddress, CellValue, Snapshot, SnapshotDigest, escape, format_timestamp, parse_snapshot_file, parse_timestamp,
    unescape, write_snapshot_file,
};

pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";
pub const LOG_FILE: &str = "ledger.log";
pub const OBJECTS_DIR: &str = "objects";
const LOCK_FILE: &str = "ledger.lock";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("snapshot belongs to workbook {found:?}, ledger tracks {expected:?}")]
    WorkbookMismatch { expected: String, found: String },
    #[error("snapshot timestamp {found} is not after the latest ingest at {latest}")]
    NonMonotonicTimestamp { latest: String, found: String },
    #[error("ledger chain is broken at seq {seq}: {reason}")]
    ChainBroken { seq: u64, reason: String },
    #[error("snapshot object {0} is missing or does not match its digest")]
    MissingObject(String),
    #[error("corrupt ledger payload at seq {seq}: {reason}")]
    CorruptPayload { seq: u64, reason: String },
    #[error("ledger has no ingested snapshots")]
    Empty,
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Ingest,
    ChangeSet,
    Findings,
    Attest,
}

impl RecordKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Ingest => "INGEST",
            RecordKind::ChangeSet => "CHANGESET",
            RecordKind::Findings => "FINDINGS",
            RecordKind::Attest => "ATTEST",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "INGEST" => Ok(RecordKind::Ingest),
            "CHANGESET" => Ok(RecordKind::ChangeSet),
            "FINDINGS" => Ok(RecordKind::Findings),
            "ATTEST" => Ok(RecordKind::Attest),
            other => Err(format!("unknown record kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerRecord {
    pub seq: u64,
    pub prev_hash: String,
    pub kind: RecordKind,
    pub payload: Vec<u8>,
    pub recorded_at: DateTime<Utc>,
    pub hash: String,
}

/// The exact bytes a record hash covers.
pub fn record_hash_input(
    seq: u64,
    prev_hash: &str,
    kind: RecordKind,
    payload: &[u8],
    recorded_at: &DateTime<Utc>,
) -> Vec<u8> {
    let mut bytes = format!("{seq}\t{prev_hash}\t{kind}\t{}\t", payload.len()).into_bytes();
    bytes.extend_from_slice(payload);
    bytes.extend_from_slice(format!("\t{}", format_timestamp(recorded_at)).as_bytes());
    bytes
}

impl LedgerRecord {
    fn seal(seq: u64, prev_hash: String, kind: RecordKind, payload: Vec<u8>, recorded_at: DateTime<Utc>) -> Self {
        let hash = hex::encode(Sha256::digest(record_hash_input(seq, &prev_hash, kind, &payload, &recorded_at)));
        Self { seq, prev_hash, kind, payload, recorded_at, hash }
    }

    pub fn computed_hash(&self) -> String {
        hex::encode(Sha256::digest(record_hash_input(
            self.seq,
            &self.prev_hash,
            self.kind,
            &self.payload,
            &self.recorded_at,
        )))
    }

    /// Log line without the trailing newline.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.seq,
            self.prev_hash,
            self.kind,
            format_timestamp(&self.recorded_at),
            BASE64.encode(&self.payload),
            self.hash
        )
    }

    pub fn from_line(line: &[u8]) -> Result<Self, String> {
        let text = std::str::from_utf8(line).map_err(|_| "line is not UTF-8".to_string())?;
        let fields: Vec<&str> = text.split('\t').collect();
        let [seq, prev, kind, at, payload, hash] = fields.as_slice() else {
            return Err(format!("expected 6 fields, found {}", fields.len()));
        };
        let record = Self {
            seq: seq.parse().map_err(|_| format!("bad seq {seq:?}"))?,
            prev_hash: prev.to_string(),
            kind: kind.parse()?,
            payload: BASE64.decode(payload).map_err(|e| format!("bad payload encoding: {e}"))?,
            recorded_at: parse_timestamp(at).map_err(|e| e.to_string())?,
            hash: hash.to_string(),
        };
        // Any byte that parses to the same values but renders differently is tampering too.
        if record.to_line().as_bytes() != line {
            return Err("line is not in canonical form".into());
        }
        Ok(record)
    }
}

#[derive(Debug, Clone)]
struct LogLine {
    raw: Vec<u8>,
    record: Option<LedgerRecord>,
}

/// Outcome of [`Ledger::verify_chain`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChainStatus {
    Verified { records: usize },
    Broken { seq: u64, reason: String },
}

impl ChainStatus {
    pub fn is_verified(&self) -> bool {
        matches!(self, ChainStatus::Verified { .. })
    }
}

// ---------------------------------------------------------------------------
// Payloads

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestEntry {
    pub workbook_id: String,
    pub digest: SnapshotDigest,
    pub timestamp: DateTime<Utc>,
    pub actor: String,
}

impl IngestEntry {
    fn to_payload(&self) -> Vec<u8> {
        format!(
            "INGEST1\t{}\t{}\t{}\t{}\n",
            escape(&self.workbook_id),
            self.digest,
            format_timestamp(&self.timestamp),
            escape(&self.actor)
        )
        .into_bytes()
    }

    fn from_payload(text: &str) -> Result<Self, String> {
        let line = text.strip_suffix('\n').ok_or("missing newline")?;
        let fields: Vec<&str> = line.split('\t').collect();
        let ["INGEST1", wb, digest, ts, actor] = fields.as_slice() else {
            return Err("bad INGEST payload".into());
        };
        Ok(Self {
            workbook_id: unescape(wb)?,
            digest: digest.parse().map_err(|e: crate::grid::GridError| e.to_string())?,
            timestamp: parse_timestamp(ts).map_err(|e| e.to_string())?,
            actor: unescape(actor)?,
        })
    }
}

/// Findings produced by one ingest, stamped with the ingested snapshot's time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FindingsEntry {
    pub at: DateTime<Utc>,
    pub digest: SnapshotDigest,
    pub findings: Vec<Finding>,
}

impl FindingsEntry {
    fn to_payload(&self) -> Vec<u8> {
        let mut out = format!("FINDINGS1\t{}\t{}\n", format_timestamp(&self.at), self.digest);
        for f in &self.findings {
            out.push_str(&f.to_record_line());
            out.push('\n');
        }
        out.into_bytes()
    }

    fn from_payload(text: &str) -> Result<Self, String> {
        let body = text.strip_suffix('\n').ok_or("missing newline")?;
        let mut lines = body.split('\n');
        let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
        let ["FINDINGS1", at, digest] = header.as_slice() else {
            return Err("bad FINDINGS payload".into());
        };
        Ok(Self {
            at: parse_timestamp(at).map_err(|e| e.to_string())?,
            digest: digest.parse().map_err(|e: crate::grid::GridError| e.to_string())?,
            findings: lines
                .map(|l| Finding::from_record_line(l).map_err(|e| e.to_string()))
                .collect::<Result<_, _>>()?,
        })
    }
}

/// A sign-off carried by an ingested snapshot; closes the current workflow period.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestEntry {
    pub at: DateTime<Utc>,
    pub digest: SnapshotDigest,
    pub actor: String,
    pub text: String,
}

impl AttestEntry {
    fn to_payload(&self) -> Vec<u8> {
        format!(
            "ATTEST1\t{}\t{}\t{}\t{}\n",
            format_timestamp(&self.at),
            self.digest,
            escape(&self.actor),
            escape(&self.text)
        )
        .into_bytes()
    }

    fn from_payload(text: &str) -> Result<Self, String> {
        let line = text.strip_suffix('\n').ok_or("missing newline")?;
        let fields: Vec<&str> = line.split('\t').collect();
        let ["ATTEST1", at, digest, actor, body] = fields.as_slice() else {
            return Err("bad ATTEST payload".into());
        };
        Ok(Self {
            at: parse_timestamp(at).map_err(|e| e.to_string())?,
            digest: digest.parse().map_err(|e: crate::grid::GridError| e.to_string())?,
            actor: unescape(actor)?,
            text: unescape(body)?,
        })
    }
}

/// A decoded ledger record.
#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Ingest(IngestEntry),
    ChangeSet(ChangeSet),
    Findings(FindingsEntry),
    Attest(AttestEntry),
}

impl Entry {
    pub fn kind(&self) -> RecordKind {
        match self {
            Entry::Ingest(_) => RecordKind::Ingest,
            Entry::ChangeSet(_) => RecordKind::ChangeSet,
            Entry::Findings(_) => RecordKind::Findings,
            Entry::Attest(_) => RecordKind::Attest,
        }
    }

    pub fn to_payload(&self) -> Vec<u8> {
        match self {
            Entry::Ingest(e) => e.to_payload(),
            Entry::ChangeSet(cs) => cs.to_canonical().into_bytes(),
            Entry::Findings(e) => e.to_payload(),
            Entry::Attest(e) => e.to_payload(),
        }
    }

    pub fn decode(record: &LedgerRecord) -> Result<Self, LedgerError> {
        let corrupt = |reason: String| LedgerError::CorruptPayload { seq: record.seq, reason };
        let text = std::str::from_utf8(&record.payload).map_err(|e| corrupt(e.to_string()))?;
        match record.kind {
            RecordKind::Ingest => IngestEntry::from_payload(text).map(Entry::Ingest).map_err(corrupt),
            RecordKind::ChangeSet => {
                ChangeSet::from_canonical(text).map(Entry::ChangeSet).map_err(|e| corrupt(e.to_string()))
            }
            RecordKind::Findings => FindingsEntry::from_payload(text).map(Entry::Findings).map_err(corrupt),
            RecordKind::Attest => AttestEntry::from_payload(text).map(Entry::Attest).map_err(corrupt),
        }
    }
}

/// Value time series of one cell across ingested snapshots. Error values are gaps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSeries {
    pub address: CellAddress,
    pub points: Vec<(DateTime<Utc>, CellValue)>,
}

impl CellSeries {
    pub fn numbers(&self) -> Vec<f64> {
        self.points.iter().filter_map(|(_, v)| v.as_number()).collect()
    }
}

/// One event in a cell's history with the actor and time of its change set.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub timestamp: DateTime<Utc>,
    pub actor: String,
    pub event: ChangeEvent,
}

// ---------------------------------------------------------------------------
// Read views

/// A read-only prefix of a ledger.
#[derive(Clone, Copy)]
pub struct LedgerView<'a> {
    lines: &'a [LogLine],
    objects: &'a BTreeMap<SnapshotDigest, Vec<u8>>,
}

impl<'a> LedgerView<'a> {
    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &'a LedgerRecord> + 'a {
        self.lines.iter().filter_map(|l| l.record.as_ref())
    }

    /// Decoded entries in seq order; undecodable records are skipped.
    pub fn entries(&self) -> Vec<(u64, Entry)> {
        self.records().filter_map(|r| Entry::decode(r).ok().map(|e| (r.seq, e))).collect()
    }

    pub fn ingests(&self) -> Vec<IngestEntry> {
        self.entries()
            .into_iter()
            .filter_map(|(_, e)| match e {
                Entry::Ingest(i) => Some(i),
                _ => None,
            })
            .collect()
    }

    pub fn changesets(&self) -> Vec<(u64, ChangeSet)> {
        self.entries()
            .into_iter()
            .filter_map(|(seq, e)| match e {
                Entry::ChangeSet(cs) => Some((seq, cs)),
                _ => None,
            })
            .collect()
    }

    pub fn findings(&self) -> Vec<FindingsEntry> {
        self.entries()
            .into_iter()
            .filter_map(|(_, e)| match e {
                Entry::Findings(f) => Some(f),
                _ => None,
            })
            .collect()
    }

    pub fn snapshot_bytes(&self, digest: &SnapshotDigest) -> Option<&'a [u8]> {
        self.objects.get(digest).map(Vec::as_slice)
    }

    /// Loads a stored snapshot and checks it against its digest.
    pub fn snapshot(&self, digest: &SnapshotDigest) -> Result<Snapshot, LedgerError> {
        let missing = || LedgerError::MissingObject(digest.to_string());
        let bytes = self.snapshot_bytes(digest).ok_or_else(missing)?;
        let text = std::str::from_utf8(bytes).map_err(|_| missing())?;
        let snapshot = parse_snapshot_file(text).map_err(|_| missing())?;
        if &snapshot.digest() != digest {
            return Err(missing());
        }
        Ok(snapshot)
    }

    /// The snapshot as it was ingested: stored content with that ingest's time and actor.
    pub fn ingested_snapshot(&self, ingest: &IngestEntry) -> Result<Snapshot, LedgerError> {
        let mut s = self.snapshot(&ingest.digest)?;
        s.timestamp = ingest.timestamp;
        s.actor = ingest.actor.clone();
        Ok(s)
    }

    pub fn latest_ingest(&self) -> Option<IngestEntry> {
        self.ingests().pop()
    }

    pub fn series_for_cell(&self, address: &CellAddress) -> CellSeries {
        let mut points = Vec::new();
        for ingest in self.ingests() {
            let Ok(snapshot) = self.snapshot(&ingest.digest) else { continue };
            if let Some(value) = snapshot.get(address).and_then(|c| c.value()).filter(|v| !v.is_error()) {
                points.push((ingest.timestamp, value.clone()));
            }
        }
        CellSeries { address: address.clone(), points }
    }

    pub fn change_history(&self, address: &CellAddress) -> Vec<HistoryEntry> {
        self.changesets()
            .into_iter()
            .flat_map(|(_, cs)| {
                let (timestamp, actor) = (cs.to_time, cs.actor.clone());
                cs.events.into_iter().filter(|e| &e.address == address).map(move |event| HistoryEntry {
                    timestamp,
                    actor: actor.clone(),
                    event,
                })
            })
            .collect()
    }

    /// Every snapshot digest the log refers to.
    pub fn referenced_digests(&self) -> BTreeSet<SnapshotDigest> {
        let mut out = BTreeSet::new();
        for (_, entry) in self.entries() {
            match entry {
                Entry::Ingest(i) => {
                    out.insert(i.digest);
                }
                Entry::ChangeSet(cs) => {
                    out.insert(cs.from_digest);
                    out.insert(cs.to_digest);
                }
                _ => {}
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Ledger

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub struct Ledger {
    workbook_id: Option<String>,
    lines: Vec<LogLine>,
    /// Set when the log bytes did not end with a newline.
    unterminated: bool,
    objects: BTreeMap<SnapshotDigest, Vec<u8>>,
    dir: Option<PathBuf>,
    clock: Clock,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger")
            .field("workbook_id", &self.workbook_id)
            .field("records", &self.lines.len())
            .field("objects", &self.objects.len())
            .field("dir", &self.dir)
            .finish()
    }
}

impl Default for Ledger {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self {
            workbook_id: None,
            lines: Vec::new(),
            unterminated: false,
            objects: BTreeMap::new(),
            dir: None,
            clock: Arc::new(Utc::now),
        }
    }

    /// Rebuilds a ledger from raw log bytes. Lines that fail to parse are kept so that
    /// [`Ledger::verify_chain`] can locate them.
    pub fn from_log_bytes(bytes: &[u8], objects: BTreeMap<SnapshotDigest, Vec<u8>>) -> Self {
        let mut ledger = Self { objects, ..Self::in_memory() };
        let body = match bytes.strip_suffix(b"\n") {
            Some(b) => b,
            None => {
                ledger.unterminated = !bytes.is_empty();
                bytes
            }
        };
        if !body.is_empty() || ledger.unterminated {
            for raw in body.split(|b| *b == b'\n') {
                let record = LedgerRecord::from_line(raw).ok();
                ledger.lines.push(LogLine { raw: raw.to_vec(), record });
            }
        }
        ledger.workbook_id = ledger.view().ingests().first().map(|i| i.workbook_id.clone());
        ledger
    }

    /// Opens the ledger stored in `dir`; a missing directory is an empty ledger that
    /// is created on first append.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let dir = dir.as_ref();
        let log = match fs::read(dir.join(LOG_FILE)) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut objects = BTreeMap::new();
        match fs::read_dir(dir.join(OBJECTS_DIR)) {
            Ok(entries) => {
                for entry in entries {
                    let path = entry?.path();
                    let Some(stem) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".snap"))
                    else {
                        continue;
                    };
                    if let Ok(digest) = stem.parse::<SnapshotDigest>() {
                        objects.insert(digest, fs::read(&path)?);
                    }
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let mut ledger = Self::from_log_bytes(&log, objects);
        ledger.dir = Some(dir.to_path_buf());
        Ok(ledger)
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn workbook_id(&self) -> Option<&str> {
        self.workbook_id.as_deref()
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn view(&self) -> LedgerView<'_> {
        LedgerView { lines: &self.lines, objects: &self.objects }
    }

    /// Records with seq < `len`.
    pub fn view_prefix(&self, len: usize) -> LedgerView<'_> {
        LedgerView { lines: &self.lines[..len.min(self.lines.len())], objects: &self.objects }
    }

    pub fn records(&self) -> impl Iterator<Item = &LedgerRecord> {
        self.lines.iter().filter_map(|l| l.record.as_ref())
    }

    pub fn objects(&self) -> &BTreeMap<SnapshotDigest, Vec<u8>> {
        &self.objects
    }

    /// The log exactly as it would be stored on disk.
    pub fn log_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, line) in self.lines.iter().enumerate() {
            out.extend_from_slice(&line.raw);
            if !(self.unterminated && i + 1 == self.lines.len()) {
                out.push(b'\n');
            }
        }
        out
    }

    /// Checks every record's hash, seq and back-link; reports the first bad seq.
    pub fn verify_chain(&self) -> ChainStatus {
        let mut prev = GENESIS_HASH.to_string();
        for (i, line) in self.lines.iter().enumerate() {
            let seq = i as u64;
            let broken = |reason: &str| ChainStatus::Broken { seq, reason: reason.to_string() };
            let Some(record) = &line.record else {
                let reason = LedgerRecord::from_line(&line.raw).err().unwrap_or_default();
                return broken(&format!("unreadable record: {reason}"));
            };
            if record.seq != seq {
                return broken(&format!("expected seq {seq}, found {}", record.seq));
            }
            if record.prev_hash != prev {
                return broken("prev_hash does not link to the preceding record");
            }
            if record.computed_hash() != record.hash {
                return broken("hash does not match record contents");
            }
            if self.unterminated && i + 1 == self.lines.len() {
                return broken("record is not newline-terminated");
            }
            prev = record.hash.clone();
        }
        ChainStatus::Verified { records: self.lines.len() }
    }

    /// Digests referenced by the log whose objects are missing or do not hash to their name.
    pub fn verify_objects(&self) -> Vec<SnapshotDigest> {
        let view = self.view();
        view.referenced_digests().into_iter().filter(|d| view.snapshot(d).is_err()).collect()
    }

    fn ensure_chain(&self) -> Result<(), LedgerError> {
        match self.verify_chain() {
            ChainStatus::Verified { .. } => Ok(()),
            ChainStatus::Broken { seq, reason } => Err(LedgerError::ChainBroken { seq, reason }),
        }
    }

    /// Appends one record, persisting it first when the ledger is directory-backed.
    pub fn append_record(&mut self, kind: RecordKind, payload: Vec<u8>) -> Result<&LedgerRecord, LedgerError> {
        let prev = match self.lines.last() {
            None => GENESIS_HASH.to_string(),
            Some(LogLine { record: Some(r), .. }) if !self.unterminated => r.hash.clone(),
            Some(_) => {
                return Err(LedgerError::ChainBroken {
                    seq: self.lines.len() as u64 - 1,
                    reason: "cannot append after an unreadable record".into(),
                });
            }
        };
        let record = LedgerRecord::seal(self.lines.len() as u64, prev, kind, payload, (self.clock)());
        let line = record.to_line();
        if let Some(dir) = &self.dir {
            fs::create_dir_all(dir)?;
            let mut log = OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
            log.write_all(format!("{line}\n").as_bytes())?;
            log.sync_data()?;
        }
        self.lines.push(LogLine { raw: line.into_bytes(), record: Some(record) });
        Ok(self.lines.last().and_then(|l| l.record.as_ref()).expect("just pushed"))
    }

    fn append_entry(&mut self, entry: &Entry) -> Result<(), LedgerError> {
        self.append_record(entry.kind(), entry.to_payload()).map(|_| ())
    }

    fn store_object(&mut self, digest: &SnapshotDigest, bytes: Vec<u8>) -> Result<(), LedgerError> {
        if self.objects.contains_key(digest) {
            return Ok(());
        }
        if let Some(dir) = &self.dir {
            let objects = dir.join(OBJECTS_DIR);
            fs::create_dir_all(&objects)?;
            let path = objects.join(format!("{digest}.snap"));
            let tmp = objects.join(format!("{digest}.snap.tmp"));
            fs::write(&tmp, &bytes)?;
            fs::rename(&tmp, &path)?;
        }
        self.objects.insert(digest.clone(), bytes);
        Ok(())
    }

    /// Records a new snapshot and returns the findings its delta produced.
    ///
    /// Re-ingesting the latest content digest is a no-op. Otherwise the snapshot is
    /// stored, an INGEST record is appended and, when a prior snapshot exists, the
    /// change set and the findings from policy evaluation plus newly introduced audit
    /// findings follow. A snapshot carrying an attestation closes with an ATTEST record.
    pub fn ingest_snapshot(
        &mut self,
        s: &Snapshot,
        cfg: &AuditConfig,
        policy: &ControlPolicy,
    ) -> Result<Vec<Finding>, LedgerError> {
        if let Some(expected) = &self.workbook_id
            && expected != &s.workbook_id
        {
            return Err(LedgerError::WorkbookMismatch { expected: expected.clone(), found: s.workbook_id.clone() });
        }
        if let Some(expected) = &policy.workbook_id
            && expected != &s.workbook_id
        {
            return Err(LedgerError::WorkbookMismatch { expected: expected.clone(), found: s.workbook_id.clone() });
        }
        self.ensure_chain()?;

        let digest = s.digest();
        let latest = self.view().latest_ingest();
        if let Some(latest) = &latest {
            if latest.digest == digest {
                return Ok(Vec::new());
            }
            if s.timestamp <= latest.timestamp {
                return Err(LedgerError::NonMonotonicTimestamp {
                    latest: format_timestamp(&latest.timestamp),
                    found: format_timestamp(&s.timestamp),
                });
            }
        }

        let mut pending = vec![Entry::Ingest(IngestEntry {
            workbook_id: s.workbook_id.clone(),
            digest: digest.clone(),
            timestamp: s.timestamp,
            actor: s.actor.clone(),
        })];
        let mut findings = Vec::new();
        if let Some(latest) = &latest {
            let history = self.view();
            let before = history.ingested_snapshot(latest)?;
            let cs = diff_snapshots(&before, s).expect("workbook ids checked above");
            findings = evaluate_policies(&cs, policy, &history);
            findings.extend(new_audit_findings(&before, s, cfg));
            sort_findings(&mut findings);
            pending.push(Entry::ChangeSet(cs));
            pending.push(Entry::Findings(FindingsEntry {
                at: s.timestamp,
                digest: digest.clone(),
                findings: findings.clone(),
            }));
        }
        if let Some(text) = &s.attestation {
            pending.push(Entry::Attest(AttestEntry {
                at: s.timestamp,
                digest: digest.clone(),
                actor: s.actor.clone(),
                text: text.clone(),
            }));
        }

        self.store_object(&digest, write_snapshot_file(s).into_bytes())?;
        for entry in &pending {
            self.append_entry(entry)?;
        }
        self.workbook_id.get_or_insert_with(|| s.workbook_id.clone());
        Ok(findings)
    }

    /// Policy findings for the latest change set, evaluated against the history that
    /// preceded it. Nothing is appended.
    pub fn reevaluate_latest(&self, policy: &ControlPolicy) -> Result<Vec<Finding>, LedgerError> {
        let Some((seq, cs)) = self.view().changesets().pop() else {
            return Ok(Vec::new());
        };
        // The INGEST record precedes its CHANGESET directly.
        let history = self.view_prefix(seq.saturating_sub(1) as usize);
        let mut findings = evaluate_policies(&cs, policy, &history);
        sort_findings(&mut findings);
        Ok(findings)
    }

    pub fn series_for_cell(&self, address: &CellAddress) -> CellSeries {
        self.view().series_for_cell(address)
    }

    pub fn change_history(&self, address: &CellAddress) -> Vec<HistoryEntry> {
        self.view().change_history(address)
    }
}

/// Audit findings on `after` that were not already present on `before`.
fn new_audit_findings(before: &Snapshot, after: &Snapshot, cfg: &AuditConfig) -> Vec<Finding> {
    let key = |f: &Finding| (f.rule_id, f.location.to_string(), f.observed.clone());
    let known: BTreeSet<_> = audit_workbook(before, cfg).iter().map(key).collect();
    audit_workbook(after, cfg).into_iter().filter(|f| !known.contains(&key(f))).collect()
}

/// Exclusive advisory lock on a ledger directory, released on drop.
#[derive(Debug)]
pub struct LedgerLock {
    _file: File,
}

impl LedgerLock {
    pub fn acquire(dir: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(dir.join(LOCK_FILE))?;
        file.lock()?;
        Ok(Self { _file: file })
    }
}
