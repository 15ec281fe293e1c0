//! Append-only JSON-lines event log with filtered replay and matrix snapshots.
//!
//! A store is a directory:
//!
//! ```text
//! events.jsonl     one envelope per line; line number = position
//! snapshot.json    optional matrix snapshot
//! catalogue.jsonl  optional product catalogue (ProductRecord per line)
//! users.txt        optional user registry, one id per line
//! clusters.csv     optional product cluster map
//! ```
//!
//! Only newline-terminated lines are part of the log, so readers always see a
//! consistent prefix while a single writer appends.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dedup::{ProductClusterMap, ProductRecord};
use crate::model::{
    Event, EventId, EventKind, InteractionMatrix, ModelError, SwipeEvent, TimeWindow, TimestampMs,
    UserId,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const CATALOGUE_FILE: &str = "catalogue.jsonl";
pub const REGISTRY_FILE: &str = "users.txt";
pub const CLUSTERS_FILE: &str = "clusters.csv";

const SNAPSHOT_FORMAT: &str = "swipecf-snapshot";

/// Wire record: `{"version": 1, "type": "...", ...payload fields}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEnvelope {
    pub version: u32,
    #[serde(flatten)]
    pub event: Event,
}

impl EventEnvelope {
    pub fn new(event: Event) -> Self {
        Self {
            version: SCHEMA_VERSION,
            event,
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let event_id = Some(self.event.event_id().clone());
        if self.version != SCHEMA_VERSION {
            return Err(ValidationError {
                event_id,
                reason: format!("unsupported schema version {}", self.version),
            });
        }
        self.event
            .validate()
            .map_err(|reason| ValidationError { event_id, reason })
    }
}

impl From<Event> for EventEnvelope {
    fn from(event: Event) -> Self {
        Self::new(event)
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize)]
#[error("invalid event{}: {reason}", event_id.as_ref().map(|id| format!(" {id}")).unwrap_or_default())]
pub struct ValidationError {
    pub event_id: Option<EventId>,
    pub reason: String,
}

/// Parses and validates one wire line.
pub fn parse_envelope(line: &str) -> Result<EventEnvelope, ValidationError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| ValidationError {
        event_id: None,
        reason: format!("malformed JSON: {e}"),
    })?;
    parse_envelope_value(value)
}

pub fn parse_envelope_value(value: serde_json::Value) -> Result<EventEnvelope, ValidationError> {
    let event_id = value
        .get("event_id")
        .and_then(|v| v.as_str())
        .map(EventId::from);
    let env: EventEnvelope = serde_json::from_value(value).map_err(|e| ValidationError {
        event_id: event_id.clone(),
        reason: e.to_string(),
    })?;
    env.validate()?;
    Ok(env)
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("store directory {0} does not exist")]
    MissingStore(PathBuf),
    #[error("corrupt record at line {line}: {reason}")]
    Corrupt { line: u64, reason: String },
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
}

impl StoreError {
    /// Storage failures may succeed on retry; validation failures never will.
    pub fn is_retriable(&self) -> bool {
        matches!(self, StoreError::Io(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Durability {
    /// Flush to the OS after each append.
    Flush,
    /// fsync after each append (or once per batch).
    #[default]
    Sync,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ReplayMode {
    /// Report corrupt lines and keep going.
    #[default]
    Lenient,
    /// Abort on the first corrupt line.
    Strict,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayFilter {
    pub kinds: Option<Vec<EventKind>>,
    pub user: Option<UserId>,
    pub window: TimeWindow,
    pub variant: Option<String>,
    /// First position to include.
    pub from_position: u64,
}

impl ReplayFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn kind(kind: EventKind) -> Self {
        Self {
            kinds: Some(vec![kind]),
            ..Self::default()
        }
    }

    pub fn matches(&self, event: &Event) -> bool {
        self.kinds
            .as_ref()
            .is_none_or(|k| k.contains(&event.kind()))
            && self.user.as_ref().is_none_or(|u| event.user_id() == u)
            && self.window.contains(event.timestamp_ms())
            && self
                .variant
                .as_deref()
                .is_none_or(|v| event.variant() == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionedEvent {
    pub position: u64,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorruptLine {
    /// 1-based line number.
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Replay {
    pub events: Vec<PositionedEvent>,
    pub corrupt: Vec<CorruptLine>,
}

impl Replay {
    pub fn into_events(self) -> Vec<Event> {
        self.events.into_iter().map(|p| p.event).collect()
    }

    pub fn swipes(&self) -> impl Iterator<Item = &SwipeEvent> {
        self.events.iter().filter_map(|p| match &p.event {
            Event::Swipe(s) => Some(s),
            _ => None,
        })
    }
}

/// Outcome of a batch append.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: usize,
    pub errors: Vec<IngestRejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestRejection {
    /// 0-based index in the submitted batch.
    pub index: usize,
    #[serde(flatten)]
    pub error: ValidationError,
}

/// Read-only handle; cheap to clone and safe to use alongside the writer.
#[derive(Debug, Clone)]
pub struct StoreReader {
    log_path: PathBuf,
}

impl StoreReader {
    /// Read-only handle on an existing store directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(StoreError::MissingStore(dir.to_path_buf()));
        }
        Ok(Self {
            log_path: dir.join(EVENTS_FILE),
        })
    }

    pub fn replay(&self, filter: &ReplayFilter, mode: ReplayMode) -> Result<Replay, StoreError> {
        let mut out = Replay::default();
        for_each_line(&self.log_path, |pos, line| {
            if pos < filter.from_position {
                return Ok(());
            }
            match parse_envelope(line) {
                Ok(env) => {
                    if filter.matches(&env.event) {
                        out.events.push(PositionedEvent {
                            position: pos,
                            event: env.event,
                        });
                    }
                    Ok(())
                }
                Err(e) => {
                    let corrupt = CorruptLine {
                        line: pos + 1,
                        reason: e.to_string(),
                    };
                    match mode {
                        ReplayMode::Strict => Err(StoreError::Corrupt {
                            line: corrupt.line,
                            reason: corrupt.reason,
                        }),
                        ReplayMode::Lenient => {
                            out.corrupt.push(corrupt);
                            Ok(())
                        }
                    }
                }
            }
        })?;
        Ok(out)
    }

    /// Captures the matrix over every complete record in the log.
    pub fn snapshot(&self, clusters: Option<&ProductClusterMap>) -> Result<Snapshot, StoreError> {
        let mut swipes = Vec::new();
        let extent = for_each_line(&self.log_path, |_, line| {
            if let Ok(EventEnvelope {
                event: Event::Swipe(s),
                ..
            }) = parse_envelope(line)
            {
                swipes.push(s);
            }
            Ok(())
        })?;
        let matrix = InteractionMatrix::build(&swipes, clusters)?;
        Ok(Snapshot::new(matrix, extent.lines, clusters.cloned()))
    }

    /// Rebuilds the current matrix from a snapshot plus the events appended
    /// after it.
    pub fn restore(&self, snapshot: &Snapshot) -> Result<InteractionMatrix, StoreError> {
        let tail = self.replay(
            &ReplayFilter {
                kinds: Some(vec![EventKind::Swipe]),
                from_position: snapshot.position,
                ..ReplayFilter::default()
            },
            ReplayMode::Lenient,
        )?;
        let base = snapshot.matrix.winning_swipes();
        Ok(InteractionMatrix::build(
            base.iter().chain(tail.swipes()),
            snapshot.cluster_map.as_ref(),
        )?)
    }
}

/// Lines and bytes of the newline-terminated prefix of a log.
#[derive(Debug, Clone, Copy, Default)]
struct LogExtent {
    lines: u64,
    bytes: u64,
}

/// Calls `f(position, line)` for every complete line of the log.
fn for_each_line(
    path: &Path,
    mut f: impl FnMut(u64, &str) -> Result<(), StoreError>,
) -> Result<LogExtent, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(LogExtent::default()),
        Err(e) => return Err(e.into()),
    };
    let mut reader = BufReader::with_capacity(1 << 16, file);
    let mut buf = Vec::new();
    let mut extent = LogExtent::default();
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 || buf.last() != Some(&b'\n') {
            // EOF, or a torn tail that is not yet part of the log.
            return Ok(extent);
        }
        let pos = extent.lines;
        extent.bytes += n as u64;
        buf.pop();
        match std::str::from_utf8(&buf) {
            Ok(line) => f(pos, line)?,
            Err(e) => f(pos, &format!("\u{0}invalid utf-8: {e}"))?,
        }
        extent.lines += 1;
    }
}

/// Single-writer append-only store.
#[derive(Debug)]
pub struct EventStore {
    dir: PathBuf,
    writer: BufWriter<File>,
    next_position: u64,
    ids: HashSet<EventId>,
    durability: Durability,
}

impl EventStore {
    /// Opens an existing store directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(StoreError::MissingStore(dir.to_path_buf()));
        }
        Self::open_dir(dir)
    }

    /// Opens a store, creating the directory if needed.
    pub fn create(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        fs::create_dir_all(dir.as_ref())?;
        Self::open_dir(dir.as_ref())
    }

    fn open_dir(dir: &Path) -> Result<Self, StoreError> {
        let log_path = dir.join(EVENTS_FILE);
        let mut ids = HashSet::new();
        let extent = for_each_line(&log_path, |_, line| {
            if let Ok(env) = parse_envelope(line) {
                ids.insert(env.event.event_id().clone());
            }
            Ok(())
        })?;
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&log_path)?;
        // Drop a torn tail left by an interrupted append.
        if file.metadata()?.len() != extent.bytes {
            file.set_len(extent.bytes)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            writer: BufWriter::new(file),
            next_position: extent.lines,
            ids,
            durability: Durability::default(),
        })
    }

    pub fn with_durability(mut self, durability: Durability) -> Self {
        self.durability = durability;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(EVENTS_FILE)
    }

    pub fn len(&self) -> u64 {
        self.next_position
    }

    pub fn is_empty(&self) -> bool {
        self.next_position == 0
    }

    pub fn reader(&self) -> StoreReader {
        StoreReader {
            log_path: self.log_path(),
        }
    }

    pub fn replay(&self, filter: &ReplayFilter, mode: ReplayMode) -> Result<Replay, StoreError> {
        self.reader().replay(filter, mode)
    }

    fn check(&self, env: &EventEnvelope) -> Result<(), ValidationError> {
        env.validate()?;
        if self.ids.contains(env.event.event_id()) {
            return Err(ValidationError {
                event_id: Some(env.event.event_id().clone()),
                reason: "duplicate event_id".into(),
            });
        }
        Ok(())
    }

    fn write_line(&mut self, env: &EventEnvelope) -> Result<u64, StoreError> {
        let line = serde_json::to_string(env).map_err(io::Error::other)?;
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.ids.insert(env.event.event_id().clone());
        let pos = self.next_position;
        self.next_position += 1;
        Ok(pos)
    }

    fn commit(&mut self, sync: bool) -> Result<(), StoreError> {
        self.writer.flush()?;
        if sync {
            self.writer.get_ref().sync_data()?;
        }
        Ok(())
    }

    /// Validates and appends one event, returning its position.
    pub fn append(&mut self, env: &EventEnvelope) -> Result<u64, StoreError> {
        self.check(env)?;
        let pos = self.write_line(env)?;
        self.commit(self.durability == Durability::Sync)?;
        Ok(pos)
    }

    /// Appends every valid envelope; invalid ones are reported, not written.
    /// Commits once at the end.
    pub fn append_batch<'a>(
        &mut self,
        envs: impl IntoIterator<Item = &'a EventEnvelope>,
    ) -> Result<IngestReport, StoreError> {
        let mut report = IngestReport::default();
        for (index, env) in envs.into_iter().enumerate() {
            match self.check(env) {
                Ok(()) => {
                    self.write_line(env)?;
                    report.accepted += 1;
                }
                Err(error) => {
                    report.rejected += 1;
                    report.errors.push(IngestRejection { index, error });
                }
            }
        }
        self.commit(self.durability == Durability::Sync)?;
        Ok(report)
    }

    /// Parses JSON-lines text and appends its valid records. Blank lines are
    /// skipped; unparseable lines count as rejected.
    pub fn ingest_jsonl(&mut self, text: &str) -> Result<IngestReport, StoreError> {
        let mut parsed = Vec::new();
        let mut early = Vec::new();
        for (index, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            match parse_envelope(line) {
                Ok(env) => parsed.push((index, env)),
                Err(error) => early.push(IngestRejection { index, error }),
            }
        }
        let mut report = self.append_batch(parsed.iter().map(|(_, e)| e))?;
        for r in &mut report.errors {
            r.index = parsed[r.index].0;
        }
        report.rejected += early.len();
        report.errors.extend(early);
        report.errors.sort_by_key(|r| r.index);
        Ok(report)
    }

    /// Captures the matrix over every event currently in the log.
    pub fn snapshot(&self, clusters: Option<&ProductClusterMap>) -> Result<Snapshot, StoreError> {
        self.reader().snapshot(clusters)
    }

    /// Rebuilds the current matrix from a snapshot plus the events appended
    /// after it.
    pub fn restore(&self, snapshot: &Snapshot) -> Result<InteractionMatrix, StoreError> {
        self.reader().restore(snapshot)
    }
}

/// Matrix over the first `position` events of a log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub version: u32,
    /// Latest swipe timestamp covered.
    pub as_of: Option<TimestampMs>,
    /// Number of log records covered.
    pub position: u64,
    pub matrix: InteractionMatrix,
    pub cluster_map: Option<ProductClusterMap>,
}

impl Snapshot {
    pub fn new(
        matrix: InteractionMatrix,
        position: u64,
        cluster_map: Option<ProductClusterMap>,
    ) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.to_owned(),
            version: SCHEMA_VERSION,
            as_of: matrix.as_of(),
            position,
            matrix,
            cluster_map,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, self).map_err(io::Error::other)?;
            w.flush()?;
            w.get_ref().sync_data()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let file = BufReader::new(File::open(path)?);
        let snap: Snapshot =
            serde_json::from_reader(file).map_err(|e| StoreError::Snapshot(e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SCHEMA_VERSION {
            return Err(StoreError::Snapshot(format!(
                "unsupported snapshot {} v{}",
                snap.format, snap.version
            )));
        }
        Ok(snap)
    }
}

/// Reads a product catalogue: JSON lines, or CSV with a
/// `product_id,title[,referral_url]` header when the extension is `.csv`.
pub fn read_catalogue(path: impl AsRef<Path>) -> Result<Vec<ProductRecord>, StoreError> {
    let path = path.as_ref();
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut r = csv::Reader::from_path(path).map_err(|e| StoreError::Corrupt {
            line: 0,
            reason: e.to_string(),
        })?;
        return r
            .deserialize()
            .enumerate()
            .map(|(i, row)| {
                row.map_err(|e| StoreError::Corrupt {
                    line: i as u64 + 2,
                    reason: e.to_string(),
                })
            })
            .collect();
    }
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                line: i as u64 + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn write_catalogue(
    path: impl AsRef<Path>,
    products: &[ProductRecord],
) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in products {
        serde_json::to_writer(&mut w, p).map_err(io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a user registry: one id per line, blank lines ignored.
pub fn read_registry(path: impl AsRef<Path>) -> Result<Vec<UserId>, StoreError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(UserId::from)
        .collect())
}

pub fn write_registry(path: impl AsRef<Path>, users: &[UserId]) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in users {
        writeln!(w, "{u}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Direction, ImpressionEvent, ImpressionSource, SessionEvent};

    fn swipe(i: usize, user: &str, product: &str, ts: i64) -> EventEnvelope {
        EventEnvelope::new(Event::Swipe(SwipeEvent {
            event_id: EventId::new(format!("e{i}")),
            user_id: user.into(),
            product_id: product.into(),
            direction: Direction::Raid,
            timestamp_ms: ts,
            variant: None,
        }))
    }

    #[test]
    fn wire_format_field_names() {
        let env = EventEnvelope::new(Event::Impression(ImpressionEvent {
            event_id: "i1".into(),
            user_id: "u1".into(),
            product_id: "p1".into(),
            source: ImpressionSource::Recommender,
            similarity_score: Some(0.25),
            timestamp_ms: 7,
            variant: Some("v1".into()),
        }));
        let v: serde_json::Value = serde_json::to_value(&env).unwrap();
        assert_eq!(v["type"], "impression");
        assert_eq!(v["version"], 1);
        assert_eq!(v["source"], "recommender");
        assert_eq!(v["similarity_score"], 0.25);
        assert_eq!(v["timestamp_ms"], 7);
        assert_eq!(v["variant"], "v1");

        let line = r#"{"type":"swipe","version":1,"event_id":"e","user_id":"u","product_id":"p","direction":"dislike","timestamp_ms":5}"#;
        let env = parse_envelope(line).unwrap();
        assert!(matches!(env.event, Event::Swipe(ref s) if s.direction == Direction::Dislike));

        let line = r#"{"type":"session","version":1,"event_id":"s","user_id":"u","session_start_ms":5,"session_end_ms":9}"#;
        assert!(matches!(
            parse_envelope(line).unwrap().event,
            Event::Session(_)
        ));
    }

    #[test]
    fn validation_failures_name_the_event() {
        let missing_user = r#"{"type":"swipe","version":1,"event_id":"e9","product_id":"p","direction":"raid","timestamp_ms":5}"#;
        let err = parse_envelope(missing_user).unwrap_err();
        assert_eq!(err.event_id, Some("e9".into()));
        assert!(err.reason.contains("user_id"), "{}", err.reason);

        let bad_enum = r#"{"type":"swipe","version":1,"event_id":"e8","user_id":"u","product_id":"p","direction":"up","timestamp_ms":5}"#;
        assert_eq!(
            parse_envelope(bad_enum).unwrap_err().event_id,
            Some("e8".into())
        );

        let bad_version = r#"{"type":"swipe","version":2,"event_id":"e7","user_id":"u","product_id":"p","direction":"raid","timestamp_ms":5}"#;
        assert!(parse_envelope(bad_version)
            .unwrap_err()
            .reason
            .contains("version"));

        let no_score = r#"{"type":"impression","version":1,"event_id":"e6","user_id":"u","product_id":"p","source":"recommender","timestamp_ms":5}"#;
        assert!(parse_envelope(no_score).is_err());

        let backwards = EventEnvelope::new(Event::Session(SessionEvent {
            event_id: "s".into(),
            user_id: "u".into(),
            session_start_ms: 10,
            session_end_ms: 5,
            variant: None,
        }));
        assert!(backwards.validate().is_err());
        assert!(parse_envelope("not json").unwrap_err().event_id.is_none());
    }

    #[test]
    fn positions_increase() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EventStore::create(dir.path()).unwrap();
        assert_eq!(store.append(&swipe(0, "u", "p", 1)).unwrap(), 0);
        assert_eq!(store.append(&swipe(1, "u", "q", 2)).unwrap(), 1);
        drop(store);
        let mut store = EventStore::open(dir.path()).unwrap();
        assert_eq!(store.append(&swipe(2, "u", "r", 3)).unwrap(), 2);
    }

    #[test]
    fn rejects_duplicates_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EventStore::create(dir.path()).unwrap();
        store.append(&swipe(0, "u", "p", 1)).unwrap();
        let dup = store.append(&swipe(0, "v", "q", 2)).unwrap_err();
        assert!(matches!(dup, StoreError::Validation(_)));
        assert!(!dup.is_retriable());
        let missing = store.append(&swipe(1, "", "q", 2)).unwrap_err();
        assert!(matches!(missing, StoreError::Validation(ref v) if v.reason.contains("user_id")));
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn missing_store() {
        let dir = tempfile::tempdir().unwrap();
        let err = EventStore::open(dir.path().join("nope")).unwrap_err();
        assert!(matches!(err, StoreError::MissingStore(_)));
    }

    #[test]
    fn replay_filters() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EventStore::create(dir.path()).unwrap();
        assert!(store
            .replay(&ReplayFilter::all(), ReplayMode::Strict)
            .unwrap()
            .events
            .is_empty());
        for i in 0..20 {
            let user = if i % 3 == 0 { "u1" } else { "u2" };
            store.append(&swipe(i, user, "p", i as i64 * 10)).unwrap();
        }
        let f = ReplayFilter {
            user: Some("u1".into()),
            ..ReplayFilter::default()
        };
        let got = store.replay(&f, ReplayMode::Strict).unwrap();
        assert_eq!(got.events.len(), 7);
        assert!(got
            .events
            .iter()
            .all(|e| e.event.user_id().as_str() == "u1"));
        let f = ReplayFilter {
            window: TimeWindow::new(Some(50), Some(100)),
            ..ReplayFilter::default()
        };
        let got = store.replay(&f, ReplayMode::Strict).unwrap();
        let positions: Vec<u64> = got.events.iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![5, 6, 7, 8, 9]);
    }

    #[test]
    fn corrupt_lines_reported_or_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EventStore::create(dir.path()).unwrap();
        store.append(&swipe(0, "u", "p", 1)).unwrap();
        drop(store);
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join(EVENTS_FILE))
            .unwrap();
        f.write_all(b"{garbage\n").unwrap();
        drop(f);
        let mut store = EventStore::open(dir.path()).unwrap();
        store.append(&swipe(1, "u", "q", 2)).unwrap();

        let lenient = store
            .replay(&ReplayFilter::all(), ReplayMode::Lenient)
            .unwrap();
        assert_eq!(lenient.events.len(), 2);
        assert_eq!(lenient.corrupt.len(), 1);
        assert_eq!(lenient.corrupt[0].line, 2);
        let strict = store
            .replay(&ReplayFilter::all(), ReplayMode::Strict)
            .unwrap_err();
        assert!(matches!(strict, StoreError::Corrupt { line: 2, .. }));
    }

    #[test]
    fn torn_tail_is_invisible_and_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EventStore::create(dir.path()).unwrap();
        store.append(&swipe(0, "u", "p", 1)).unwrap();
        drop(store);
        let mut f = OpenOptions::new()
            .append(true)
            .open(dir.path().join(EVENTS_FILE))
            .unwrap();
        f.write_all(br#"{"type":"swipe","#).unwrap();
        drop(f);
        let reader = StoreReader {
            log_path: dir.path().join(EVENTS_FILE),
        };
        let r = reader
            .replay(&ReplayFilter::all(), ReplayMode::Strict)
            .unwrap();
        assert_eq!(r.events.len(), 1);
        let mut store = EventStore::open(dir.path()).unwrap();
        assert_eq!(store.append(&swipe(1, "u", "q", 2)).unwrap(), 1);
        let r = store
            .replay(&ReplayFilter::all(), ReplayMode::Strict)
            .unwrap();
        assert_eq!(r.events.len(), 2);
    }

    #[test]
    fn ingest_jsonl_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EventStore::create(dir.path()).unwrap();
        assert_eq!(store.ingest_jsonl("").unwrap(), IngestReport::default());
        let good = serde_json::to_string(&swipe(0, "u", "p", 1)).unwrap();
        let text = format!("{good}\n\nnope\n{good}\n");
        let r = store.ingest_jsonl(&text).unwrap();
        assert_eq!((r.accepted, r.rejected), (1, 2));
        assert_eq!(
            r.errors.iter().map(|e| e.index).collect::<Vec<_>>(),
            vec![1, 2]
        );
    }

    #[test]
    fn snapshot_roundtrip_and_restore() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = EventStore::create(dir.path())
            .unwrap()
            .with_durability(Durability::Flush);
        for i in 0..30 {
            store
                .append(&swipe(
                    i,
                    &format!("u{}", i % 4),
                    &format!("p{}", i % 7),
                    i as i64,
                ))
                .unwrap();
        }
        let snap = store.snapshot(None).unwrap();
        let path = dir.path().join(SNAPSHOT_FILE);
        snap.write(&path).unwrap();
        let loaded = Snapshot::read(&path).unwrap();
        assert_eq!(loaded, snap);
        assert_eq!(loaded.as_of, Some(29));
        for i in 30..45 {
            store
                .append(&swipe(i, &format!("u{}", i % 5), &format!("p{}", i % 9), 5))
                .unwrap();
        }
        let full = store.snapshot(None).unwrap().matrix;
        assert_eq!(store.restore(&loaded).unwrap(), full);
    }

    #[test]
    fn catalogue_and_registry_files() {
        let dir = tempfile::tempdir().unwrap();
        let products = vec![
            ProductRecord {
                product_id: "p1".into(),
                title: "Oak table".into(),
                referral_url: Some("https://example.com/p1".into()),
            },
            ProductRecord {
                product_id: "p2".into(),
                title: "Rug".into(),
                referral_url: None,
            },
        ];
        let path = dir.path().join(CATALOGUE_FILE);
        write_catalogue(&path, &products).unwrap();
        assert_eq!(read_catalogue(&path).unwrap(), products);

        let csv_path = dir.path().join("cat.csv");
        fs::write(
            &csv_path,
            "product_id,title,referral_url\np1,Oak table,https://example.com/p1\np2,Rug,\n",
        )
        .unwrap();
        let from_csv = read_catalogue(&csv_path).unwrap();
        assert_eq!(from_csv[0], products[0]);
        assert_eq!(from_csv[1].title, "Rug");

        let users: Vec<UserId> = vec!["a".into(), "b".into()];
        let path = dir.path().join(REGISTRY_FILE);
        write_registry(&path, &users).unwrap();
        assert_eq!(read_registry(&path).unwrap(), users);
    }
}
