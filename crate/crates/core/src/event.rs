//! Trace-event vocabulary and the `.reptrace` record format.
//!
//! A `.reptrace` file is UTF-8, one JSON object per line, with fields in a
//! fixed canonical order so that two traces of the same run diff cleanly.
//! Blank lines and lines starting with `#` are ignored by the reader.
//!
//! ```text
//! {"event_id":"0:12","call":"send","category":"network_communication","args":{"bytes":"1000"},
//!  "ret":1000,"tid":1001,"pid":1000,"node":0,"ts":5021000,"dur":8000,
//!  "msg_id":"…32 hex…","msg_ctx_id":"…32 hex…"}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Serialize, Serializer};
use serde_json::{Map, Value};

pub const THREAD_CREATE: &str = "pthread_create";
pub const THREAD_JOIN: &str = "pthread_join";
pub const FORK: &str = "fork";
pub const VFORK: &str = "vfork";
pub const EXEC: &str = "exec";
pub const EXIT: &str = "exit";
pub const WAIT: &str = "wait";
pub const WAITPID: &str = "waitpid";
pub const KILL: &str = "kill";
pub const SIGWAIT: &str = "sigwait";
pub const QUEUE_PUT: &str = "queue_put";
pub const QUEUE_GET: &str = "queue_get";
pub const SHM_WRITE: &str = "shm_write";
pub const SHM_READ: &str = "shm_read";

const SEND_CALLS: &[&str] = &["send", "sendto", "sendmsg", "write"];
const RECV_CALLS: &[&str] = &["recv", "recvfrom", "recvmsg", "read"];

/// Coarse classification of an intercepted call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CallCategory {
    ThreadManipulation,
    ProcessManipulation,
    NetworkCommunication,
    Synchronization,
    Other,
}

impl CallCategory {
    /// Maps a call name onto its category. Names outside the catalog are `Other`.
    pub fn of(call_name: &str) -> Self {
        match call_name {
            "pthread_create" | "pthread_self" | "pthread_detach" | "pthread_cancel"
            | "pthread_exit" | "clone" => Self::ThreadManipulation,
            "fork" | "vfork" | "exec" | "execve" | "execvp" | "exit" | "_exit" => {
                Self::ProcessManipulation
            }
            "send" | "sendto" | "sendmsg" | "write" | "recv" | "recvfrom" | "recvmsg" | "read" => {
                Self::NetworkCommunication
            }
            "wait" | "waitpid" | "pthread_join" | "signal" | "kill" | "sigwait" | "pause" => {
                Self::Synchronization
            }
            _ => Self::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ThreadManipulation => "thread_manipulation",
            Self::ProcessManipulation => "process_manipulation",
            Self::NetworkCommunication => "network_communication",
            Self::Synchronization => "synchronization",
            Self::Other => "other",
        }
    }
}

impl FromStr for CallCategory {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Ok(match s {
            "thread_manipulation" => Self::ThreadManipulation,
            "process_manipulation" => Self::ProcessManipulation,
            "network_communication" => Self::NetworkCommunication,
            "synchronization" => Self::Synchronization,
            "other" => Self::Other,
            _ => return Err(()),
        })
    }
}

/// Parent-child relationship kinds between two events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelationshipType {
    /// Same-thread succession.
    Tcr,
    /// Thread or process creation.
    Topcr,
    /// Message send to its receive.
    Comr,
    /// Synchronization (join, wait, signal).
    Synr,
    /// Data dependency (write then read of an identified datum).
    Ddr,
}

impl RelationshipType {
    pub const ALL: [RelationshipType; 5] = [Self::Tcr, Self::Topcr, Self::Comr, Self::Synr, Self::Ddr];

    /// Arbitration rank used when a node keeps a single parent; higher wins.
    pub fn priority(self) -> u8 {
        match self {
            Self::Comr => 5,
            Self::Ddr => 4,
            Self::Synr => 3,
            Self::Topcr => 2,
            Self::Tcr => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tcr => "TCR",
            Self::Topcr => "ToPCR",
            Self::Comr => "COMR",
            Self::Synr => "SYNR",
            Self::Ddr => "DDR",
        }
    }
}

impl fmt::Display for RelationshipType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationshipType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "TCR" => Self::Tcr,
            "ToPCR" => Self::Topcr,
            "COMR" => Self::Comr,
            "SYNR" => Self::Synr,
            "DDR" => Self::Ddr,
            other => return Err(format!("unknown relationship type `{other}`")),
        })
    }
}

/// Event identifier: a per-node counter qualified by the node id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId {
    pub node: u32,
    pub seq: u64,
}

impl EventId {
    pub fn new(node: u32, seq: u64) -> Self {
        Self { node, seq }
    }
}

impl fmt::Display for EventId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.seq)
    }
}

impl FromStr for EventId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (node, seq) = s.split_once(':').ok_or_else(|| format!("bad event id `{s}`"))?;
        Ok(Self {
            node: node.parse().map_err(|_| format!("bad node in event id `{s}`"))?,
            seq: seq.parse().map_err(|_| format!("bad sequence in event id `{s}`"))?,
        })
    }
}

impl Serialize for EventId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// 16-byte unique value carried in message headers and used as a context id.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Uid(pub [u8; 16]);

impl Uid {
    pub fn is_nil(&self) -> bool {
        self.0 == [0; 16]
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Uid({})", self.to_hex())
    }
}

impl fmt::Display for Uid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Uid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out).map_err(|e| format!("bad uid `{s}`: {e}"))?;
        Ok(Uid(out))
    }
}

impl Serialize for Uid {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Execution location of an event: (node, process, thread).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ThreadKey {
    pub node: u32,
    pub pid: u64,
    pub tid: u64,
}

/// (node, process) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProcessKey {
    pub node: u32,
    pub pid: u64,
}

/// One intercepted call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub event_id: EventId,
    #[serde(rename = "call")]
    pub call_name: String,
    pub category: CallCategory,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub args: BTreeMap<String, String>,
    #[serde(rename = "ret")]
    pub return_value: i64,
    #[serde(rename = "tid")]
    pub thread_id: u64,
    #[serde(rename = "pid")]
    pub process_id: u64,
    #[serde(rename = "node")]
    pub node_id: u32,
    #[serde(rename = "ts")]
    pub timestamp: u64,
    #[serde(rename = "dur")]
    pub duration: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<Uid>,
    pub msg_ctx_id: Uid,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request_type: Option<String>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EventError {
    #[error("malformed trace record: field `{field}`: {reason}")]
    Malformed { field: String, reason: String },
    #[error("invariant violation in field `{field}`: {reason}")]
    Invariant { field: &'static str, reason: String },
    #[error("duplicate event id {0}")]
    DuplicateId(EventId),
}

impl TraceEvent {
    pub fn thread_key(&self) -> ThreadKey {
        ThreadKey { node: self.node_id, pid: self.process_id, tid: self.thread_id }
    }

    pub fn process_key(&self) -> ProcessKey {
        ProcessKey { node: self.node_id, pid: self.process_id }
    }

    pub fn is_send(&self) -> bool {
        SEND_CALLS.contains(&self.call_name.as_str())
    }

    pub fn is_recv(&self) -> bool {
        RECV_CALLS.contains(&self.call_name.as_str())
    }

    pub fn is_thread_create(&self) -> bool {
        self.call_name == THREAD_CREATE
    }

    pub fn is_process_create(&self) -> bool {
        self.call_name == FORK || self.call_name == VFORK
    }

    pub fn is_creation(&self) -> bool {
        self.is_thread_create() || self.is_process_create()
    }

    pub fn arg(&self, key: &str) -> Option<&str> {
        self.args.get(key).map(String::as_str)
    }

    pub fn arg_u64(&self, key: &str) -> Option<u64> {
        self.arg(key).and_then(|v| v.parse().ok())
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<(), EventError> {
        if self.category != CallCategory::of(&self.call_name) {
            return Err(EventError::Invariant {
                field: "category",
                reason: format!(
                    "call `{}` belongs to {}, record says {}",
                    self.call_name,
                    CallCategory::of(&self.call_name).as_str(),
                    self.category.as_str()
                ),
            });
        }
        let networked = self.category == CallCategory::NetworkCommunication;
        if networked != self.msg_id.is_some() {
            return Err(EventError::Invariant {
                field: "msg_id",
                reason: if networked {
                    format!("network call `{}` without msg_id", self.call_name)
                } else {
                    format!("msg_id present on non-network call `{}`", self.call_name)
                },
            });
        }
        if self.msg_ctx_id.is_nil() {
            return Err(EventError::Invariant { field: "msg_ctx_id", reason: "empty context id".into() });
        }
        if self.event_id.node != self.node_id {
            return Err(EventError::Invariant {
                field: "event_id",
                reason: format!("event id node {} differs from node {}", self.event_id.node, self.node_id),
            });
        }
        if self.is_creation() && self.return_value <= 0 {
            return Err(EventError::Invariant {
                field: "ret",
                reason: format!("creation call `{}` must return the created id", self.call_name),
            });
        }
        Ok(())
    }
}

/// Serializes an event as one trace-record line (no trailing newline).
pub fn encode_event(e: &TraceEvent) -> String {
    serde_json::to_string(e).expect("trace events always serialize")
}

/// Parses and validates a trace-record line.
pub fn decode_event(line: &str) -> Result<TraceEvent, EventError> {
    let value: Value = serde_json::from_str(line.trim()).map_err(|e| EventError::Malformed {
        field: "<record>".into(),
        reason: e.to_string(),
    })?;
    let Value::Object(mut map) = value else {
        return Err(malformed("<record>", "not a JSON object"));
    };
    let event = TraceEvent {
        event_id: take_parsed(&mut map, "event_id")?,
        call_name: take_string(&mut map, "call")?,
        category: {
            let s = take_string(&mut map, "category")?;
            s.parse().map_err(|_| malformed("category", &format!("unknown category `{s}`")))?
        },
        args: match map.remove("args") {
            None => BTreeMap::new(),
            Some(Value::Object(args)) => args
                .into_iter()
                .map(|(k, v)| match v {
                    Value::String(s) => Ok((k, s)),
                    _ => Err(malformed("args", &format!("value of `{k}` is not a string"))),
                })
                .collect::<Result<_, _>>()?,
            Some(_) => return Err(malformed("args", "not an object")),
        },
        return_value: take_i64(&mut map, "ret")?,
        thread_id: take_u64(&mut map, "tid")?,
        process_id: take_u64(&mut map, "pid")?,
        node_id: u32::try_from(take_u64(&mut map, "node")?)
            .map_err(|_| malformed("node", "out of range"))?,
        timestamp: take_u64(&mut map, "ts")?,
        duration: take_u64(&mut map, "dur")?,
        msg_id: match map.contains_key("msg_id") {
            true => Some(take_parsed(&mut map, "msg_id")?),
            false => None,
        },
        msg_ctx_id: take_parsed(&mut map, "msg_ctx_id")?,
        request_type: match map.contains_key("request_type") {
            true => Some(take_string(&mut map, "request_type")?),
            false => None,
        },
    };
    if let Some(extra) = map.keys().next() {
        return Err(malformed(extra, "unknown field"));
    }
    event.validate()?;
    Ok(event)
}

fn malformed(field: &str, reason: &str) -> EventError {
    EventError::Malformed { field: field.to_string(), reason: reason.to_string() }
}

fn take(map: &mut Map<String, Value>, field: &str) -> Result<Value, EventError> {
    map.remove(field).ok_or_else(|| malformed(field, "missing"))
}

fn take_string(map: &mut Map<String, Value>, field: &str) -> Result<String, EventError> {
    match take(map, field)? {
        Value::String(s) => Ok(s),
        _ => Err(malformed(field, "expected a string")),
    }
}

fn take_parsed<T: FromStr<Err = String>>(map: &mut Map<String, Value>, field: &str) -> Result<T, EventError> {
    take_string(map, field)?.parse().map_err(|e: String| malformed(field, &e))
}

fn take_u64(map: &mut Map<String, Value>, field: &str) -> Result<u64, EventError> {
    take(map, field)?.as_u64().ok_or_else(|| malformed(field, "expected an unsigned integer"))
}

fn take_i64(map: &mut Map<String, Value>, field: &str) -> Result<i64, EventError> {
    take(map, field)?.as_i64().ok_or_else(|| malformed(field, "expected an integer"))
}

#[derive(Debug, thiserror::Error)]
pub enum TraceIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Record { line: usize, source: EventError },
}

/// Reads a `.reptrace` stream, enforcing event-id uniqueness.
pub fn read_trace(reader: impl BufRead) -> Result<Vec<TraceEvent>, TraceIoError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let event = decode_event(trimmed).map_err(|source| TraceIoError::Record { line: idx + 1, source })?;
        if !seen.insert(event.event_id) {
            return Err(TraceIoError::Record { line: idx + 1, source: EventError::DuplicateId(event.event_id) });
        }
        out.push(event);
    }
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceEvent>, TraceIoError> {
    let file = std::fs::File::open(path)?;
    read_trace(std::io::BufReader::new(file))
}

pub fn write_trace(mut writer: impl Write, events: &[TraceEvent]) -> std::io::Result<()> {
    for e in events {
        writeln!(writer, "{}", encode_event(e))?;
    }
    Ok(())
}

pub fn write_trace_file(path: &Path, events: &[TraceEvent]) -> std::io::Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_trace(&mut w, events)?;
    w.flush()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn uid(b: u8) -> Uid {
        Uid([b; 16])
    }

    fn sample_send() -> TraceEvent {
        TraceEvent {
            event_id: EventId::new(2, 17),
            call_name: "send".into(),
            category: CallCategory::NetworkCommunication,
            args: [("bytes".to_string(), "1000".to_string())].into_iter().collect(),
            return_value: 1000,
            thread_id: 1001,
            process_id: 1000,
            node_id: 2,
            timestamp: 123_456,
            duration: 800,
            msg_id: Some(uid(7)),
            msg_ctx_id: uid(3),
            request_type: Some("wordcount".into()),
        }
    }

    #[test]
    fn round_trip_with_all_fields() {
        let e = sample_send();
        let line = encode_event(&e);
        for key in ["event_id", "call", "category", "args", "ret", "tid", "pid", "node", "ts", "dur", "msg_id", "msg_ctx_id", "request_type"] {
            assert!(line.contains(&format!("\"{key}\"")), "{key} missing from {line}");
        }
        assert_eq!(decode_event(&line).unwrap(), e);
    }

    #[test]
    fn fork_omits_msg_id() {
        let e = TraceEvent {
            call_name: FORK.into(),
            category: CallCategory::ProcessManipulation,
            args: BTreeMap::new(),
            return_value: 2001,
            msg_id: None,
            request_type: None,
            ..sample_send()
        };
        let line = encode_event(&e);
        assert!(!line.contains("msg_id\":"), "{line}");
        assert!(line.contains("msg_ctx_id"));
        assert_eq!(decode_event(&line).unwrap(), e);
    }

    #[test]
    fn network_call_without_msg_id_is_rejected() {
        let mut e = sample_send();
        e.msg_id = None;
        let line = encode_event(&e);
        assert!(matches!(decode_event(&line), Err(EventError::Invariant { field: "msg_id", .. })));
    }

    #[test]
    fn msg_id_on_fork_is_rejected() {
        let mut e = sample_send();
        e.call_name = FORK.into();
        e.category = CallCategory::ProcessManipulation;
        let line = encode_event(&e);
        assert!(matches!(decode_event(&line), Err(EventError::Invariant { field: "msg_id", .. })));
    }

    #[test]
    fn truncated_line_is_malformed() {
        let line = encode_event(&sample_send());
        let cut = &line[..line.len() / 2];
        assert!(matches!(decode_event(cut), Err(EventError::Malformed { .. })));
    }

    #[test]
    fn missing_field_is_named() {
        let line = encode_event(&sample_send()).replace("\"tid\":1001,", "");
        match decode_event(&line) {
            Err(EventError::Malformed { field, .. }) => assert_eq!(field, "tid"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_calls_are_other() {
        assert_eq!(CallCategory::of("frobnicate"), CallCategory::Other);
        for (name, cat) in [
            ("pthread_create", CallCategory::ThreadManipulation),
            ("pthread_detach", CallCategory::ThreadManipulation),
            ("fork", CallCategory::ProcessManipulation),
            ("exec", CallCategory::ProcessManipulation),
            ("sendmsg", CallCategory::NetworkCommunication),
            ("read", CallCategory::NetworkCommunication),
            ("waitpid", CallCategory::Synchronization),
            ("pthread_join", CallCategory::Synchronization),
            ("signal", CallCategory::Synchronization),
            ("malloc", CallCategory::Other),
            ("open", CallCategory::Other),
        ] {
            assert_eq!(CallCategory::of(name), cat, "{name}");
        }
    }

    #[test]
    fn duplicate_ids_rejected_by_reader() {
        let line = encode_event(&sample_send());
        let text = format!("# header\n{line}\n\n{line}\n");
        let err = read_trace(text.as_bytes()).unwrap_err();
        assert!(matches!(err, TraceIoError::Record { line: 4, source: EventError::DuplicateId(_) }));
    }

    pub(crate) fn arb_event() -> impl Strategy<Value = TraceEvent> {
        let calls = prop::sample::select(vec![
            "send", "recv", "write", "read", "fork", "vfork", "pthread_create", "pthread_join",
            "waitpid", "exec", "malloc", "open", "queue_put", "kill", "weird_call",
        ]);
        (
            calls,
            0u32..8,
            any::<u64>(),
            prop::collection::btree_map("[a-z]{1,6}", "[ -~]{0,12}", 0..4),
            1i64..1_000_000,
            any::<u64>(),
            any::<u64>(),
            any::<u64>(),
            any::<u64>(),
            any::<[u8; 16]>(),
            any::<[u8; 16]>(),
            prop::option::of("[a-z\"\\\\é ]{1,10}"),
        )
            .prop_map(|(call, node, seq, args, ret, tid, pid, ts, dur, m, mut c, rtype)| {
                if c == [0; 16] {
                    c[0] = 1;
                }
                let category = CallCategory::of(call);
                TraceEvent {
                    event_id: EventId::new(node, seq),
                    call_name: call.to_string(),
                    category,
                    args,
                    return_value: ret,
                    thread_id: tid,
                    process_id: pid,
                    node_id: node,
                    timestamp: ts,
                    duration: dur,
                    msg_id: (category == CallCategory::NetworkCommunication).then_some(Uid(m)),
                    msg_ctx_id: Uid(c),
                    request_type: rtype,
                }
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn random_events_round_trip_byte_exact(e in arb_event()) {
            let line = encode_event(&e);
            let back = decode_event(&line).unwrap();
            prop_assert_eq!(encode_event(&back), line);
            prop_assert_eq!(back, e);
        }
    }
}
