//! Call-boundary agent: message framing, context bookkeeping and event emission.
//!
//! Every transmitted message is prefixed with a 28-byte header:
//!
//! ```text
//! offset  size  field
//!      0     2  start delimiter 0xD5 0xAA
//!      2     8  original payload length, big-endian u64
//!     10    16  message uid
//!     26     2  end delimiter 0xAA 0xD5
//! ```
//!
//! Stream transports feed received bytes through a [`ReassemblyBuffer`] which
//! yields exactly one `(uid, payload)` per transmitted frame regardless of how
//! the stream was split or coalesced. Datagram transports carry one frame per
//! datagram and use [`unframe_datagram`].

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::event::{
    CallCategory, EventId, ThreadKey, TraceEvent, Uid, QUEUE_GET, SHM_READ, THREAD_CREATE,
};

pub const HEADER_LEN: usize = 28;
pub const START_DELIM: [u8; 2] = [0xD5, 0xAA];
pub const END_DELIM: [u8; 2] = [0xAA, 0xD5];

/// Calls after which a thread starts a fresh context, like a receive whose
/// sender carried no header (dequeue from a broker, read of a shared buffer).
pub const CONTEXT_OPENING_CALLS: &[&str] = &[QUEUE_GET, SHM_READ];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WireHeader {
    pub length: u64,
    pub uid: Uid,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FramingError {
    #[error("framing corruption at stream offset {offset}: expected start delimiter, found {found:02x?}")]
    BadStartDelimiter { offset: u64, found: Vec<u8> },
    #[error("framing corruption at stream offset {offset}: expected end delimiter, found {found:02x?}")]
    BadEndDelimiter { offset: u64, found: [u8; 2] },
    #[error("datagram of {actual} bytes does not match header length {declared}")]
    LengthMismatch { declared: u64, actual: usize },
    #[error("datagram shorter than a header ({0} bytes)")]
    Truncated(usize),
    #[error("stream previously failed and can no longer be parsed")]
    Poisoned,
}

impl WireHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..2].copy_from_slice(&START_DELIM);
        out[2..10].copy_from_slice(&self.length.to_be_bytes());
        out[10..26].copy_from_slice(&self.uid.0);
        out[26..28].copy_from_slice(&END_DELIM);
        out
    }

    /// Parses a complete header. `offset` is only used for error reporting.
    pub fn decode(bytes: &[u8; HEADER_LEN], offset: u64) -> Result<Self, FramingError> {
        if bytes[0..2] != START_DELIM {
            return Err(FramingError::BadStartDelimiter { offset, found: bytes[0..2].to_vec() });
        }
        if bytes[26..28] != END_DELIM {
            return Err(FramingError::BadEndDelimiter { offset: offset + 26, found: [bytes[26], bytes[27]] });
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[2..10]);
        let mut uid = [0u8; 16];
        uid.copy_from_slice(&bytes[10..26]);
        Ok(Self { length: u64::from_be_bytes(len), uid: Uid(uid) })
    }
}

/// Prepends the header to `payload`.
pub fn frame_message(payload: &[u8], uid: Uid) -> Vec<u8> {
    let header = WireHeader { length: payload.len() as u64, uid };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(payload);
    out
}

/// Splits a single framed datagram back into `(uid, payload)`.
pub fn unframe_datagram(datagram: &[u8]) -> Result<(Uid, Vec<u8>), FramingError> {
    if datagram.len() < HEADER_LEN {
        if datagram.len() >= 2 && datagram[0..2] != START_DELIM {
            return Err(FramingError::BadStartDelimiter { offset: 0, found: datagram[0..2].to_vec() });
        }
        return Err(FramingError::Truncated(datagram.len()));
    }
    let header = WireHeader::decode(datagram[..HEADER_LEN].try_into().unwrap(), 0)?;
    let body = &datagram[HEADER_LEN..];
    if header.length != body.len() as u64 {
        return Err(FramingError::LengthMismatch { declared: header.length, actual: body.len() });
    }
    Ok((header.uid, body.to_vec()))
}

/// Traffic overhead of the header relative to a mean payload size.
pub fn traffic_overhead(mean_payload_bytes: f64) -> f64 {
    HEADER_LEN as f64 / mean_payload_bytes
}

/// Per-connection receive state. Holds at most one partially received frame.
#[derive(Debug, Default, Clone)]
pub struct ReassemblyBuffer {
    buf: Vec<u8>,
    /// Stream offset of `buf[0]`.
    base: u64,
    header: Option<WireHeader>,
    poisoned: bool,
}

impl ReassemblyBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bytes held back waiting for the rest of a frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Feeds the next contiguous slice of the stream and returns every message
    /// it completes, in stream order.
    pub fn push(&mut self, chunk: &[u8]) -> Result<Vec<(Uid, Vec<u8>)>, FramingError> {
        if self.poisoned {
            return Err(FramingError::Poisoned);
        }
        self.buf.extend_from_slice(chunk);
        let mut out = Vec::new();
        let mut pos = 0usize;
        loop {
            let avail = &self.buf[pos..];
            let header = match self.header {
                Some(h) => h,
                None => {
                    let probe = avail.len().min(2);
                    if avail[..probe] != START_DELIM[..probe] {
                        self.poisoned = true;
                        return Err(FramingError::BadStartDelimiter {
                            offset: self.base + pos as u64,
                            found: avail[..probe].to_vec(),
                        });
                    }
                    if avail.len() < HEADER_LEN {
                        break;
                    }
                    let parsed = WireHeader::decode(avail[..HEADER_LEN].try_into().unwrap(), self.base + pos as u64);
                    match parsed {
                        Ok(h) => {
                            self.header = Some(h);
                            h
                        }
                        Err(e) => {
                            self.poisoned = true;
                            return Err(e);
                        }
                    }
                }
            };
            let need = HEADER_LEN as u64 + header.length;
            if (avail.len() as u64) < need {
                break;
            }
            let need = need as usize;
            out.push((header.uid, avail[HEADER_LEN..need].to_vec()));
            self.header = None;
            pos += need;
        }
        self.buf.drain(..pos);
        self.base += pos as u64;
        Ok(out)
    }
}

/// Seeded source of message and context uids.
#[derive(Debug, Clone)]
pub struct UidSource {
    rng: ChaCha8Rng,
}

impl UidSource {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_uid(&mut self) -> Uid {
        loop {
            let mut b = [0u8; 16];
            self.rng.fill_bytes(&mut b);
            let uid = Uid(b);
            if !uid.is_nil() {
                return uid;
            }
        }
    }
}

/// Current context id of every thread seen on a host.
#[derive(Debug, Default, Clone)]
pub struct CtxTable {
    current: BTreeMap<ThreadKey, Uid>,
}

impl CtxTable {
    pub fn get(&self, thread: &ThreadKey) -> Option<Uid> {
        self.current.get(thread).copied()
    }

    pub fn set(&mut self, thread: ThreadKey, ctx: Uid) {
        self.current.insert(thread, ctx);
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }

    fn get_or_create(&mut self, thread: ThreadKey, uids: &mut UidSource) -> Uid {
        *self.current.entry(thread).or_insert_with(|| uids.next_uid())
    }
}

/// Where and when an intercepted call ran.
#[derive(Debug, Clone, Copy)]
pub struct CallSite {
    pub pid: u64,
    pub tid: u64,
    pub timestamp: u64,
    pub duration: u64,
}

/// Host-side interception logic. One instance per node.
#[derive(Debug, Clone)]
pub struct Agent {
    node: u32,
    next_seq: u64,
    ctx: CtxTable,
    uids: UidSource,
}

impl Agent {
    pub fn new(node: u32, seed: u64) -> Self {
        Self { node, next_seq: 1, ctx: CtxTable::default(), uids: UidSource::new(seed ^ (u64::from(node) << 32)) }
    }

    pub fn node(&self) -> u32 {
        self.node
    }

    pub fn ctx_table(&self) -> &CtxTable {
        &self.ctx
    }

    pub fn fresh_uid(&mut self) -> Uid {
        self.uids.next_uid()
    }

    fn key(&self, site: &CallSite) -> ThreadKey {
        ThreadKey { node: self.node, pid: site.pid, tid: site.tid }
    }

    fn event(&mut self, site: &CallSite, call: &str, args: BTreeMap<String, String>, ret: i64, msg_id: Option<Uid>, ctx: Uid) -> TraceEvent {
        let id = EventId::new(self.node, self.next_seq);
        self.next_seq += 1;
        TraceEvent {
            event_id: id,
            call_name: call.to_string(),
            category: CallCategory::of(call),
            args,
            return_value: ret,
            thread_id: site.tid,
            process_id: site.pid,
            node_id: self.node,
            timestamp: site.timestamp,
            duration: site.duration,
            msg_id,
            msg_ctx_id: ctx,
            request_type: None,
        }
    }

    /// Frames an outgoing message. The event keeps the thread's previous
    /// context; the thread continues under the new message id.
    pub fn on_send(&mut self, site: &CallSite, call: &str, payload: &[u8], mut args: BTreeMap<String, String>) -> (Vec<u8>, TraceEvent) {
        let key = self.key(site);
        let old_ctx = self.ctx.get_or_create(key, &mut self.uids);
        let uid = self.uids.next_uid();
        let framed = frame_message(payload, uid);
        args.insert("bytes".into(), payload.len().to_string());
        let event = self.event(site, call, args, payload.len() as i64, Some(uid), old_ctx);
        self.ctx.set(key, uid);
        (framed, event)
    }

    /// Records a reassembled message; the received uid becomes the thread's context.
    pub fn on_recv(&mut self, site: &CallSite, call: &str, message: (Uid, &[u8]), mut args: BTreeMap<String, String>) -> TraceEvent {
        let key = self.key(site);
        let (uid, payload) = message;
        args.insert("bytes".into(), payload.len().to_string());
        self.ctx.set(key, uid);
        self.event(site, call, args, payload.len() as i64, Some(uid), uid)
    }

    /// Any non-communication call. Creation calls hand the creator's context to the child.
    pub fn on_other_call(&mut self, site: &CallSite, call: &str, args: BTreeMap<String, String>, ret: i64) -> TraceEvent {
        let key = self.key(site);
        let ctx = if CONTEXT_OPENING_CALLS.contains(&call) {
            let fresh = self.uids.next_uid();
            self.ctx.set(key, fresh);
            fresh
        } else {
            self.ctx.get_or_create(key, &mut self.uids)
        };
        let event = self.event(site, call, args, ret, None, ctx);
        if event.is_creation() && ret > 0 {
            let child = if call == THREAD_CREATE {
                ThreadKey { node: self.node, pid: site.pid, tid: ret as u64 }
            } else {
                // A new process's main thread id equals its pid.
                ThreadKey { node: self.node, pid: ret as u64, tid: ret as u64 }
            };
            self.ctx.set(child, ctx);
        }
        event
    }
}
