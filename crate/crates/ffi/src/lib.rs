//! C ABI over the framing codec, the batch linker and the online detector.
//!
//! Every object is an opaque heap handle created by a `*_new`/`*_load`
//! function and released with the matching `*_free`. Fallible calls return
//! an [`RpStatus`]; the message of the last failure on the calling thread is
//! available from [`rp_last_error_message`].

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use reppath::agent::{frame_message, traffic_overhead, ReassemblyBuffer, UidSource, HEADER_LEN};
use reppath::detect::{Detector, DetectorConfig};
use reppath::event::{decode_event, read_trace_file, Uid};
use reppath::rep::{build_rep, count_fragments, default_data_extractor};
use reppath::train::read_models;

/// Length in bytes of the header placed in front of every framed message.
pub const RP_HEADER_LEN: usize = 28;

const _: () = assert!(RP_HEADER_LEN == HEADER_LEN);

/// Length in bytes of a message id.
pub const RP_UID_LEN: usize = 16;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidInput = 2,
    Io = 3,
    BufferTooSmall = 4,
    Empty = 5,
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: RpStatus, msg: impl Into<String>) -> RpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn guard(f: impl FnOnce() -> RpStatus) -> RpStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(RpStatus::Internal, "internal panic"))
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Option<&'a [u8]> {
    if len == 0 {
        Some(&[])
    } else if data.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(data, len))
    }
}

unsafe fn c_str<'a>(s: *const c_char) -> Result<&'a str, RpStatus> {
    if s.is_null() {
        return Err(fail(RpStatus::NullArgument, "null string"));
    }
    CStr::from_ptr(s).to_str().map_err(|_| fail(RpStatus::InvalidInput, "string is not UTF-8"))
}

/// Copies `src` into `out` when it fits; always reports the needed size.
unsafe fn copy_out(src: &[u8], out: *mut u8, cap: usize, needed: *mut usize) -> RpStatus {
    if !needed.is_null() {
        *needed = src.len();
    }
    if src.len() > cap {
        return fail(RpStatus::BufferTooSmall, format!("{} bytes needed, {cap} available", src.len()));
    }
    if !src.is_empty() {
        if out.is_null() {
            return fail(RpStatus::NullArgument, "null output buffer");
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    RpStatus::Ok
}

/// Copies the last error message of this thread as a NUL-terminated string
/// and returns its length without the terminator. With a null or short
/// buffer nothing is written; the return value still tells the size.
///
/// # Safety
/// `buf` must be null or valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rp_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        if !buf.is_null() && cap > e.len() {
            ptr::copy_nonoverlapping(e.as_ptr(), buf.cast::<u8>(), e.len());
            *buf.add(e.len()) = 0;
        }
        e.len()
    })
}

/// Header overhead for messages of the given mean payload size.
#[no_mangle]
pub extern "C" fn rp_traffic_overhead(mean_payload_bytes: f64) -> f64 {
    traffic_overhead(mean_payload_bytes)
}

/// Generator of unique message ids.
pub struct RpUidSource(UidSource);

#[no_mangle]
pub extern "C" fn rp_uid_source_new(seed: u64) -> *mut RpUidSource {
    Box::into_raw(Box::new(RpUidSource(UidSource::new(seed))))
}

/// # Safety
/// `src` must come from [`rp_uid_source_new`] and `out` be valid for 16 bytes.
#[no_mangle]
pub unsafe extern "C" fn rp_uid_source_next(src: *mut RpUidSource, out: *mut u8) -> RpStatus {
    guard(|| {
        let Some(src) = src.as_mut() else { return fail(RpStatus::NullArgument, "null uid source") };
        if out.is_null() {
            return fail(RpStatus::NullArgument, "null output");
        }
        let uid = src.0.next_uid();
        ptr::copy_nonoverlapping(uid.0.as_ptr(), out, RP_UID_LEN);
        RpStatus::Ok
    })
}

/// # Safety
/// `src` must be null or come from [`rp_uid_source_new`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rp_uid_source_free(src: *mut RpUidSource) {
    if !src.is_null() {
        drop(Box::from_raw(src));
    }
}

/// Writes header + payload into `out`. `out_len` receives the framed size
/// even when `out` is too small.
///
/// # Safety
/// `payload` valid for `len` bytes, `uid` for 16, `out` for `cap`.
#[no_mangle]
pub unsafe extern "C" fn rp_frame_message(
    payload: *const u8,
    len: usize,
    uid: *const u8,
    out: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> RpStatus {
    guard(|| {
        let (Some(payload), Some(uid)) = (bytes(payload, len), bytes(uid, RP_UID_LEN)) else {
            return fail(RpStatus::NullArgument, "null payload or uid");
        };
        let framed = frame_message(payload, Uid(uid.try_into().unwrap()));
        copy_out(&framed, out, cap, out_len)
    })
}

/// Receive-side stream state: accepts arbitrary chunks and queues the
/// complete messages found in them.
pub struct RpReassembler {
    buf: ReassemblyBuffer,
    ready: VecDeque<(Uid, Vec<u8>)>,
}

#[no_mangle]
pub extern "C" fn rp_reassembler_new() -> *mut RpReassembler {
    Box::into_raw(Box::new(RpReassembler { buf: ReassemblyBuffer::new(), ready: VecDeque::new() }))
}

/// Feeds received bytes. `ready` receives the number of queued messages.
///
/// # Safety
/// `r` from [`rp_reassembler_new`]; `data` valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rp_reassembler_push(r: *mut RpReassembler, data: *const u8, len: usize, ready: *mut usize) -> RpStatus {
    guard(|| {
        let Some(r) = r.as_mut() else { return fail(RpStatus::NullArgument, "null reassembler") };
        let Some(data) = bytes(data, len) else { return fail(RpStatus::NullArgument, "null data") };
        let status = match r.buf.push(data) {
            Ok(msgs) => {
                r.ready.extend(msgs);
                RpStatus::Ok
            }
            Err(e) => fail(RpStatus::InvalidInput, e.to_string()),
        };
        if !ready.is_null() {
            *ready = r.ready.len();
        }
        status
    })
}

/// Dequeues the oldest complete message. Its uid goes to `uid_out` (16
/// bytes) and its payload to `out`; on `BUFFER_TOO_SMALL` the message stays
/// queued and `payload_len` tells the size needed.
///
/// # Safety
/// `r` from [`rp_reassembler_new`]; `uid_out` valid for 16 bytes; `out` for `cap`.
#[no_mangle]
pub unsafe extern "C" fn rp_reassembler_pop(
    r: *mut RpReassembler,
    uid_out: *mut u8,
    out: *mut u8,
    cap: usize,
    payload_len: *mut usize,
) -> RpStatus {
    guard(|| {
        let Some(r) = r.as_mut() else { return fail(RpStatus::NullArgument, "null reassembler") };
        let Some((uid, payload)) = r.ready.front() else { return fail(RpStatus::Empty, "no complete message") };
        if uid_out.is_null() {
            return fail(RpStatus::NullArgument, "null uid output");
        }
        let status = copy_out(payload, out, cap, payload_len);
        if status == RpStatus::Ok {
            ptr::copy_nonoverlapping(uid.0.as_ptr(), uid_out, RP_UID_LEN);
            r.ready.pop_front();
        }
        status
    })
}

/// # Safety
/// `r` must be null or come from [`rp_reassembler_new`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rp_reassembler_free(r: *mut RpReassembler) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Summary of a linked trace file.
#[repr(C)]
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RpLinkSummary {
    pub events: usize,
    pub edges: usize,
    pub fragments: usize,
    pub unmatched_reads: usize,
}

/// Links a trace file and reports its size and connectivity.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid for one summary.
#[no_mangle]
pub unsafe extern "C" fn rp_link_trace_file(path: *const c_char, use_data_ids: bool, out: *mut RpLinkSummary) -> RpStatus {
    guard(|| {
        let path = match c_str(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let Some(out) = out.as_mut() else { return fail(RpStatus::NullArgument, "null summary") };
        let events = match read_trace_file(Path::new(path)) {
            Ok(e) => e,
            Err(reppath::event::TraceIoError::Io(e)) => return fail(RpStatus::Io, format!("{path}: {e}")),
            Err(e) => return fail(RpStatus::InvalidInput, format!("{path}: {e}")),
        };
        let extractor = use_data_ids.then_some(default_data_extractor as _);
        match build_rep(events, extractor) {
            Ok((g, unmatched)) => {
                *out = RpLinkSummary { events: g.len(), edges: g.edges.len(), fragments: count_fragments(&g), unmatched_reads: unmatched.len() };
                RpStatus::Ok
            }
            Err(e) => fail(RpStatus::InvalidInput, e.to_string()),
        }
    })
}

/// Online detector over trained automata.
pub struct RpDetector(Detector);

/// Loads the `*.full.fsa` models of `fsa_dir`. Returns null on failure.
///
/// # Safety
/// `fsa_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rp_detector_load(fsa_dir: *const c_char, perf_threshold_pct: f64, idle_ms: u64) -> *mut RpDetector {
    let mut handle = ptr::null_mut();
    guard(|| {
        let dir = match c_str(fsa_dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        match read_models(Path::new(dir)) {
            Ok(models) => {
                let config = DetectorConfig { perf_threshold_pct, idle_us: idle_ms.saturating_mul(1000), ..DetectorConfig::default() };
                handle = Box::into_raw(Box::new(RpDetector(Detector::new(models, config))));
                RpStatus::Ok
            }
            Err(e) => fail(RpStatus::Io, e.to_string()),
        }
    });
    handle
}

/// Feeds one trace record (a JSON line). `new_anomalies` receives the number
/// of anomalies it caused.
///
/// # Safety
/// `d` from [`rp_detector_load`]; `line` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rp_detector_ingest_line(d: *mut RpDetector, line: *const c_char, new_anomalies: *mut usize) -> RpStatus {
    guard(|| {
        let Some(d) = d.as_mut() else { return fail(RpStatus::NullArgument, "null detector") };
        let line = match c_str(line) {
            Ok(l) => l,
            Err(s) => return s,
        };
        match decode_event(line) {
            Ok(e) => {
                let n = d.0.ingest(e).len();
                if !new_anomalies.is_null() {
                    *new_anomalies = n;
                }
                RpStatus::Ok
            }
            Err(e) => fail(RpStatus::InvalidInput, e.to_string()),
        }
    })
}

/// Ends the stream and finalizes every open request.
///
/// # Safety
/// `d` from [`rp_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn rp_detector_finish(d: *mut RpDetector, new_anomalies: *mut usize) -> RpStatus {
    guard(|| {
        let Some(d) = d.as_mut() else { return fail(RpStatus::NullArgument, "null detector") };
        let n = d.0.finish().len();
        if !new_anomalies.is_null() {
            *new_anomalies = n;
        }
        RpStatus::Ok
    })
}

/// Anomalies reported so far; 0 for a null handle.
///
/// # Safety
/// `d` must be null or come from [`rp_detector_load`].
#[no_mangle]
pub unsafe extern "C" fn rp_detector_anomaly_count(d: *const RpDetector) -> usize {
    d.as_ref().map_or(0, |d| d.0.anomalies().len())
}

/// One anomaly as a text record, NUL-terminated. `needed` receives the
/// length including the terminator.
///
/// # Safety
/// `d` from [`rp_detector_load`]; `buf` valid for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rp_detector_anomaly(d: *const RpDetector, index: usize, buf: *mut c_char, cap: usize, needed: *mut usize) -> RpStatus {
    guard(|| {
        let Some(d) = d.as_ref() else { return fail(RpStatus::NullArgument, "null detector") };
        let Some(a) = d.0.anomalies().get(index) else { return fail(RpStatus::InvalidInput, format!("no anomaly {index}")) };
        let mut text = a.to_string().into_bytes();
        text.push(0);
        copy_out(&text, buf.cast::<u8>(), cap, needed)
    })
}

/// # Safety
/// `d` must be null or come from [`rp_detector_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rp_detector_free(d: *mut RpDetector) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}
