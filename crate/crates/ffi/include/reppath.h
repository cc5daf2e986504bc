#ifndef REPPATH_H
#define REPPATH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length in bytes of the header placed in front of every framed message.
 */
#define RP_HEADER_LEN 28

/**
 * Length in bytes of a message id.
 */
#define RP_UID_LEN 16

typedef enum RpStatus {
  RP_STATUS_OK = 0,
  RP_STATUS_NULL_ARGUMENT = 1,
  RP_STATUS_INVALID_INPUT = 2,
  RP_STATUS_IO = 3,
  RP_STATUS_BUFFER_TOO_SMALL = 4,
  RP_STATUS_EMPTY = 5,
  RP_STATUS_INTERNAL = 6,
} RpStatus;

/**
 * Online detector over trained automata.
 */
typedef struct RpDetector RpDetector;

/**
 * Receive-side stream state: accepts arbitrary chunks and queues the
 * complete messages found in them.
 */
typedef struct RpReassembler RpReassembler;

/**
 * Generator of unique message ids.
 */
typedef struct RpUidSource RpUidSource;

/**
 * Summary of a linked trace file.
 */
typedef struct RpLinkSummary {
  size_t events;
  size_t edges;
  size_t fragments;
  size_t unmatched_reads;
} RpLinkSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread as a NUL-terminated string
 * and returns its length without the terminator. With a null or short
 * buffer nothing is written; the return value still tells the size.
 *
 * # Safety
 * `buf` must be null or valid for `cap` bytes.
 */
size_t rp_last_error_message(char *buf, size_t cap);

/**
 * Header overhead for messages of the given mean payload size.
 */
double rp_traffic_overhead(double mean_payload_bytes);

struct RpUidSource *rp_uid_source_new(uint64_t seed);

/**
 * # Safety
 * `src` must come from [`rp_uid_source_new`] and `out` be valid for 16 bytes.
 */
enum RpStatus rp_uid_source_next(struct RpUidSource *src, uint8_t *out);

/**
 * # Safety
 * `src` must be null or come from [`rp_uid_source_new`], and not be used afterwards.
 */
void rp_uid_source_free(struct RpUidSource *src);

/**
 * Writes header + payload into `out`. `out_len` receives the framed size
 * even when `out` is too small.
 *
 * # Safety
 * `payload` valid for `len` bytes, `uid` for 16, `out` for `cap`.
 */
enum RpStatus rp_frame_message(const uint8_t *payload,
                               size_t len,
                               const uint8_t *uid,
                               uint8_t *out,
                               size_t cap,
                               size_t *out_len);

struct RpReassembler *rp_reassembler_new(void);

/**
 * Feeds received bytes. `ready` receives the number of queued messages.
 *
 * # Safety
 * `r` from [`rp_reassembler_new`]; `data` valid for `len` bytes.
 */
enum RpStatus rp_reassembler_push(struct RpReassembler *r,
                                  const uint8_t *data,
                                  size_t len,
                                  size_t *ready);

/**
 * Dequeues the oldest complete message. Its uid goes to `uid_out` (16
 * bytes) and its payload to `out`; on `BUFFER_TOO_SMALL` the message stays
 * queued and `payload_len` tells the size needed.
 *
 * # Safety
 * `r` from [`rp_reassembler_new`]; `uid_out` valid for 16 bytes; `out` for `cap`.
 */
enum RpStatus rp_reassembler_pop(struct RpReassembler *r,
                                 uint8_t *uid_out,
                                 uint8_t *out,
                                 size_t cap,
                                 size_t *payload_len);

/**
 * # Safety
 * `r` must be null or come from [`rp_reassembler_new`], and not be used afterwards.
 */
void rp_reassembler_free(struct RpReassembler *r);

/**
 * Links a trace file and reports its size and connectivity.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` valid for one summary.
 */
enum RpStatus rp_link_trace_file(const char *path, bool use_data_ids, struct RpLinkSummary *out);

/**
 * Loads the `*.full.fsa` models of `fsa_dir`. Returns null on failure.
 *
 * # Safety
 * `fsa_dir` must be a NUL-terminated string.
 */
struct RpDetector *rp_detector_load(const char *fsa_dir,
                                    double perf_threshold_pct,
                                    uint64_t idle_ms);

/**
 * Feeds one trace record (a JSON line). `new_anomalies` receives the number
 * of anomalies it caused.
 *
 * # Safety
 * `d` from [`rp_detector_load`]; `line` a NUL-terminated string.
 */
enum RpStatus rp_detector_ingest_line(struct RpDetector *d,
                                      const char *line,
                                      size_t *new_anomalies);

/**
 * Ends the stream and finalizes every open request.
 *
 * # Safety
 * `d` from [`rp_detector_load`].
 */
enum RpStatus rp_detector_finish(struct RpDetector *d, size_t *new_anomalies);

/**
 * Anomalies reported so far; 0 for a null handle.
 *
 * # Safety
 * `d` must be null or come from [`rp_detector_load`].
 */
size_t rp_detector_anomaly_count(const struct RpDetector *d);

/**
 * One anomaly as a text record, NUL-terminated. `needed` receives the
 * length including the terminator.
 *
 * # Safety
 * `d` from [`rp_detector_load`]; `buf` valid for `cap` bytes.
 */
enum RpStatus rp_detector_anomaly(const struct RpDetector *d,
                                  size_t index,
                                  char *buf,
                                  size_t cap,
                                  size_t *needed);

/**
 * # Safety
 * `d` must be null or come from [`rp_detector_load`], and not be used afterwards.
 */
void rp_detector_free(struct RpDetector *d);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPPATH_H */
